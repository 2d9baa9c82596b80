//! CSV ingestion and round-trip-precision CSV output.
//!
//! Site data: header `time,status,<covariate names…>`, status in {0, 1}.

use std::io::{Read, Write};
use std::path::Path;

use crate::basis::BasisConfig;
use crate::error::{Error, Result};
use crate::harness::MetricsRow;
use crate::likelihood::{validate_records, SiteData, SubjectRecord};
use crate::renewable::{AicRow, FitReport};

pub fn read_site_csv<R: Read>(reader: R) -> Result<SiteData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "time" || &headers[1] != "status" {
        return Err(Error::InvalidConfig(format!(
            "site CSV header must start with time,status; found {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let mut records = Vec::new();
    for (index, row) in rdr.records().enumerate() {
        let row = row?;
        let field = |i: usize| -> Result<f64> {
            let raw = row.get(i).unwrap_or("");
            raw.parse::<f64>().map_err(|_| Error::InvalidRecord {
                index,
                reason: format!("column {:?} has non-numeric or missing value {raw:?}", &headers[i]),
            })
        };
        let time = field(0)?;
        let event = match row.get(1) {
            Some("1") => true,
            Some("0") => false,
            other => {
                return Err(Error::InvalidRecord {
                    index,
                    reason: format!("status must be 0 or 1, got {:?}", other.unwrap_or("")),
                })
            }
        };
        let x = (2..headers.len()).map(field).collect::<Result<Vec<_>>>()?;
        records.push(SubjectRecord::new(x, time, event));
    }
    Ok(SiteData::new(names, records))
}

/// Reads a site file and checks every record against the basis support.
pub fn load_site(path: &Path, basis: &BasisConfig) -> Result<SiteData> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot open {}: {e}", path.display())))?;
    let site = read_site_csv(file)?;
    validate_records(&site.records, site.n_covariates(), basis)?;
    Ok(site)
}

pub fn write_site_csv<W: Write>(site: &SiteData, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["time".to_string(), "status".to_string()];
    header.extend(site.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for rec in &site.records {
        let mut row = vec![rec.time.to_string(), u8::from(rec.event).to_string()];
        row.extend(rec.x.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_csv<W: Write>(report: &FitReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["name", "estimate", "std_error", "z", "hazard_ratio"])?;
    for c in &report.coefficients {
        w.write_record([
            c.name.clone(),
            c.estimate.to_string(),
            c.std_error.to_string(),
            c.z.to_string(),
            c.hazard_ratio.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses the coefficient table written by [`write_report_csv`] into
/// `(name, estimate, std_error)` triples.
pub fn read_report_csv<R: Read>(reader: R) -> Result<Vec<(String, f64, f64)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (index, row) in rdr.records().enumerate() {
        let row = row?;
        let num = |i: usize| {
            row.get(i)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::InvalidRecord {
                    index,
                    reason: "malformed report row".into(),
                })
        };
        out.push((row.get(0).unwrap_or("").to_string(), num(1)?, num(2)?));
    }
    Ok(out)
}

pub fn write_curve_csv<W: Write>(curve: &[(f64, f64)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["time", "survival"])?;
    for (t, s) in curve {
        w.write_record([t.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aic_csv<W: Write>(table: &[AicRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["degree", "loglik", "aic", "failure"])?;
    for row in table {
        w.write_record([
            row.degree.to_string(),
            row.loglik.to_string(),
            row.aic.to_string(),
            row.failure.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "method",
        "degree",
        "coefficient",
        "name",
        "arb_pct",
        "cp_pct",
        "mse",
        "ase",
        "ese",
        "mean",
        "replications",
        "nonconverged",
    ])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.degree.map(|d| d.to_string()).unwrap_or_default(),
            r.coefficient.to_string(),
            r.name.clone(),
            r.arb_pct.to_string(),
            r.cp_pct.to_string(),
            r.mse.to_string(),
            r.ase.to_string(),
            r.ese.to_string(),
            r.mean.to_string(),
            r.replications.to_string(),
            r.nonconverged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

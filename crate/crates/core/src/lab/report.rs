//! Metrics CSV: `experiment,seed,sweep_key,sweep_value,<metrics...>,attack,config_hash`.
//!
//! Metric columns are the sorted union of metric names across rows; a row
//! lacking a metric leaves the cell empty. Floats use Rust's shortest
//! round-trip formatting, so reading a file back recovers every bit.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;

const LEADING: [&str; 4] = ["experiment", "seed", "sweep_key", "sweep_value"];
const TRAILING: [&str; 2] = ["attack", "config_hash"];

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub fn metric_columns(records: &[MetricsRecord]) -> Vec<String> {
    let names: BTreeSet<&String> = records.iter().flat_map(|r| r.metrics.keys()).collect();
    names.into_iter().cloned().collect()
}

pub fn to_csv(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let metrics = metric_columns(records);
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = LEADING
        .iter()
        .copied()
        .chain(metrics.iter().map(String::as_str))
        .chain(TRAILING)
        .collect();
    w.write_record(&header).map_err(csv_error)?;
    for r in records {
        let mut row = vec![
            r.experiment.clone(),
            r.seed.to_string(),
            r.sweep_key.clone(),
            r.sweep_value.to_string(),
        ];
        row.extend(metrics.iter().map(|m| r.get(m).map(|v| v.to_string()).unwrap_or_default()));
        row.push(r.attack.clone());
        row.push(r.config_hash.clone());
        w.write_record(&row).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn from_csv(bytes: &[u8]) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers().map_err(csv_error)?.iter().map(String::from).collect();
    let n = header.len();
    if n < LEADING.len() + TRAILING.len()
        || header[..LEADING.len()] != LEADING
        || header[n - TRAILING.len()..] != TRAILING
    {
        return Err(Error::Format(format!("unexpected CSV header {header:?}")));
    }
    let metrics = &header[LEADING.len()..n - TRAILING.len()];
    let number = |s: &str, col: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Format(format!("bad number `{s}` in column {col}")))
    };
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_error)?;
        let seed = row[1]
            .parse()
            .map_err(|_| Error::Format(format!("bad seed `{}`", &row[1])))?;
        let mut rec = MetricsRecord::new(&row[0], seed, &row[2], number(&row[3], "sweep_value")?);
        for (j, name) in metrics.iter().enumerate() {
            let cell = &row[LEADING.len() + j];
            if !cell.is_empty() {
                rec.insert(name, number(cell, name)?)?;
            }
        }
        rec.attack = row[n - 2].to_string();
        rec.config_hash = row[n - 1].to_string();
        out.push(rec);
    }
    Ok(out)
}

pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    std::fs::write(path, to_csv(records)?)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    from_csv(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<MetricsRecord> {
        let mut a = MetricsRecord::new("budget-ablation", 3, "budget_255", 4.0);
        a.insert("protection_score", 2.0 / 3.0).unwrap();
        a.insert("linf", 0.031_372_549_019_607_84).unwrap();
        a.attack = "gaussian(k=7,s=1)".into();
        a.config_hash = "ab".into();
        let mut b = MetricsRecord::new("budget-ablation", 4, "budget_255", 8.0);
        b.insert("mmd", 1e-300).unwrap();
        (vec![a, b]).into_iter().collect()
    }

    #[test]
    fn header_order_is_fixed() {
        let text = String::from_utf8(to_csv(&sample()).unwrap()).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "experiment,seed,sweep_key,sweep_value,linf,mmd,protection_score,attack,config_hash"
        );
        assert!(text.contains("\"gaussian(k=7,s=1)\""));
    }

    #[test]
    fn round_trip_is_exact() {
        let rows = sample();
        let bytes = to_csv(&rows).unwrap();
        let back = from_csv(&bytes).unwrap();
        assert_eq!(back, rows);
        assert_eq!(to_csv(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_foreign_headers() {
        assert!(from_csv(b"a,b\n1,2\n").is_err());
        assert!(from_csv(b"experiment,seed,sweep_key,sweep_value,attack,config_hash\nx,notanumber,k,1,none,\n").is_err());
    }
}

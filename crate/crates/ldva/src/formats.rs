//! Text formats: semantic-vector CSV, π dumps and fixed-precision JSON.

use std::path::Path;

use ldva_core::heads::{Domain, SemanticSet};
use serde_json::value::RawValue;

use crate::error::{Error, Result};

/// Reads `label,s_0,...,s_{d-1}` rows. Vectors are L2-normalized on load.
pub fn read_semantics(path: &Path) -> Result<SemanticSet> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut entries = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let line = i + 2;
        let mut fields = rec.iter();
        let label = fields
            .next()
            .and_then(|s| s.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::format(path, format!("line {line}: label is not a non-negative integer")))?;
        let values = fields
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("line {line}: {e}")))?;
        entries.push((label, values));
    }
    let set = SemanticSet::new(entries).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(set.normalized())
}

pub fn semantics_csv(set: &SemanticSet) -> String {
    let mut out = String::from("label");
    (0..set.dim()).for_each(|i| out.push_str(&format!(",s_{i}")));
    out.push('\n');
    for &l in set.labels() {
        out.push_str(&l.to_string());
        for v in set.vector(l).expect("label from the set") {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn domain_name(d: Option<Domain>) -> &'static str {
    match d {
        Some(Domain::Source) => "source",
        Some(Domain::Target) => "target",
        None => "",
    }
}

/// π dump with header `label,domain,pi_0,...`. Values print in shortest
/// round-trip form, so parsing them back gives the exact f64.
pub fn pi_csv(labels: &[usize], domain: Option<Domain>, codes: &[Vec<f64>]) -> String {
    let width = codes.first().map_or(0, Vec::len);
    let mut out = String::from("label,domain");
    (0..width).for_each(|i| out.push_str(&format!(",pi_{i}")));
    out.push('\n');
    for (l, code) in labels.iter().zip(codes) {
        out.push_str(&format!("{l},{}", domain_name(domain)));
        code.iter().for_each(|v| out.push_str(&format!(",{v}")));
        out.push('\n');
    }
    out
}

/// JSON number with six decimals; non-finite values become `null`.
pub fn num(x: f64) -> Box<RawValue> {
    let s = if x.is_finite() { format!("{x:.6}") } else { "null".into() };
    RawValue::from_string(s).expect("formatted number is valid JSON")
}

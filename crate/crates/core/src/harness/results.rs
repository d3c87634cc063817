use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "dataset,victim,defender,attack,seed,ca_pct,aa_pct,wall_s";

/// One evaluated (dataset, victim, defense, attack, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub victim: String,
    pub defender: String,
    pub attack: String,
    pub seed: u64,
    pub ca_pct: f64,
    pub aa_pct: f64,
    pub wall_s: f64,
}

/// Rounds to two decimals, the precision rows are stored at.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

impl ResultRow {
    /// Accuracies are fractions in `[0, 1]`.
    pub fn new(
        dataset: &str,
        victim: &str,
        defender: &str,
        attack: &str,
        seed: u64,
        ca: f64,
        aa: f64,
        wall_s: f64,
    ) -> Result<Self> {
        for v in [ca, aa] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract(format!("accuracy {v} outside [0, 1]")));
            }
        }
        Ok(Self {
            dataset: dataset.into(),
            victim: victim.into(),
            defender: defender.into(),
            attack: attack.into(),
            seed,
            ca_pct: round2(ca * 100.0),
            aa_pct: round2(aa * 100.0),
            wall_s: round2(wall_s),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

pub fn results_to_string(rows: &[ResultRow], format: Format) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::contract("no rows to emit"));
    }
    let mut out = String::new();
    match format {
        Format::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            for r in rows {
                w.write_record([
                    r.dataset.clone(),
                    r.victim.clone(),
                    r.defender.clone(),
                    r.attack.clone(),
                    r.seed.to_string(),
                    format!("{:.2}", r.ca_pct),
                    format!("{:.2}", r.aa_pct),
                    format!("{:.2}", r.wall_s),
                ])?;
            }
            let body = w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?;
            out.push_str(&String::from_utf8(body).expect("csv writes utf-8"));
        }
        Format::Jsonl => {
            for r in rows {
                out.push_str(&serde_json::to_string(r)?);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn emit_results(rows: &[ResultRow], path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    let text = results_to_string(rows, format)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_results(text: &str, format: Format) -> Result<Vec<ResultRow>> {
    match format {
        Format::Csv => {
            let mut rd = csv::Reader::from_reader(text.as_bytes());
            let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
            if header.join(",") != CSV_HEADER {
                return Err(Error::Parse {
                    offset: 0,
                    msg: format!("unexpected header {}", header.join(",")),
                });
            }
            Ok(rd.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?)
        }
        Format::Jsonl => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect(),
    }
}

pub fn read_results(path: impl AsRef<Path>, format: Format) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text, format)
}

//! Training metrics stream: a fixed-schema CSV with one row per iteration.
//!
//! Header: `iter,reward_mean,ep_len_mean,terrain_level,kl,loss_policy,
//! loss_value,loss_mse,loss_bt_diag,loss_bt_offdiag,<one column per reward
//! term>`. Columns not applicable to a phase hold 0.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rewards::{TERM_COUNT, TERM_NAMES};

pub const BASE_COLUMNS: [&str; 10] = [
    "iter",
    "reward_mean",
    "ep_len_mean",
    "terrain_level",
    "kl",
    "loss_policy",
    "loss_value",
    "loss_mse",
    "loss_bt_diag",
    "loss_bt_offdiag",
];

pub fn schema() -> Vec<String> {
    BASE_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(TERM_NAMES.iter().map(|s| s.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub reward_mean: f64,
    pub ep_len_mean: f64,
    pub terrain_level: f64,
    pub kl: f64,
    pub loss_policy: f64,
    pub loss_value: f64,
    pub loss_mse: f64,
    pub loss_bt_diag: f64,
    pub loss_bt_offdiag: f64,
    pub terms: [f64; TERM_COUNT],
}

impl MetricsRow {
    pub fn zero(iter: u64) -> Self {
        MetricsRow {
            iter,
            reward_mean: 0.0,
            ep_len_mean: 0.0,
            terrain_level: 0.0,
            kl: 0.0,
            loss_policy: 0.0,
            loss_value: 0.0,
            loss_mse: 0.0,
            loss_bt_diag: 0.0,
            loss_bt_offdiag: 0.0,
            terms: [0.0; TERM_COUNT],
        }
    }

    fn to_csv_line(&self) -> String {
        let mut fields = vec![
            self.iter.to_string(),
            self.reward_mean.to_string(),
            self.ep_len_mean.to_string(),
            self.terrain_level.to_string(),
            self.kl.to_string(),
            self.loss_policy.to_string(),
            self.loss_value.to_string(),
            self.loss_mse.to_string(),
            self.loss_bt_diag.to_string(),
            self.loss_bt_offdiag.to_string(),
        ];
        fields.extend(self.terms.iter().map(|t| t.to_string()));
        fields.join(",")
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", schema().join(","))?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv_line())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Parse a metrics CSV, validating the header against the fixed schema.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("{}: empty file", path.display())))??;
    let expect = schema().join(",");
    if header != expect {
        let got: Vec<&str> = header.split(',').collect();
        let want = schema();
        let mismatch = want
            .iter()
            .enumerate()
            .find(|(i, w)| got.get(*i).map(|g| *g != w.as_str()).unwrap_or(true))
            .map(|(i, w)| format!("column {i}: expected `{w}`, got `{}`", got.get(i).unwrap_or(&"<missing>")))
            .unwrap_or_else(|| "trailing columns".to_string());
        return Err(Error::Schema(format!("{}: {mismatch}", path.display())));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != BASE_COLUMNS.len() + TERM_COUNT {
            return Err(Error::Schema(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                lineno + 2,
                fields.len(),
                BASE_COLUMNS.len() + TERM_COUNT
            )));
        }
        let parse = |s: &str, col: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                Error::Schema(format!(
                    "{}: row {}, column `{col}`: bad number `{s}`",
                    path.display(),
                    lineno + 2
                ))
            })
        };
        let mut terms = [0.0; TERM_COUNT];
        for (k, t) in terms.iter_mut().enumerate() {
            *t = parse(fields[BASE_COLUMNS.len() + k], TERM_NAMES[k])?;
        }
        rows.push(MetricsRow {
            iter: fields[0]
                .parse()
                .map_err(|_| Error::Schema(format!("bad iter `{}`", fields[0])))?,
            reward_mean: parse(fields[1], "reward_mean")?,
            ep_len_mean: parse(fields[2], "ep_len_mean")?,
            terrain_level: parse(fields[3], "terrain_level")?,
            kl: parse(fields[4], "kl")?,
            loss_policy: parse(fields[5], "loss_policy")?,
            loss_value: parse(fields[6], "loss_value")?,
            loss_mse: parse(fields[7], "loss_mse")?,
            loss_bt_diag: parse(fields[8], "loss_bt_diag")?,
            loss_bt_offdiag: parse(fields[9], "loss_bt_offdiag")?,
            terms,
        });
    }
    Ok(rows)
}

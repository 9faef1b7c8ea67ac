//! CSV readers and writers for λ tables, training logs, distances, diagrams,
//! accuracies and task selections. All files are UTF-8 with a header row and
//! `\n` line endings; floats are written in shortest round-trip form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::learning::BatchLog;
use crate::similarity::DiagramBin;

/// Inferred task embeddings: one λ row per task id.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaTable {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LambdaTable {
    pub fn to_csv(&self) -> String {
        let l = self.rows.first().map_or(0, Vec::len);
        let mut out = String::from("task_id");
        for i in 1..=l {
            let _ = write!(out, ",lambda_{i}");
        }
        out.push('\n');
        for (id, row) in self.ids.iter().zip(&self.rows) {
            out.push_str(id);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_csv())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let records = read_records(path)?;
        let (header, body) = records
            .split_first()
            .ok_or_else(|| Error::Data(format!("{}: empty λ file", path.display())))?;
        if header.first().map(String::as_str) != Some("task_id") || header.len() < 2 {
            return Err(Error::Data(format!(
                "{}: expected header task_id,lambda_1,...",
                path.display()
            )));
        }
        let mut ids = Vec::with_capacity(body.len());
        let mut rows = Vec::with_capacity(body.len());
        for (line, rec) in body.iter().enumerate() {
            if rec.len() != header.len() {
                return Err(Error::Data(format!(
                    "{}: row {} has {} fields, expected {}",
                    path.display(),
                    line + 2,
                    rec.len(),
                    header.len()
                )));
            }
            let row = rec[1..]
                .iter()
                .map(|s| parse_f64(path, line + 2, s))
                .collect::<Result<Vec<_>>>()?;
            if row.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Data(format!(
                    "{}: row {} has non-positive λ",
                    path.display(),
                    line + 2
                )));
            }
            ids.push(rec[0].clone());
            rows.push(row);
        }
        if ids.is_empty() {
            return Err(Error::Data(format!("{}: no λ rows", path.display())));
        }
        Ok(Self { ids, rows })
    }
}

pub fn training_log_csv(logs: &[BatchLog]) -> String {
    let mut out = String::from("batch,rho,mean_elbo,alpha_min,alpha_max,estep_iters_mean\n");
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            l.batch, l.rho, l.mean_elbo, l.alpha_min, l.alpha_max, l.estep_iters_mean
        );
    }
    out
}

pub fn distances_csv(ids: &[String], mean_kl: &[f64]) -> String {
    let mut out = String::from("test_id,mean_kl\n");
    for (id, d) in ids.iter().zip(mean_kl) {
        let _ = writeln!(out, "{id},{d}");
    }
    out
}

/// Full KL matrix: one row per test task, one column per training task.
pub fn distance_matrix_csv(
    test_ids: &[String],
    train_ids: &[String],
    matrix: &[Vec<f64>],
) -> String {
    let mut out = String::from("test_id");
    for id in train_ids {
        let _ = write!(out, ",{id}");
    }
    out.push('\n');
    for (id, row) in test_ids.iter().zip(matrix) {
        out.push_str(id);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn diagram_csv(bins: &[DiagramBin]) -> String {
    let mut out = String::from("bin,low,high,mean_distance,mean_accuracy,count\n");
    for b in bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            b.index, b.low, b.high, b.mean_distance, b.mean_accuracy, b.count
        );
    }
    out
}

pub fn selection_text(ids: &[&str]) -> String {
    let mut out = String::new();
    for id in ids {
        out.push_str(id);
        out.push('\n');
    }
    out
}

/// Reads `task_id,accuracy` rows.
pub fn read_accuracy(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let records = read_records(path)?;
    let (header, body) = records
        .split_first()
        .ok_or_else(|| Error::Data(format!("{}: empty accuracy file", path.display())))?;
    if header.len() != 2 || header[0] != "task_id" || header[1] != "accuracy" {
        return Err(Error::Data(format!(
            "{}: expected header task_id,accuracy",
            path.display()
        )));
    }
    body.iter()
        .enumerate()
        .map(|(line, rec)| {
            if rec.len() != 2 {
                return Err(Error::Data(format!(
                    "{}: row {} must have 2 fields",
                    path.display(),
                    line + 2
                )));
            }
            Ok((rec[0].clone(), parse_f64(path, line + 2, &rec[1])?))
        })
        .collect()
}

/// Reads `test_id,mean_kl` rows.
pub fn read_distances(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let records = read_records(path)?;
    let (header, body) = records
        .split_first()
        .ok_or_else(|| Error::Data(format!("{}: empty distance file", path.display())))?;
    if header.len() != 2 || header[0] != "test_id" || header[1] != "mean_kl" {
        return Err(Error::Data(format!(
            "{}: expected header test_id,mean_kl",
            path.display()
        )));
    }
    body.iter()
        .enumerate()
        .map(|(line, rec)| {
            if rec.len() != 2 {
                return Err(Error::Data(format!(
                    "{}: row {} must have 2 fields",
                    path.display(),
                    line + 2
                )));
            }
            Ok((rec[0].clone(), parse_f64(path, line + 2, &rec[1])?))
        })
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_f64(path: &Path, line: usize, s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| {
        Error::Data(format!(
            "{}: row {line}: cannot parse {s:?} as a number",
            path.display()
        ))
    })
}

fn read_records(path: &Path) -> Result<Vec<Vec<String>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    reader
        .records()
        .map(|r| {
            r.map(|rec| rec.iter().map(str::to_string).collect::<Vec<String>>())
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        })
        .filter(|r| !matches!(r, Ok(v) if v.iter().all(|s: &String| s.is_empty())))
        .collect()
}

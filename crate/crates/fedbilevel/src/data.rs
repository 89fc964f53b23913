//! CSV ingestion for the ridge hyperparameter problem.
//!
//! The file has a header row, one column named `target`, and any number of
//! numeric feature columns. Rows are shuffled with a seeded stream and the
//! first `round(ratio * n)` go to the training split.

use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context, Result};

use fedbilevel_core::numerics::RandomStream;
use fedbilevel_core::problems::RidgeData;
use fedbilevel_core::{Matrix, Vector};

const SHUFFLE_STREAM: u64 = 0x5348_5546;

pub fn load_ridge_csv(path: &Path, train_ratio: f64, seed: u64) -> Result<RidgeData> {
    let file = std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_ridge_csv(file, train_ratio, seed).with_context(|| format!("in {}", path.display()))
}

pub fn read_ridge_csv<R: Read>(reader: R, train_ratio: f64, seed: u64) -> Result<RidgeData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let target_col = match headers.iter().position(|h| h == "target") {
        Some(i) => i,
        None => bail!("no column named `target`"),
    };
    let n_features = headers.len() - 1;
    if n_features == 0 {
        bail!("need at least one feature column");
    }

    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut targets = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let mut row = Vec::with_capacity(n_features);
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .with_context(|| format!("line {line}, column `{}`: not a number", &headers[j]))?;
            if !v.is_finite() {
                bail!("line {line}, column `{}`: value is not finite", &headers[j]);
            }
            if j == target_col {
                targets.push(v);
            } else {
                row.push(v);
            }
        }
        features.push(row);
    }
    split(&features, &targets, train_ratio, seed)
}

fn split(features: &[Vec<f64>], targets: &[f64], train_ratio: f64, seed: u64) -> Result<RidgeData> {
    let n = targets.len();
    let n_train = (train_ratio * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        bail!("{n} rows with train_ratio {train_ratio} leaves an empty split");
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RandomStream::new(seed, SHUFFLE_STREAM);
    for i in (1..n).rev() {
        let j = rng.next_index(i + 1);
        order.swap(i, j);
    }
    let dim = features[0].len();
    let take = |idx: &[usize]| {
        let m = Matrix::from_fn(idx.len(), dim, |r, c| features[idx[r]][c]);
        let t = Vector::from_fn(idx.len(), |r, _| targets[idx[r]]);
        (m, t)
    };
    let (tx, ty) = take(&order[..n_train]);
    let (vx, vy) = take(&order[n_train..]);
    Ok(RidgeData::new(tx, ty, vx, vy)?)
}

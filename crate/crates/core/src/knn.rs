//! kNN frame matching: every source frame is replaced by the mean of its `k`
//! nearest target frames under cosine distance. The whole target bank is the
//! stored style, so memory grows linearly with target length.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{shape_err, Error, Result};

pub const DEFAULT_K: usize = 4;

/// All target frames, `T_tgt × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBank {
    pub frames: Array2<f32>,
}

impl TargetBank {
    pub fn new(frames: Array2<f32>) -> Self {
        TargetBank { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// `T_tgt × D × 4` bytes.
pub fn bank_memory_bytes(bank: &TargetBank) -> u64 {
    bank.len() as u64 * bank.dim() as u64 * 4
}

fn norm(v: ArrayView1<f32>) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Cosine distance `1 − cos`; a zero vector is at distance 1 from everything.
fn cosine_distance(a: ArrayView1<f32>, na: f64, b: ArrayView1<f32>, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    1.0 - dot / (na * nb)
}

pub fn knn_match(bank: &TargetBank, source: &Array2<f32>, k: usize) -> Result<Array2<f32>> {
    if bank.is_empty() {
        return Err(Error::InsufficientData("empty target bank".into()));
    }
    if k == 0 || k > bank.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in [1, {}]",
            bank.len()
        )));
    }
    if source.ncols() != bank.dim() {
        return shape_err(format!(
            "source dim {} != bank dim {}",
            source.ncols(),
            bank.dim()
        ));
    }
    let bank_norms: Vec<f64> = bank.frames.rows().into_iter().map(norm).collect();
    let mut out = Array2::<f32>::zeros(source.dim());
    // (distance, index) of the current best k, kept sorted ascending.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (src, mut dst) in source.rows().into_iter().zip(out.rows_mut()) {
        let ns = norm(src);
        best.clear();
        for (j, row) in bank.frames.rows().into_iter().enumerate() {
            let d = cosine_distance(src, ns, row, bank_norms[j]);
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            // Strict comparison keeps the lower index first among equals.
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, j));
            best.truncate(k);
        }
        // Summing in bank order makes k = T_tgt reproduce the bank mean
        // exactly.
        let mut chosen: Vec<usize> = best.iter().map(|&(_, j)| j).collect();
        chosen.sort_unstable();
        let mut acc = Array1::<f64>::zeros(bank.dim());
        for &j in &chosen {
            acc.zip_mut_with(&bank.frames.row(j), |a, &b| *a += b as f64);
        }
        dst.assign(&acc.mapv(|v| (v / k as f64) as f32));
    }
    Ok(out)
}

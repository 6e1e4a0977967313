//! Evaluation statistics: metric binning, Spearman correlation, Laplacian
//! kernel ridge regression with R², correlation matrices, and a 2-D logistic
//! decision boundary over (affinity, diversity).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricRecord;

pub const DEFAULT_BIN_SIZE: usize = 30;
pub const DEFAULT_KRR_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Affinity,
    Diversity,
}

impl Metric {
    pub fn of(self, r: &MetricRecord) -> f64 {
        match self {
            Metric::Affinity => r.affinity,
            Metric::Diversity => r.diversity,
        }
    }
}

/// What to do with records that do not fill a final bin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrailingBin {
    #[default]
    Drop,
    /// Fold leftovers into the last full bin.
    Merge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub mean_metric: f64,
    pub mean_accuracy: f64,
    pub size: usize,
}

fn sorted_by_metric(records: &[MetricRecord], metric: Metric) -> Vec<&MetricRecord> {
    let mut sorted: Vec<&MetricRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        metric
            .of(a)
            .total_cmp(&metric.of(b))
            .then_with(|| a.instance_id.cmp(&b.instance_id))
    });
    sorted
}

fn chunk_bins<'a>(
    sorted: &'a [&'a MetricRecord],
    bin_size: usize,
    trailing: TrailingBin,
) -> Result<Vec<&'a [&'a MetricRecord]>> {
    if bin_size == 0 {
        return Err(Error::Invalid("bin_size must be at least 1".into()));
    }
    if sorted.len() < bin_size {
        return Err(Error::TooFewRecords {
            needed: bin_size,
            have: sorted.len(),
        });
    }
    let full = sorted.len() / bin_size;
    let mut bins: Vec<&[&MetricRecord]> = (0..full)
        .map(|b| &sorted[b * bin_size..(b + 1) * bin_size])
        .collect();
    if trailing == TrailingBin::Merge && !sorted.len().is_multiple_of(bin_size) {
        let last = bins.pop().expect("at least one bin");
        let start = sorted.len() - last.len() - sorted.len() % bin_size;
        bins.push(&sorted[start..]);
    }
    Ok(bins)
}

fn accuracy(bin: &[&MetricRecord]) -> f64 {
    bin.iter().filter(|r| r.correct).count() as f64 / bin.len() as f64
}

pub fn bin_records(records: &[MetricRecord], metric: Metric, bin_size: usize) -> Result<Vec<BinSummary>> {
    bin_records_with(records, metric, bin_size, TrailingBin::Drop)
}

/// Sorts ascending by `metric` (ties by instance id) and summarises each bin.
pub fn bin_records_with(
    records: &[MetricRecord],
    metric: Metric,
    bin_size: usize,
    trailing: TrailingBin,
) -> Result<Vec<BinSummary>> {
    let sorted = sorted_by_metric(records, metric);
    Ok(chunk_bins(&sorted, bin_size, trailing)?
        .into_iter()
        .map(|bin| BinSummary {
            mean_metric: bin.iter().map(|r| metric.of(r)).sum::<f64>() / bin.len() as f64,
            mean_accuracy: accuracy(bin),
            size: bin.len(),
        })
        .collect())
}

/// Bin of records carrying both metric means, for the 2-D boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointBin {
    pub mean_affinity: f64,
    pub mean_diversity: f64,
    pub mean_accuracy: f64,
    pub size: usize,
}

/// Bins records sorted by affinity, reporting both metric means per bin.
pub fn joint_bins(records: &[MetricRecord], bin_size: usize, trailing: TrailingBin) -> Result<Vec<JointBin>> {
    let sorted = sorted_by_metric(records, Metric::Affinity);
    Ok(chunk_bins(&sorted, bin_size, trailing)?
        .into_iter()
        .map(|bin| {
            let n = bin.len() as f64;
            JointBin {
                mean_affinity: bin.iter().map(|r| r.affinity).sum::<f64>() / n,
                mean_diversity: bin.iter().map(|r| r.diversity).sum::<f64>() / n,
                mean_accuracy: accuracy(bin),
                size: bin.len(),
            }
        })
        .collect())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::TooFewRecords {
            needed: 2,
            have: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::ConstantSequence("first sequence"));
    }
    if syy == 0.0 {
        return Err(Error::ConstantSequence("second sequence"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRidgeModel {
    pub train_x: Vec<f64>,
    pub dual_coefs: Vec<f64>,
    pub gamma: f64,
    pub alpha: f64,
}

pub fn laplacian_kernel(a: f64, b: f64, gamma: f64) -> f64 {
    (-gamma * (a - b).abs()).exp()
}

/// `1 / median |x_i - x_j|` over distinct pairs.
pub fn median_gamma(xs: &[f64]) -> Result<f64> {
    let mut d: Vec<f64> = Vec::new();
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            d.push((xs[i] - xs[j]).abs());
        }
    }
    if d.is_empty() {
        return Err(Error::TooFewRecords {
            needed: 2,
            have: xs.len(),
        });
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 {
        d[m / 2]
    } else {
        (d[m / 2 - 1] + d[m / 2]) / 2.0
    };
    if median <= 0.0 {
        return Err(Error::ConstantSequence("kernel inputs"));
    }
    Ok(1.0 / median)
}

/// Solves `(K + alpha I) c = y` with `K_ij = exp(-gamma |x_i - x_j|)` by
/// Cholesky, falling back to LU.
pub fn krr_fit(xs: &[f64], ys: &[f64], gamma: f64, alpha: f64) -> Result<KernelRidgeModel> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::TooFewRecords {
            needed: 2,
            have: xs.len(),
        });
    }
    if !(gamma > 0.0) || !(alpha >= 0.0) {
        return Err(Error::Invalid(format!(
            "need gamma > 0 and alpha >= 0, got gamma {gamma}, alpha {alpha}"
        )));
    }
    let n = xs.len();
    if alpha == 0.0 {
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::SingularSystem { alpha });
        }
    }
    let k = DMatrix::from_fn(n, n, |i, j| {
        laplacian_kernel(xs[i], xs[j], gamma) + if i == j { alpha } else { 0.0 }
    });
    let y = DVector::from_column_slice(ys);
    let coefs = match k.clone().cholesky() {
        Some(ch) => ch.solve(&y),
        None => k.lu().solve(&y).ok_or(Error::SingularSystem { alpha })?,
    };
    if coefs.iter().any(|c| !c.is_finite()) {
        return Err(Error::SingularSystem { alpha });
    }
    Ok(KernelRidgeModel {
        train_x: xs.to_vec(),
        dual_coefs: coefs.iter().copied().collect(),
        gamma,
        alpha,
    })
}

pub fn krr_predict(model: &KernelRidgeModel, x: f64) -> f64 {
    model
        .train_x
        .iter()
        .zip(&model.dual_coefs)
        .map(|(&xi, &c)| c * laplacian_kernel(x, xi, model.gamma))
        .sum()
}

pub fn r2_score(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch {
            left: y_true.len(),
            right: y_pred.len(),
        });
    }
    if y_true.len() < 2 {
        return Err(Error::TooFewRecords {
            needed: 2,
            have: y_true.len(),
        });
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ConstantSequence("y_true"));
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    /// `None` where a column is constant.
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        self.values[i][j]
    }
}

/// Pairwise Spearman coefficients; symmetric with a unit diagonal.
pub fn correlation_matrix(columns: &BTreeMap<String, Vec<f64>>) -> Result<CorrelationMatrix> {
    let names: Vec<String> = columns.keys().cloned().collect();
    let cols: Vec<&Vec<f64>> = columns.values().collect();
    if let Some(first) = cols.first() {
        for c in &cols {
            if c.len() != first.len() {
                return Err(Error::LengthMismatch {
                    left: first.len(),
                    right: c.len(),
                });
            }
        }
    }
    let n = cols.len();
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        values[i][i] = Some(1.0);
        for j in i + 1..n {
            let r = match spearman(cols[i], cols[j]) {
                Ok(r) => Some(r),
                Err(Error::ConstantSequence(_)) | Err(Error::TooFewRecords { .. }) => None,
                Err(e) => return Err(e),
            };
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix { names, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub w_aff: f64,
    pub w_div: f64,
    pub bias: f64,
    pub threshold: f64,
    pub train_accuracy: f64,
}

impl Boundary {
    pub fn decision(&self, aff: f64, div: f64) -> f64 {
        self.w_aff * aff + self.w_div * div + self.bias
    }
}

pub const BOUNDARY_ITERATIONS: usize = 5000;
const BOUNDARY_STEP: f64 = 0.5;

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len();
    Some(if m % 2 == 1 {
        s[m / 2]
    } else {
        (s[m / 2 - 1] + s[m / 2]) / 2.0
    })
}

/// Logistic regression (full-batch gradient descent on standardized
/// features, fixed iteration budget) separating points with `acc > threshold`
/// from the rest. Weights are reported in the original feature units.
pub fn fit_boundary(aff: &[f64], div: &[f64], acc: &[f64], threshold: f64) -> Result<Boundary> {
    if aff.len() != div.len() || aff.len() != acc.len() {
        return Err(Error::LengthMismatch {
            left: aff.len(),
            right: if aff.len() != div.len() { div.len() } else { acc.len() },
        });
    }
    let labels: Vec<f64> = acc.iter().map(|&a| if a > threshold { 1.0 } else { 0.0 }).collect();
    let positives = labels.iter().filter(|&&l| l == 1.0).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::SingleClass { threshold });
    }
    let n = aff.len() as f64;
    let standardize = |xs: &[f64]| -> (f64, f64) {
        let m = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        (m, if sd > 0.0 { sd } else { 1.0 })
    };
    let (ma, sa) = standardize(aff);
    let (md, sd) = standardize(div);
    let za: Vec<f64> = aff.iter().map(|x| (x - ma) / sa).collect();
    let zd: Vec<f64> = div.iter().map(|x| (x - md) / sd).collect();

    let (mut wa, mut wd, mut b) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..BOUNDARY_ITERATIONS {
        let (mut ga, mut gd, mut gb) = (0.0, 0.0, 0.0);
        for i in 0..labels.len() {
            let p = 1.0 / (1.0 + (-(wa * za[i] + wd * zd[i] + b)).exp());
            let e = p - labels[i];
            ga += e * za[i];
            gd += e * zd[i];
            gb += e;
        }
        wa -= BOUNDARY_STEP * ga / n;
        wd -= BOUNDARY_STEP * gd / n;
        b -= BOUNDARY_STEP * gb / n;
    }
    let boundary = Boundary {
        w_aff: wa / sa,
        w_div: wd / sd,
        bias: b - wa * ma / sa - wd * md / sd,
        threshold,
        train_accuracy: 0.0,
    };
    let correct = (0..labels.len())
        .filter(|&i| (boundary.decision(aff[i], div[i]) > 0.0) == (labels[i] == 1.0))
        .count();
    Ok(Boundary {
        train_accuracy: correct as f64 / n,
        ..boundary
    })
}

//! Summary statistics and report files.
//!
//! * `records.csv`: one row per test instance.
//! * `bins.csv`: `metric,bin,mean_metric,mean_accuracy,size`.
//! * `correlations.json`: [`Correlations`].
//! * `plot_data.json`: [`PlotData`].
//! * `compare.csv`: one [`ComparisonRow`] per selector.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Selector};
use crate::metrics::{write_records_csv, MetricRecord};
use crate::probe::BestHead;
use crate::stats::{
    bin_records_with, correlation_matrix, fit_boundary, joint_bins, krr_fit, krr_predict, median, median_gamma,
    r2_score, spearman, BinSummary, Boundary, CorrelationMatrix, JointBin, Metric, TrailingBin,
};

const CURVE_SAMPLES: usize = 50;

/// Kernel ridge fit of bin accuracy on bin-mean metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrrSummary {
    pub gamma: f64,
    pub alpha: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub n_records: usize,
    pub accuracy: f64,
    pub mean_affinity: f64,
    pub mean_diversity: f64,
    pub best_head: Option<BestHead>,
    pub bin_size: usize,
    /// Spearman between bin-mean affinity and bin accuracy.
    pub spearman_affinity: Option<f64>,
    pub spearman_diversity: Option<f64>,
    pub krr_affinity: Option<KrrSummary>,
    pub krr_diversity: Option<KrrSummary>,
    /// Per-instance Spearman matrix over metrics, baselines and correctness.
    pub matrix: Option<CorrelationMatrix>,
    pub boundary: Option<Boundary>,
    /// Why any statistic above is missing.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub affinity_bins: Vec<BinSummary>,
    pub diversity_bins: Vec<BinSummary>,
    pub joint_bins: Vec<JointBin>,
    pub correlations: Correlations,
    pub options: StatsOptions,
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    xs.sum::<f64>() / n as f64
}

fn note<T>(notes: &mut Vec<String>, what: &str, r: Result<T>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("{what}: {e}"));
            None
        }
    }
}

fn krr_summary(bins: &[BinSummary], gamma: Option<f64>, alpha: f64) -> Result<(KrrSummary, Vec<f64>)> {
    let xs: Vec<f64> = bins.iter().map(|b| b.mean_metric).collect();
    let ys: Vec<f64> = bins.iter().map(|b| b.mean_accuracy).collect();
    let gamma = match gamma {
        Some(g) => g,
        None => median_gamma(&xs)?,
    };
    let model = krr_fit(&xs, &ys, gamma, alpha)?;
    let pred: Vec<f64> = xs.iter().map(|&x| krr_predict(&model, x)).collect();
    let r2 = r2_score(&ys, &pred)?;
    Ok((KrrSummary { gamma, alpha, r2 }, pred))
}

fn bin_spearman(bins: &[BinSummary]) -> Result<f64> {
    let xs: Vec<f64> = bins.iter().map(|b| b.mean_metric).collect();
    let ys: Vec<f64> = bins.iter().map(|b| b.mean_accuracy).collect();
    spearman(&xs, &ys)
}

/// Settings of [`Summary::compute`] that come from the experiment config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsOptions {
    pub bin_size: usize,
    pub trailing_bin: TrailingBin,
    pub krr_gamma: Option<f64>,
    pub krr_alpha: f64,
}

impl From<&ExperimentConfig> for StatsOptions {
    fn from(cfg: &ExperimentConfig) -> Self {
        Self {
            bin_size: cfg.bin_size,
            trailing_bin: cfg.trailing_bin,
            krr_gamma: cfg.krr_gamma,
            krr_alpha: cfg.krr_alpha,
        }
    }
}

impl Summary {
    pub fn compute(records: &[MetricRecord], opts: impl Into<StatsOptions>, best_head: Option<BestHead>) -> Result<Self> {
        let opts = opts.into();
        if records.is_empty() {
            return Err(Error::Empty("metric records"));
        }
        let affinity_bins = bin_records_with(records, Metric::Affinity, opts.bin_size, opts.trailing_bin)?;
        let diversity_bins = bin_records_with(records, Metric::Diversity, opts.bin_size, opts.trailing_bin)?;
        let joint = joint_bins(records, opts.bin_size, opts.trailing_bin)?;
        let mut notes = Vec::new();

        let spearman_affinity = note(&mut notes, "affinity spearman", bin_spearman(&affinity_bins));
        let spearman_diversity = note(&mut notes, "diversity spearman", bin_spearman(&diversity_bins));
        let krr_affinity = note(
            &mut notes,
            "affinity kernel ridge",
            krr_summary(&affinity_bins, opts.krr_gamma, opts.krr_alpha),
        )
        .map(|(s, _)| s);
        let krr_diversity = note(
            &mut notes,
            "diversity kernel ridge",
            krr_summary(&diversity_bins, opts.krr_gamma, opts.krr_alpha),
        )
        .map(|(s, _)| s);

        let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        columns.insert("affinity".into(), records.iter().map(|r| r.affinity).collect());
        columns.insert("diversity".into(), records.iter().map(|r| r.diversity).collect());
        columns.insert(
            "accuracy".into(),
            records.iter().map(|r| f64::from(u8::from(r.correct))).collect(),
        );
        let baseline_names: std::collections::BTreeSet<&String> =
            records.iter().flat_map(|r| r.baseline_scores.keys()).collect();
        for name in baseline_names {
            let col: Option<Vec<f64>> = records.iter().map(|r| r.baseline_scores.get(name).copied()).collect();
            match col {
                Some(col) => {
                    columns.insert(name.clone(), col);
                }
                None => notes.push(format!("baseline `{name}` is missing on some records; left out of the matrix")),
            }
        }
        let matrix = note(&mut notes, "correlation matrix", correlation_matrix(&columns));

        let aff: Vec<f64> = joint.iter().map(|b| b.mean_affinity).collect();
        let div: Vec<f64> = joint.iter().map(|b| b.mean_diversity).collect();
        let acc: Vec<f64> = joint.iter().map(|b| b.mean_accuracy).collect();
        let threshold = median(&acc).unwrap_or(0.5);
        let boundary = note(&mut notes, "decision boundary", fit_boundary(&aff, &div, &acc, threshold));

        Ok(Self {
            affinity_bins,
            diversity_bins,
            joint_bins: joint,
            correlations: Correlations {
                n_records: records.len(),
                accuracy: mean(records.iter().map(|r| f64::from(u8::from(r.correct)))),
                mean_affinity: mean(records.iter().map(|r| r.affinity)),
                mean_diversity: mean(records.iter().map(|r| r.diversity)),
                best_head,
                bin_size: opts.bin_size,
                spearman_affinity,
                spearman_diversity,
                krr_affinity,
                krr_diversity,
                matrix,
                boundary,
                notes,
            },
            options: opts,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BinRow {
    metric: Metric,
    bin: usize,
    mean_metric: f64,
    mean_accuracy: f64,
    size: usize,
}

pub fn write_bins_csv(path: impl AsRef<Path>, affinity: &[BinSummary], diversity: &[BinSummary]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for (metric, bins) in [(Metric::Affinity, affinity), (Metric::Diversity, diversity)] {
        for (bin, b) in bins.iter().enumerate() {
            w.serialize(BinRow {
                metric,
                bin,
                mean_metric: b.mean_metric,
                mean_accuracy: b.mean_accuracy,
                size: b.size,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads `bins.csv` back as (affinity bins, diversity bins).
pub fn read_bins_csv(path: impl AsRef<Path>) -> Result<(Vec<BinSummary>, Vec<BinSummary>)> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let (mut aff, mut div) = (Vec::new(), Vec::new());
    for row in r.deserialize::<BinRow>() {
        let row = row?;
        let target = match row.metric {
            Metric::Affinity => &mut aff,
            Metric::Diversity => &mut div,
        };
        if row.bin != target.len() {
            return Err(Error::Invalid(format!("bins.csv: bin {} out of order", row.bin)));
        }
        target.push(BinSummary {
            mean_metric: row.mean_metric,
            mean_accuracy: row.mean_accuracy,
            size: row.size,
        });
    }
    Ok((aff, div))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPlot {
    /// Bin-mean metric against bin accuracy.
    pub bins: Vec<Point>,
    /// Kernel ridge predictions on an even grid over the bin range.
    pub curve: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPlot {
    pub w_aff: f64,
    pub w_div: f64,
    pub bias: f64,
    pub threshold: f64,
    /// Two points on the line `w_aff·a + w_div·d + bias = 0`, empty when
    /// `w_div` is zero.
    pub line: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePoint {
    pub affinity: f64,
    pub diversity: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub affinity: MetricPlot,
    pub diversity: MetricPlot,
    /// Joint bins, `x` affinity and `y` diversity.
    pub joint_bins: Vec<JointBin>,
    pub boundary: Option<BoundaryPlot>,
    pub instances: Vec<InstancePoint>,
}

fn metric_plot(bins: &[BinSummary], gamma: Option<f64>, alpha: f64) -> MetricPlot {
    let points: Vec<Point> = bins
        .iter()
        .map(|b| Point {
            x: b.mean_metric,
            y: b.mean_accuracy,
        })
        .collect();
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.y).collect();
    let fitted = gamma
        .map(Ok)
        .unwrap_or_else(|| median_gamma(&xs))
        .and_then(|g| krr_fit(&xs, &ys, g, alpha));
    let curve = match fitted {
        Ok(model) => {
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (0..CURVE_SAMPLES)
                .map(|i| {
                    let x = lo + (hi - lo) * i as f64 / (CURVE_SAMPLES - 1) as f64;
                    Point {
                        x,
                        y: krr_predict(&model, x),
                    }
                })
                .collect()
        }
        Err(_) => Vec::new(),
    };
    MetricPlot { bins: points, curve }
}

impl PlotData {
    pub fn build(records: &[MetricRecord], summary: &Summary) -> Self {
        let (krr_gamma, krr_alpha) = (summary.options.krr_gamma, summary.options.krr_alpha);
        let boundary = summary.correlations.boundary.as_ref().map(|b| {
            let line = if b.w_div == 0.0 {
                Vec::new()
            } else {
                let lo = summary.joint_bins.iter().map(|j| j.mean_affinity).fold(f64::INFINITY, f64::min);
                let hi = summary
                    .joint_bins
                    .iter()
                    .map(|j| j.mean_affinity)
                    .fold(f64::NEG_INFINITY, f64::max);
                [lo, hi]
                    .iter()
                    .map(|&a| Point {
                        x: a,
                        y: -(b.w_aff * a + b.bias) / b.w_div,
                    })
                    .collect()
            };
            BoundaryPlot {
                w_aff: b.w_aff,
                w_div: b.w_div,
                bias: b.bias,
                threshold: b.threshold,
                line,
            }
        });
        Self {
            affinity: metric_plot(&summary.affinity_bins, krr_gamma, krr_alpha),
            diversity: metric_plot(&summary.diversity_bins, krr_gamma, krr_alpha),
            joint_bins: summary.joint_bins.clone(),
            boundary,
            instances: records
                .iter()
                .map(|r| InstancePoint {
                    affinity: r.affinity,
                    diversity: r.diversity,
                    correct: r.correct,
                })
                .collect(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_plot_data(path: impl AsRef<Path>, plot: &PlotData) -> Result<()> {
    write_json(path.as_ref(), plot)
}

/// Writes records.csv, bins.csv, correlations.json and plot_data.json.
pub fn write_reports(dir: impl AsRef<Path>, records: &[MetricRecord], summary: &Summary) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("records.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_records_csv(records, file)?;
    write_bins_csv(dir.join("bins.csv"), &summary.affinity_bins, &summary.diversity_bins)?;
    write_json(&dir.join("correlations.json"), &summary.correlations)?;
    write_plot_data(dir.join("plot_data.json"), &PlotData::build(records, summary))
}

/// Per-selector aggregate over one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub task: String,
    pub selector: String,
    pub n: usize,
    pub accuracy: f64,
    pub mean_affinity: f64,
    pub mean_diversity: f64,
    /// Mean BM25 score of the selected pool demonstrations.
    pub mean_bm25: Option<f64>,
}

impl ComparisonRow {
    pub fn from_records(task: &str, selector: &Selector, records: &[MetricRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("metric records"));
        }
        let bm25: Option<Vec<f64>> = records.iter().map(|r| r.baseline_scores.get("bm25").copied()).collect();
        Ok(Self {
            task: task.to_string(),
            selector: selector.to_string(),
            n: records.len(),
            accuracy: mean(records.iter().map(|r| f64::from(u8::from(r.correct)))),
            mean_affinity: mean(records.iter().map(|r| r.affinity)),
            mean_diversity: mean(records.iter().map(|r| r.diversity)),
            mean_bm25: bm25.map(|v| mean(v.into_iter())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, selector: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.selector == selector)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<ComparisonRow>, _>>()?;
        Ok(Self { rows })
    }
}

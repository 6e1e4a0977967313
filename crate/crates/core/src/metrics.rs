//! Affinity and diversity of demonstration label representations.
//!
//! * Affinity: mean cosine similarity between the query representation and
//!   each label representation.
//! * Diversity: `(1/k) · tr(Cov)` of the label representations, with the
//!   covariance normalised by `k` (population) unless configured otherwise.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceNorm {
    /// Divide by `k`.
    #[default]
    Population,
    /// Divide by `k - 1`; needs `k ≥ 2`.
    Sample,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 {
        return Err(Error::ZeroVector("first operand".into()));
    }
    if nb == 0.0 {
        return Err(Error::ZeroVector("second operand".into()));
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

pub fn affinity<Q, L>(query: &Q, labels: &[L]) -> Result<f64>
where
    Q: AsRef<[f64]> + ?Sized,
    L: AsRef<[f64]>,
{
    if labels.is_empty() {
        return Err(Error::Empty("label representation list"));
    }
    let q = query.as_ref();
    if norm(q) == 0.0 {
        return Err(Error::ZeroVector("query representation".into()));
    }
    let mut total = 0.0;
    for (i, l) in labels.iter().enumerate() {
        let l = l.as_ref();
        if norm(l) == 0.0 {
            return Err(Error::ZeroVector(format!("label representation {i}")));
        }
        total += cosine(q, l)?;
    }
    Ok(total / labels.len() as f64)
}

pub fn diversity<L: AsRef<[f64]>>(labels: &[L]) -> Result<f64> {
    diversity_with(labels, CovarianceNorm::Population)
}

pub fn diversity_with<L: AsRef<[f64]>>(labels: &[L], cov: CovarianceNorm) -> Result<f64> {
    let k = labels.len();
    if k == 0 {
        return Err(Error::Empty("label representation list"));
    }
    let dim = labels[0].as_ref().len();
    let mut mean = vec![0.0; dim];
    for l in labels {
        let l = l.as_ref();
        if l.len() != dim {
            return Err(Error::LengthMismatch {
                left: dim,
                right: l.len(),
            });
        }
        mean.iter_mut().zip(l).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    let scatter: f64 = labels
        .iter()
        .map(|l| {
            l.as_ref()
                .iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>()
        })
        .sum();
    let denom = match cov {
        CovarianceNorm::Population => k as f64,
        CovarianceNorm::Sample if k >= 2 => (k - 1) as f64,
        CovarianceNorm::Sample => {
            return Err(Error::Invalid("sample covariance needs at least two vectors".into()))
        }
    };
    Ok(scatter / denom / k as f64)
}

/// One evaluated test instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub instance_id: String,
    pub k: usize,
    pub affinity: f64,
    pub diversity: f64,
    pub correct: bool,
    #[serde(flatten)]
    pub baseline_scores: BTreeMap<String, f64>,
}

impl MetricRecord {
    pub fn check(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.affinity) || !(self.diversity >= 0.0) {
            return Err(Error::Invalid(format!(
                "record {}: affinity {} / diversity {} out of range",
                self.instance_id, self.affinity, self.diversity
            )));
        }
        Ok(())
    }
}

const FIXED_COLUMNS: [&str; 5] = ["instance_id", "k", "affinity", "diversity", "correct"];

fn baseline_names(records: &[MetricRecord]) -> Vec<String> {
    let names: BTreeSet<&String> = records.iter().flat_map(|r| r.baseline_scores.keys()).collect();
    names.into_iter().cloned().collect()
}

/// Writes records as CSV with one extra column per baseline score. Floats use
/// the shortest representation that parses back to the same value.
pub fn write_records_csv<W: Write>(records: &[MetricRecord], out: W) -> Result<()> {
    let baselines = baseline_names(records);
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<&str> = FIXED_COLUMNS
        .iter()
        .copied()
        .chain(baselines.iter().map(String::as_str))
        .collect();
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.instance_id.clone(),
            r.k.to_string(),
            r.affinity.to_string(),
            r.diversity.to_string(),
            r.correct.to_string(),
        ];
        for b in &baselines {
            row.push(r.baseline_scores.get(b).map(f64::to_string).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn read_records_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.len() < FIXED_COLUMNS.len()
        || headers.iter().zip(FIXED_COLUMNS).any(|(h, f)| h != f)
    {
        return Err(Error::Invalid(format!("unexpected CSV header {headers:?}")));
    }
    let parse_f = |s: &str, col: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Invalid(format!("column {col}: `{s}` is not a number")))
    };
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let mut baseline_scores = BTreeMap::new();
        for (name, value) in headers.iter().zip(row.iter()).skip(FIXED_COLUMNS.len()) {
            if !value.is_empty() {
                baseline_scores.insert(name.to_string(), parse_f(value, name)?);
            }
        }
        out.push(MetricRecord {
            instance_id: row[0].to_string(),
            k: row[1]
                .parse()
                .map_err(|_| Error::Invalid(format!("k `{}` is not an integer", &row[1])))?,
            affinity: parse_f(&row[2], "affinity")?,
            diversity: parse_f(&row[3], "diversity")?,
            correct: row[4]
                .parse()
                .map_err(|_| Error::Invalid(format!("correct `{}` is not a bool", &row[4])))?,
            baseline_scores,
        });
    }
    Ok(out)
}

pub fn write_records_jsonl<W: Write>(records: &[MetricRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<jsonl writer>", e))?;
    }
    Ok(())
}

pub fn read_records_jsonl<R: BufRead>(input: R) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<jsonl reader>", e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn load_records_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records_csv(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affinity_hand_cases() {
        let a = affinity(&[1.0, 0.0][..], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((a - 0.5).abs() < 1e-12);
        let q = vec![0.3, -1.2, 2.0];
        assert!((affinity(&q, &[q.clone(), q.clone()]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn affinity_errors() {
        assert!(matches!(
            affinity(&[0.0, 0.0][..], &[vec![1.0, 0.0]]),
            Err(Error::ZeroVector(_))
        ));
        match affinity(&[1.0, 0.0][..], &[vec![1.0, 0.0], vec![0.0, 0.0]]) {
            Err(Error::ZeroVector(which)) => assert!(which.contains('1')),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            affinity::<[f64], Vec<f64>>(&[1.0][..], &[]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn diversity_hand_cases() {
        let same = vec![vec![1.0, 2.0]; 4];
        assert_eq!(diversity(&same).unwrap(), 0.0);
        // Population variance of {0, 2} is 1; times 1/k gives 0.5.
        assert!((diversity(&[vec![0.0], vec![2.0]]).unwrap() - 0.5).abs() < 1e-15);
        assert!(
            (diversity_with(&[vec![0.0], vec![2.0]], CovarianceNorm::Sample).unwrap() - 1.0).abs()
                < 1e-15
        );
        assert!(diversity_with(&[vec![0.0]], CovarianceNorm::Sample).is_err());
        assert!(diversity::<Vec<f64>>(&[]).is_err());
        assert!(diversity(&[vec![0.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn k_one_cases() {
        let q = vec![1.0, 1.0];
        let l = vec![1.0, 0.0];
        let a = affinity(&q, &[l.clone()]).unwrap();
        assert!((a - cosine(&q, &l).unwrap()).abs() < 1e-15);
        assert_eq!(diversity(&[l]).unwrap(), 0.0);
    }

    fn sample_records() -> Vec<MetricRecord> {
        vec![
            MetricRecord {
                instance_id: "t-0".into(),
                k: 4,
                affinity: 0.1 + 0.2,
                diversity: 1.0 / 3.0,
                correct: true,
                baseline_scores: BTreeMap::from([("bm25".into(), 2.5e-17)]),
            },
            MetricRecord {
                instance_id: "t,1".into(),
                k: 4,
                affinity: -0.75,
                diversity: 0.0,
                correct: false,
                baseline_scores: BTreeMap::from([("dense".into(), 0.9)]),
            },
        ]
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let recs = sample_records();
        let mut buf = Vec::new();
        write_records_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("instance_id,k,affinity,diversity,correct,bm25,dense\n"));
        assert_eq!(read_records_csv(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn jsonl_round_trip_is_lossless() {
        let recs = sample_records();
        let mut buf = Vec::new();
        write_records_jsonl(&recs, &mut buf).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        assert!(first.lines().next().unwrap().contains("\"bm25\":"));
        assert_eq!(read_records_jsonl(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn record_range_check() {
        let mut r = sample_records().remove(0);
        assert!(r.check().is_ok());
        r.affinity = 1.5;
        assert!(r.check().is_err());
    }
}

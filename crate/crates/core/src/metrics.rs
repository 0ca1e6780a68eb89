//! Kendall and Pearson correlation between predicted and true metrics.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooFew(usize),
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauVariant {
    #[default]
    B,
    A,
}

/// A correlation value that may be undefined (constant input). Undefined
/// values carry NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub undefined: bool,
}

impl Correlation {
    fn defined(value: f64) -> Self {
        Self {
            value,
            undefined: false,
        }
    }

    fn nan() -> Self {
        Self {
            value: f64::NAN,
            undefined: true,
        }
    }
}

/// Pair counts shared by the fast and brute-force paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairCounts {
    pub n: usize,
    /// Concordant minus discordant pairs.
    pub s: i64,
    /// Pairs tied in x (including joint ties).
    pub x_ties: i64,
    /// Pairs tied in y (including joint ties).
    pub y_ties: i64,
}

impl PairCounts {
    pub fn total_pairs(&self) -> i64 {
        let n = self.n as i64;
        n * (n - 1) / 2
    }

    pub fn tau(&self, variant: TauVariant) -> Correlation {
        let n0 = self.total_pairs();
        let denom = match variant {
            TauVariant::A => n0 as f64,
            TauVariant::B => {
                let dx = n0 - self.x_ties;
                let dy = n0 - self.y_ties;
                if dx == 0 || dy == 0 {
                    return Correlation::nan();
                }
                ((dx as f64) * (dy as f64)).sqrt()
            }
        };
        if variant == TauVariant::A && (self.x_ties == n0 || self.y_ties == n0) {
            return Correlation::nan();
        }
        Correlation::defined((self.s as f64 / denom).clamp(-1.0, 1.0))
    }
}

fn check(x: &[f64], y: &[f64]) -> Result<(), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::TooFew(x.len()));
    }
    if let Some(i) = x.iter().zip(y).position(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    Ok(())
}

fn tied_pairs_in_sorted_runs<T: PartialEq>(items: &[T]) -> i64 {
    let mut total = 0i64;
    let mut run = 1i64;
    for w in items.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort that returns the number of inversions (strict).
fn sort_counting_inversions(v: &mut [f64], buf: &mut Vec<f64>) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_inversions(&mut v[..mid], buf) + sort_counting_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as i64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Knight's O(n log n) pair counting.
pub fn pair_counts(x: &[f64], y: &[f64]) -> Result<PairCounts, MetricsError> {
    check(x, y)?;
    // adding 0.0 folds -0.0 into 0.0 so total_cmp agrees with ==
    let mut pairs: Vec<(f64, f64)> = x.iter().zip(y).map(|(a, b)| (a + 0.0, b + 0.0)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let x_ties = tied_pairs_in_sorted_runs(&xs);
    let joint_ties = tied_pairs_in_sorted_runs(&pairs);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(ys.len());
    let swaps = sort_counting_inversions(&mut ys, &mut buf);
    let y_ties = tied_pairs_in_sorted_runs(&ys);
    let n = x.len();
    let n0 = (n as i64) * (n as i64 - 1) / 2;
    Ok(PairCounts {
        n,
        s: n0 - x_ties - y_ties + joint_ties - 2 * swaps,
        x_ties,
        y_ties,
    })
}

/// O(n^2) pair enumeration; test oracle for [`pair_counts`].
pub fn pair_counts_brute(x: &[f64], y: &[f64]) -> Result<PairCounts, MetricsError> {
    check(x, y)?;
    let mut c = PairCounts {
        n: x.len(),
        ..Default::default()
    };
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i].partial_cmp(&x[j]).expect("finite");
            let dy = y[i].partial_cmp(&y[j]).expect("finite");
            if dx == Ordering::Equal {
                c.x_ties += 1;
            }
            if dy == Ordering::Equal {
                c.y_ties += 1;
            }
            if dx != Ordering::Equal && dy != Ordering::Equal {
                c.s += if dx == dy { 1 } else { -1 };
            }
        }
    }
    Ok(c)
}

pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<Correlation, MetricsError> {
    kendall_tau_variant(x, y, TauVariant::B)
}

pub fn kendall_tau_variant(x: &[f64], y: &[f64], variant: TauVariant) -> Result<Correlation, MetricsError> {
    Ok(pair_counts(x, y)?.tau(variant))
}

pub fn kendall_tau_brute(x: &[f64], y: &[f64], variant: TauVariant) -> Result<Correlation, MetricsError> {
    Ok(pair_counts_brute(x, y)?.tau(variant))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation, MetricsError> {
    check(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation::nan());
    }
    Ok(Correlation::defined((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub kendall_tau: f64,
    pub pearson_r: f64,
    pub n: usize,
    pub x_ties: i64,
    pub y_ties: i64,
    pub tau_variant: TauVariant,
    pub tau_undefined: bool,
    pub pearson_undefined: bool,
    #[serde(skip)]
    pub pairs: Vec<(f64, f64)>,
}

pub fn correlation_report(pred: &[f64], truth: &[f64]) -> Result<CorrelationReport, MetricsError> {
    correlation_report_variant(pred, truth, TauVariant::B)
}

pub fn correlation_report_variant(
    pred: &[f64],
    truth: &[f64],
    variant: TauVariant,
) -> Result<CorrelationReport, MetricsError> {
    let counts = pair_counts(pred, truth)?;
    let tau = counts.tau(variant);
    let r = pearson(pred, truth)?;
    Ok(CorrelationReport {
        kendall_tau: tau.value,
        pearson_r: r.value,
        n: counts.n,
        x_ties: counts.x_ties,
        y_ties: counts.y_ties,
        tau_variant: variant,
        tau_undefined: tau.undefined,
        pearson_undefined: r.undefined,
        pairs: pred.iter().copied().zip(truth.iter().copied()).collect(),
    })
}

impl CorrelationReport {
    /// `# tau=..,r=..,n=..` then `pred,true` and one row per pair.
    pub fn scatter_csv(&self) -> String {
        let mut out = format!(
            "# kendall_tau={},pearson_r={},n={}\npred,true\n",
            self.kendall_tau, self.pearson_r, self.n
        );
        for (p, t) in &self.pairs {
            let _ = writeln!(out, "{p},{t}");
        }
        out
    }
}

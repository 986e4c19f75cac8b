//! Paired hypothesis tests: exact Wilcoxon signed-rank and paired-t TOST
//! equivalence, plus the per-region panel that runs both.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const MIN_PAIRS: usize = 5;
/// Largest effective sample size handled by exact enumeration.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub label: String,
    pub values_a: Vec<f64>,
    pub values_b: Vec<f64>,
}

impl PairedSample {
    pub fn new(label: impl Into<String>, values_a: Vec<f64>, values_b: Vec<f64>) -> Result<Self> {
        let s = PairedSample {
            label: label.into(),
            values_a,
            values_b,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values_a.len() != self.values_b.len() {
            return Err(Error::Argument(format!(
                "{}: paired lists differ in length ({} vs {})",
                self.label,
                self.values_a.len(),
                self.values_b.len()
            )));
        }
        if self.values_a.iter().chain(&self.values_b).any(|v| v.is_nan()) {
            return Err(Error::Argument(format!("{}: NaN in paired sample", self.label)));
        }
        if self.values_a.len() < MIN_PAIRS {
            return Err(Error::InsufficientData(format!(
                "{}: {} pairs, need at least {MIN_PAIRS}",
                self.label,
                self.values_a.len()
            )));
        }
        Ok(())
    }

    /// `a − b` per pair.
    pub fn differences(&self) -> Vec<f64> {
        self.values_a.iter().zip(&self.values_b).map(|(a, b)| a - b).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    NormalApprox,
    PairedT,
    DegenerateVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Reject,
    FailToReject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: Method,
    pub n_effective: usize,
    pub decision: Decision,
}

fn decide(p: f64, alpha: f64) -> Decision {
    if p < alpha {
        Decision::Reject
    } else {
        Decision::FailToReject
    }
}

/// Mid-ranks of `values` (1-based), ties sharing the average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let r = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Number of sign patterns whose positive rank sum, in half-rank units,
/// is at most `limit2`. `ranks2` are doubled mid-ranks (integers).
fn count_at_most(ranks2: &[u64], limit2: u64) -> u64 {
    let total: u64 = ranks2.iter().sum();
    let mut ways = vec![0u64; total as usize + 1];
    ways[0] = 1;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if ways[s] > 0 {
                ways[s + r] += ways[s];
            }
        }
        reach += r;
    }
    ways.iter().take(limit2.min(total) as usize + 1).sum()
}

pub fn wilcoxon_signed_rank(s: &PairedSample, alpha: f64) -> Result<TestResult> {
    s.validate()?;
    let d: Vec<f64> = s.differences().into_iter().filter(|&v| v != 0.0).collect();
    let n = d.len();
    if n < MIN_PAIRS {
        return Err(Error::InsufficientData(format!(
            "{}: {n} non-zero differences, need at least {MIN_PAIRS}",
            s.label
        )));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);
    let (p, method) = if n <= EXACT_MAX_N {
        let ranks2: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let count = count_at_most(&ranks2, (2.0 * w).round() as u64);
        let p = (2.0 * count as f64 / 2f64.powi(n as i32)).min(1.0);
        (p, Method::Exact)
    } else {
        let mean = total / 2.0;
        let mut var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0;
        let mut sorted = abs.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i + 1;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            var -= (t * t * t - t) / 48.0;
            i = j;
        }
        let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        ((2.0 * (1.0 - normal.cdf(z))).min(1.0), Method::NormalApprox)
    };
    Ok(TestResult {
        statistic: w,
        p_value: p,
        method,
        n_effective: n,
        decision: decide(p, alpha),
    })
}

/// Schuirmann's two one-sided paired-t tests against `±bound`. Rejecting
/// means the mean difference is declared equivalent to zero.
pub fn tost_equivalence(s: &PairedSample, bound: f64, alpha: f64) -> Result<TestResult> {
    s.validate()?;
    if !(bound.is_finite() && bound > 0.0) {
        return Err(Error::Argument(format!("TOST bound must be positive, got {bound}")));
    }
    let d = s.differences();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd <= 1e-12 * mean.abs().max(bound) {
        // Degenerate variance: the decision follows |mean| < bound and the
        // p-value is reported as 0 or 1.
        let p = if mean.abs() < bound { 0.0 } else { 1.0 };
        return Ok(TestResult {
            statistic: mean,
            p_value: p,
            method: Method::DegenerateVariance,
            n_effective: d.len(),
            decision: decide(p, alpha),
        });
    }
    let se = sd / n.sqrt();
    let t1 = (mean + bound) / se;
    let t2 = (mean - bound) / se;
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("positive dof");
    let p1 = 1.0 - dist.cdf(t1);
    let p2 = dist.cdf(t2);
    let (statistic, p) = if p1 >= p2 { (t1, p1) } else { (t2, p2) };
    let p = p.clamp(0.0, 1.0);
    Ok(TestResult {
        statistic,
        p_value: p,
        method: Method::PairedT,
        n_effective: d.len(),
        decision: decide(p, alpha),
    })
}

/// Outcome of one test inside a panel; errors are recorded, not raised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok(TestResult),
    Error(String),
}

impl Outcome {
    fn from(r: Result<TestResult>) -> Self {
        match r {
            Ok(t) => Outcome::Ok(t),
            Err(e) => Outcome::Error(e.to_string()),
        }
    }

    pub fn rejected(&self) -> bool {
        matches!(self, Outcome::Ok(t) if t.decision == Decision::Reject)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionResult {
    pub region: String,
    pub metric: String,
    pub bound: f64,
    pub wilcoxon: Outcome,
    pub tost: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelReport {
    pub alpha: f64,
    pub bounds: BTreeMap<String, f64>,
    pub regions: Vec<RegionResult>,
    /// Per metric: regions with a significant Wilcoxon difference.
    pub significant: BTreeMap<String, Vec<String>>,
    /// Per metric: regions declared equivalent by TOST.
    pub equivalent: BTreeMap<String, Vec<String>>,
}

/// Runs Wilcoxon and TOST on every region of every metric. `table` maps a
/// metric name to its per-region samples; every metric needs a bound.
pub fn run_region_panel(
    table: &BTreeMap<String, Vec<PairedSample>>,
    bounds: &BTreeMap<String, f64>,
    alpha: f64,
) -> Result<PanelReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1), got {alpha}")));
    }
    for metric in table.keys() {
        match bounds.get(metric) {
            None => return Err(Error::Config(format!("no equivalence bound for metric '{metric}'"))),
            Some(b) if !(b.is_finite() && *b > 0.0) => {
                return Err(Error::Config(format!("bound for '{metric}' must be positive")))
            }
            _ => {}
        }
    }
    let mut regions = Vec::new();
    let mut significant: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut equivalent: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (metric, samples) in table {
        let bound = bounds[metric];
        let sig = significant.entry(metric.clone()).or_default();
        let eq = equivalent.entry(metric.clone()).or_default();
        for s in samples {
            let w = Outcome::from(wilcoxon_signed_rank(s, alpha));
            let t = Outcome::from(tost_equivalence(s, bound, alpha));
            if w.rejected() {
                sig.push(s.label.clone());
            }
            if t.rejected() {
                eq.push(s.label.clone());
            }
            regions.push(RegionResult {
                region: s.label.clone(),
                metric: metric.clone(),
                bound,
                wilcoxon: w,
                tost: t,
            });
        }
    }
    Ok(PanelReport {
        alpha,
        bounds: bounds.clone(),
        regions,
        significant,
        equivalent,
    })
}

/// The equivalence bounds used for segmentation comparisons.
pub fn default_bounds() -> BTreeMap<String, f64> {
    BTreeMap::from([("dice".to_string(), 0.02), ("hd95_mm".to_string(), 3.0)])
}

impl PanelReport {
    /// Plain-text table: one row per region and metric.
    pub fn table(&self) -> String {
        let fmt = |o: &Outcome| match o {
            Outcome::Ok(t) => format!("p={:.4} {}", t.p_value, if t.decision == Decision::Reject { "*" } else { " " }),
            Outcome::Error(e) => format!("n/a ({})", e.split(':').next().unwrap_or("error")),
        };
        let mut out = format!("{:<16} {:<8} {:<40} {:<40}\n", "region", "metric", "wilcoxon (* = differs)", "tost (* = equivalent)");
        for r in &self.regions {
            out.push_str(&format!("{:<16} {:<8} {:<40} {:<40}\n", r.region, r.metric, fmt(&r.wilcoxon), fmt(&r.tost)));
        }
        out
    }
}

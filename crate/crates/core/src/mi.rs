//! Histogram estimates of probability distributions over the coordinates of
//! feature vectors, and the mutual information between two such vectors.
//!
//! A vector of dimension `d` is read as `d` draws of a scalar variable. The
//! marginal is a 1-D histogram over evenly spaced bins; the joint is a 2-D
//! histogram over the pairs `(x_i, y_i)`. All quantities are in nats.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, TsvcError};

/// A finite real vector of length at least 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_values(&values)?;
        Ok(Self(values))
    }

    pub(crate) fn new_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = TsvcError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

fn check_values(v: &[f64]) -> Result<()> {
    if v.len() < 2 {
        return invalid(format!("feature vector needs at least 2 entries, got {}", v.len()));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return invalid(format!("non-finite feature value at position {i}"));
    }
    Ok(())
}

/// Bin count and range policy for every histogram estimate.
///
/// Edges span the joint `[min, max]` of the inputs, widened at each end by
/// `eps_scale · (max − min + 1)` so the maximum falls inside the last
/// half-open bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramConfig {
    /// Fixed bin count; `None` picks `clamp(floor(sqrt(d)), 8, 64)`.
    pub bins: Option<usize>,
    pub eps_scale: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self { bins: None, eps_scale: 1e-9 }
    }
}

impl HistogramConfig {
    pub fn with_bins(bins: usize) -> Self {
        Self { bins: Some(bins), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.bins, Some(b) if b < 2) {
            return invalid("histogram needs at least 2 bins");
        }
        if !(self.eps_scale > 0.0 && self.eps_scale.is_finite()) {
            return invalid("eps_scale must be a positive finite number");
        }
        Ok(())
    }

    /// Bin count used for vectors of dimension `d`.
    pub fn bins_for(&self, d: usize) -> usize {
        self.bins
            .unwrap_or_else(|| ((d as f64).sqrt().floor() as usize).clamp(8, 64))
    }

    /// Evenly spaced edges covering every value in `vectors`.
    pub fn edges(&self, d: usize, vectors: &[&[f64]]) -> Result<Vec<f64>> {
        self.validate()?;
        let (lo, hi) = vectors
            .iter()
            .flat_map(|v| v.iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        if !(lo.is_finite() && hi.is_finite()) {
            return invalid("cannot build histogram edges from empty or non-finite data");
        }
        let eps = self.eps_scale * (hi - lo + 1.0);
        let (lo, hi) = (lo - eps, hi + eps);
        let bins = self.bins_for(d);
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|j| lo + j as f64 * width).collect();
        edges.push(hi);
        Ok(edges)
    }
}

/// Marginal histogram `p_j`, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(pub Vec<f64>);

/// Joint histogram `p_{j,k}` stored row-major (`j` indexes the x-bins).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    pub bins_x: usize,
    pub bins_y: usize,
    pub p: Vec<f64>,
}

impl ProbabilityMatrix {
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.p[j * self.bins_y + k]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.p.chunks(self.bins_y).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.bins_y];
        for row in self.p.chunks(self.bins_y) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 3 {
        return invalid("need at least 2 bins (3 edges)");
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return invalid("bin edges must be strictly increasing");
    }
    Ok(())
}

/// Index of the half-open bin `[e_j, e_{j+1})` that holds `v`.
fn bin_index(edges: &[f64], v: f64) -> Result<usize> {
    let last = edges.len() - 1;
    if !(v >= edges[0] && v < edges[last]) {
        return Err(TsvcError::Internal(format!(
            "value {v} outside histogram range [{}, {})",
            edges[0], edges[last]
        )));
    }
    // first edge strictly greater than v, minus one
    Ok(edges.partition_point(|&e| e <= v) - 1)
}

fn counts(v: &[f64], edges: &[f64]) -> Result<Vec<usize>> {
    let mut c = vec![0usize; edges.len() - 1];
    for &x in v {
        c[bin_index(edges, x)?] += 1;
    }
    Ok(c)
}

pub fn marginal_histogram(v: &[f64], edges: &[f64]) -> Result<ProbabilityVector> {
    check_values(v)?;
    check_edges(edges)?;
    let d = v.len() as f64;
    Ok(ProbabilityVector(
        counts(v, edges)?.into_iter().map(|c| c as f64 / d).collect(),
    ))
}

pub fn joint_histogram(
    x: &[f64],
    y: &[f64],
    edges_x: &[f64],
    edges_y: &[f64],
) -> Result<ProbabilityMatrix> {
    check_pair(x, y)?;
    check_edges(edges_x)?;
    check_edges(edges_y)?;
    let bins_x = edges_x.len() - 1;
    let bins_y = edges_y.len() - 1;
    let mut c = vec![0usize; bins_x * bins_y];
    for (&xi, &yi) in x.iter().zip(y) {
        c[bin_index(edges_x, xi)? * bins_y + bin_index(edges_y, yi)?] += 1;
    }
    let d = x.len() as f64;
    Ok(ProbabilityMatrix {
        bins_x,
        bins_y,
        p: c.into_iter().map(|c| c as f64 / d).collect(),
    })
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    check_values(x)?;
    check_values(y)?;
    if x.len() != y.len() {
        return invalid(format!("length mismatch: {} vs {}", x.len(), y.len()));
    }
    Ok(())
}

/// Mutual information of histogram estimates under explicit edges.
pub fn mutual_information_with_edges(
    x: &[f64],
    y: &[f64],
    edges_x: &[f64],
    edges_y: &[f64],
) -> Result<f64> {
    let joint = joint_histogram(x, y, edges_x, edges_y)?;
    let px = joint.row_sums();
    let py = joint.col_sums();
    let mut mi = 0.0;
    for (j, &pxj) in px.iter().enumerate() {
        for (k, &pyk) in py.iter().enumerate() {
            let pjk = joint.get(j, k);
            if pjk > 0.0 {
                mi += pjk * (pjk / (pxj * pyk)).ln();
            }
        }
    }
    debug_assert!(mi >= -1e-12, "negative mutual information {mi}");
    Ok(mi.max(0.0))
}

/// `MI(x; y)` with shared edges built from both vectors.
pub fn mutual_information(x: &[f64], y: &[f64], cfg: &HistogramConfig) -> Result<f64> {
    check_pair(x, y)?;
    let edges = cfg.edges(x.len(), &[x, y])?;
    mutual_information_with_edges(x, y, &edges, &edges)
}

/// Shannon entropy of the marginal histogram of `v`.
pub fn entropy(v: &[f64], cfg: &HistogramConfig) -> Result<f64> {
    check_values(v)?;
    let edges = cfg.edges(v.len(), &[v])?;
    let p = marginal_histogram(v, &edges)?;
    Ok(-p.0.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>())
}

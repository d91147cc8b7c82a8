//! Two-component 1-D Gaussian mixture over per-sample losses.
//!
//! Losses are min-max normalised before EM; the fitted model keeps that affine
//! map so callers can query it with raw losses and read means in loss units.
//! The lower-mean component is the clean one.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, TsvcError};

/// Variance floor, in normalised loss units.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self { max_iter: 50, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    weights: [f64; 2],
    /// Means in normalised units.
    means: [f64; 2],
    /// Variances in normalised units, each `>= VAR_FLOOR`.
    variances: [f64; 2],
    clean_component: usize,
    /// Raw loss corresponding to normalised 0.
    offset: f64,
    /// Raw loss span corresponding to normalised 1.
    scale: f64,
}

impl GmmModel {
    /// Builds a model directly in loss units.
    pub fn new(weights: [f64; 2], means: [f64; 2], variances: [f64; 2]) -> Result<Self> {
        Self::with_scale(weights, means, variances, 0.0, 1.0)
    }

    fn with_scale(
        weights: [f64; 2],
        means: [f64; 2],
        variances: [f64; 2],
        offset: f64,
        scale: f64,
    ) -> Result<Self> {
        if weights.iter().any(|&w| !(w > 0.0)) || ((weights[0] + weights[1]) - 1.0).abs() > 1e-12 {
            return invalid(format!("mixture weights {weights:?} must be positive and sum to 1"));
        }
        if variances.iter().any(|&v| !(v >= VAR_FLOOR) || !v.is_finite()) {
            return invalid(format!("variances {variances:?} below floor {VAR_FLOOR}"));
        }
        if means.iter().any(|m| !m.is_finite()) || !(scale > 0.0) {
            return invalid("non-finite mixture parameters");
        }
        let clean_component = if means[1] < means[0] { 1 } else { 0 };
        Ok(Self { weights, means, variances, clean_component, offset, scale })
    }

    pub fn weights(&self) -> [f64; 2] {
        self.weights
    }

    /// Component means in loss units.
    pub fn means(&self) -> [f64; 2] {
        self.means.map(|m| self.offset + m * self.scale)
    }

    /// Component variances in loss² units.
    pub fn variances(&self) -> [f64; 2] {
        self.variances.map(|v| v * self.scale * self.scale)
    }

    pub fn clean_component(&self) -> usize {
        self.clean_component
    }

    pub fn normalize(&self, loss: f64) -> f64 {
        (loss - self.offset) / self.scale
    }

    fn log_components(&self, z: f64) -> [f64; 2] {
        [0, 1].map(|k| {
            let v = self.variances[k];
            let dz = z - self.means[k];
            self.weights[k].ln() - 0.5 * (2.0 * PI * v).ln() - dz * dz / (2.0 * v)
        })
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Log-likelihood (normalised units) after each EM iteration, starting with the initial parameters.
    pub log_likelihoods: Vec<f64>,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// EM fit. Deterministic: initial means at the 10th/90th percentiles,
/// equal weights, both variances at the overall variance.
pub fn fit_gmm_1d(losses: &[f64], cfg: &GmmConfig) -> Result<GmmFit> {
    if losses.len() < 4 {
        return invalid(format!("need at least 4 losses to fit a mixture, got {}", losses.len()));
    }
    if cfg.max_iter == 0 {
        return invalid("max_iter must be at least 1");
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return invalid("non-finite loss");
    }
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(TsvcError::DegenerateInput(format!("all {} losses equal {lo}", losses.len())));
    }
    let scale = hi - lo;
    let z: Vec<f64> = losses.iter().map(|l| (l - lo) / scale).collect();
    let n = z.len() as f64;

    let mut sorted = z.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = z.iter().sum::<f64>() / n;
    let var = (z.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).max(VAR_FLOOR);

    let mut model = GmmModel {
        weights: [0.5, 0.5],
        means: [percentile(&sorted, 0.1), percentile(&sorted, 0.9)],
        variances: [var, var],
        clean_component: 0,
        offset: lo,
        scale,
    };
    let mut resp = vec![[0.0f64; 2]; z.len()];
    let mut ll = e_step(&model, &z, &mut resp);
    let mut trace = vec![ll];

    for _ in 0..cfg.max_iter {
        m_step(&mut model, &z, &resp);
        let next = e_step(&model, &z, &mut resp);
        trace.push(next);
        let gain = next - ll;
        ll = next;
        if gain < cfg.tol {
            break;
        }
    }

    let model = GmmModel::with_scale(model.weights, model.means, model.variances, lo, scale)?;
    Ok(GmmFit { model, log_likelihoods: trace })
}

fn e_step(model: &GmmModel, z: &[f64], resp: &mut [[f64; 2]]) -> f64 {
    let mut ll = 0.0;
    for (x, r) in z.iter().zip(resp.iter_mut()) {
        let [a, b] = model.log_components(*x);
        let total = log_sum_exp(a, b);
        *r = [(a - total).exp(), (b - total).exp()];
        ll += total;
    }
    ll
}

fn m_step(model: &mut GmmModel, z: &[f64], resp: &[[f64; 2]]) {
    let n = z.len() as f64;
    for k in 0..2 {
        let nk: f64 = resp.iter().map(|r| r[k]).sum::<f64>().max(1e-300);
        let mu = resp.iter().zip(z).map(|(r, x)| r[k] * x).sum::<f64>() / nk;
        let var = resp
            .iter()
            .zip(z)
            .map(|(r, x)| r[k] * (x - mu) * (x - mu))
            .sum::<f64>()
            / nk;
        model.means[k] = mu;
        model.variances[k] = var.max(VAR_FLOOR);
        model.weights[k] = (nk / n).clamp(1e-12, 1.0);
    }
    let s = model.weights[0] + model.weights[1];
    model.weights = [model.weights[0] / s, 1.0 - model.weights[0] / s];
}

/// Posterior responsibility of the clean component at a raw loss value.
pub fn posterior_clean(model: &GmmModel, loss: f64) -> f64 {
    let lc = model.log_components(model.normalize(loss));
    let c = model.clean_component;
    (lc[c] - log_sum_exp(lc[0], lc[1])).exp().clamp(0.0, 1.0)
}

/// `L_clean`: the clean component's mean in loss units.
pub fn clean_center(model: &GmmModel) -> f64 {
    model.means()[model.clean_component]
}

/// How `delta` is applied to a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionRule {
    /// Clean iff `posterior_clean(loss) >= delta`.
    #[default]
    Posterior,
    /// Clean iff the min-max normalised loss is `< delta`.
    NormalizedLoss,
}

/// Positions `0..n` of a population split into clean and noisy.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlowPartition {
    pub clean_idx: Vec<usize>,
    pub noisy_idx: Vec<usize>,
}

impl FlowPartition {
    pub fn len(&self) -> usize {
        self.clean_idx.len() + self.noisy_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Re-expresses positions through `ids`, e.g. flow-local → dataset indices.
    pub fn remap(&self, ids: &[usize]) -> FlowPartition {
        FlowPartition {
            clean_idx: self.clean_idx.iter().map(|&i| ids[i]).collect(),
            noisy_idx: self.noisy_idx.iter().map(|&i| ids[i]).collect(),
        }
    }
}

pub fn partition(losses: &[f64], model: &GmmModel, delta: f64, rule: PartitionRule) -> Result<FlowPartition> {
    if !(delta > 0.0 && delta < 1.0) {
        return invalid(format!("delta {delta} outside (0, 1)"));
    }
    let mut out = FlowPartition::default();
    for (i, &l) in losses.iter().enumerate() {
        let clean = match rule {
            PartitionRule::Posterior => posterior_clean(model, l) >= delta,
            PartitionRule::NormalizedLoss => model.normalize(l) < delta,
        };
        if clean {
            out.clean_idx.push(i);
        } else {
            out.noisy_idx.push(i);
        }
    }
    Ok(out)
}

/// Lower half (by loss, ties by index) is clean. Used when losses carry no spread.
pub fn median_split(losses: &[f64]) -> FlowPartition {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let half = losses.len().div_ceil(2);
    let mut clean_idx = order[..half].to_vec();
    let mut noisy_idx = order[half..].to_vec();
    clean_idx.sort_unstable();
    noisy_idx.sort_unstable();
    FlowPartition { clean_idx, noisy_idx }
}

//! Hinge triplet loss over in-batch hardest negatives, with a per-sample
//! margin that shrinks for soft labels and for samples far from the clean
//! loss centre.
//!
//! For pair `i` with margin `a_i`:
//!
//! ```text
//! L_i = [a_i − s(i,i) + s(i, t̂)]₊ + [a_i − s(i,i) + s(î, i)]₊
//! a_i = (2 + tanh(−d_i)) · (m^{y*_i} − 1)/(m − 1) · α,   d_i = |L_prev,i − L_clean|
//! ```
//!
//! Margins, hard-negative choices and `d_i` are constants with respect to the
//! encoder weights.

use serde::{Deserialize, Serialize};

use crate::encoder::{project, EncoderGrads, EncoderParams, Projection, SimilarityMatrix};
use crate::error::{invalid, Result};
use crate::matrix::Matrix;
use crate::sivc::SoftLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginParams {
    /// Soft-margin base, `> 1`.
    pub m: f64,
    /// Base margin in similarity units.
    pub alpha: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        Self { m: 10.0, alpha: 0.2 }
    }
}

impl MarginParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 1.0 && self.m.is_finite()) {
            return invalid(format!("soft-margin base m={} must exceed 1", self.m));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return invalid(format!("alpha={} must be positive", self.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossStats {
    pub per_sample: Vec<f64>,
    pub total: f64,
    pub l_clean: f64,
    pub d: Vec<f64>,
}

/// `(hardest negative text for image i, hardest negative image for text i)`.
pub fn hard_negatives(sim: &SimilarityMatrix, i: usize) -> Result<(usize, usize)> {
    let n = sim.rows();
    if n < 2 || sim.cols() != n {
        return invalid(format!("hard negatives need a square batch of at least 2, got {:?}", sim.shape()));
    }
    if i >= n {
        return invalid(format!("index {i} outside batch of {n}"));
    }
    let argmax = |score: &dyn Fn(usize) -> f64| {
        let mut best: Option<usize> = None;
        for j in (0..n).filter(|&j| j != i) {
            if best.is_none_or(|b| score(j) > score(b)) {
                best = Some(j);
            }
        }
        best.unwrap()
    };
    Ok((argmax(&|j| sim.get(i, j)), argmax(&|j| sim.get(j, i))))
}

pub fn adaptive_margin(y_star: SoftLabel, d: f64, mp: &MarginParams) -> f64 {
    let y = y_star.value();
    (2.0 + (-d).tanh()) * (mp.m.powf(y) - 1.0) / (mp.m - 1.0) * mp.alpha
}

/// Per-sample forward terms, kept for gradients.
#[derive(Debug, Clone, Copy)]
struct Term {
    txt_neg: usize,
    img_neg: usize,
    /// hinge argument for the text negative
    a_t: f64,
    /// hinge argument for the image negative
    a_i: f64,
}

fn forward_terms(sim: &SimilarityMatrix, margins: &[f64]) -> Result<Vec<Term>> {
    if sim.rows() != margins.len() {
        return invalid(format!("{} margins for a batch of {}", margins.len(), sim.rows()));
    }
    (0..sim.rows())
        .map(|i| {
            let (t, im) = hard_negatives(sim, i)?;
            let pos = sim.get(i, i);
            Ok(Term {
                txt_neg: t,
                img_neg: im,
                a_t: margins[i] - pos + sim.get(i, t),
                a_i: margins[i] - pos + sim.get(im, i),
            })
        })
        .collect()
}

fn stats_from_terms(terms: &[Term], l_clean: f64, d: Vec<f64>) -> LossStats {
    let per_sample: Vec<f64> = terms.iter().map(|t| t.a_t.max(0.0) + t.a_i.max(0.0)).collect();
    let total = per_sample.iter().sum();
    LossStats { per_sample, total, l_clean, d }
}

/// Per-sample loss with arbitrary margins.
pub fn triplet_loss_with_margins(sim: &SimilarityMatrix, margins: &[f64]) -> Result<LossStats> {
    let terms = forward_terms(sim, margins)?;
    Ok(stats_from_terms(&terms, 0.0, vec![0.0; margins.len()]))
}

/// Fixed-margin triplet loss (`a_i ≡ α`).
pub fn plain_triplet_loss(sim: &SimilarityMatrix, alpha: f64) -> Result<LossStats> {
    triplet_loss_with_margins(sim, &vec![alpha; sim.rows()])
}

/// `d_i` and margins for a batch.
pub fn dasm_margins(
    y_stars: &[SoftLabel],
    l_clean: f64,
    prev_losses: &[f64],
    mp: &MarginParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if y_stars.len() != prev_losses.len() {
        return invalid(format!(
            "{} labels but {} previous losses",
            y_stars.len(),
            prev_losses.len()
        ));
    }
    mp.validate()?;
    let d: Vec<f64> = prev_losses.iter().map(|l| (l - l_clean).abs()).collect();
    let margins = y_stars.iter().zip(&d).map(|(&y, &di)| adaptive_margin(y, di, mp)).collect();
    Ok((d, margins))
}

pub fn dasm_batch_loss(
    sim: &SimilarityMatrix,
    y_stars: &[SoftLabel],
    l_clean: f64,
    prev_losses: &[f64],
    mp: &MarginParams,
) -> Result<LossStats> {
    if y_stars.len() != sim.rows() {
        return invalid(format!("{} labels for a batch of {}", y_stars.len(), sim.rows()));
    }
    let (d, margins) = dasm_margins(y_stars, l_clean, prev_losses, mp)?;
    let terms = forward_terms(sim, &margins)?;
    Ok(stats_from_terms(&terms, l_clean, d))
}

/// Loss and exact gradients of the summed loss for a batch under fixed margins.
pub fn triplet_gradients<V: AsRef<[f64]>>(
    params: &EncoderParams,
    imgs: &[V],
    txts: &[V],
    margins: &[f64],
) -> Result<(LossStats, EncoderGrads)> {
    let n = imgs.len();
    if txts.len() != n || margins.len() != n {
        return invalid("batch components are not aligned");
    }
    if n < 2 {
        return invalid("gradients need a batch of at least 2");
    }
    let pu: Vec<Projection> = imgs.iter().map(|x| project(&params.w_img, x.as_ref())).collect::<Result<_>>()?;
    let pv: Vec<Projection> = txts.iter().map(|x| project(&params.w_txt, x.as_ref())).collect::<Result<_>>()?;
    let u: Vec<&[f64]> = pu.iter().map(|p| p.unit.as_slice()).collect();
    let v: Vec<&[f64]> = pv.iter().map(|p| p.unit.as_slice()).collect();
    let sim = crate::encoder::similarity_from_embeddings(&u, &v);
    let terms = forward_terms(&sim, margins)?;

    let k = params.embed_dim();
    let mut gu = vec![vec![0.0; k]; n];
    let mut gv = vec![vec![0.0; k]; n];
    let axpy = |dst: &mut [f64], a: f64, x: &[f64]| {
        for (d, x) in dst.iter_mut().zip(x) {
            *d += a * x;
        }
    };
    for (i, t) in terms.iter().enumerate() {
        if t.a_t > 0.0 {
            // −s(i,i) + s(i,t̂)
            axpy(&mut gu[i], -1.0, v[i]);
            axpy(&mut gu[i], 1.0, v[t.txt_neg]);
            axpy(&mut gv[i], -1.0, u[i]);
            axpy(&mut gv[t.txt_neg], 1.0, u[i]);
        }
        if t.a_i > 0.0 {
            // −s(i,i) + s(î,i)
            axpy(&mut gu[i], -1.0, v[i]);
            axpy(&mut gv[i], -1.0, u[i]);
            axpy(&mut gv[i], 1.0, u[t.img_neg]);
            axpy(&mut gu[t.img_neg], 1.0, v[i]);
        }
    }

    let mut grads = EncoderGrads::zeros_like(params);
    backprop(&mut grads.w_img, &pu, &gu, imgs);
    backprop(&mut grads.w_txt, &pv, &gv, txts);
    let stats = stats_from_terms(&terms, 0.0, vec![0.0; n]);
    Ok((stats, grads))
}

/// Accumulates `∂L/∂W` for `u = Wx/‖Wx‖` given `∂L/∂u`.
fn backprop<V: AsRef<[f64]>>(gw: &mut Matrix, proj: &[Projection], g_unit: &[Vec<f64>], inputs: &[V]) {
    for ((p, g), x) in proj.iter().zip(g_unit).zip(inputs) {
        if p.norm == 0.0 || g.iter().all(|&v| v == 0.0) {
            continue;
        }
        // (I − u uᵀ) g / ‖h‖
        let ug: f64 = p.unit.iter().zip(g).map(|(a, b)| a * b).sum();
        let gh: Vec<f64> = g.iter().zip(&p.unit).map(|(gi, ui)| (gi - ug * ui) / p.norm).collect();
        gw.add_outer(&gh, x.as_ref(), 1.0);
    }
}

/// DASM loss and gradients with margins held constant.
#[allow(clippy::too_many_arguments)]
pub fn dasm_gradients<V: AsRef<[f64]>>(
    params: &EncoderParams,
    imgs: &[V],
    txts: &[V],
    y_stars: &[SoftLabel],
    l_clean: f64,
    prev_losses: &[f64],
    mp: &MarginParams,
) -> Result<(LossStats, EncoderGrads)> {
    if y_stars.len() != imgs.len() {
        return invalid(format!("{} labels for a batch of {}", y_stars.len(), imgs.len()));
    }
    let (d, margins) = dasm_margins(y_stars, l_clean, prev_losses, mp)?;
    let (mut stats, grads) = triplet_gradients(params, imgs, txts, &margins)?;
    stats.l_clean = l_clean;
    stats.d = d;
    Ok((stats, grads))
}

//! Soft correspondence labels from mutual-information variation.
//!
//! Within a batch the lowest-loss pair is taken as a clean anchor `(I_a, T_a)`.
//! A candidate `(I_b, T_b)` is compared against it through three relative
//! changes of MI: the pair itself, the candidate text against the anchor image,
//! and the candidate image against the anchor text. Balanced, small changes give
//! a label close to one.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mi::{mutual_information, HistogramConfig};

/// Lower bound on the anchor MI used as a denominator.
pub const EPS_MI: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPair {
    pub index: usize,
    pub img_emb: Vec<f64>,
    pub txt_emb: Vec<f64>,
    /// `MI(I_a, T_a)` in nats.
    pub mi_self: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangeRates {
    /// Relative change of pair MI.
    pub r_p: f64,
    /// Relative change when the candidate text replaces the anchor text.
    pub r_t: f64,
    /// Relative change when the candidate image replaces the anchor image.
    pub r_i: f64,
}

/// A label in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SoftLabel(f64);

impl SoftLabel {
    pub const ONE: SoftLabel = SoftLabel(1.0);

    pub fn new(y: f64) -> Result<Self> {
        if y > 0.0 && y <= 1.0 {
            Ok(Self(y))
        } else {
            invalid(format!("soft label {y} outside (0, 1]"))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Index of the smallest loss; ties go to the lowest index.
pub fn argmin_loss(losses: &[f64]) -> Result<usize> {
    if losses.is_empty() {
        return invalid("empty batch");
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return invalid("non-finite loss");
    }
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate().skip(1) {
        if l < losses[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn select_anchor<V: AsRef<[f64]>>(
    losses: &[f64],
    img_embs: &[V],
    txt_embs: &[V],
    cfg: &HistogramConfig,
) -> Result<AnchorPair> {
    if img_embs.len() != losses.len() || txt_embs.len() != losses.len() {
        return invalid("losses and embeddings are not aligned");
    }
    let index = argmin_loss(losses)?;
    let img = img_embs[index].as_ref();
    let txt = txt_embs[index].as_ref();
    let mi_self = mutual_information(img, txt, cfg)?;
    Ok(AnchorPair { index, img_emb: img.to_vec(), txt_emb: txt.to_vec(), mi_self })
}

/// Change rates from the four MI values directly.
pub fn change_rates_from_mi(mi_aa: f64, mi_bb: f64, mi_ab: f64, mi_ba: f64) -> ChangeRates {
    let denom = mi_aa.max(EPS_MI);
    ChangeRates {
        r_p: (mi_aa - mi_bb).abs() / denom,
        r_t: (mi_aa - mi_ab).abs() / denom,
        r_i: (mi_aa - mi_ba).abs() / denom,
    }
}

pub fn change_rates(
    anchor: &AnchorPair,
    cand_img: &[f64],
    cand_txt: &[f64],
    cfg: &HistogramConfig,
) -> Result<ChangeRates> {
    let d = anchor.img_emb.len();
    if anchor.txt_emb.len() != d || cand_img.len() != d || cand_txt.len() != d {
        return invalid("anchor and candidate embeddings differ in dimension");
    }
    if !anchor.mi_self.is_finite() {
        return invalid("anchor MI is not finite");
    }
    let mi_bb = mutual_information(cand_img, cand_txt, cfg)?;
    let mi_ab = mutual_information(&anchor.img_emb, cand_txt, cfg)?;
    let mi_ba = mutual_information(cand_img, &anchor.txt_emb, cfg)?;
    Ok(change_rates_from_mi(anchor.mi_self, mi_bb, mi_ab, mi_ba))
}

/// `y* = 1 / (1 + r_p + |r_t − r_i|)`.
pub fn soft_label(rates: ChangeRates) -> SoftLabel {
    debug_assert!(rates.r_p >= 0.0 && rates.r_t >= 0.0 && rates.r_i >= 0.0);
    SoftLabel(1.0 / (1.0 + (rates.r_p + (rates.r_t - rates.r_i).abs())))
}

/// Soft labels for every member of a batch, the anchor included.
pub fn rectify_batch<V: AsRef<[f64]>>(
    img_embs: &[V],
    txt_embs: &[V],
    losses: &[f64],
    cfg: &HistogramConfig,
) -> Result<Vec<SoftLabel>> {
    if losses.len() < 2 {
        return invalid(format!("batch of {} is too small for label rectification", losses.len()));
    }
    let anchor = select_anchor(losses, img_embs, txt_embs, cfg)?;
    img_embs
        .iter()
        .zip(txt_embs)
        .map(|(i, t)| change_rates(&anchor, i.as_ref(), t.as_ref(), cfg).map(soft_label))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::rng_from;

    fn rates(r_p: f64, r_t: f64, r_i: f64) -> ChangeRates {
        ChangeRates { r_p, r_t, r_i }
    }

    #[test]
    fn anchor_selection() {
        let e = vec![vec![0.0, 1.0, 2.0]; 3];
        let cfg = HistogramConfig::default();
        assert_eq!(select_anchor(&[0.5, 0.1, 0.9], &e, &e, &cfg).unwrap().index, 1);
        assert_eq!(select_anchor(&[0.2, 0.2], &e[..2], &e[..2], &cfg).unwrap().index, 0);
        let empty: Vec<Vec<f64>> = vec![];
        assert!(select_anchor(&[], &empty, &empty, &cfg).is_err());
    }

    #[test]
    fn anchor_matches_linear_scan() {
        let mut rng = rng_from(32);
        let losses: Vec<f64> = (0..32).map(|_| rng.random::<f64>()).collect();
        let mut best = 0;
        for i in 0..losses.len() {
            if losses[i] < losses[best] {
                best = i;
            }
        }
        assert_eq!(argmin_loss(&losses).unwrap(), best);
    }

    #[test]
    fn identical_candidate_has_zero_rates() {
        let img = vec![0.1, 0.5, -0.3, 0.9, 0.2, -0.7, 0.4, 0.0];
        let txt = vec![0.2, 0.4, -0.1, 0.8, 0.1, -0.5, 0.3, 0.1];
        let cfg = HistogramConfig::default();
        let a = select_anchor(&[0.0], std::slice::from_ref(&img), std::slice::from_ref(&txt), &cfg).unwrap();
        let r = change_rates(&a, &img, &txt, &cfg).unwrap();
        assert_eq!(r, rates(0.0, 0.0, 0.0));
        assert_eq!(soft_label(r).value(), 1.0);
    }

    #[test]
    fn stubbed_mi_rates() {
        // |0.8-0.4|/0.8, |0.8-0.6|/0.8, |0.8-0.7|/0.8
        let r = change_rates_from_mi(0.8, 0.4, 0.6, 0.7);
        assert!((r.r_p - 0.5).abs() < 1e-15);
        assert!((r.r_t - 0.25).abs() < 1e-15);
        assert!((r.r_i - 0.125).abs() < 1e-15);
    }

    #[test]
    fn degenerate_anchor_uses_floor() {
        let r = change_rates_from_mi(0.0, 0.3, 0.0, 0.1);
        assert!(r.r_p.is_finite() && r.r_i.is_finite());
        assert!((r.r_p - 0.3 / EPS_MI).abs() < 1e-3);
    }

    #[test]
    fn soft_label_values() {
        assert_eq!(soft_label(rates(0.0, 0.3, 0.3)).value(), 1.0);
        assert!((soft_label(rates(0.5, 0.25, 0.125)).value() - 1.0 / 1.625).abs() < 1e-15);
        assert!((soft_label(rates(9.0, 0.0, 0.0)).value() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rectify_identical_pairs() {
        let v = vec![vec![0.0, 1.0, 2.0, 3.0]; 2];
        let labels = rectify_batch(&v, &v, &[0.3, 0.3], &HistogramConfig::default()).unwrap();
        assert_eq!(labels, vec![SoftLabel::ONE; 2]);
        assert!(rectify_batch(&v[..1], &v[..1], &[0.3], &HistogramConfig::default()).is_err());
    }

    #[test]
    fn mismatched_pair_scores_lower() {
        // pair 0: text tracks the image; pair 1: text is a permutation of pair 0's text
        let img: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let txt: Vec<f64> = img.iter().map(|x| x * 0.9 + 0.05).collect();
        let mut perm_txt = txt.clone();
        perm_txt.reverse();
        perm_txt.rotate_left(7);
        let imgs = vec![img.clone(), img.clone()];
        let txts = vec![txt, perm_txt];
        let labels = rectify_batch(&imgs, &txts, &[0.1, 0.8], &HistogramConfig::default()).unwrap();
        assert_eq!(labels[0], SoftLabel::ONE);
        assert!(labels[1] < labels[0]);
    }

    #[test]
    fn rectify_is_permutation_equivariant() {
        let mut rng = rng_from(4);
        let n = 6;
        let imgs: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| rng.random()).collect()).collect();
        let txts: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| rng.random()).collect()).collect();
        let losses: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let cfg = HistogramConfig::default();
        let base = rectify_batch(&imgs, &txts, &losses, &cfg).unwrap();
        let shift = |v: &[Vec<f64>]| {
            let mut v = v.to_vec();
            v.rotate_left(2);
            v
        };
        let mut l2 = losses.clone();
        l2.rotate_left(2);
        let shifted = rectify_batch(&shift(&imgs), &shift(&txts), &l2, &cfg).unwrap();
        let mut expected = base.clone();
        expected.rotate_left(2);
        assert_eq!(shifted, expected);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn label_in_unit_interval(r_p in 0.0f64..1e6, r_t in 0.0f64..1e6, r_i in 0.0f64..1e6) {
                let y = soft_label(rates(r_p, r_t, r_i)).value();
                prop_assert!(y > 0.0 && y <= 1.0);
            }

            #[test]
            fn decreasing_in_rp(r_p in 0.0f64..100.0, dp in 1e-6f64..10.0, r_t in 0.0f64..5.0, r_i in 0.0f64..5.0) {
                prop_assert!(soft_label(rates(r_p + dp, r_t, r_i)) < soft_label(rates(r_p, r_t, r_i)));
            }
        }
    }
}

//! Retrieval metrics, partition quality, and seed-battery summaries.

use serde::{Deserialize, Serialize};

use crate::encoder::SimilarityMatrix;
use crate::error::{invalid, Result};
use crate::gmm::FlowPartition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// Percentage of queries whose diagonal match ranks within the top `k`.
///
/// A gallery item outranks the match if its score is strictly greater, or
/// equal with a lower gallery index.
pub fn recall_at_k(sim: &SimilarityMatrix, k: usize, direction: Direction) -> Result<f64> {
    let n = sim.rows();
    if n == 0 || sim.cols() != n {
        return invalid(format!("recall needs a non-empty square matrix, got {:?}", sim.shape()));
    }
    if k == 0 || k > n {
        return invalid(format!("k={k} outside 1..={n}"));
    }
    let score = |q: usize, g: usize| match direction {
        Direction::ImageToText => sim.get(q, g),
        Direction::TextToImage => sim.get(g, q),
    };
    let hits = (0..n)
        .filter(|&q| {
            let target = score(q, q);
            let rank = (0..n)
                .filter(|&g| g != q && (score(q, g) > target || (score(q, g) == target && g < q)))
                .count();
            rank < k
        })
        .count();
    Ok(100.0 * hits as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub i2t_r10: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub t2i_r10: f64,
    pub rsum: f64,
}

impl RetrievalReport {
    pub fn recalls(&self) -> [f64; 6] {
        [self.i2t_r1, self.i2t_r5, self.i2t_r10, self.t2i_r1, self.t2i_r5, self.t2i_r10]
    }
}

/// R@1/5/10 in both directions. `k` is capped at the gallery size.
pub fn report(sim: &SimilarityMatrix) -> Result<RetrievalReport> {
    let n = sim.rows();
    let r = |k: usize, d| recall_at_k(sim, k.min(n), d);
    let mut rep = RetrievalReport {
        i2t_r1: r(1, Direction::ImageToText)?,
        i2t_r5: r(5, Direction::ImageToText)?,
        i2t_r10: r(10, Direction::ImageToText)?,
        t2i_r1: r(1, Direction::TextToImage)?,
        t2i_r5: r(5, Direction::TextToImage)?,
        t2i_r10: r(10, Direction::TextToImage)?,
        rsum: 0.0,
    };
    rep.rsum = rep.recalls().iter().sum();
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PartitionQuality {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Quality of the clean set against ground-truth flags.
pub fn partition_quality(partition: &FlowPartition, truly_clean: &[bool]) -> PartitionQuality {
    let selected = partition.clean_idx.len();
    let hits = partition.clean_idx.iter().filter(|&&i| truly_clean[i]).count();
    let positives = truly_clean.iter().filter(|&&c| c).count();
    let precision = if selected == 0 { 0.0 } else { hits as f64 / selected as f64 };
    let recall = if positives == 0 { 0.0 } else { hits as f64 / positives as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PartitionQuality { precision, recall, f1 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return invalid("nothing to summarise");
    }
    Ok(Summary {
        median: median(values),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Runs `run` once per seed and summarises the metric it returns.
pub fn seed_battery<F>(seeds: &[u64], run: F) -> Result<Summary>
where
    F: Fn(u64) -> Result<f64>,
{
    if seeds.len() < 3 {
        return invalid(format!("a seed battery needs at least 3 seeds, got {}", seeds.len()));
    }
    let values = seeds.iter().map(|&s| run(s)).collect::<Result<Vec<_>>>()?;
    summarize(&values)
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::matrix::Matrix;
    use crate::rng::rng_from;

    fn eye(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    fn oracle_recall(sim: &Matrix, k: usize, t2i: bool) -> f64 {
        let n = sim.rows();
        let mut hits = 0;
        for q in 0..n {
            let mut order: Vec<usize> = (0..n).collect();
            let s = |g: usize| if t2i { sim.get(g, q) } else { sim.get(q, g) };
            order.sort_by(|&a, &b| s(b).partial_cmp(&s(a)).unwrap().then(a.cmp(&b)));
            if order[..k].contains(&q) {
                hits += 1;
            }
        }
        100.0 * hits as f64 / n as f64
    }

    #[test]
    fn identity_and_reversed() {
        assert_eq!(recall_at_k(&eye(10), 1, Direction::ImageToText).unwrap(), 100.0);
        assert_eq!(report(&eye(12)).unwrap().rsum, 600.0);
        let mut rev = Matrix::from_vec(10, 10, vec![1.0; 100]).unwrap();
        for i in 0..10 {
            rev.set(i, i, 0.0);
        }
        assert_eq!(recall_at_k(&rev, 1, Direction::ImageToText).unwrap(), 0.0);
        assert_eq!(recall_at_k(&rev, 1, Direction::TextToImage).unwrap(), 0.0);
        assert!(recall_at_k(&eye(3), 4, Direction::ImageToText).is_err());
        assert!(recall_at_k(&eye(3), 0, Direction::ImageToText).is_err());
    }

    #[test]
    fn ties_rank_lower_index_first() {
        let flat = Matrix::from_vec(4, 4, vec![0.5; 16]).unwrap();
        // query q has q items ahead of it
        assert_eq!(recall_at_k(&flat, 1, Direction::ImageToText).unwrap(), 25.0);
        assert_eq!(recall_at_k(&flat, 2, Direction::ImageToText).unwrap(), 50.0);
    }

    #[test]
    fn matches_sort_oracle() {
        let mut rng = rng_from(50);
        let data: Vec<f64> = (0..2500).map(|_| (rng.random_range(-1.0f64..1.0) * 20.0).round() / 20.0).collect();
        let s = Matrix::from_vec(50, 50, data).unwrap();
        for k in [1, 5, 10, 50] {
            assert_eq!(recall_at_k(&s, k, Direction::ImageToText).unwrap(), oracle_recall(&s, k, false));
            assert_eq!(recall_at_k(&s, k, Direction::TextToImage).unwrap(), oracle_recall(&s, k, true));
        }
        let rep = report(&s).unwrap();
        assert_eq!(rep.i2t_r5, recall_at_k(&s, 5, Direction::ImageToText).unwrap());
        assert_eq!(rep.t2i_r10, recall_at_k(&s, 10, Direction::TextToImage).unwrap());
        assert!(rep.i2t_r1 <= rep.i2t_r5 && rep.i2t_r5 <= rep.i2t_r10);
        assert!(rep.t2i_r1 <= rep.t2i_r5 && rep.t2i_r5 <= rep.t2i_r10);
        assert_eq!(rep.rsum, rep.recalls().iter().sum::<f64>());
    }

    #[test]
    fn partition_quality_cases() {
        let truth = [true, true, false, true, false];
        let perfect = FlowPartition { clean_idx: vec![0, 1, 3], noisy_idx: vec![2, 4] };
        assert_eq!(
            partition_quality(&perfect, &truth),
            PartitionQuality { precision: 1.0, recall: 1.0, f1: 1.0 }
        );
        let truth: Vec<bool> = (0..10).map(|i| i >= 4).collect();
        let all = FlowPartition { clean_idx: (0..10).collect(), noisy_idx: vec![] };
        let q = partition_quality(&all, &truth);
        assert!((q.precision - 0.6).abs() < 1e-15 && q.recall == 1.0);
        let none = FlowPartition { clean_idx: vec![], noisy_idx: (0..10).collect() };
        assert_eq!(partition_quality(&none, &truth).precision, 0.0);
    }

    #[test]
    fn random_partition_matches_set_arithmetic() {
        let mut rng = rng_from(7);
        let truth: Vec<bool> = (0..200).map(|_| rng.random::<f64>() < 0.6).collect();
        let mut p = FlowPartition::default();
        for i in 0..200 {
            if rng.random::<bool>() {
                p.clean_idx.push(i);
            } else {
                p.noisy_idx.push(i);
            }
        }
        let tp = p.clean_idx.iter().filter(|&&i| truth[i]).count() as f64;
        let fp = p.clean_idx.len() as f64 - tp;
        let fneg = p.noisy_idx.iter().filter(|&&i| truth[i]).count() as f64;
        let q = partition_quality(&p, &truth);
        assert!((q.precision - tp / (tp + fp)).abs() < 1e-15);
        assert!((q.recall - tp / (tp + fneg)).abs() < 1e-15);
        assert!((q.f1 - 2.0 * tp / (2.0 * tp + fp + fneg)).abs() < 1e-12);
    }

    #[test]
    fn battery_summaries() {
        let s = seed_battery(&[1, 2, 3], |_| Ok(4.5)).unwrap();
        assert_eq!(s.median, 4.5);
        let s = seed_battery(&[1, 2, 3], |x| Ok(x as f64)).unwrap();
        assert_eq!((s.median, s.min, s.max), (2.0, 1.0, 3.0));
        let t = seed_battery(&[3, 1, 2], |x| Ok(x as f64)).unwrap();
        assert_eq!(s, t);
        assert!(seed_battery(&[1, 2], |_| Ok(0.0)).is_err());
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }
}

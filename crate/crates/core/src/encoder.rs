//! Linear dual encoder: one projection per modality into a shared space,
//! followed by L2 normalisation, so similarity is a plain dot product.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{invalid, Result, TsvcError};
use crate::matrix::Matrix;
use crate::mi::FeatureVector;
use crate::rng::rng_from;

/// Grid of cosine similarities; rows index images, columns texts.
pub type SimilarityMatrix = Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w_img: Matrix,
    pub w_txt: Matrix,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

/// Gradients shaped like [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub w_img: Matrix,
    pub w_txt: Matrix,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            w_img: Matrix::zeros(params.w_img.rows(), params.w_img.cols()),
            w_txt: Matrix::zeros(params.w_txt.rows(), params.w_txt.cols()),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.w_img.as_slice().iter().chain(self.w_txt.as_slice()).all(|&g| g == 0.0)
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

pub fn init_encoder(d_img: usize, d_txt: usize, embed_dim: usize, seed: u64) -> Result<EncoderParams> {
    if d_img < 2 || d_txt < 2 || embed_dim < 2 {
        return invalid(format!("encoder dims must be >= 2 (got {d_img}, {d_txt}, {embed_dim})"));
    }
    let mut rng = rng_from(seed);
    let w_img = glorot(embed_dim, d_img, &mut rng);
    let w_txt = glorot(embed_dim, d_txt, &mut rng);
    Ok(EncoderParams { w_img, w_txt, seed })
}

/// Output of one projection, kept for back-propagation.
#[derive(Debug, Clone)]
pub(crate) struct Projection {
    pub unit: Vec<f64>,
    /// `‖W x‖`; zero means the fallback basis vector was used.
    pub norm: f64,
}

pub(crate) fn project(w: &Matrix, x: &[f64]) -> Result<Projection> {
    let h = w.mul_vec(x)?;
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        Ok(Projection { unit: h.iter().map(|v| v / norm).collect(), norm })
    } else {
        let mut unit = vec![0.0; h.len()];
        unit[0] = 1.0;
        Ok(Projection { unit, norm: 0.0 })
    }
}

impl EncoderParams {
    pub fn embed_dim(&self) -> usize {
        self.w_img.rows()
    }

    pub fn d_img(&self) -> usize {
        self.w_img.cols()
    }

    pub fn d_txt(&self) -> usize {
        self.w_txt.cols()
    }

    fn weights(&self, m: Modality) -> &Matrix {
        match m {
            Modality::Image => &self.w_img,
            Modality::Text => &self.w_txt,
        }
    }

    /// Unit-norm embedding of `features`.
    pub fn embed(&self, modality: Modality, features: &[f64]) -> Result<FeatureVector> {
        Ok(FeatureVector::new_unchecked(project(self.weights(modality), features)?.unit))
    }

    pub fn embed_all<V: AsRef<[f64]>>(&self, modality: Modality, batch: &[V]) -> Result<Vec<FeatureVector>> {
        batch.iter().map(|x| self.embed(modality, x.as_ref())).collect()
    }

    /// `s[i][j] = <embed(img_i), embed(txt_j)>`.
    pub fn similarity_matrix<V: AsRef<[f64]>>(&self, imgs: &[V], txts: &[V]) -> Result<SimilarityMatrix> {
        if imgs.is_empty() || txts.is_empty() {
            return invalid("empty batch");
        }
        let u = self.embed_all(Modality::Image, imgs)?;
        let v = self.embed_all(Modality::Text, txts)?;
        Ok(similarity_from_embeddings(&u, &v))
    }
}

pub fn similarity(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn similarity_from_embeddings<V: AsRef<[f64]>>(u: &[V], v: &[V]) -> SimilarityMatrix {
    let mut s = Matrix::zeros(u.len(), v.len());
    for (i, ui) in u.iter().enumerate() {
        for (j, vj) in v.iter().enumerate() {
            s.set(i, j, similarity(ui.as_ref(), vj.as_ref()));
        }
    }
    s
}

/// `w ← w − lr · g`.
pub fn sgd_step(params: &EncoderParams, grads: &EncoderGrads, lr: f64) -> Result<EncoderParams> {
    if grads.w_img.shape() != params.w_img.shape() || grads.w_txt.shape() != params.w_txt.shape() {
        return invalid("gradient shape does not match parameters");
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return invalid(format!("learning rate {lr} must be finite and non-negative"));
    }
    let step = |w: &Matrix, g: &Matrix| {
        let data = w.as_slice().iter().zip(g.as_slice()).map(|(w, g)| w - lr * g).collect();
        Matrix::from_vec(w.rows(), w.cols(), data).expect("shape")
    };
    Ok(EncoderParams {
        w_img: step(&params.w_img, &grads.w_img),
        w_txt: step(&params.w_txt, &grads.w_txt),
        seed: params.seed,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSVM";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER: usize = 4 + 4 + 12 + 8;

/// Checkpoint bytes: magic, version, `embed_dim d_img d_txt` (u32), seed (u64),
/// then `w_img` and `w_txt` row-major as little-endian f64.
pub fn checkpoint_to_bytes(params: &EncoderParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        CHECKPOINT_HEADER + 8 * (params.w_img.as_slice().len() + params.w_txt.as_slice().len()),
    );
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for dim in [params.embed_dim(), params.d_img(), params.d_txt()] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&params.seed.to_le_bytes());
    for w in params.w_img.as_slice().iter().chain(params.w_txt.as_slice()) {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(TsvcError::Format {
                offset: self.pos,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(TsvcError::Format {
                offset: self.pos,
                message: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }

    pub fn format_err<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(TsvcError::Format { offset, message: message.into() })
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<EncoderParams> {
    let mut r = ByteReader::new(buf);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return r.format_err(0, "bad checkpoint magic");
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return r.format_err(4, format!("unsupported checkpoint version {version}"));
    }
    let dims_at = r.offset();
    let embed_dim = r.u32("embed_dim")? as usize;
    let d_img = r.u32("d_img")? as usize;
    let d_txt = r.u32("d_txt")? as usize;
    if embed_dim < 2 || d_img < 2 || d_txt < 2 {
        return r.format_err(dims_at, "checkpoint dimensions must be >= 2");
    }
    let seed = r.u64("seed")?;
    let expected = embed_dim
        .checked_mul(d_img + d_txt)
        .and_then(|n| n.checked_mul(8))
        .ok_or(TsvcError::Format { offset: dims_at, message: "dimensions overflow".into() })?;
    if buf.len() - r.offset() < expected {
        return r.format_err(r.offset(), format!("truncated weights: need {expected} bytes"));
    }
    let mut read = |rows: usize, cols: usize| -> Result<Matrix> {
        let data = (0..rows * cols).map(|_| r.f64("weight")).collect::<Result<Vec<_>>>()?;
        Matrix::from_vec(rows, cols, data)
    };
    let w_img = read(embed_dim, d_img)?;
    let w_txt = read(embed_dim, d_txt)?;
    r.finish()?;
    if !w_img.is_finite() || !w_txt.is_finite() {
        return Err(TsvcError::Format { offset: CHECKPOINT_HEADER, message: "non-finite weight".into() });
    }
    Ok(EncoderParams { w_img, w_txt, seed })
}

pub fn write_checkpoint(params: &EncoderParams, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_to_bytes(params))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<EncoderParams> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    checkpoint_from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_encoder(48, 32, 64, 1).unwrap();
        assert_eq!(a, init_encoder(48, 32, 64, 1).unwrap());
        assert_ne!(a, init_encoder(48, 32, 64, 2).unwrap());
        let bound_img = (6.0f64 / (64 + 48) as f64).sqrt();
        let bound_txt = (6.0f64 / (64 + 32) as f64).sqrt();
        assert!(a.w_img.as_slice().iter().all(|w| w.abs() <= bound_img));
        assert!(a.w_txt.as_slice().iter().all(|w| w.abs() <= bound_txt));
        assert!(init_encoder(1, 32, 64, 0).is_err());
        assert!(init_encoder(4, 4, 1, 0).is_err());
    }

    #[test]
    fn embedding_is_unit_and_scale_invariant() {
        let p = init_encoder(10, 6, 8, 3).unwrap();
        let x = randn(10, 4);
        let u = p.embed(Modality::Image, &x).unwrap();
        assert!((u.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        let scaled: Vec<f64> = x.iter().map(|v| v * 37.5).collect();
        let us = p.embed(Modality::Image, &scaled).unwrap();
        for (a, b) in u.iter().zip(us.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(p.embed(Modality::Text, &x).is_err());
    }

    #[test]
    fn embedding_matches_naive_matmul() {
        let p = init_encoder(12, 7, 5, 9).unwrap();
        let x = randn(7, 10);
        let mut h = [0.0; 5];
        for r in 0..5 {
            for c in 0..7 {
                h[r] += p.w_txt.get(r, c) * x[c];
            }
        }
        let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u = p.embed(Modality::Text, &x).unwrap();
        for r in 0..5 {
            assert!((u[r] - h[r] / n).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_projection_falls_back_to_first_basis_vector() {
        let p = init_encoder(4, 4, 3, 0).unwrap();
        let u = p.embed(Modality::Image, &[0.0; 4]).unwrap();
        assert_eq!(u.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn similarity_basics() {
        let u = [0.6, 0.8];
        assert!((similarity(&u, &u) - 1.0).abs() < 1e-15);
        assert!((similarity(&u, &[-0.6, -0.8]) + 1.0).abs() < 1e-15);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn similarity_matrix_matches_elementwise() {
        let p = init_encoder(6, 5, 4, 2).unwrap();
        let imgs: Vec<Vec<f64>> = (0..5).map(|i| randn(6, 100 + i)).collect();
        let txts: Vec<Vec<f64>> = (0..5).map(|i| randn(5, 200 + i)).collect();
        let s = p.similarity_matrix(&imgs, &txts).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let u = p.embed(Modality::Image, &imgs[i]).unwrap();
                let v = p.embed(Modality::Text, &txts[j]).unwrap();
                assert_eq!(s.get(i, j), similarity(&u, &v));
                assert!(s.get(i, j).abs() <= 1.0 + 1e-9);
            }
        }
        let one = p.similarity_matrix(&imgs[..1], &txts[..1]).unwrap();
        assert_eq!(one.shape(), (1, 1));
    }

    #[test]
    fn swapping_roles_transposes() {
        let p = init_encoder(6, 6, 4, 5).unwrap();
        let swapped = EncoderParams { w_img: p.w_txt.clone(), w_txt: p.w_img.clone(), seed: 0 };
        let a: Vec<Vec<f64>> = (0..4).map(|i| randn(6, 30 + i)).collect();
        let b: Vec<Vec<f64>> = (0..4).map(|i| randn(6, 40 + i)).collect();
        let s = p.similarity_matrix(&a, &b).unwrap();
        let t = swapped.similarity_matrix(&b, &a).unwrap();
        assert_eq!(s.transpose(), t);
    }

    #[test]
    fn sgd_cases() {
        let p = init_encoder(5, 4, 3, 7).unwrap();
        let zero = EncoderGrads::zeros_like(&p);
        assert_eq!(sgd_step(&p, &zero, 0.1).unwrap(), p);
        let g = EncoderGrads { w_img: p.w_img.clone(), w_txt: p.w_txt.clone() };
        let z = sgd_step(&p, &g, 1.0).unwrap();
        assert!(z.w_img.as_slice().iter().chain(z.w_txt.as_slice()).all(|&w| w == 0.0));

        let q = init_encoder(5, 4, 3, 8).unwrap();
        let g = EncoderGrads { w_img: q.w_img.clone(), w_txt: q.w_txt.clone() };
        let s = sgd_step(&p, &g, 0.05).unwrap();
        for (i, w) in s.w_img.as_slice().iter().enumerate() {
            assert_eq!(*w, p.w_img.as_slice()[i] - 0.05 * q.w_img.as_slice()[i]);
        }
        let bad = EncoderGrads { w_img: Matrix::zeros(2, 2), w_txt: p.w_txt.clone() };
        assert!(sgd_step(&p, &bad, 0.1).is_err());
    }

    #[test]
    fn checkpoint_layout_and_errors() {
        let p = init_encoder(5, 4, 3, 0xDEAD_BEEF).unwrap();
        let bytes = checkpoint_to_bytes(&p);
        assert_eq!(bytes.len(), 28 + 8 * 3 * (5 + 4));
        assert_eq!(&bytes[..4], b"TSVM");
        assert_eq!(checkpoint_from_bytes(&bytes).unwrap(), p);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad), Err(TsvcError::Format { offset: 0, .. })));
        for cut in 0..bytes.len() {
            assert!(matches!(checkpoint_from_bytes(&bytes[..cut]), Err(TsvcError::Format { .. })));
        }
    }
}

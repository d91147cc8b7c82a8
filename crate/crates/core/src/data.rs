//! Synthetic paired features, shuffle-style correspondence noise, splits, and
//! the binary dataset file.
//!
//! Each pair shares a latent `z ~ N(0, I)`; the image view is `A z + ε` and the
//! text view `B z + ε` for fixed random maps `A`, `B`. Features are stored as
//! f32, so generated values are rounded through f32 to make file round-trips
//! exact.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::ByteReader;
use crate::error::{invalid, Result, TsvcError};
use crate::matrix::Matrix;
use crate::mi::FeatureVector;
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub img: FeatureVector,
    pub txt: FeatureVector,
    /// Annotated correspondence label.
    pub y: u8,
    /// Ground truth, for evaluation only.
    pub is_truly_clean: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub d_img: usize,
    pub d_txt: usize,
    pub seed: u64,
    pub samples: Vec<PairSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    pub d_latent: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { n: 2000, d_latent: 16, d_img: 48, d_txt: 32, noise_sigma: 0.3, seed: 0 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return invalid(format!("dataset needs at least 10 pairs, got {}", self.n));
        }
        if self.d_latent < 2 || self.d_img < 2 || self.d_txt < 2 {
            return invalid("all dimensions must be >= 2");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return invalid(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        Ok(())
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn imgs(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.img.as_slice()).collect()
    }

    pub fn txts(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.txt.as_slice()).collect()
    }

    pub fn clean_flags(&self) -> Vec<bool> {
        self.samples.iter().map(|s| s.is_truly_clean).collect()
    }

    pub fn noisy_count(&self) -> usize {
        self.samples.iter().filter(|s| !s.is_truly_clean).count()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            d_img: self.d_img,
            d_txt: self.d_txt,
            seed: self.seed,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

fn random_map(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Matrix {
    let s = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Generates with freshly drawn maps `A` (d_img × d_latent) and `B` (d_txt × d_latent).
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, 0xA11);
    let a = random_map(spec.d_img, spec.d_latent, &mut rng);
    let b = random_map(spec.d_txt, spec.d_latent, &mut rng);
    generate_with_maps(spec, &a, &b)
}

pub fn generate_with_maps(spec: &DatasetSpec, a: &Matrix, b: &Matrix) -> Result<Dataset> {
    spec.validate()?;
    if a.shape() != (spec.d_img, spec.d_latent) || b.shape() != (spec.d_txt, spec.d_latent) {
        return invalid("generator maps do not match the dataset dimensions");
    }
    let mut rng = rng_for(spec.seed, 0xDA7A);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| TsvcError::InvalidInput(e.to_string()))?;
    let view = |m: &Matrix, z: &[f64], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        m.mul_vec(z)
            .expect("shape")
            .into_iter()
            .map(|v| {
                let e = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                (v + e) as f32 as f64
            })
            .collect()
    };
    let mut samples = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let z: Vec<f64> = (0..spec.d_latent).map(|_| StandardNormal.sample(&mut rng)).collect();
        let img = view(a, &z, &mut rng);
        let txt = view(b, &z, &mut rng);
        samples.push(PairSample {
            img: FeatureVector::new_unchecked(img),
            txt: FeatureVector::new_unchecked(txt),
            y: 1,
            is_truly_clean: true,
        });
    }
    Ok(Dataset { d_img: spec.d_img, d_txt: spec.d_txt, seed: spec.seed, samples })
}

/// Mismatches `round(ratio · n)` pairs by cyclically shifting their texts.
pub fn inject_noise(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&ratio) {
        return invalid(format!("noise ratio {ratio} outside [0, 1)"));
    }
    let n = dataset.len();
    let k = (ratio * n as f64).round() as usize;
    let mut out = dataset.clone();
    if ratio == 0.0 {
        return Ok(out);
    }
    if k < 2 {
        return invalid(format!("ratio {ratio} on {n} pairs selects {k} < 2 pairs"));
    }
    let mut rng = rng_for(seed, 0x5EED);
    let mut chosen = index::sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    for (j, &i) in chosen.iter().enumerate() {
        let src = chosen[(j + 1) % k];
        out.samples[i].txt = dataset.samples[src].txt.clone();
        out.samples[i].is_truly_clean = false;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitFractions {
    /// `(train, val, test)` sizes for `n` pairs; test takes the remainder.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|&x| !(x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return invalid(format!("split fractions {f:?} must be positive and sum to 1"));
        }
        let tr = (self.train * n as f64).round() as usize;
        let va = (self.val * n as f64).round() as usize;
        if tr == 0 || va == 0 || tr + va >= n {
            return invalid(format!("split of {n} pairs leaves an empty part"));
        }
        Ok((tr, va, n - tr - va))
    }
}

/// Seeded shuffle followed by a contiguous cut.
pub fn split(dataset: &Dataset, fractions: &SplitFractions, seed: u64) -> Result<Splits> {
    let (tr, va, _) = fractions.sizes(dataset.len())?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng_for(seed, 0x5917));
    Ok(Splits {
        train: dataset.subset(&order[..tr]),
        val: dataset.subset(&order[tr..tr + va]),
        test: dataset.subset(&order[tr + va..]),
    })
}

impl Splits {
    /// Train, val and test concatenated in that order; the layout a dataset file stores.
    pub fn concat(&self) -> Dataset {
        let mut all = self.train.clone();
        all.samples.extend(self.val.samples.iter().cloned());
        all.samples.extend(self.test.samples.iter().cloned());
        all
    }

    /// Inverse of [`Splits::concat`] under the same fractions.
    pub fn from_concat(all: &Dataset, fractions: &SplitFractions) -> Result<Splits> {
        let (tr, va, _) = fractions.sizes(all.len())?;
        let idx: Vec<usize> = (0..all.len()).collect();
        Ok(Splits {
            train: all.subset(&idx[..tr]),
            val: all.subset(&idx[tr..tr + va]),
            test: all.subset(&idx[tr + va..]),
        })
    }
}

/// Generate → split → inject noise into the train part only.
pub fn build_splits(spec: &DatasetSpec, fractions: &SplitFractions, noise_ratio: f64) -> Result<Splits> {
    let ds = generate(spec)?;
    let mut s = split(&ds, fractions, spec.seed)?;
    s.train = inject_noise(&s.train, noise_ratio, spec.seed)?;
    Ok(s)
}

pub const DATASET_MAGIC: &[u8; 4] = b"TSVD";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 8;

pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let too_big = |what: &str| TsvcError::InvalidInput(format!("{what} does not fit in u32"));
    let n = u32::try_from(ds.len()).map_err(|_| too_big("n"))?;
    let d_img = u32::try_from(ds.d_img).map_err(|_| too_big("d_img"))?;
    let d_txt = u32::try_from(ds.d_txt).map_err(|_| too_big("d_txt"))?;
    let mut out = Vec::with_capacity(DATASET_HEADER_LEN + ds.len() * (4 * (ds.d_img + ds.d_txt) + 2));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d_img.to_le_bytes());
    out.extend_from_slice(&d_txt.to_le_bytes());
    out.extend_from_slice(&ds.seed.to_le_bytes());
    for (i, s) in ds.samples.iter().enumerate() {
        if s.img.len() != ds.d_img || s.txt.len() != ds.d_txt {
            return invalid(format!("sample {i} does not match the dataset dimensions"));
        }
        for v in s.img.iter().chain(s.txt.iter()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.push(s.y);
        out.push(u8::from(s.is_truly_clean));
    }
    Ok(out)
}

pub fn dataset_from_bytes(buf: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(buf);
    if r.take(4, "magic")? != DATASET_MAGIC {
        return r.format_err(0, "bad dataset magic");
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return r.format_err(4, format!("unsupported dataset version {version}"));
    }
    let n = r.u32("n")? as usize;
    let d_img = r.u32("d_img")? as usize;
    let d_txt = r.u32("d_txt")? as usize;
    if d_img < 2 || d_txt < 2 {
        return r.format_err(12, "feature dimensions must be >= 2");
    }
    let seed = r.u64("seed")?;
    let record = 4 * (d_img + d_txt) + 2;
    let body = n.checked_mul(record).ok_or(TsvcError::Format {
        offset: 8,
        message: "record count overflows".into(),
    })?;
    if buf.len() - r.offset() < body {
        // locate the first incomplete record
        let at = r.offset() + (buf.len() - r.offset()) / record * record;
        return r.format_err(at, format!("truncated: {n} records need {body} bytes"));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let start = r.offset();
        let mut read = |d: usize| -> Result<Vec<f64>> {
            (0..d).map(|_| r.f32("feature").map(f64::from)).collect()
        };
        let img = read(d_img)?;
        let txt = read(d_txt)?;
        if img.iter().chain(&txt).any(|v| !v.is_finite()) {
            return r.format_err(start, "non-finite feature");
        }
        let y_at = r.offset();
        let y = r.u8("label")?;
        let clean = r.u8("clean flag")?;
        if y > 1 || clean > 1 {
            return r.format_err(y_at, "label and clean flag must be 0 or 1");
        }
        samples.push(PairSample {
            img: FeatureVector::new_unchecked(img),
            txt: FeatureVector::new_unchecked(txt),
            y,
            is_truly_clean: clean == 1,
        });
    }
    r.finish()?;
    Ok(Dataset { d_img, d_txt, seed, samples })
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = dataset_to_bytes(ds)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    dataset_from_bytes(&buf)
}

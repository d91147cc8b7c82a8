//! Python bindings for `tsvc-core`.

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tsvc_core::data::{self, DatasetSpec, SplitFractions};
use tsvc_core::encoder::{self, EncoderParams, Modality};
use tsvc_core::eval::{self, RetrievalReport};
use tsvc_core::gmm::{self, GmmConfig, GmmModel, PartitionRule};
use tsvc_core::loss::{self, MarginParams};
use tsvc_core::mi::{self, HistogramConfig};
use tsvc_core::sivc::{self, ChangeRates, SoftLabel};
use tsvc_core::trilearning::{self, TrainConfig, TrainMode};
use tsvc_core::TsvcError;

create_exception!(tsvc, FormatError, PyValueError);

fn py_err(e: TsvcError) -> PyErr {
    match e {
        TsvcError::Io(e) => PyIOError::new_err(e.to_string()),
        e @ TsvcError::Format { .. } => FormatError::new_err(e.to_string()),
        e @ TsvcError::Internal(_) => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for tsvc_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn hist(bins: Option<usize>) -> HistogramConfig {
    HistogramConfig { bins, ..HistogramConfig::default() }
}

fn rows(m: &tsvc_core::matrix::Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

#[pyfunction]
#[pyo3(signature = (x, y, bins=None))]
fn mutual_information(x: Vec<f64>, y: Vec<f64>, bins: Option<usize>) -> PyResult<f64> {
    mi::mutual_information(&x, &y, &hist(bins)).py()
}

#[pyfunction]
#[pyo3(signature = (v, bins=None))]
fn entropy(v: Vec<f64>, bins: Option<usize>) -> PyResult<f64> {
    mi::entropy(&v, &hist(bins)).py()
}

/// `(r_p, r_t, r_i)` from `MI(I_a,T_a), MI(I_b,T_b), MI(I_a,T_b), MI(I_b,T_a)`.
#[pyfunction]
fn change_rates_from_mi(mi_aa: f64, mi_bb: f64, mi_ab: f64, mi_ba: f64) -> (f64, f64, f64) {
    let r = sivc::change_rates_from_mi(mi_aa, mi_bb, mi_ab, mi_ba);
    (r.r_p, r.r_t, r.r_i)
}

#[pyfunction]
fn soft_label(r_p: f64, r_t: f64, r_i: f64) -> PyResult<f64> {
    if !(r_p >= 0.0 && r_t >= 0.0 && r_i >= 0.0) {
        return Err(PyValueError::new_err("change rates must be non-negative"));
    }
    Ok(sivc::soft_label(ChangeRates { r_p, r_t, r_i }).value())
}

#[pyfunction]
#[pyo3(signature = (img_embs, txt_embs, losses, bins=None))]
fn rectify_batch(img_embs: Vec<Vec<f64>>, txt_embs: Vec<Vec<f64>>, losses: Vec<f64>, bins: Option<usize>) -> PyResult<Vec<f64>> {
    let labels = sivc::rectify_batch(&img_embs, &txt_embs, &losses, &hist(bins)).py()?;
    Ok(labels.into_iter().map(SoftLabel::value).collect())
}

#[pyfunction]
#[pyo3(signature = (y_star, d, m=10.0, alpha=0.2))]
fn adaptive_margin(y_star: f64, d: f64, m: f64, alpha: f64) -> PyResult<f64> {
    let mp = MarginParams { m, alpha };
    mp.validate().py()?;
    if d.is_nan() || d < 0.0 {
        return Err(PyValueError::new_err("d must be >= 0"));
    }
    Ok(loss::adaptive_margin(SoftLabel::new(y_star).py()?, d, &mp))
}

/// Fixed-margin triplet loss per sample for a square similarity matrix.
#[pyfunction]
#[pyo3(signature = (sim, alpha=0.2))]
fn triplet_loss(sim: Vec<Vec<f64>>, alpha: f64) -> PyResult<Vec<f64>> {
    let m = tsvc_core::matrix::Matrix::from_rows(&sim).py()?;
    Ok(loss::plain_triplet_loss(&m, alpha).py()?.per_sample)
}

#[pyclass(name = "GaussianMixture", module = "tsvc", frozen)]
struct PyGmm {
    model: GmmModel,
    #[pyo3(get)]
    log_likelihoods: Vec<f64>,
}

#[pymethods]
impl PyGmm {
    #[getter]
    fn means(&self) -> [f64; 2] {
        self.model.means()
    }

    #[getter]
    fn weights(&self) -> [f64; 2] {
        self.model.weights()
    }

    #[getter]
    fn variances(&self) -> [f64; 2] {
        self.model.variances()
    }

    #[getter]
    fn clean_component(&self) -> usize {
        self.model.clean_component()
    }

    #[getter]
    fn clean_center(&self) -> f64 {
        gmm::clean_center(&self.model)
    }

    fn posterior_clean(&self, loss: f64) -> f64 {
        gmm::posterior_clean(&self.model, loss)
    }

    /// `(clean_idx, noisy_idx)`; `rule` is "posterior" or "normalized_loss".
    #[pyo3(signature = (losses, delta=0.5, rule="posterior"))]
    fn partition(&self, losses: Vec<f64>, delta: f64, rule: &str) -> PyResult<(Vec<usize>, Vec<usize>)> {
        let rule = match rule {
            "posterior" => PartitionRule::Posterior,
            "normalized_loss" => PartitionRule::NormalizedLoss,
            other => return Err(PyValueError::new_err(format!("unknown rule '{other}'"))),
        };
        let p = gmm::partition(&losses, &self.model, delta, rule).py()?;
        Ok((p.clean_idx, p.noisy_idx))
    }

    fn __repr__(&self) -> String {
        let m = self.model.means();
        format!("GaussianMixture(means=[{:.4}, {:.4}], clean={})", m[0], m[1], self.model.clean_component())
    }
}

#[pyfunction]
#[pyo3(signature = (losses, max_iter=50, tol=1e-6))]
fn fit_gmm(losses: Vec<f64>, max_iter: usize, tol: f64) -> PyResult<PyGmm> {
    let fit = gmm::fit_gmm_1d(&losses, &GmmConfig { max_iter, tol }).py()?;
    Ok(PyGmm { model: fit.model, log_likelihoods: fit.log_likelihoods })
}

#[pyclass(name = "Dataset", module = "tsvc", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn d_img(&self) -> usize {
        self.inner.d_img
    }

    #[getter]
    fn d_txt(&self) -> usize {
        self.inner.d_txt
    }

    #[getter]
    fn noisy_count(&self) -> usize {
        self.inner.noisy_count()
    }

    fn images(&self) -> Vec<Vec<f64>> {
        self.inner.samples.iter().map(|s| s.img.to_vec()).collect()
    }

    fn texts(&self) -> Vec<Vec<f64>> {
        self.inner.samples.iter().map(|s| s.txt.to_vec()).collect()
    }

    fn clean_flags(&self) -> Vec<bool> {
        self.inner.clean_flags()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        data::write_dataset(&self.inner, path).py()
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: data::read_dataset(path).py()? })
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, noisy={})", self.inner.len(), self.inner.noisy_count())
    }
}

#[pyclass(name = "Splits", module = "tsvc", frozen)]
struct PySplits {
    inner: data::Splits,
}

#[pymethods]
impl PySplits {
    #[getter]
    fn train(&self) -> PyDataset {
        PyDataset { inner: self.inner.train.clone() }
    }

    #[getter]
    fn val(&self) -> PyDataset {
        PyDataset { inner: self.inner.val.clone() }
    }

    #[getter]
    fn test(&self) -> PyDataset {
        PyDataset { inner: self.inner.test.clone() }
    }

    /// Writes the CLI dataset file (train, val and test concatenated).
    fn save(&self, path: &str) -> PyResult<()> {
        data::write_dataset(&self.inner.concat(), path).py()
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let all = data::read_dataset(path).py()?;
        Ok(Self { inner: data::Splits::from_concat(&all, &SplitFractions::default()).py()? })
    }
}

/// Synthetic dataset split 0.8/0.1/0.1 with noise injected into train only.
#[pyfunction]
#[pyo3(signature = (n=2000, d_latent=16, d_img=48, d_txt=32, noise_sigma=0.3, noise_ratio=0.0, seed=0))]
fn generate(
    n: usize,
    d_latent: usize,
    d_img: usize,
    d_txt: usize,
    noise_sigma: f64,
    noise_ratio: f64,
    seed: u64,
) -> PyResult<PySplits> {
    let spec = DatasetSpec { n, d_latent, d_img, d_txt, noise_sigma, seed };
    Ok(PySplits { inner: data::build_splits(&spec, &SplitFractions::default(), noise_ratio).py()? })
}

#[pyclass(name = "Encoder", module = "tsvc", frozen, from_py_object)]
#[derive(Clone)]
struct PyEncoder {
    inner: EncoderParams,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (d_img, d_txt, embed_dim=64, seed=0))]
    fn new(d_img: usize, d_txt: usize, embed_dim: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: encoder::init_encoder(d_img, d_txt, embed_dim, seed).py()? })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    fn embed_image(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.embed(Modality::Image, &x).py()?.into_inner())
    }

    fn embed_text(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.embed(Modality::Text, &x).py()?.into_inner())
    }

    fn similarity_matrix(&self, imgs: Vec<Vec<f64>>, txts: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.similarity_matrix(&imgs, &txts).py()?))
    }

    fn to_bytes(&self) -> Vec<u8> {
        encoder::checkpoint_to_bytes(&self.inner)
    }

    #[staticmethod]
    fn from_bytes(buf: Vec<u8>) -> PyResult<Self> {
        Ok(Self { inner: encoder::checkpoint_from_bytes(&buf).py()? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        encoder::write_checkpoint(&self.inner, path).py()
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: encoder::read_checkpoint(path).py()? })
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

fn report_dict<'py>(py: Python<'py>, r: &RetrievalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("i2t_r1", r.i2t_r1)?;
    d.set_item("i2t_r5", r.i2t_r5)?;
    d.set_item("i2t_r10", r.i2t_r10)?;
    d.set_item("t2i_r1", r.t2i_r1)?;
    d.set_item("t2i_r5", r.t2i_r5)?;
    d.set_item("t2i_r10", r.t2i_r10)?;
    d.set_item("rsum", r.rsum)?;
    Ok(d)
}

/// Recall@1/5/10 both ways and Rsum for a square similarity matrix.
#[pyfunction]
fn retrieval_report<'py>(py: Python<'py>, sim: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let m = tsvc_core::matrix::Matrix::from_rows(&sim).py()?;
    report_dict(py, &eval::report(&m).py()?)
}

/// Fused retrieval report of one or more encoders on a dataset.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, models: Vec<PyEncoder>, data: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
    let refs: Vec<&EncoderParams> = models.iter().map(|m| &m.inner).collect();
    report_dict(py, &trilearning::evaluate(&refs, &data.inner).py()?)
}

#[pyclass(name = "TrainResult", module = "tsvc", frozen)]
struct PyTrainResult {
    #[pyo3(get)]
    names: Vec<String>,
    #[pyo3(get)]
    models: Vec<PyEncoder>,
    #[pyo3(get)]
    rsum: Vec<f64>,
    #[pyo3(get)]
    partition_f1: Vec<f64>,
    #[pyo3(get)]
    mean_loss: Vec<f64>,
    #[pyo3(get)]
    eval_models: Vec<PyEncoder>,
}

#[pymethods]
impl PyTrainResult {
    #[getter]
    fn final_rsum(&self) -> f64 {
        self.rsum.last().copied().unwrap_or(f64::NAN)
    }
}

/// Trains `mode` ("tsvc", "co" or "none") on `splits.train`, logging on `splits.val`.
#[pyfunction]
#[pyo3(signature = (splits, mode="tsvc", seed=0, epochs=40, warmup_epochs=5, delta=0.5, m=10.0, alpha=0.2,
    lr=0.05, batch_size=128, embed_dim=64, use_sivc=true, use_dasm=true))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    splits: &PySplits,
    mode: &str,
    seed: u64,
    epochs: usize,
    warmup_epochs: usize,
    delta: f64,
    m: f64,
    alpha: f64,
    lr: f64,
    batch_size: usize,
    embed_dim: usize,
    use_sivc: bool,
    use_dasm: bool,
) -> PyResult<PyTrainResult> {
    let mode: TrainMode = mode.parse().py()?;
    let cfg = TrainConfig {
        mode,
        seed,
        epochs,
        warmup_epochs,
        delta,
        m,
        alpha,
        lr,
        batch_size,
        embed_dim,
        use_sivc,
        use_dasm,
        ..TrainConfig::default()
    };
    let out = py.detach(|| trilearning::train(&splits.inner, &cfg)).py()?;
    let wrap = |p: &EncoderParams| PyEncoder { inner: p.clone() };
    Ok(PyTrainResult {
        names: out.models.named().iter().map(|(n, _)| n.to_string()).collect(),
        models: out.models.named().iter().map(|(_, p)| wrap(p)).collect(),
        eval_models: out.models.eval_models().into_iter().map(wrap).collect(),
        rsum: out.logs.iter().map(|l| l.rsum_val).collect(),
        partition_f1: out.logs.iter().map(|l| l.partition_f1).collect(),
        mean_loss: out.logs.iter().map(|l| l.mean_loss).collect(),
    })
}

#[pymodule]
fn tsvc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FormatError", m.py().get_type::<FormatError>())?;
    m.add_class::<PyGmm>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PySplits>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(change_rates_from_mi, m)?)?;
    m.add_function(wrap_pyfunction!(soft_label, m)?)?;
    m.add_function(wrap_pyfunction!(rectify_batch, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_margin, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(fit_gmm, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_report, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}

//! Three-model cooperative training and its baselines.
//!
//! Each epoch after warmup:
//!
//! 1. The Coordinator scores every training pair; a GMM on those losses splits
//!    the data into a clean flow `D_c^M` and a noisy flow `D_n^A`.
//! 2. The Master re-filters `D_c^M` into `D'_c^M`; the Assistant mines the
//!    relatively clean `D'_c^A` out of `D_n^A`. Each fits its own GMM.
//! 3. Labels are rectified per batch, then the Assistant trains on `D'_c^M`,
//!    the Master on `D'_c^A ∪ D_c^M` and the Coordinator on `D'_c^A`.
//!
//! Evaluation fuses the Master and Assistant similarity matrices.
//!
//! Every model remembers the most recent loss of each training pair. That
//! memory picks the batch anchor for label rectification and supplies the
//! distance to the clean centre in the adaptive margin (zero for a pair the
//! model has not scored yet).

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::encoder::{init_encoder, sgd_step, EncoderParams, Modality, SimilarityMatrix};
use crate::error::{invalid, Result, TsvcError};
use crate::eval::{partition_quality, report, PartitionQuality, RetrievalReport};
use crate::gmm::{clean_center, fit_gmm_1d, median_split, partition, FlowPartition, GmmConfig, GmmModel, PartitionRule};
use crate::loss::{adaptive_margin, triplet_gradients, triplet_loss_with_margins, MarginParams};
use crate::matrix::Matrix;
use crate::mi::HistogramConfig;
use crate::rng::{derive_seed, rng_for};
use crate::sivc::{rectify_batch, SoftLabel};

/// Label given to pairs judged noisy when soft labels are disabled.
pub const HARD_NOISY_LABEL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TrainMode {
    #[default]
    #[serde(rename = "tsvc")]
    Tsvc,
    #[serde(rename = "co", alias = "co_teaching")]
    CoTeaching,
    #[serde(rename = "none", alias = "no_filter")]
    NoFilter,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Tsvc => "tsvc",
            TrainMode::CoTeaching => "co",
            TrainMode::NoFilter => "none",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = TsvcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsvc" => Ok(TrainMode::Tsvc),
            "co" | "co_teaching" => Ok(TrainMode::CoTeaching),
            "none" | "no_filter" => Ok(TrainMode::NoFilter),
            other => invalid(format!("unknown mode '{other}' (expected tsvc, co or none)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub delta: f64,
    pub m: f64,
    pub alpha: f64,
    /// Histogram bins for MI; `None` uses the square-root rule.
    pub bins: Option<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub embed_dim: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub gmm_max_iter: usize,
    pub gmm_tol: f64,
    /// Off: hard labels from the partitions instead of MI soft labels.
    pub use_sivc: bool,
    /// Off: fixed-margin triplet loss everywhere.
    pub use_dasm: bool,
    pub partition_rule: PartitionRule,
    /// Stop after this many epochs without a validation Rsum improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            m: 10.0,
            alpha: 0.2,
            bins: None,
            lr: 0.05,
            epochs: 40,
            warmup_epochs: 5,
            batch_size: 128,
            embed_dim: 64,
            seed: 0,
            mode: TrainMode::Tsvc,
            gmm_max_iter: 50,
            gmm_tol: 1e-6,
            use_sivc: true,
            use_dasm: true,
            partition_rule: PartitionRule::Posterior,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return invalid(format!("delta {} outside (0, 1)", self.delta));
        }
        self.margin_params().validate()?;
        self.histogram().validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid(format!("learning rate {} must be finite and >= 0", self.lr));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return invalid(format!(
                "need 0 <= warmup ({}) < epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size < 2 {
            return invalid("batch_size must be >= 2");
        }
        if self.embed_dim < 2 {
            return invalid("embed_dim must be >= 2");
        }
        if self.gmm_max_iter == 0 || !(self.gmm_tol >= 0.0) {
            return invalid("gmm_max_iter must be >= 1 and gmm_tol >= 0");
        }
        Ok(())
    }

    pub fn margin_params(&self) -> MarginParams {
        MarginParams { m: self.m, alpha: self.alpha }
    }

    pub fn histogram(&self) -> HistogramConfig {
        HistogramConfig { bins: self.bins, ..HistogramConfig::default() }
    }

    pub fn gmm(&self) -> GmmConfig {
        GmmConfig { max_iter: self.gmm_max_iter, tol: self.gmm_tol }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelTriple {
    pub coordinator: EncoderParams,
    pub master: EncoderParams,
    pub assistant: EncoderParams,
}

impl ModelTriple {
    pub fn init(d_img: usize, d_txt: usize, embed_dim: usize, seeds: [u64; 3]) -> Result<Self> {
        if seeds[0] == seeds[1] || seeds[1] == seeds[2] || seeds[0] == seeds[2] {
            return invalid(format!("the three models need distinct seeds, got {seeds:?}"));
        }
        Ok(Self {
            coordinator: init_encoder(d_img, d_txt, embed_dim, seeds[0])?,
            master: init_encoder(d_img, d_txt, embed_dim, seeds[1])?,
            assistant: init_encoder(d_img, d_txt, embed_dim, seeds[2])?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub rsum_val: f64,
    /// i2t R@1/5/10 then t2i R@1/5/10.
    pub r_at_k: [f64; 6],
    pub partition_precision: f64,
    pub partition_recall: f64,
    pub partition_f1: f64,
    pub mean_loss: f64,
}

impl EpochLog {
    fn new(epoch: usize, rep: &RetrievalReport, q: PartitionQuality, mean_loss: f64) -> Self {
        Self {
            epoch,
            rsum_val: rep.rsum,
            r_at_k: rep.recalls(),
            partition_precision: q.precision,
            partition_recall: q.recall,
            partition_f1: q.f1,
            mean_loss,
        }
    }
}

/// Index sets (into the training split) produced in one epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochFlows {
    /// `D_c^M`; for Co-teaching, the first peer's selection.
    pub clean: Vec<usize>,
    /// `D_n^A`; for Co-teaching, the first peer's rejects.
    pub noisy: Vec<usize>,
    /// `D'_c^M`; for Co-teaching, the second peer's selection.
    pub re_clean_master: Vec<usize>,
    /// `D'_c^A`.
    pub re_clean_assistant: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModels {
    Tri(ModelTriple),
    Pair([EncoderParams; 2]),
    Single(EncoderParams),
}

impl TrainedModels {
    /// Models fused at evaluation time.
    pub fn eval_models(&self) -> Vec<&EncoderParams> {
        match self {
            TrainedModels::Tri(t) => vec![&t.master, &t.assistant],
            TrainedModels::Pair([a, b]) => vec![a, b],
            TrainedModels::Single(m) => vec![m],
        }
    }

    /// Checkpoint file stem and parameters for every model.
    pub fn named(&self) -> Vec<(&'static str, &EncoderParams)> {
        match self {
            TrainedModels::Tri(t) => vec![
                ("coordinator", &t.coordinator),
                ("master", &t.master),
                ("assistant", &t.assistant),
            ],
            TrainedModels::Pair([a, b]) => vec![("peer_a", a), ("peer_b", b)],
            TrainedModels::Single(m) => vec![("model", m)],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: TrainedModels,
    pub logs: Vec<EpochLog>,
    /// `None` for epochs without a division (warmup, unfiltered training).
    pub flows: Vec<Option<EpochFlows>>,
}

/// Elementwise mean of the two models' similarity matrices.
pub fn fused_similarity<V: AsRef<[f64]>>(
    master: &EncoderParams,
    assistant: &EncoderParams,
    imgs: &[V],
    txts: &[V],
) -> Result<SimilarityMatrix> {
    fuse(&[master, assistant], imgs, txts)
}

/// Mean similarity over any number of models.
pub fn fuse<V: AsRef<[f64]>>(models: &[&EncoderParams], imgs: &[V], txts: &[V]) -> Result<SimilarityMatrix> {
    let Some((first, rest)) = models.split_first() else {
        return invalid("no models to fuse");
    };
    let mut acc = first.similarity_matrix(imgs, txts)?;
    if rest.is_empty() {
        return Ok(acc);
    }
    for m in rest {
        let s = m.similarity_matrix(imgs, txts)?;
        for (a, b) in acc.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *a += b;
        }
    }
    let k = models.len() as f64;
    let data = acc.as_slice().iter().map(|v| v / k).collect();
    Matrix::from_vec(acc.rows(), acc.cols(), data)
}

pub fn evaluate(models: &[&EncoderParams], data: &Dataset) -> Result<RetrievalReport> {
    report(&fuse(models, &data.imgs(), &data.txts())?)
}

/// Splits ids into consecutive batches of `size`, folding a trailing singleton
/// into the previous batch.
fn batches(ids: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = ids.chunks(size).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &ids[start..];
    }
    out
}

/// Shared read-only training context.
struct Ctx<'a> {
    train: &'a Dataset,
    cfg: &'a TrainConfig,
    hist: HistogramConfig,
    mp: MarginParams,
}

impl<'a> Ctx<'a> {
    fn new(train: &'a Dataset, cfg: &'a TrainConfig) -> Self {
        Self { train, cfg, hist: cfg.histogram(), mp: cfg.margin_params() }
    }

    fn features(&self, ids: &[usize]) -> (Vec<&'a [f64]>, Vec<&'a [f64]>) {
        ids.iter()
            .map(|&i| {
                let s = &self.train.samples[i];
                (s.img.as_slice(), s.txt.as_slice())
            })
            .unzip()
    }
}

/// One model plus its per-sample loss memory and latest GMM.
#[derive(Debug, Clone)]
struct Learner {
    params: EncoderParams,
    memory: Vec<Option<f64>>,
    gmm: Option<GmmModel>,
    /// Clean/noisy verdict per pair from the latest division; used only for hard labels.
    verdict: Vec<bool>,
    rng: ChaCha8Rng,
}

impl Learner {
    fn new(params: EncoderParams, n: usize) -> Self {
        let rng = rng_for(params.seed, 0xBA7C);
        Self { params, memory: vec![None; n], gmm: None, verdict: vec![true; n], rng }
    }

    /// Margins for a batch. Fixed `α` until this model has a GMM (or when the
    /// adaptive margin is off); adaptive afterwards.
    fn margins(&self, ctx: &Ctx, ids: &[usize]) -> Result<Vec<f64>> {
        let gmm = match (&self.gmm, ctx.cfg.use_dasm) {
            (Some(g), true) => g,
            _ => return Ok(vec![ctx.mp.alpha; ids.len()]),
        };
        let l_clean = clean_center(gmm);
        let labels: Vec<SoftLabel> = if ctx.cfg.use_sivc {
            let (imgs, txts) = ctx.features(ids);
            let u = self.params.embed_all(Modality::Image, &imgs)?;
            let v = self.params.embed_all(Modality::Text, &txts)?;
            // unscored pairs never win the anchor slot
            let prev: Vec<f64> = ids.iter().map(|&i| self.memory[i].unwrap_or(f64::MAX)).collect();
            rectify_batch(&u, &v, &prev, &ctx.hist)?
        } else {
            ids.iter()
                .map(|&i| {
                    SoftLabel::new(if self.verdict[i] { 1.0 } else { HARD_NOISY_LABEL })
                })
                .collect::<Result<_>>()?
        };
        Ok(labels
            .into_iter()
            .zip(ids)
            .map(|(y, &i)| adaptive_margin(y, self.memory[i].map_or(0.0, |l| (l - l_clean).abs()), &ctx.mp))
            .collect())
    }

    /// Current losses for `ids` (in order); refreshes the memory.
    fn evaluate(&mut self, ctx: &Ctx, ids: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ids.len());
        if ids.len() < 2 {
            return Ok(ids.iter().map(|&i| self.memory[i].unwrap_or(0.0)).collect());
        }
        for batch in batches(ids, ctx.cfg.batch_size) {
            let margins = self.margins(ctx, batch)?;
            let (imgs, txts) = ctx.features(batch);
            let sim = self.params.similarity_matrix(&imgs, &txts)?;
            let stats = triplet_loss_with_margins(&sim, &margins)?;
            for (&i, &l) in batch.iter().zip(&stats.per_sample) {
                self.memory[i] = Some(l);
            }
            out.extend(stats.per_sample);
        }
        Ok(out)
    }

    /// One shuffled pass of SGD over `ids`; returns the per-sample losses seen.
    fn train_on(&mut self, ctx: &Ctx, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.len() < 2 {
            debug!("model {}: {} training pairs, update skipped", self.params.seed, ids.len());
            return Ok(Vec::new());
        }
        let mut order = ids.to_vec();
        order.shuffle(&mut self.rng);
        let mut seen = Vec::with_capacity(ids.len());
        for batch in batches(&order, ctx.cfg.batch_size) {
            let margins = self.margins(ctx, batch)?;
            let (imgs, txts) = ctx.features(batch);
            let (stats, grads) = triplet_gradients(&self.params, &imgs, &txts, &margins)?;
            // batch-mean step
            self.params = sgd_step(&self.params, &grads, ctx.cfg.lr / batch.len() as f64)?;
            for (&i, &l) in batch.iter().zip(&stats.per_sample) {
                self.memory[i] = Some(l);
            }
            seen.extend(stats.per_sample);
        }
        Ok(seen)
    }

    /// Fits a GMM to losses over `ids` and splits them. Returns dataset indices.
    fn divide(&mut self, ctx: &Ctx, ids: &[usize], losses: &[f64]) -> Result<Option<FlowPartition>> {
        let local = match fit_gmm_1d(losses, &ctx.cfg.gmm()) {
            Ok(fit) => {
                let p = partition(losses, &fit.model, ctx.cfg.delta, ctx.cfg.partition_rule)?;
                self.gmm = Some(fit.model);
                p
            }
            Err(TsvcError::DegenerateInput(msg)) => {
                warn!("model {}: {msg}; falling back to a median split", self.params.seed);
                median_split(losses)
            }
            Err(TsvcError::InvalidInput(msg)) if ids.len() < 4 => {
                debug!("model {}: {msg}", self.params.seed);
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        Ok(Some(local.remap(ids)))
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn membership(n: usize, sets: &[&[usize]]) -> Vec<bool> {
    let mut v = vec![false; n];
    for &i in sets.iter().flat_map(|s| s.iter()) {
        v[i] = true;
    }
    v
}

fn all_clean(n: usize) -> FlowPartition {
    FlowPartition { clean_idx: (0..n).collect(), noisy_idx: Vec::new() }
}

/// Coordinator, Master and Assistant with their training state.
pub struct TriLearner<'a> {
    ctx: Ctx<'a>,
    coordinator: Learner,
    master: Learner,
    assistant: Learner,
}

impl<'a> TriLearner<'a> {
    pub fn new(train: &'a Dataset, cfg: &'a TrainConfig, models: ModelTriple) -> Self {
        let n = train.len();
        Self {
            ctx: Ctx::new(train, cfg),
            coordinator: Learner::new(models.coordinator, n),
            master: Learner::new(models.master, n),
            assistant: Learner::new(models.assistant, n),
        }
    }

    pub fn models(&self) -> ModelTriple {
        ModelTriple {
            coordinator: self.coordinator.params.clone(),
            master: self.master.params.clone(),
            assistant: self.assistant.params.clone(),
        }
    }

    /// One epoch of fixed-margin training of all three models on every pair.
    pub fn warmup_epoch(&mut self) -> Result<f64> {
        let all: Vec<usize> = (0..self.ctx.train.len()).collect();
        let mut losses = Vec::new();
        for m in [&mut self.coordinator, &mut self.master, &mut self.assistant] {
            losses.extend(m.train_on(&self.ctx, &all)?);
        }
        Ok(mean(&losses))
    }

    /// Step 1: the Coordinator's division into `(D_c^M, D_n^A)`.
    pub fn step1_divide(&mut self) -> Result<FlowPartition> {
        let all: Vec<usize> = (0..self.ctx.train.len()).collect();
        let losses = self.coordinator.evaluate(&self.ctx, &all)?;
        match self.coordinator.divide(&self.ctx, &all, &losses)? {
            Some(p) => Ok(p),
            None => Ok(all_clean(all.len())),
        }
    }

    /// Step 2: `(D'_c^M, D'_c^A)` from the Master and the Assistant.
    pub fn step2_redivide(&mut self, flow: &FlowPartition) -> Result<(Vec<usize>, Vec<usize>)> {
        let ctx = &self.ctx;
        let d_c_m = &flow.clean_idx;
        let d_n_a = &flow.noisy_idx;

        let re_master = if d_c_m.is_empty() {
            warn!("empty clean flow");
            Vec::new()
        } else {
            let losses = self.master.evaluate(ctx, d_c_m)?;
            match self.master.divide(ctx, d_c_m, &losses)? {
                Some(p) => p.clean_idx,
                None => d_c_m.clone(),
            }
        };
        let re_assistant = if d_n_a.is_empty() {
            debug!("empty noisy flow");
            Vec::new()
        } else {
            let losses = self.assistant.evaluate(ctx, d_n_a)?;
            match self.assistant.divide(ctx, d_n_a, &losses)? {
                Some(p) => p.clean_idx,
                None => Vec::new(),
            }
        };
        Ok((re_master, re_assistant))
    }

    /// Step 3: label rectification happens per batch inside each update.
    pub fn step3_train(&mut self, flow: &FlowPartition, re_master: &[usize], re_assistant: &[usize]) -> Result<f64> {
        // hard labels: clean iff kept by one of the re-divisions
        let verdict = membership(self.ctx.train.len(), &[re_master, re_assistant]);
        for m in [&mut self.coordinator, &mut self.master, &mut self.assistant] {
            m.verdict.clone_from(&verdict);
        }
        let ctx = &self.ctx;
        let mut master_set: Vec<usize> = re_assistant.iter().chain(&flow.clean_idx).copied().collect();
        master_set.sort_unstable();
        let mut losses = self.assistant.train_on(ctx, re_master)?;
        losses.extend(self.master.train_on(ctx, &master_set)?);
        losses.extend(self.coordinator.train_on(ctx, re_assistant)?);
        Ok(mean(&losses))
    }

    fn eval_report(&self, val: &Dataset) -> Result<RetrievalReport> {
        evaluate(&[&self.master.params, &self.assistant.params], val)
    }
}

/// Tracks the optional early-stopping patience.
struct Patience {
    limit: Option<usize>,
    best: f64,
    since: usize,
}

impl Patience {
    fn new(limit: Option<usize>) -> Self {
        Self { limit, best: f64::NEG_INFINITY, since: 0 }
    }

    fn exhausted(&mut self, rsum: f64) -> bool {
        if rsum > self.best {
            self.best = rsum;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.limit.is_some_and(|p| self.since >= p)
    }
}

/// Model seeds derived from the run seed.
pub fn model_seeds(cfg: &TrainConfig) -> Vec<u64> {
    let streams: &[u64] = match cfg.mode {
        TrainMode::Tsvc => &[1, 2, 3],
        TrainMode::CoTeaching => &[11, 12],
        TrainMode::NoFilter => &[21],
    };
    streams.iter().map(|&s| derive_seed(cfg.seed, s)).collect()
}

/// Runs the configured mode on the train split, logging on the validation split.
pub fn train(splits: &Splits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seeds = model_seeds(cfg);
    match cfg.mode {
        TrainMode::Tsvc => train_tsvc(splits, cfg, [seeds[0], seeds[1], seeds[2]]),
        TrainMode::CoTeaching => co_teaching_baseline(splits, cfg, [seeds[0], seeds[1]]),
        TrainMode::NoFilter => train_no_filter(splits, cfg, seeds[0]),
    }
}

fn check_splits(splits: &Splits) -> Result<()> {
    if splits.train.len() < 2 || splits.val.is_empty() {
        return invalid("training needs at least 2 train pairs and a non-empty validation split");
    }
    if splits.val.d_img != splits.train.d_img || splits.val.d_txt != splits.train.d_txt {
        return invalid("train and validation feature dimensions differ");
    }
    Ok(())
}

pub fn train_tsvc(splits: &Splits, cfg: &TrainConfig, seeds: [u64; 3]) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_splits(splits)?;
    let train = &splits.train;
    let truth = train.clean_flags();
    let models = ModelTriple::init(train.d_img, train.d_txt, cfg.embed_dim, seeds)?;
    let mut tri = TriLearner::new(train, cfg, models);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut flows = Vec::with_capacity(cfg.epochs);
    let mut patience = Patience::new(cfg.patience);

    for epoch in 0..cfg.epochs {
        let (q, mean_loss, f) = if epoch < cfg.warmup_epochs {
            let l = tri.warmup_epoch()?;
            (partition_quality(&all_clean(train.len()), &truth), l, None)
        } else {
            let flow = tri.step1_divide()?;
            let (re_m, re_a) = tri.step2_redivide(&flow)?;
            let l = tri.step3_train(&flow, &re_m, &re_a)?;
            let q = partition_quality(&flow, &truth);
            let f = EpochFlows {
                clean: flow.clean_idx,
                noisy: flow.noisy_idx,
                re_clean_master: re_m,
                re_clean_assistant: re_a,
            };
            (q, l, Some(f))
        };
        let rep = tri.eval_report(&splits.val)?;
        debug!("epoch {epoch}: rsum {:.1} f1 {:.3}", rep.rsum, q.f1);
        logs.push(EpochLog::new(epoch, &rep, q, mean_loss));
        flows.push(f);
        if patience.exhausted(rep.rsum) {
            break;
        }
    }
    Ok(TrainOutcome { models: TrainedModels::Tri(tri.models()), logs, flows })
}

/// Two peers; each selects its small-loss pairs with its own GMM and hands them
/// to the other for the update.
pub fn co_teaching_baseline(splits: &Splits, cfg: &TrainConfig, seeds: [u64; 2]) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_splits(splits)?;
    if seeds[0] == seeds[1] {
        return invalid("co-teaching peers need distinct seeds");
    }
    let train = &splits.train;
    let truth = train.clean_flags();
    let ctx = Ctx::new(train, cfg);
    let n = train.len();
    let all: Vec<usize> = (0..n).collect();
    let mut peers = [
        Learner::new(init_encoder(train.d_img, train.d_txt, cfg.embed_dim, seeds[0])?, n),
        Learner::new(init_encoder(train.d_img, train.d_txt, cfg.embed_dim, seeds[1])?, n),
    ];
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut flows = Vec::with_capacity(cfg.epochs);
    let mut patience = Patience::new(cfg.patience);

    for epoch in 0..cfg.epochs {
        let mut losses = Vec::new();
        let (q, f) = if epoch < cfg.warmup_epochs {
            for p in peers.iter_mut() {
                losses.extend(p.train_on(&ctx, &all)?);
            }
            (partition_quality(&all_clean(n), &truth), None)
        } else {
            let mut sel = Vec::with_capacity(2);
            for p in peers.iter_mut() {
                let l = p.evaluate(&ctx, &all)?;
                sel.push(p.divide(&ctx, &all, &l)?.unwrap_or_else(|| all_clean(n)));
            }
            peers[0].verdict = membership(n, &[&sel[1].clean_idx]);
            peers[1].verdict = membership(n, &[&sel[0].clean_idx]);
            losses.extend(peers[0].train_on(&ctx, &sel[1].clean_idx)?);
            losses.extend(peers[1].train_on(&ctx, &sel[0].clean_idx)?);
            let q = partition_quality(&sel[0], &truth);
            let [a, b]: [FlowPartition; 2] = sel.try_into().expect("two peers");
            let f = EpochFlows {
                clean: a.clean_idx,
                noisy: a.noisy_idx,
                re_clean_master: b.clean_idx,
                re_clean_assistant: Vec::new(),
            };
            (q, Some(f))
        };
        let rep = evaluate(&[&peers[0].params, &peers[1].params], &splits.val)?;
        logs.push(EpochLog::new(epoch, &rep, q, mean(&losses)));
        flows.push(f);
        if patience.exhausted(rep.rsum) {
            break;
        }
    }
    let [a, b] = peers;
    Ok(TrainOutcome { models: TrainedModels::Pair([a.params, b.params]), logs, flows })
}

/// One model, every pair, fixed margin.
pub fn train_no_filter(splits: &Splits, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_splits(splits)?;
    let train = &splits.train;
    let truth = train.clean_flags();
    let ctx = Ctx::new(train, cfg);
    let all: Vec<usize> = (0..train.len()).collect();
    let mut model = Learner::new(init_encoder(train.d_img, train.d_txt, cfg.embed_dim, seed)?, train.len());
    let q = partition_quality(&all_clean(train.len()), &truth);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut patience = Patience::new(cfg.patience);
    for epoch in 0..cfg.epochs {
        let l = model.train_on(&ctx, &all)?;
        let rep = evaluate(&[&model.params], &splits.val)?;
        logs.push(EpochLog::new(epoch, &rep, q, mean(&l)));
        if patience.exhausted(rep.rsum) {
            break;
        }
    }
    let flows = vec![None; logs.len()];
    Ok(TrainOutcome { models: TrainedModels::Single(model.params), logs, flows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_splits, DatasetSpec, SplitFractions};

    fn small_splits(noise: f64, seed: u64) -> Splits {
        let spec = DatasetSpec { n: 400, seed, ..DatasetSpec::default() };
        build_splits(&spec, &SplitFractions::default(), noise).unwrap()
    }

    fn quick(mode: TrainMode) -> TrainConfig {
        TrainConfig { epochs: 6, warmup_epochs: 2, batch_size: 64, mode, ..TrainConfig::default() }
    }

    #[test]
    fn batching_folds_singletons() {
        let ids: Vec<usize> = (0..9).collect();
        let b = batches(&ids, 4);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1], &[4, 5, 6, 7, 8]);
        assert_eq!(batches(&ids[..8], 4).len(), 2);
        assert_eq!(batches(&ids[..1], 4), vec![&[0usize][..]]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { delta: 1.0, ..TrainConfig::default() },
            TrainConfig { m: 1.0, ..TrainConfig::default() },
            TrainConfig { warmup_epochs: 40, ..TrainConfig::default() },
            TrainConfig { batch_size: 1, ..TrainConfig::default() },
            TrainConfig { alpha: 0.0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(ModelTriple::init(4, 4, 4, [1, 1, 1]).is_err());
        assert!(ModelTriple::init(4, 4, 4, [1, 2, 1]).is_err());
    }

    #[test]
    fn fused_similarity_cases() {
        let a = init_encoder(5, 4, 3, 1).unwrap();
        let b = init_encoder(5, 4, 3, 2).unwrap();
        let imgs: Vec<Vec<f64>> = (0..4).map(|i| (0..5).map(|j| ((i * 5 + j) as f64).sin()).collect()).collect();
        let txts: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| ((i * 4 + j) as f64).cos()).collect()).collect();
        assert_eq!(fused_similarity(&a, &a, &imgs, &txts).unwrap(), a.similarity_matrix(&imgs, &txts).unwrap());
        let f = fused_similarity(&a, &b, &imgs, &txts).unwrap();
        let sa = a.similarity_matrix(&imgs, &txts).unwrap();
        let sb = b.similarity_matrix(&imgs, &txts).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((f.get(i, j) - 0.5 * (sa.get(i, j) + sb.get(i, j))).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fused_mean_of_scalars() {
        // embeddings in 2-D: image e0, texts e0 / e1 give similarity 1 and 0
        let mut w = Matrix::zeros(2, 2);
        w.set(0, 0, 1.0);
        w.set(1, 1, 1.0);
        let one = EncoderParams { w_img: w.clone(), w_txt: w.clone(), seed: 0 };
        let mut swap = Matrix::zeros(2, 2);
        swap.set(0, 1, 1.0);
        swap.set(1, 0, 1.0);
        let zero = EncoderParams { w_img: w, w_txt: swap, seed: 1 };
        let x = vec![vec![1.0, 0.0]];
        let f = fused_similarity(&one, &zero, &x, &x).unwrap();
        assert_eq!(f.as_slice(), &[0.5]);
    }

    #[test]
    fn zero_lr_leaves_models_unchanged() {
        let s = small_splits(0.2, 1);
        let cfg = TrainConfig { lr: 0.0, ..quick(TrainMode::Tsvc) };
        let out = train(&s, &cfg).unwrap();
        let seeds = model_seeds(&cfg);
        let init = ModelTriple::init(48, 32, 64, [seeds[0], seeds[1], seeds[2]]).unwrap();
        assert_eq!(out.models, TrainedModels::Tri(init));
    }

    #[test]
    fn warmup_lowers_training_loss() {
        let s = small_splits(0.0, 2);
        let cfg = quick(TrainMode::Tsvc);
        let models = ModelTriple::init(48, 32, 64, [1, 2, 3]).unwrap();
        let mut tri = TriLearner::new(&s.train, &cfg, models);
        let first = tri.warmup_epoch().unwrap();
        let mut last = first;
        for _ in 0..3 {
            last = tri.warmup_epoch().unwrap();
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn one_epoch_moves_all_three_models() {
        let s = small_splits(0.4, 3);
        let cfg = quick(TrainMode::Tsvc);
        let models = ModelTriple::init(48, 32, 64, [1, 2, 3]).unwrap();
        let mut tri = TriLearner::new(&s.train, &cfg, models);
        tri.warmup_epoch().unwrap();
        let before = tri.models();
        let flow = tri.step1_divide().unwrap();
        let (rm, ra) = tri.step2_redivide(&flow).unwrap();
        assert!(rm.len() >= 2 && ra.len() >= 2, "{} {}", rm.len(), ra.len());
        tri.step3_train(&flow, &rm, &ra).unwrap();
        let after = tri.models();
        assert_ne!(before.coordinator, after.coordinator);
        assert_ne!(before.master, after.master);
        assert_ne!(before.assistant, after.assistant);
    }

    #[test]
    fn flows_obey_subset_algebra() {
        let s = small_splits(0.4, 4);
        let out = train(&s, &quick(TrainMode::Tsvc)).unwrap();
        let n = s.train.len();
        for f in out.flows.iter().flatten() {
            let mut all: Vec<usize> = f.clean.iter().chain(&f.noisy).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(f.re_clean_master.iter().all(|i| f.clean.contains(i)));
            assert!(f.re_clean_assistant.iter().all(|i| f.noisy.contains(i)));
        }
        assert_eq!(out.flows.iter().filter(|f| f.is_some()).count(), 4);
    }

    #[test]
    fn training_is_deterministic() {
        let s = small_splits(0.4, 5);
        for mode in [TrainMode::Tsvc, TrainMode::CoTeaching, TrainMode::NoFilter] {
            let a = train(&s, &quick(mode)).unwrap();
            let b = train(&s, &quick(mode)).unwrap();
            assert_eq!(a.logs, b.logs);
            assert_eq!(a.models, b.models);
        }
    }

    #[test]
    fn no_filter_trains_one_model() {
        let s = small_splits(0.4, 6);
        let out = train(&s, &quick(TrainMode::NoFilter)).unwrap();
        assert!(matches!(out.models, TrainedModels::Single(_)));
        assert!(out.flows.iter().all(Option::is_none));
        assert_eq!(out.logs.len(), 6);
    }

    #[test]
    fn co_teaching_is_symmetric_in_peer_seeds() {
        let s = small_splits(0.4, 7);
        let cfg = quick(TrainMode::CoTeaching);
        let a = co_teaching_baseline(&s, &cfg, [10, 20]).unwrap();
        let b = co_teaching_baseline(&s, &cfg, [20, 10]).unwrap();
        let (TrainedModels::Pair([a0, a1]), TrainedModels::Pair([b0, b1])) = (&a.models, &b.models) else {
            panic!("expected peers");
        };
        assert_eq!((a0, a1), (b1, b0));
        for (x, y) in a.flows.iter().zip(&b.flows) {
            if let (Some(x), Some(y)) = (x, y) {
                assert_eq!(x.clean, y.re_clean_master);
                assert_eq!(x.re_clean_master, y.clean);
            }
        }
        for (x, y) in a.logs.iter().zip(&b.logs) {
            assert_eq!(x.r_at_k, y.r_at_k);
        }
    }

    #[test]
    #[ignore = "does not hold: a two-component fit on noise-free losses always splits off a high-loss \
                component (measured 20-80% clean); run with --ignored"]
    fn clean_data_lands_mostly_in_clean_flow() {
        let spec = DatasetSpec { seed: 9, ..DatasetSpec::default() };
        let s = build_splits(&spec, &SplitFractions::default(), 0.0).unwrap();
        let cfg = TrainConfig::default();
        let mut tri = TriLearner::new(&s.train, &cfg, ModelTriple::init(48, 32, 64, [4, 5, 6]).unwrap());
        for _ in 0..5 {
            tri.warmup_epoch().unwrap();
        }
        let flow = tri.step1_divide().unwrap();
        assert!(flow.clean_idx.len() as f64 >= 0.9 * s.train.len() as f64, "{}", flow.clean_idx.len());
    }

    #[test]
    fn assistant_recovers_clean_pairs_from_noisy_flow() {
        let s = small_splits(0.4, 10);
        let out = train(&s, &quick(TrainMode::Tsvc)).unwrap();
        let truth = s.train.clean_flags();
        for f in out.flows.iter().flatten() {
            assert!(f.re_clean_assistant.iter().any(|&i| truth[i]));
            assert!(f.re_clean_master.iter().all(|i| !f.re_clean_assistant.contains(i)));
        }
    }

    #[test]
    fn master_loss_on_clean_flow_decreases() {
        let s = small_splits(0.0, 11);
        let cfg = quick(TrainMode::Tsvc);
        let mut tri = TriLearner::new(&s.train, &cfg, ModelTriple::init(48, 32, 64, [7, 8, 9]).unwrap());
        tri.warmup_epoch().unwrap();
        let flow = tri.step1_divide().unwrap();
        let mut means = Vec::new();
        for _ in 0..5 {
            let (rm, ra) = tri.step2_redivide(&flow).unwrap();
            let l = tri.master.evaluate(&tri.ctx, &flow.clean_idx).unwrap();
            means.push(mean(&l));
            tri.step3_train(&flow, &rm, &ra).unwrap();
        }
        assert!(means[4] < means[0], "{means:?}");
    }

    #[test]
    fn ablations_run_and_change_training() {
        let s = small_splits(0.4, 12);
        let full = train(&s, &quick(TrainMode::Tsvc)).unwrap();
        for cfg in [
            TrainConfig { use_sivc: false, ..quick(TrainMode::Tsvc) },
            TrainConfig { use_dasm: false, ..quick(TrainMode::Tsvc) },
            TrainConfig { partition_rule: PartitionRule::NormalizedLoss, ..quick(TrainMode::Tsvc) },
        ] {
            let out = train(&s, &cfg).unwrap();
            assert_eq!(out.logs.len(), 6);
            assert_ne!(out.models, full.models);
        }
    }

    #[test]
    fn unseen_pairs_get_zero_distance() {
        let s = small_splits(0.4, 13);
        let cfg = TrainConfig { warmup_epochs: 0, ..quick(TrainMode::Tsvc) };
        let out = train(&s, &cfg).unwrap();
        assert!(out.logs.iter().all(|l| l.mean_loss.is_finite()));
        let mut l = Learner::new(init_encoder(48, 32, 8, 1).unwrap(), s.train.len());
        l.gmm = Some(GmmModel::new([0.5, 0.5], [0.1, 0.9], [0.01, 0.01]).unwrap());
        let ctx = Ctx::new(&s.train, &cfg);
        let ids = [0, 1, 2, 3];
        l.memory[1] = Some(0.1);
        let mut hard = cfg;
        hard.use_sivc = false;
        let ctx_hard = Ctx::new(&s.train, &hard);
        let m = l.margins(&ctx_hard, &ids).unwrap();
        // y* = 1 and d = 0 give the full 2α margin
        assert_eq!(m[0], 0.4);
        assert_eq!(m[1], 0.4);
        assert!(l.margins(&ctx, &ids).unwrap().iter().all(|&a| a > 0.0 && a <= 0.4));
    }

    #[test]
    fn patience_stops_early() {
        let s = small_splits(0.4, 8);
        let cfg = TrainConfig { patience: Some(1), lr: 0.0, ..quick(TrainMode::NoFilter) };
        let out = train(&s, &cfg).unwrap();
        assert_eq!(out.logs.len(), 2);
    }
}

//! `tsvc`: generate synthetic data, train, evaluate, compare modes and sweep
//! hyper-parameters. All outputs are CSV.
//!
//! Exit codes: 0 success, 1 I/O, 2 usage, 3 format.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use tsvc_core::data::{build_splits, dataset_from_bytes, dataset_to_bytes, DatasetSpec, SplitFractions, Splits};
use tsvc_core::encoder::checkpoint_from_bytes;
use tsvc_core::eval::{median, RetrievalReport};
use tsvc_core::gmm::PartitionRule;
use tsvc_core::run::{sha256_hex, write_run};
use tsvc_core::trilearning::{evaluate, train, TrainConfig, TrainMode, TrainOutcome};
use tsvc_core::TsvcError;

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: 1, message: format!("{}: {e}", path.display()) }
    }
}

impl From<TsvcError> for CliError {
    fn from(e: TsvcError) -> Self {
        let code = match e {
            TsvcError::Io(_) | TsvcError::Internal(_) => 1,
            TsvcError::InvalidInput(_) | TsvcError::DegenerateInput(_) => 2,
            TsvcError::Format { .. } => 3,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "tsvc", version, about = "Noise-robust cross-modal matching on synthetic paired features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file (train noise injected, val/test clean).
    Gen(GenArgs),
    /// Train one mode and write a run directory.
    Train(TrainArgs),
    /// Evaluate one or more checkpoints (fused) on a split.
    Eval(EvalArgs),
    /// Train every mode for every seed; long-format learning curves.
    Compare(CompareArgs),
    /// Final Rsum over a grid of delta or m values.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    d_latent: usize,
    #[arg(long, default_value_t = 48)]
    d_img: usize,
    #[arg(long, default_value_t = 32)]
    d_txt: usize,
    #[arg(long, default_value_t = 0.3)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Training flags; unset flags fall back to `--config`, then to defaults.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// TOML file with any TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    m: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// posterior | normalized_loss
    #[arg(long)]
    partition_rule: Option<String>,
    /// Hard labels instead of MI soft labels.
    #[arg(long)]
    no_sivc: bool,
    /// Fixed-margin triplet loss instead of the adaptive margin.
    #[arg(long)]
    no_dasm: bool,
}

impl TrainFlags {
    fn resolve(&self) -> CliResult<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        apply!(delta => delta, m => m, alpha => alpha, lr => lr, epochs => epochs,
               warmup => warmup_epochs, batch_size => batch_size, embed_dim => embed_dim);
        if self.bins.is_some() {
            cfg.bins = self.bins;
        }
        if self.patience.is_some() {
            cfg.patience = self.patience;
        }
        if let Some(rule) = &self.partition_rule {
            cfg.partition_rule = match rule.as_str() {
                "posterior" => PartitionRule::Posterior,
                "normalized_loss" => PartitionRule::NormalizedLoss,
                other => return Err(CliError::usage(format!("unknown partition rule '{other}'"))),
            };
        }
        if self.no_sivc {
            cfg.use_sivc = false;
        }
        if self.no_dasm {
            cfg.use_dasm = false;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// tsvc | co | none
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Repeat to fuse several models.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    /// val | test
    #[arg(long, default_value = "val")]
    split: String,
    /// Also write the report as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "tsvc,co,none")]
    modes: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// delta | m
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

fn parse_mode(s: &str) -> CliResult<TrainMode> {
    s.parse().map_err(CliError::from)
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Reads a dataset file and re-derives its splits; also returns the content hash.
fn load_splits(path: &Path) -> CliResult<(Splits, String)> {
    let bytes = read_bytes(path)?;
    let all = dataset_from_bytes(&bytes)?;
    let splits = Splits::from_concat(&all, &SplitFractions::default())?;
    Ok((splits, sha256_hex(&bytes)))
}

/// Runs cells on a pool capped by `TSVC_THREADS`; results keep input order.
fn run_cells<T, R, F>(cells: &[T], f: F) -> CliResult<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> CliResult<R> + Sync + Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("TSVC_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::usage(format!("TSVC_THREADS must be a positive integer, got '{v}'")))?;
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError { code: 1, message: e.to_string() })?;
    pool.install(|| cells.par_iter().map(&f).collect())
}

fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    let spec = DatasetSpec {
        n: a.n,
        d_latent: a.d_latent,
        d_img: a.d_img,
        d_txt: a.d_txt,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
    };
    let splits = build_splits(&spec, &SplitFractions::default(), a.noise_ratio)?;
    let bytes = dataset_to_bytes(&splits.concat())?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(&a.out, &bytes).map_err(|e| CliError::io(&a.out, e))?;
    println!(
        "wrote {}: train {} ({} noisy), val {}, test {}",
        a.out.display(),
        splits.train.len(),
        splits.train.noisy_count(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = a.flags.resolve()?;
    if let Some(m) = &a.mode {
        cfg.mode = parse_mode(m)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let (splits, hash) = load_splits(&a.data)?;
    let start = Instant::now();
    let out = train(&splits, &cfg)?;
    write_run(&a.out_dir, &out, &cfg, &a.data.to_string_lossy(), &hash, start.elapsed())?;
    let last = out.logs.last().expect("at least one epoch");
    println!(
        "{} seed {}: {} epochs, final val rsum {:.1}, partition f1 {:.3}",
        cfg.mode.name(),
        cfg.seed,
        out.logs.len(),
        last.rsum_val,
        last.partition_f1
    );
    Ok(())
}

const REPORT_HEADER: &str = "i2t_r1,i2t_r5,i2t_r10,t2i_r1,t2i_r5,t2i_r10,rsum";

fn report_row(r: &RetrievalReport) -> String {
    let v = r.recalls();
    format!("{},{},{},{},{},{},{}", v[0], v[1], v[2], v[3], v[4], v[5], r.rsum)
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let models = a
        .checkpoints
        .iter()
        .map(|p| {
            let bytes = read_bytes(p)?;
            checkpoint_from_bytes(&bytes).map_err(CliError::from)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let (splits, _) = load_splits(&a.data)?;
    let data = match a.split.as_str() {
        "val" => &splits.val,
        "test" => &splits.test,
        other => return Err(CliError::usage(format!("unknown split '{other}' (val or test)"))),
    };
    for m in &models {
        if m.d_img() != data.d_img || m.d_txt() != data.d_txt {
            return Err(CliError::usage("checkpoint dimensions do not match the dataset"));
        }
    }
    let refs: Vec<_> = models.iter().collect();
    let rep = evaluate(&refs, data)?;
    println!(
        "i2t R@1 {:.1} R@5 {:.1} R@10 {:.1} | t2i R@1 {:.1} R@5 {:.1} R@10 {:.1} | rsum {:.1}",
        rep.i2t_r1, rep.i2t_r5, rep.i2t_r10, rep.t2i_r1, rep.t2i_r5, rep.t2i_r10, rep.rsum
    );
    if let Some(out) = &a.out {
        write_text(out, &format!("{REPORT_HEADER}\n{}\n", report_row(&rep)))?;
    }
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> CliResult<()> {
    let base = a.flags.resolve()?;
    let modes = a.modes.iter().map(|m| parse_mode(m)).collect::<CliResult<Vec<_>>>()?;
    if a.seeds.is_empty() || modes.is_empty() {
        return Err(CliError::usage("need at least one seed and one mode"));
    }
    base.validate()?;
    let (splits, _) = load_splits(&a.data)?;
    let cells: Vec<(TrainMode, u64)> = modes.iter().flat_map(|&m| a.seeds.iter().map(move |&s| (m, s))).collect();
    let outcomes: Vec<TrainOutcome> = run_cells(&cells, |&(mode, seed)| {
        Ok(train(&splits, &TrainConfig { mode, seed, ..base })?)
    })?;

    let mut rows: Vec<(u64, &str, usize, f64, f64)> = Vec::new();
    for (&(mode, seed), out) in cells.iter().zip(&outcomes) {
        for l in &out.logs {
            rows.push((seed, mode.name(), l.epoch, l.rsum_val, l.partition_f1));
        }
    }
    rows.sort_by(|x, y| (x.0, x.1, x.2).cmp(&(y.0, y.1, y.2)));
    let mut csv = String::from("seed,mode,epoch,rsum,partition_f1\n");
    for (seed, mode, epoch, rsum, f1) in &rows {
        writeln!(csv, "{seed},{mode},{epoch},{rsum},{f1}").unwrap();
    }
    write_text(&a.out, &csv)?;

    println!("mode,median_final_rsum,median_final_f1");
    for &mode in &modes {
        let finals: Vec<_> = cells
            .iter()
            .zip(&outcomes)
            .filter(|((m, _), _)| *m == mode)
            .map(|(_, o)| o.logs.last().expect("at least one epoch"))
            .collect();
        let rsum: Vec<f64> = finals.iter().map(|l| l.rsum_val).collect();
        let f1: Vec<f64> = finals.iter().map(|l| l.partition_f1).collect();
        println!("{},{},{}", mode.name(), median(&rsum), median(&f1));
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let mut base = a.flags.resolve()?;
    if let Some(m) = &a.mode {
        base.mode = parse_mode(m)?;
    }
    let set: fn(&mut TrainConfig, f64) = match a.param.as_str() {
        "delta" => |c, v| c.delta = v,
        "m" => |c, v| c.m = v,
        other => return Err(CliError::usage(format!("unknown sweep parameter '{other}' (delta or m)"))),
    };
    let mut cells = Vec::new();
    for &v in &a.values {
        for &s in &a.seeds {
            let mut cfg = TrainConfig { seed: s, ..base };
            set(&mut cfg, v);
            cfg.validate()?;
            cells.push((v, s, cfg));
        }
    }
    let (splits, _) = load_splits(&a.data)?;
    let finals = run_cells(&cells, |(_, _, cfg)| {
        let out = train(&splits, cfg)?;
        Ok(out.logs.last().expect("at least one epoch").rsum_val)
    })?;
    let mut rows: Vec<(f64, u64, f64)> = cells.iter().zip(&finals).map(|(&(v, s, _), &r)| (v, s, r)).collect();
    rows.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut csv = String::from("param,value,seed,final_rsum\n");
    for (v, s, r) in rows {
        writeln!(csv, "{},{v},{s},{r}", a.param).unwrap();
    }
    write_text(&a.out, &csv)?;
    println!("{} cells written to {}", cells.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

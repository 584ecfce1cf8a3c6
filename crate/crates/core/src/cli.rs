//! `glupruner` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error.
//! Reports are JSON with `"schema": "glupruner/1"`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::calibration::{calibrate_mlp, CalibStats, SyntheticSpec};
use crate::error::{Error, Result};
use crate::glu::{GluVariant, MlpWeights};
use crate::importance::{ImportanceMatrix, DEFAULT_ALPHA};
use crate::masking::{mask_sparsity, SparsityKind, SparsityMask};
use crate::pipeline::{
    self, dependency_report, eval_reconstruction, Metric, MlpMasks, PruneConfig,
};
use crate::sparse;
use crate::tensor::{Tensor2D, TensorFile};

pub const SCHEMA: &str = "glupruner/1";
pub const THREADS_ENV: &str = "GLUPRUNER_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "glupruner",
    version,
    about = "Dependency-aware pruning of GLU MLP weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect input and intermediate activation norms.
    Calibrate(Common),
    /// Prune weight triplets and write the pruned checkpoint.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Also export 0/1 masks as "<weight>.mask" tensors.
        #[arg(long, value_name = "PATH")]
        masks: Option<PathBuf>,
        /// Write N:M compressed projections (values + .nmidx) into this directory.
        #[arg(long, value_name = "DIR")]
        compress: Option<PathBuf>,
    },
    /// Score weights and report dependency alignment without writing weights.
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Write score matrices as "<weight>.scores" tensors.
        #[arg(long, value_name = "PATH")]
        dump_scores: Option<PathBuf>,
    },
    /// Reconstruction error and alignment, optionally swept over alpha.
    Report {
        #[command(flatten)]
        common: Common,
        /// Comma-separated alpha values, e.g. 0.25,0.5,0.75,1.0.
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        sweep_alpha: Vec<f32>,
        /// Time dense vs compressed matvec for N:M masks.
        #[arg(long, value_name = "ITERS")]
        bench_iters: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Layout {
    /// `(out_features, in_features)`, as stored by common checkpoints.
    Linear,
    /// `gate`/`up` as `(d_hidden, d_int)`, `down` as `(d_int, d_hidden)`.
    Math,
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    weights: PathBuf,
    /// safetensors file with calibration batches named "<prefix>.<k>".
    #[arg(long, value_name = "PATH", conflicts_with = "synthetic")]
    calib: Option<PathBuf>,
    /// tokens=N,dim=D,outliers=K,scale=S
    #[arg(long, value_name = "SPEC")]
    synthetic: Option<String>,
    #[arg(long, default_value = "dass")]
    metric: String,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f32,
    #[arg(long, conflicts_with = "nm")]
    sparsity: Option<f64>,
    /// N:M pattern with N zeros per M weights, e.g. 2:4.
    #[arg(long, value_name = "N:M")]
    nm: Option<String>,
    #[arg(long, default_value = "swiglu")]
    variant: String,
    /// JSON list of {"gate","up","down"[,"calib"]} tensor names.
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Layout::Linear)]
    layout: Layout,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

/// One MLP block named inside the weights file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub gate: String,
    pub up: String,
    pub down: String,
    /// Prefix of the calibration tensors, `"x"` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib: Option<String>,
}

impl Default for LayerEntry {
    fn default() -> Self {
        Self {
            gate: "gate".into(),
            up: "up".into(),
            down: "down".into(),
            calib: None,
        }
    }
}

struct Context {
    weights: TensorFile,
    layers: Vec<LayerEntry>,
    calib: Option<TensorFile>,
    synthetic: Option<SyntheticSpec>,
    variant: GluVariant,
    metric: Metric,
    alpha: f32,
    sparsity: Option<SparsityKind>,
    seed: u64,
    layout: Layout,
}

struct Layer {
    entry: LayerEntry,
    weights: MlpWeights,
    batches: Vec<Tensor2D>,
    stats: CalibStats,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Data(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs the CLI with stdout/stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_cli_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_cli_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(m) => {
            let _ = writeln!(err, "error: {m}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(report) => {
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string_pretty(&report).expect("report")
            );
            0
        }
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
        Err(Failure::Data(e)) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn thread_pool() -> std::result::Result<rayon::ThreadPool, String> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got '{v}'"))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| e.to_string())
}

fn dispatch(cmd: Command) -> CliResult<Value> {
    match cmd {
        Command::Calibrate(common) => {
            let ctx = Context::from_args(&common, false)?;
            let layers = ctx.load_layers()?;
            let body: Vec<Value> = layers
                .iter()
                .map(|l| {
                    json!({
                        "layer": l.entry,
                        "token_count": l.stats.token_count,
                        "input_norms": l.stats.input_norms,
                        "intermediate_norms": l.stats.intermediate_norms,
                    })
                })
                .collect();
            let report = json!({"schema": SCHEMA, "command": "calibrate", "layers": body});
            emit(report, common.out.as_deref())
        }
        Command::Prune {
            common,
            masks,
            compress,
        } => {
            let out_path = common
                .out
                .clone()
                .ok_or_else(|| Failure::Usage("prune requires --out PATH".into()))?;
            let ctx = Context::from_args(&common, true)?;
            prune(&ctx, &out_path, masks.as_deref(), compress.as_deref())
        }
        Command::Inspect {
            common,
            dump_scores,
        } => {
            let ctx = Context::from_args(&common, true)?;
            let report = inspect(&ctx, dump_scores.as_deref())?;
            emit(report, common.out.as_deref())
        }
        Command::Report {
            common,
            sweep_alpha,
            bench_iters,
        } => {
            let ctx = Context::from_args(&common, true)?;
            let report = report(&ctx, &sweep_alpha, bench_iters)?;
            emit(report, common.out.as_deref())
        }
    }
}

/// Writes the report to `path` when given; the returned value goes to stdout.
fn emit(report: Value, path: Option<&Path>) -> CliResult<Value> {
    if let Some(p) = path {
        let text = serde_json::to_string_pretty(&report).expect("report");
        fs::write(p, text + "\n").map_err(Error::from)?;
        return Ok(json!({"schema": SCHEMA, "written": p.display().to_string()}));
    }
    Ok(report)
}

impl Context {
    fn from_args(a: &Common, needs_sparsity: bool) -> CliResult<Self> {
        let variant: GluVariant = a.variant.parse()?;
        let metric: Metric = a.metric.parse()?;
        if !(a.alpha.is_finite() && a.alpha >= 0.0) {
            return Err(Failure::Usage(format!(
                "--alpha must be non-negative, got {}",
                a.alpha
            )));
        }
        let sparsity = match (a.sparsity, &a.nm) {
            (Some(s), None) => Some(SparsityKind::Unstructured { s }),
            (None, Some(nm)) => Some(nm.parse::<SparsityKind>()?),
            (None, None) => None,
            (Some(_), Some(_)) => {
                return Err(Failure::Usage("--sparsity and --nm are exclusive".into()))
            }
        };
        if let Some(k) = sparsity {
            k.validate()?;
        } else if needs_sparsity {
            return Err(Failure::Usage(
                "one of --sparsity F or --nm N:M is required".into(),
            ));
        }
        let synthetic = a
            .synthetic
            .as_deref()
            .map(str::parse::<SyntheticSpec>)
            .transpose()?;
        if a.calib.is_none() && synthetic.is_none() {
            return Err(Failure::Usage(
                "one of --calib PATH or --synthetic SPEC is required".into(),
            ));
        }

        let weights = TensorFile::load(&a.weights)?;
        let calib = a.calib.as_ref().map(TensorFile::load).transpose()?;
        let layers = match &a.manifest {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(Error::from)?;
                let layers: Vec<LayerEntry> = serde_json::from_str(&text)
                    .map_err(|e| Error::Format(format!("manifest {}: {e}", p.display())))?;
                if layers.is_empty() {
                    return Err(Failure::Data(Error::Format(
                        "manifest lists no layers".into(),
                    )));
                }
                layers
            }
            None => vec![LayerEntry::default()],
        };
        Ok(Self {
            weights,
            layers,
            calib,
            synthetic,
            variant,
            metric,
            alpha: a.alpha,
            sparsity,
            seed: a.seed,
            layout: a.layout,
        })
    }

    fn config(&self) -> PruneConfig {
        PruneConfig {
            variant: self.variant,
            alpha: self.alpha,
            sparsity: self
                .sparsity
                .unwrap_or(SparsityKind::Unstructured { s: 0.0 }),
            metric: self.metric,
            seed: self.seed,
        }
    }

    fn tensor(&self, name: &str) -> Result<&Tensor2D> {
        self.weights.get(name).ok_or_else(|| Error::Data {
            tensor: name.to_string(),
            reason: "not found in weights file".into(),
        })
    }

    /// Converts a file tensor to storage orientation.
    fn to_storage(&self, t: &Tensor2D) -> Tensor2D {
        match self.layout {
            Layout::Linear => t.transpose(),
            Layout::Math => t.clone(),
        }
    }

    fn to_file(&self, t: &Tensor2D) -> Tensor2D {
        self.to_storage(t)
    }

    fn batches(&self, index: usize, entry: &LayerEntry, d_hidden: usize) -> Result<Vec<Tensor2D>> {
        if let Some(spec) = &self.synthetic {
            if spec.dim != d_hidden {
                return Err(Error::dim(format!(
                    "--synthetic dim={} but layer '{}' has d_hidden = {d_hidden}",
                    spec.dim, entry.gate
                )));
            }
            return Ok(spec.generate(self.seed.wrapping_add(index as u64)));
        }
        let calib = self.calib.as_ref().expect("calib or synthetic checked");
        let prefix = entry.calib.as_deref().unwrap_or("x");
        let mut out = Vec::new();
        while let Some(t) = calib.get(&format!("{prefix}.{}", out.len())) {
            out.push(t.clone());
        }
        if out.is_empty() {
            return Err(Error::Data {
                tensor: format!("{prefix}.0"),
                reason: "no calibration batches found".into(),
            });
        }
        Ok(out)
    }

    fn load_layer(&self, index: usize, entry: &LayerEntry) -> Result<Layer> {
        let weights = MlpWeights::new(
            self.to_storage(self.tensor(&entry.gate)?),
            self.to_storage(self.tensor(&entry.up)?),
            self.to_storage(self.tensor(&entry.down)?),
            self.variant,
        )?;
        let batches = self.batches(index, entry, weights.d_hidden())?;
        let stats = calibrate_mlp(&weights, &batches)?;
        Ok(Layer {
            entry: entry.clone(),
            weights,
            batches,
            stats,
        })
    }

    /// Layers are independent; results come back in manifest order.
    fn load_layers(&self) -> Result<Vec<Layer>> {
        self.layers
            .par_iter()
            .enumerate()
            .map(|(i, e)| self.load_layer(i, e))
            .collect()
    }
}

fn mask_summary(masks: &MlpMasks) -> Value {
    json!({
        "gate": mask_sparsity(&masks.gate),
        "up": mask_sparsity(&masks.up),
        "down": mask_sparsity(&masks.down),
    })
}

fn alignment_summary(masks: &MlpMasks) -> Result<Value> {
    let r = dependency_report(masks)?;
    Ok(json!({
        "gate_down_correlation": r.gate_down_correlation,
        "up_down_correlation": r.up_down_correlation,
    }))
}

fn prune(
    ctx: &Context,
    out: &Path,
    mask_path: Option<&Path>,
    compress: Option<&Path>,
) -> CliResult<Value> {
    let cfg = ctx.config();
    let layers = ctx.load_layers()?;
    let results: Vec<(pipeline::PrunedMlp, Value)> = layers
        .par_iter()
        .map(|l| -> Result<_> {
            let pruned = pipeline::prune_mlp(&l.weights, &l.stats, &cfg)?;
            let eval = eval_reconstruction(&l.weights, &pruned.weights, &l.batches)?;
            let summary = json!({
                "layer": l.entry,
                "token_count": l.stats.token_count,
                "mask_sparsity": mask_summary(&pruned.masks),
                "alignment": alignment_summary(&pruned.masks)?,
                "eval": eval,
            });
            Ok((pruned, summary))
        })
        .collect::<Result<_>>()?;

    let mut file = ctx.weights.clone();
    let mut mask_file = TensorFile::new();
    for (layer, (pruned, _)) in layers.iter().zip(&results) {
        let e = &layer.entry;
        for (name, w, m) in [
            (&e.gate, &pruned.weights.gate, &pruned.masks.gate),
            (&e.up, &pruned.weights.up, &pruned.masks.up),
            (&e.down, &pruned.weights.down, &pruned.masks.down),
        ] {
            file.insert(name.clone(), ctx.to_file(w))?;
            mask_file.insert(format!("{name}.mask"), ctx.to_file(&m.to_tensor()))?;
            if let Some(dir) = compress {
                write_compressed(ctx, dir, name, w, m)?;
            }
        }
    }
    file.save(out)?;
    if let Some(p) = mask_path {
        mask_file.save(p)?;
    }

    Ok(json!({
        "schema": SCHEMA,
        "command": "prune",
        "config": cfg,
        "output": out.display().to_string(),
        "layers": results.into_iter().map(|(_, s)| s).collect::<Vec<_>>(),
    }))
}

fn write_compressed(
    ctx: &Context,
    dir: &Path,
    name: &str,
    w: &Tensor2D,
    m: &SparsityMask,
) -> Result<()> {
    if !matches!(m.spec.kind, SparsityKind::NM { .. }) {
        return Err(Error::Config("--compress needs an --nm pattern".into()));
    }
    fs::create_dir_all(dir)?;
    let (w, m) = match ctx.layout {
        Layout::Linear => (w.transpose(), m.transpose()),
        Layout::Math => (w.clone(), m.clone()),
    };
    let c = sparse::encode(&w, &m)?;
    c.save(name, dir.join(format!("{name}.safetensors")))?;
    Ok(())
}

fn score_stats(m: &ImportanceMatrix) -> Value {
    let d = m.scores.data();
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, 0.0f64, 0.0f64);
    for &v in d {
        let v = v as f64;
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
    }
    json!({
        "kind": m.kind,
        "min": if d.is_empty() { 0.0 } else { lo },
        "max": hi,
        "mean": if d.is_empty() { 0.0 } else { sum / d.len() as f64 },
    })
}

fn inspect(ctx: &Context, dump: Option<&Path>) -> CliResult<Value> {
    let cfg = ctx.config();
    let layers = ctx.load_layers()?;
    let mut dump_file = TensorFile::new();
    let mut body = Vec::new();
    for l in &layers {
        let scores = pipeline::score_mlp(&l.weights, &l.stats, &cfg)?;
        let pruned = pipeline::prune_mlp(&l.weights, &l.stats, &cfg)?;
        let dep = dependency_report(&pruned.masks)?;
        let e = &l.entry;
        // Scores are in (d_out, d_in) orientation, the linear file layout.
        for (name, s) in [
            (&e.gate, &scores.gate),
            (&e.up, &scores.up),
            (&e.down, &scores.down),
        ] {
            let t = match ctx.layout {
                Layout::Linear => s.scores.clone(),
                Layout::Math => s.scores.transpose(),
            };
            dump_file.insert(format!("{name}.scores"), t)?;
        }
        body.push(json!({
            "layer": e,
            "token_count": l.stats.token_count,
            "scores": {
                "gate": score_stats(&scores.gate),
                "up": score_stats(&scores.up),
                "down": score_stats(&scores.down),
            },
            "mask_sparsity": mask_summary(&pruned.masks),
            "dependency": dep,
        }));
    }
    if let Some(p) = dump {
        dump_file.save(p)?;
    }
    Ok(json!({"schema": SCHEMA, "command": "inspect", "config": cfg, "layers": body}))
}

fn report(ctx: &Context, sweep: &[f32], bench_iters: Option<usize>) -> CliResult<Value> {
    if !sweep.is_empty() && ctx.metric != Metric::Dass {
        return Err(Failure::Usage(
            "--sweep-alpha only applies to --metric dass".into(),
        ));
    }
    if let Some(a) = sweep.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Failure::Usage(format!(
            "alpha values must be non-negative, got {a}"
        )));
    }
    let alphas: Vec<f32> = if sweep.is_empty() {
        vec![ctx.alpha]
    } else {
        sweep.to_vec()
    };
    let layers = ctx.load_layers()?;
    let mut runs = Vec::new();
    for &alpha in &alphas {
        let cfg = ctx.config().with_alpha(alpha);
        let per_layer: Vec<Value> = layers
            .par_iter()
            .map(|l| -> Result<Value> {
                let pruned = pipeline::prune_mlp(&l.weights, &l.stats, &cfg)?;
                let eval = eval_reconstruction(&l.weights, &pruned.weights, &l.batches)?;
                let mut v = json!({
                    "layer": l.entry,
                    "eval": eval,
                    "alignment": alignment_summary(&pruned.masks)?,
                });
                if let (Some(iters), SparsityKind::NM { .. }) = (bench_iters, cfg.sparsity) {
                    let mut b = serde_json::Map::new();
                    for (name, w, m) in [
                        ("gate", &pruned.weights.gate, &pruned.masks.gate),
                        ("up", &pruned.weights.up, &pruned.masks.up),
                        ("down", &pruned.weights.down, &pruned.masks.down),
                    ] {
                        let c = sparse::encode(w, m)?;
                        b.insert(
                            name.into(),
                            serde_json::to_value(sparse::bench(&c, w, iters)?).expect("bench"),
                        );
                    }
                    v["bench"] = Value::Object(b);
                }
                Ok(v)
            })
            .collect::<Result<_>>()?;
        runs.push(json!({"alpha": alpha, "config": cfg, "layers": per_layer}));
    }
    Ok(json!({"schema": SCHEMA, "command": "report", "runs": runs}))
}

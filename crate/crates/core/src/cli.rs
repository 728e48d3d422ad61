//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 usage error, 3 missing
//! or unreadable input file, 4 validation failure (schema, norms, dims,
//! config values).
//!
//! Every command that writes files also writes a `*.run.json` manifest with
//! the effective configuration and SHA-256 digests of inputs and outputs.
//! Manifests carry no timestamps, so identical runs produce identical bytes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::adapter::{self as checkpoint, Meta};
use crate::classification::{
    evaluate_accuracy, group_views, Condition, EvalOptions, Scorer, TtaWeight,
};
use crate::config::{InitMode, RunConfig};
use crate::dataio::synth::{synth_generate, write_synth, SynthSpec};
use crate::dataio::{load_embeddings, load_eval_pairs, load_manifest, load_prompts};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::metrics::{class_agnostic_report, class_aware_report};
use crate::training::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_GRADCHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;

const TOOL: &str = "camo-adapter";

#[derive(Debug, Parser)]
#[command(name = TOOL, version, about = "Adapter training, zero-shot classification and class-aware mask metrics")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fine-tune an adapter on prompt features and image embeddings.
    Train(TrainArgs),
    /// Classify image embeddings with an adapter (or the frozen prompts).
    Classify(ClassifyArgs),
    /// Class-aware segmentation metrics over a mask manifest.
    SegEval(SegEvalArgs),
    /// Generate a synthetic dataset with a known achievable accuracy.
    Synth(SynthArgs),
    /// Finite-difference check of the training gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path, e.g. `run.adapter.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both `init.seed` and `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Train only on records of this condition.
    #[arg(long, value_parser = parse_enum::<Condition>)]
    condition: Option<Condition>,
    #[arg(long = "init", value_parser = parse_enum::<InitMode>)]
    init_mode: Option<InitMode>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    /// Adapter checkpoint. Without it the frozen prompts are used.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Prompt file. Defaults to the one recorded in the checkpoint.
    #[arg(long, required_unless_present = "adapter")]
    prompts: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_enum::<Condition>)]
    condition: Option<Condition>,
    /// Aggregate all views of each record.
    #[arg(long)]
    tta: bool,
    #[arg(long, value_parser = parse_enum::<TtaWeight>)]
    tta_weight: Option<TtaWeight>,
    #[arg(long)]
    tau: Option<f64>,
    /// Predictions file (JSON lines). Defaults next to the adapter or data file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SegEvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Report path. Defaults to `<manifest stem>.report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Score masks without gating on the predicted class.
    #[arg(long)]
    class_agnostic: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    test_per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    views: usize,
    /// Fixed noise level. Calibrated by the generator when omitted.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    configs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Classify(a) => cmd_classify(a),
        Command::SegEval(a) => cmd_seg_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format { .. } => EXIT_INPUT,
        _ => EXIT_VALIDATION,
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializable");
    out.push(b'\n');
    out
}

/// `dir/name.adapter.json` + `.history.json` → `dir/name.history.json`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = [".adapter.json", ".jsonl", ".json"]
        .iter()
        .find_map(|ext| name.strip_suffix(ext))
        .map(str::to_string)
        .unwrap_or_else(|| {
            Path::new(&name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or(name.clone())
        });
    path.with_file_name(format!("{stem}{suffix}"))
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: BTreeMap<String, FileDigest>,
    outputs: BTreeMap<String, FileDigest>,
    summary: serde_json::Value,
}

impl RunManifest {
    fn new(command: &'static str, seed: Option<u64>, config: serde_json::Value) -> Self {
        RunManifest {
            tool: TOOL,
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            summary: serde_json::Value::Null,
        }
    }

    fn input(&mut self, role: &str, path: &Path, bytes: &[u8]) {
        self.inputs.insert(role.to_string(), digest(path, bytes));
    }

    fn output(&mut self, role: &str, path: &Path, bytes: &[u8]) {
        self.outputs.insert(role.to_string(), digest(path, bytes));
    }

    fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &pretty(self))
    }
}

fn digest(path: &Path, bytes: &[u8]) -> FileDigest {
    FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(bytes),
    }
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, Option<Vec<u8>>)> {
    match path {
        None => Ok((RunConfig::default(), None)),
        Some(p) => {
            let bytes = read_bytes(p)?;
            let text = String::from_utf8(bytes.clone())
                .map_err(|_| Error::Config(format!("{}: not valid UTF-8", p.display())))?;
            Ok((RunConfig::parse(&text, &p.display().to_string())?, Some(bytes)))
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let (mut cfg, cfg_bytes) = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.init.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(m) = a.init_mode {
        cfg.init.mode = m;
    }
    if a.rank.is_some() {
        cfg.init.r = a.rank;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.tau {
        cfg.train.tau = v;
    }
    cfg.validate()?;

    let prompt_bytes = read_bytes(&a.prompts)?;
    let data_bytes = read_bytes(&a.data)?;
    let prompts = load_prompts(&a.prompts)?;
    let mut records = load_embeddings(&a.data)?;
    if let Some(c) = a.condition {
        records.retain(|r| r.condition == c);
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no training records in {}", a.data.display())));
    }
    let d = prompts
        .dim()
        .ok_or_else(|| Error::Data(format!("prompt file {} is empty", a.prompts.display())))?;
    cfg.init.r = Some(cfg.init.rank_for(d));
    let p0 = cfg.init.build(d)?;
    let (p, history) = train(&p0, &prompts, &records, &cfg.train)?;

    let mut stdout = std::io::stdout().lock();
    for h in &history {
        let _ = writeln!(
            stdout,
            "epoch {:>3}  loss {:.6}  train_acc {:.4}",
            h.epoch, h.mean_loss, h.train_accuracy
        );
    }

    let prompts_abs = std::fs::canonicalize(&a.prompts).map_err(|e| Error::io(&a.prompts, e))?;
    let mut meta = Meta::new();
    meta.insert("prompts_path".into(), prompts_abs.display().to_string().into());
    meta.insert("prompts_sha256".into(), sha256_hex(&prompt_bytes).into());
    meta.insert("data_sha256".into(), sha256_hex(&data_bytes).into());
    meta.insert("condition".into(), to_value(&a.condition));
    meta.insert("init".into(), to_value(&cfg.init));
    meta.insert("train".into(), to_value(&cfg.train));
    let ckpt = checkpoint::save(&p, &meta)?;
    write_bytes(&a.out, &ckpt)?;

    let history_path = sibling(&a.out, ".history.json");
    let history_bytes = pretty(&serde_json::json!({ "history": history }));
    write_bytes(&history_path, &history_bytes)?;

    let mut run = RunManifest::new("train", Some(cfg.train.seed), to_value(&cfg));
    run.input("prompts", &a.prompts, &prompt_bytes);
    run.input("data", &a.data, &data_bytes);
    if let (Some(path), Some(bytes)) = (&a.config, &cfg_bytes) {
        run.input("config", path, bytes);
    }
    run.output("checkpoint", &a.out, &ckpt);
    run.output("history", &history_path, &history_bytes);
    run.summary = serde_json::json!({
        "records": records.len(),
        "d": p.d(),
        "r": p.r(),
        "param_count": p.param_count(),
        "final_s": p.s(),
        "final": history.last(),
    });
    run.write(&sibling(&a.out, ".run.json"))?;
    let _ = writeln!(stdout, "wrote {}", a.out.display());
    Ok(EXIT_OK)
}

fn cmd_classify(a: ClassifyArgs) -> Result<i32> {
    let (mut cfg, cfg_bytes) = load_config(a.config.as_deref())?;
    if let Some(t) = a.tau {
        cfg.train.tau = t;
    }
    if a.tta {
        cfg.tta.enabled = true;
    }
    if let Some(w) = a.tta_weight {
        cfg.tta.weight = w;
    }
    cfg.validate()?;

    let mut run = RunManifest::new("classify", None, to_value(&cfg));
    let adapter = match &a.adapter {
        Some(path) => {
            let bytes = read_bytes(path)?;
            let (p, meta) = checkpoint::load(&bytes)
                .map_err(|e| match e {
                    Error::Format { path: at, msg } => {
                        Error::format(format!("{}:{at}", path.display()), msg)
                    }
                    other => other,
                })?;
            run.input("adapter", path, &bytes);
            Some((p, meta))
        }
        None => None,
    };
    let prompts_path = match (&a.prompts, &adapter) {
        (Some(p), _) => p.clone(),
        (None, Some((_, meta))) => meta
            .get("prompts_path")
            .and_then(|v| v.as_str())
            .map(PathBuf::from)
            .ok_or_else(|| Error::Data("checkpoint records no prompts_path; pass --prompts".into()))?,
        (None, None) => unreachable!("clap requires --prompts without --adapter"),
    };
    let prompt_bytes = read_bytes(&prompts_path)?;
    if let Some(want) = adapter
        .as_ref()
        .and_then(|(_, m)| m.get("prompts_sha256"))
        .and_then(|v| v.as_str())
    {
        let got = sha256_hex(&prompt_bytes);
        if got != want {
            return Err(Error::Data(format!(
                "prompt file {} does not match the one the adapter was trained with (sha256 {got}, expected {want})",
                prompts_path.display()
            )));
        }
    }
    let prompts = load_prompts(&prompts_path)?;
    run.input("prompts", &prompts_path, &prompt_bytes);
    let data_bytes = read_bytes(&a.data)?;
    let records = load_embeddings(&a.data)?;
    run.input("data", &a.data, &data_bytes);
    if let (Some(path), Some(bytes)) = (&a.config, &cfg_bytes) {
        run.input("config", path, bytes);
    }

    let scorer = match &adapter {
        Some((p, _)) => Scorer::adapted(p, &prompts)?,
        None => Scorer::frozen(&prompts),
    };
    let sets = group_views(&records)?;
    let opts = EvalOptions {
        condition: a.condition,
        tta: cfg.tta.enabled,
        tau: cfg.train.tau,
        weight: cfg.tta.weight,
    };
    let report = evaluate_accuracy(&scorer, &sets, &opts)?;

    let out = a.out.clone().unwrap_or_else(|| {
        let base = a.adapter.as_deref().unwrap_or(&a.data);
        sibling(base, ".predictions.jsonl")
    });
    let mut lines = Vec::new();
    for pred in &report.predictions {
        serde_json::to_writer(&mut lines, pred).expect("serializable");
        lines.push(b'\n');
    }
    write_bytes(&out, &lines)?;
    run.output("predictions", &out, &lines);
    run.summary = serde_json::json!({
        "condition": report.condition,
        "tta": report.tta,
        "total": report.total,
        "correct": report.correct,
        "accuracy": report.accuracy,
        "per_class": report.per_class,
        "confusion": report.confusion,
    });
    run.write(&sibling(&out, ".run.json"))?;

    let condition = a.condition.map_or("all".to_string(), |c| c.to_string());
    println!(
        "accuracy {:.4} ({}/{}) condition={condition} tta={}",
        report.accuracy,
        report.correct,
        report.total,
        if report.tta { "on" } else { "off" }
    );
    Ok(EXIT_OK)
}

fn cmd_seg_eval(a: SegEvalArgs) -> Result<i32> {
    let (cfg, cfg_bytes) = load_config(a.config.as_deref())?;
    cfg.validate()?;
    let manifest_bytes = read_bytes(&a.manifest)?;
    let manifest = load_manifest(&a.manifest)?;
    let pairs = load_eval_pairs(&manifest)?;
    let report = if a.class_agnostic {
        class_agnostic_report(&pairs, &cfg.metrics)?
    } else {
        class_aware_report(&pairs, &cfg.metrics)?
    };

    let mut run = RunManifest::new("seg-eval", None, to_value(&cfg.metrics));
    run.input("manifest", &a.manifest, &manifest_bytes);
    if let (Some(path), Some(bytes)) = (&a.config, &cfg_bytes) {
        run.input("config", path, bytes);
    }
    for (id, e) in &manifest.entries {
        run.input(&format!("pred:{id}"), &e.pred_mask_path, &read_bytes(&e.pred_mask_path)?);
        run.input(&format!("gt:{id}"), &e.gt_mask_path, &read_bytes(&e.gt_mask_path)?);
    }
    let out = a.out.clone().unwrap_or_else(|| sibling(&a.manifest, ".report.json"));
    let bytes = pretty(&report);
    write_bytes(&out, &bytes)?;
    run.output("report", &out, &bytes);
    run.summary = serde_json::json!({ "gated": report.gated, "count": report.count, "means": report.means });
    run.write(&sibling(&out, ".run.json"))?;
    print!("{}", report.table());
    Ok(EXIT_OK)
}

fn cmd_synth(a: SynthArgs) -> Result<i32> {
    let spec = SynthSpec {
        classes: a.classes,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        dim: a.dim,
        views: a.views,
        noise: a.noise,
        seed: a.seed,
    };
    let data = synth_generate(&spec)?;
    let paths = write_synth(&a.out_dir, &data)?;
    let mut run = RunManifest::new(
        "synth",
        Some(a.seed),
        serde_json::json!({
            "classes": a.classes,
            "train_per_class": a.train_per_class,
            "test_per_class": a.test_per_class,
            "dim": a.dim,
            "views": a.views,
            "noise": a.noise,
        }),
    );
    for (role, path) in [
        ("prompts", &paths.prompts),
        ("train", &paths.train),
        ("test", &paths.test),
        ("sidecar", &paths.sidecar),
        ("config", &paths.config),
    ] {
        run.output(role, path, &read_bytes(path)?);
    }
    run.summary = to_value(&data.sidecar);
    run.write(&a.out_dir.join("synth.run.json"))?;
    let s = &data.sidecar;
    println!(
        "noise {:.3}  witness train {:.4}  baseline gt_mask test {:.4}  guarantees {}",
        s.noise,
        s.witness.train,
        s.baseline.test.get(&Condition::GtMask).copied().unwrap_or(f64::NAN),
        if s.guarantees_met { "met" } else { "NOT met" }
    );
    if !s.guarantees_met {
        log::warn!("no noise level on the ladder met the accuracy guarantees");
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let cfg = GradcheckConfig {
        configs: a.configs,
        seed: a.seed,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    for f in report.failures.iter().take(20) {
        eprintln!(
            "config {} (d={}, r={}) entry {}: analytic {:e} numeric {:e} rel {:e}",
            f.config, f.d, f.r, f.entry, f.analytic, f.numeric, f.rel_error
        );
    }
    println!(
        "gradcheck: {} configs ({} excluded), {} entries checked ({} above the absolute floor), {} skipped, max rel error {:.3e}: {}",
        report.accepted,
        report.excluded,
        report.entries_checked,
        report.entries_relative,
        report.entries_skipped,
        report.max_rel_error,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    if let Some(out) = &a.out {
        let bytes = pretty(&report);
        write_bytes(out, &bytes)?;
        let mut run = RunManifest::new("gradcheck", Some(a.seed), to_value(&cfg));
        run.output("report", out, &bytes);
        run.summary = serde_json::json!({ "passed": report.passed() });
        run.write(&sibling(out, ".run.json"))?;
    }
    Ok(if report.passed() { EXIT_OK } else { EXIT_GRADCHECK_FAILED })
}

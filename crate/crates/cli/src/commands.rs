use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use seval_core::costmodel::{
    build_dataset, sample_valid_indices, Dataset, DeviceProfile, OracleOptions, DEFAULT_ACCURACY_NOISE,
};
use seval_core::evaluator::{
    default_grad_check, fit, train_vocab, Evaluator, FitConfig, GradCheckReport, Split,
};
use seval_core::graphir::{elaborate, MacroConfig};
use seval_core::metrics::{correlation_report, CorrelationReport};
use seval_core::netstring::graph_to_string;
use seval_core::search::{
    regularized_evolution, summarize, ConstraintSpec, Evaluators, FitnessKind, SearchConfig, ThresholdSpec,
};
use seval_core::searchspace::{ArchSpec, SpaceId};

use crate::manifest::{config_digest, manifest_path, write_atomic, RunManifest};
use crate::{EvalArgs, GenDatasetArgs, GradCheckArgs, Net2StrArgs, SearchArgs, TrainArgs, UsageError};

pub const PROFILE_DIR_ENV: &str = "SEVAL_PROFILE_DIR";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| usage(format!("missing required option --{flag}")))
}

fn is_unset(v: &Value) -> bool {
    match v {
        Value::Null | Value::Bool(false) => true,
        Value::Array(a) => a.is_empty(),
        _ => false,
    }
}

/// Overlay the flags that were given onto the `--config` file and return the
/// effective options with their JSON form.
fn merged<T: Serialize + DeserializeOwned>(args: &T, config: Option<&Path>) -> Result<(T, Value)> {
    let mut base = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(usage(format!("config {} must hold a JSON object", p.display()))),
                Err(e) => return Err(usage(format!("config {}: {e}", p.display()))),
            }
        }
        None => serde_json::Map::new(),
    };
    if let Value::Object(flags) = serde_json::to_value(args)? {
        for (k, v) in flags {
            if !is_unset(&v) {
                base.insert(k, v);
            }
        }
    }
    let value = Value::Object(base);
    let parsed = serde_json::from_value(value.clone()).map_err(|e| usage(format!("config: {e}")))?;
    Ok((parsed, value))
}

/// Parse a snake_case enum name the same way the JSON formats spell it.
fn parse_name<T: DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| usage(format!("invalid {what} `{s}`")))
}

fn parse_space(s: Option<&str>) -> Result<SpaceId> {
    s.unwrap_or("tss").parse().map_err(|e| usage(format!("{e}")))
}

fn load_profiles(dir: Option<&Path>) -> Result<Vec<DeviceProfile>> {
    let dir = dir.map(Path::to_path_buf).or_else(|| std::env::var_os(PROFILE_DIR_ENV).map(PathBuf::from));
    match dir {
        Some(d) => {
            let p = DeviceProfile::load_dir(&d)?;
            anyhow::ensure!(!p.is_empty(), "no device profiles in {}", d.display());
            Ok(p)
        }
        None => Ok(DeviceProfile::builtin()),
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
}

struct Run {
    command: &'static str,
    config: Value,
    seed: Option<u64>,
    started: Instant,
}

impl Run {
    fn new(command: &'static str, config: Value, seed: Option<u64>) -> Self {
        Self {
            command,
            config,
            seed,
            started: Instant::now(),
        }
    }

    fn finish(self, primary: &Path, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
        let show = |ps: &[&Path]| ps.iter().map(|p| p.display().to_string()).collect();
        RunManifest {
            command: self.command.into(),
            config_digest: config_digest(&self.config),
            config: self.config,
            seed: self.seed,
            inputs: show(inputs),
            outputs: show(outputs),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_seconds: self.started.elapsed().as_secs_f64(),
        }
        .write(&manifest_path(primary))
    }
}

pub fn gen_dataset(args: GenDatasetArgs) -> Result<ExitCode> {
    let (a, cfg) = merged(&args, args.config.as_deref())?;
    let space = parse_space(a.space.as_deref())?;
    let n = required(a.n, "n")?;
    if n == 0 || n > space.size() {
        return Err(usage(format!("--n must be in 1..={} for {space}", space.size())));
    }
    let out = required(a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let run = Run::new("gen-dataset", cfg, Some(seed));
    let profiles = load_profiles(a.profiles_dir.as_deref())?;
    let opts = OracleOptions {
        accuracy_noise: a.accuracy_noise.unwrap_or(DEFAULT_ACCURACY_NOISE),
        latency_noise: a.latency_noise,
        ..OracleOptions::default()
    };
    let indices = sample_valid_indices(space, n, seed)?;
    let mut ds = build_dataset(space, &indices, &profiles, &opts, seed)?;
    ds.header.manifest = Some(file_name(&manifest_path(&out)));
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf)?;
    write_atomic(&out, &buf)?;
    run.finish(&out, &[], &[&out])?;
    println!("wrote {n} {space} records ({} metrics) to {}", ds.header.metrics.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn history_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".history.csv");
    checkpoint.with_file_name(name)
}

pub fn train(args: TrainArgs) -> Result<ExitCode> {
    let (a, cfg) = merged(&args, args.config.as_deref())?;
    let dataset_path = required(a.dataset, "dataset")?;
    let out = required(a.out, "out")?;
    if a.objectives.is_empty() {
        return Err(usage("--objectives needs at least one metric"));
    }
    let ds = Dataset::load(&dataset_path)?;
    for o in &a.objectives {
        ds.resolve_metric(o).map_err(|e| usage(e.to_string()))?;
    }
    let objectives: Vec<&str> = a.objectives.iter().map(String::as_str).collect();
    let mut fc = FitConfig::new(&objectives);
    let m = &mut fc.model;
    m.d_model = a.d_model.unwrap_or(m.d_model);
    m.n_layers = a.n_layers.unwrap_or(m.n_layers);
    m.n_heads = a.n_heads.unwrap_or(m.n_heads);
    m.ffn_dim = a.ffn_dim.unwrap_or(m.ffn_dim);
    m.max_len = a.max_len.unwrap_or(m.max_len);
    m.dropout_p = a.dropout.unwrap_or(m.dropout_p);
    if let Some(r) = &a.readout {
        m.readout = parse_name(r, "readout")?;
    }
    let t = &mut fc.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = a.lr.unwrap_or(t.learning_rate);
    t.seed = a.seed.unwrap_or(t.seed);
    t.patience = a.patience.or(t.patience);
    t.keep_last = a.keep_last;
    if let Some(o) = &a.optimizer {
        t.optimizer = parse_name(o, "optimizer")?;
    }
    if let Some(s) = &a.schedule {
        t.schedule = parse_name(s, "schedule")?;
    }
    fc.split_seed = a.split_seed.unwrap_or(0);
    if let Some(tr) = &a.traversal {
        fc.traversal = parse_name(tr, "traversal")?;
    }
    fc.log_hardware_targets = !a.linear_targets;
    let mut probe = fc.model.clone();
    probe.vocab_size = 3;
    probe.k_outputs = objectives.len();
    probe.validate().map_err(|e| usage(e.to_string()))?;
    fc.train.validate().map_err(|e| usage(e.to_string()))?;

    let run = Run::new("train", cfg, Some(fc.train.seed));
    let outcome = fit(&ds, &fc)?;
    write_atomic(&out, outcome.evaluator.to_checkpoint().as_bytes())?;
    let hist = history_path(&out);
    write_atomic(&hist, outcome.report.history_csv().as_bytes())?;
    run.finish(&out, &[&dataset_path], &[&out, &hist])?;
    println!(
        "trained {} epochs (best epoch {}, val loss {:.5}); checkpoint {}",
        outcome.report.history.len(),
        outcome.report.best_epoch,
        outcome.report.best_val_loss,
        out.display()
    );
    for (j, name) in outcome.evaluator.objectives.iter().enumerate() {
        let pred: Vec<f64> = outcome.test_pred.iter().map(|p| p[j]).collect();
        let truth: Vec<f64> = outcome.test_true.iter().map(|t| t[j]).collect();
        if let Ok(r) = correlation_report(&pred, &truth) {
            println!("test {name}: kendall_tau={:.4} pearson_r={:.4} n={}", r.kendall_tau, r.pearson_r, r.n);
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    dataset: String,
    split: String,
    n: usize,
    reports: BTreeMap<String, CorrelationReport>,
}

pub fn eval(args: EvalArgs) -> Result<ExitCode> {
    let (a, cfg) = merged(&args, args.config.as_deref())?;
    let ckpt = required(a.checkpoint, "checkpoint")?;
    let dataset_path = required(a.dataset, "dataset")?;
    let out = required(a.out, "out")?;
    let split_name = a.split.unwrap_or_else(|| "test".into());
    let run = Run::new("eval", cfg, None);
    let ds = Dataset::load(&dataset_path)?;
    let unchecked = Evaluator::load(&ckpt, None)?;
    let ev = if a.allow_vocab_mismatch {
        unchecked
    } else {
        let digest = train_vocab(&ds, unchecked.split_seed, unchecked.traversal)?.digest();
        Evaluator::load(&ckpt, Some(&digest))
            .context("refusing to score a dataset the checkpoint was not trained on (use --allow-vocab-mismatch)")?
    };
    let split = Split::new(ds.records.len(), ev.split_seed);
    let ids: Vec<usize> = match split_name.as_str() {
        "test" => split.test.clone(),
        "val" => split.val.clone(),
        "train" => split.train.clone(),
        "all" => (0..ds.records.len()).collect(),
        other => return Err(usage(format!("invalid split `{other}`"))),
    };
    anyhow::ensure!(!ids.is_empty(), "the {split_name} split is empty");
    let keys: Vec<String> = ev
        .objectives
        .iter()
        .map(|o| ds.resolve_metric(o))
        .collect::<Result<_, _>>()?;
    let archs = ids.iter().map(|&i| ds.records[i].arch()).collect::<Result<Vec<ArchSpec>, _>>()?;
    let preds = ev.predict_many(&archs)?;
    let mut reports = BTreeMap::new();
    let mut outputs = Vec::new();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for (j, key) in keys.iter().enumerate() {
        let pred: Vec<f64> = preds.iter().map(|p| p[j]).collect();
        let truth: Vec<f64> = ids.iter().map(|&i| ds.records[i].metrics[key]).collect();
        let r = correlation_report(&pred, &truth)?;
        println!("{key}: kendall_tau={:.4} pearson_r={:.4} n={}", r.kendall_tau, r.pearson_r, r.n);
        let path = out.join(format!("scatter_{}.csv", key.replace('@', "_")));
        write_atomic(&path, r.scatter_csv().as_bytes())?;
        outputs.push(path);
        reports.insert(key.clone(), r);
    }
    let report = EvalReport {
        checkpoint: ckpt.display().to_string(),
        dataset: dataset_path.display().to_string(),
        split: split_name,
        n: ids.len(),
        reports,
    };
    let report_path = out.join("report.json");
    write_atomic(&report_path, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    outputs.push(report_path.clone());
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    run.finish(&report_path, &[&ckpt, &dataset_path], &outs)?;
    Ok(ExitCode::SUCCESS)
}

pub fn search(args: SearchArgs) -> Result<ExitCode> {
    let (a, cfg) = merged(&args, args.config.as_deref())?;
    let out = required(a.out, "out")?;
    let defaults = SearchConfig::default();
    let sc = SearchConfig {
        population_size: a.population.unwrap_or(defaults.population_size),
        tournament_size: a.tournament.unwrap_or(defaults.tournament_size),
        cycles: a.cycles.unwrap_or(defaults.cycles),
        seed: a.seed.unwrap_or(0),
        space: parse_space(a.space.as_deref())?,
        fitness: match &a.fitness {
            Some(f) => parse_name(f, "fitness")?,
            None => FitnessKind::SyntheticProxy,
        },
    };
    sc.validate().map_err(|e| usage(e.to_string()))?;
    let specs = a
        .constraints
        .iter()
        .map(|c| c.parse::<ConstraintSpec>().map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if !specs.is_empty() && a.checkpoint.is_none() {
        return Err(usage("--constraint needs --checkpoint"));
    }
    let needs_dataset = specs.iter().any(|s| matches!(s.threshold, ThresholdSpec::Auto(_)));
    if needs_dataset && a.dataset.is_none() {
        return Err(usage("auto thresholds need --dataset"));
    }
    let fitness_path = a.fitness_checkpoint.clone().or_else(|| a.checkpoint.clone());
    if sc.fitness == FitnessKind::EvaluatorAccuracy && fitness_path.is_none() {
        return Err(usage("evaluator_accuracy fitness needs --fitness-checkpoint or --checkpoint"));
    }
    let run = Run::new("search", cfg, Some(sc.seed));
    let ds = a.dataset.as_deref().map(Dataset::load).transpose()?;
    let constraints = specs.iter().map(|s| s.resolve(ds.as_ref())).collect::<Result<Vec<_>, _>>()?;
    let constraint_ev = a.checkpoint.as_deref().map(|p| Evaluator::load(p, None)).transpose()?;
    let fitness_ev = match (sc.fitness, &fitness_path) {
        (FitnessKind::EvaluatorAccuracy, Some(p)) => Some(Evaluator::load(p, None)?),
        _ => None,
    };
    let profiles = load_profiles(a.profiles_dir.as_deref())?;
    let outcome = regularized_evolution(
        &sc,
        &constraints,
        Evaluators {
            constraints: constraint_ev.as_ref(),
            fitness: fitness_ev.as_ref(),
        },
    )?;
    let summary = summarize(&sc, &constraints, &outcome, &profiles, &OracleOptions::default())?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join("log.jsonl");
    let mut buf = Vec::new();
    outcome.log.write_jsonl(&mut buf)?;
    write_atomic(&log_path, &buf)?;
    let summary_path = out.join("summary.json");
    write_atomic(&summary_path, (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
    let mut inputs: Vec<&Path> = Vec::new();
    inputs.extend(a.checkpoint.as_deref());
    inputs.extend(a.fitness_checkpoint.as_deref());
    inputs.extend(a.dataset.as_deref());
    run.finish(&summary_path, &inputs, &[&summary_path, &log_path])?;
    for c in &constraints {
        println!("constraint {c}");
    }
    println!(
        "{} cycles, {} feasible entries ({} distinct), {:.2}s",
        sc.cycles,
        summary.feasible_entries,
        summary.distinct_feasible,
        summary.phase_seconds.get("total").copied().unwrap_or(0.0)
    );
    match (&summary.best_arch, summary.best_fitness, &summary.oracle) {
        (Some(arch), Some(f), Some(o)) => {
            println!("best {arch} fitness={f:.4} oracle peak_mem_bytes={} flops={}", o.peak_mem_bytes, o.flops);
            Ok(ExitCode::SUCCESS)
        }
        _ => {
            eprintln!("error: {}", summary.error.as_deref().unwrap_or("no result"));
            Ok(ExitCode::from(1))
        }
    }
}

pub fn net2str(args: Net2StrArgs) -> Result<ExitCode> {
    let (a, _) = merged(&args, args.config.as_deref())?;
    let arch: ArchSpec = required(a.arch, "arch")?.parse().map_err(|e| usage(format!("{e}")))?;
    let mut mc = MacroConfig::default();
    mc.cells_per_stage = a.cells_per_stage.unwrap_or(mc.cells_per_stage);
    if !a.channels.is_empty() {
        mc.stage_channels = a
            .channels
            .as_slice()
            .try_into()
            .map_err(|_| usage("--channels takes exactly three widths"))?;
    }
    mc.validate().map_err(usage)?;
    let traversal = match &a.traversal {
        Some(t) => parse_name(t, "traversal")?,
        None => Default::default(),
    };
    let graph = elaborate(&arch, &mc).with_context(|| format!("elaborating {arch}"))?;
    let s = graph_to_string(&graph, traversal)?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", s.text) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(ExitCode::SUCCESS),
    }
}

#[derive(Deserialize, Clone, Copy, PartialEq)]
#[serde(rename_all = "snake_case")]
enum DtypeChoice {
    F64,
    F32,
    Both,
}

fn print_grad_report(r: &GradCheckReport, limit: f64) -> bool {
    let ok = r.max_rel_error < limit;
    println!(
        "{}: max_rel_error={:.3e} over {} coordinates (limit {limit:e}) {}",
        r.dtype,
        r.max_rel_error,
        r.coords_checked,
        if ok { "PASS" } else { "FAIL" }
    );
    for (group, e) in &r.per_group {
        println!("  {group}: {e:.3e}");
    }
    ok
}

pub fn grad_check(args: GradCheckArgs) -> Result<ExitCode> {
    let (a, _) = merged(&args, args.config.as_deref())?;
    let dtype: DtypeChoice = parse_name(a.dtype.as_deref().unwrap_or("both"), "dtype")?;
    let seed = a.seed.unwrap_or(0);
    let mut ok = true;
    if dtype != DtypeChoice::F32 {
        ok &= print_grad_report(&default_grad_check::<f64>(seed)?, 1e-4);
    }
    if dtype != DtypeChoice::F64 {
        ok &= print_grad_report(&default_grad_check::<f32>(seed)?, 1e-2);
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

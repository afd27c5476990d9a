//! The subcommands, as library functions returning their results.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use argmamba::blocks::{MsSsmConfig, ScanBlock};
use argmamba::checkpoint;
use argmamba::data::{load_split, read_manifest, write_dataset, Manifest, CLASS_NAMES};
use argmamba::fusion::{Argfm, ArgfmConfig};
use argmamba::gradcheck::{random_tensor, run_suite, CheckReport};
use argmamba::metrics::MetricsReport;
use argmamba::network::{Model, ModelConfig};
use argmamba::train::{evaluate, train, EpochRecord, EvalSummary, Example};
use argmamba::{Ctx, Error, Graph, ParamBuilder, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const DIVERGENCE_FILE: &str = "divergence.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const BENCH_FILE: &str = "bench.csv";
pub const ABLATION_FILE: &str = "ablation.md";

fn io<T>(r: std::io::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Runtime(Error::Io(e)))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    io(fs::write(path, text + "\n"))
}

fn load_examples(cfg: &RunConfig, split: &str) -> CliResult<Vec<Example<f32>>> {
    let samples = load_split(&cfg.data.root, split)?;
    if samples.is_empty() {
        return Err(CliError::Usage(format!("split `{split}` of {} is empty", cfg.data.root.display())));
    }
    Ok(samples.iter().map(|(id, s)| Example::from_sample(id.clone(), s)).collect())
}

/// The validation split, when the config names one and the dataset has it.
fn val_examples(cfg: &RunConfig) -> CliResult<Vec<Example<f32>>> {
    match &cfg.data.val_split {
        Some(v) if read_manifest(&cfg.data.root)?.splits.contains_key(v) => load_examples(cfg, v),
        Some(v) => {
            log::warn!("validation split `{v}` not in dataset; training without validation");
            Ok(Vec::new())
        }
        None => Ok(Vec::new()),
    }
}

pub fn cmd_generate_data(cfg: &RunConfig, force: bool) -> CliResult<Manifest> {
    cfg.validate()?;
    let manifest = write_dataset(&cfg.data.root, &cfg.data.dataset_spec(), force)?;
    cfg.write_resolved(&cfg.data.root)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_miou: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Trains on the configured split. The checkpoint with the best validation
/// mIoU is kept (the last epoch when there is no validation split).
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    cfg.write_resolved(out)?;
    let train_set = load_examples(cfg, &cfg.data.split)?;
    let val_set = val_examples(cfg)?;
    let (model, mut store) = Model::new::<f32>(&cfg.model, cfg.train.seed)?;
    log::info!("{} parameters, {} train / {} val samples", store.num_elements(), train_set.len(), val_set.len());

    let ckpt = out.join(BEST_CHECKPOINT);
    let mut history = io(File::create(out.join(HISTORY_FILE)))?;
    let mut best: Option<(usize, Option<f64>)> = None;
    let result = train(&model, &mut store, &train_set, &val_set, &cfg.train, |rec, st| {
        let line = serde_json::to_string(rec)?;
        writeln!(history, "{line}")?;
        let miou = rec.val.as_ref().and_then(|v| v.miou);
        let better = match (best, miou) {
            (None, _) => true,
            (Some((_, Some(b))), Some(m)) => m > b,
            (Some((_, None)), Some(_)) => true,
            (Some(_), None) => val_set.is_empty(),
        };
        if better {
            best = Some((rec.epoch, miou));
            let meta = serde_json::json!({ "epoch": rec.epoch, "val_miou": miou, "train": cfg.train });
            checkpoint::save(&ckpt, &cfg.model, st, meta)?;
        }
        Ok(true)
    });
    let history_records = match result {
        Ok(h) => h,
        Err(Error::Diverged(msg)) => {
            write_json(&out.join(DIVERGENCE_FILE), &serde_json::json!({ "error": msg, "config": cfg }))?;
            return Err(CliError::Runtime(Error::Diverged(format!(
                "{msg} (details in {})",
                out.join(DIVERGENCE_FILE).display()
            ))));
        }
        Err(e) => return Err(e.into()),
    };
    let (best_epoch, best_miou) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        history: history_records,
        best_epoch,
        best_miou,
        checkpoint: ckpt,
    })
}

/// Scores a checkpoint on the validation split (the training split when the
/// config has none).
pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> CliResult<MetricsReport> {
    cfg.validate()?;
    let path = checkpoint_path.map_or_else(|| cfg.output_dir.join(BEST_CHECKPOINT), Path::to_path_buf);
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
    }
    let ck = checkpoint::load(&path)?;
    let split = cfg.data.val_split.clone().unwrap_or_else(|| cfg.data.split.clone());
    let examples = load_examples(cfg, &split)?;
    let cm = evaluate(&ck.model, &ck.store, &examples)?;
    let report = MetricsReport::new(&cm, &CLASS_NAMES);
    cfg.write_resolved(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(METRICS_FILE), &report)?;
    Ok(report)
}

/// Runs the finite-difference suite; any failed check is a verification error.
pub fn cmd_gradcheck(cfg: &RunConfig) -> CliResult<Vec<CheckReport>> {
    cfg.validate()?;
    cfg.write_resolved(&cfg.output_dir)?;
    let reports = run_suite(cfg.train.seed)?;
    write_json(&cfg.output_dir.join(GRADCHECK_FILE), &reports)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::Verification(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub component: String,
    pub tokens: usize,
    /// `None` when the size was skipped.
    pub median_ms: Option<f64>,
    /// Forwards per timed sample.
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// MS-SSM median time at the largest size over the smallest.
    pub ms_ssm_ratio: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,tokens,median_ms\n");
        for r in &self.rows {
            let t = r.median_ms.map_or(String::new(), |m| format!("{m:.4}"));
            s.push_str(&format!("{},{},{t}\n", r.component, r.tokens));
        }
        s
    }
}

/// Median milliseconds per call of `f`. Calls faster than `min_sample_ms`
/// are looped so every timed sample is well above the clock resolution.
fn time_median(repeats: usize, min_sample_ms: f64, mut f: impl FnMut() -> CliResult<()>) -> CliResult<(f64, usize)> {
    let t = Instant::now();
    f()?;
    let first = t.elapsed().as_secs_f64() * 1e3;
    let mut iters = if first >= min_sample_ms { 1 } else { (min_sample_ms / first.max(1e-6)).ceil() as usize };
    loop {
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            for _ in 0..iters {
                f()?;
            }
            samples.push(t.elapsed().as_secs_f64() * 1e3);
        }
        samples.sort_by(f64::total_cmp);
        let median = samples[samples.len() / 2];
        if median >= 0.5 * min_sample_ms {
            return Ok((median / iters as f64, iters));
        }
        iters *= 2;
    }
}

/// Times MS-SSM and ARGFM forwards on square maps of each configured size.
pub fn cmd_bench_scan(cfg: &RunConfig) -> CliResult<BenchReport> {
    cfg.validate()?;
    let b = &cfg.bench;
    cfg.write_resolved(&cfg.output_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut store = ParamStore::<f32>::new();
    let (block, fusion) = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let ms = MsSsmConfig {
            window_mode: cfg.model.window_mode,
            ..MsSsmConfig::default()
        };
        let block = ScanBlock::new(&mut pb.sub("ms_ssm"), b.channels, cfg.model.expansion, b.state_dim, &ms)?;
        let fcfg = ArgfmConfig {
            state_dim: b.state_dim,
            max_relation_tokens: b.argfm_max_tokens,
            ..ArgfmConfig::default()
        };
        (block, Argfm::new(&mut pb.sub("argfm"), b.channels, &fcfg)?)
    };

    let mut sizes = b.sizes.clone();
    sizes.sort_unstable();
    let mut rows = Vec::new();
    for &n in &sizes {
        let side = (n as f64).sqrt().round() as usize;
        let x: Tensor<f32> = random_tensor(&mut rng, &[b.channels, side, side]).cast();
        let (ms, iters) = time_median(b.repeats, b.min_sample_ms, || {
            let g = Graph::inference();
            let cx = Ctx::new(&g, &store);
            block.forward(&cx, g.constant(x.clone()))?;
            Ok(())
        })?;
        log::info!("ms_ssm {n} tokens: {ms:.3} ms ({iters} per sample)");
        rows.push(BenchRow { component: "ms_ssm".into(), tokens: n, median_ms: Some(ms), iterations: iters });
    }
    for &n in &sizes {
        if n > b.argfm_max_tokens {
            log::warn!("argfm skipped at {n} tokens (cap {})", b.argfm_max_tokens);
            rows.push(BenchRow { component: "argfm".into(), tokens: n, median_ms: None, iterations: 0 });
            continue;
        }
        let side = (n as f64).sqrt().round() as usize;
        let x: Tensor<f32> = random_tensor(&mut rng, &[b.channels, side, side]).cast();
        let y: Tensor<f32> = random_tensor(&mut rng, &[b.channels, side, side]).cast();
        let (ms, iters) = time_median(b.repeats, b.min_sample_ms, || {
            let g = Graph::inference();
            let cx = Ctx::new(&g, &store);
            fusion.forward(&cx, g.constant(x.clone()), g.constant(y.clone()))?;
            Ok(())
        })?;
        log::info!("argfm {n} tokens: {ms:.3} ms ({iters} per sample)");
        rows.push(BenchRow { component: "argfm".into(), tokens: n, median_ms: Some(ms), iterations: iters });
    }

    let ms_rows: Vec<&BenchRow> = rows.iter().filter(|r| r.component == "ms_ssm").collect();
    let first = ms_rows[0].median_ms.unwrap_or(f64::NAN);
    let last = ms_rows[ms_rows.len() - 1].median_ms.unwrap_or(f64::NAN);
    let report = BenchReport { ms_ssm_ratio: last / first, rows };
    io(fs::write(cfg.output_dir.join(BENCH_FILE), report.to_csv()))?;
    if sizes.len() > 1 && !(report.ms_ssm_ratio < b.max_ratio) {
        return Err(CliError::Verification(format!(
            "ms_ssm time ratio {:.1} for {}x tokens is not below {}",
            report.ms_ssm_ratio,
            sizes[sizes.len() - 1] / sizes[0],
            b.max_ratio
        )));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub use_ms_ssm: bool,
    pub use_argfm: bool,
    pub miou: Option<f64>,
    pub oa: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { " " };
        let mut s = String::from("| MS-SSM | ARGFM | mIoU (%) |\n|:---:|:---:|---:|\n");
        for r in &self.rows {
            let m = r.miou.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
            s.push_str(&format!("| {} | {} | {m} |\n", mark(r.use_ms_ssm), mark(r.use_argfm)));
        }
        s
    }
}

/// Trains and scores the four on/off combinations of MS-SSM and ARGFM.
pub fn cmd_ablate(cfg: &RunConfig) -> CliResult<AblationTable> {
    cfg.validate()?;
    cfg.write_resolved(&cfg.output_dir)?;
    let train_set = load_examples(cfg, &cfg.data.split)?;
    let val_set = val_examples(cfg)?;
    let score_set = if val_set.is_empty() { &train_set } else { &val_set };
    let mut rows = Vec::with_capacity(4);
    for (use_ms_ssm, use_argfm) in [(false, false), (true, false), (false, true), (true, true)] {
        let mcfg = ModelConfig {
            use_ms_ssm,
            use_argfm,
            ..cfg.model.clone()
        };
        let (model, mut store) = Model::new::<f32>(&mcfg, cfg.train.seed)?;
        train(&model, &mut store, &train_set, &[], &cfg.train, |_, _| Ok(true))?;
        let s = EvalSummary::from_confusion(&evaluate(&model, &store, score_set)?);
        log::info!("ms_ssm={use_ms_ssm} argfm={use_argfm}: miou {:?}", s.miou);
        rows.push(AblationRow { use_ms_ssm, use_argfm, miou: s.miou, oa: s.oa });
    }
    let table = AblationTable { rows };
    io(fs::write(cfg.output_dir.join(ABLATION_FILE), table.to_markdown()))?;
    write_json(&cfg.output_dir.join("ablation.json"), &table)?;
    Ok(table)
}

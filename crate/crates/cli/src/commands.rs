use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use proto_align::align::Gate;
use proto_align::checkpoint::Checkpoint;
use proto_align::config::{Toggles, TrainConfig};
use proto_align::eval::{evaluate, export_embeddings, EvalReport};
use proto_align::gradcheck;
use proto_align::synth::{generate_corpus, load_corpus, split, write_corpus, ImageReportPair};
use proto_align::train::{model_from_checkpoint, Trainer};
use rayon::prelude::*;

use crate::error::{CliError, CliResult};
use crate::run_dir::{manifest_field, sha256_file, RunLock, RunManifest};
use crate::{ConfigArgs, Split};

pub const THREADS_ENV: &str = "PROTO_ALIGN_THREADS";

/// Relative output paths are placed under `out_dir` when one is given.
fn output_path(path: &Path, out_dir: Option<&Path>) -> PathBuf {
    match out_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::user(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::user(format!("{}: {e}", path.display())))
}

pub fn resolve_config(args: &ConfigArgs) -> CliResult<(TrainConfig, Option<String>)> {
    let mut cfg = TrainConfig::default();
    let mut file_text = None;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
        file_text = Some(text);
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::user(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok((cfg, file_text))
}

fn load(path: &Path) -> CliResult<(Vec<ImageReportPair>, String)> {
    let hash = sha256_file(path)?;
    Ok((load_corpus(path)?, hash))
}

pub fn gen_data(
    n: usize,
    seed: u64,
    out: &Path,
    distractor_rate: f64,
    out_dir: Option<&Path>,
) -> CliResult<()> {
    let pairs = generate_corpus(n, seed, distractor_rate)?;
    let path = output_path(out, out_dir);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::user(format!("{}: {e}", parent.display())))?;
    }
    write_corpus(&path, &pairs)?;
    println!("wrote {n} pairs to {}", path.display());
    Ok(())
}

fn stage_artifacts(cfg: &TrainConfig) -> Vec<String> {
    let mut a = vec!["metrics.csv".to_string(), "spb.csv".to_string()];
    for (s, &e) in cfg.epochs.iter().enumerate() {
        if e > 0 {
            a.push(format!("stage{}.ckpt", s + 1));
        }
    }
    a.push("eval.txt".into());
    a
}

pub fn train(
    corpus: &Path,
    args: &ConfigArgs,
    out_dir: &Path,
    resume: Option<&Path>,
) -> CliResult<()> {
    let (pairs, hash) = load(corpus)?;
    let restored = resume.map(Checkpoint::load).transpose()?;
    let (cfg, file_text) = match &restored {
        Some(c) => (TrainConfig::from_text(c.text("config")?)?, None),
        None => resolve_config(args)?,
    };
    if let Some(expected) = file_text
        .as_deref()
        .and_then(|t| manifest_field(t, "corpus_sha256"))
    {
        if expected != hash {
            log::warn!("corpus hash {hash} differs from the manifest's {expected}");
        }
    }
    let (train_set, test_set) = split(&pairs, cfg.test_fraction);

    let _lock = RunLock::acquire(out_dir)?;
    let mut trainer = match &restored {
        Some(c) => Trainer::from_checkpoint(c, train_set.len())?,
        None => Trainer::new(cfg.clone(), train_set.len())?,
    };
    let manifest = RunManifest {
        command: if resume.is_some() {
            "train --resume".into()
        } else {
            "train".into()
        },
        config: cfg.clone(),
        corpus: corpus.to_path_buf(),
        corpus_sha256: hash,
        seed: cfg.seed,
        artifacts: stage_artifacts(&cfg),
    };
    manifest.write(out_dir)?;
    log::info!(
        "training on {} pairs for {} epochs ({} steps)",
        train_set.len(),
        trainer.total_epochs(),
        trainer.total_steps()
    );
    trainer.run(&train_set, out_dir)?;
    if trainer.rejected_steps > 0 {
        log::warn!(
            "{} steps were rejected for non-finite gradients",
            trainer.rejected_steps
        );
    }
    let eval_path = out_dir.join("eval.txt");
    let text = if test_set.is_empty() {
        "# no held-out pairs (test_fraction too small for this corpus)\n".to_string()
    } else {
        evaluate(&trainer.model, &test_set, cfg.seed)?.to_text()
    };
    write_file(&eval_path, &text)?;
    print!("{text}");
    Ok(())
}

fn select(
    pairs: Vec<ImageReportPair>,
    split_kind: Split,
    test_fraction: f64,
) -> CliResult<Vec<ImageReportPair>> {
    match split_kind {
        Split::All => Ok(pairs),
        Split::Test => {
            let (_, test) = split(&pairs, test_fraction);
            if test.is_empty() {
                return Err(CliError::user(
                    "the held-out split is empty; use --split all",
                ));
            }
            Ok(test)
        }
    }
}

pub fn eval(
    checkpoint: &Path,
    corpus: &Path,
    report_out: &Path,
    export: Option<&Path>,
    split_kind: Split,
    seed: u64,
    out_dir: Option<&Path>,
) -> CliResult<()> {
    let model = model_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let (pairs, _) = load(corpus)?;
    let pairs = select(pairs, split_kind, model.config.test_fraction)?;
    let report = evaluate(&model, &pairs, seed)?;
    let text = report.to_text();
    write_file(&output_path(report_out, out_dir), &text)?;
    if let Some(path) = export {
        let path = output_path(path, out_dir);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::user(format!("{}: {e}", parent.display())))?;
        }
        export_embeddings(&model, &pairs, &path)?;
    }
    print!("{text}");
    Ok(())
}

pub fn gradcheck(seed: u64) -> CliResult<()> {
    let results = gradcheck::run_all(seed).map_err(|e| CliError::Internal(e.to_string()))?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<14} max rel err {:.3e}",
            r.name, r.report.max_rel_error
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        println!(
            "all {} checks within {:e}",
            results.len(),
            gradcheck::TOLERANCE
        );
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            results.len(),
            failed.join(", ")
        )))
    }
}

/// Ablation rows: component subsets, then the two gate choices on the full model.
pub const ABLATION_ROWS: [(&str, bool, bool, bool, Option<Gate>); 7] = [
    ("base", false, false, false, None),
    ("+LAM", true, false, false, None),
    ("+LAM+CCR", true, false, true, None),
    ("+LAM+SPB", true, true, false, None),
    ("full", true, true, true, None),
    ("gate=sigmoid", true, true, true, Some(Gate::Sigmoid)),
    ("gate=softmax", true, true, true, Some(Gate::Softmax)),
];

pub fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::user(format!(
                "{THREADS_ENV} must be a positive integer, got '{v}'"
            ))),
        },
        Err(_) => Ok(None),
    }
}

struct RowResult {
    localization: f64,
    zero_shot: f64,
    precision_at_1: f64,
}

fn run_one(
    cfg: TrainConfig,
    train: &[ImageReportPair],
    test: &[ImageReportPair],
) -> CliResult<EvalReport> {
    let seed = cfg.seed;
    let mut t = Trainer::new(cfg, train.len())?;
    t.run_in_memory(train)?;
    Ok(evaluate(&t.model, test, seed)?)
}

pub fn ablate(corpus: &Path, args: &ConfigArgs, seeds: usize, out_dir: &Path) -> CliResult<()> {
    if seeds == 0 {
        return Err(CliError::user("--seeds must be at least 1"));
    }
    let (cfg, _) = resolve_config(args)?;
    let (pairs, hash) = load(corpus)?;
    let (train_set, test_set) = split(&pairs, cfg.test_fraction);
    if test_set.is_empty() {
        return Err(CliError::user(
            "the held-out split is empty; raise test_fraction or the corpus size",
        ));
    }
    let threads = thread_cap()?;
    let _lock = RunLock::acquire(out_dir)?;
    RunManifest {
        command: format!("ablate --seeds {seeds}"),
        config: cfg.clone(),
        corpus: corpus.to_path_buf(),
        corpus_sha256: hash,
        seed: cfg.seed,
        artifacts: vec!["ablation.txt".into()],
    }
    .write(out_dir)?;

    // Distinct configurations only; "full" and one gate row usually coincide.
    let mut configs: Vec<TrainConfig> = Vec::new();
    let mut row_jobs: Vec<Vec<usize>> = Vec::new();
    for &(_, lam, spb, ccr, gate) in &ABLATION_ROWS {
        let mut jobs = Vec::new();
        for s in 0..seeds as u64 {
            let mut c = cfg.clone();
            c.toggles = Toggles { lam, spb, ccr };
            if let Some(g) = gate {
                c.gate = g;
            }
            c.seed = cfg.seed + s;
            let idx = configs.iter().position(|x| *x == c).unwrap_or_else(|| {
                configs.push(c);
                configs.len() - 1
            });
            jobs.push(idx);
        }
        row_jobs.push(jobs);
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    log::info!(
        "ablation: {} training runs on {} threads",
        configs.len(),
        pool.current_num_threads()
    );
    let reports: Vec<CliResult<EvalReport>> = pool.install(|| {
        configs
            .par_iter()
            .map(|c| run_one(c.clone(), &train_set, &test_set))
            .collect()
    });
    let reports: Vec<EvalReport> = reports.into_iter().collect::<CliResult<_>>()?;

    let rows: Vec<RowResult> = row_jobs
        .iter()
        .map(|jobs| {
            let n = jobs.len() as f64;
            let mean = |f: &dyn Fn(&EvalReport) -> f64| {
                jobs.iter().map(|&j| f(&reports[j])).sum::<f64>() / n
            };
            RowResult {
                localization: mean(&|r| r.localization),
                zero_shot: mean(&|r| r.accuracy),
                precision_at_1: mean(&|r| r.precision_at(1).unwrap_or(0.0)),
            }
        })
        .collect();
    let mut table = String::new();
    writeln!(
        table,
        "{:<14} {:>8} {:>12} {:>10} {:>8}",
        "row", "gate", "localization", "zero_shot", "P@1"
    )
    .expect("string write");
    for ((name, _, _, _, gate), r) in ABLATION_ROWS.iter().zip(&rows) {
        writeln!(
            table,
            "{:<14} {:>8} {:>12.4} {:>10.4} {:>8.4}",
            name,
            gate.unwrap_or(cfg.gate).to_string(),
            r.localization,
            r.zero_shot,
            r.precision_at_1
        )
        .expect("string write");
    }
    write_file(&out_dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

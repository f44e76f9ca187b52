//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run everything with `cargo test --release -p proto-align-core --test
//! acceptance`, or a subset with `... -- C1 C3`. The exit status is zero
//! whatever the verdicts unless `PROTO_ALIGN_STRICT=1` is set.

use std::time::Instant;

use proto_align::align::{self, Gate};
use proto_align::autodiff::{Graph, Tensor};
use proto_align::ccr;
use proto_align::checkpoint::Checkpoint;
use proto_align::config::{Toggles, TrainConfig};
use proto_align::eval::{evaluate, EvalReport};
use proto_align::gradcheck;
use proto_align::matching::{brute_force_assignment, hungarian, CostMatrix};
use proto_align::model::{Batch, LossValues, Model};
use proto_align::nn::segments;
use proto_align::spb;
use proto_align::synth::{generate_corpus, split, ImageReportPair, DEFAULT_DISTRACTOR_RATE};
use proto_align::train::Trainer;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_SECONDS: f64 = 60.0;
const MATCHING_SECONDS: f64 = 5.0;
const MATCHING_TRIALS: usize = 1000;
const E2E_PAIRS: usize = 2000;
const E2E_CORPUS_SEED: u64 = 0;
const ZERO_SHOT_MIN: f64 = 0.80;
const RETRIEVAL_FACTOR: f64 = 2.0;
/// Reported alongside C5 but not part of its verdict.
const COLLAPSE_COSINE: f64 = 0.99;
const LOCALIZATION_MIN: f64 = 0.50;
const ABLATION_PAIRS: usize = 600;
const ABLATION_EPOCHS: [usize; 3] = [5, 5, 10];
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const PARAPHRASE_MIN: f64 = 0.8;
const MEANINGS: usize = 48;

struct Verdict {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { id, pass, detail }
}

fn c1() -> Verdict {
    let start = Instant::now();
    let results = gradcheck::run_all(0).expect("gradient checks run");
    let secs = start.elapsed().as_secs_f64();
    let worst = results
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .expect("checks");
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    let pass = failed.is_empty() && secs < GRADCHECK_SECONDS;
    verdict(
        "C1",
        pass,
        format!(
            "{} checks, worst {} rel err {:.2e} (< {:.0e}), failed {:?}, {secs:.1}s (< {GRADCHECK_SECONDS}s)",
            results.len(),
            worst.name,
            worst.report.max_rel_error,
            gradcheck::TOLERANCE,
            failed
        ),
    )
}

fn c2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    let mut mismatches = 0;
    for n in 2..=6 {
        for _ in 0..MATCHING_TRIALS {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect();
            let c = CostMatrix::new(rows).expect("square");
            let h = hungarian(&c);
            let b = brute_force_assignment(&c).expect("small");
            if h.total_cost != b.total_cost {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "C2",
        mismatches == 0 && secs < MATCHING_SECONDS,
        format!(
            "{} matrices, {mismatches} cost mismatches, {secs:.2}s (< {MATCHING_SECONDS}s)",
            5 * MATCHING_TRIALS
        ),
    )
}

fn c3() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        let good = (got - want).abs() <= tol;
        ok &= good;
        notes.push(format!(
            "{name} {got:.12} ({})",
            if good { "ok" } else { "off" }
        ));
    };
    let rows = |r: &[&[f64]]| {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    };

    let mut g = Graph::new();
    let eye = g.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let l = align::global_infonce(&mut g, eye, eye, 1.0).unwrap();
    let v = g.value(l.image_from_reports).item() + g.value(l.report_from_images).item();
    check("infonce", v, 2.0 * (1.0 + (-1.0f64).exp()).ln(), 1e-9);

    let f = g.constant(rows(&[&[0.3, -1.0, 2.0], &[1.0, 1.0, 0.5]]));
    let r2i = align::local_r2i(&mut g, f, f, |_, x| Ok(x)).unwrap();
    check("r2i", g.value(r2i).item(), -1.0, 1e-12);

    check(
        "kl",
        ccr::kl_divergence(&[0.9, 0.1], &[0.5, 0.5]),
        0.36806,
        1e-5,
    );

    let a = g.constant(rows(&[&[0.6, 0.8]]));
    let b = g.constant(rows(&[&[-1.0, 0.0]]));
    let single = align::global_infonce(&mut g, a, b, 0.01).unwrap();
    let gpa = ccr::global_prediction_loss(&mut g, a, b, 0.01).unwrap();
    let fl = g.constant(rows(&[&[1.0, 2.0], &[0.5, -0.5]]));
    let cl = g.constant(rows(&[&[-1.0, 0.0], &[2.0, 2.0]]));
    let i2r = align::local_i2r(&mut g, fl, cl, &segments(&[1, 1]), 0.01).unwrap();
    let same = spb::prototype_loss(&mut g, a, a).unwrap();
    let zeros = [
        single.image_from_reports,
        single.report_from_images,
        gpa,
        i2r,
        same,
    ]
    .iter()
    .filter(|&&v| g.value(v).item() == 0.0)
    .count();
    ok &= zeros == 5;
    notes.push(format!("degenerate zeros {zeros}/5"));
    verdict("C3", ok, notes.join(", "))
}

fn shuffle_sentences(pairs: &[ImageReportPair], seed: u64) -> Vec<ImageReportPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs
        .iter()
        .map(|p| {
            let mut order: Vec<usize> = (0..p.sentences.len()).collect();
            order.shuffle(&mut rng);
            ImageReportPair {
                sentences: order.iter().map(|&i| p.sentences[i].clone()).collect(),
                gt_alignment: order.iter().map(|&i| p.gt_alignment[i].clone()).collect(),
                ..p.clone()
            }
        })
        .collect()
}

fn recon_terms(model: &Model, pairs: &[ImageReportPair]) -> LossValues {
    let batch = Batch::new(&pairs.iter().collect::<Vec<_>>()).expect("batch");
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, |_| true);
    model
        .forward(&mut g, &p, &batch, 3, spb::TEMPERATURE_END, None)
        .expect("forward")
        .values
}

fn c4(run: &E2eRun) -> Verdict {
    let mut ok = true;
    let base_terms = recon_terms(&run.trainer.model, &run.test[..16]);
    for seed in 0..3 {
        let shuffled = shuffle_sentences(&run.test, seed);
        let t = recon_terms(&run.trainer.model, &shuffled[..16]);
        ok &= t.q.to_bits() == base_terms.q.to_bits()
            && t.kl.to_bits() == base_terms.kl.to_bits()
            && t.gpa.to_bits() == base_terms.gpa.to_bits();
        let r = evaluate(&run.trainer.model, &shuffled, 0).expect("evaluate");
        ok &= r == run.report && r.to_text() == run.report.to_text();
    }
    verdict(
        "C4",
        ok,
        format!(
            "3 shuffles of {} test reports; L_q {:.6}, L_kl {:.6}, L_gpa {:.6} and every metric compared bitwise",
            run.test.len(),
            base_terms.q,
            base_terms.kl,
            base_terms.gpa
        ),
    )
}

struct E2eRun {
    trainer: Trainer,
    test: Vec<ImageReportPair>,
    report: EvalReport,
    seconds: f64,
}

fn e2e() -> E2eRun {
    let cfg = TrainConfig::default();
    let pairs =
        generate_corpus(E2E_PAIRS, E2E_CORPUS_SEED, DEFAULT_DISTRACTOR_RATE).expect("corpus");
    let (train, test) = split(&pairs, cfg.test_fraction);
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg, train.len()).expect("trainer");
    trainer.run_in_memory(&train).expect("training");
    let seconds = start.elapsed().as_secs_f64();
    let report = evaluate(&trainer.model, &test, 0).expect("evaluate");
    E2eRun {
        trainer,
        test,
        report,
        seconds,
    }
}

fn c5(run: &E2eRun) -> Verdict {
    let r = &run.report;
    let p1 = r.precision_at(1).unwrap_or(0.0);
    let zs = r.accuracy >= ZERO_SHOT_MIN;
    let ret = p1 >= RETRIEVAL_FACTOR * r.random_precision_at_1;
    let loc = r.localization >= LOCALIZATION_MIN;
    verdict(
        "C5",
        zs && ret && loc,
        format!(
            "zero-shot {:.3} (>= {ZERO_SHOT_MIN}) {}, P@1 {:.3} vs random {:.3} (>= {RETRIEVAL_FACTOR}x) {}, localization {:.3} (>= {LOCALIZATION_MIN}) {}, trained in {:.0}s; export mean pairwise cosine {:.3} (collapse bound {COLLAPSE_COSINE}) {}",
            r.accuracy,
            tag(zs),
            p1,
            r.random_precision_at_1,
            tag(ret),
            r.localization,
            tag(loc),
            run.seconds,
            r.mean_pairwise_cosine,
            tag(r.mean_pairwise_cosine < COLLAPSE_COSINE)
        ),
    )
}

fn tag(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "MISSED"
    }
}

fn ablation_config(name: &str, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.epochs = ABLATION_EPOCHS;
    c.seed = seed;
    let (lam, spb, ccr, gate) = match name {
        "base" => (false, false, false, Gate::Sigmoid),
        "+LAM" => (true, false, false, Gate::Sigmoid),
        "full" => (true, true, true, Gate::Sigmoid),
        "full-softmax" => (true, true, true, Gate::Softmax),
        other => panic!("unknown ablation row {other}"),
    };
    c.toggles = Toggles { lam, spb, ccr };
    c.gate = gate;
    c
}

fn c6() -> Verdict {
    let pairs = generate_corpus(ABLATION_PAIRS, 1, DEFAULT_DISTRACTOR_RATE).expect("corpus");
    let (train, test) = split(&pairs, TrainConfig::default().test_fraction);
    let rows = ["base", "+LAM", "full", "full-softmax"];
    let mut loc = [0.0; 4];
    let mut zs = [0.0; 4];
    for (i, name) in rows.iter().enumerate() {
        for &seed in &ABLATION_SEEDS {
            let mut t = Trainer::new(ablation_config(name, seed), train.len()).expect("trainer");
            t.run_in_memory(&train).expect("training");
            let r = evaluate(&t.model, &test, seed).expect("evaluate");
            loc[i] += r.localization / ABLATION_SEEDS.len() as f64;
            zs[i] += r.accuracy / ABLATION_SEEDS.len() as f64;
        }
    }
    let margins = [
        ("full-base loc", loc[2] - loc[0], true),
        ("full-base zs", zs[2] - zs[0], true),
        ("+LAM-base loc", loc[1] - loc[0], true),
        ("sigmoid-softmax loc", loc[2] - loc[3], false),
    ];
    let ok = margins
        .iter()
        .all(|&(_, m, strict)| if strict { m > 0.0 } else { m >= 0.0 });
    let table: Vec<String> = rows
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{n}: loc {:.4} zs {:.4}", loc[i], zs[i]))
        .collect();
    let m: Vec<String> = margins
        .iter()
        .map(|(n, v, _)| format!("{n} {v:+.4}"))
        .collect();
    verdict(
        "C6",
        ok,
        format!("{}; margins {}", table.join(", "), m.join(", ")),
    )
}

fn c7(run: &E2eRun) -> Verdict {
    let r = &run.report;
    let para = r.paraphrase_agreement.unwrap_or(0.0);
    let logged: Vec<_> = run
        .trainer
        .history
        .iter()
        .filter(|h| h.sentences > 0)
        .collect();
    let agree = !logged.is_empty() && logged.iter().all(|h| h.agree == h.sentences);
    let distinct = r.distinct_prototypes.unwrap_or(0);
    let min_distinct = MEANINGS / 2;
    let ok = para >= PARAPHRASE_MIN && agree && distinct >= min_distinct;
    verdict(
        "C7",
        ok,
        format!(
            "paraphrase agreement {para:.3} (>= {PARAPHRASE_MIN}) {}, hard/soft agreement in {}/{} logged epochs {}, distinct prototypes {distinct} (>= {min_distinct}) {}, purity {:.3}",
            tag(para >= PARAPHRASE_MIN),
            logged.iter().filter(|h| h.agree == h.sentences).count(),
            logged.len(),
            tag(agree),
            tag(distinct >= min_distinct),
            r.purity.unwrap_or(0.0)
        ),
    )
}

fn c8() -> Verdict {
    let mut cfg = TrainConfig::default();
    cfg.epochs = [2, 2, 2];
    cfg.seed = 8;
    let pairs = generate_corpus(96, 8, DEFAULT_DISTRACTOR_RATE).expect("corpus");
    let dir = tempfile::tempdir().expect("tempdir");
    let run_dir = |name: &str| {
        let out = dir.path().join(name);
        let mut t = Trainer::new(cfg.clone(), pairs.len()).expect("trainer");
        t.run(&pairs, &out).expect("training");
        (out, t)
    };
    let read = |p: std::path::PathBuf| std::fs::read(p).expect("log");
    let (a, ta) = run_dir("a");
    let (b, _) = run_dir("b");
    let logs_equal = read(a.join("metrics.csv")) == read(b.join("metrics.csv"))
        && read(a.join("spb.csv")) == read(b.join("spb.csv"))
        && read(a.join("stage3.ckpt")) == read(b.join("stage3.ckpt"));

    let mut resumed_ok = true;
    for stop in [1, 3, 5] {
        let mut t = Trainer::new(cfg.clone(), pairs.len()).expect("trainer");
        for _ in 0..stop {
            t.run_epoch(&pairs).expect("epoch");
        }
        let path = dir.path().join(format!("resume{stop}.ckpt"));
        t.to_checkpoint().save(&path).expect("save");
        drop(t);
        let mut r = Trainer::from_checkpoint(&Checkpoint::load(&path).expect("load"), pairs.len())
            .expect("restore");
        r.run_in_memory(&pairs).expect("training");
        resumed_ok &= r.metrics_csv() == ta.metrics_csv()
            && r.spb_csv() == ta.spb_csv()
            && r.to_checkpoint().to_bytes() == ta.to_checkpoint().to_bytes();
    }
    verdict(
        "C8",
        logs_equal && resumed_ok,
        format!(
            "repeat run logs and checkpoint bitwise equal: {}, resume after epochs 1/3/5 bitwise equal: {}",
            tag(logs_equal),
            tag(resumed_ok)
        ),
    )
}

fn main() {
    let wanted: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| a.len() == 2 && a.starts_with('C'))
        .collect();
    let want = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id);
    let mut verdicts = Vec::new();
    let mut emit = |v: Verdict| {
        println!(
            "{} {}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.id,
            v.detail
        );
        verdicts.push(v.pass);
    };
    if want("C1") {
        emit(c1());
    }
    if want("C2") {
        emit(c2());
    }
    if want("C3") {
        emit(c3());
    }
    let run = (want("C4") || want("C5") || want("C7")).then(e2e);
    if let Some(run) = &run {
        if want("C4") {
            emit(c4(run));
        }
        if want("C5") {
            emit(c5(run));
        }
    }
    if want("C6") {
        emit(c6());
    }
    if let Some(run) = &run {
        if want("C7") {
            emit(c7(run));
        }
    }
    if want("C8") {
        emit(c8());
    }
    let failed = verdicts.iter().filter(|&&p| !p).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        verdicts.len() - failed
    );
    if failed > 0 && std::env::var("PROTO_ALIGN_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

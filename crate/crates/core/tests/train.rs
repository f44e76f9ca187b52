use proto_align::autodiff::{Graph, Tensor};
use proto_align::checkpoint::Checkpoint;
use proto_align::config::{Toggles, TrainConfig};
use proto_align::model::{Active, Batch, Model, Noise};
use proto_align::optim::{clip_global_norm, cosine_lr, Adam, EPS};
use proto_align::params::{Group, ParamStore};
use proto_align::synth::{generate_corpus, ImageReportPair};
use proto_align::train::{model_from_checkpoint, Trainer, METRICS_HEADER};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.batch_size = 8;
    c.epochs = [1, 1, 2];
    c.model.dim = 16;
    c.model.c_i = 16;
    c.model.c_r = 16;
    c.model.bank_size = 8;
    c.seed = 3;
    c
}

fn corpus() -> Vec<ImageReportPair> {
    generate_corpus(20, 13, 0.2).unwrap()
}

fn run(cfg: TrainConfig, pairs: &[ImageReportPair]) -> Trainer {
    let mut t = Trainer::new(cfg, pairs.len()).unwrap();
    t.run_in_memory(pairs).unwrap();
    t
}

#[test]
fn training_is_bitwise_deterministic() {
    let pairs = corpus();
    let a = run(small_config(), &pairs).to_checkpoint().to_bytes();
    let b = run(small_config(), &pairs).to_checkpoint().to_bytes();
    assert_eq!(a, b);
    let mut other = small_config();
    other.seed = 4;
    assert_ne!(a, run(other, &pairs).to_checkpoint().to_bytes());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let pairs = corpus();
    let full = run(small_config(), &pairs);
    for stop in [1, 2, 3] {
        let mut t = Trainer::new(small_config(), pairs.len()).unwrap();
        for _ in 0..stop {
            t.run_epoch(&pairs).unwrap();
        }
        let bytes = t.to_checkpoint().to_bytes();
        drop(t);
        let mut resumed =
            Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), pairs.len())
                .unwrap();
        resumed.run_in_memory(&pairs).unwrap();
        assert_eq!(
            resumed.history, full.history,
            "history differs after resuming at epoch {stop}"
        );
        assert_eq!(
            resumed.to_checkpoint().to_bytes(),
            full.to_checkpoint().to_bytes(),
            "state differs after resuming at epoch {stop}"
        );
    }
}

#[test]
fn run_writes_logs_and_stage_checkpoints() {
    let pairs = corpus();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(small_config(), pairs.len()).unwrap();
    t.run(&pairs, dir.path()).unwrap();
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), 4);
    for s in 1..=3 {
        assert!(dir.path().join(format!("stage{s}.ckpt")).exists());
    }
    let c = Checkpoint::load(&dir.path().join("stage3.ckpt")).unwrap();
    assert_eq!(c.to_bytes(), t.to_checkpoint().to_bytes());
    let model = model_from_checkpoint(&c).unwrap();
    assert_eq!(model.store, t.model.store);
}

#[test]
fn checkpoint_rejects_corruption() {
    let pairs = corpus();
    let mut t = Trainer::new(small_config(), pairs.len()).unwrap();
    t.run_epoch(&pairs).unwrap();
    let bytes = t.to_checkpoint().to_bytes();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 1;
    assert!(Checkpoint::from_bytes(&bad).is_err());
}

#[test]
fn stages_follow_the_epoch_schedule() {
    let t = Trainer::new(small_config(), 20).unwrap();
    assert_eq!(t.steps_per_epoch, 3);
    let stages: Vec<usize> = (0..4).map(|e| t.stage_of(e)).collect();
    assert_eq!(stages, vec![1, 2, 3, 3]);
    assert_eq!(t.temperature_at(0), t.temperature_at(2));
    assert!(t.temperature_at(9) < t.temperature_at(3));
}

#[test]
fn batch_larger_than_corpus_is_clamped() {
    let t = Trainer::new(small_config(), 5).unwrap();
    assert_eq!((t.batch_size, t.steps_per_epoch), (5, 1));
    assert!(Trainer::new(small_config(), 0).is_err());
}

#[test]
fn toggles_select_components_per_stage() {
    let mut cfg = small_config();
    let m = Model::new(cfg.clone()).unwrap();
    let full = [1, 2, 3].map(|s| m.active(s));
    assert_eq!(
        full[0],
        Active {
            lam: true,
            spb: false,
            ccr: false,
            ccr_proto: false
        }
    );
    assert_eq!(
        full[1],
        Active {
            lam: true,
            spb: true,
            ccr: false,
            ccr_proto: false
        }
    );
    assert_eq!(
        full[2],
        Active {
            lam: true,
            spb: true,
            ccr: true,
            ccr_proto: true
        }
    );

    cfg.toggles = Toggles {
        lam: true,
        spb: false,
        ccr: true,
    };
    let m = Model::new(cfg.clone()).unwrap();
    assert_eq!(
        m.active(3),
        Active {
            lam: true,
            spb: false,
            ccr: true,
            ccr_proto: false
        }
    );

    cfg.toggles = Toggles {
        lam: false,
        spb: false,
        ccr: true,
    };
    assert!(Model::new(cfg).is_err());

    let a = Active {
        lam: false,
        spb: true,
        ccr: false,
        ccr_proto: false,
    };
    assert!(a.trainable(Group::Encoder) && a.trainable(Group::Spb));
    assert!(!a.trainable(Group::Lam) && !a.trainable(Group::Ccr));
}

#[test]
fn inactive_groups_do_not_move() {
    let pairs = corpus();
    let mut cfg = small_config();
    cfg.epochs = [2, 0, 0];
    let before = Model::new(cfg.clone()).unwrap();
    let after = run(cfg, &pairs).model;
    for id in before.store.ids() {
        let moved = before.store.get(id) != after.store.get(id);
        match before.store.group(id) {
            Group::Spb | Group::Ccr => {
                assert!(!moved, "{} moved in stage 1", before.store.name(id))
            }
            Group::Encoder => {}
            Group::Lam => {}
        }
    }
}

#[test]
fn adam_first_step_is_signed_lr() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]), Group::Encoder);
    let mut adam = Adam::new(&store, 0.0);
    let g = vec![3.0, -0.25, 0.0];
    adam.step(&mut store, &[Some(Tensor::vector(g.clone()))], 0.1)
        .unwrap();
    // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps).
    let expect: Vec<f64> = [1.0, -2.0, 0.5]
        .iter()
        .zip(&g)
        .map(|(p, gj)| p - 0.1 * gj / (gj.abs() + EPS))
        .collect();
    for (a, b) in store.get(id).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn adam_weight_decay_is_decoupled() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![2.0]), Group::Encoder);
    let mut adam = Adam::new(&store, 0.5);
    adam.step(&mut store, &[Some(Tensor::vector(vec![0.0]))], 0.1)
        .unwrap();
    assert!((store.get(id).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
}

#[test]
fn adam_rejects_non_finite_gradients_without_side_effects() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![1.0, 1.0]), Group::Encoder);
    let mut adam = Adam::new(&store, 0.0);
    let before = (store.clone(), adam.clone());
    assert!(adam
        .step(
            &mut store,
            &[Some(Tensor::vector(vec![1.0, f64::NAN]))],
            0.1
        )
        .is_err());
    assert_eq!(store, before.0);
    assert_eq!(adam, before.1);
}

#[test]
fn cosine_schedule_is_monotone_and_ends_at_zero() {
    let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 3e-4)).collect();
    assert_eq!(lrs[0], 3e-4);
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!(lrs[100].abs() < 1e-18);
    assert!((lrs[50] - 1.5e-4).abs() < 1e-18);
}

#[test]
fn alignment_loss_halves_on_a_small_corpus() {
    let pairs = generate_corpus(64, 21, 0.1).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.epochs = [125, 0, 0];
    let mut model = Model::new(cfg).unwrap();
    let act = model.active(1);
    let mut adam = Adam::new(&model.store, model.config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batches: Vec<Batch> = pairs
        .chunks(16)
        .map(|c| Batch::new(&c.iter().collect::<Vec<_>>()).unwrap())
        .collect();
    let total = 500;
    let mut curve = Vec::with_capacity(total);
    for step in 0..total {
        let batch = &batches[step % batches.len()];
        let mut g = Graph::new();
        let binding = model.store.bind(&mut g, |grp| act.trainable(grp));
        let out = model
            .forward(
                &mut g,
                &binding,
                batch,
                1,
                1.0,
                Some(Noise { rng: &mut rng }),
            )
            .unwrap();
        let v = out.values;
        curve.push(v.g + v.l_i2r + v.l_r2i);
        g.backward(out.total).unwrap();
        let mut grads = binding.grads(&g, &model.store);
        clip_global_norm(&mut grads, model.config.clip_norm);
        let lr = cosine_lr(step, total, model.config.lr);
        adam.step(&mut model.store, &grads, lr).unwrap();
    }
    let at10 = curve[10];
    let best = curve[10..].iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(best <= 0.5 * at10, "step 10: {at10}, best after: {best}");
}

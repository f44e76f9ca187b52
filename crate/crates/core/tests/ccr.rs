use proto_align::autodiff::{Graph, Tensor};
use proto_align::ccr::{mask_rows, match_targets, sample_row_mask};
use proto_align::config::TrainConfig;
use proto_align::model::{Batch, Model, Noise};
use proto_align::optim::{clip_global_norm, Adam};
use proto_align::synth::{generate_corpus, ImageReportPair};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn mask_fraction_matches_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for rate in [0.1, 0.5, 0.8] {
        let m = sample_row_mask(&mut rng, 50_000, rate);
        let frac = m.iter().filter(|&&z| z).count() as f64 / m.len() as f64;
        assert!((frac - rate).abs() < 0.01, "{frac} vs {rate}");
    }
    assert!(sample_row_mask(&mut rng, 100, 0.0).iter().all(|&z| !z));
}

#[test]
fn masked_rows_are_zero_and_others_untouched() {
    let mut g = Graph::new();
    let x =
        g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
    let y = mask_rows(&mut g, x, &[false, true, false]).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
    assert!(mask_rows(&mut g, x, &[true]).is_err());
}

#[test]
fn matching_pads_missing_targets_with_zero_rows() {
    // One sample, two real targets, three slots; slot 2 is already near zero.
    let targets = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let preds = Tensor::from_rows(&[vec![0.0, 0.9], vec![0.05, 0.0], vec![1.1, 0.0]]).unwrap();
    let (rows, assign) = match_targets(&targets, &preds, &[2], 3).unwrap();
    assert_eq!(rows, vec![2, 0]);
    assert_eq!(assign[0].perm, vec![2, 0, 1]);
}

#[test]
fn matching_offsets_rows_per_sample() {
    let targets = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
    let preds = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![3.0], vec![2.0]]).unwrap();
    let (rows, _) = match_targets(&targets, &preds, &[1, 2], 2).unwrap();
    assert_eq!(rows, vec![1, 3, 2]);
    assert!(match_targets(&targets, &preds, &[3], 2).is_err());
}

fn overfit_pairs() -> Vec<ImageReportPair> {
    generate_corpus(64, 21, 0.1).unwrap()
}

#[test]
fn image_reconstruction_overfits_a_small_corpus() {
    let pairs = overfit_pairs();
    let mut cfg = TrainConfig::default();
    cfg.epochs = [0, 0, 125];
    let mut model = Model::new(cfg).unwrap();
    let act = model.active(3);
    let mut adam = Adam::new(&model.store, model.config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batches: Vec<Batch> = pairs
        .chunks(16)
        .map(|c| Batch::new(&c.iter().collect::<Vec<_>>()).unwrap())
        .collect();
    let mut curve = Vec::new();
    for step in 0..500 {
        let batch = &batches[step % batches.len()];
        let mut g = Graph::new();
        let binding = model.store.bind(&mut g, |grp| act.trainable(grp));
        let out = model
            .forward(
                &mut g,
                &binding,
                batch,
                3,
                0.5,
                Some(Noise { rng: &mut rng }),
            )
            .unwrap();
        let ir = out.losses.ir.expect("reconstruction active");
        curve.push(g.value(ir).item());
        g.backward(ir).unwrap();
        let mut grads = binding.grads(&g, &model.store);
        clip_global_norm(&mut grads, model.config.clip_norm);
        adam.step(&mut model.store, &grads, 3e-3).unwrap();
    }
    let windows: Vec<f64> = curve
        .chunks(50)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    for w in windows.windows(2) {
        assert!(w[1] <= w[0], "window means rose: {windows:?}");
    }
    let last = windows[windows.len() - 1];
    assert!(last < 0.05, "final window mean {last}; windows {windows:?}");
}

use proto_align::align::{self, Gate};
use proto_align::autodiff::{Graph, Tensor};
use proto_align::ccr;
use proto_align::nn::segments;
use proto_align::spb;

fn rows(r: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn orthonormal_pair_global_infonce() {
    let mut g = Graph::new();
    let a = g.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = g.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let l = align::global_infonce(&mut g, a, b, 1.0).unwrap();
    let total = g.value(l.image_from_reports).item() + g.value(l.report_from_images).item();
    let expect = 2.0 * (1.0 + (-1.0f64).exp()).ln();
    assert!((total - expect).abs() < 1e-9, "{total} vs {expect}");
}

#[test]
fn local_image_loss_identity_case() {
    let mut g = Graph::new();
    let f = g.constant(rows(&[&[0.3, -1.0, 2.0], &[1.0, 1.0, 0.5]]));
    let l = align::local_r2i(&mut g, f, f, |_, x| Ok(x)).unwrap();
    assert!((g.value(l).item() + 1.0).abs() < 1e-12);
}

#[test]
fn kl_of_skewed_against_uniform() {
    let v = ccr::kl_divergence(&[0.9, 0.1], &[0.5, 0.5]);
    assert!((v - 0.36806).abs() < 1e-5);

    let mut g = Graph::new();
    let q = g.constant(rows(&[&[0.9, 0.1]]));
    let lq = g.log(q);
    let p = g.constant(rows(&[&[0.5, 0.5]]));
    let lp = g.log(p);
    let l = ccr::kl_loss(&mut g, q, lq, &[0], lp).unwrap();
    assert!((g.value(l).item() - 0.36806).abs() < 1e-5);
}

#[test]
fn single_sample_global_losses_are_zero() {
    let mut g = Graph::new();
    let a = g.constant(rows(&[&[0.6, 0.8]]));
    let b = g.constant(rows(&[&[-1.0, 0.0]]));
    let l = align::global_infonce(&mut g, a, b, 0.01).unwrap();
    assert_eq!(g.value(l.image_from_reports).item(), 0.0);
    assert_eq!(g.value(l.report_from_images).item(), 0.0);
    let gpa = ccr::global_prediction_loss(&mut g, a, b, 0.01).unwrap();
    assert_eq!(g.value(gpa).item(), 0.0);
}

#[test]
fn single_sentence_report_loss_is_zero() {
    let mut g = Graph::new();
    let f = g.constant(rows(&[&[1.0, 2.0], &[0.5, -0.5], &[3.0, 1.0]]));
    let c = g.constant(rows(&[&[-1.0, 0.0], &[2.0, 2.0], &[0.0, 1.0]]));
    let l = align::local_i2r(&mut g, f, c, &segments(&[1, 1, 1]), 0.01).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn matching_pairs_give_zero_distance_losses() {
    let mut g = Graph::new();
    let t = rows(&[&[0.2, -0.4], &[1.0, 3.0]]);
    let x = g.constant(t.clone());
    let proto = spb::prototype_loss(&mut g, x, x).unwrap();
    let ir = ccr::reconstruction_loss(&mut g, x, x).unwrap();
    let lq_loss = ccr::query_loss(&mut g, x, &[0, 1], &t).unwrap();
    let q = g.constant(rows(&[&[0.25, 0.75]]));
    let lq = g.log(q);
    let kl = ccr::kl_loss(&mut g, q, lq, &[0], lq).unwrap();
    for v in [proto, ir, lq_loss, kl] {
        assert_eq!(g.value(v).item(), 0.0);
    }
}

#[test]
fn unit_offset_reconstruction_costs_one() {
    let mut g = Graph::new();
    let t = Tensor::new(vec![1, 2, 2, 3], (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
    let shifted =
        Tensor::new(vec![1, 2, 2, 3], t.data().iter().map(|v| v + 1.0).collect()).unwrap();
    let a = g.constant(shifted);
    let b = g.constant(t);
    let l = ccr::reconstruction_loss(&mut g, a, b).unwrap();
    assert!((g.value(l).item() - 1.0).abs() < 1e-15);
}

#[test]
fn zero_attention_scores_give_half_gates() {
    let d = 3;
    let mut g = Graph::new();
    let zero = g.constant(Tensor::zeros(&[d, d]));
    let eye = g.constant(
        Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap(),
    );
    let w = align::AttentionVars {
        q_i: zero,
        k_i: zero,
        v_i: eye,
        q_r: zero,
        k_r: zero,
        v_r: eye,
    };
    let f_li = g.constant(rows(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0]]));
    let f_lr = g.constant(rows(&[&[1.0, 1.0, 0.0], &[0.0, 0.0, 4.0]]));
    let ca =
        align::cross_attention(&mut g, &w, f_li, f_lr, &[0, 0], &[0, 0], Gate::Sigmoid).unwrap();
    assert!(g.value(ca.gates_i).data().iter().all(|&v| v == 0.5));
    for v in 0..2 {
        assert_eq!(g.value(ca.c_li).row(v), &[0.5, 0.5, 2.0]);
    }
}

#[test]
fn softmax_gate_rows_are_convex() {
    let mut g = Graph::new();
    let m = |g: &mut Graph, s: f64| {
        g.constant(Tensor::from_rows(&[vec![s, 0.1], vec![-0.3, s]]).unwrap())
    };
    let w = align::AttentionVars {
        q_i: m(&mut g, 1.0),
        k_i: m(&mut g, 0.7),
        v_i: m(&mut g, 1.2),
        q_r: m(&mut g, 0.4),
        k_r: m(&mut g, -0.9),
        v_r: m(&mut g, 0.8),
    };
    let f_li = g.constant(rows(&[&[1.0, 0.0], &[0.0, 2.0], &[1.0, 1.0]]));
    let f_lr = g.constant(rows(&[&[1.0, -1.0], &[0.5, 0.5], &[2.0, 0.0]]));
    let ca = align::cross_attention(
        &mut g,
        &w,
        f_li,
        f_lr,
        &[0, 0, 1],
        &[0, 0, 1],
        Gate::Softmax,
    )
    .unwrap();
    let gates = g.value(ca.gates_i);
    for v in 0..3 {
        let row = gates.row(v);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(gates.row(2)[0], 0.0);
    assert_eq!(gates.row(0)[2], 0.0);
}

//! Central finite-difference checks of every loss term and of their weighted
//! sum on small random batches.
//!
//! Toy sizes: `B = 2` samples, `M_I = 4` sub-regions, `M_R = 2` sentences,
//! `D = 8`. The image decoder is tied to the `4 x 4` grid, so the two checks
//! that reach it use `M_I = 16`.

use autodiff::{grad_check_many, grad_check_reference, GradCheckReport};
use autodiff::{AutodiffError, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{self, AttentionVars, Gate};
use crate::ccr::{self, ImageDecoder};
use crate::error::Result;
use crate::nn::segments;
use crate::params::ParamStore;
use crate::spb;
use crate::synth::GRID;

pub const B: usize = 2;
pub const M_I: usize = 4;
pub const M_R: usize = 2;
pub const D: usize = 8;
/// Decoder slots in the prototype checks.
pub const U: usize = 3;
pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

const TAU: f64 = 0.5;
const TEMPERATURE: f64 = 0.5;
const LAMBDA_PROTO: f64 = 10.0;
const LAMBDA_RECON: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn lift<T>(r: Result<T>) -> autodiff::Result<T> {
    r.map_err(|e| match e {
        crate::Error::Autodiff(a) => a,
        other => AutodiffError::InvalidArgument {
            op: "gradcheck",
            reason: other.to_string(),
        },
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is consistent")
}

fn attention_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    (0..6).map(|_| random(rng, &[D, D], 0.5)).collect()
}

fn attention_vars(v: &[Var]) -> AttentionVars {
    AttentionVars {
        q_i: v[0],
        k_i: v[1],
        v_i: v[2],
        q_r: v[3],
        k_r: v[4],
        v_r: v[5],
    }
}

/// `x ↦ x + relu(x W1) W2`; the residual keeps every output row nonzero.
fn head(g: &mut Graph, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let h = g.matmul(x, w1)?;
    let h = g.relu(h);
    let h = g.matmul(h, w2)?;
    Ok(g.add(x, h)?)
}

/// Per-term inputs shared by the prototype-decoding checks.
struct ProtoSetup {
    targets: Tensor,
    matched: Vec<usize>,
}

fn proto_setup(q_hat: &Tensor, q_lr: &Tensor) -> Result<ProtoSetup> {
    let counts = vec![M_R; B];
    let (matched, _) = ccr::match_targets(q_lr, q_hat, &counts, U)?;
    Ok(ProtoSetup {
        targets: q_lr.clone(),
        matched,
    })
}

fn check(
    out: &mut Vec<CheckResult>,
    name: &str,
    xs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<()> {
    let report = grad_check_many(|g, v| lift(f(g, v)), xs, STEP, TOLERANCE)?;
    out.push(CheckResult {
        name: name.to_string(),
        report,
    });
    Ok(())
}

/// Like [`check`] with numeric gradients taken from `reference`.
fn check_ref(
    out: &mut Vec<CheckResult>,
    name: &str,
    xs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    reference: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<()> {
    let report = grad_check_reference(
        |g, v| lift(f(g, v)),
        |g, v| lift(reference(g, v)),
        xs,
        STEP,
        TOLERANCE,
    )?;
    out.push(CheckResult {
        name: name.to_string(),
        report,
    });
    Ok(())
}

/// The local image loss with its stop-gradient targets replaced by the
/// constants `f0` and `c0`.
fn r2i_frozen(
    g: &mut Graph,
    f_li: Var,
    c_li: Var,
    h: impl Fn(&mut Graph, Var) -> Result<Var>,
    f0: &Tensor,
    c0: &Tensor,
) -> Result<Var> {
    let hf = h(g, f_li)?;
    let c0 = g.constant(c0.clone());
    let a = g.cosine(hf, c0)?;
    let hc = h(g, c_li)?;
    let f0 = g.constant(f0.clone());
    let b = g.cosine(hc, f0)?;
    let ma = g.mean(a);
    let mb = g.mean(b);
    let s = g.add(ma, mb)?;
    Ok(g.scale(s, -0.5))
}

/// Value of `c_LI` at the given inputs.
fn c_li_at(
    f_li: &Tensor,
    f_lr: &Tensor,
    w: &[Tensor],
    seg_i: &[usize],
    seg_r: &[usize],
    gate: Gate,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let fi = g.constant(f_li.clone());
    let fr = g.constant(f_lr.clone());
    let ws: Vec<Var> = w.iter().map(|t| g.constant(t.clone())).collect();
    let ca = align::cross_attention(&mut g, &attention_vars(&ws), fi, fr, seg_i, seg_r, gate)?;
    Ok(g.value(ca.c_li).clone())
}

/// Runs every check with inputs drawn from `seed`.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seg_i = segments(&[M_I; B]);
    let seg_r = segments(&[M_R; B]);
    let seg_i16 = segments(&[GRID * GRID; B]);
    let mut out = Vec::new();

    let f_lr = random(&mut rng, &[B * M_R, D], 1.0);
    let q_lr = random(&mut rng, &[B * M_R, D], 1.0);
    check(
        &mut out,
        "L_proto",
        &[f_lr.clone(), q_lr.clone()],
        |g, v| spb::prototype_loss(g, v[0], v[1]),
    )?;

    let f_gi = random(&mut rng, &[B, D], 1.0);
    let f_gr = random(&mut rng, &[B, D], 1.0);
    check(&mut out, "L_g", &[f_gi.clone(), f_gr.clone()], |g, v| {
        let a = g.l2_normalize(v[0])?;
        let b = g.l2_normalize(v[1])?;
        let l = align::global_infonce(g, a, b, TAU)?;
        Ok(g.add(l.image_from_reports, l.report_from_images)?)
    })?;

    let f_li = random(&mut rng, &[B * M_I, D], 1.0);
    let w = attention_inputs(&mut rng);
    for gate in [Gate::Sigmoid, Gate::Softmax] {
        let mut xs = vec![f_li.clone(), f_lr.clone()];
        xs.extend(w.iter().cloned());
        let (si, sr) = (seg_i.clone(), seg_r.clone());
        check(&mut out, &format!("L_l_i2r ({gate})"), &xs, move |g, v| {
            let ca =
                align::cross_attention(g, &attention_vars(&v[2..]), v[0], v[1], &si, &sr, gate)?;
            let a = g.l2_normalize(v[1])?;
            let b = g.l2_normalize(ca.c_lr)?;
            align::local_i2r(g, a, b, &sr, TAU)
        })?;
    }

    let w1 = random(&mut rng, &[D, D / 2], 0.7);
    let w2 = random(&mut rng, &[D / 2, D], 0.7);
    for gate in [Gate::Sigmoid, Gate::Softmax] {
        let mut xs = vec![f_li.clone(), f_lr.clone(), w1.clone(), w2.clone()];
        xs.extend(w.iter().cloned());
        let c0 = c_li_at(&f_li, &f_lr, &w, &seg_i, &seg_r, gate)?;
        let (si, sr) = (&seg_i, &seg_r);
        let (f0, c0) = (&f_li, &c0);
        check_ref(
            &mut out,
            &format!("L_l_r2i ({gate})"),
            &xs,
            |g, v| {
                let ca =
                    align::cross_attention(g, &attention_vars(&v[4..]), v[0], v[1], si, sr, gate)?;
                let (w1, w2) = (v[2], v[3]);
                align::local_r2i(g, v[0], ca.c_li, |g, x| head(g, x, w1, w2))
            },
            |g, v| {
                let ca =
                    align::cross_attention(g, &attention_vars(&v[4..]), v[0], v[1], si, sr, gate)?;
                let (w1, w2) = (v[2], v[3]);
                r2i_frozen(g, v[0], ca.c_li, |g, x| head(g, x, w1, w2), f0, c0)
            },
        )?;
    }

    let mut store = ParamStore::new();
    let decoder = ImageDecoder::new(&mut store, &mut rng, 2 * D);
    let cells = B * GRID * GRID;
    let f_li16 = random(&mut rng, &[cells, D], 1.0);
    let c_li16 = random(&mut rng, &[cells, D], 1.0);
    let image = Tensor::new(
        vec![
            B,
            crate::synth::IMAGE_SIZE,
            crate::synth::IMAGE_SIZE,
            crate::synth::CHANNELS,
        ],
        (0..B * crate::synth::IMAGE_LEN)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect(),
    )?;
    let zeroed: Vec<bool> = ccr::sample_row_mask(&mut rng, cells, 0.5);
    {
        let (store, decoder, f_li16, image, zeroed) = (
            &store,
            &decoder,
            f_li16.clone(),
            image.clone(),
            zeroed.clone(),
        );
        check(
            &mut out,
            "L_ir (wrt c_LI)",
            std::slice::from_ref(&c_li16),
            move |g, v| {
                let p = store.bind(g, |_| false);
                let f = g.constant(f_li16.clone());
                let masked = ccr::mask_rows(g, f, &zeroed)?;
                let input = g.concat(&[masked, v[0]], 1)?;
                let recon = decoder.forward(g, &p, input)?;
                let target = g.constant(image.clone());
                ccr::reconstruction_loss(g, recon, target)
            },
        )?;
    }

    let bank = random(&mut rng, &[5, D], 1.0);
    let q_hat = random(&mut rng, &[B * U, D], 1.0);
    let setup = proto_setup(&q_hat, &q_lr)?;
    {
        let s = &setup;
        check(&mut out, "L_q", std::slice::from_ref(&q_hat), move |g, v| {
            ccr::query_loss(g, v[0], &s.matched, &s.targets)
        })?;
        check(
            &mut out,
            "L_kl",
            &[q_hat.clone(), q_lr.clone(), bank.clone()],
            move |g, v| {
                let pred = spb::query(g, v[0], v[2], TEMPERATURE, None)?;
                let rep = spb::query(g, v[1], v[2], TEMPERATURE, None)?;
                ccr::kl_loss(g, pred.probs, pred.log_probs, &s.matched, rep.log_probs)
            },
        )?;
    }

    let p_gr = random(&mut rng, &[B, D], 1.0);
    check(&mut out, "L_gpa", &[p_gr.clone(), f_gr.clone()], |g, v| {
        let a = g.l2_normalize(v[0])?;
        let b = g.l2_normalize(v[1])?;
        ccr::global_prediction_loss(g, a, b, TAU)
    })?;

    // Inputs: f_gi, f_gr, f_li (16 cells), f_lr, q_lr, q_hat, bank, p_gr,
    // w1, w2, then the six attention matrices.
    let mut xs = vec![
        f_gi.clone(),
        f_gr.clone(),
        f_li16.clone(),
        f_lr.clone(),
        q_lr.clone(),
        q_hat.clone(),
        bank.clone(),
        p_gr.clone(),
        w1.clone(),
        w2.clone(),
    ];
    xs.extend(w.iter().cloned());
    let c0 = c_li_at(&f_li16, &f_lr, &w, &seg_i16, &seg_r, Gate::Sigmoid)?;
    let total = |g: &mut Graph, v: &[Var], frozen: bool| -> Result<Var> {
        let n_gi = g.l2_normalize(v[0])?;
        let n_gr = g.l2_normalize(v[1])?;
        let global = align::global_infonce(g, n_gi, n_gr, TAU)?;
        let ca = align::cross_attention(
            g,
            &attention_vars(&v[10..]),
            v[2],
            v[3],
            &seg_i16,
            &seg_r,
            Gate::Sigmoid,
        )?;
        let n_lr = g.l2_normalize(v[3])?;
        let n_clr = g.l2_normalize(ca.c_lr)?;
        let i2r = align::local_i2r(g, n_lr, n_clr, &seg_r, TAU)?;
        let (w1, w2) = (v[8], v[9]);
        let r2i = if frozen {
            r2i_frozen(g, v[2], ca.c_li, |g, x| head(g, x, w1, w2), &f_li16, &c0)?
        } else {
            align::local_r2i(g, v[2], ca.c_li, |g, x| head(g, x, w1, w2))?
        };
        let proto = spb::prototype_loss(g, v[3], v[4])?;

        let p = store.bind(g, |_| false);
        let masked = ccr::mask_rows(g, v[2], &zeroed)?;
        let input = g.concat(&[masked, ca.c_li], 1)?;
        let recon = decoder.forward(g, &p, input)?;
        let target = g.constant(image.clone());
        let ir = ccr::reconstruction_loss(g, recon, target)?;
        let q = ccr::query_loss(g, v[5], &setup.matched, &setup.targets)?;
        let pred = spb::query(g, v[5], v[6], TEMPERATURE, None)?;
        let rep = spb::query(g, v[4], v[6], TEMPERATURE, None)?;
        let kl = ccr::kl_loss(g, pred.probs, pred.log_probs, &setup.matched, rep.log_probs)?;
        let n_pgr = g.l2_normalize(v[7])?;
        let gpa = ccr::global_prediction_loss(g, n_pgr, n_gr, TAU)?;

        let mut align_sum = g.add(global.image_from_reports, global.report_from_images)?;
        align_sum = g.add(align_sum, i2r)?;
        align_sum = g.add(align_sum, r2i)?;
        let proto = g.scale(proto, LAMBDA_PROTO);
        let mut recon_sum = g.add(ir, q)?;
        recon_sum = g.add(recon_sum, kl)?;
        recon_sum = g.add(recon_sum, gpa)?;
        let recon_sum = g.scale(recon_sum, LAMBDA_RECON);
        let sum = g.add(align_sum, proto)?;
        Ok(g.add(sum, recon_sum)?)
    };
    check_ref(
        &mut out,
        "L_total",
        &xs,
        |g, v| total(g, v, false),
        |g, v| total(g, v, true),
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let results = run_all(7).unwrap();
        for r in &results {
            assert!(
                r.passed(),
                "{}: max rel error {:e}",
                r.name,
                r.report.max_rel_error
            );
        }
    }
}

//! Global contrastive alignment and the gated local alignment module.
//!
//! Every function here works on a whole batch at once. Ragged per-sample sets
//! (sub-regions, sentences) are stacked row-wise and tagged with a segment id;
//! segment masks keep each sample's attention and negatives inside the sample.

use autodiff::{Graph, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{masked_softmax, segment_bias, segment_mask, Mlp};
use crate::params::{glorot, Binding, Group, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gate {
    Sigmoid,
    Softmax,
}

impl std::str::FromStr for Gate {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sigmoid" => Ok(Gate::Sigmoid),
            "softmax" => Ok(Gate::Softmax),
            other => Err(format!(
                "unknown gate '{other}' (expected sigmoid or softmax)"
            )),
        }
    }
}

impl std::fmt::Display for Gate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Gate::Sigmoid => "sigmoid",
            Gate::Softmax => "softmax",
        })
    }
}

/// The six `D x D` attention matrices; each acts as `x ↦ M x` on row vectors.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub q_i: ParamId,
    pub k_i: ParamId,
    pub v_i: ParamId,
    pub q_r: ParamId,
    pub k_r: ParamId,
    pub v_r: ParamId,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize) -> Self {
        let mut m = |name: &str| {
            store.add(
                format!("lam.{name}"),
                glorot(rng, &[d, d], d, d),
                Group::Lam,
            )
        };
        Self {
            q_i: m("q_i"),
            k_i: m("k_i"),
            v_i: m("v_i"),
            q_r: m("q_r"),
            k_r: m("k_r"),
            v_r: m("v_r"),
        }
    }

    pub fn bind(&self, p: &Binding) -> AttentionVars {
        AttentionVars {
            q_i: p.var(self.q_i),
            k_i: p.var(self.k_i),
            v_i: p.var(self.v_i),
            q_r: p.var(self.q_r),
            k_r: p.var(self.k_r),
            v_r: p.var(self.v_r),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub q_i: Var,
    pub k_i: Var,
    pub v_i: Var,
    pub q_r: Var,
    pub k_r: Var,
    pub v_r: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    /// Report-to-image representation per sub-region, `[rows_i, D]`.
    pub c_li: Var,
    /// Image-to-report representation per sentence, `[rows_r, D]`.
    pub c_lr: Var,
    /// Sub-region by sentence weights, zero across samples, `[rows_i, rows_r]`.
    pub gates_i: Var,
    /// Sentence by sub-region weights, zero across samples, `[rows_r, rows_i]`.
    pub gates_r: Var,
}

/// Gated cross-attention in both directions.
///
/// `seg_i[v]` and `seg_r[u]` name the sample owning each row.
pub fn cross_attention(
    g: &mut Graph,
    w: &AttentionVars,
    f_li: Var,
    f_lr: Var,
    seg_i: &[usize],
    seg_r: &[usize],
    gate: Gate,
) -> Result<CrossAttention> {
    let d = g.value(f_li).last_dim();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let qi = g.matmul_nt(f_li, w.q_i)?;
    let ki = g.matmul_nt(f_lr, w.k_i)?;
    let vi = g.matmul_nt(f_lr, w.v_i)?;
    let s_i = g.matmul_nt(qi, ki)?;
    let s_i = g.scale(s_i, inv_sqrt_d);
    let gates_i = apply_gate(g, s_i, seg_i, seg_r, gate)?;
    let c_li = g.matmul(gates_i, vi)?;

    let qr = g.matmul_nt(f_lr, w.q_r)?;
    let kr = g.matmul_nt(f_li, w.k_r)?;
    let vr = g.matmul_nt(f_li, w.v_r)?;
    let s_r = g.matmul_nt(qr, kr)?;
    let s_r = g.scale(s_r, inv_sqrt_d);
    let gates_r = apply_gate(g, s_r, seg_r, seg_i, gate)?;
    let c_lr = g.matmul(gates_r, vr)?;

    Ok(CrossAttention {
        c_li,
        c_lr,
        gates_i,
        gates_r,
    })
}

fn apply_gate(
    g: &mut Graph,
    scores: Var,
    rows: &[usize],
    cols: &[usize],
    gate: Gate,
) -> Result<Var> {
    match gate {
        Gate::Sigmoid => {
            let s = g.sigmoid(scores);
            Ok(g.mask(s, &segment_mask(rows, cols))?)
        }
        Gate::Softmax => masked_softmax(g, scores, &segment_bias(rows, cols)),
    }
}

/// The two directions of the symmetric batch InfoNCE.
#[derive(Debug, Clone, Copy)]
pub struct GlobalLoss {
    /// Each image against all reports.
    pub image_from_reports: Var,
    /// Each report against all images.
    pub report_from_images: Var,
}

/// Symmetric InfoNCE over the `B x B` dot-product matrix, each direction
/// averaged over the batch.
pub fn global_infonce(g: &mut Graph, f_gi: Var, f_gr: Var, tau: f64) -> Result<GlobalLoss> {
    let b = g.value(f_gi).outer();
    let logits = g.matmul_nt(f_gi, f_gr)?;
    let logits = g.scale(logits, 1.0 / tau);
    let image_from_reports = neg_mean_diag_log_softmax(g, logits, b)?;
    let t = g.transpose(logits)?;
    let report_from_images = neg_mean_diag_log_softmax(g, t, b)?;
    Ok(GlobalLoss {
        image_from_reports,
        report_from_images,
    })
}

/// `-(1/n) Σ_i log_softmax(logits)[i, i]` for a square `[n, n]` matrix.
pub fn neg_mean_diag_log_softmax(g: &mut Graph, logits: Var, n: usize) -> Result<Var> {
    let ls = g.log_softmax(logits);
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let d = g.gather(ls, &diag)?;
    let s = g.sum(d);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Sentence-level InfoNCE with negatives drawn only from the same report,
/// averaged over every sentence in the batch.
pub fn local_i2r(g: &mut Graph, f_lr: Var, c_lr: Var, seg_r: &[usize], tau: f64) -> Result<Var> {
    let n = seg_r.len();
    let logits = g.matmul_nt(f_lr, c_lr)?;
    let logits = g.scale(logits, 1.0 / tau);
    let bias = g.constant(segment_bias(seg_r, seg_r));
    let logits = g.add(logits, bias)?;
    neg_mean_diag_log_softmax(g, logits, n)
}

/// Symmetric negative-free cosine loss with stop-gradient targets and an
/// asymmetric head `h`, averaged over sub-regions.
pub fn local_r2i<H>(g: &mut Graph, f_li: Var, c_li: Var, h: H) -> Result<Var>
where
    H: Fn(&mut Graph, Var) -> Result<Var>,
{
    let hf = h(g, f_li)?;
    let sc = g.stop_gradient(c_li);
    let a = g.cosine(hf, sc)?;
    let hc = h(g, c_li)?;
    let sf = g.stop_gradient(f_li);
    let b = g.cosine(hc, sf)?;
    let ma = g.mean(a);
    let mb = g.mean(b);
    let s = g.add(ma, mb)?;
    Ok(g.scale(s, -0.5))
}

/// The asymmetric prediction head `h`: `D → D/2 → D`.
pub fn asymmetric_head(store: &mut ParamStore, rng: &mut impl Rng, d: usize) -> Mlp {
    Mlp::new(store, rng, "lam.h", d, (d / 2).max(1), d, Group::Lam)
}

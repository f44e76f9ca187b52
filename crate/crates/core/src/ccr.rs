//! Cross-modality conditional reconstruction: masked image reconstruction and
//! parallel prototype decoding with bipartite-matched losses.

use autodiff::{Graph, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::matching::{hungarian, CostMatrix, MatchAssignment};
use crate::nn::{masked_softmax, segment_bias, Linear, Mlp};
use crate::params::{glorot, normal, Binding, Group, ParamId, ParamStore};
use crate::synth::{CHANNELS, GRID, IMAGE_SIZE};

/// Independent Bernoulli row dropout; `true` marks a zeroed row.
pub fn sample_row_mask(rng: &mut impl Rng, rows: usize, rate: f64) -> Vec<bool> {
    (0..rows).map(|_| rng.gen::<f64>() < rate).collect()
}

/// Zeroes the marked rows of `x`.
pub fn mask_rows(g: &mut Graph, x: Var, zeroed: &[bool]) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let c = g.value(x).last_dim();
    if zeroed.len() != g.value(x).outer() {
        return Err(Error::invalid(format!(
            "row mask has {} entries for {} rows",
            zeroed.len(),
            g.value(x).outer()
        )));
    }
    let data = zeroed
        .iter()
        .flat_map(|&z| std::iter::repeat_n(if z { 0.0 } else { 1.0 }, c))
        .collect();
    let m = Tensor::new(shape, data)?;
    Ok(g.mask(x, &m)?)
}

/// Upsampling conv stack from the `4 x 4` grid back to the image: a block at
/// grid resolution, then one block per `2x` upsampling, two `3 x 3` convs each.
#[derive(Debug, Clone)]
pub struct ImageDecoder {
    /// `(weight, bias, upsample_before)` per conv.
    pub convs: Vec<(ParamId, ParamId, bool)>,
    pub in_channels: usize,
}

impl ImageDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, in_channels: usize) -> Self {
        let layers = [
            (in_channels, 32, false),
            (32, 32, false),
            (32, 32, true),
            (32, 16, false),
            (16, 16, true),
            (16, 16, false),
            (16, 16, true),
            (16, CHANNELS, false),
        ];
        let convs = layers
            .iter()
            .enumerate()
            .map(|(l, &(ci, co, up))| {
                let weight = store.add(
                    format!("ccr.image_decoder.conv{l}.weight"),
                    glorot(rng, &[co, ci, 3, 3], ci * 9, co * 9),
                    Group::Ccr,
                );
                let bias = store.add(
                    format!("ccr.image_decoder.conv{l}.bias"),
                    Tensor::zeros(&[co]),
                    Group::Ccr,
                );
                (weight, bias, up)
            })
            .collect();
        Self { convs, in_channels }
    }

    /// `features: [B * M_I, in_channels]` to an image batch `[B, H, W, C]`;
    /// the output is linear so an untrained decoder starts near a dark image.
    pub fn forward(&self, g: &mut Graph, p: &Binding, features: Var) -> Result<Var> {
        let rows = g.value(features).outer();
        let cells = GRID * GRID;
        if !rows.is_multiple_of(cells) || g.value(features).last_dim() != self.in_channels {
            return Err(Error::invalid(format!(
                "image decoder expects [B * {cells}, {}], got {:?}",
                self.in_channels,
                g.value(features).shape()
            )));
        }
        let b = rows / cells;
        let x = g.reshape(features, &[b, GRID, GRID, self.in_channels])?;
        let mut x = g.permute(x, &[0, 3, 1, 2])?;
        let last = self.convs.len() - 1;
        for (l, &(w, bias, up)) in self.convs.iter().enumerate() {
            if up {
                x = g.upsample2x(x)?;
            }
            x = g.conv2d(x, p.var(w), Some(p.var(bias)), 1, 1)?;
            if l < last {
                x = g.relu(x);
            }
        }
        debug_assert_eq!(g.value(x).shape()[2], IMAGE_SIZE);
        Ok(g.permute(x, &[0, 2, 3, 1])?)
    }
}

/// Mean absolute error over every pixel of the batch.
pub fn reconstruction_loss(g: &mut Graph, output: Var, target: Var) -> Result<Var> {
    let d = g.sub(output, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

#[derive(Debug, Clone, Copy)]
struct AttentionBlock {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

impl AttentionBlock {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        let mut m = |n: &str| {
            store.add(
                format!("{name}.{n}"),
                glorot(rng, &[d, d], d, d),
                Group::Ccr,
            )
        };
        Self {
            wq: m("wq"),
            wk: m("wk"),
            wv: m("wv"),
            wo: m("wo"),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Binding, x: Var, mem: Var, bias: &Tensor) -> Result<Var> {
        let d = g.value(x).last_dim();
        let q = g.matmul(x, p.var(self.wq))?;
        let k = g.matmul(mem, p.var(self.wk))?;
        let v = g.matmul(mem, p.var(self.wv))?;
        let s = g.matmul_nt(q, k)?;
        let s = g.scale(s, 1.0 / (d as f64).sqrt());
        let a = masked_softmax(g, s, bias)?;
        let o = g.matmul(a, v)?;
        Ok(g.matmul(o, p.var(self.wo))?)
    }
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: AttentionBlock,
    cross_attn: AttentionBlock,
    mlp: Mlp,
}

/// Parallel decoder: `U` learned queries, each layer applying self-attention,
/// cross-attention onto the sub-region features, and an MLP, all pre-norm
/// residual.
#[derive(Debug, Clone)]
pub struct PrototypeDecoder {
    pub queries: ParamId,
    layers: Vec<DecoderLayer>,
    head: Linear,
    pub slots: usize,
}

impl PrototypeDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        d: usize,
        slots: usize,
        depth: usize,
    ) -> Self {
        let queries = store.add(
            "ccr.decoder.queries",
            normal(rng, &[slots, d], 1.0),
            Group::Ccr,
        );
        let layers = (0..depth)
            .map(|l| DecoderLayer {
                self_attn: AttentionBlock::new(store, rng, &format!("ccr.decoder.{l}.self"), d),
                cross_attn: AttentionBlock::new(store, rng, &format!("ccr.decoder.{l}.cross"), d),
                mlp: Mlp::new(
                    store,
                    rng,
                    &format!("ccr.decoder.{l}.mlp"),
                    d,
                    d,
                    d,
                    Group::Ccr,
                ),
            })
            .collect();
        let head = Linear::new(store, rng, "ccr.decoder.head", d, d, true, Group::Ccr);
        Self {
            queries,
            layers,
            head,
            slots,
        }
    }

    /// Querying embeddings `q̂`, `[B * U, D]`, slot-major within each sample.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        f_li: Var,
        seg_i: &[usize],
        batch: usize,
    ) -> Result<Var> {
        let q = p.var(self.queries);
        let mut x = if batch == 1 {
            q
        } else {
            g.concat(&vec![q; batch], 0)?
        };
        let seg_q: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::repeat_n(b, self.slots))
            .collect();
        let self_bias = segment_bias(&seg_q, &seg_q);
        let cross_bias = segment_bias(&seg_q, seg_i);
        for layer in &self.layers {
            let h = g.layer_norm(x);
            let h = layer.self_attn.forward(g, p, h, h, &self_bias)?;
            x = g.add(x, h)?;
            let h = g.layer_norm(x);
            let h = layer.cross_attn.forward(g, p, h, f_li, &cross_bias)?;
            x = g.add(x, h)?;
            let h = g.layer_norm(x);
            let h = layer.mlp.forward(g, p, h)?;
            x = g.add(x, h)?;
        }
        let h = g.layer_norm(x);
        self.head.forward(g, p, h)
    }
}

/// Per-sample optimal assignment of real targets (zero-padded to `U`) to
/// prediction slots under L1 cost.
///
/// `targets` are `[Σ M_R, D]` rows, sample-major; `predictions` are
/// `[B * U, D]`. Returns, for every real target row, the matched prediction
/// row, plus the per-sample assignments.
pub fn match_targets(
    targets: &Tensor,
    predictions: &Tensor,
    sentence_counts: &[usize],
    slots: usize,
) -> Result<(Vec<usize>, Vec<MatchAssignment>)> {
    let d = targets.last_dim();
    let zero = vec![0.0; d];
    let mut rows = Vec::with_capacity(targets.outer());
    let mut assignments = Vec::with_capacity(sentence_counts.len());
    let mut start = 0;
    for (b, &m) in sentence_counts.iter().enumerate() {
        if m == 0 {
            return Err(Error::invalid(format!(
                "sample {b} has no sentences to match"
            )));
        }
        if m > slots {
            return Err(Error::invalid(format!(
                "sample {b} has {m} sentences but only {slots} slots"
            )));
        }
        let cost: Vec<Vec<f64>> = (0..slots)
            .map(|t| {
                let target = if t < m {
                    targets.row(start + t)
                } else {
                    &zero[..]
                };
                (0..slots)
                    .map(|j| {
                        let pred = predictions.row(b * slots + j);
                        target.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum()
                    })
                    .collect()
            })
            .collect();
        let assignment = hungarian(&CostMatrix::new(cost)?);
        rows.extend(assignment.perm[..m].iter().map(|&j| b * slots + j));
        assignments.push(assignment);
        start += m;
    }
    Ok((rows, assignments))
}

/// `L_q`: L1 distance between matched predictions and their targets, averaged
/// over real sentences.
pub fn query_loss(g: &mut Graph, q_hat: Var, matched: &[usize], targets: &Tensor) -> Result<Var> {
    let pred = g.gather_rows(q_hat, matched)?;
    let t = g.constant(targets.clone());
    let d = g.sub(pred, t)?;
    let l1 = g.l1_norm(d);
    Ok(g.scale(l1, 1.0 / matched.len() as f64))
}

/// `KL(q ‖ p) = Σ q (log q − log p)` for matched slots, averaged over real
/// sentences. Row `u` of `log_p` belongs to the sentence matched to slot
/// `matched[u]`; gradients reach both distributions.
pub fn kl_loss(g: &mut Graph, q: Var, log_q: Var, matched: &[usize], log_p: Var) -> Result<Var> {
    let qm = g.gather_rows(q, matched)?;
    let lqm = g.gather_rows(log_q, matched)?;
    let diff = g.sub(lqm, log_p)?;
    let prod = g.mul(qm, diff)?;
    let s = g.sum(prod);
    Ok(g.scale(s, 1.0 / matched.len() as f64))
}

/// `KL(q ‖ p)` for plain probability vectors.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi.ln() - pi.ln()))
        .sum()
}

/// `L_gpa`: each predicted global against all real report globals, only the
/// report-side softmax, normalized by the batch size.
pub fn global_prediction_loss(g: &mut Graph, p_gr: Var, f_gr: Var, tau: f64) -> Result<Var> {
    let b = g.value(p_gr).outer();
    let logits = g.matmul_nt(p_gr, f_gr)?;
    let logits = g.scale(logits, 1.0 / tau);
    crate::align::neg_mean_diag_log_softmax(g, logits, b)
}

//! From-scratch image and report encoders, attention pooling, and the four
//! projection heads into the common space.

use autodiff::{Graph, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{masked_softmax, segment_bias, Mlp};
use crate::params::{glorot, normal, Binding, Group, ParamId, ParamStore};
use crate::synth::{Token, CHANNELS, GRID, IMAGE_SIZE};

/// Single-head attention pooling with one learned query.
#[derive(Debug, Clone, Copy)]
pub struct AttentionPool {
    pub query: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    /// `[segments, C]`.
    pub out: Var,
    /// `[segments, rows]`, zero outside each segment.
    pub weights: Var,
}

impl AttentionPool {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        group: Group,
    ) -> Self {
        Self {
            query: store.add(
                format!("{name}.query"),
                normal(rng, &[1, dim], 1.0 / (dim as f64).sqrt()),
                group,
            ),
            wk: store.add(
                format!("{name}.wk"),
                glorot(rng, &[dim, dim], dim, dim),
                group,
            ),
            wv: store.add(
                format!("{name}.wv"),
                glorot(rng, &[dim, dim], dim, dim),
                group,
            ),
            dim,
        }
    }

    /// Pools the rows of each segment; `seg[r]` is the segment of row `r`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        rows: Var,
        seg: &[usize],
        segments: usize,
    ) -> Result<Pooled> {
        attention_pool(
            g,
            p.var(self.query),
            p.var(self.wk),
            p.var(self.wv),
            rows,
            seg,
            segments,
        )
    }
}

/// `softmax(q (X Wk)ᵀ / √C) (X Wv)` evaluated per segment.
pub fn attention_pool(
    g: &mut Graph,
    query: Var,
    wk: Var,
    wv: Var,
    rows: Var,
    seg: &[usize],
    segments: usize,
) -> Result<Pooled> {
    let n = g.value(rows).outer();
    if n == 0 || seg.len() != n {
        return Err(Error::invalid(format!(
            "attention pool needs one segment id per row, got {} ids for {n} rows",
            seg.len()
        )));
    }
    if let Some(s) = (0..segments).find(|s| !seg.contains(s)) {
        return Err(Error::invalid(format!(
            "attention pool segment {s} has no rows"
        )));
    }
    let c = g.value(rows).last_dim();
    let keys = g.matmul(rows, wk)?;
    let values = g.matmul(rows, wv)?;
    let scores = g.matmul_nt(query, keys)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
    let ones = g.constant(Tensor::full(&[segments, 1], 1.0));
    let tiled = g.matmul(ones, scores)?;
    let ids: Vec<usize> = (0..segments).collect();
    let weights = masked_softmax(g, tiled, &segment_bias(&ids, seg))?;
    let out = g.matmul(weights, values)?;
    Ok(Pooled { out, weights })
}

/// Three stride-2 3x3 convolutions from `32 x 32` down to the `4 x 4` grid.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub convs: Vec<(ParamId, ParamId)>,
    /// Learned per-sub-region offset, zero at initialization.
    pub position: ParamId,
    pub channels: usize,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, c_i: usize) -> Self {
        let widths = [CHANNELS, 16, 32, c_i];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (ci, co) = (w[0], w[1]);
                let weight = store.add(
                    format!("image.conv{l}.weight"),
                    glorot(rng, &[co, ci, 3, 3], ci * 9, co * 9),
                    Group::Encoder,
                );
                let bias = store.add(
                    format!("image.conv{l}.bias"),
                    Tensor::zeros(&[co]),
                    Group::Encoder,
                );
                (weight, bias)
            })
            .collect();
        let position = store.add(
            "image.position",
            Tensor::zeros(&[GRID * GRID, c_i]),
            Group::Encoder,
        );
        Self {
            convs,
            position,
            channels: c_i,
        }
    }

    /// `images: [B, H, W, C]` to local features `[B * M_I, C_I]`, sample-major,
    /// sub-region `row * 4 + col` within a sample.
    pub fn forward(&self, g: &mut Graph, p: &Binding, images: Var) -> Result<Var> {
        let shape = g.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1..] != [IMAGE_SIZE, IMAGE_SIZE, CHANNELS] {
            return Err(Error::invalid(format!(
                "image batch must be [B, {IMAGE_SIZE}, {IMAGE_SIZE}, {CHANNELS}], got {shape:?}"
            )));
        }
        let b = shape[0];
        let mut x = g.permute(images, &[0, 3, 1, 2])?;
        for &(w, bias) in &self.convs {
            x = g.conv2d(x, p.var(w), Some(p.var(bias)), 2, 1)?;
            x = g.relu(x);
        }
        let x = g.permute(x, &[0, 2, 3, 1])?;
        let x = g.reshape(x, &[b * GRID * GRID, self.channels])?;
        let pos = p.var(self.position);
        let tiled = if b == 1 {
            pos
        } else {
            g.concat(&vec![pos; b], 0)?
        };
        Ok(g.add(x, tiled)?)
    }
}

/// Token embedding, one residual self-attention mixer confined to each
/// sentence, then attention pooling per sentence.
#[derive(Debug, Clone, Copy)]
pub struct ReportEncoder {
    pub embedding: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub pool: AttentionPool,
    pub vocab: usize,
    pub channels: usize,
}

impl ReportEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, vocab: usize, c_r: usize) -> Self {
        let mut sq = |name: &str, store: &mut ParamStore| {
            store.add(
                format!("report.{name}"),
                glorot(rng, &[c_r, c_r], c_r, c_r),
                Group::Encoder,
            )
        };
        let wq = sq("wq", store);
        let wk = sq("wk", store);
        let wv = sq("wv", store);
        let wo = sq("wo", store);
        let embedding = store.add(
            "report.embedding",
            normal(rng, &[vocab, c_r], 1.0),
            Group::Encoder,
        );
        let pool = AttentionPool::new(store, rng, "report.sentence_pool", c_r, Group::Encoder);
        Self {
            embedding,
            wq,
            wk,
            wv,
            wo,
            pool,
            vocab,
            channels: c_r,
        }
    }

    /// Sentence embeddings `[sentences.len(), C_R]`.
    pub fn forward(&self, g: &mut Graph, p: &Binding, sentences: &[&[Token]]) -> Result<Var> {
        if sentences.is_empty() {
            return Err(Error::invalid("report has no sentences"));
        }
        let mut tokens = Vec::new();
        let mut seg = Vec::new();
        for (u, s) in sentences.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::invalid(format!("sentence {u} is empty")));
            }
            for &t in s.iter() {
                if t as usize >= self.vocab {
                    return Err(Error::invalid(format!(
                        "token {t} outside vocabulary of {}",
                        self.vocab
                    )));
                }
                tokens.push(t as usize);
                seg.push(u);
            }
        }
        let e = g.gather_rows(p.var(self.embedding), &tokens)?;
        let q = g.matmul(e, p.var(self.wq))?;
        let k = g.matmul(e, p.var(self.wk))?;
        let v = g.matmul(e, p.var(self.wv))?;
        let s = g.matmul_nt(q, k)?;
        let s = g.scale(s, 1.0 / (self.channels as f64).sqrt());
        let a = masked_softmax(g, s, &segment_bias(&seg, &seg))?;
        let mixed = g.matmul(a, v)?;
        let mixed = g.matmul(mixed, p.var(self.wo))?;
        let h = g.add(e, mixed)?;
        Ok(self.pool.forward(g, p, h, &seg, sentences.len())?.out)
    }
}

/// The four independent projection MLPs.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionHeads {
    pub global_image: Mlp,
    pub local_image: Mlp,
    pub local_report: Mlp,
    pub global_report: Mlp,
}

impl ProjectionHeads {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        c_i: usize,
        c_r: usize,
        d: usize,
    ) -> Self {
        Self {
            global_image: Mlp::new(store, rng, "head.global_image", c_i, d, d, Group::Encoder)
                .zero_output_bias(store),
            local_image: Mlp::new(store, rng, "head.local_image", c_i, d, d, Group::Encoder)
                .zero_output_bias(store),
            local_report: Mlp::new(store, rng, "head.local_report", c_r, d, d, Group::Encoder)
                .zero_output_bias(store),
            global_report: Mlp::new(store, rng, "head.global_report", d, d, d, Group::Encoder)
                .zero_output_bias(store),
        }
    }
}

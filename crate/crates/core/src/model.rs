//! The full model: parameters, the batched forward pass, and the weighted
//! objective for each training stage.

use autodiff::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{self, AttentionParams, Gate};
use crate::ccr::{self, ImageDecoder, PrototypeDecoder};
use crate::config::TrainConfig;
use crate::encoders::{AttentionPool, ImageEncoder, ProjectionHeads, ReportEncoder};
use crate::error::{Error, Result};
use crate::nn::{segments, Mlp};
use crate::params::{Binding, Group, ParamId, ParamStore};
use crate::spb;
use crate::synth::{vocab, ImageReportPair, Token, CHANNELS, GRID, IMAGE_LEN, IMAGE_SIZE};

pub const REGIONS: usize = GRID * GRID;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub image: ImageEncoder,
    pub report: ReportEncoder,
    pub pool_i: AttentionPool,
    pub pool_r: AttentionPool,
    pub heads: ProjectionHeads,
    pub attention: AttentionParams,
    pub h: Mlp,
    pub bank: ParamId,
    pub image_decoder: ImageDecoder,
    pub proto_decoder: PrototypeDecoder,
}

/// Components switched on for a given stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Active {
    pub lam: bool,
    pub spb: bool,
    pub ccr: bool,
    /// Prototype branch of the reconstruction; needs the bank.
    pub ccr_proto: bool,
}

impl Active {
    pub fn trainable(&self, group: Group) -> bool {
        match group {
            Group::Encoder => true,
            Group::Lam => self.lam,
            Group::Spb => self.spb,
            Group::Ccr => self.ccr,
        }
    }
}

/// A batch in canonical sentence order.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, H, W, C]`.
    pub images: Tensor,
    pub sentences: Vec<Vec<Token>>,
    /// Sentence count of each report.
    pub counts: Vec<usize>,
}

impl Batch {
    pub fn new(pairs: &[&ImageReportPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("batch is empty"));
        }
        let mut data = Vec::with_capacity(pairs.len() * IMAGE_LEN);
        let mut sentences = Vec::new();
        let mut counts = Vec::with_capacity(pairs.len());
        for p in pairs {
            if p.image.len() != IMAGE_LEN {
                return Err(Error::invalid(format!(
                    "pair {} has {} pixels",
                    p.id,
                    p.image.len()
                )));
            }
            data.extend_from_slice(&p.image);
            let c = p.canonical();
            counts.push(c.sentences.len());
            sentences.extend(c.sentences);
        }
        let images = Tensor::new(vec![pairs.len(), IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data)?;
        Ok(Self {
            images,
            sentences,
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Stochastic inputs for one training forward pass.
pub struct Noise<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

/// Each loss term, `None` when its component is inactive.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossVars {
    pub g_image: Option<Var>,
    pub g_report: Option<Var>,
    pub l_i2r: Option<Var>,
    pub l_r2i: Option<Var>,
    pub proto: Option<Var>,
    pub ir: Option<Var>,
    pub q: Option<Var>,
    pub kl: Option<Var>,
    pub gpa: Option<Var>,
}

/// Scalar values of the loss terms; inactive terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub g: f64,
    pub l_i2r: f64,
    pub l_r2i: f64,
    pub proto: f64,
    pub ir: f64,
    pub q: f64,
    pub kl: f64,
    pub gpa: f64,
    pub total: f64,
}

impl LossValues {
    /// `L_align + λp L_proto + λr L_recon` from the components.
    pub fn recompose(&self, lambda_proto: f64, lambda_recon: f64) -> f64 {
        self.g
            + self.l_i2r
            + self.l_r2i
            + lambda_proto * self.proto
            + lambda_recon * (self.ir + self.q + self.kl + self.gpa)
    }

    pub fn scaled_add(&mut self, other: &LossValues, w: f64) {
        self.g += w * other.g;
        self.l_i2r += w * other.l_i2r;
        self.l_r2i += w * other.l_r2i;
        self.proto += w * other.proto;
        self.ir += w * other.ir;
        self.q += w * other.q;
        self.kl += w * other.kl;
        self.gpa += w * other.gpa;
        self.total += w * other.total;
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub losses: LossVars,
    pub total: Var,
    pub values: LossValues,
    /// Hard prototype index per sentence when the bank is active.
    pub indices: Option<Vec<usize>>,
    /// Sentences whose hard index equals the argmax of `p_K`.
    pub agreement: usize,
    /// Sentence queries `q_LR`.
    pub queries: Tensor,
}

impl Model {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let m = config.model.clone();
        let d = m.dim;
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(&mut store, &mut rng, m.c_i);
        let report = ReportEncoder::new(&mut store, &mut rng, vocab::SIZE, m.c_r);
        let pool_i = AttentionPool::new(&mut store, &mut rng, "image.pool", m.c_i, Group::Encoder);
        let pool_r = AttentionPool::new(
            &mut store,
            &mut rng,
            "report.global_pool",
            d,
            Group::Encoder,
        );
        let heads = ProjectionHeads::new(&mut store, &mut rng, m.c_i, m.c_r, d);
        let attention = AttentionParams::new(&mut store, &mut rng, d);
        let h = align::asymmetric_head(&mut store, &mut rng, d);
        let bank = store.add(
            "spb.bank",
            spb::init_bank(&mut rng, m.bank_size, d),
            Group::Spb,
        );
        let image_decoder = ImageDecoder::new(&mut store, &mut rng, 2 * d);
        let proto_decoder =
            PrototypeDecoder::new(&mut store, &mut rng, d, m.queries, m.decoder_layers);
        Ok(Self {
            config,
            store,
            image,
            report,
            pool_i,
            pool_r,
            heads,
            attention,
            h,
            bank,
            image_decoder,
            proto_decoder,
        })
    }

    pub fn active(&self, stage: usize) -> Active {
        let t = self.config.toggles;
        let spb = t.spb && stage >= 2;
        let ccr = t.ccr && t.lam && stage >= 3;
        Active {
            lam: t.lam,
            spb,
            ccr,
            ccr_proto: ccr && spb,
        }
    }

    fn normalize(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.config.normalize_embeddings {
            Ok(g.l2_normalize(x)?)
        } else {
            Ok(x)
        }
    }

    /// Sentence queries `q_LR`, on the unit sphere when embeddings are
    /// normalized.
    pub fn sentence_queries(
        &self,
        g: &mut Graph,
        p: &Binding,
        sentences: &[&[Token]],
    ) -> Result<Var> {
        let pre = self.report.forward(g, p, sentences)?;
        let q = self.heads.local_report.forward(g, p, pre)?;
        self.normalize(g, q)
    }

    /// Builds the stage objective for `batch` on `g`.
    ///
    /// `noise` supplies the Gumbel draws and the reconstruction mask; without
    /// it the bank relaxation is noise-free and no rows are masked.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        batch: &Batch,
        stage: usize,
        temperature: f64,
        mut noise: Option<Noise<'_>>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let act = self.active(stage);
        let b = batch.len();
        let seg_i = segments(&vec![REGIONS; b]);
        let seg_r = segments(&batch.counts);
        let n_sent = batch.sentences.len();
        if batch
            .counts
            .iter()
            .any(|&c| c > cfg.model.queries && act.ccr_proto)
        {
            return Err(Error::invalid(format!(
                "a report has more sentences than the {} decoder queries",
                cfg.model.queries
            )));
        }

        let images = g.constant(batch.images.clone());
        let local_raw = self.image.forward(g, p, images)?;
        let pooled_i = self.pool_i.forward(g, p, local_raw, &seg_i, b)?.out;
        let f_gi = self.heads.global_image.forward(g, p, pooled_i)?;
        let f_li = self.heads.local_image.forward(g, p, local_raw)?;

        let refs: Vec<&[Token]> = batch.sentences.iter().map(|s| s.as_slice()).collect();
        let q_lr = self.sentence_queries(g, p, &refs)?;

        let mut losses = LossVars::default();
        let bank = p.var(self.bank);
        let (f_lr, report_query) = if act.spb {
            let gumbel = match noise.as_mut() {
                Some(n) if cfg.gumbel_noise > 0.0 => Some(spb::gumbel_noise(
                    n.rng,
                    &[n_sent, cfg.model.bank_size],
                    cfg.gumbel_noise,
                )),
                _ => None,
            };
            let qo = spb::query(g, q_lr, bank, temperature, gumbel.as_ref())?;
            losses.proto = Some(spb::prototype_loss(g, qo.hard, q_lr)?);
            (qo.quantized, Some(qo))
        } else {
            (q_lr, None)
        };

        let pooled_r = self.pool_r.forward(g, p, f_lr, &seg_r, b)?.out;
        let f_gr = self.heads.global_report.forward(g, p, pooled_r)?;
        let n_gi = self.normalize(g, f_gi)?;
        let n_gr = self.normalize(g, f_gr)?;
        let global = align::global_infonce(g, n_gi, n_gr, cfg.tau1)?;
        losses.g_image = Some(global.image_from_reports);
        losses.g_report = Some(global.report_from_images);

        if act.lam {
            let w = self.attention.bind(p);
            let ca = align::cross_attention(g, &w, f_li, f_lr, &seg_i, &seg_r, cfg.gate)?;
            let n_lr = self.normalize(g, f_lr)?;
            let n_clr = self.normalize(g, ca.c_lr)?;
            losses.l_i2r = Some(align::local_i2r(g, n_lr, n_clr, &seg_r, cfg.tau2)?);
            let h = self.h;
            losses.l_r2i = Some(align::local_r2i(g, f_li, ca.c_li, |g, x| {
                h.forward(g, p, x)
            })?);

            if act.ccr {
                let zeroed = match noise.as_mut() {
                    Some(n) => ccr::sample_row_mask(n.rng, b * REGIONS, cfg.model.mask_rate),
                    None => vec![false; b * REGIONS],
                };
                let masked = ccr::mask_rows(g, f_li, &zeroed)?;
                let input = g.concat(&[masked, ca.c_li], 1)?;
                let recon = self.image_decoder.forward(g, p, input)?;
                losses.ir = Some(ccr::reconstruction_loss(g, recon, images)?);
            }
            if act.ccr_proto {
                let qo = report_query.as_ref().expect("bank active");
                let q_hat = self.proto_decoder.forward(g, p, f_li, &seg_i, b)?;
                let pred = spb::query(g, q_hat, bank, temperature, None)?;
                let seg_q = segments(&vec![cfg.model.queries; b]);
                let pooled = self.pool_r.forward(g, p, pred.quantized, &seg_q, b)?.out;
                let p_gr = self.heads.global_report.forward(g, p, pooled)?;

                let targets = g.value(qo.hard).clone();
                let (matched, _) =
                    ccr::match_targets(&targets, g.value(q_hat), &batch.counts, cfg.model.queries)?;
                losses.q = Some(ccr::query_loss(g, q_hat, &matched, &targets)?);
                losses.kl = Some(ccr::kl_loss(
                    g,
                    pred.probs,
                    pred.log_probs,
                    &matched,
                    qo.log_probs,
                )?);
                let n_pgr = self.normalize(g, p_gr)?;
                losses.gpa = Some(ccr::global_prediction_loss(g, n_pgr, n_gr, cfg.tau3)?);
            }
        }

        let (total, values) = self.combine(g, &losses)?;
        let (indices, agreement) = match &report_query {
            Some(qo) => {
                let soft = spb::argmax_rows(g.value(qo.probs));
                let agree = soft.iter().zip(&qo.indices).filter(|(a, b)| a == b).count();
                (Some(qo.indices.clone()), agree)
            }
            None => (None, 0),
        };
        Ok(ForwardOutput {
            losses,
            total,
            values,
            indices,
            agreement,
            queries: g.value(q_lr).clone(),
        })
    }

    /// Weighted sum of the active terms.
    pub fn combine(&self, g: &mut Graph, l: &LossVars) -> Result<(Var, LossValues)> {
        let cfg = &self.config;
        let val = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let mut terms: Vec<(Var, f64)> = Vec::new();
        for v in [l.g_image, l.g_report, l.l_i2r, l.l_r2i]
            .into_iter()
            .flatten()
        {
            terms.push((v, 1.0));
        }
        if let Some(v) = l.proto {
            terms.push((v, cfg.lambda_proto));
        }
        for v in [l.ir, l.q, l.kl, l.gpa].into_iter().flatten() {
            terms.push((v, cfg.lambda_recon));
        }
        let mut total: Option<Var> = None;
        for (v, w) in terms {
            let t = if w == 1.0 { v } else { g.scale(v, w) };
            total = Some(match total {
                Some(acc) => g.add(acc, t)?,
                None => t,
            });
        }
        let total = total.expect("global loss is always active");
        let values = LossValues {
            g: val(g, l.g_image) + val(g, l.g_report),
            l_i2r: val(g, l.l_i2r),
            l_r2i: val(g, l.l_r2i),
            proto: val(g, l.proto),
            ir: val(g, l.ir),
            q: val(g, l.q),
            kl: val(g, l.kl),
            gpa: val(g, l.gpa),
            total: g.value(total).item(),
        };
        Ok((total, values))
    }

    pub fn gate(&self) -> Gate {
        self.config.gate
    }
}

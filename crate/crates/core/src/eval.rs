//! Zero-shot classification, retrieval, attention localization, and bank
//! clustering on held-out pairs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use autodiff::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::Gate;
use crate::error::{Error, Result};
use crate::model::{Model, REGIONS};
use crate::nn::segments;
use crate::spb;
use crate::synth::{
    self, parse_sentence, ImageReportPair, Meaning, Parsed, Shape, Token, CHANNELS, IMAGE_SIZE,
};

pub const RETRIEVAL_KS: [usize; 4] = [1, 2, 5, 10];
const CHUNK: usize = 64;

/// Projected embeddings of a set of pairs, in canonical sentence order.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub dim: usize,
    /// `[n * 16, D]`.
    pub f_li: Tensor,
    /// `[n, D]`.
    pub f_gi: Tensor,
    /// `[Σ M_R, D]`, after the bank when it is enabled.
    pub f_lr: Tensor,
    /// `[n, D]`.
    pub f_gr: Tensor,
    pub counts: Vec<usize>,
    /// Bank index per sentence when the bank is enabled.
    pub prototypes: Option<Vec<usize>>,
}

impl Embeddings {
    pub fn sentence_offset(&self, pair: usize) -> usize {
        self.counts[..pair].iter().sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rows of `x · Mᵀ`.
fn project(x: &Tensor, m: &Tensor) -> Vec<Vec<f64>> {
    let d = m.shape()[0];
    (0..x.outer())
        .map(|i| (0..d).map(|j| dot(x.row(i), m.row(j))).collect())
        .collect()
}

impl Model {
    fn eval_graph(&self) -> (Graph, crate::params::Binding) {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, |_| false);
        (g, p)
    }

    /// Whether evaluation routes sentences through the bank.
    pub fn uses_bank(&self) -> bool {
        self.config.toggles.spb
    }

    /// Final relaxation temperature; only the distribution, never the
    /// hard choice, depends on it.
    pub fn eval_temperature(&self) -> f64 {
        spb::TEMPERATURE_END
    }

    /// Sentence embeddings `f_LR` and, with the bank, their prototype indices.
    pub fn embed_sentences(
        &self,
        sentences: &[Vec<Token>],
        quantize: bool,
    ) -> Result<(Tensor, Option<Vec<usize>>)> {
        let d = self.config.model.dim;
        let mut rows = Vec::with_capacity(sentences.len() * d);
        let mut indices = Vec::new();
        for chunk in sentences.chunks(CHUNK * 4) {
            let (mut g, p) = self.eval_graph();
            let refs: Vec<&[Token]> = chunk.iter().map(|s| s.as_slice()).collect();
            let q = self.sentence_queries(&mut g, &p, &refs)?;
            if quantize {
                let bank = p.var(self.bank);
                let qo = spb::query(&mut g, q, bank, self.eval_temperature(), None)?;
                rows.extend_from_slice(g.value(qo.quantized).data());
                indices.extend(qo.indices);
            } else {
                rows.extend_from_slice(g.value(q).data());
            }
        }
        let t = Tensor::new(vec![sentences.len(), d], rows)?;
        Ok((t, quantize.then_some(indices)))
    }

    /// `f_GR` for reports given their stacked sentence embeddings.
    pub fn report_globals(&self, f_lr: &Tensor, counts: &[usize]) -> Result<Tensor> {
        let (mut g, p) = self.eval_graph();
        let x = g.constant(f_lr.clone());
        let pooled = self
            .pool_r
            .forward(&mut g, &p, x, &segments(counts), counts.len())?
            .out;
        let f = self.heads.global_report.forward(&mut g, &p, pooled)?;
        Ok(g.value(f).clone())
    }

    /// Local and global image embeddings for a list of `[H, W, C]` images.
    pub fn embed_images(&self, images: &[&[f64]]) -> Result<(Tensor, Tensor)> {
        let d = self.config.model.dim;
        let mut local = Vec::with_capacity(images.len() * REGIONS * d);
        let mut global = Vec::with_capacity(images.len() * d);
        for chunk in images.chunks(CHUNK) {
            let (mut g, p) = self.eval_graph();
            let data: Vec<f64> = chunk.iter().flat_map(|im| im.iter().copied()).collect();
            let t = Tensor::new(vec![chunk.len(), IMAGE_SIZE, IMAGE_SIZE, CHANNELS], data)?;
            let x = g.constant(t);
            let raw = self.image.forward(&mut g, &p, x)?;
            let seg = segments(&vec![REGIONS; chunk.len()]);
            let pooled = self.pool_i.forward(&mut g, &p, raw, &seg, chunk.len())?.out;
            let gi = self.heads.global_image.forward(&mut g, &p, pooled)?;
            let li = self.heads.local_image.forward(&mut g, &p, raw)?;
            local.extend_from_slice(g.value(li).data());
            global.extend_from_slice(g.value(gi).data());
        }
        Ok((
            Tensor::new(vec![images.len() * REGIONS, d], local)?,
            Tensor::new(vec![images.len(), d], global)?,
        ))
    }

    pub fn embed(&self, pairs: &[ImageReportPair]) -> Result<Embeddings> {
        let canon: Vec<ImageReportPair> = pairs.iter().map(|p| p.canonical()).collect();
        let images: Vec<&[f64]> = canon.iter().map(|p| p.image.as_slice()).collect();
        let (f_li, f_gi) = self.embed_images(&images)?;
        let sentences: Vec<Vec<Token>> = canon
            .iter()
            .flat_map(|p| p.sentences.iter().cloned())
            .collect();
        let counts: Vec<usize> = canon.iter().map(|p| p.sentences.len()).collect();
        let (f_lr, prototypes) = self.embed_sentences(&sentences, self.uses_bank())?;
        let f_gr = self.report_globals(&f_lr, &counts)?;
        Ok(Embeddings {
            dim: self.config.model.dim,
            f_li,
            f_gi,
            f_lr,
            f_gr,
            counts,
            prototypes,
        })
    }

    /// Report-to-image attention weights of each sentence over an image's 16
    /// sub-regions: `gates[k][v]` for `k` in `sentences`.
    pub fn region_gates(&self, f_li: &[f64], sentences: &[&[f64]]) -> Vec<Vec<f64>> {
        let d = self.config.model.dim;
        let qi = self.store.get(self.attention.q_i);
        let ki = self.store.get(self.attention.k_i);
        let regions = Tensor::new(vec![REGIONS, d], f_li.to_vec()).expect("region rows");
        let q = project(&regions, qi);
        let rows: Vec<f64> = sentences.iter().flat_map(|s| s.iter().copied()).collect();
        let k = project(
            &Tensor::new(vec![sentences.len(), d], rows).expect("sentence rows"),
            ki,
        );
        let scale = 1.0 / (d as f64).sqrt();
        let per_region: Vec<Vec<f64>> = q
            .iter()
            .map(|qv| {
                let scores: Vec<f64> = k.iter().map(|ku| dot(qv, ku) * scale).collect();
                match self.config.gate {
                    Gate::Sigmoid => scores.iter().map(|&s| sigmoid(s)).collect(),
                    Gate::Softmax => softmax(&scores),
                }
            })
            .collect();
        (0..sentences.len())
            .map(|u| (0..REGIONS).map(|v| per_region[v][u]).collect())
            .collect()
    }
}

/// Fraction of a sentence's gate mass inside its ground-truth regions.
pub fn localization_fraction(gates: &[f64], truth: &[usize]) -> f64 {
    let total: f64 = gates.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    truth.iter().map(|&r| gates[r]).sum::<f64>() / total
}

/// Mean over meaning groups of the modal-prototype share.
pub fn purity<K: std::hash::Hash + Eq + Ord + Clone>(assignments: &[(K, usize)]) -> f64 {
    let mut groups: HashMap<K, HashMap<usize, usize>> = HashMap::new();
    for (k, p) in assignments {
        *groups.entry(k.clone()).or_default().entry(*p).or_default() += 1;
    }
    if groups.is_empty() {
        return 0.0;
    }
    let mut keys: Vec<&K> = groups.keys().collect();
    keys.sort();
    let sum: f64 = keys
        .iter()
        .map(|k| {
            let counts = &groups[*k];
            let total: usize = counts.values().sum();
            *counts.values().max().expect("nonempty") as f64 / total as f64
        })
        .sum();
    sum / groups.len() as f64
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    spb::argmax(v)
}

/// Ranking by descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Fraction of the top `k` pool entries whose label equals `query_label`.
pub fn precision_at_k(
    scores: &[f64],
    pool_labels: &[usize],
    query_label: usize,
    k: usize,
) -> Result<f64> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!(
            "K = {k} with a pool of {}",
            scores.len()
        )));
    }
    let r = ranking(scores);
    Ok(r[..k]
        .iter()
        .filter(|&&j| pool_labels[j] == query_label)
        .count() as f64
        / k as f64)
}

/// Precision@1 of uniformly random rankings, estimated by sampling.
pub fn random_precision_at_1(
    query_labels: &[usize],
    pool_labels: &[usize],
    trials: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        let q = query_labels.choose(&mut rng).expect("queries");
        let j = rng.gen_range(0..pool_labels.len());
        hits += (pool_labels[j] == *q) as usize;
    }
    hits as f64 / trials as f64
}

/// Softmax-normalized global similarity plus softmax-normalized gate mass.
pub fn combined_scores(global: &[f64], local: &[f64]) -> Vec<f64> {
    softmax(global)
        .iter()
        .zip(softmax(local))
        .map(|(a, b)| a + b)
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Per-class precision/recall/F1 from predictions.
pub fn class_stats(truth: &[usize], pred: &[usize], classes: usize) -> Vec<ClassStats> {
    (0..classes)
        .map(|c| {
            let tp = truth
                .iter()
                .zip(pred)
                .filter(|(&t, &p)| t == c && p == c)
                .count() as f64;
            let fp = truth
                .iter()
                .zip(pred)
                .filter(|(&t, &p)| t != c && p == c)
                .count() as f64;
            let fn_ = truth
                .iter()
                .zip(pred)
                .filter(|(&t, &p)| t == c && p != c)
                .count() as f64;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassStats {
                precision,
                recall,
                f1,
                support: truth.iter().filter(|&&t| t == c).count(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub zero_shot_pairs: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub precision: f64,
    pub per_class: Vec<ClassStats>,
    /// `(K, Precision@K)` for each K the pool allows.
    pub precision_at: Vec<(usize, f64)>,
    pub random_precision_at_1: f64,
    pub localization: f64,
    pub localized_sentences: usize,
    pub purity: Option<f64>,
    pub paraphrase_agreement: Option<f64>,
    pub distinct_prototypes: Option<usize>,
    pub degenerate_bank: bool,
    pub mean_pairwise_cosine: f64,
}

impl EvalReport {
    pub fn precision_at(&self, k: usize) -> Option<f64> {
        self.precision_at
            .iter()
            .find(|(kk, _)| *kk == k)
            .map(|(_, v)| *v)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}: {v}").expect("string write");
        kv("zero_shot_pairs", self.zero_shot_pairs.to_string());
        kv("accuracy", self.accuracy.to_string());
        kv("macro_f1", self.macro_f1.to_string());
        kv("precision", self.precision.to_string());
        for (c, st) in self.per_class.iter().enumerate() {
            let name = Shape::ALL[c].name();
            kv(&format!("class_{name}_precision"), st.precision.to_string());
            kv(&format!("class_{name}_recall"), st.recall.to_string());
            kv(&format!("class_{name}_f1"), st.f1.to_string());
            kv(&format!("class_{name}_support"), st.support.to_string());
        }
        for (k, v) in &self.precision_at {
            kv(&format!("precision_at_{k}"), v.to_string());
        }
        kv(
            "random_precision_at_1",
            self.random_precision_at_1.to_string(),
        );
        kv("localization", self.localization.to_string());
        kv("localized_sentences", self.localized_sentences.to_string());
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| x.to_string());
        kv("purity", opt(self.purity));
        kv("paraphrase_agreement", opt(self.paraphrase_agreement));
        kv(
            "distinct_prototypes",
            self.distinct_prototypes
                .map_or("n/a".into(), |v| v.to_string()),
        );
        kv("degenerate_bank", self.degenerate_bank.to_string());
        kv(
            "mean_pairwise_cosine",
            self.mean_pairwise_cosine.to_string(),
        );
        s
    }
}

/// Zero-shot class scores for one image given prompt embeddings.
pub fn zero_shot_scores(
    model: &Model,
    f_gi: &[f64],
    f_li: &[f64],
    prompt_globals: &Tensor,
    prompt_locals: &Tensor,
) -> Vec<f64> {
    let global: Vec<f64> = (0..prompt_globals.outer())
        .map(|c| cosine(f_gi, prompt_globals.row(c)))
        .collect();
    let rows: Vec<&[f64]> = (0..prompt_locals.outer())
        .map(|c| prompt_locals.row(c))
        .collect();
    let gates = model.region_gates(f_li, &rows);
    let local: Vec<f64> = gates
        .iter()
        .map(|g| g.iter().sum::<f64>() / REGIONS as f64)
        .collect();
    combined_scores(&global, &local)
}

/// Prompt sentence and global embeddings.
pub fn prompt_embeddings(model: &Model) -> Result<(Tensor, Tensor)> {
    let prompts = synth::prompts();
    let quantize = model.uses_bank() && model.config.quantize_prompts;
    let (locals, _) = model.embed_sentences(&prompts, quantize)?;
    let globals = model.report_globals(&locals, &vec![1; prompts.len()])?;
    Ok((locals, globals))
}

/// Runs every metric on `pairs`.
pub fn evaluate(model: &Model, pairs: &[ImageReportPair], seed: u64) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let canon: Vec<ImageReportPair> = pairs.iter().map(|p| p.canonical()).collect();
    let emb = model.embed(&canon)?;
    let d = emb.dim;
    let li = |i: usize| &emb.f_li.data()[i * REGIONS * d..(i + 1) * REGIONS * d];

    // Zero-shot on pairs showing a single shape class.
    let exclusive: Vec<(usize, usize)> = canon
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.exclusive_label().map(|c| (i, c)))
        .collect();
    let (p_loc, p_glob) = prompt_embeddings(model)?;
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for &(i, c) in &exclusive {
        let s = zero_shot_scores(model, emb.f_gi.row(i), li(i), &p_glob, &p_loc);
        truth.push(c);
        pred.push(argmax(&s));
    }
    let n_zs = exclusive.len();
    let accuracy = if n_zs > 0 {
        truth.iter().zip(&pred).filter(|(a, b)| a == b).count() as f64 / n_zs as f64
    } else {
        0.0
    };
    let per_class = class_stats(&truth, &pred, synth::NUM_CLASSES);
    let present: Vec<&ClassStats> = per_class.iter().filter(|s| s.support > 0).collect();
    let macro_f1 = mean(present.iter().map(|s| s.f1));
    let precision = mean(present.iter().map(|s| s.precision));

    // Retrieval: exclusive images against exclusive reports.
    let pool_labels: Vec<usize> = exclusive.iter().map(|&(_, c)| c).collect();
    let mut precision_at = Vec::new();
    let mut random_p1 = 0.0;
    if !exclusive.is_empty() {
        let mut sums = vec![0.0; RETRIEVAL_KS.len()];
        let pool_sentences: Vec<Vec<&[f64]>> = exclusive
            .iter()
            .map(|&(j, _)| {
                let off = emb.sentence_offset(j);
                (off..off + emb.counts[j])
                    .map(|u| emb.f_lr.row(u))
                    .collect()
            })
            .collect();
        for &(i, c) in &exclusive {
            let global: Vec<f64> = exclusive
                .iter()
                .map(|&(j, _)| cosine(emb.f_gi.row(i), emb.f_gr.row(j)))
                .collect();
            let local: Vec<f64> = pool_sentences
                .iter()
                .map(|rows| {
                    let gates = model.region_gates(li(i), rows);
                    gates.iter().flatten().sum::<f64>() / (REGIONS * rows.len()) as f64
                })
                .collect();
            let scores = combined_scores(&global, &local);
            for (s, &k) in sums.iter_mut().zip(&RETRIEVAL_KS) {
                if k <= scores.len() {
                    *s += precision_at_k(&scores, &pool_labels, c, k)?;
                }
            }
        }
        for (s, &k) in sums.iter().zip(&RETRIEVAL_KS) {
            if k <= pool_labels.len() {
                precision_at.push((k, s / n_zs as f64));
            }
        }
        random_p1 = random_precision_at_1(&pool_labels, &pool_labels, 10_000, seed);
    }

    // Localization over every finding sentence.
    let mut loc_sum = 0.0;
    let mut loc_n = 0usize;
    for (i, p) in canon.iter().enumerate() {
        let off = emb.sentence_offset(i);
        let rows: Vec<&[f64]> = (off..off + emb.counts[i])
            .map(|u| emb.f_lr.row(u))
            .collect();
        let gates = model.region_gates(li(i), &rows);
        for (u, truth) in p.gt_alignment.iter().enumerate() {
            if truth.is_empty() {
                continue;
            }
            loc_sum += localization_fraction(&gates[u], truth);
            loc_n += 1;
        }
    }
    let localization = if loc_n > 0 {
        loc_sum / loc_n as f64
    } else {
        0.0
    };

    // Bank clustering.
    let (purity_v, agreement, distinct, degenerate) = match &emb.prototypes {
        Some(idx) => bank_metrics(model, &canon, idx)?,
        None => (None, None, None, false),
    };

    Ok(EvalReport {
        zero_shot_pairs: n_zs,
        accuracy,
        macro_f1,
        precision,
        per_class,
        precision_at,
        random_precision_at_1: random_p1,
        localization,
        localized_sentences: loc_n,
        purity: purity_v,
        paraphrase_agreement: agreement,
        distinct_prototypes: distinct,
        degenerate_bank: degenerate,
        mean_pairwise_cosine: mean_pairwise_cosine(&emb.f_gi),
    })
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

type BankMetrics = (Option<f64>, Option<f64>, Option<usize>, bool);

fn bank_metrics(model: &Model, canon: &[ImageReportPair], idx: &[usize]) -> Result<BankMetrics> {
    let mut assignments: Vec<(Meaning, usize)> = Vec::new();
    let mut meanings = Vec::new();
    for (sent, &k) in canon.iter().flat_map(|p| p.sentences.iter()).zip(idx) {
        if let Some(Parsed::Finding(m, _)) = parse_sentence(sent) {
            assignments.push((m, k));
            meanings.push(m);
        }
    }
    let mut distinct: Vec<usize> = assignments.iter().map(|&(_, k)| k).collect();
    distinct.sort_unstable();
    distinct.dedup();

    // Each finding sentence against its other-template rendering.
    let all = Meaning::all();
    let mut pairs_tokens = Vec::with_capacity(all.len() * 2);
    for m in &all {
        pairs_tokens.push(m.canonical());
        pairs_tokens.push(m.paraphrase());
    }
    let (_, proto) = model.embed_sentences(&pairs_tokens, true)?;
    let proto = proto.expect("quantized");
    let same: HashMap<Meaning, bool> = all
        .iter()
        .enumerate()
        .map(|(i, &m)| (m, proto[2 * i] == proto[2 * i + 1]))
        .collect();
    let agreement = if meanings.is_empty() {
        None
    } else {
        Some(meanings.iter().filter(|m| same[m]).count() as f64 / meanings.len() as f64)
    };
    let degenerate = distinct.len() <= 1;
    if degenerate {
        log::warn!("prototype bank is degenerate: all sentences share one prototype");
    }
    Ok((
        (!assignments.is_empty()).then(|| purity(&assignments)),
        agreement,
        Some(distinct.len()),
        degenerate,
    ))
}

/// Mean cosine over all distinct pairs of rows.
pub fn mean_pairwise_cosine(x: &Tensor) -> f64 {
    let n = x.outer();
    if n < 2 {
        return 1.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += cosine(x.row(i), x.row(j));
        }
    }
    s / (n * (n - 1) / 2) as f64
}

/// Writes `id,label,f0..` rows of global image embeddings; the label is the
/// multi-hot shape string.
pub fn export_embeddings(model: &Model, pairs: &[ImageReportPair], path: &Path) -> Result<()> {
    let images: Vec<&[f64]> = pairs.iter().map(|p| p.image.as_slice()).collect();
    let (_, f_gi) = model.embed_images(&images)?;
    let d = model.config.model.dim;
    let mut out = String::new();
    let header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    writeln!(out, "id,label,{}", header.join(",")).expect("string write");
    for (i, p) in pairs.iter().enumerate() {
        let label: String = p.labels.iter().map(|l| l.to_string()).collect();
        let vals: Vec<String> = f_gi.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{},{}", p.id, label, vals.join(",")).expect("string write");
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_gates_localize_a_quarter() {
        let gates = vec![0.5; 16];
        assert!((localization_fraction(&gates, &[0, 1, 4, 5]) - 0.25).abs() < 1e-15);
        let mut inside = vec![0.0; 16];
        inside[2] = 0.3;
        inside[3] = 0.9;
        assert_eq!(localization_fraction(&inside, &[2, 3, 6, 7]), 1.0);
    }

    #[test]
    fn purity_of_unique_mapping_is_one() {
        let a = vec![("a", 0), ("a", 0), ("b", 1)];
        assert_eq!(purity(&a), 1.0);
        let b = vec![("a", 0), ("a", 1), ("a", 1), ("a", 1)];
        assert_eq!(purity(&b), 0.75);
    }

    #[test]
    fn precision_at_k_rejects_oversized_k() {
        assert!(precision_at_k(&[0.1], &[0], 0, 2).is_err());
        assert_eq!(precision_at_k(&[0.1], &[0], 0, 1).unwrap(), 1.0);
    }

    #[test]
    fn ranking_breaks_ties_low() {
        assert_eq!(ranking(&[0.5, 0.9, 0.9]), vec![1, 2, 0]);
    }
}

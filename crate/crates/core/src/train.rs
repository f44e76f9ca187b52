//! Three-stage optimization with per-epoch metrics and stage checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use autodiff::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Entry};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Batch, LossValues, Model, Noise};
use crate::optim::{clip_global_norm, cosine_lr, Adam};
use crate::spb::{self, anneal_temperature, TEMPERATURE_START};
use crate::synth::ImageReportPair;

pub const METRICS_HEADER: &str =
    "epoch,stage,L_g,L_l_i2r,L_l_r2i,L_proto,L_ir,L_q,L_kl,L_gpa,total,lr,gumbel_temp";
pub const SPB_HEADER: &str = "epoch,stage,sentences,hard_soft_agree,distinct_prototypes";

/// One epoch's averaged losses and schedule values.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub losses: LossValues,
    pub lr: f64,
    pub gumbel_temp: f64,
    /// Sentences that passed through the bank this epoch.
    pub sentences: usize,
    /// Of those, how many had matching hard and soft argmax.
    pub agree: usize,
    pub distinct_prototypes: usize,
}

impl EpochRecord {
    pub fn metrics_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.stage,
            l.g,
            l.l_i2r,
            l.l_r2i,
            l.proto,
            l.ir,
            l.q,
            l.kl,
            l.gpa,
            l.total,
            self.lr,
            self.gumbel_temp
        )
    }

    pub fn spb_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.stage, self.sentences, self.agree, self.distinct_prototypes
        )
    }
}

/// Training state: everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    /// Optimizer steps taken.
    pub step: usize,
    /// Epochs completed.
    pub epoch: usize,
    /// Steps rejected for non-finite gradients.
    pub rejected_steps: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, train_size: usize) -> Result<Self> {
        let model = Model::new(config)?;
        let adam = Adam::new(&model.store, model.config.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x5e_ed0f_7a1e);
        Self::assemble(model, adam, rng, train_size)
    }

    fn assemble(model: Model, adam: Adam, rng: ChaCha8Rng, train_size: usize) -> Result<Self> {
        if train_size == 0 {
            return Err(Error::invalid("training corpus is empty"));
        }
        let mut batch_size = model.config.batch_size;
        if train_size < batch_size {
            log::warn!(
                "corpus has {train_size} pairs, clamping batch size {batch_size} to {train_size}"
            );
            batch_size = train_size;
        }
        let steps_per_epoch = train_size.div_ceil(batch_size);
        Ok(Self {
            model,
            adam,
            step: 0,
            epoch: 0,
            rejected_steps: 0,
            rng,
            history: Vec::new(),
            batch_size,
            steps_per_epoch,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.config().total_epochs()
    }

    pub fn total_epochs(&self) -> usize {
        self.config().total_epochs()
    }

    /// Stage (1-based) of the given 0-based epoch.
    pub fn stage_of(&self, epoch: usize) -> usize {
        let [e1, e2, _] = self.config().epochs;
        if epoch < e1 {
            1
        } else if epoch < e1 + e2 {
            2
        } else {
            3
        }
    }

    /// Gumbel temperature: linear over the steps of stages 2 and 3.
    pub fn temperature_at(&self, step: usize) -> f64 {
        let [e1, e2, e3] = self.config().epochs;
        let start = e1 * self.steps_per_epoch;
        if step < start {
            return TEMPERATURE_START;
        }
        anneal_temperature(step - start, (e2 + e3) * self.steps_per_epoch)
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.total_epochs()
    }

    /// Runs one epoch over `pairs` in a freshly shuffled order.
    pub fn run_epoch(&mut self, pairs: &[ImageReportPair]) -> Result<EpochRecord> {
        let stage = self.stage_of(self.epoch);
        let act = self.model.active(stage);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut self.rng);
        let lr0 = self.config().lr;
        let clip = self.config().clip_norm;
        let total_steps = self.total_steps();
        let first_lr = cosine_lr(self.step, total_steps, lr0);
        let first_temp = self.temperature_at(self.step);

        let mut sums = LossValues::default();
        let mut seen = 0usize;
        let (mut sentences, mut agree) = (0usize, 0usize);
        let mut used = vec![false; self.config().model.bank_size];
        let mut queries: Vec<f64> = Vec::new();
        for chunk in order.chunks(self.batch_size) {
            let refs: Vec<&ImageReportPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let batch = Batch::new(&refs)?;
            let lr = cosine_lr(self.step, total_steps, lr0);
            let temperature = self.temperature_at(self.step);
            let mut g = Graph::new();
            let binding = self.model.store.bind(&mut g, |grp| act.trainable(grp));
            let out = self.model.forward(
                &mut g,
                &binding,
                &batch,
                stage,
                temperature,
                Some(Noise { rng: &mut self.rng }),
            )?;
            g.backward(out.total)?;
            let mut grads = binding.grads(&g, &self.model.store);
            clip_global_norm(&mut grads, clip);
            match self.adam.step(&mut self.model.store, &grads, lr) {
                Ok(()) => {}
                Err(e) => {
                    log::warn!("step {} rejected: {e}", self.step);
                    self.rejected_steps += 1;
                }
            }
            self.step += 1;
            sums.scaled_add(&out.values, batch.len() as f64);
            seen += batch.len();
            if let Some(idx) = &out.indices {
                sentences += idx.len();
                agree += out.agreement;
                idx.iter().for_each(|&k| used[k] = true);
            }
            queries.extend_from_slice(out.queries.data());
        }
        let distinct = used.iter().filter(|&&u| u).count();
        let next_uses_bank = self.epoch + 1 < self.config().total_epochs()
            && self.model.active(self.stage_of(self.epoch + 1)).spb;
        if next_uses_bank && self.config().reseed_prototypes {
            self.reseed(&used, queries)?;
        }
        let mut losses = LossValues::default();
        losses.scaled_add(&sums, 1.0 / seen as f64);
        let record = EpochRecord {
            epoch: self.epoch,
            stage,
            losses,
            lr: first_lr,
            gumbel_temp: first_temp,
            sentences,
            agree,
            distinct_prototypes: distinct,
        };
        self.epoch += 1;
        self.history.push(record.clone());
        Ok(record)
    }

    fn reseed(&mut self, used: &[bool], queries: Vec<f64>) -> Result<()> {
        let d = self.config().model.dim;
        let queries = Tensor::new(vec![queries.len() / d, d], queries)?;
        let id = self.model.bank;
        let slot = self
            .model
            .store
            .ids()
            .position(|i| i == id)
            .expect("bank is registered");
        let rows = spb::reseed_unused(self.model.store.get_mut(id), used, &queries);
        for &k in &rows {
            self.adam.m[slot].data_mut()[k * d..(k + 1) * d].fill(0.0);
            self.adam.v[slot].data_mut()[k * d..(k + 1) * d].fill(0.0);
        }
        if !rows.is_empty() {
            log::debug!("epoch {}: re-seeded {} prototypes", self.epoch, rows.len());
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{METRICS_HEADER}").expect("string write");
        for r in &self.history {
            writeln!(s, "{}", r.metrics_line()).expect("string write");
        }
        s
    }

    pub fn spb_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{SPB_HEADER}").expect("string write");
        for r in &self.history {
            writeln!(s, "{}", r.spb_line()).expect("string write");
        }
        s
    }

    /// Runs the remaining epochs, writing metrics after every epoch and a
    /// checkpoint `stage{n}.ckpt` at the end of each stage.
    pub fn run(&mut self, pairs: &[ImageReportPair], out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        while !self.is_finished() {
            let rec = self.run_epoch(pairs)?;
            log::info!("{}", rec.metrics_line());
            let metrics = out_dir.join("metrics.csv");
            std::fs::write(&metrics, self.metrics_csv()).map_err(|e| Error::io(&metrics, e))?;
            let spb = out_dir.join("spb.csv");
            std::fs::write(&spb, self.spb_csv()).map_err(|e| Error::io(&spb, e))?;
            let next_stage = if self.is_finished() {
                0
            } else {
                self.stage_of(self.epoch)
            };
            if next_stage != rec.stage {
                self.to_checkpoint()
                    .save(&out_dir.join(format!("stage{}.ckpt", rec.stage)))?;
            }
        }
        Ok(())
    }

    /// Trains to completion in memory.
    pub fn run_in_memory(&mut self, pairs: &[ImageReportPair]) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch(pairs)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put("config", Entry::Text(self.config().to_text()));
        let store = &self.model.store;
        for (i, id) in store.ids().enumerate() {
            let name = store.name(id);
            c.put(
                format!("param/{name}"),
                Entry::Tensor(store.get(id).clone()),
            );
            c.put(
                format!("adam/m/{name}"),
                Entry::Tensor(self.adam.m[i].clone()),
            );
            c.put(
                format!("adam/v/{name}"),
                Entry::Tensor(self.adam.v[i].clone()),
            );
        }
        c.put("adam/t", Entry::U64s(self.adam.t.clone()));
        c.put(
            "state",
            Entry::U64s(vec![
                self.step as u64,
                self.epoch as u64,
                self.rejected_steps as u64,
                self.stage_of(self.epoch.saturating_sub(1)) as u64,
            ]),
        );
        c.put(
            "temperature",
            Entry::Tensor(Tensor::scalar(self.temperature_at(self.step))),
        );
        let seed = self.rng.get_seed();
        let mut words: Vec<u64> = seed
            .chunks(8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let pos = self.rng.get_word_pos();
        words.push(self.rng.get_stream());
        words.push(pos as u64);
        words.push((pos >> 64) as u64);
        c.put("rng", Entry::U64s(words));
        c.put("metrics", Entry::Text(self.metrics_csv()));
        c.put("spb_log", Entry::Text(self.spb_csv()));
        c
    }

    /// Restores a trainer; `train_size` must match the original run.
    pub fn from_checkpoint(c: &Checkpoint, train_size: usize) -> Result<Self> {
        let config = TrainConfig::from_text(c.text("config")?)?;
        let mut model = Model::new(config)?;
        load_params(&mut model, c)?;
        let mut adam = Adam::new(&model.store, model.config.weight_decay);
        for (i, id) in model.store.ids().enumerate() {
            let name = model.store.name(id);
            adam.m[i] = c.tensor(&format!("adam/m/{name}"))?.clone();
            adam.v[i] = c.tensor(&format!("adam/v/{name}"))?.clone();
        }
        adam.t = c.u64s("adam/t")?.to_vec();
        if adam.t.len() != model.store.len() {
            return Err(Error::Checkpoint(
                "adam step counts do not match parameters".into(),
            ));
        }
        let words = c.u64s("rng")?;
        if words.len() != 7 {
            return Err(Error::Checkpoint("rng state must have 7 words".into()));
        }
        let mut seed = [0u8; 32];
        for (i, w) in words[..4].iter().enumerate() {
            seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(words[4]);
        rng.set_word_pos(words[5] as u128 | ((words[6] as u128) << 64));
        let state = c.u64s("state")?;
        if state.len() < 3 {
            return Err(Error::Checkpoint("state entry is too short".into()));
        }
        let mut t = Self::assemble(model, adam, rng, train_size)?;
        t.step = state[0] as usize;
        t.epoch = state[1] as usize;
        t.rejected_steps = state[2] as usize;
        t.history = parse_history(c.text("metrics")?, c.text("spb_log")?)?;
        if t.history.len() != t.epoch {
            return Err(Error::Checkpoint(format!(
                "metrics log has {} epochs, state says {}",
                t.history.len(),
                t.epoch
            )));
        }
        Ok(t)
    }
}

/// Overwrites every parameter of `model` from `c`.
pub fn load_params(model: &mut Model, c: &Checkpoint) -> Result<()> {
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let t = c.tensor(&format!("param/{name}"))?.clone();
        model.store.set(id, t)?;
    }
    Ok(())
}

/// Rebuilds a model (parameters only) from a checkpoint.
pub fn model_from_checkpoint(c: &Checkpoint) -> Result<Model> {
    let config = TrainConfig::from_text(c.text("config")?)?;
    let mut model = Model::new(config)?;
    load_params(&mut model, c)?;
    Ok(model)
}

fn parse_history(metrics: &str, spb: &str) -> Result<Vec<EpochRecord>> {
    let bad =
        |what: &str, i: usize| Error::Checkpoint(format!("{what} log line {} is malformed", i + 1));
    let m_lines: Vec<&str> = metrics.lines().skip(1).collect();
    let s_lines: Vec<&str> = spb.lines().skip(1).collect();
    if m_lines.len() != s_lines.len() {
        return Err(Error::Checkpoint(
            "metrics and bank logs differ in length".into(),
        ));
    }
    let mut out = Vec::with_capacity(m_lines.len());
    for (i, (m, s)) in m_lines.iter().zip(&s_lines).enumerate() {
        let f: Vec<&str> = m.split(',').collect();
        let u: Vec<&str> = s.split(',').collect();
        if f.len() != 13 || u.len() != 5 {
            return Err(bad("metrics", i));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad("metrics", i));
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad("bank", i));
        out.push(EpochRecord {
            epoch: int(f[0])?,
            stage: int(f[1])?,
            losses: LossValues {
                g: num(2)?,
                l_i2r: num(3)?,
                l_r2i: num(4)?,
                proto: num(5)?,
                ir: num(6)?,
                q: num(7)?,
                kl: num(8)?,
                gpa: num(9)?,
                total: num(10)?,
            },
            lr: num(11)?,
            gumbel_temp: num(12)?,
            sentences: int(u[2])?,
            agree: int(u[3])?,
            distinct_prototypes: int(u[4])?,
        });
    }
    Ok(out)
}

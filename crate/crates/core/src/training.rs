//! Pretraining loop: configuration files, schedules, the student/teacher
//! training step, per-epoch EMA, checkpoints and JSON-lines metrics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{batch_iter, derive_seed, Augment, Dataset};
use crate::distill::{cosine_loss, ema_update, normalize_targets, LossForm, MomentumSchedule, TeacherState};
use crate::error::{Error, Result};
use crate::masking::{plan_for, FeedingMode, MaskPlan};
use crate::tensor::{io, AdamW, AdamWConfig, Scalar, Tape, Tensor, Var};
use crate::vit::{patchify, DropPath, ModelConfig, ModelState, SeqBatch};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaMode {
    #[default]
    PerEpoch,
    PerIteration,
}

impl FromStr for EmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_epoch" => Ok(EmaMode::PerEpoch),
            "per_iteration" => Ok(EmaMode::PerIteration),
            other => Err(Error::Config(format!("unknown ema_mode `{other}` (per_epoch or per_iteration)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Learning rate per 256 images; the optimizer uses
    /// `base_lr * batch_size / 256`.
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// `full_image`, `only_masked`, `teacher_crop` or `multi_fold`.
    pub feeding_mode: String,
    pub t: usize,
    pub r: f64,
    /// Fraction of the masked tokens cropped away in `teacher_crop` mode.
    pub r_c: f64,
    pub ema_mode: EmaMode,
    pub normalization_on: bool,
    pub log_every: usize,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub eta_start: f64,
    pub eta_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub norm_eps: f64,
    pub loss_form: LossForm,
    pub augment: bool,
    pub crop_scale_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 100,
            warmup_epochs: 10,
            base_lr: 1.5e-3,
            weight_decay: 0.05,
            batch_size: 64,
            seed: 0,
            feeding_mode: "multi_fold".into(),
            t: 3,
            r: 0.75,
            r_c: 0.5,
            ema_mode: EmaMode::PerEpoch,
            normalization_on: true,
            log_every: 50,
            checkpoint_every: 0,
            eta_start: 0.96,
            eta_end: 0.99,
            beta1: 0.9,
            beta2: 0.95,
            norm_eps: 1e-6,
            loss_form: LossForm::PerToken,
            augment: true,
            crop_scale_min: 0.2,
        }
    }

    /// 300 epochs, batch 768, optimizer learning rate 8e-4.
    pub fn base() -> Self {
        TrainConfig {
            epochs: 300,
            warmup_epochs: 60,
            base_lr: 8e-4 * 256.0 / 768.0,
            batch_size: 768,
            ..Self::toy()
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn feeding(&self) -> Result<FeedingMode> {
        FeedingMode::parse(&self.feeding_mode, self.t, self.r_c)
    }

    pub fn momentum(&self) -> MomentumSchedule {
        MomentumSchedule { start: self.eta_start, end: self.eta_end, total_epochs: self.epochs }
    }

    pub fn augmentation(&self) -> Augment {
        if self.augment {
            Augment { flip: true, crop_scale: Some((self.crop_scale_min, 1.0)) }
        } else {
            Augment::NONE
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!("need warmup_epochs < epochs, got {} / {}", self.warmup_epochs, self.epochs));
        }
        if !(self.base_lr > 0.0) || self.batch_size == 0 {
            return bad("base_lr must be > 0 and batch_size >= 1".into());
        }
        if !(0.0..1.0).contains(&self.eta_start) || !(0.0..1.0).contains(&self.eta_end) {
            return bad(format!("momentum must lie in [0, 1), got {} to {}", self.eta_start, self.eta_end));
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive".into());
        }
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0) {
            return bad("crop_scale_min must lie in (0, 1]".into());
        }
        self.feeding()?;
        Ok(())
    }
}

/// Everything a run needs, read from and written to flat `key = value`
/// files. Keys are the field names of [`ModelConfig`] and [`TrainConfig`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn to_map<S: Serialize>(s: &S) -> Map<String, Value> {
    match serde_json::to_value(s).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("config is a struct"),
    }
}

impl RunConfig {
    pub fn toy() -> Self {
        RunConfig { model: ModelConfig::toy(), train: TrainConfig::toy() }
    }

    pub fn base() -> Self {
        RunConfig { model: ModelConfig::base(), train: TrainConfig::base() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "base" => Ok(Self::base()),
            other => Err(Error::Config(format!("unknown preset `{other}` (toy or base)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        plan_for(self.model.n_tokens(), self.train.r, self.train.feeding()?, 0).map(|_| ())
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut model = to_map(&self.model);
        let mut train = to_map(&self.train);
        let (map, is_model) = if model.contains_key(key) {
            (&mut model, true)
        } else if train.contains_key(key) {
            (&mut train, false)
        } else {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        };
        let parsed = match &map[key] {
            Value::String(_) => Value::String(value.to_string()),
            _ => serde_json::from_str(value)
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))?,
        };
        map.insert(key.to_string(), parsed);
        let bad = |e: serde_json::Error| Error::Config(format!("invalid value `{value}` for `{key}`: {e}"));
        if is_model {
            self.model = serde_json::from_value(Value::Object(model)).map_err(bad)?;
        } else {
            self.train = serde_json::from_value(Value::Object(train)).map_err(bad)?;
        }
        Ok(())
    }

    /// Applies a `key = value` file on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path, base: RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = base;
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Flat `key = value` text; parsing it back reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (section, map) in [("model", to_map(&self.model)), ("train", to_map(&self.train))] {
            let _ = writeln!(out, "# {section}");
            for (k, v) in map {
                let v = match v {
                    Value::String(s) => s,
                    other => other.to_string(),
                };
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return 0.0;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub step_losses: Vec<f64>,
    pub lr: f64,
    pub eta: f64,
    pub seconds: f64,
}

/// Receives metrics as training proceeds.
pub trait MetricsSink {
    fn step(&mut self, _m: &StepMetrics) -> Result<()> {
        Ok(())
    }

    fn epoch(&mut self, _m: &EpochMetrics) -> Result<()> {
        Ok(())
    }
}

impl MetricsSink for () {}

/// Writes one JSON object per step.
pub struct JsonLines<W>(pub W);

impl<W: Write> MetricsSink for JsonLines<W> {
    fn step(&mut self, m: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(self.0, "{line}").map_err(|e| Error::io(Path::new("<metrics>"), e))
    }
}

/// Teacher features at each plan's targets, standardized per patch when
/// normalization is on.
pub fn teacher_targets<T: Scalar>(
    teacher: &TeacherState<T>,
    patches: &[&Tensor<T>],
    plans: &[&MaskPlan],
    cfg: &TrainConfig,
) -> Result<Tensor<T>> {
    let mut target = teacher.forward(patches, plans)?;
    if cfg.normalization_on {
        normalize_targets(&mut target, cfg.norm_eps);
    }
    Ok(target)
}

/// Records the student pass (encoder on visible tokens, decoder at the
/// targets) and the cosine loss against `target` on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn student_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    vars: &[Var],
    model: &ModelState<T>,
    patches: &[&Tensor<T>],
    plans: &[&MaskPlan],
    target: Tensor<T>,
    form: LossForm,
    drop: Option<DropPath>,
) -> Result<Var> {
    let mut seqs = SeqBatch::new();
    for (p, plan) in patches.iter().zip(plans) {
        seqs.push(p, &plan.visible)?;
    }
    let enc = model.encoder().forward(tape, vars, &seqs, drop, None)?;
    let pred = model.decoder().forward(tape, vars, &enc, plans)?;
    let groups = plans.iter().map(|p| p.targets().len()).collect();
    cosine_loss(tape, pred, target, form, groups)
}

/// Student, teacher, optimizer and progress counters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: ModelState<f32>,
    pub teacher: TeacherState<f32>,
    pub opt: AdamW<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub ema_calls: usize,
}

/// One prepared image: patches plus its mask plan.
struct Item {
    patches: Tensor<f32>,
    plan: MaskPlan,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = ModelState::new(config.model.clone(), derive_seed(config.train.seed, &[0x1417]))?;
        let teacher = TeacherState::from_student(&model);
        let t = &config.train;
        let opt_cfg = AdamWConfig {
            lr: 0.0,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            ..AdamWConfig::default()
        };
        let opt = AdamW::new(opt_cfg, &model.params);
        Ok(Trainer { config, model, teacher, opt, epoch: 0, step: 0, ema_calls: 0 })
    }

    pub fn steps_per_epoch(&self, n_items: usize) -> usize {
        n_items.div_ceil(self.config.train.batch_size)
    }

    fn lr_at(&self, step: usize, n_items: usize) -> f64 {
        let t = &self.config.train;
        let per = self.steps_per_epoch(n_items);
        lr_schedule(step, t.epochs * per, t.warmup_epochs * per, t.effective_lr())
    }

    fn eta_now(&self, n_items: usize) -> f64 {
        let t = &self.config.train;
        match t.ema_mode {
            EmaMode::PerEpoch => t.momentum().at(self.epoch),
            EmaMode::PerIteration => {
                let per = self.steps_per_epoch(n_items);
                let s = MomentumSchedule { total_epochs: t.epochs * per, ..t.momentum() };
                s.at(self.step)
            }
        }
    }

    fn prepare(&self, data: &Dataset, items: &[usize]) -> Result<Vec<Item>> {
        let (cfg, t) = (&self.config.model, &self.config.train);
        let mode = t.feeding()?;
        let aug = t.augmentation();
        let (size, ch) = (data.manifest.image_size, data.manifest.channels);
        if size != cfg.image_size || ch != cfg.channels {
            return Err(Error::Config(format!(
                "dataset images are {size}x{size}x{ch}, model expects {0}x{0}x{1}",
                cfg.image_size, cfg.channels
            )));
        }
        items
            .iter()
            .map(|&i| {
                let ids = [self.epoch as u64, self.step as u64, i as u64];
                let img = aug.apply(&data.standardized(i), size, ch, derive_seed(t.seed, &[0xa09, ids[0], ids[2]]));
                let patches = patchify(&img, size, ch, cfg.patch_size)?;
                let plan = plan_for(cfg.n_tokens(), t.r, mode, derive_seed(t.seed, &[0x3a5c, ids[0], ids[1], ids[2]]))?;
                Ok(Item { patches, plan })
            })
            .collect()
    }

    /// Loss and per-parameter gradients for one batch, without updating.
    pub fn loss_and_grads(&self, data: &Dataset, items: &[usize]) -> Result<(f64, Vec<Vec<f32>>)> {
        if items.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let batch = self.prepare(data, items)?;
        let t = &self.config.train;
        let patches: Vec<&Tensor<f32>> = batch.iter().map(|b| &b.patches).collect();
        let plans: Vec<&MaskPlan> = batch.iter().map(|b| &b.plan).collect();
        let drop = (self.config.model.drop_path_rate > 0.0).then(|| DropPath {
            rate: self.config.model.drop_path_rate,
            seed: derive_seed(t.seed, &[0xd409, self.step as u64]),
        });
        let target = teacher_targets(&self.teacher, &patches, &plans, t)?;
        let mut tape = Tape::new();
        let vars = self.model.params.bind(&mut tape);
        let loss = student_loss(&mut tape, &vars, &self.model, &patches, &plans, target, t.loss_form, drop)?;
        let value = tape.value(loss)[0] as f64;
        let mut grads = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(self.model.params.iter())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![0.0; p.value.numel()]))
            .collect();
        Ok((value, grads))
    }

    /// One optimizer step on the given items.
    pub fn train_step(&mut self, data: &Dataset, items: &[usize]) -> Result<StepMetrics> {
        let lr = self.lr_at(self.step, data.len());
        let (loss, grads) = self.loss_and_grads(data, items)?;
        if !loss.is_finite() {
            let grad_norm = grads.iter().flatten().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
            return Err(Error::NonFiniteLoss { step: self.step as u64, lr, grad_norm });
        }
        self.opt.config.lr = lr;
        self.opt.step(&mut self.model.params, &grads)?;
        let eta = self.eta_now(data.len());
        if self.config.train.ema_mode == EmaMode::PerIteration {
            self.apply_ema(eta)?;
        }
        let m = StepMetrics { step: self.step, loss, lr, eta };
        self.step += 1;
        Ok(m)
    }

    fn apply_ema(&mut self, eta: f64) -> Result<()> {
        ema_update(&mut self.teacher.params, &self.model.params, eta)?;
        self.ema_calls += 1;
        Ok(())
    }

    /// One pass over the dataset in an epoch-seeded order, then the
    /// per-epoch EMA update.
    pub fn train_epoch(&mut self, data: &Dataset, sink: &mut dyn MetricsSink) -> Result<EpochMetrics> {
        let start = Instant::now();
        let t = &self.config.train;
        let batches = batch_iter(data.len(), t.batch_size, t.seed, self.epoch);
        let log_every = t.log_every;
        let mut losses = Vec::with_capacity(batches.len());
        let mut last = None;
        for (i, b) in batches.iter().enumerate() {
            let m = self.train_step(data, b)?;
            sink.step(&m)?;
            if log_every > 0 && (i + 1) % log_every == 0 {
                log::info!("epoch {} step {} loss {:.5} lr {:.3e}", self.epoch, m.step, m.loss, m.lr);
            }
            losses.push(m.loss);
            last = Some(m);
        }
        let eta = self.eta_now(data.len());
        if self.config.train.ema_mode == EmaMode::PerEpoch {
            self.apply_ema(eta)?;
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let m = EpochMetrics {
            epoch: self.epoch,
            mean_loss,
            step_losses: losses,
            lr: last.map_or(0.0, |m| m.lr),
            eta,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        sink.epoch(&m)?;
        Ok(m)
    }

    /// Trains until `until_epoch` epochs are complete.
    pub fn fit(&mut self, data: &Dataset, until_epoch: usize, sink: &mut dyn MetricsSink) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while self.epoch < until_epoch.min(self.config.train.epochs) {
            out.push(self.train_epoch(data, sink)?);
        }
        Ok(out)
    }

    /// Named tensors of the whole training state.
    pub fn state_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        let counters = [
            ("meta.epoch", self.epoch as u64),
            ("meta.step", self.step as u64),
            ("meta.ema_calls", self.ema_calls as u64),
            ("meta.opt_step", self.opt.steps_taken()),
            ("meta.seed", self.config.train.seed),
        ];
        for (name, v) in counters {
            out.push((name.to_string(), encode_u64(v)));
        }
        for p in self.model.params.iter() {
            out.push((p.name.clone(), p.value.clone()));
        }
        for p in self.teacher.params.iter() {
            out.push((format!("teacher.{}", p.name), p.value.clone()));
        }
        let (m, v) = self.opt.moments();
        for (p, (m, v)) in self.model.params.iter().zip(m.iter().zip(v)) {
            let shape = p.value.shape().to_vec();
            out.push((format!("opt.m.{}", p.name), Tensor::new(shape.clone(), m.clone()).expect("moment shape")));
            out.push((format!("opt.v.{}", p.name), Tensor::new(shape, v.clone()).expect("moment shape")));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save(path, &self.state_entries())
    }

    /// Replaces the whole state from checkpoint entries. Nothing changes
    /// unless every tensor is present with the right shape.
    pub fn restore(&mut self, entries: Vec<(String, Tensor<f32>)>) -> Result<()> {
        let map: HashMap<String, Tensor<f32>> = entries.into_iter().collect();
        let counter = |name: &str| -> Result<u64> {
            map.get(name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`"))).and_then(decode_u64)
        };
        let (epoch, step, ema_calls, opt_step, seed) = (
            counter("meta.epoch")?,
            counter("meta.step")?,
            counter("meta.ema_calls")?,
            counter("meta.opt_step")?,
            counter("meta.seed")?,
        );
        if seed != self.config.train.seed {
            return Err(Error::Format(format!(
                "checkpoint seed {seed} differs from configured seed {}",
                self.config.train.seed
            )));
        }
        let mut model = self.model.params.clone();
        model.assign_from(&map, "")?;
        let mut teacher = self.teacher.params.clone();
        teacher.assign_from(&map, "teacher.")?;
        let moments = |prefix: &str| -> Result<Vec<Vec<f32>>> {
            let mut bufs = self.model.params.clone();
            bufs.assign_from(&map, prefix)?;
            Ok(bufs.iter().map(|p| p.value.data().to_vec()).collect())
        };
        let (m, v) = (moments("opt.m.")?, moments("opt.v.")?);
        let mut opt = self.opt.clone();
        opt.restore(m, v, opt_step)?;
        self.model.params = model;
        self.teacher.params = teacher;
        self.opt = opt;
        self.epoch = epoch as usize;
        self.step = step as usize;
        self.ema_calls = ema_calls as usize;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.restore(io::load(path)?)
    }
}

/// Stores a counter bit-exactly as two f32 words (low, high).
fn encode_u64(v: u64) -> Tensor<f32> {
    let data = vec![f32::from_bits(v as u32), f32::from_bits((v >> 32) as u32)];
    Tensor::new(vec![2], data).expect("two words")
}

fn decode_u64(t: &Tensor<f32>) -> Result<u64> {
    match t.data() {
        [lo, hi] => Ok(lo.to_bits() as u64 | (hi.to_bits() as u64) << 32),
        _ => Err(Error::Format(format!("counter tensor has shape {:?}, expected [2]", t.shape()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticParams};

    pub(crate) fn small() -> (RunConfig, Dataset) {
        let mut cfg = RunConfig::toy();
        cfg.model = ModelConfig {
            image_size: 16,
            encoder_depth: 1,
            decoder_depth: 1,
            embed_dim: 16,
            decoder_dim: 8,
            num_heads: 2,
            decoder_heads: 2,
            mlp_ratio: 2,
            ..ModelConfig::toy()
        };
        cfg.train.epochs = 4;
        cfg.train.warmup_epochs = 1;
        cfg.train.batch_size = 4;
        let data = generate_synthetic(&SyntheticParams { n_items: 10, image_size: 16, ..Default::default() }).unwrap();
        (cfg, data)
    }

    #[test]
    fn lr_schedule_points() {
        assert_eq!(lr_schedule(0, 100, 10, 1.0), 0.0);
        assert_eq!(lr_schedule(10, 100, 10, 1.0), 1.0);
        assert!(lr_schedule(100, 100, 10, 1.0).abs() < 1e-12);
        assert!((lr_schedule(5, 100, 10, 2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_text_roundtrip() {
        let mut cfg = RunConfig::toy();
        cfg.set("feeding_mode", "teacher_crop").unwrap();
        cfg.set("epochs", "7").unwrap();
        cfg.set("ema_mode", "per_iteration").unwrap();
        cfg.set("loss_form", "global").unwrap();
        cfg.set("use_class_token", "false").unwrap();
        let text = cfg.to_text();
        let mut back = RunConfig::base();
        back.apply_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(matches!(cfg.set("epoch", "3"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("epochs", "three"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("ema_mode", "sometimes"), Err(Error::Config(_))));
        let err = cfg.apply_text("epochs = 3\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig::toy();
        cfg.train.warmup_epochs = cfg.train.epochs;
        assert!(cfg.validate().unwrap_err().is_config());
        let mut cfg = RunConfig::toy();
        cfg.train.t = 100;
        assert!(cfg.validate().unwrap_err().is_config());
        assert!(RunConfig::base().validate().is_ok());
        assert!((TrainConfig::base().effective_lr() - 8e-4).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let (mut cfg, data) = small();
        cfg.train.base_lr = 1e-30;
        let mut tr = Trainer::new(cfg).unwrap();
        let before = tr.model.params.clone();
        // step 0 of the warmup has lr exactly 0
        let a = tr.train_step(&data, &[0, 1, 2]).unwrap();
        assert_eq!(a.lr, 0.0);
        assert_eq!(tr.model.params, before);
    }

    #[test]
    fn counters_roundtrip() {
        for v in [0u64, 1, 0x7fc0_0001, u64::MAX, 1 << 40] {
            assert_eq!(decode_u64(&encode_u64(v)).unwrap(), v);
        }
    }
}

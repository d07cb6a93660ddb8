//! Representation quality: linear probes on frozen encoder features,
//! student/teacher comparison against a random-init baseline, and a small
//! fine-tuning run.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, Dataset};
use crate::distill::TeacherState;
use crate::error::{Error, Result};
use crate::tensor::{kernels, AdamW, AdamWConfig, Function, ParamSet, Scalar, Tape, Tensor};
use crate::vit::{patchify, EncoderIds, EncoderView, ModelConfig, ModelState, SeqBatch};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    ClassToken,
    #[default]
    MeanPool,
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_token" => Ok(FeatureSource::ClassToken),
            "mean_pool" | "mean_pool_patches" => Ok(FeatureSource::MeanPool),
            other => Err(Error::Config(format!("unknown feature source `{other}` (class_token or mean_pool)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    #[default]
    Student,
    Teacher,
    RandomInit,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Student => "student",
            Branch::Teacher => "teacher",
            Branch::RandomInit => "random_init",
        }
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(Branch::Student),
            "teacher" => Ok(Branch::Teacher),
            "random_init" => Ok(Branch::RandomInit),
            other => Err(Error::Config(format!("unknown branch `{other}` (student, teacher or random_init)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub source: FeatureSource,
    /// Full-batch optimizer iterations.
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub branch: Branch,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            source: FeatureSource::MeanPool,
            epochs: 500,
            lr: 0.02,
            weight_decay: 1e-4,
            branch: Branch::Student,
            seed: 0,
        }
    }
}

/// A frozen encoder: configuration, layout and borrowed weights.
#[derive(Clone, Copy)]
pub struct Backbone<'a> {
    pub config: &'a ModelConfig,
    pub ids: &'a EncoderIds,
    pub pos: &'a Tensor<f32>,
    pub params: &'a ParamSet<f32>,
}

impl<'a> Backbone<'a> {
    pub fn student(model: &'a ModelState<f32>) -> Self {
        Backbone { config: &model.config, ids: &model.encoder_ids, pos: &model.encoder_pos, params: &model.params }
    }

    pub fn teacher(teacher: &'a TeacherState<f32>) -> Self {
        Backbone { config: &teacher.config, ids: &teacher.ids, pos: &teacher.pos, params: &teacher.params }
    }

    /// One feature row per image, from all patches of the un-augmented
    /// image.
    pub fn features(&self, data: &Dataset, source: FeatureSource) -> Result<Vec<Vec<f32>>> {
        let cfg = self.config;
        if source == FeatureSource::ClassToken && self.ids.cls_token.is_none() {
            return Err(Error::FeatureUnavailable("class-token features need use_class_token = true".into()));
        }
        let (size, ch) = (data.manifest.image_size, data.manifest.channels);
        if size != cfg.image_size || ch != cfg.channels {
            return Err(Error::Config(format!("dataset images are {size}x{size}x{ch}, model expects {}", cfg.image_size)));
        }
        let all: Vec<usize> = (0..cfg.n_tokens()).collect();
        let view = EncoderView::new(cfg, self.ids, self.pos);
        let d = cfg.embed_dim;
        let mut out = Vec::with_capacity(data.len());
        for chunk in (0..data.len()).collect::<Vec<_>>().chunks(64) {
            let mut batch = SeqBatch::new();
            for &i in chunk {
                batch.push(&patchify(&data.standardized(i), size, ch, cfg.patch_size)?, &all)?;
            }
            let mut tape = Tape::no_grad();
            let vars = self.params.bind(&mut tape);
            let enc = view.forward(&mut tape, &vars, &batch, None, None)?;
            let x = tape.value(enc.out);
            for (seq, rows) in enc.patch_rows().into_iter().enumerate() {
                let f = match source {
                    FeatureSource::ClassToken => {
                        let r = enc.offsets()[seq];
                        x[r * d..(r + 1) * d].to_vec()
                    }
                    FeatureSource::MeanPool => {
                        let n = rows.len() as f32;
                        let mut acc = vec![0.0f32; d];
                        for r in rows {
                            acc.iter_mut().zip(&x[r * d..(r + 1) * d]).for_each(|(a, &v)| *a += v);
                        }
                        acc.iter().map(|a| a / n).collect()
                    }
                };
                out.push(f);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub branch: Branch,
    pub accuracy: f64,
    pub n_eval: usize,
    pub seed: u64,
    pub train_accuracy: f64,
}

/// Softmax regression head trained on fixed features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `[dim, classes]`
    pub weight: Tensor<f64>,
    pub bias: Vec<f64>,
}

fn labels_of(data: &Dataset) -> Result<&[u16]> {
    data.labels.as_deref().ok_or_else(|| Error::Config("probing needs a labeled dataset".into()))
}

impl LinearHead {
    /// Fits a multinomial logistic regression with AdamW on standardized
    /// features. Deterministic: zero init, full-batch steps.
    pub fn fit(features: &[Vec<f32>], labels: &[u16], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != labels.len() {
            return Err(Error::Config(format!("{n} feature rows for {} labels", labels.len())));
        }
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Config(format!("label {bad} outside [0, {classes})")));
        }
        let dim = features[0].len();
        let mut mean = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for f in features {
            for (j, &v) in f.iter().enumerate() {
                mean[j] += v as f64;
                sq[j] += (v as f64).powi(2);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let std: Vec<f64> = sq.iter().zip(&mean).map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(1e-6)).collect();
        let mut head = LinearHead { mean, std, weight: Tensor::zeros(&[dim, classes]), bias: vec![0.0; classes] };
        let x = head.standardize(features);

        let mut ps = ParamSet::new();
        ps.push("weight", Tensor::zeros(&[dim, classes]), true);
        ps.push("bias", Tensor::zeros(&[classes]), false);
        let mut opt = AdamW::new(
            AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            &ps,
        );
        for _ in 0..cfg.epochs {
            let w = ps.get(0).value.data();
            let b = ps.get(1).value.data();
            let mut p = kernels::matmul(&x, w, n, dim, classes);
            for row in p.chunks_exact_mut(classes) {
                row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
            }
            kernels::softmax_rows(&mut p, classes);
            for (row, &l) in p.chunks_exact_mut(classes).zip(labels) {
                row[l as usize] -= 1.0;
            }
            p.iter_mut().for_each(|v| *v /= n as f64);
            let xt = kernels::transpose(&x, n, dim);
            let gw = kernels::matmul(&xt, &p, dim, n, classes);
            let gb = kernels::col_sums(&p, classes);
            opt.step(&mut ps, &[gw, gb])?;
        }
        head.weight = ps.get(0).value.clone();
        head.bias = ps.get(1).value.data().to_vec();
        Ok(head)
    }

    fn standardize(&self, features: &[Vec<f32>]) -> Vec<f64> {
        features
            .iter()
            .flat_map(|f| f.iter().enumerate().map(|(j, &v)| (v as f64 - self.mean[j]) / self.std[j]))
            .collect()
    }

    pub fn predict(&self, features: &[Vec<f32>]) -> Vec<usize> {
        let (dim, classes) = (self.weight.rows(), self.weight.cols());
        let x = self.standardize(features);
        let logits = kernels::matmul(&x, self.weight.data(), features.len(), dim, classes);
        logits
            .chunks_exact(classes)
            .map(|row| {
                let mut best = 0;
                for (k, v) in row.iter().zip(&self.bias).map(|(a, b)| a + b).enumerate() {
                    if v > row[best] + self.bias[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

pub fn accuracy(pred: &[usize], labels: &[u16]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(&p, &l)| p == l as usize).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Trains a linear head on `train` features of the frozen `backbone` and
/// reports top-1 accuracy on `test`.
pub fn linear_probe(backbone: Backbone<'_>, train: &Dataset, test: &Dataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let (ytr, yte) = (labels_of(train)?, labels_of(test)?);
    let classes = train.manifest.class_count;
    if test.manifest.class_count != classes {
        return Err(Error::Config(format!(
            "train has {classes} classes, test has {}",
            test.manifest.class_count
        )));
    }
    let ftr = backbone.features(train, cfg.source)?;
    let fte = backbone.features(test, cfg.source)?;
    probe_features(&ftr, ytr, &fte, yte, classes, cfg)
}

/// Probe on precomputed features.
pub fn probe_features(
    ftr: &[Vec<f32>],
    ytr: &[u16],
    fte: &[Vec<f32>],
    yte: &[u16],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let head = LinearHead::fit(ftr, ytr, classes, cfg)?;
    Ok(ProbeResult {
        branch: cfg.branch,
        accuracy: accuracy(&head.predict(fte), yte),
        n_eval: yte.len(),
        seed: cfg.seed,
        train_accuracy: accuracy(&head.predict(ftr), ytr),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    pub random_init: ProbeResult,
    pub student: ProbeResult,
    pub teacher: ProbeResult,
    /// `|teacher - student|`
    pub gap: f64,
}

impl BranchReport {
    pub fn rows(&self) -> [&ProbeResult; 3] {
        [&self.random_init, &self.student, &self.teacher]
    }
}

/// Probes the student, the teacher and a freshly initialized encoder of the
/// same architecture with one protocol.
pub fn compare_branches(
    model: &ModelState<f32>,
    teacher: &TeacherState<f32>,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<BranchReport> {
    let random = ModelState::<f32>::new(model.config.clone(), derive_seed(cfg.seed, &[0x5a4d]))?;
    let run = |b: Backbone<'_>, branch| linear_probe(b, train, test, &ProbeConfig { branch, ..cfg.clone() });
    let random_init = run(Backbone::student(&random), Branch::RandomInit)?;
    let student = run(Backbone::student(model), Branch::Student)?;
    let teacher = run(Backbone::teacher(teacher), Branch::Teacher)?;
    let gap = (teacher.accuracy - student.accuracy).abs();
    Ok(BranchReport { random_init, student, teacher, gap })
}

/// Aggregate CSV over labeled results (e.g. one row per checkpoint and
/// branch).
pub fn results_csv(rows: &[(String, ProbeResult)]) -> String {
    let mut s = String::from("label,branch,accuracy,n_eval,seed\n");
    for (label, r) in rows {
        s.push_str(&format!("{label},{},{},{},{}\n", r.branch.name(), r.accuracy, r.n_eval, r.seed));
    }
    s
}

/// Mean softmax cross-entropy of `[n, classes]` logits against fixed labels.
struct CrossEntropy {
    labels: Vec<u16>,
}

impl<T: Scalar> Function<T> for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn forward(&self, inputs: &[(&[usize], &[T])]) -> Result<(Vec<usize>, Vec<T>)> {
        let [(shape, logits)] = inputs else {
            return Err(Error::Contract("cross_entropy takes one input".into()));
        };
        if shape.len() != 2 || shape[0] != self.labels.len() {
            return Err(Error::Contract(format!("cross_entropy: logits {:?} for {} labels", shape, self.labels.len())));
        }
        let classes = shape[1];
        let mut p = logits.to_vec();
        kernels::softmax_rows(&mut p, classes);
        let total: f64 = p
            .chunks_exact(classes)
            .zip(&self.labels)
            .map(|(row, &l)| -(row[l as usize].as_f64().max(1e-30)).ln())
            .sum();
        Ok((vec![1], vec![T::lit(total / self.labels.len() as f64)]))
    }

    fn backward(&self, inputs: &[(&[usize], &[T])], _output: &[T], grad_output: &[T]) -> Vec<Option<Vec<T>>> {
        let (shape, logits) = inputs[0];
        let classes = shape[1];
        let mut p = logits.to_vec();
        kernels::softmax_rows(&mut p, classes);
        let scale = grad_output[0] / T::lit(self.labels.len() as f64);
        for (row, &l) in p.chunks_exact_mut(classes).zip(&self.labels) {
            row[l as usize] -= T::one();
            row.iter_mut().for_each(|v| *v *= scale);
        }
        vec![Some(p)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub accuracy: f64,
}

/// End-to-end fine-tuning of the encoder plus a linear head on mean-pooled
/// features. A small smoke run, not a benchmark.
pub fn finetune(model: &ModelState<f32>, train: &Dataset, test: &Dataset, epochs: usize, lr: f64, seed: u64) -> Result<FinetuneReport> {
    let cfg = &model.config;
    let labels = labels_of(train)?;
    let classes = train.manifest.class_count;
    let mut params = model.encoder_params();
    let head_w = params.push("head.weight", Tensor::zeros(&[cfg.embed_dim, classes]), true);
    let head_b = params.push("head.bias", Tensor::zeros(&[classes]), false);
    let mut opt = AdamW::new(AdamWConfig { lr, ..AdamWConfig::default() }, &params);
    let all: Vec<usize> = (0..cfg.n_tokens()).collect();
    let (size, ch) = (cfg.image_size, cfg.channels);
    let mut losses = Vec::new();
    for epoch in 0..epochs {
        for batch in crate::data::batch_iter(train.len(), 32, seed, epoch) {
            let grads;
            {
                let mut seqs = SeqBatch::new();
                for &i in &batch {
                    seqs.push(&patchify(&train.standardized(i), size, ch, cfg.patch_size)?, &all)?;
                }
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape);
                let enc = EncoderView::new(cfg, &model.encoder_ids, &model.encoder_pos).forward(&mut tape, &vars, &seqs, None, None)?;
                let total: usize = enc.lens.iter().sum();
                let mut pool = vec![0.0f32; batch.len() * total];
                for (s, rows) in enc.patch_rows().into_iter().enumerate() {
                    let w = 1.0 / rows.len() as f32;
                    rows.for_each(|r| pool[s * total + r] = w);
                }
                let pool = tape.constant(Tensor::new(vec![batch.len(), total], pool)?);
                let pooled = tape.matmul(pool, enc.out)?;
                let logits = tape.matmul(pooled, vars[head_w])?;
                let logits = tape.add_row(logits, vars[head_b])?;
                let y: Vec<u16> = batch.iter().map(|&i| labels[i]).collect();
                let loss = tape.custom(&[logits], Box::new(CrossEntropy { labels: y }))?;
                losses.push(tape.value(loss)[0] as f64);
                let mut g = tape.backward(loss)?;
                grads = vars
                    .iter()
                    .zip(params.iter())
                    .map(|(&v, p)| g.take(v).unwrap_or_else(|| vec![0.0; p.value.numel()]))
                    .collect::<Vec<_>>();
            }
            opt.step(&mut params, &grads)?;
        }
    }
    let mut tuned = model.clone();
    let n_enc = model.n_encoder_params;
    for i in 0..n_enc {
        tuned.params.get_mut(i).value = params.get(i).value.clone();
    }
    let feats = Backbone::student(&tuned).features(test, FeatureSource::MeanPool)?;
    let w = params.get(head_w).value.cast::<f64>();
    let head = LinearHead {
        mean: vec![0.0; cfg.embed_dim],
        std: vec![1.0; cfg.embed_dim],
        weight: w,
        bias: params.get(head_b).value.data().iter().map(|&v| v as f64).collect(),
    };
    Ok(FinetuneReport {
        initial_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        accuracy: accuracy(&head.predict(&feats), labels_of(test)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticParams};

    fn tiny_model() -> ModelState<f32> {
        let cfg = ModelConfig {
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
        ModelState::new(cfg, 3).unwrap()
    }

    fn split(n: usize, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticParams { n_items: n, image_size: 16, class_count: 4, seed, ..Default::default() }).unwrap()
    }

    #[test]
    fn constant_features_give_majority_rate() {
        let feats = vec![vec![1.0f32, 2.0]; 40];
        let labels: Vec<u16> = (0..40).map(|i| if i < 30 { 0 } else { 1 }).collect();
        let r = probe_features(&feats, &labels, &feats, &labels, 2, &ProbeConfig::default()).unwrap();
        assert!((r.accuracy - 0.75).abs() < 0.02);
    }

    #[test]
    fn separable_features_are_learned() {
        let labels: Vec<u16> = (0..60).map(|i| (i % 3) as u16).collect();
        let feats: Vec<Vec<f32>> = labels.iter().enumerate().map(|(i, &l)| vec![l as f32 + 0.01 * (i % 5) as f32, 1.0]).collect();
        let r = probe_features(&feats, &labels, &feats, &labels, 3, &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let bad: Vec<u16> = labels.iter().map(|&l| l + 5).collect();
        assert!(probe_features(&feats, &bad, &feats, &labels, 3, &ProbeConfig::default()).unwrap_err().is_config());
    }

    #[test]
    fn equal_branches_equal_accuracy_and_frozen() {
        let model = tiny_model();
        let teacher = TeacherState::from_student(&model);
        let (train, test) = (split(40, 1), split(20, 2));
        let before = model.params.clone();
        let cfg = ProbeConfig { epochs: 50, ..Default::default() };
        let rep = compare_branches(&model, &teacher, &train, &test, &cfg).unwrap();
        assert_eq!(rep.student.accuracy, rep.teacher.accuracy);
        assert_eq!(rep.gap, 0.0);
        assert_eq!(model.params, before);
        let csv = results_csv(&[("final".into(), rep.student.clone())]);
        assert!(csv.starts_with("label,branch,accuracy,n_eval,seed\nfinal,student,"));
    }

    #[test]
    fn class_token_source_requires_token() {
        let mut cfg = tiny_model().config;
        cfg.use_class_token = false;
        let m = ModelState::<f32>::new(cfg, 1).unwrap();
        let err = Backbone::student(&m).features(&split(4, 1), FeatureSource::ClassToken).unwrap_err();
        assert!(matches!(err, Error::FeatureUnavailable(_)));
    }

    #[test]
    fn finetune_reduces_loss() {
        let model = tiny_model();
        let (train, test) = (split(64, 1), split(32, 2));
        let rep = finetune(&model, &train, &test, 4, 3e-3, 0).unwrap();
        assert!(rep.final_loss < rep.initial_loss, "{rep:?}");
        assert!((0.0..=1.0).contains(&rep.accuracy));
    }
}

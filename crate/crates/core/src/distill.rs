//! Teacher branch: EMA shadow of the student encoder, fold-wise target
//! extraction, per-patch target standardization and the cosine loss.

use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::tensor::{Function, ParamSet, Scalar, Tape, Tensor, Var};
use crate::vit::{EncoderIds, EncoderView, ModelConfig, ModelState, SeqBatch};

/// Smallest norm used when dividing by a feature norm.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `1 - mean_i cos(pred_i, target_i)` over target tokens.
    #[default]
    PerToken,
    /// One cosine per image over all of its target tokens flattened
    /// together, averaged over images.
    Global,
}

impl FromStr for LossForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_token" => Ok(LossForm::PerToken),
            "global" => Ok(LossForm::Global),
            other => Err(Error::Config(format!("unknown loss form `{other}` (per_token or global)"))),
        }
    }
}

impl LossForm {
    pub fn name(self) -> &'static str {
        match self {
            LossForm::PerToken => "per_token",
            LossForm::Global => "global",
        }
    }
}

/// Teacher encoder: its own copy of the encoder parameters, never bound to
/// a recording tape.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState<T> {
    pub params: ParamSet<T>,
    pub config: ModelConfig,
    pub ids: EncoderIds,
    pub pos: Tensor<T>,
}

impl<T: Scalar> TeacherState<T> {
    /// Initializes the teacher as an exact copy of the student encoder.
    pub fn from_student(model: &ModelState<T>) -> Self {
        TeacherState {
            params: model.encoder_params(),
            config: model.config.clone(),
            ids: model.encoder_ids.clone(),
            pos: model.encoder_pos.clone(),
        }
    }

    pub fn encoder(&self) -> EncoderView<'_, T> {
        EncoderView::new(&self.config, &self.ids, &self.pos)
    }

    /// Teacher features for every image at `plan.targets()`, concatenated
    /// image by image: `[sum(targets), embed_dim]`. Each teacher group is
    /// encoded as its own sequence, with its tokens' global positions.
    pub fn forward(&self, patches: &[&Tensor<T>], plans: &[&MaskPlan]) -> Result<Tensor<T>> {
        if patches.len() != plans.len() {
            return Err(Error::Contract(format!("{} images for {} mask plans", patches.len(), plans.len())));
        }
        let mut batch = SeqBatch::new();
        let mut groups_per_image = Vec::with_capacity(plans.len());
        for (p, plan) in patches.iter().zip(plans) {
            let groups = plan.teacher_groups();
            for g in &groups {
                batch.push(p, g)?;
            }
            groups_per_image.push(groups);
        }
        let mut tape = Tape::no_grad();
        let vars = self.params.bind(&mut tape);
        let enc = self.encoder().forward(&mut tape, &vars, &batch, None, None)?;
        let out = tape.value(enc.out);
        let d = self.config.embed_dim;
        let rows = enc.patch_rows();
        let n = self.config.n_tokens();

        let mut data = Vec::new();
        let mut seq = 0;
        let mut where_row = vec![usize::MAX; n];
        for (plan, groups) in plans.iter().zip(&groups_per_image) {
            where_row.iter_mut().for_each(|r| *r = usize::MAX);
            for g in groups {
                for (&pos, row) in g.iter().zip(rows[seq].clone()) {
                    where_row[pos] = row;
                }
                seq += 1;
            }
            for &t in plan.targets() {
                let row = where_row[t];
                if row == usize::MAX {
                    return Err(Error::Contract(format!(
                        "target token {t} is in no teacher group ({} mode)",
                        plan.feeding_mode
                    )));
                }
                data.extend_from_slice(&out[row * d..(row + 1) * d]);
            }
        }
        let count = data.len() / d;
        Tensor::new(vec![count, d], data)
    }
}

/// Standardizes each row to zero mean and unit (population) variance:
/// `(x - mean) / sqrt(var + eps)`.
pub fn normalize_targets<T: Scalar>(features: &mut Tensor<T>, eps: f64) {
    let d = features.cols();
    for row in features.data_mut().chunks_exact_mut(d) {
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = T::lit((v.as_f64() - mean) * inv);
        }
    }
}

/// Cosine reconstruction loss against fixed targets. `groups` lists how
/// many target rows belong to each image (used by [`LossForm::Global`]).
pub struct CosineLoss<T> {
    pub target: Tensor<T>,
    pub form: LossForm,
    pub groups: Vec<usize>,
}

/// Rows of `(a, b)` reduced to `(dot, |a|, |b|)` in f64.
fn dot_norms<T: Scalar>(a: &[T], b: &[T]) -> (f64, f64, f64) {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (ab, aa.sqrt(), bb.sqrt())
}

impl<T: Scalar> CosineLoss<T> {
    /// Chunks of the flattened prediction over which one cosine is taken.
    fn spans(&self) -> Vec<usize> {
        let d = self.target.cols();
        match self.form {
            LossForm::PerToken => vec![d; self.target.rows()],
            LossForm::Global => self.groups.iter().map(|g| g * d).collect(),
        }
    }
}

impl<T: Scalar> Function<T> for CosineLoss<T> {
    fn name(&self) -> &'static str {
        "cosine_loss"
    }

    fn forward(&self, inputs: &[(&[usize], &[T])]) -> Result<(Vec<usize>, Vec<T>)> {
        let [(shape, pred)] = inputs else {
            return Err(Error::Contract("cosine_loss takes exactly one prediction input".into()));
        };
        if *shape != self.target.shape() {
            return Err(Error::Contract(format!(
                "cosine_loss: prediction {:?} vs target {:?}",
                shape,
                self.target.shape()
            )));
        }
        if self.form == LossForm::Global && self.groups.iter().sum::<usize>() != self.target.rows() {
            return Err(Error::Contract(format!(
                "cosine_loss: groups cover {} rows of {}",
                self.groups.iter().sum::<usize>(),
                self.target.rows()
            )));
        }
        let spans = self.spans();
        let mut total = 0.0;
        let mut off = 0;
        for &len in &spans {
            let (ab, na, nb) = dot_norms(&pred[off..off + len], &self.target.data()[off..off + len]);
            total += 1.0 - ab / (na.max(NORM_GUARD) * nb.max(NORM_GUARD));
            off += len;
        }
        Ok((vec![1], vec![T::lit(total / spans.len() as f64)]))
    }

    fn backward(&self, inputs: &[(&[usize], &[T])], _output: &[T], grad_output: &[T]) -> Vec<Option<Vec<T>>> {
        let pred = inputs[0].1;
        let spans = self.spans();
        let scale = -grad_output[0].as_f64() / spans.len() as f64;
        let mut grad = Vec::with_capacity(pred.len());
        let mut off = 0;
        for &len in &spans {
            let (p, t) = (&pred[off..off + len], &self.target.data()[off..off + len]);
            let (ab, na, nb) = dot_norms(p, t);
            let (ga, gb) = (na.max(NORM_GUARD), nb.max(NORM_GUARD));
            // d cos / d p = t / (|p||t|) - cos * p / |p|^2, the second term
            // only while |p| is above the guard
            let cos = ab / (ga * gb);
            let radial = if na > NORM_GUARD { cos / (na * na) } else { 0.0 };
            grad.extend(p.iter().zip(t).map(|(&x, &y)| {
                T::lit(scale * (y.as_f64() / (ga * gb) - radial * x.as_f64()))
            }));
            off += len;
        }
        vec![Some(grad)]
    }
}

/// Records the cosine loss of `pred` against detached `target` on the tape.
pub fn cosine_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pred: Var,
    target: Tensor<T>,
    form: LossForm,
    groups: Vec<usize>,
) -> Result<Var> {
    tape.custom(&[pred], Box::new(CosineLoss { target, form, groups }))
}

/// Loss value without a tape.
pub fn cosine_loss_value<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, form: LossForm, groups: &[usize]) -> Result<f64> {
    let f = CosineLoss { target: target.clone(), form, groups: groups.to_vec() };
    Ok(f.forward(&[(pred.shape(), pred.data())])?.1[0].as_f64())
}

/// `teacher = eta * teacher + (1 - eta) * student`, elementwise, over the
/// teacher's parameters (the student's leading encoder subset).
pub fn ema_update<T: Scalar>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("EMA momentum must lie in [0, 1], got {eta}")));
    }
    if student.len() < teacher.len() {
        return Err(Error::Contract(format!(
            "student has {} parameters, teacher {}",
            student.len(),
            teacher.len()
        )));
    }
    for (i, p) in teacher.iter().enumerate() {
        let q = student.get(i);
        if p.name != q.name || p.value.shape() != q.value.shape() {
            return Err(Error::Contract(format!(
                "teacher `{}` {:?} does not match student `{}` {:?}",
                p.name,
                p.value.shape(),
                q.name,
                q.value.shape()
            )));
        }
    }
    let (keep, take) = (T::lit(eta), T::lit(1.0 - eta));
    for (i, p) in teacher.iter_mut().enumerate() {
        let src = student.get(i).value.data();
        for (a, &b) in p.value.data_mut().iter_mut().zip(src) {
            *a = keep * *a + take * b;
        }
    }
    Ok(())
}

/// Cosine momentum schedule from `start` at epoch 0 to `end` at the last
/// epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumSchedule {
    pub start: f64,
    pub end: f64,
    pub total_epochs: usize,
}

impl MomentumSchedule {
    pub fn new(total_epochs: usize) -> Self {
        MomentumSchedule { start: 0.96, end: 0.99, total_epochs }
    }

    /// `end - (end - start) * (1 + cos(pi * epoch / total)) / 2`. Epochs
    /// past the total are clamped.
    pub fn at(&self, epoch: usize) -> f64 {
        if self.total_epochs == 0 {
            return self.end;
        }
        let e = if epoch > self.total_epochs {
            log::warn!("momentum schedule: epoch {epoch} past total {}, clamping", self.total_epochs);
            self.total_epochs
        } else {
            epoch
        };
        if e == 0 {
            return self.start;
        }
        if e == self.total_epochs {
            return self.end;
        }
        let c = (1.0 + (std::f64::consts::PI * e as f64 / self.total_epochs as f64).cos()) / 2.0;
        self.end - (self.end - self.start) * c
    }
}

/// Default momentum schedule (0.96 to 0.99) at `epoch` of `total`.
pub fn eta_schedule(epoch: usize, total: usize) -> f64 {
    MomentumSchedule::new(total).at(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{plan_for, FeedingMode};
    use crate::vit::patchify;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn normalization_cases() {
        let mut c = Tensor::new(vec![1, 4], vec![3.0f64; 4]).unwrap();
        normalize_targets(&mut c, 1e-6);
        assert_eq!(c.data(), &[0.0; 4]);
        let mut t = Tensor::new(vec![1, 2], vec![1.0f64, 3.0]).unwrap();
        normalize_targets(&mut t, 0.0);
        assert_eq!(t.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn loss_anchor_values() {
        let t = rand_tensor(5, 8, 1);
        let mut neg = t.clone();
        neg.data_mut().iter_mut().for_each(|v| *v = -*v);
        for form in [LossForm::PerToken, LossForm::Global] {
            let g = [5];
            assert!(cosine_loss_value(&t, &t, form, &g).unwrap().abs() < 1e-12);
            assert!((cosine_loss_value(&neg, &t, form, &g).unwrap() - 2.0).abs() < 1e-12);
        }
        let a = Tensor::new(vec![2, 2], vec![1.0f64, 0.0, 0.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![0.0f64, 3.0, -1.0, 0.0]).unwrap();
        assert_eq!(cosine_loss_value(&a, &b, LossForm::PerToken, &[2]).unwrap(), 1.0);
        let err = cosine_loss_value(&a, &rand_tensor(3, 2, 0), LossForm::PerToken, &[3]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn global_form_differs_from_per_token() {
        let p = rand_tensor(6, 4, 2);
        let t = rand_tensor(6, 4, 3);
        let a = cosine_loss_value(&p, &t, LossForm::PerToken, &[3, 3]).unwrap();
        let b = cosine_loss_value(&p, &t, LossForm::Global, &[3, 3]).unwrap();
        assert!((a - b).abs() > 1e-6);
    }

    #[test]
    fn ema_fixed_points() {
        let model = ModelState::<f64>::new(ModelConfig { encoder_depth: 1, ..ModelConfig::toy() }, 0).unwrap();
        let mut other = ModelState::<f64>::new(ModelConfig { encoder_depth: 1, ..ModelConfig::toy() }, 1).unwrap();
        let mut teacher = other.encoder_params();
        let before = teacher.clone();
        ema_update(&mut teacher, &model.params, 1.0).unwrap();
        assert_eq!(teacher, before);
        ema_update(&mut teacher, &model.params, 0.0).unwrap();
        assert_eq!(teacher, model.encoder_params());
        other.params.get_mut(0).name.clear();
        assert!(matches!(ema_update(&mut teacher, &other.params, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn schedule_points() {
        assert_eq!(eta_schedule(0, 100), 0.96);
        assert_eq!(eta_schedule(100, 100), 0.99);
        assert!((eta_schedule(50, 100) - 0.975).abs() < 1e-15);
        assert_eq!(eta_schedule(150, 100), 0.99);
        let s = MomentumSchedule::new(37);
        assert!((0..=37).all(|e| s.at(e) <= s.at(e + 1)));
    }

    fn tiny_model() -> ModelState<f64> {
        let cfg = ModelConfig {
            image_size: 8,
            patch_size: 2,
            encoder_depth: 2,
            embed_dim: 16,
            decoder_dim: 8,
            num_heads: 2,
            decoder_heads: 2,
            mlp_ratio: 2,
            ..ModelConfig::toy()
        };
        ModelState::new(cfg, 5).unwrap()
    }

    fn patches(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        patchify(&px, 8, 3, 2).unwrap()
    }

    #[test]
    fn one_fold_equals_only_masked() {
        let model = tiny_model();
        let teacher = TeacherState::from_student(&model);
        let p = patches(1);
        let only = plan_for(16, 0.75, FeedingMode::OnlyMasked, 4).unwrap();
        let one = plan_for(16, 0.75, FeedingMode::MultiFold { folds: 1 }, 4).unwrap();
        let three = plan_for(16, 0.75, FeedingMode::MultiFold { folds: 3 }, 4).unwrap();
        let a = teacher.forward(&[&p], &[&only]).unwrap();
        let b = teacher.forward(&[&p], &[&one]).unwrap();
        let c = teacher.forward(&[&p], &[&three]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[12, 16]);
        assert_ne!(a, c);
    }

    #[test]
    fn full_image_and_crop_targets() {
        let model = tiny_model();
        let teacher = TeacherState::from_student(&model);
        let p = patches(2);
        let full = plan_for(16, 0.75, FeedingMode::FullImage, 4).unwrap();
        assert_eq!(teacher.forward(&[&p], &[&full]).unwrap().rows(), 12);
        let crop = plan_for(16, 0.75, FeedingMode::TeacherCrop { crop_ratio: 0.5 }, 4).unwrap();
        assert_eq!(teacher.forward(&[&p], &[&crop]).unwrap().rows(), 6);
        let mut broken = plan_for(16, 0.75, FeedingMode::MultiFold { folds: 3 }, 4).unwrap();
        broken.folds.pop();
        assert!(matches!(teacher.forward(&[&p], &[&broken]), Err(Error::Contract(_))));
    }

    #[test]
    fn batched_teacher_matches_single() {
        let model = tiny_model();
        let teacher = TeacherState::from_student(&model);
        let (p1, p2) = (patches(1), patches(2));
        let a = plan_for(16, 0.75, FeedingMode::MultiFold { folds: 3 }, 1).unwrap();
        let b = plan_for(16, 0.75, FeedingMode::MultiFold { folds: 3 }, 2).unwrap();
        let both = teacher.forward(&[&p1, &p2], &[&a, &b]).unwrap();
        let mut single = teacher.forward(&[&p1], &[&a]).unwrap().into_data();
        single.extend(teacher.forward(&[&p2], &[&b]).unwrap().into_data());
        for (x, y) in both.data().iter().zip(&single) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

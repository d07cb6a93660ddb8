//! Central finite-difference checks of every differentiable kernel and of
//! the full student loss, in double precision.
//!
//! Error metric per tensor: `max |analytic - numeric| / max(|analytic|_inf,
//! |numeric|_inf)`, so tiny gradient entries do not blow up the ratio.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::derive_seed;
use crate::distill::{CosineLoss, LossForm, TeacherState};
use crate::error::Result;
use crate::masking::{plan_for, FeedingMode, MaskPlan};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{student_loss, teacher_targets, TrainConfig};
use crate::vit::{ModelConfig, ModelState};

pub const STEP: f64 = 1e-5;
pub const KERNEL_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub kernel: String,
    pub case: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// `max |a - n| / max(|a|_inf, |n|_inf)`; zero when both are zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

type Build = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>;

/// Checks `f` by contracting its output with a fixed random tensor.
fn check_fn(kernel: &str, case: usize, inputs: &[Tensor<f64>], seed: u64, f: &Build) -> Result<CheckResult> {
    let out_shape = {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x9ad]));
    let proj = Tensor::from_fn(&out_shape, |_| rng.gen_range(-1.0..1.0));

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };

    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        let p = tape.constant(proj.clone());
        let prod = tape.mul(out, p)?;
        let loss = tape.sum(prod);
        let mut g = tape.backward(loss)?;
        vars.iter().zip(inputs).map(|(&v, t)| g.take(v).unwrap_or_else(|| vec![0.0; t.numel()])).collect()
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..a.len() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + STEP;
            let up = eval(&work)?;
            work[k].data_mut()[j] = orig - STEP;
            let down = eval(&work)?;
            work[k].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(a, &numeric));
    }
    Ok(CheckResult { kernel: kernel.to_string(), case, max_rel_err: worst, passed: worst < KERNEL_TOLERANCE })
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub const KERNELS: [&str; 20] = [
    "matmul",
    "matmul_chain",
    "add",
    "add_row",
    "mul",
    "mul_row",
    "scale",
    "scale_rows",
    "transpose",
    "reshape",
    "softmax",
    "layer_norm",
    "layer_norm_affine",
    "gelu",
    "slice_cols",
    "concat_rows",
    "gather_rows",
    "sum_mean",
    "attention",
    "cosine_loss",
];

/// One random case of `kernel`.
pub fn check_kernel(kernel: &str, case: usize, seed: u64) -> Result<CheckResult> {
    let seed = derive_seed(seed, &[case as u64, kernel.len() as u64, kernel.as_bytes()[0] as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
    let mut t = |shape: &[usize]| rand_t(&mut rng, shape);
    let run = |inputs: Vec<Tensor<f64>>, f: &Build| check_fn(kernel, case, &inputs, seed, f);
    match kernel {
        "matmul" => run(vec![t(&[m, k]), t(&[k, n])], &|tp, v| tp.matmul(v[0], v[1])),
        "matmul_chain" => run(vec![t(&[4, 5]), t(&[5, 3]), t(&[3, 2])], &|tp, v| {
            let ab = tp.matmul(v[0], v[1])?;
            tp.matmul(ab, v[2])
        }),
        "add" => run(vec![t(&[m, n]), t(&[m, n])], &|tp, v| tp.add(v[0], v[1])),
        "add_row" => run(vec![t(&[m, n]), t(&[n])], &|tp, v| tp.add_row(v[0], v[1])),
        "mul" => run(vec![t(&[m, n]), t(&[m, n])], &|tp, v| tp.mul(v[0], v[1])),
        "mul_row" => run(vec![t(&[m, n]), t(&[n])], &|tp, v| tp.mul_row(v[0], v[1])),
        "scale" => {
            let f = 0.5 + case as f64 * 0.3;
            run(vec![t(&[m, n])], &move |tp, v| Ok(tp.scale(v[0], f)))
        }
        "scale_rows" => {
            let factors: Vec<f64> = (0..m).map(|i| i as f64 - 1.5).collect();
            run(vec![t(&[m, n])], &move |tp, v| tp.scale_rows(v[0], factors.clone()))
        }
        "transpose" => run(vec![t(&[m, n])], &|tp, v| tp.transpose(v[0])),
        "reshape" => run(vec![t(&[m, n])], &move |tp, v| tp.reshape(v[0], vec![n, m])),
        "softmax" => {
            // mix in large magnitudes to exercise the max subtraction
            let mut x = t(&[m, n + 1]);
            x.data_mut().iter_mut().step_by(3).for_each(|v| *v *= 20.0);
            run(vec![x], &|tp, v| Ok(tp.softmax(v[0])))
        }
        "layer_norm" => run(vec![t(&[m, n + 1])], &|tp, v| tp.layer_norm(v[0], None)),
        "layer_norm_affine" => {
            run(vec![t(&[m, n + 1]), t(&[n + 1]), t(&[n + 1])], &|tp, v| tp.layer_norm(v[0], Some((v[1], v[2]))))
        }
        "gelu" => {
            let mut x = t(&[m, n]);
            x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            run(vec![x], &|tp, v| Ok(tp.gelu(v[0])))
        }
        "slice_cols" => {
            let start = case % n;
            let width = n - start;
            run(vec![t(&[m, n])], &move |tp, v| tp.slice_cols(v[0], start, width))
        }
        "concat_rows" => run(vec![t(&[m, n]), t(&[k, n])], &|tp, v| tp.concat_rows(&[v[0], v[1], v[0]])),
        "gather_rows" => {
            let index: Vec<usize> = (0..m + 3).map(|i| (i * 7 + case) % m).collect();
            run(vec![t(&[m, n])], &move |tp, v| tp.gather_rows(v[0], index.clone()))
        }
        "sum_mean" => run(vec![t(&[m, n])], &|tp, v| {
            let s = tp.sum(v[0]);
            let mu = tp.mean(v[0]);
            let s = tp.reshape(s, vec![1, 1])?;
            let mu = tp.reshape(mu, vec![1, 1])?;
            let both = tp.concat_rows(&[s, mu])?;
            tp.mul(both, both)
        }),
        "attention" => {
            let heads = 1 + case % 2;
            let dim = heads * (1 + case % 3);
            let segments: Vec<usize> = (0..1 + case % 3).map(|s| 1 + (s + case) % 4).collect();
            let rows = segments.iter().sum();
            run(vec![t(&[rows, 3 * dim])], &move |tp, v| tp.attention(v[0], &segments, heads))
        }
        "cosine_loss" => {
            let form = if case % 2 == 0 { LossForm::PerToken } else { LossForm::Global };
            let target = t(&[m + 1, n + 1]);
            let groups = if m + 1 > 1 { vec![1, m] } else { vec![1] };
            run(vec![t(&[m + 1, n + 1])], &move |tp, v| {
                tp.custom(&[v[0]], Box::new(CosineLoss { target: target.clone(), form, groups: groups.clone() }))
            })
        }
        other => Err(crate::Error::Config(format!("unknown kernel `{other}`"))),
    }
}

/// `cases` random cases of every kernel.
pub fn kernel_suite(cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::with_capacity(cases * KERNELS.len());
    for kernel in KERNELS {
        for case in 0..cases {
            out.push(check_kernel(kernel, case, seed)?);
        }
    }
    Ok(out)
}

/// Small model used by the end-to-end check: 2 encoder blocks, width 32.
pub fn end_to_end_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 2,
        channels: 3,
        encoder_depth: 2,
        decoder_depth: 1,
        embed_dim: 32,
        decoder_dim: 16,
        num_heads: 4,
        decoder_heads: 2,
        mlp_ratio: 2,
        drop_path_rate: 0.0,
        use_class_token: true,
        decoder_masked_only: false,
        patch_init: crate::vit::PatchInit::TruncNormal,
    }
}

/// Checks the gradient of the full student loss against finite differences
/// on a random `fraction` of all student parameter entries.
pub fn end_to_end(seed: u64, fraction: f64, mode: FeedingMode) -> Result<CheckResult> {
    let cfg = end_to_end_config();
    let mut model = ModelState::<f64>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xe2e]));
    // perturb away from the symmetric init so every path carries signal
    for p in model.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
    let teacher = TeacherState::from_student(&ModelState::<f64>::new(cfg.clone(), seed + 1)?);
    let images: Vec<Tensor<f64>> = (0..2).map(|_| rand_t(&mut rng, &[cfg.n_tokens(), cfg.patch_dim()])).collect();
    let plans: Vec<MaskPlan> =
        (0..2).map(|i| plan_for(cfg.n_tokens(), 0.75, mode, derive_seed(seed, &[i]))).collect::<Result<_>>()?;
    let patches: Vec<&Tensor<f64>> = images.iter().collect();
    let plan_refs: Vec<&MaskPlan> = plans.iter().collect();
    let train = TrainConfig::toy();
    let target = teacher_targets(&teacher, &patches, &plan_refs, &train)?;

    let loss_of = |m: &ModelState<f64>| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars = m.params.bind(&mut tape);
        let l = student_loss(&mut tape, &vars, m, &patches, &plan_refs, target.clone(), train.loss_form, None)?;
        Ok(tape.value(l)[0])
    };
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let l = student_loss(&mut tape, &vars, &model, &patches, &plan_refs, target.clone(), train.loss_form, None)?;
        let mut g = tape.backward(l)?;
        vars.iter().zip(model.params.iter()).map(|(&v, p)| g.take(v).unwrap_or_else(|| vec![0.0; p.value.numel()])).collect()
    };

    let mut a_sel = Vec::new();
    let mut n_sel = Vec::new();
    for pi in 0..model.params.len() {
        for j in 0..model.params.get(pi).value.numel() {
            if rng.gen::<f64>() >= fraction {
                continue;
            }
            let orig = model.params.get(pi).value.data()[j];
            model.params.get_mut(pi).value.data_mut()[j] = orig + STEP;
            let up = loss_of(&model)?;
            model.params.get_mut(pi).value.data_mut()[j] = orig - STEP;
            let down = loss_of(&model)?;
            model.params.get_mut(pi).value.data_mut()[j] = orig;
            a_sel.push(analytic[pi][j]);
            n_sel.push((up - down) / (2.0 * STEP));
        }
    }
    let err = relative_error(&a_sel, &n_sel);
    Ok(CheckResult {
        kernel: format!("end_to_end_{}", mode.name()),
        case: a_sel.len(),
        max_rel_err: err,
        passed: err < END_TO_END_TOLERANCE && !a_sel.is_empty(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_edges() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 1.0]), 0.5);
    }

    #[test]
    fn every_kernel_passes_once() {
        for kernel in KERNELS {
            let r = check_kernel(kernel, 0, 11).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // x * stop(x): analytic sees one factor, finite differences see both
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let r = check_fn("broken", 0, &[x], 1, &|tp, v| {
            let c = tp.tensor(v[0]);
            let c = tp.constant(c);
            tp.mul(v[0], c)
        })
        .unwrap();
        assert!(!r.passed, "{r:?}");
        assert!(r.max_rel_err > 0.3);
    }

    #[test]
    fn end_to_end_small_sample() {
        let r = end_to_end(3, 0.01, FeedingMode::MultiFold { folds: 2 }).unwrap();
        assert!(r.passed, "{r:?}");
    }
}

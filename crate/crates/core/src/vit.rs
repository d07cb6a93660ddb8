//! A small Vision Transformer: patch embedding, fixed 2D sinusoidal
//! positions, a pre-norm encoder that only ever sees the tokens it is given,
//! and a light decoder that fills masked positions with a shared mask token.
//!
//! Batches are processed as independent token sequences stacked row-wise;
//! attention never crosses sequence boundaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::tensor::{ParamSet, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub embed_dim: usize,
    pub decoder_dim: usize,
    pub num_heads: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    /// Stochastic depth on encoder residual branches during training.
    pub drop_path_rate: f64,
    pub use_class_token: bool,
    /// Decoder sequence holds only the class-token latent and the mask
    /// tokens instead of every position.
    pub decoder_masked_only: bool,
    /// Initialization of the patch projection weights.
    #[serde(default)]
    pub patch_init: PatchInit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchInit {
    /// Normal(0, 0.02) truncated at two standard deviations, like every other
    /// weight.
    #[default]
    TruncNormal,
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale model: 32x32 images, 64 tokens.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            encoder_depth: 4,
            decoder_depth: 2,
            embed_dim: 64,
            decoder_dim: 48,
            num_heads: 4,
            decoder_heads: 4,
            mlp_ratio: 4,
            drop_path_rate: 0.0,
            use_class_token: true,
            decoder_masked_only: false,
            patch_init: PatchInit::TruncNormal,
        }
    }

    /// ViT-B/16 with an MAE-sized decoder.
    pub fn base() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            encoder_depth: 12,
            decoder_depth: 8,
            embed_dim: 768,
            decoder_dim: 512,
            num_heads: 12,
            decoder_heads: 16,
            mlp_ratio: 4,
            drop_path_rate: 0.25,
            use_class_token: true,
            decoder_masked_only: false,
            patch_init: PatchInit::TruncNormal,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.channels == 0 || self.encoder_depth == 0 || self.decoder_depth == 0 || self.mlp_ratio == 0 {
            return bad("channels, depths and mlp_ratio must be positive".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return bad(format!(
                "decoder_dim {} not divisible by decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if self.embed_dim % 4 != 0 || self.decoder_dim % 4 != 0 {
            return bad("embed_dim and decoder_dim must be divisible by 4 for 2D sin-cos positions".into());
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop_path_rate must lie in [0, 1), got {}", self.drop_path_rate));
        }
        if self.decoder_masked_only && !self.use_class_token {
            return bad("decoder_masked_only needs the class token to carry encoder context".into());
        }
        Ok(())
    }
}

/// Splits an `H x W x C` (row-major, channel-last) image into `N` rows of
/// `P*P*C` values. Patches are ordered row-major over the grid and each row is
/// the row-major flattening of its `P x P x C` block.
pub fn patchify<T: Scalar>(pixels: &[T], size: usize, channels: usize, patch: usize) -> Result<Tensor<T>> {
    if patch == 0 || size == 0 || size % patch != 0 {
        return Err(Error::shape("patchify", format!("image side {size} not divisible by patch {patch}")));
    }
    if pixels.len() != size * size * channels {
        return Err(Error::shape(
            "patchify",
            format!("{} pixels for a {size}x{size}x{channels} image", pixels.len()),
        ));
    }
    let g = size / patch;
    let pdim = patch * patch * channels;
    let mut out = Vec::with_capacity(pixels.len());
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..patch {
                let start = ((gy * patch + py) * size + gx * patch) * channels;
                out.extend_from_slice(&pixels[start..start + patch * channels]);
            }
        }
    }
    Tensor::new(vec![g * g, pdim], out)
}

pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, size: usize, channels: usize, patch: usize) -> Result<Vec<T>> {
    let g = size / patch;
    if patch == 0 || size % patch != 0 || tokens.shape() != [g * g, patch * patch * channels] {
        return Err(Error::shape("unpatchify", format!("tokens {:?} for image side {size}", tokens.shape())));
    }
    let mut pixels = vec![T::zero(); size * size * channels];
    let row = patch * channels;
    for (i, tok) in tokens.data().chunks_exact(patch * row).enumerate() {
        let (gy, gx) = (i / g, i % g);
        for py in 0..patch {
            let start = ((gy * patch + py) * size + gx * patch) * channels;
            pixels[start..start + row].copy_from_slice(&tok[py * row..(py + 1) * row]);
        }
    }
    Ok(pixels)
}

/// Fixed 2D sin-cos positional table, `grid_side^2 x dim`. The first half
/// of each row encodes the column, the second half the row; each half is
/// `[sin(p * w_k)..., cos(p * w_k)...]` with `w_k = 10000^(-k / (dim/4))`.
pub fn pos_embed_2d(grid_side: usize, dim: usize) -> Result<Tensor<f64>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Config(format!("positional dim {dim} not divisible by 4")));
    }
    if grid_side == 0 {
        return Err(Error::Config("empty positional grid".into()));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter).map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64)).collect();
    let mut data = Vec::with_capacity(grid_side * grid_side * dim);
    for y in 0..grid_side {
        for x in 0..grid_side {
            for coord in [x as f64, y as f64] {
                data.extend(omega.iter().map(|w| (coord * w).sin()));
                data.extend(omega.iter().map(|w| (coord * w).cos()));
            }
        }
    }
    Tensor::new(vec![grid_side * grid_side, dim], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockIds {
    pub norm1: Linear,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Parameter positions of the encoder inside a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderIds {
    pub patch: Linear,
    pub cls_token: Option<usize>,
    pub blocks: Vec<BlockIds>,
    pub norm: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderIds {
    pub embed: Linear,
    pub mask_token: usize,
    pub blocks: Vec<BlockIds>,
    pub norm: Linear,
    pub pred: Linear,
}

struct Init<'r> {
    rng: &'r mut ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init<'_> {
    /// Normal(0, 0.02) truncated at two standard deviations.
    fn trunc_normal<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape, |_| loop {
            let v = self.normal.sample(self.rng);
            if v.abs() <= 0.04 {
                break T::lit(v);
            }
        })
    }

    fn xavier_uniform<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(&[fan_in, fan_out], |_| T::lit(self.rng.gen_range(-a..=a)))
    }
}

fn push_linear<T: Scalar>(ps: &mut ParamSet<T>, init: &mut Init<'_>, name: &str, i: usize, o: usize) -> Linear {
    let weight = ps.push(format!("{name}.weight"), init.trunc_normal(&[i, o]), true);
    let bias = ps.push(format!("{name}.bias"), Tensor::zeros(&[o]), false);
    Linear { weight, bias }
}

fn push_norm<T: Scalar>(ps: &mut ParamSet<T>, name: &str, d: usize) -> Linear {
    let weight = ps.push(format!("{name}.weight"), Tensor::full(&[d], T::one()), false);
    let bias = ps.push(format!("{name}.bias"), Tensor::zeros(&[d]), false);
    Linear { weight, bias }
}

fn push_block<T: Scalar>(ps: &mut ParamSet<T>, init: &mut Init<'_>, name: &str, d: usize, ratio: usize) -> BlockIds {
    BlockIds {
        norm1: push_norm(ps, &format!("{name}.norm1"), d),
        qkv: push_linear(ps, init, &format!("{name}.attn.qkv"), d, 3 * d),
        proj: push_linear(ps, init, &format!("{name}.attn.proj"), d, d),
        norm2: push_norm(ps, &format!("{name}.norm2"), d),
        fc1: push_linear(ps, init, &format!("{name}.mlp.fc1"), d, ratio * d),
        fc2: push_linear(ps, init, &format!("{name}.mlp.fc2"), ratio * d, d),
    }
}

/// Student parameters and fixed positional tables. The encoder parameters
/// come first in the set, so `params.prefix(n_encoder_params)` is exactly
/// the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub encoder_ids: EncoderIds,
    pub decoder_ids: DecoderIds,
    pub n_encoder_params: usize,
    pub encoder_pos: Tensor<T>,
    pub decoder_pos: Tensor<T>,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng, normal: Normal::new(0.0, 0.02).expect("valid std") };
        let (d, dd) = (config.embed_dim, config.decoder_dim);
        let mut ps = ParamSet::new();
        let patch = match config.patch_init {
            PatchInit::TruncNormal => push_linear(&mut ps, &mut init, "patch_embed", config.patch_dim(), d),
            PatchInit::XavierUniform => Linear {
                weight: ps.push("patch_embed.weight", init.xavier_uniform(config.patch_dim(), d), true),
                bias: ps.push("patch_embed.bias", Tensor::zeros(&[d]), false),
            },
        };
        let cls_token = config.use_class_token.then(|| ps.push("cls_token", init.trunc_normal(&[1, d]), false));
        let blocks = (0..config.encoder_depth)
            .map(|i| push_block(&mut ps, &mut init, &format!("encoder.block{i}"), d, config.mlp_ratio))
            .collect();
        let norm = push_norm(&mut ps, "encoder.norm", d);
        let encoder_ids = EncoderIds { patch, cls_token, blocks, norm };
        let n_encoder_params = ps.len();

        let embed = push_linear(&mut ps, &mut init, "decoder.embed", d, dd);
        let mask_token = ps.push("mask_token", init.trunc_normal(&[1, dd]), false);
        let blocks = (0..config.decoder_depth)
            .map(|i| push_block(&mut ps, &mut init, &format!("decoder.block{i}"), dd, config.mlp_ratio))
            .collect();
        let norm = push_norm(&mut ps, "decoder.norm", dd);
        let pred = push_linear(&mut ps, &mut init, "decoder.pred", dd, d);
        let decoder_ids = DecoderIds { embed, mask_token, blocks, norm, pred };

        let g = config.grid_side();
        Ok(ModelState {
            encoder_pos: pos_embed_2d(g, d)?.cast(),
            decoder_pos: pos_embed_2d(g, dd)?.cast(),
            config,
            params: ps,
            encoder_ids,
            decoder_ids,
            n_encoder_params,
        })
    }

    pub fn encoder(&self) -> EncoderView<'_, T> {
        EncoderView { config: &self.config, ids: &self.encoder_ids, pos: &self.encoder_pos }
    }

    pub fn decoder(&self) -> DecoderView<'_, T> {
        DecoderView { config: &self.config, ids: &self.decoder_ids, pos: &self.decoder_pos }
    }

    /// Copy of the encoder parameters (the subset the teacher mirrors).
    pub fn encoder_params(&self) -> ParamSet<T> {
        self.params.prefix(self.n_encoder_params)
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        let mut params = ParamSet::new();
        for p in self.params.iter() {
            params.push(p.name.clone(), p.value.cast(), p.decay);
        }
        ModelState {
            config: self.config.clone(),
            params,
            encoder_ids: self.encoder_ids.clone(),
            decoder_ids: self.decoder_ids.clone(),
            n_encoder_params: self.n_encoder_params,
            encoder_pos: self.encoder_pos.cast(),
            decoder_pos: self.decoder_pos.cast(),
        }
    }
}

/// Token sequences stacked row-wise: each is a subset of one image's patch
/// rows together with their grid positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeqBatch<T> {
    pub tokens: Vec<T>,
    pub positions: Vec<usize>,
    pub lens: Vec<usize>,
}

impl<T: Scalar> SeqBatch<T> {
    pub fn new() -> Self {
        SeqBatch { tokens: Vec::new(), positions: Vec::new(), lens: Vec::new() }
    }

    /// Appends the rows `idx` of `patches` (an `N x P*P*C` matrix) as one sequence.
    pub fn push(&mut self, patches: &Tensor<T>, idx: &[usize]) -> Result<()> {
        if idx.is_empty() {
            return Err(Error::MaskPlan("empty token sequence".into()));
        }
        let mut seen = vec![false; patches.rows()];
        for &i in idx {
            if i >= patches.rows() {
                return Err(Error::MaskPlan(format!("position {i} out of {} tokens", patches.rows())));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::MaskPlan(format!("duplicate position {i}")));
            }
            self.tokens.extend_from_slice(patches.row(i));
        }
        self.positions.extend_from_slice(idx);
        self.lens.push(idx.len());
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }
}

/// Stochastic depth settings for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DropPath {
    pub rate: f64,
    pub seed: u64,
}

/// Result of an encoder pass: `[sum(lens), embed_dim]`. With a class token,
/// each sequence starts with its class row.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub out: Var,
    pub lens: Vec<usize>,
    pub has_cls: bool,
    /// qkv activations of the block requested for capture, if any.
    pub captured_qkv: Option<Var>,
}

impl Encoded {
    pub fn offsets(&self) -> Vec<usize> {
        self.lens
            .iter()
            .scan(0, |acc, &l| {
                let o = *acc;
                *acc += l;
                Some(o)
            })
            .collect()
    }

    /// Row indices of the patch (non-class) outputs, per sequence.
    pub fn patch_rows(&self) -> Vec<std::ops::Range<usize>> {
        let skip = usize::from(self.has_cls);
        self.offsets().iter().zip(&self.lens).map(|(&o, &l)| o + skip..o + l).collect()
    }
}

fn linear<T: Scalar>(tape: &mut Tape<'_, T>, vars: &[Var], x: Var, l: Linear) -> Result<Var> {
    let y = tape.matmul(x, vars[l.weight])?;
    tape.add_row(y, vars[l.bias])
}

fn norm<T: Scalar>(tape: &mut Tape<'_, T>, vars: &[Var], x: Var, l: Linear) -> Result<Var> {
    tape.layer_norm(x, Some((vars[l.weight], vars[l.bias])))
}

/// Pre-norm transformer block. `drop` holds per-row residual-branch scales
/// for the attention and MLP branches. Returns `(output, qkv)`.
fn block<T: Scalar>(
    tape: &mut Tape<'_, T>,
    vars: &[Var],
    x: Var,
    ids: &BlockIds,
    lens: &[usize],
    heads: usize,
    drop: Option<(Vec<T>, Vec<T>)>,
) -> Result<(Var, Var)> {
    let (drop_attn, drop_mlp) = drop.unzip();
    let h = norm(tape, vars, x, ids.norm1)?;
    let qkv = linear(tape, vars, h, ids.qkv)?;
    let a = tape.attention(qkv, lens, heads)?;
    let mut a = linear(tape, vars, a, ids.proj)?;
    if let Some(f) = drop_attn {
        a = tape.scale_rows(a, f)?;
    }
    let x = tape.add(x, a)?;
    let h = norm(tape, vars, x, ids.norm2)?;
    let h = linear(tape, vars, h, ids.fc1)?;
    let h = tape.gelu(h);
    let mut m = linear(tape, vars, h, ids.fc2)?;
    if let Some(f) = drop_mlp {
        m = tape.scale_rows(m, f)?;
    }
    Ok((tape.add(x, m)?, qkv))
}

/// Per-row residual scales: each sequence's branch is dropped with
/// probability `rate`, kept ones are scaled by `1 / (1 - rate)`.
fn drop_scales<T: Scalar>(rng: &mut ChaCha8Rng, rate: f64, lens: &[usize]) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    let mut out = Vec::with_capacity(lens.iter().sum());
    for &l in lens {
        let f = if rng.gen::<f64>() < rate { T::zero() } else { keep };
        out.extend(std::iter::repeat(f).take(l));
    }
    out
}

/// Encoder bound to a configuration and positional table. Parameters are
/// passed as tape vars so the same view drives the student and the teacher.
#[derive(Clone, Copy)]
pub struct EncoderView<'m, T> {
    pub config: &'m ModelConfig,
    pub ids: &'m EncoderIds,
    pub pos: &'m Tensor<T>,
}

impl<'m, T: Scalar> EncoderView<'m, T> {
    pub fn new(config: &'m ModelConfig, ids: &'m EncoderIds, pos: &'m Tensor<T>) -> Self {
        EncoderView { config, ids, pos }
    }

    /// Encodes every sequence of `batch` independently.
    pub fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        vars: &[Var],
        batch: &SeqBatch<T>,
        drop: Option<DropPath>,
        capture_block: Option<usize>,
    ) -> Result<Encoded> {
        let cfg = self.config;
        let rows = batch.rows();
        if rows == 0 {
            return Err(Error::MaskPlan("encoder called with no tokens".into()));
        }
        if let Some(&p) = batch.positions.iter().find(|&&p| p >= cfg.n_tokens()) {
            return Err(Error::MaskPlan(format!("position {p} out of {} tokens", cfg.n_tokens())));
        }
        let tokens = tape.constant(Tensor::new(vec![rows, cfg.patch_dim()], batch.tokens.clone())?);
        let emb = linear(tape, vars, tokens, self.ids.patch)?;
        let pos = tape.constant(self.pos.select_rows(&batch.positions)?);
        let mut x = tape.add(emb, pos)?;
        let mut lens = batch.lens.clone();
        if let Some(cls) = self.ids.cls_token {
            let cat = tape.concat_rows(&[x, vars[cls]])?;
            let mut index = Vec::with_capacity(rows + lens.len());
            let mut off = 0;
            for &l in &batch.lens {
                index.push(rows);
                index.extend(off..off + l);
                off += l;
            }
            x = tape.gather_rows(cat, index)?;
            lens.iter_mut().for_each(|l| *l += 1);
        }
        let mut rng = drop.map(|d| ChaCha8Rng::seed_from_u64(d.seed));
        let mut captured_qkv = None;
        for (i, ids) in self.ids.blocks.iter().enumerate() {
            let scales = match (drop, rng.as_mut()) {
                (Some(d), Some(rng)) if d.rate > 0.0 => {
                    Some((drop_scales(rng, d.rate, &lens), drop_scales(rng, d.rate, &lens)))
                }
                _ => None,
            };
            let (next, qkv) = block(tape, vars, x, ids, &lens, cfg.num_heads, scales)?;
            if capture_block == Some(i) {
                captured_qkv = Some(qkv);
            }
            x = next;
        }
        let out = norm(tape, vars, x, self.ids.norm)?;
        Ok(Encoded { out, lens, has_cls: self.ids.cls_token.is_some(), captured_qkv })
    }
}

#[derive(Clone, Copy)]
pub struct DecoderView<'m, T> {
    pub config: &'m ModelConfig,
    pub ids: &'m DecoderIds,
    pub pos: &'m Tensor<T>,
}

impl<'m, T: Scalar> DecoderView<'m, T> {
    /// Predicts teacher features at `plan.targets()` for every sequence.
    /// `encoded` must come from encoding each plan's visible tokens, in
    /// order. Output is `[sum(targets), embed_dim]`.
    pub fn forward(&self, tape: &mut Tape<'_, T>, vars: &[Var], encoded: &Encoded, plans: &[&MaskPlan]) -> Result<Var> {
        let cfg = self.config;
        let n = cfg.n_tokens();
        let cls = usize::from(encoded.has_cls);
        if plans.len() != encoded.lens.len() {
            return Err(Error::Contract(format!(
                "{} mask plans for {} encoded sequences",
                plans.len(),
                encoded.lens.len()
            )));
        }
        for (s, (plan, &len)) in plans.iter().zip(&encoded.lens).enumerate() {
            if plan.n_tokens != n || plan.visible.len() + cls != len {
                return Err(Error::Contract(format!(
                    "sequence {s}: plan has {} visible of {} tokens, encoder produced {len} rows",
                    plan.visible.len(),
                    plan.n_tokens
                )));
            }
        }
        let y = linear(tape, vars, encoded.out, self.ids.embed)?;
        let enc_rows = tape.shape(y)[0];
        let mask_row = enc_rows;
        let cat = tape.concat_rows(&[y, vars[self.ids.mask_token]])?;

        let dd = cfg.decoder_dim;
        let mut index = Vec::new();
        let mut pos = Vec::new();
        let mut lens = Vec::with_capacity(plans.len());
        let mut target_rows = Vec::new();
        let push_pos = |pos: &mut Vec<T>, p: Option<usize>| match p {
            Some(p) => pos.extend_from_slice(self.pos.row(p)),
            None => pos.extend(std::iter::repeat(T::zero()).take(dd)),
        };
        for (plan, off) in plans.iter().zip(encoded.offsets()) {
            let start = index.len();
            if cls == 1 {
                index.push(off);
                push_pos(&mut pos, None);
            }
            if cfg.decoder_masked_only {
                for &p in &plan.masked {
                    index.push(mask_row);
                    push_pos(&mut pos, Some(p));
                }
                let mut k = 0;
                for &t in plan.targets() {
                    while plan.masked[k] != t {
                        k += 1;
                    }
                    target_rows.push(start + cls + k);
                }
            } else {
                let mut vis = plan.visible.iter().peekable();
                let mut rank = 0;
                for p in 0..n {
                    if vis.peek() == Some(&&p) {
                        vis.next();
                        index.push(off + cls + rank);
                        rank += 1;
                    } else {
                        index.push(mask_row);
                    }
                    push_pos(&mut pos, Some(p));
                }
                target_rows.extend(plan.targets().iter().map(|&t| start + cls + t));
            }
            lens.push(index.len() - start);
        }
        let rows = index.len();
        let x = tape.gather_rows(cat, index)?;
        let pos = tape.constant(Tensor::new(vec![rows, dd], pos)?);
        let mut x = tape.add(x, pos)?;
        for ids in &self.ids.blocks {
            x = block(tape, vars, x, ids, &lens, cfg.decoder_heads, None)?.0;
        }
        let x = norm(tape, vars, x, self.ids.norm)?;
        let x = tape.gather_rows(x, target_rows)?;
        linear(tape, vars, x, self.ids.pred)
    }
}

/// Class-token attention of one encoder block, per head, over patch
/// positions only (the class-to-class weight is dropped and each row
/// renormalized).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionMap {
    pub grid_side: usize,
    pub block: usize,
    pub heads: Vec<Vec<f32>>,
    pub mean: Vec<f32>,
}

impl AttentionMap {
    /// Binary 8-bit PGM of one map, scaled so its maximum is white.
    pub fn to_pgm(map: &[f32], side: usize) -> Vec<u8> {
        let max = map.iter().copied().fold(0.0f32, f32::max);
        let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
        out.extend(map.iter().map(|&v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 }));
        out
    }
}

/// Runs the encoder on every patch of one image and reads the class-token
/// query's attention in `block` (last block when `None`).
pub fn attention_map<T: Scalar>(model: &ModelState<T>, patches: &Tensor<T>, block: Option<usize>) -> Result<AttentionMap> {
    let cfg = &model.config;
    if model.encoder_ids.cls_token.is_none() {
        return Err(Error::FeatureUnavailable("attention maps need the class token (use_class_token = false)".into()));
    }
    let block = block.unwrap_or(cfg.encoder_depth - 1);
    if block >= cfg.encoder_depth {
        return Err(Error::Config(format!("block {block} out of {} encoder blocks", cfg.encoder_depth)));
    }
    let n = cfg.n_tokens();
    let mut batch = SeqBatch::new();
    batch.push(patches, &(0..n).collect::<Vec<_>>())?;
    let mut tape = Tape::no_grad();
    let vars = model.params.bind(&mut tape);
    let enc = model.encoder().forward(&mut tape, &vars, &batch, None, Some(block))?;
    let qkv = tape.value(enc.captured_qkv.expect("capture requested"));
    let d = cfg.embed_dim;
    let dh = d / cfg.num_heads;
    let w = 3 * d;
    let len = n + 1;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let q = &qkv[h * dh..(h + 1) * dh];
        let scores: Vec<f64> = (0..len)
            .map(|j| {
                let k = &qkv[j * w + d + h * dh..j * w + d + (h + 1) * dh];
                q.iter().zip(k).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum::<f64>() * scale
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores[1..].iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        heads.push(e.iter().map(|v| (v / z) as f32).collect::<Vec<f32>>());
    }
    let mean = (0..n).map(|j| heads.iter().map(|h| h[j]).sum::<f32>() / cfg.num_heads as f32).collect();
    Ok(AttentionMap { grid_side: cfg.grid_side(), block, heads, mean })
}

//! Random patch masks, teacher-branch token selection and the attention
//! cost model for each way of feeding the teacher.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the teacher encoder receives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeedingMode {
    /// All `N` tokens in one sequence; targets read at masked positions.
    FullImage,
    /// All masked tokens in one sequence.
    OnlyMasked,
    /// A random subset of the masked tokens; `crop_ratio` is the fraction
    /// cropped away. The loss only covers the retained tokens.
    TeacherCrop { crop_ratio: f64 },
    /// Masked tokens split into `folds` disjoint groups, each forwarded on
    /// its own.
    MultiFold { folds: usize },
}

impl FeedingMode {
    pub fn name(&self) -> &'static str {
        match self {
            FeedingMode::FullImage => "full_image",
            FeedingMode::OnlyMasked => "only_masked",
            FeedingMode::TeacherCrop { .. } => "teacher_crop",
            FeedingMode::MultiFold { .. } => "multi_fold",
        }
    }

    /// Parses a mode name; `t` and `r_c` fill the parameterized variants.
    pub fn parse(name: &str, t: usize, r_c: f64) -> Result<Self> {
        match name {
            "full_image" => Ok(FeedingMode::FullImage),
            "only_masked" => Ok(FeedingMode::OnlyMasked),
            "teacher_crop" => Ok(FeedingMode::TeacherCrop { crop_ratio: r_c }),
            "multi_fold" => Ok(FeedingMode::MultiFold { folds: t }),
            other => Err(Error::Config(format!(
                "unknown feeding mode `{other}` (expected full_image, only_masked, teacher_crop or multi_fold)"
            ))),
        }
    }
}

impl fmt::Display for FeedingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n_tokens: usize,
    pub mask_ratio: f64,
    /// Sorted indices the student encoder sees.
    pub visible: Vec<usize>,
    /// Sorted indices hidden from the student.
    pub masked: Vec<usize>,
    /// Teacher input groups: the folds in multi-fold mode, the retained
    /// subset in teacher-crop mode, all masked tokens in only-masked mode,
    /// and empty in full-image mode. Each group is sorted.
    pub folds: Vec<Vec<usize>>,
    pub feeding_mode: FeedingMode,
    pub seed: u64,
}

/// Number of masked tokens for `n` tokens at ratio `r`, rounding half up.
pub fn masked_count(n: usize, r: f64) -> usize {
    (n as f64 * r).round() as usize
}

/// Samples a uniformly random masked subset of size `round(n * r)`.
pub fn sample_mask(n: usize, r: f64, seed: u64) -> Result<MaskPlan> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 tokens to mask, got {n}")));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Config(format!("mask ratio must lie in (0, 1), got {r}")));
    }
    let m = masked_count(n, r);
    if m == 0 || m == n {
        return Err(Error::Config(format!(
            "mask ratio {r} over {n} tokens masks {m}: no reconstruction target or no student input"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = index::sample(&mut rng, n, m).into_vec();
    masked.sort_unstable();
    let hidden: BTreeSet<usize> = masked.iter().copied().collect();
    let visible = (0..n).filter(|i| !hidden.contains(i)).collect();
    Ok(MaskPlan {
        n_tokens: n,
        mask_ratio: r,
        visible,
        masked: masked.clone(),
        folds: vec![masked],
        feeding_mode: FeedingMode::OnlyMasked,
        seed,
    })
}

/// Balanced sizes for splitting `m` items into `t` groups: the first `m % t`
/// groups get one extra.
pub fn fold_sizes(m: usize, t: usize) -> Vec<usize> {
    (0..t).map(|i| m / t + usize::from(i < m % t)).collect()
}

/// Randomly partitions the masked tokens into `t` balanced, disjoint folds.
pub fn partition_folds(plan: &MaskPlan, t: usize, seed: u64) -> Result<MaskPlan> {
    let m = plan.masked.len();
    if t == 0 || t > m {
        return Err(Error::Config(format!("fold count must lie in [1, {m}], got {t}")));
    }
    let mut order = plan.masked.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = Vec::with_capacity(t);
    let mut rest = &order[..];
    for size in fold_sizes(m, t) {
        let (head, tail) = rest.split_at(size);
        let mut fold = head.to_vec();
        fold.sort_unstable();
        folds.push(fold);
        rest = tail;
    }
    Ok(MaskPlan { folds, feeding_mode: FeedingMode::MultiFold { folds: t }, ..plan.clone() })
}

/// Number of masked tokens kept by a teacher crop with crop ratio `r_c`.
pub fn retained_count(masked: usize, r_c: f64) -> usize {
    (masked as f64 * (1.0 - r_c)).round() as usize
}

/// Keeps a random `round(|masked| * (1 - r_c))` subset of the masked tokens
/// as teacher input and loss targets.
pub fn teacher_crop(plan: &MaskPlan, r_c: f64, seed: u64) -> Result<MaskPlan> {
    if !(r_c > 0.0 && r_c < 1.0) {
        return Err(Error::Config(format!("teacher crop ratio must lie in (0, 1), got {r_c}")));
    }
    let keep = retained_count(plan.masked.len(), r_c);
    if keep == 0 {
        return Err(Error::Config(format!(
            "teacher crop ratio {r_c} retains no token out of {}",
            plan.masked.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut retained: Vec<usize> =
        index::sample(&mut rng, plan.masked.len(), keep).into_iter().map(|i| plan.masked[i]).collect();
    retained.sort_unstable();
    Ok(MaskPlan {
        folds: vec![retained],
        feeding_mode: FeedingMode::TeacherCrop { crop_ratio: r_c },
        ..plan.clone()
    })
}

/// Samples a complete plan for the given feeding mode. `seed` drives the
/// mask and a derived stream drives the fold split / crop.
pub fn plan_for(n: usize, r: f64, mode: FeedingMode, seed: u64) -> Result<MaskPlan> {
    let base = sample_mask(n, r, seed)?;
    let sub = seed ^ 0x9e37_79b9_7f4a_7c15;
    match mode {
        FeedingMode::FullImage => Ok(MaskPlan { folds: Vec::new(), feeding_mode: mode, ..base }),
        FeedingMode::OnlyMasked => Ok(base),
        FeedingMode::TeacherCrop { crop_ratio } => teacher_crop(&base, crop_ratio, sub),
        FeedingMode::MultiFold { folds } => partition_folds(&base, folds, sub),
    }
}

impl MaskPlan {
    /// Positions at which the loss is computed, sorted.
    pub fn targets(&self) -> &[usize] {
        match self.feeding_mode {
            FeedingMode::TeacherCrop { .. } => &self.folds[0],
            _ => &self.masked,
        }
    }

    /// Token groups forwarded independently through the teacher.
    pub fn teacher_groups(&self) -> Vec<Vec<usize>> {
        match self.feeding_mode {
            FeedingMode::FullImage => vec![(0..self.n_tokens).collect()],
            _ => self.folds.clone(),
        }
    }

    /// Row-major ASCII rendering: `.` visible, fold digit (1-based) for
    /// teacher-group members, `#` for masked tokens in no group.
    pub fn ascii_grid(&self) -> String {
        let side = (self.n_tokens as f64).sqrt().round() as usize;
        let width = if side * side == self.n_tokens { side } else { self.n_tokens };
        let mut cells = vec!['#'; self.n_tokens];
        for &v in &self.visible {
            cells[v] = '.';
        }
        if self.feeding_mode != FeedingMode::FullImage {
            for (f, fold) in self.folds.iter().enumerate() {
                let c = std::char::from_digit((f as u32 + 1) % 36, 36).unwrap_or('*');
                for &i in fold {
                    cells[i] = c;
                }
            }
        }
        let mut out = String::new();
        for row in cells.chunks(width) {
            out.extend(row.iter().flat_map(|&c| [c, ' ']));
            out.pop();
            out.push('\n');
        }
        out
    }
}

/// A broken [`MaskPlan`] invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    IndexOutOfRange(usize),
    VisibleMaskedOverlap(usize),
    NotCovered(usize),
    Unsorted(&'static str),
    MaskedCount { expected: usize, actual: usize },
    FoldVisibleOverlap(usize),
    FoldOverlap(usize),
    FoldCoverage,
    FoldImbalance { min: usize, max: usize },
    FoldCount { expected: usize, actual: usize },
    CropNotSubset(usize),
    EmptyGroup,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::IndexOutOfRange(i) => write!(f, "index {i} out of range"),
            Violation::VisibleMaskedOverlap(i) => write!(f, "visible-masked overlap at {i}"),
            Violation::NotCovered(i) => write!(f, "token {i} neither visible nor masked"),
            Violation::Unsorted(which) => write!(f, "{which} indices not strictly increasing"),
            Violation::MaskedCount { expected, actual } => {
                write!(f, "masked count {actual}, expected round(N*r) = {expected}")
            }
            Violation::FoldVisibleOverlap(i) => write!(f, "fold-visible overlap at token {i}"),
            Violation::FoldOverlap(i) => write!(f, "fold-fold overlap at token {i}"),
            Violation::FoldCoverage => write!(f, "folds do not cover the masked set"),
            Violation::FoldImbalance { min, max } => write!(f, "imbalance > 1 (fold sizes {min}..{max})"),
            Violation::FoldCount { expected, actual } => write!(f, "{actual} folds, expected {expected}"),
            Violation::CropNotSubset(i) => write!(f, "teacher crop token {i} is not masked"),
            Violation::EmptyGroup => write!(f, "empty teacher group"),
        }
    }
}

fn strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

/// Checks every plan invariant; an empty result means the plan is valid.
pub fn validate(plan: &MaskPlan) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = plan.n_tokens;
    for &i in plan.visible.iter().chain(&plan.masked).chain(plan.folds.iter().flatten()) {
        if i >= n {
            out.push(Violation::IndexOutOfRange(i));
        }
    }
    if !strictly_increasing(&plan.visible) {
        out.push(Violation::Unsorted("visible"));
    }
    if !strictly_increasing(&plan.masked) {
        out.push(Violation::Unsorted("masked"));
    }
    let visible: BTreeSet<usize> = plan.visible.iter().copied().collect();
    let masked: BTreeSet<usize> = plan.masked.iter().copied().collect();
    out.extend(visible.intersection(&masked).map(|&i| Violation::VisibleMaskedOverlap(i)));
    out.extend((0..n).filter(|i| !visible.contains(i) && !masked.contains(i)).map(Violation::NotCovered));
    let expected = masked_count(n, plan.mask_ratio);
    if plan.masked.len() != expected {
        out.push(Violation::MaskedCount { expected, actual: plan.masked.len() });
    }
    if plan.folds.iter().any(|f| f.is_empty()) {
        out.push(Violation::EmptyGroup);
    }
    for f in &plan.folds {
        if !strictly_increasing(f) {
            out.push(Violation::Unsorted("fold"));
        }
        out.extend(f.iter().filter(|i| visible.contains(i)).map(|&i| Violation::FoldVisibleOverlap(i)));
    }
    match plan.feeding_mode {
        FeedingMode::FullImage => {
            if !plan.folds.is_empty() {
                out.push(Violation::FoldCount { expected: 0, actual: plan.folds.len() });
            }
        }
        FeedingMode::OnlyMasked | FeedingMode::MultiFold { .. } => {
            let want = match plan.feeding_mode {
                FeedingMode::MultiFold { folds } => folds,
                _ => 1,
            };
            if plan.folds.len() != want {
                out.push(Violation::FoldCount { expected: want, actual: plan.folds.len() });
            }
            let mut seen = BTreeSet::new();
            for &i in plan.folds.iter().flatten() {
                if !seen.insert(i) {
                    out.push(Violation::FoldOverlap(i));
                }
            }
            if seen != masked {
                out.push(Violation::FoldCoverage);
            }
            let sizes = plan.folds.iter().map(Vec::len);
            if let (Some(min), Some(max)) = (sizes.clone().min(), sizes.max()) {
                if max - min > 1 {
                    out.push(Violation::FoldImbalance { min, max });
                }
            }
        }
        FeedingMode::TeacherCrop { .. } => {
            if plan.folds.len() != 1 {
                out.push(Violation::FoldCount { expected: 1, actual: plan.folds.len() });
            }
            out.extend(
                plan.folds.iter().flatten().filter(|i| !masked.contains(i)).map(|&i| Violation::CropNotSubset(i)),
            );
        }
    }
    out
}

/// Cost model row identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostMode {
    FullImage,
    OnlyMasked,
    TeacherCrop,
    MultiFold,
}

impl FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_image" => Ok(CostMode::FullImage),
            "only_masked" => Ok(CostMode::OnlyMasked),
            "teacher_crop" => Ok(CostMode::TeacherCrop),
            "multi_fold" => Ok(CostMode::MultiFold),
            other => Err(Error::Config(format!("unknown cost mode `{other}`"))),
        }
    }
}

impl CostMode {
    pub const ALL: [CostMode; 4] = [CostMode::FullImage, CostMode::OnlyMasked, CostMode::TeacherCrop, CostMode::MultiFold];

    pub fn name(self) -> &'static str {
        match self {
            CostMode::FullImage => "full_image",
            CostMode::OnlyMasked => "only_masked",
            CostMode::TeacherCrop => "teacher_crop",
            CostMode::MultiFold => "multi_fold",
        }
    }
}

/// Which fraction the crop factor of the teacher-crop cost stands for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CropReading {
    /// Factor is the retained fraction `1 - r_c` (matches [`teacher_crop`]).
    #[default]
    Retained,
    /// Factor is `r_c` as given.
    Literal,
}

impl FromStr for CropReading {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retained" => Ok(CropReading::Retained),
            "literal" => Ok(CropReading::Literal),
            other => Err(Error::Config(format!("unknown crop reading `{other}` (retained or literal)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub n: f64,
    pub d: f64,
    pub r: f64,
    pub r_c: f64,
    pub t: f64,
    pub reading: CropReading,
}

/// Teacher self-attention cost, evaluated literally:
/// full `n^2 d`, only-masked `n^2 r^2 d`, crop `n^2 c^2 r^2 d`,
/// multi-fold `(n/t)^2 t r^2 d`.
pub fn complexity_estimate(mode: CostMode, p: &CostParams) -> Result<f64> {
    if p.n <= 0.0 || p.d <= 0.0 {
        return Err(Error::Config(format!("n and d must be positive (n={}, d={})", p.n, p.d)));
    }
    if mode != CostMode::FullImage && !(p.r > 0.0 && p.r < 1.0) {
        return Err(Error::Config(format!("mask ratio must lie in (0, 1), got {}", p.r)));
    }
    let (n, d, r) = (p.n, p.d, p.r);
    Ok(match mode {
        CostMode::FullImage => n * n * d,
        CostMode::OnlyMasked => n * n * r * r * d,
        CostMode::TeacherCrop => {
            if !(p.r_c > 0.0 && p.r_c < 1.0) {
                return Err(Error::Config(format!("teacher crop ratio must lie in (0, 1), got {}", p.r_c)));
            }
            let c = match p.reading {
                CropReading::Retained => 1.0 - p.r_c,
                CropReading::Literal => p.r_c,
            };
            n * n * c * c * r * r * d
        }
        CostMode::MultiFold => {
            if p.t < 1.0 {
                return Err(Error::Config(format!("fold count must be >= 1, got {}", p.t)));
            }
            (n / p.t) * (n / p.t) * p.t * r * r * d
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub mode: CostMode,
    pub params: CostParams,
    pub cost: f64,
    pub ratio_vs_full: f64,
}

/// One row per mode (teacher crop once per reading).
pub fn complexity_report(n: f64, d: f64, r: f64, r_c: f64, t: f64) -> Result<Vec<CostRow>> {
    let base = CostParams { n, d, r, r_c, t, reading: CropReading::Retained };
    let full = complexity_estimate(CostMode::FullImage, &base)?;
    let mut rows = Vec::new();
    for mode in CostMode::ALL {
        let readings: &[CropReading] = if mode == CostMode::TeacherCrop {
            &[CropReading::Retained, CropReading::Literal]
        } else {
            &[CropReading::Retained]
        };
        for &reading in readings {
            let params = CostParams { reading, ..base };
            let cost = complexity_estimate(mode, &params)?;
            rows.push(CostRow { mode, params, cost, ratio_vs_full: cost / full });
        }
    }
    Ok(rows)
}

pub fn report_csv(rows: &[CostRow]) -> String {
    let mut s = String::from("mode,n,d,r,r_c,t,cost,ratio_vs_full\n");
    for row in rows {
        let p = &row.params;
        let mode = match (row.mode, p.reading) {
            (CostMode::TeacherCrop, CropReading::Literal) => "teacher_crop_literal".to_string(),
            (m, _) => m.name().to_string(),
        };
        s.push_str(&format!("{mode},{},{},{},{},{},{},{}\n", p.n, p.d, p.r, p.r_c, p.t, row.cost, row.ratio_vs_full));
    }
    s
}

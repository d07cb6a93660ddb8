//! Image datasets: PPM and packed-file I/O, a labeled synthetic shape
//! generator, per-channel standardization, augmentation and seeded batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mixes a root seed with stream identifiers (splitmix64 per part).
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    let mut z = root;
    for &p in parts {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p.wrapping_mul(0xd6e8_feb8_6659_fd93));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// 8-bit image, row-major `size x size x channels`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub size: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    PpmDir { path: PathBuf },
    PackedFile { path: PathBuf },
    Synthetic(SyntheticParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: Source,
    pub image_size: usize,
    pub channels: usize,
    pub n_items: usize,
    pub has_labels: bool,
    pub class_count: usize,
    /// Per-channel mean of pixel / 255 over the dataset.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// In-memory dataset. Pixels stay 8-bit; [`Dataset::standardized`] yields
/// model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
    pub labels: Option<Vec<u16>>,
}

impl Dataset {
    /// Builds a dataset and computes its channel statistics.
    pub fn new(source: Source, images: Vec<Image>, labels: Option<Vec<u16>>, class_count: usize) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Config("dataset has no images".into()))?;
        let (size, channels) = (first.size, first.channels);
        for (i, im) in images.iter().enumerate() {
            if im.size != size || im.channels != channels || im.pixels.len() != size * size * channels {
                return Err(Error::Format(format!(
                    "image {i} is {}x{}x{}, expected {size}x{size}x{channels}",
                    im.size, im.size, im.channels
                )));
            }
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::Format(format!("{} labels for {} images", l.len(), images.len())));
            }
            if let Some(&bad) = l.iter().find(|&&v| v as usize >= class_count) {
                return Err(Error::Config(format!("label {bad} outside [0, {class_count})")));
            }
        }
        let (mean, std) = channel_stats(&images, channels);
        let manifest = DatasetManifest {
            source,
            image_size: size,
            channels,
            n_items: images.len(),
            has_labels: labels.is_some(),
            class_count,
            mean,
            std,
        };
        Ok(Dataset { manifest, images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Image `i` as `(pixel / 255 - mean_c) / std_c`.
    pub fn standardized(&self, i: usize) -> Vec<f32> {
        let m = &self.manifest;
        let c = m.channels;
        self.images[i]
            .pixels
            .iter()
            .enumerate()
            .map(|(k, &p)| ((p as f64 / 255.0 - m.mean[k % c]) / m.std[k % c]) as f32)
            .collect()
    }

    /// Items at `idx` as a new dataset with the statistics of `self`.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut manifest = self.manifest.clone();
        manifest.n_items = idx.len();
        Dataset {
            manifest,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Reuses another dataset's channel statistics (e.g. a held-out split
    /// standardized like the training set).
    pub fn with_stats_of(mut self, other: &Dataset) -> Dataset {
        self.manifest.mean = other.manifest.mean.clone();
        self.manifest.std = other.manifest.std.clone();
        self
    }
}

fn channel_stats(images: &[Image], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut count = 0usize;
    for im in images {
        for px in im.pixels.chunks_exact(channels) {
            for (c, &v) in px.iter().enumerate() {
                let v = v as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
            count += 1;
        }
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq.iter().zip(&mean).map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6)).collect();
    (mean, std)
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse { offset, msg: msg.into() }
}

/// Parses a binary PPM (P6, maxval 255).
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    if bytes.get(..2) != Some(b"P6") {
        return Err(parse_err(0, "missing P6 magic"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(parse_err(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(pos, format!("expected header field {}", ["width", "height", "maxval"][k])));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, "header number out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(parse_err(pos, format!("maxval {maxval} unsupported (only 255)")));
    }
    if w != h || w == 0 {
        return Err(parse_err(pos, format!("image must be square and nonempty, got {w}x{h}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let need = w * h * 3;
    let payload = bytes.get(pos..pos + need).ok_or_else(|| {
        parse_err(bytes.len(), format!("truncated payload: {} of {need} bytes", bytes.len() - pos))
    })?;
    Ok(Image { size: w, channels: 3, pixels: payload.to_vec() })
}

pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    if image.channels != 3 {
        return Err(Error::Format(format!("PPM needs 3 channels, image has {}", image.channels)));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.size, image.size).into_bytes();
    out.extend_from_slice(&image.pixels);
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

/// Loads every `*.ppm` in `dir`, sorted by file name. No labels.
pub fn load_ppm_dir(dir: &Path) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    let images = paths.iter().map(|p| read_ppm(p)).collect::<Result<Vec<_>>>()?;
    Dataset::new(Source::PpmDir { path: dir.to_path_buf() }, images, None, 0)
}

pub const SDDS_MAGIC: &[u8; 4] = b"SDDS";
pub const SDDS_VERSION: u32 = 1;

/// Packed dataset: magic, u32 version, u32 count, u16 size, u8 channels,
/// u8 label flag, then per item an optional u16 label and raw pixels. All
/// integers little-endian.
pub fn encode_sdds(images: &[Image], labels: Option<&[u16]>) -> Result<Vec<u8>> {
    let (size, channels) = images.first().map_or((0, 0), |im| (im.size, im.channels));
    if size > u16::MAX as usize || channels > u8::MAX as usize {
        return Err(Error::Format(format!("image {size}x{size}x{channels} does not fit the header")));
    }
    let mut out = Vec::with_capacity(12 + images.len() * (2 + size * size * channels));
    out.extend_from_slice(SDDS_MAGIC);
    out.extend_from_slice(&SDDS_VERSION.to_le_bytes());
    out.extend_from_slice(&(images.len() as u32).to_le_bytes());
    out.extend_from_slice(&(size as u16).to_le_bytes());
    out.push(channels as u8);
    out.push(u8::from(labels.is_some()));
    for (i, im) in images.iter().enumerate() {
        if im.size != size || im.channels != channels {
            return Err(Error::Format(format!("image {i} differs in shape from image 0")));
        }
        if let Some(l) = labels {
            out.extend_from_slice(&l[i].to_le_bytes());
        }
        out.extend_from_slice(&im.pixels);
    }
    Ok(out)
}

pub fn decode_sdds(bytes: &[u8]) -> Result<(Vec<Image>, Option<Vec<u16>>)> {
    if bytes.len() < 16 {
        return Err(parse_err(bytes.len(), "truncated SDDS header"));
    }
    if &bytes[..4] != SDDS_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"SDDS\"", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != SDDS_VERSION {
        return Err(Error::Format(format!("unsupported SDDS version {version}")));
    }
    let count = u32_at(8) as usize;
    let size = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
    let channels = bytes[14] as usize;
    let labeled = match bytes[15] {
        0 => false,
        1 => true,
        f => return Err(parse_err(15, format!("label flag must be 0 or 1, got {f}"))),
    };
    let px = size * size * channels;
    let mut pos = 16;
    let mut images = Vec::with_capacity(count);
    let mut labels = labeled.then(|| Vec::with_capacity(count));
    for i in 0..count {
        if let Some(l) = labels.as_mut() {
            let b = bytes.get(pos..pos + 2).ok_or_else(|| parse_err(pos, format!("truncated label of item {i}")))?;
            l.push(u16::from_le_bytes([b[0], b[1]]));
            pos += 2;
        }
        let p = bytes.get(pos..pos + px).ok_or_else(|| parse_err(pos, format!("truncated pixels of item {i}")))?;
        images.push(Image { size, channels, pixels: p.to_vec() });
        pos += px;
    }
    if pos != bytes.len() {
        return Err(parse_err(pos, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok((images, labels))
}

pub fn write_sdds(path: &Path, dataset: &Dataset) -> Result<()> {
    let bytes = encode_sdds(&dataset.images, dataset.labels.as_deref())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a packed file; class count is `max(label) + 1`.
pub fn load_sdds(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (images, labels) = decode_sdds(&bytes)?;
    let classes = labels.as_ref().map_or(0, |l| l.iter().max().map_or(0, |&m| m as usize + 1));
    Dataset::new(Source::PackedFile { path: path.to_path_buf() }, images, labels, classes)
}

pub fn load_dataset(source: &Source) -> Result<Dataset> {
    match source {
        Source::PpmDir { path } => load_ppm_dir(path),
        Source::PackedFile { path } => load_sdds(path),
        Source::Synthetic(p) => generate_synthetic(p),
    }
}

pub const SHAPE_NAMES: [&str; 8] = ["disk", "square", "triangle", "cross", "ring", "diamond", "bar", "corner"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub seed: u64,
    pub n_items: usize,
    pub class_count: usize,
    pub image_size: usize,
    pub noise_std: f64,
    /// Center offset range as a fraction of the image side.
    pub position_jitter: f64,
    /// Relative range of the shape radius around its nominal value.
    pub size_jitter: f64,
    /// Rotation range in radians, symmetric around zero.
    pub rotation_jitter: f64,
    /// 0 gives fixed colors; 1 draws foreground and background uniformly.
    pub color_jitter: f64,
    /// Number of small distractor blobs.
    pub clutter: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            seed: 0,
            n_items: 5000,
            class_count: 8,
            image_size: 32,
            noise_std: 0.05,
            position_jitter: 0.05,
            size_jitter: 0.15,
            rotation_jitter: 0.15,
            color_jitter: 0.0,
            clutter: 0,
        }
    }
}

fn inside(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => v <= 0.75 && u.abs() <= (v + 0.95) * 0.6,
        3 => (u.abs() <= 0.28 && v.abs() <= 0.95) || (v.abs() <= 0.28 && u.abs() <= 0.95),
        4 => (0.55..=1.0).contains(&r),
        5 => u.abs() + v.abs() <= 1.05,
        6 => v.abs() <= 0.3 && u.abs() <= 1.0,
        _ => (u >= -0.8 && u <= -0.3 && v.abs() <= 0.8) || (v >= 0.3 && v <= 0.8 && u.abs() <= 0.8),
    }
}

/// Draws one labeled image. Pure in `(params, index)`.
pub fn render_shape(p: &SyntheticParams, index: usize, class: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(p.seed, &[index as u64]));
    let s = p.image_size as f64;
    fn sym(rng: &mut ChaCha8Rng, range: f64) -> f64 {
        if range > 0.0 {
            rng.gen_range(-range..=range)
        } else {
            0.0
        }
    }
    fn color(rng: &mut ChaCha8Rng, base: [f64; 3], j: f64) -> [f64; 3] {
        base.map(|b| (1.0 - j) * b + j * rng.gen_range(0.0..1.0))
    }
    let cx = s / 2.0 + sym(&mut rng, p.position_jitter) * s;
    let cy = s / 2.0 + sym(&mut rng, p.position_jitter) * s;
    let radius = s * 0.3 * (1.0 + sym(&mut rng, p.size_jitter));
    let angle = sym(&mut rng, p.rotation_jitter);
    let base_fg = [0.9, 0.85, 0.8];
    let base_bg = [0.15, 0.2, 0.25];
    let mut fg = color(&mut rng, base_fg, p.color_jitter);
    let bg = color(&mut rng, base_bg, p.color_jitter);
    // keep foreground visible against the background
    let contrast: f64 = fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum();
    if contrast < 0.6 {
        fg = bg.map(|b| if b > 0.5 { b - 0.5 } else { b + 0.5 });
    }
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..p.clutter)
        .map(|_| (rng.gen_range(0.0..s), rng.gen_range(0.0..s), rng.gen_range(1.0..2.5), color(&mut rng, base_fg, p.color_jitter)))
        .collect();
    let noise = Normal::new(0.0, p.noise_std.max(0.0)).expect("valid std");
    let (sin, cos) = angle.sin_cos();
    let size = p.image_size;
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / radius, (y as f64 + 0.5 - cy) / radius);
            let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let mut c = if inside(class, u, v) { fg } else { bg };
            for &(bx, by, br, bc) in &blobs {
                if (x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2) <= br * br {
                    c = bc;
                }
            }
            for ch in c {
                let v = if p.noise_std > 0.0 { ch + noise.sample(&mut rng) } else { ch };
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Image { size, channels: 3, pixels }
}

/// Labeled shape dataset; labels cycle through the classes so class counts
/// are balanced.
pub fn generate_synthetic(p: &SyntheticParams) -> Result<Dataset> {
    if p.class_count < 2 || p.class_count > SHAPE_NAMES.len() {
        return Err(Error::Config(format!("class_count must lie in [2, {}], got {}", SHAPE_NAMES.len(), p.class_count)));
    }
    if p.n_items == 0 || p.image_size < 4 {
        return Err(Error::Config("synthetic dataset needs items and an image side of at least 4".into()));
    }
    let labels: Vec<u16> = (0..p.n_items).map(|i| (i % p.class_count) as u16).collect();
    let images = labels.iter().enumerate().map(|(i, &l)| render_shape(p, i, l as usize)).collect();
    Dataset::new(Source::Synthetic(p.clone()), images, Some(labels), p.class_count)
}

/// Pretraining augmentation on standardized images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub flip: bool,
    /// Random resized crop area range; `None` disables the crop.
    pub crop_scale: Option<(f64, f64)>,
}

impl Default for Augment {
    fn default() -> Self {
        Augment { flip: true, crop_scale: Some((0.2, 1.0)) }
    }
}

impl Augment {
    pub const NONE: Augment = Augment { flip: false, crop_scale: None };

    /// Applies the augmentation to one `size x size x channels` image.
    pub fn apply(&self, img: &[f32], size: usize, channels: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = size as f64;
        let (mut x0, mut y0, mut w, mut h) = (0.0, 0.0, s, s);
        if let Some((lo, hi)) = self.crop_scale {
            let area = s * s * rng.gen_range(lo..=hi);
            let log_ratio = rng.gen_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
            let ratio = log_ratio.exp();
            w = (area * ratio).sqrt().min(s);
            h = (area / ratio).sqrt().min(s);
            x0 = rng.gen_range(0.0..=s - w);
            y0 = rng.gen_range(0.0..=s - h);
        }
        let flip = self.flip && rng.gen_bool(0.5);
        if self.crop_scale.is_none() && !flip {
            return img.to_vec();
        }
        let sample = |x: f64, y: f64, c: usize| -> f32 {
            let x = x.clamp(0.0, s - 1.0);
            let y = y.clamp(0.0, s - 1.0);
            let (xi, yi) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((xi + 1).min(size - 1), (yi + 1).min(size - 1));
            let (fx, fy) = ((x - xi as f64) as f32, (y - yi as f64) as f32);
            let at = |xx: usize, yy: usize| img[(yy * size + xx) * channels + c];
            (1.0 - fy) * ((1.0 - fx) * at(xi, yi) + fx * at(x1, yi)) + fy * ((1.0 - fx) * at(xi, y1) + fx * at(x1, y1))
        };
        let mut out = Vec::with_capacity(img.len());
        for oy in 0..size {
            for ox in 0..size {
                let ox = if flip { size - 1 - ox } else { ox };
                let sx = x0 + (ox as f64 + 0.5) * w / s - 0.5;
                let sy = y0 + (oy as f64 + 0.5) * h / s - 0.5;
                out.extend((0..channels).map(|c| sample(sx, sy, c)));
            }
        }
        out
    }
}

/// Epoch-seeded shuffled batches of item indices; the last batch may be
/// short.
pub fn batch_iter(n_items: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xba7c, epoch as u64])));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_and_errors() {
        let p = SyntheticParams { n_items: 1, ..Default::default() };
        let im = render_shape(&p, 0, 3);
        let bytes = encode_ppm(&im).unwrap();
        assert_eq!(decode_ppm(&bytes).unwrap(), im);
        assert_eq!(encode_ppm(&decode_ppm(&bytes).unwrap()).unwrap(), bytes);

        let commented = [b"P6\n# a comment\n32 32\n255\n".as_slice(), &im.pixels].concat();
        assert_eq!(decode_ppm(&commented).unwrap(), im);

        let err = decode_ppm(&bytes[..bytes.len() - 10]).unwrap_err();
        assert!(matches!(err, Error::Parse { offset, .. } if offset == bytes.len() - 10), "{err}");
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode_ppm(b"P6\n2 2\n65535\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn sdds_roundtrip_and_errors() {
        let ds = generate_synthetic(&SyntheticParams { n_items: 10, ..Default::default() }).unwrap();
        let bytes = encode_sdds(&ds.images, ds.labels.as_deref()).unwrap();
        assert_eq!(bytes.len(), 16 + 10 * (2 + 32 * 32 * 3));
        let (images, labels) = decode_sdds(&bytes).unwrap();
        assert_eq!(images, ds.images);
        assert_eq!(labels, ds.labels);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_sdds(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_sdds(&bytes[..100]), Err(Error::Parse { offset: 18, .. })));
    }

    #[test]
    fn synthetic_determinism_and_fixed_classes() {
        let p = SyntheticParams { n_items: 40, ..Default::default() };
        assert_eq!(generate_synthetic(&p).unwrap(), generate_synthetic(&p).unwrap());
        let fixed = SyntheticParams {
            noise_std: 0.0,
            position_jitter: 0.0,
            size_jitter: 0.0,
            rotation_jitter: 0.0,
            color_jitter: 0.0,
            ..p
        };
        let ds = generate_synthetic(&fixed).unwrap();
        for c in 0..8 {
            let same: Vec<_> = (0..40).filter(|i| i % 8 == c).map(|i| &ds.images[i]).collect();
            assert!(same.windows(2).all(|w| w[0] == w[1]));
        }
        assert_ne!(ds.images[0], ds.images[1]);
        assert!(generate_synthetic(&SyntheticParams { class_count: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn standardized_statistics() {
        let ds = generate_synthetic(&SyntheticParams { n_items: 200, ..Default::default() }).unwrap();
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0.0;
        for i in 0..ds.len() {
            for px in ds.standardized(i).chunks_exact(3) {
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                    sq[c] += (px[c] as f64).powi(2);
                }
                n += 1.0;
            }
        }
        for c in 0..3 {
            let mean = sum[c] / n;
            let std = (sq[c] / n - mean * mean).sqrt();
            assert!(mean.abs() < 1e-3, "mean {mean}");
            assert!((std - 1.0).abs() < 1e-2, "std {std}");
        }
    }

    #[test]
    fn batches_are_permutations() {
        let a = batch_iter(103, 16, 7, 0);
        assert_eq!(a.len(), 7);
        assert_eq!(a.last().unwrap().len(), 7);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(a, batch_iter(103, 16, 7, 0));
        assert_ne!(a, batch_iter(103, 16, 7, 1));
    }

    #[test]
    fn augmentation_identity_and_flip() {
        let img: Vec<f32> = (0..4 * 4 * 2).map(|i| i as f32).collect();
        assert_eq!(Augment::NONE.apply(&img, 4, 2, 3), img);
        let flip = Augment { flip: true, crop_scale: None };
        let flipped = (0..20).map(|s| flip.apply(&img, 4, 2, s)).find(|o| o != &img).unwrap();
        assert_eq!(flipped[..2], img[6..8]);
        let crop = Augment::default().apply(&img, 4, 2, 9);
        assert_eq!(crop.len(), img.len());
        assert!(crop.iter().all(|v| v.is_finite()));
    }
}

//! Image augmentation instructions: sampling from weak/strong policies,
//! encoding to an 11-dimensional vector, and application to synthetic images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of [`AugmentationInstruction::encode`].
pub const ENCODING_DIM: usize = 11;

/// Normalized crop rectangle: top-left corner `(x, y)`, size `(w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl CropBox {
    pub const FULL: CropBox = CropBox {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
    };

    pub fn is_full(&self) -> bool {
        *self == Self::FULL
    }
}

/// Signed offsets from the identity jitter factors; `hue` is a fraction of
/// the full hue circle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl ColorJitter {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

/// Parameters of one sampled composite augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationInstruction {
    pub crop: CropBox,
    pub jitter: ColorJitter,
    pub blur_sigma: f64,
    pub flipped: bool,
    pub grayscaled: bool,
}

impl Default for AugmentationInstruction {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugmentationInstruction {
    pub const fn identity() -> Self {
        Self {
            crop: CropBox::FULL,
            jitter: ColorJitter {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
                hue: 0.0,
            },
            blur_sigma: 0.0,
            flipped: false,
            grayscaled: false,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.crop;
        let finite = [c.x, c.y, c.w, c.h, self.blur_sigma]
            .iter()
            .chain(
                [
                    self.jitter.brightness,
                    self.jitter.contrast,
                    self.jitter.saturation,
                    self.jitter.hue,
                ]
                .iter(),
            )
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!("augmentation instruction {self:?}")));
        }
        // Tolerate one ulp of drift from sampled `x = u * (1 - w)` placements.
        const SLACK: f64 = 1e-12;
        if c.x < 0.0 || c.y < 0.0 || c.w <= 0.0 || c.h <= 0.0 || c.x + c.w > 1.0 + SLACK || c.y + c.h > 1.0 + SLACK {
            return Err(Error::Contract(format!("crop box outside the unit square: {c:?}")));
        }
        if self.blur_sigma < 0.0 {
            return Err(Error::Contract(format!("negative blur sigma {}", self.blur_sigma)));
        }
        Ok(())
    }

    /// Layout `[x, y, w, h, Δbrightness, Δcontrast, Δsaturation, Δhue, σ, flip, gray]`.
    pub fn encode(&self) -> [f64; ENCODING_DIM] {
        [
            self.crop.x,
            self.crop.y,
            self.crop.w,
            self.crop.h,
            self.jitter.brightness,
            self.jitter.contrast,
            self.jitter.saturation,
            self.jitter.hue,
            self.blur_sigma,
            f64::from(u8::from(self.flipped)),
            f64::from(u8::from(self.grayscaled)),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyStrength {
    Weak,
    Strong,
}

/// Distribution over augmentation instructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub strength: PolicyStrength,
    pub crop_prob: f64,
    /// Area fraction range of the crop.
    pub crop_scale: [f64; 2],
    /// Aspect-ratio (w/h) range of the crop.
    pub crop_ratio: [f64; 2],
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub flip_prob: f64,
    pub gray_prob: f64,
}

impl AugmentationPolicy {
    pub fn weak() -> Self {
        Self {
            strength: PolicyStrength::Weak,
            crop_prob: 1.0,
            crop_scale: [0.5, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            blur_prob: 0.5,
            // Scaled from [0.1, 2] at 224 px to the 16 px grid.
            blur_sigma: [0.1, 1.0],
            flip_prob: 0.0,
            gray_prob: 0.0,
        }
    }

    pub fn strong() -> Self {
        Self {
            strength: PolicyStrength::Strong,
            crop_scale: [0.08, 1.0],
            flip_prob: 0.5,
            gray_prob: 0.2,
            ..Self::weak()
        }
    }

    /// A policy that always yields the identity instruction.
    pub fn none() -> Self {
        Self {
            crop_prob: 0.0,
            jitter_prob: 0.0,
            blur_prob: 0.0,
            ..Self::weak()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("crop_prob", self.crop_prob),
            ("jitter_prob", self.jitter_prob),
            ("blur_prob", self.blur_prob),
            ("flip_prob", self.flip_prob),
            ("gray_prob", self.gray_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("policy {name} = {p} is not a probability")));
            }
        }
        let ranges = [
            ("crop_scale", self.crop_scale),
            ("crop_ratio", self.crop_ratio),
            ("blur_sigma", self.blur_sigma),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("policy {name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.crop_scale[0] <= 0.0 || self.crop_scale[1] > 1.0 {
            return Err(Error::Config(format!(
                "crop_scale {:?} must lie in (0, 1]",
                self.crop_scale
            )));
        }
        if self.crop_ratio[0] <= 0.0 {
            return Err(Error::Config("crop_ratio must be positive".into()));
        }
        if self.blur_sigma[0] < 0.0 {
            return Err(Error::Config("blur_sigma must be non-negative".into()));
        }
        for (name, m) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::Config(format!("jitter magnitude {name} = {m} must be >= 0")));
            }
        }
        if self.hue > 0.5 {
            return Err(Error::Config(format!("hue magnitude {} exceeds 0.5", self.hue)));
        }
        if self.strength == PolicyStrength::Weak && (self.flip_prob != 0.0 || self.gray_prob != 0.0) {
            return Err(Error::Config("weak policy must not flip or grayscale".into()));
        }
        Ok(())
    }

    /// Draws one instruction; transforms that are not applied keep their
    /// identity parameters.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentationInstruction {
        let mut instr = AugmentationInstruction::identity();
        if rng.random_bool(self.crop_prob) {
            instr.crop = self.sample_crop(rng);
        }
        if rng.random_bool(self.jitter_prob) {
            instr.jitter = ColorJitter {
                brightness: symmetric(rng, self.brightness),
                contrast: symmetric(rng, self.contrast),
                saturation: symmetric(rng, self.saturation),
                hue: symmetric(rng, self.hue),
            };
        }
        if rng.random_bool(self.blur_prob) {
            instr.blur_sigma = uniform(rng, self.blur_sigma);
        }
        instr.flipped = rng.random_bool(self.flip_prob);
        instr.grayscaled = rng.random_bool(self.gray_prob);
        instr
    }

    /// Area-scale and log-uniform aspect ratio, positioned uniformly; falls
    /// back to the full frame after ten rejected draws.
    fn sample_crop<R: Rng + ?Sized>(&self, rng: &mut R) -> CropBox {
        let log_ratio = [self.crop_ratio[0].ln(), self.crop_ratio[1].ln()];
        for _ in 0..10 {
            let area = uniform(rng, self.crop_scale);
            let ratio = uniform(rng, log_ratio).exp();
            let w = (area * ratio).sqrt();
            let h = (area / ratio).sqrt();
            if w <= 1.0 && h <= 1.0 {
                let x = rng.random::<f64>() * (1.0 - w);
                let y = rng.random::<f64>() * (1.0 - h);
                return CropBox { x, y, w, h };
            }
        }
        CropBox::FULL
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, magnitude: f64) -> f64 {
    if magnitude == 0.0 {
        0.0
    } else {
        rng.random_range(-magnitude..magnitude)
    }
}

/// Channel-major RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SyntheticImage {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Contract("image must have positive size".into()));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::shape(
                "SyntheticImage::new",
                Self::CHANNELS * height * width,
                data.len(),
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for value in rgb {
            data.extend(std::iter::repeat_n(value.clamp(0.0, 1.0), height * width));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Flattened channel-major pixels, the encoder input layout.
    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn clamp_all(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    fn luma(&self, idx: usize) -> f64 {
        let p = self.plane();
        0.299 * self.data[idx] + 0.587 * self.data[p + idx] + 0.114 * self.data[2 * p + idx]
    }
}

/// Applies crop → jitter → blur → flip → grayscale; output keeps the input
/// size and stays within `[0, 1]`.
pub fn apply_augmentation(img: &SyntheticImage, instr: &AugmentationInstruction) -> SyntheticImage {
    let mut out = img.clone();
    if !instr.crop.is_full() {
        out = crop_resize(&out, &instr.crop);
    }
    if !instr.jitter.is_identity() {
        color_jitter(&mut out, &instr.jitter);
    }
    if instr.blur_sigma > 0.0 {
        out = gaussian_blur(&out, instr.blur_sigma);
    }
    if instr.flipped {
        flip_horizontal(&mut out);
    }
    if instr.grayscaled {
        grayscale(&mut out);
    }
    out
}

/// Bilinear resample of the crop window back to the full grid, edge-clamped.
fn crop_resize(img: &SyntheticImage, crop: &CropBox) -> SyntheticImage {
    let (h, w) = (img.height, img.width);
    let mut out = SyntheticImage::filled(h, w, [0.0; 3]);
    for oy in 0..h {
        let sy = crop.y * h as f64 + (oy as f64 + 0.5) * crop.h - 0.5;
        let (y0, y1, fy) = bilinear_taps(sy, h);
        for ox in 0..w {
            let sx = crop.x * w as f64 + (ox as f64 + 0.5) * crop.w - 0.5;
            let (x0, x1, fx) = bilinear_taps(sx, w);
            for c in 0..SyntheticImage::CHANNELS {
                let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
                let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
                out.set(c, oy, ox, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out.clamp_all();
    out
}

fn bilinear_taps(pos: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let p = pos.clamp(0.0, max);
    let lo = p.floor();
    let frac = p - lo;
    let lo = lo as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, frac)
}

/// Brightness, contrast, saturation, hue, in that order, clamping after each.
fn color_jitter(img: &mut SyntheticImage, jitter: &ColorJitter) {
    let plane = img.plane();
    if jitter.brightness != 0.0 {
        let factor = 1.0 + jitter.brightness;
        for v in &mut img.data {
            *v *= factor;
        }
        img.clamp_all();
    }
    if jitter.contrast != 0.0 {
        let factor = 1.0 + jitter.contrast;
        let mean = (0..plane).map(|i| img.luma(i)).sum::<f64>() / plane as f64;
        for v in &mut img.data {
            *v = (*v - mean) * factor + mean;
        }
        img.clamp_all();
    }
    if jitter.saturation != 0.0 {
        let factor = 1.0 + jitter.saturation;
        for i in 0..plane {
            let gray = img.luma(i);
            for c in 0..3 {
                let v = &mut img.data[c * plane + i];
                *v = (*v - gray) * factor + gray;
            }
        }
        img.clamp_all();
    }
    if jitter.hue != 0.0 {
        for i in 0..plane {
            let rgb = [img.data[i], img.data[plane + i], img.data[2 * plane + i]];
            let (h, s, v) = rgb_to_hsv(rgb);
            let shifted = hsv_to_rgb((h + jitter.hue).rem_euclid(1.0), s, v);
            for (c, value) in shifted.into_iter().enumerate() {
                img.data[c * plane + i] = value;
            }
        }
        img.clamp_all();
    }
}

/// Hue in `[0, 1)`.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Separable Gaussian with radius ⌈3σ⌉, edge-clamped.
fn gaussian_blur(img: &SyntheticImage, sigma: f64) -> SyntheticImage {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let (h, w) = (img.height as isize, img.width as isize);
    let mut horizontal = img.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = (x + ki as isize - radius).clamp(0, w - 1);
                    acc += k * img.get(c, y as usize, sx as usize);
                }
                horizontal.set(c, y as usize, x as usize, acc);
            }
        }
    }
    let mut out = horizontal.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = (y + ki as isize - radius).clamp(0, h - 1);
                    acc += k * horizontal.get(c, sy as usize, x as usize);
                }
                out.set(c, y as usize, x as usize, acc);
            }
        }
    }
    out.clamp_all();
    out
}

fn flip_horizontal(img: &mut SyntheticImage) {
    let w = img.width;
    for row in img.data.chunks_mut(w) {
        row.reverse();
    }
}

fn grayscale(img: &mut SyntheticImage) {
    let plane = img.plane();
    for i in 0..plane {
        let g = img.luma(i).clamp(0.0, 1.0);
        for c in 0..3 {
            img.data[c * plane + i] = g;
        }
    }
}

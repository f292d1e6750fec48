//! Deterministic synthetic image–text world.
//!
//! Each concept is a class-conditioned latent vector plus two discrete
//! attributes that the caption states explicitly: which side of the frame
//! a coloured patch sits on, and the patch's hue class. Images render the
//! latent as a smooth, mirror-symmetric background and draw the patch on top,
//! so a horizontal flip changes only the stated side, grayscale or a large hue
//! shift changes only the stated colour, and a tight crop can cut the patch
//! out. That makes augmentation-induced caption misalignment measurable.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augmentation::{hsv_to_rgb, AugmentationInstruction, CropBox, SyntheticImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Total pairs before the train/eval split.
    pub n_pairs: usize,
    pub eval_fraction: f64,
    pub n_classes: usize,
    pub n_hues: usize,
    pub latent_dim: usize,
    /// Within-class latent standard deviation.
    pub latent_noise: f64,
    /// Standard deviation of additive caption-feature noise.
    pub text_noise: f64,
    /// Caption weight of the side and hue one-hot blocks.
    pub attribute_scale: f64,
    /// Probability that a caption states the patch side.
    pub side_mention_prob: f64,
    /// Probability that a caption states the patch colour.
    pub hue_mention_prob: f64,
    /// Per-instance image detail that no caption mentions.
    pub detail_dim: usize,
    pub detail_amplitude: f64,
    /// Amplitude of the latent-driven background pattern.
    pub latent_amplitude: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_pairs: 2560,
            eval_fraction: 0.2,
            n_classes: 8,
            n_hues: 6,
            latent_dim: 8,
            latent_noise: 0.6,
            text_noise: 0.5,
            attribute_scale: 1.0,
            side_mention_prob: 0.3,
            hue_mention_prob: 0.5,
            detail_dim: 8,
            detail_amplitude: 0.08,
            latent_amplitude: 0.1,
            height: 16,
            width: 16,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::Config("world.n_pairs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config(format!(
                "world.eval_fraction {} must lie in [0, 1)",
                self.eval_fraction
            )));
        }
        if self.n_classes == 0 || self.n_hues < 2 || self.latent_dim == 0 {
            return Err(Error::Config(
                "world needs >= 1 class, >= 2 hues and a non-empty latent".into(),
            ));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!(
                "resolution {}x{} is below 4x4",
                self.height, self.width
            )));
        }
        for (name, p) in [
            ("side_mention_prob", self.side_mention_prob),
            ("hue_mention_prob", self.hue_mention_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("world.{name} must lie in [0, 1]")));
            }
        }
        for (name, v) in [
            ("latent_noise", self.latent_noise),
            ("text_noise", self.text_noise),
            ("attribute_scale", self.attribute_scale),
            ("detail_amplitude", self.detail_amplitude),
            ("latent_amplitude", self.latent_amplitude),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("world.{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn n_eval(&self) -> usize {
        (self.n_pairs as f64 * self.eval_fraction).round() as usize
    }

    pub fn n_train(&self) -> usize {
        self.n_pairs - self.n_eval()
    }

    pub fn pixel_dim(&self) -> usize {
        SyntheticImage::CHANNELS * self.height * self.width
    }

    /// Caption layout: latent, side one-hot (2), hue one-hot.
    pub fn text_dim(&self) -> usize {
        self.latent_dim + 2 + self.n_hues
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn bit(self) -> u32 {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub latent: Vec<f64>,
    /// Image-only instance detail.
    pub detail: Vec<f64>,
    pub side: Side,
    pub hue: usize,
    pub class: usize,
    /// Whether the caption states the side; the side bit is meaningful
    /// to the text only when set.
    pub states_side: bool,
    pub states_hue: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub index: usize,
    pub concept: Concept,
    pub image: SyntheticImage,
    pub text: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    Aligned,
    Misaligned,
}

/// Seed-dependent world constants shared by every pair.
#[derive(Debug, Clone, PartialEq)]
struct WorldConstants {
    prototypes: Vec<Vec<f64>>,
    /// latent_dim × 3 mixing of latent coordinates into colour channels.
    channel_mix: Vec<[f64; 3]>,
    detail_mix: Vec<[f64; 3]>,
}

/// Generated dataset, split into train and eval pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub seed: u64,
    pub train: Vec<SyntheticPair>,
    pub eval: Vec<SyntheticPair>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Counter-based generator keyed on `(seed, stream, index)`.
pub fn keyed_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream ^ splitmix64(index))))
}

const STREAM_CONSTANTS: u64 = 0xC0;
const STREAM_PAIRS: u64 = 0xDA7A;

fn world_constants(config: &WorldConfig, seed: u64) -> WorldConstants {
    let mut rng = keyed_rng(seed, STREAM_CONSTANTS, 0);
    let prototypes = (0..config.n_classes)
        .map(|_| {
            (0..config.latent_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let scale = 1.0 / 3f64.sqrt();
    let mut mix = |k: usize| -> Vec<[f64; 3]> {
        (0..k)
            .map(|_| std::array::from_fn(|_| scale * rng.sample::<f64, _>(StandardNormal)))
            .collect()
    };
    let channel_mix = mix(config.latent_dim);
    let detail_mix = mix(config.detail_dim);
    WorldConstants {
        prototypes,
        channel_mix,
        detail_mix,
    }
}

/// Low-frequency basis with even symmetry about the vertical centre line.
fn background_basis(m: usize, y: f64, x: f64) -> f64 {
    const FREQS: [(f64, f64); 8] = [
        (0.0, 0.0),
        (1.0, 0.0),
        (0.0, 1.0),
        (1.0, 1.0),
        (2.0, 0.0),
        (0.0, 2.0),
        (2.0, 1.0),
        (1.0, 2.0),
    ];
    let (fy, fx) = FREQS[m % FREQS.len()];
    let phase = (m / FREQS.len()) as f64 * 0.5;
    (PI * fy * y + phase).cos() * (2.0 * PI * fx * (x - 0.5)).cos()
}

/// Mid-frequency counterpart of [`background_basis`] for instance detail.
fn detail_basis(m: usize, y: f64, x: f64) -> f64 {
    const FREQS: [(f64, f64); 8] = [
        (3.0, 0.0),
        (0.0, 2.5),
        (3.0, 1.5),
        (2.0, 2.5),
        (4.0, 1.0),
        (1.0, 3.0),
        (4.0, 2.0),
        (2.0, 3.5),
    ];
    let (fy, fx) = FREQS[m % FREQS.len()];
    let phase = 0.3 + (m / FREQS.len()) as f64 * 0.7;
    (PI * fy * y + phase).cos() * (2.0 * PI * fx * (x - 0.5)).cos()
}

/// Normalized rectangle covered by the patch.
pub fn patch_box(side: Side) -> CropBox {
    let w = 0.3125;
    let h = 0.375;
    let x = match side {
        Side::Left => 0.09375,
        Side::Right => 1.0 - 0.09375 - w,
    };
    CropBox { x, y: 0.3125, w, h }
}

/// Pure rendering of a concept at the given resolution.
fn render(concept: &Concept, constants: &WorldConstants, config: &WorldConfig) -> SyntheticImage {
    let (h, w) = (config.height, config.width);
    let mut img = SyntheticImage::filled(h, w, [0.5; 3]);
    let amplitude = config.latent_amplitude;
    for py in 0..h {
        let y = (py as f64 + 0.5) / h as f64;
        for px in 0..w {
            let x = (px as f64 + 0.5) / w as f64;
            let mut rgb = [0.5; 3];
            for (m, (&u, mix)) in concept.latent.iter().zip(&constants.channel_mix).enumerate() {
                let b = background_basis(m, y, x);
                for c in 0..3 {
                    rgb[c] += amplitude * u * mix[c] * b;
                }
            }
            for (m, (&u, mix)) in concept.detail.iter().zip(&constants.detail_mix).enumerate() {
                let b = detail_basis(m, y, x);
                for c in 0..3 {
                    rgb[c] += config.detail_amplitude * u * mix[c] * b;
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                img.set(c, py, px, v.clamp(0.0, 1.0));
            }
        }
    }
    let patch = patch_box(concept.side);
    let color = hsv_to_rgb(concept.hue as f64 / config.n_hues as f64, 0.85, 0.9);
    for py in 0..h {
        let y = (py as f64 + 0.5) / h as f64;
        if y < patch.y || y > patch.y + patch.h {
            continue;
        }
        for px in 0..w {
            let x = (px as f64 + 0.5) / w as f64;
            if x >= patch.x && x <= patch.x + patch.w {
                for (c, v) in color.iter().enumerate() {
                    img.set(c, py, px, *v);
                }
            }
        }
    }
    img
}

fn caption(concept: &Concept, config: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut text = Vec::with_capacity(config.text_dim());
    text.extend_from_slice(&concept.latent);
    let a = config.attribute_scale;
    let side = if concept.states_side { a } else { 0.0 };
    let hue = if concept.states_hue { a } else { 0.0 };
    text.push(if concept.side == Side::Left { side } else { 0.0 });
    text.push(if concept.side == Side::Right { side } else { 0.0 });
    text.extend((0..config.n_hues).map(|k| if k == concept.hue { hue } else { 0.0 }));
    for v in &mut text {
        *v += config.text_noise * rng.sample::<f64, _>(StandardNormal);
    }
    text
}

fn generate_pair(index: usize, config: &WorldConfig, constants: &WorldConstants, seed: u64) -> SyntheticPair {
    let mut rng = keyed_rng(seed, STREAM_PAIRS, index as u64);
    let class = rng.random_range(0..config.n_classes);
    let latent = constants.prototypes[class]
        .iter()
        .map(|p| p + config.latent_noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let side = if rng.random_bool(0.5) { Side::Right } else { Side::Left };
    let hue = rng.random_range(0..config.n_hues);
    let detail = (0..config.detail_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let states_side = rng.random_bool(config.side_mention_prob);
    let states_hue = rng.random_bool(config.hue_mention_prob);
    let concept = Concept {
        latent,
        detail,
        side,
        hue,
        class,
        states_side,
        states_hue,
    };
    let image = render(&concept, constants, config);
    let text = caption(&concept, config, &mut rng);
    SyntheticPair {
        index,
        concept,
        image,
        text,
    }
}

/// Regenerates the full dataset from `(config, seed)`; the first
/// `n_train` indices form the training split.
pub fn generate_dataset(config: &WorldConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let constants = world_constants(config, seed);
    let n_train = config.n_train();
    let mut pairs: Vec<SyntheticPair> = (0..config.n_pairs)
        .map(|i| generate_pair(i, config, &constants, seed))
        .collect();
    let eval = pairs.split_off(n_train);
    Ok(Dataset {
        config: config.clone(),
        seed,
        train: pairs,
        eval,
    })
}

/// Whether `instr` makes the caption of `pair` wrong: a flip swaps a
/// stated side, grayscale or a hue shift past half the hue spacing changes
/// a stated colour, and a crop keeping under half of a described patch
/// removes it.
pub fn misalignment_probe(pair: &SyntheticPair, instr: &AugmentationInstruction, n_hues: usize) -> Alignment {
    let c = &pair.concept;
    let hue_tolerance = 0.5 / n_hues as f64;
    let patch = patch_box(c.side);
    let ix = (patch.x + patch.w).min(instr.crop.x + instr.crop.w) - patch.x.max(instr.crop.x);
    let iy = (patch.y + patch.h).min(instr.crop.y + instr.crop.h) - patch.y.max(instr.crop.y);
    let visible = ix.max(0.0) * iy.max(0.0) / (patch.w * patch.h);
    let recolored = instr.grayscaled || instr.jitter.hue.abs() > hue_tolerance;
    let broken = (c.states_side && instr.flipped)
        || (c.states_hue && recolored)
        || ((c.states_side || c.states_hue) && visible < 0.5);
    if broken {
        Alignment::Misaligned
    } else {
        Alignment::Aligned
    }
}

const EXPORT_MAGIC: &[u8; 8] = b"MPCLDATA";
const EXPORT_VERSION: u32 = 1;

/// Flat little-endian dump of a dataset:
///
/// ```text
/// magic "MPCLDATA" | version u32 | n_train u32 | n_eval u32 | n_classes u32
/// | n_hues u32 | channels u32 | height u32 | width u32 | text_dim u32 | seed u64
/// pixels   f64[(n_train + n_eval) · channels · height · width]  (channel-major)
/// features f64[(n_train + n_eval) · text_dim]
/// labels   u32[(n_train + n_eval) · 3]  (class, side bit, hue)
/// ```
pub fn write_dataset_binary<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    let cfg = &dataset.config;
    out.write_all(EXPORT_MAGIC)?;
    let header = [
        EXPORT_VERSION,
        dataset.train.len() as u32,
        dataset.eval.len() as u32,
        cfg.n_classes as u32,
        cfg.n_hues as u32,
        SyntheticImage::CHANNELS as u32,
        cfg.height as u32,
        cfg.width as u32,
        cfg.text_dim() as u32,
    ];
    for v in header {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&dataset.seed.to_le_bytes())?;
    let all = || dataset.train.iter().chain(&dataset.eval);
    for pair in all() {
        for v in pair.image.pixels() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    for pair in all() {
        for v in &pair.text {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    for pair in all() {
        for v in [
            pair.concept.class as u32,
            pair.concept.side.bit(),
            pair.concept.hue as u32,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn export_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset_binary(dataset, &mut buf).map_err(|e| Error::io(path, e))?;
    crate::artifacts::write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_pairs: 40,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_dataset(&small(), 7).unwrap();
        let b = generate_dataset(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(), 8).unwrap();
        assert_ne!(a.train[0].text, c.train[0].text);
        assert_eq!(a.train.len(), 32);
        assert_eq!(a.eval.len(), 8);
    }

    #[test]
    fn zero_pairs_is_config_error() {
        let cfg = WorldConfig {
            n_pairs: 0,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn pairs_regenerate_from_index() {
        let cfg = small();
        let data = generate_dataset(&cfg, 3).unwrap();
        let constants = world_constants(&cfg, 3);
        let again = generate_pair(35, &cfg, &constants, 3);
        assert_eq!(data.eval[3], again);
        assert_eq!(render(&again.concept, &constants, &cfg), again.image);
    }

    #[test]
    fn background_is_mirror_symmetric() {
        let cfg = small();
        let constants = world_constants(&cfg, 1);
        let data = generate_dataset(&cfg, 1).unwrap();
        let pair = &data.train[0];
        let mut mirrored = pair.concept.clone();
        mirrored.side = match mirrored.side {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        };
        let flip = AugmentationInstruction {
            flipped: true,
            ..AugmentationInstruction::identity()
        };
        let flipped = crate::augmentation::apply_augmentation(&pair.image, &flip);
        let other = render(&mirrored, &constants, &cfg);
        for (a, b) in flipped.pixels().iter().zip(other.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn probe_examples() {
        let data = generate_dataset(&small(), 2).unwrap();
        let flip = AugmentationInstruction {
            flipped: true,
            ..AugmentationInstruction::identity()
        };
        let gray = AugmentationInstruction {
            grayscaled: true,
            ..AugmentationInstruction::identity()
        };
        for pair in &data.train {
            let c = &pair.concept;
            assert_eq!(
                misalignment_probe(pair, &AugmentationInstruction::identity(), 6),
                Alignment::Aligned
            );
            let expect = |broken: bool| {
                if broken {
                    Alignment::Misaligned
                } else {
                    Alignment::Aligned
                }
            };
            assert_eq!(misalignment_probe(pair, &flip, 6), expect(c.states_side));
            assert_eq!(misalignment_probe(pair, &gray, 6), expect(c.states_hue));
            // Crop away the patch's side entirely.
            let away = match c.side {
                Side::Left => CropBox {
                    x: 0.6,
                    y: 0.0,
                    w: 0.4,
                    h: 1.0,
                },
                Side::Right => CropBox {
                    x: 0.0,
                    y: 0.0,
                    w: 0.4,
                    h: 1.0,
                },
            };
            let crop = AugmentationInstruction {
                crop: away,
                ..AugmentationInstruction::identity()
            };
            assert_eq!(
                misalignment_probe(pair, &crop, 6),
                expect(c.states_side || c.states_hue)
            );
        }
        assert!(data.train.iter().any(|p| p.concept.states_side));
        assert!(data.train.iter().any(|p| !p.concept.states_side));
    }

    #[test]
    fn export_layout_size() {
        let data = generate_dataset(&small(), 2).unwrap();
        let mut buf = Vec::new();
        write_dataset_binary(&data, &mut buf).unwrap();
        let cfg = &data.config;
        let n = 40;
        let expected = 8 + 9 * 4 + 8 + n * cfg.pixel_dim() * 8 + n * cfg.text_dim() * 8 + n * 3 * 4;
        assert_eq!(buf.len(), expected);
        assert_eq!(&buf[..8], b"MPCLDATA");
    }
}

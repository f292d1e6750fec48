//! Image, augmentation and text encoders plus the projection heads that map
//! every modality into one shared embedding space.
//!
//! The image path is `pixels → f_I → h`, then `[h, f_A(a)] → g_I → z`, where
//! `a` is the 11-dimensional augmentation encoding. The text path is
//! `features → f_T → g_T → z`. All weights live in a [`ParamStore`] under
//! the prefixes `image`, `augment`, `image_head`, `text`, `text_head`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::ENCODING_DIM;
use crate::error::{Error, Result};
use crate::numeric::layers::MlpCache;
use crate::numeric::layers::ResidualCache;
use crate::numeric::{DenseMatrix, Gradients, Linear, Mlp, ParamStore, ResidualBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Mlp,
    Residual,
}

/// Where (if anywhere) the augmentation embedding enters the image path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Awareness {
    /// Concatenated with `h` at the projection head input.
    Head,
    /// A zero vector fills the augmentation slot.
    Agnostic,
    /// Concatenated with the pixels at the image encoder input; the head
    /// slot is zero.
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_hidden: Vec<usize>,
    pub repr_dim: usize,
    pub aug_hidden: Vec<usize>,
    pub aug_dim: usize,
    pub text_hidden: Vec<usize>,
    pub text_repr_dim: usize,
    pub embed_dim: usize,
    pub head_kind: HeadKind,
    /// Layers for `mlp`, residual blocks for `residual`; unused for `linear`.
    pub head_depth: usize,
    pub head_expansion: usize,
    pub awareness: Awareness,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_hidden: vec![128],
            repr_dim: 64,
            aug_hidden: vec![32],
            aug_dim: 16,
            text_hidden: vec![64],
            text_repr_dim: 64,
            embed_dim: 32,
            head_kind: HeadKind::Residual,
            head_depth: 3,
            head_expansion: 4,
            awareness: Awareness::Head,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("repr_dim", self.repr_dim),
            ("aug_dim", self.aug_dim),
            ("text_repr_dim", self.text_repr_dim),
            ("embed_dim", self.embed_dim),
            ("head_expansion", self.head_expansion),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.head_kind != HeadKind::Linear && self.head_depth == 0 {
            return Err(Error::Config(
                "model.head_depth must be >= 1 for mlp and residual heads".into(),
            ));
        }
        if self.image_hidden.contains(&0) || self.aug_hidden.contains(&0) || self.text_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

#[derive(Debug, Clone, PartialEq)]
enum Head {
    Linear(Linear),
    Mlp(Mlp),
    Residual { blocks: Vec<ResidualBlock>, out: Linear },
}

#[derive(Debug, Clone)]
enum HeadCache {
    Linear(DenseMatrix),
    Mlp(MlpCache),
    Residual {
        blocks: Vec<ResidualCache>,
        last_input: DenseMatrix,
    },
}

impl Head {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, input: usize, rng: &mut R) -> Result<Self> {
        let name = "image_head";
        Ok(match cfg.head_kind {
            HeadKind::Linear => Head::Linear(Linear::new(store, name, input, cfg.embed_dim, rng)),
            HeadKind::Mlp => {
                let mut w = vec![input; cfg.head_depth];
                w.push(cfg.embed_dim);
                Head::Mlp(Mlp::new(store, name, &w, rng)?)
            }
            HeadKind::Residual => {
                let blocks = (0..cfg.head_depth)
                    .map(|i| ResidualBlock::new(store, &format!("{name}.block{i}"), input, cfg.head_expansion, rng))
                    .collect::<Result<_>>()?;
                let out = Linear::new(store, &format!("{name}.out"), input, cfg.embed_dim, rng);
                Head::Residual { blocks, out }
            }
        })
    }

    fn forward(&self, store: &ParamStore, x: &DenseMatrix) -> Result<(DenseMatrix, HeadCache)> {
        match self {
            Head::Linear(l) => Ok((l.forward(store, x)?, HeadCache::Linear(x.clone()))),
            Head::Mlp(m) => {
                let (y, c) = m.forward(store, x)?;
                Ok((y, HeadCache::Mlp(c)))
            }
            Head::Residual { blocks, out } => {
                let mut caches = Vec::with_capacity(blocks.len());
                let mut cur = x.clone();
                for b in blocks {
                    let (y, c) = b.forward(store, &cur)?;
                    caches.push(c);
                    cur = y;
                }
                let y = out.forward(store, &cur)?;
                Ok((
                    y,
                    HeadCache::Residual {
                        blocks: caches,
                        last_input: cur,
                    },
                ))
            }
        }
    }

    fn backward(
        &self,
        store: &ParamStore,
        cache: &HeadCache,
        dy: &DenseMatrix,
        grads: &mut Gradients,
    ) -> Result<DenseMatrix> {
        match (self, cache) {
            (Head::Linear(l), HeadCache::Linear(x)) => l.backward(store, x, dy, grads),
            (Head::Mlp(m), HeadCache::Mlp(c)) => m.backward(store, c, dy, grads),
            (
                Head::Residual { blocks, out },
                HeadCache::Residual {
                    blocks: caches,
                    last_input,
                },
            ) => {
                let mut d = out.backward(store, last_input, dy, grads)?;
                for (b, c) in blocks.iter().zip(caches).rev() {
                    d = b.backward(store, c, &d, grads)?;
                }
                Ok(d)
            }
            _ => Err(Error::Contract("projection head cache does not match head kind".into())),
        }
    }
}

/// All encoders and projection heads of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoders {
    config: EncoderConfig,
    pixel_dim: usize,
    text_dim: usize,
    image: Mlp,
    augment: Mlp,
    image_head: Head,
    text: Mlp,
    text_head: Linear,
}

/// Intermediate values of an image forward pass.
#[derive(Debug, Clone)]
pub struct ImageCache {
    augment: Option<MlpCache>,
    image: MlpCache,
    head: HeadCache,
    /// Representation `h` that fed the head.
    pub repr: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct TextCache {
    text: MlpCache,
    repr: DenseMatrix,
}

impl Encoders {
    pub fn new<R: Rng + ?Sized>(
        config: &EncoderConfig,
        pixel_dim: usize,
        text_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if pixel_dim == 0 || text_dim == 0 {
            return Err(Error::Config("pixel and text dimensions must be >= 1".into()));
        }
        let image_in = match config.awareness {
            Awareness::Encoder => pixel_dim + config.aug_dim,
            Awareness::Head | Awareness::Agnostic => pixel_dim,
        };
        let image = Mlp::new(
            store,
            "image",
            &widths(image_in, &config.image_hidden, config.repr_dim),
            rng,
        )?;
        let augment = Mlp::new(
            store,
            "augment",
            &widths(ENCODING_DIM, &config.aug_hidden, config.aug_dim),
            rng,
        )?;
        let image_head = Head::new(store, config, config.repr_dim + config.aug_dim, rng)?;
        let text = Mlp::new(
            store,
            "text",
            &widths(text_dim, &config.text_hidden, config.text_repr_dim),
            rng,
        )?;
        let text_head = Linear::new(store, "text_head", config.text_repr_dim, config.embed_dim, rng);
        Ok(Self {
            config: config.clone(),
            pixel_dim,
            text_dim,
            image,
            augment,
            image_head,
            text,
            text_head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// `f_A`: rows of augmentation encodings to augmentation embeddings.
    pub fn encode_augmentation(&self, store: &ParamStore, codes: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.augment.forward(store, codes)?.0)
    }

    /// Image representation `h` used for linear probing.
    pub fn represent_images(
        &self,
        store: &ParamStore,
        pixels: &DenseMatrix,
        codes: &DenseMatrix,
    ) -> Result<DenseMatrix> {
        Ok(self.embed_images(store, pixels, codes)?.1.repr)
    }

    /// Image rows to unified embeddings. `codes` holds one augmentation
    /// encoding per row and is ignored in agnostic mode.
    pub fn embed_images(
        &self,
        store: &ParamStore,
        pixels: &DenseMatrix,
        codes: &DenseMatrix,
    ) -> Result<(DenseMatrix, ImageCache)> {
        pixels.ensure_shape("image pixels", pixels.rows(), self.pixel_dim)?;
        let k = pixels.rows();
        let (aug_emb, augment) = if self.config.awareness == Awareness::Agnostic {
            (DenseMatrix::zeros(k, self.config.aug_dim), None)
        } else {
            codes.ensure_shape("augmentation codes", k, ENCODING_DIM)?;
            let (e, c) = self.augment.forward(store, codes)?;
            (e, Some(c))
        };
        let (repr, image, head_in) = match self.config.awareness {
            Awareness::Encoder => {
                let (repr, image) = self.image.forward(store, &pixels.hcat(&aug_emb)?)?;
                let head_in = repr.hcat(&DenseMatrix::zeros(k, self.config.aug_dim))?;
                (repr, image, head_in)
            }
            Awareness::Head | Awareness::Agnostic => {
                let (repr, image) = self.image.forward(store, pixels)?;
                let head_in = repr.hcat(&aug_emb)?;
                (repr, image, head_in)
            }
        };
        let (z, head) = self.image_head.forward(store, &head_in)?;
        Ok((
            z,
            ImageCache {
                augment,
                image,
                head,
                repr,
            },
        ))
    }

    pub fn backward_images(
        &self,
        store: &ParamStore,
        cache: &ImageCache,
        d_z: &DenseMatrix,
        grads: &mut Gradients,
    ) -> Result<()> {
        let d_head_in = self.image_head.backward(store, &cache.head, d_z, grads)?;
        let (d_repr, d_aug_slot) = d_head_in.split_cols(self.config.repr_dim)?;
        let d_aug = match self.config.awareness {
            Awareness::Head => {
                self.image.backward(store, &cache.image, &d_repr, grads)?;
                Some(d_aug_slot)
            }
            Awareness::Agnostic => {
                self.image.backward(store, &cache.image, &d_repr, grads)?;
                None
            }
            Awareness::Encoder => {
                let d_in = self.image.backward(store, &cache.image, &d_repr, grads)?;
                Some(d_in.split_cols(self.pixel_dim)?.1)
            }
        };
        if let (Some(d), Some(c)) = (d_aug, &cache.augment) {
            self.augment.backward(store, c, &d, grads)?;
        }
        Ok(())
    }

    pub fn embed_texts(&self, store: &ParamStore, features: &DenseMatrix) -> Result<(DenseMatrix, TextCache)> {
        features.ensure_shape("text features", features.rows(), self.text_dim)?;
        let (repr, text) = self.text.forward(store, features)?;
        let z = self.text_head.forward(store, &repr)?;
        Ok((z, TextCache { text, repr }))
    }

    pub fn backward_texts(
        &self,
        store: &ParamStore,
        cache: &TextCache,
        d_z: &DenseMatrix,
        grads: &mut Gradients,
    ) -> Result<()> {
        let d_repr = self.text_head.backward(store, &cache.repr, d_z, grads)?;
        self.text.backward(store, &cache.text, &d_repr, grads)?;
        Ok(())
    }
}

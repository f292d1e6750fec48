//! Domain-dependent similarity scores `s = exp((cos − b_D) / τ_D)`.
//!
//! Everything downstream works with log-scores `(cos − b_D) / τ_D`; the
//! exponential form is only materialized for reporting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::DenseMatrix;

/// Domain combination of an index pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    ImageImage,
    ImageText,
    TextText,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::ImageImage, Domain::ImageText, Domain::TextText];

    /// Zero-based slot in per-domain arrays.
    pub fn index(self) -> usize {
        match self {
            Domain::ImageImage => 0,
            Domain::ImageText => 1,
            Domain::TextText => 2,
        }
    }

    /// One-based label (1 image–image, 2 image–text, 3 text–text).
    pub fn label(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::ImageImage => "image_image",
            Domain::ImageText => "image_text",
            Domain::TextText => "text_text",
        }
    }

    fn from_modalities(a_is_image: bool, b_is_image: bool) -> Self {
        match (a_is_image, b_is_image) {
            (true, true) => Domain::ImageImage,
            (false, false) => Domain::TextText,
            _ => Domain::ImageText,
        }
    }
}

/// Domain of the one-based pair `(i, j)` in a batch of `4n` embeddings laid
/// out as three image views followed by one text view.
pub fn domain_of(i: usize, j: usize, n: usize) -> Result<Domain> {
    let limit = 4 * n;
    for idx in [i, j] {
        if idx == 0 || idx > limit {
            return Err(Error::IndexOutOfRange { index: idx, limit });
        }
    }
    Ok(Domain::from_modalities(i <= 3 * n, j <= 3 * n))
}

/// Index layout of a multi-view batch: `image_views` blocks of `n` image
/// embeddings followed by `text_views` blocks of `n` text embeddings. Sample
/// `k` of view `v` sits at `v * n + k` (zero-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLayout {
    pub n: usize,
    pub image_views: usize,
    pub text_views: usize,
}

impl BatchLayout {
    pub fn new(n: usize, image_views: usize, text_views: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Contract("batch size N must be >= 1".into()));
        }
        if image_views == 0 || text_views == 0 {
            return Err(Error::Contract(format!(
                "need at least one image and one text view, got {image_views} and {text_views}"
            )));
        }
        Ok(Self {
            n,
            image_views,
            text_views,
        })
    }

    /// Three image views and one text per sample.
    pub fn standard(n: usize) -> Result<Self> {
        Self::new(n, 3, 1)
    }

    pub fn total(&self) -> usize {
        (self.image_views + self.text_views) * self.n
    }

    pub fn num_images(&self) -> usize {
        self.image_views * self.n
    }

    pub fn is_image(&self, idx: usize) -> bool {
        idx < self.num_images()
    }

    /// Original sample index of embedding `idx`.
    pub fn sample_of(&self, idx: usize) -> usize {
        idx % self.n
    }

    pub fn view_of(&self, idx: usize) -> usize {
        idx / self.n
    }

    /// Domain of the zero-based pair `(i, j)`.
    pub fn domain(&self, i: usize, j: usize) -> Domain {
        Domain::from_modalities(self.is_image(i), self.is_image(j))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// One temperature, no offset.
    Shared,
    /// One temperature and one offset for every domain.
    SharedWithOffset,
    /// Separate temperature and offset per domain combination.
    DomainDependent,
}

/// Learnable temperatures (as `log τ`) and offsets, one slot per domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub log_tau: [f64; 3],
    pub offset: [f64; 3],
    pub mode: SimilarityMode,
}

impl SimilarityParams {
    pub fn new(tau: f64, offset: f64, mode: SimilarityMode) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let offset = if mode == SimilarityMode::Shared { 0.0 } else { offset };
        Ok(Self {
            log_tau: [tau.ln(); 3],
            offset: [offset; 3],
            mode,
        })
    }

    fn slot(&self, domain: Domain) -> usize {
        match self.mode {
            SimilarityMode::DomainDependent => domain.index(),
            _ => 0,
        }
    }

    pub fn tau(&self, domain: Domain) -> f64 {
        self.log_tau[self.slot(domain)].exp()
    }

    pub fn offset(&self, domain: Domain) -> f64 {
        match self.mode {
            SimilarityMode::Shared => 0.0,
            _ => self.offset[self.slot(domain)],
        }
    }

    /// `log s = (cos − b_D) / τ_D`.
    pub fn log_score(&self, cos: f64, domain: Domain) -> f64 {
        (cos - self.offset(domain)) / self.tau(domain)
    }

    /// Collapses per-domain gradients onto the tied slots of shared modes:
    /// every slot then carries the gradient of the single shared scalar.
    pub fn tie_gradients(&self, log_tau: &mut [f64; 3], offset: &mut [f64; 3]) {
        match self.mode {
            SimilarityMode::DomainDependent => {}
            SimilarityMode::SharedWithOffset => {
                let t: f64 = log_tau.iter().sum();
                let b: f64 = offset.iter().sum();
                *log_tau = [t; 3];
                *offset = [b; 3];
            }
            SimilarityMode::Shared => {
                let t: f64 = log_tau.iter().sum();
                *log_tau = [t; 3];
                *offset = [0.0; 3];
            }
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Positive similarity score of one pair.
pub fn score(a: &[f64], b: &[f64], params: &SimilarityParams, domain: Domain) -> Result<f64> {
    Ok(params.log_score(cosine(a, b)?, domain).exp())
}

/// Pairwise cosines and log-scores of a batch, with the cached unit vectors
/// needed for the backward pass.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    layout: BatchLayout,
    params: SimilarityParams,
    unit: DenseMatrix,
    norms: Vec<f64>,
    cosines: DenseMatrix,
    log_scores: DenseMatrix,
}

/// Gradients of a scalar objective through the score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGrads {
    pub embeddings: DenseMatrix,
    pub log_tau: [f64; 3],
    pub offset: [f64; 3],
}

/// All pairwise scores of `embeddings` (one row per batch index). Diagonal
/// cosines are exactly 1 and carry no embedding gradient.
pub fn score_matrix(embeddings: &DenseMatrix, layout: BatchLayout, params: &SimilarityParams) -> Result<ScoreMatrix> {
    let m = layout.total();
    if embeddings.rows() != m {
        return Err(Error::shape("score_matrix rows", m, embeddings.rows()));
    }
    let mut unit = embeddings.clone();
    let mut norms = Vec::with_capacity(m);
    for r in 0..m {
        let row = unit.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Degenerate(format!("embedding {r} has norm {norm}")));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
        norms.push(norm);
    }
    let mut cosines = unit.matmul_t(&unit)?;
    for i in 0..m {
        cosines.set(i, i, 1.0);
        for j in 0..i {
            // Symmetrize so that (i, j) and (j, i) are bit-identical.
            let c = cosines.get(i, j).clamp(-1.0, 1.0);
            cosines.set(i, j, c);
            cosines.set(j, i, c);
        }
    }
    let log_scores = DenseMatrix::from_fn(m, m, |i, j| params.log_score(cosines.get(i, j), layout.domain(i, j)));
    if !log_scores.is_finite() {
        return Err(Error::NonFinite("log-score matrix".into()));
    }
    Ok(ScoreMatrix {
        layout,
        params: *params,
        unit,
        norms,
        cosines,
        log_scores,
    })
}

impl ScoreMatrix {
    pub fn layout(&self) -> BatchLayout {
        self.layout
    }

    pub fn params(&self) -> &SimilarityParams {
        &self.params
    }

    pub fn cosines(&self) -> &DenseMatrix {
        &self.cosines
    }

    pub fn log_scores(&self) -> &DenseMatrix {
        &self.log_scores
    }

    /// `exp` of the log-scores; may overflow to infinity at tiny τ.
    pub fn scores(&self) -> DenseMatrix {
        self.log_scores.map(f64::exp)
    }

    /// Chain rule from `∂L/∂ log s` to embeddings, `log τ` and `b`.
    pub fn backward_log_scores(&self, d_log: &DenseMatrix) -> Result<SimilarityGrads> {
        let m = self.layout.total();
        d_log.ensure_shape("score backward", m, m)?;
        let mut d_cos = DenseMatrix::zeros(m, m);
        let mut log_tau = [0.0; 3];
        let mut offset = [0.0; 3];
        for i in 0..m {
            for j in 0..m {
                let g = d_log.get(i, j);
                if g == 0.0 {
                    continue;
                }
                let d = self.layout.domain(i, j);
                let tau = self.params.tau(d);
                // ∂ℓ/∂cos = 1/τ, ∂ℓ/∂b = −1/τ, ∂ℓ/∂log τ = −ℓ.
                if i != j {
                    d_cos.set(i, j, g / tau);
                }
                offset[d.index()] -= g / tau;
                log_tau[d.index()] -= g * self.log_scores.get(i, j);
            }
        }
        self.params.tie_gradients(&mut log_tau, &mut offset);

        // cos = UUᵀ  ⇒  ∂L/∂U = (G + Gᵀ) U, then project through normalization.
        let sym = d_cos.zip_map(&d_cos.transpose(), |a, b| a + b)?;
        let d_unit = sym.matmul(&self.unit)?;
        let mut embeddings = DenseMatrix::zeros(m, self.unit.cols());
        for r in 0..m {
            let u = self.unit.row(r);
            let du = d_unit.row(r);
            let radial: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
            let inv = 1.0 / self.norms[r];
            for (c, out) in embeddings.row_mut(r).iter_mut().enumerate() {
                *out = (du[c] - u[c] * radial) * inv;
            }
        }
        Ok(SimilarityGrads {
            embeddings,
            log_tau,
            offset,
        })
    }

    /// Chain rule from `∂L/∂s`: `∂L/∂ log s = s · ∂L/∂s`.
    pub fn backward_scores(&self, d_scores: &DenseMatrix) -> Result<SimilarityGrads> {
        let d_log = d_scores.zip_map(&self.scores(), |g, s| g * s)?;
        self.backward_log_scores(&d_log)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numeric::{finite_difference_gradient, relative_error, DEFAULT_EPSILON};

    #[test]
    fn algorithm_layout_domains() {
        assert_eq!(domain_of(1, 5, 2).unwrap(), Domain::ImageImage);
        assert_eq!(domain_of(1, 7, 2).unwrap(), Domain::ImageText);
        assert_eq!(domain_of(7, 8, 2).unwrap(), Domain::TextText);
        assert!(domain_of(0, 1, 2).is_err());
        assert!(domain_of(1, 9, 2).is_err());
        for i in 1..=8 {
            for j in 1..=8 {
                assert_eq!(domain_of(i, j, 2).unwrap(), domain_of(j, i, 2).unwrap());
                let layout = BatchLayout::standard(2).unwrap();
                assert_eq!(layout.domain(i - 1, j - 1), domain_of(i, j, 2).unwrap());
            }
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[3.0, -4.0], &[3.0, -4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.707_106_781_186_547_5).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn score_examples() {
        let p = SimilarityParams::new(0.1, 0.2, SimilarityMode::DomainDependent).unwrap();
        // cos = 0.5 with a = (1, 0), b = (0.5, sqrt(3)/2).
        let b = [0.5, 3f64.sqrt() / 2.0];
        let s = score(&[1.0, 0.0], &b, &p, Domain::ImageText).unwrap();
        assert!((s - 3f64.exp()).abs() < 1e-9);
        assert_eq!(p.log_score(0.2, Domain::ImageImage), 0.0);

        let shared = SimilarityParams::new(0.5, 0.7, SimilarityMode::Shared).unwrap();
        let c = cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap();
        let s = score(&[1.0, 2.0], &[2.0, 1.0], &shared, Domain::ImageText).unwrap();
        assert_eq!(s, (c / 0.5).exp());
    }

    #[test]
    fn matrix_routes_domains_and_is_symmetric() {
        let layout = BatchLayout::standard(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = DenseMatrix::from_fn(8, 5, |_, _| rng.random_range(-1.0..1.0));
        let mut p = SimilarityParams::new(0.1, 0.0, SimilarityMode::DomainDependent).unwrap();
        p.log_tau = [0.1f64.ln(), 0.3f64.ln(), 0.7f64.ln()];
        p.offset = [0.4, -0.2, 0.1];
        let sm = score_matrix(&z, layout, &p).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(sm.log_scores().get(i, j), sm.log_scores().get(j, i));
            }
        }
        let c = sm.cosines().get(0, 6);
        assert!((sm.log_scores().get(0, 6) - (c + 0.2) / 0.3).abs() < 1e-12);
        assert_eq!(sm.cosines().get(3, 3), 1.0);

        let same = DenseMatrix::filled(8, 3, 0.5);
        let shared = SimilarityParams::new(0.2, 0.0, SimilarityMode::Shared).unwrap();
        let sm = score_matrix(&same, layout, &shared).unwrap();
        let first = sm.log_scores().get(0, 0);
        assert!(sm.log_scores().data().iter().all(|v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let layout = BatchLayout::standard(1).unwrap();
        let z = DenseMatrix::from_fn(4, 3, |r, c| (r + c + 1) as f64);
        let p = SimilarityParams::new(0.1, 0.0, SimilarityMode::DomainDependent).unwrap();
        let sm = score_matrix(&z, layout, &p).unwrap();
        let g = sm.backward_log_scores(&DenseMatrix::zeros(4, 4)).unwrap();
        assert!(g.embeddings.data().iter().all(|v| *v == 0.0));
        assert_eq!(g.log_tau, [0.0; 3]);
        assert_eq!(g.offset, [0.0; 3]);
    }

    #[test]
    fn offset_gradient_sign_is_negative() {
        let layout = BatchLayout::standard(1).unwrap();
        let z = DenseMatrix::from_fn(4, 3, |r, c| ((r * 3 + c) as f64).sin());
        let p = SimilarityParams::new(0.3, 0.1, SimilarityMode::DomainDependent).unwrap();
        let sm = score_matrix(&z, layout, &p).unwrap();
        let s = sm.scores();
        for i in 0..4 {
            for j in 0..4 {
                let mut upstream = DenseMatrix::zeros(4, 4);
                upstream.set(i, j, 1.0);
                let g = sm.backward_scores(&upstream).unwrap();
                let d = layout.domain(i, j);
                // ∂s/∂b_D = −s/τ_D
                let expected = -s.get(i, j) / p.tau(d);
                assert!(g.offset[d.index()] < 0.0);
                assert!((g.offset[d.index()] - expected).abs() < 1e-12 * expected.abs().max(1.0));
            }
        }
    }

    /// Random linear functional of the score matrix, differentiated through
    /// embeddings, log τ and b jointly.
    #[test]
    fn backward_matches_finite_differences() {
        let layout = BatchLayout::standard(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for mode in [
            SimilarityMode::Shared,
            SimilarityMode::SharedWithOffset,
            SimilarityMode::DomainDependent,
        ] {
            for _ in 0..30 {
                let dim = 4;
                let z = DenseMatrix::from_fn(8, dim, |_, _| rng.random_range(-1.0..1.0));
                let mut p = SimilarityParams::new(0.5, 0.0, mode).unwrap();
                if mode == SimilarityMode::DomainDependent {
                    p.log_tau = [
                        rng.random_range(-1.0..0.5),
                        rng.random_range(-1.0..0.5),
                        rng.random_range(-1.0..0.5),
                    ];
                    p.offset = [
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    ];
                } else if mode == SimilarityMode::SharedWithOffset {
                    p.offset = [0.3; 3];
                }
                let weights = DenseMatrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
                let objective = |z: &DenseMatrix, p: &SimilarityParams| -> Result<f64> {
                    let sm = score_matrix(z, layout, p)?;
                    Ok(sm.scores().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
                };
                let sm = score_matrix(&z, layout, &p).unwrap();
                let g = sm.backward_scores(&weights).unwrap();

                let nz = finite_difference_gradient(
                    |v| objective(&DenseMatrix::new(8, dim, v.to_vec())?, &p),
                    z.data(),
                    DEFAULT_EPSILON,
                )
                .unwrap();
                assert!(relative_error(g.embeddings.data(), &nz) < 1e-5);

                let slots = if mode == SimilarityMode::DomainDependent { 3 } else { 1 };
                for d in 0..slots {
                    let nt = finite_difference_gradient(
                        |v| {
                            let mut q = p;
                            if slots == 1 {
                                q.log_tau = [v[0]; 3];
                            } else {
                                q.log_tau[d] = v[0];
                            }
                            objective(&z, &q)
                        },
                        &[p.log_tau[d]],
                        DEFAULT_EPSILON,
                    )
                    .unwrap();
                    assert!(relative_error(&[g.log_tau[d]], &nt) < 1e-5);
                    let nb = finite_difference_gradient(
                        |v| {
                            let mut q = p;
                            if slots == 1 {
                                q.offset = [v[0]; 3];
                            } else {
                                q.offset[d] = v[0];
                            }
                            objective(&z, &q)
                        },
                        &[p.offset[d]],
                        DEFAULT_EPSILON,
                    )
                    .unwrap();
                    assert!(relative_error(&[g.offset[d]], &nb) < 1e-5, "{mode:?} offset");
                }
            }
        }
    }
}

//! Multi-view training loop, evaluation metrics and ablation grids.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::augmentation::{apply_augmentation, AugmentationInstruction, ENCODING_DIM};
use crate::config::{AugmentConfig, ExperimentConfig, Supervision, ViewConfig};
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::losses::{domain_weights, DomainWeights, LossKind, LossReport, LossSpec, PairIndexSets};
use crate::numeric::{adamw_step, AdamWConfig, DenseMatrix, Gradients, ParamStore};
use crate::similarity::{score_matrix, BatchLayout, Domain, ScoreMatrix, SimilarityMode, SimilarityParams};
use crate::world::{generate_dataset, Dataset, SyntheticPair};

pub const LOG_TAU_PARAM: &str = "similarity.log_tau";
pub const OFFSET_PARAM: &str = "similarity.offset";

/// Named random substreams derived from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Augmentation = 3,
    Density = 4,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Encoders plus every trainable parameter, including `log τ` and `b`.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoders: Encoders,
    pub store: ParamStore,
    pub mode: SimilarityMode,
}

impl Model {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = substream(config.seed, Stream::Init);
        let encoders = Encoders::new(
            &config.model,
            config.world.pixel_dim(),
            config.world.text_dim(),
            &mut store,
            &mut rng,
        )?;
        let sim = SimilarityParams::new(
            config.similarity.init_tau,
            config.similarity.init_offset,
            config.similarity.mode,
        )?;
        store.insert(LOG_TAU_PARAM, DenseMatrix::row_vector(&sim.log_tau), false);
        store.insert(OFFSET_PARAM, DenseMatrix::row_vector(&sim.offset), false);
        Ok(Self {
            encoders,
            store,
            mode: config.similarity.mode,
        })
    }

    pub fn similarity(&self) -> Result<SimilarityParams> {
        let row = |name| -> Result<[f64; 3]> {
            let m = self.store.get(name)?;
            m.ensure_shape("similarity parameter", 1, 3)?;
            Ok([m.get(0, 0), m.get(0, 1), m.get(0, 2)])
        };
        Ok(SimilarityParams {
            log_tau: row(LOG_TAU_PARAM)?,
            offset: row(OFFSET_PARAM)?,
            mode: self.mode,
        })
    }

    /// Unified embeddings of a batch, image rows first.
    pub fn embed(&self, batch: &EmbeddingBatch) -> Result<DenseMatrix> {
        let (zi, _) = self.encoders.embed_images(&self.store, &batch.pixels, &batch.codes)?;
        let (zt, _) = self.encoders.embed_texts(&self.store, &batch.texts)?;
        DenseMatrix::vstack(&[zi, zt])
    }
}

/// Inputs of one multi-view batch. Row `view · N + k` belongs to sample
/// `k`; image views come first (view 0 drawn from the first-view policy),
/// then text views.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub layout: BatchLayout,
    /// Dataset index of each sample.
    pub samples: Vec<usize>,
    /// One instruction per image row.
    pub instructions: Vec<AugmentationInstruction>,
    pub pixels: DenseMatrix,
    pub codes: DenseMatrix,
    pub texts: DenseMatrix,
}

pub fn assemble_batch<R: Rng + ?Sized>(
    pairs: &[&SyntheticPair],
    views: &ViewConfig,
    augment: &AugmentConfig,
    rng: &mut R,
) -> Result<EmbeddingBatch> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::Contract(format!("a batch needs at least 2 samples, got {n}")));
    }
    let layout = BatchLayout::new(n, views.image, views.text)?;
    let pixel_dim = pairs[0].image.pixels().len();
    let text_dim = pairs[0].text.len();
    let mut pixels = Vec::with_capacity(views.image * n * pixel_dim);
    let mut codes = Vec::with_capacity(views.image * n * ENCODING_DIM);
    let mut instructions = Vec::with_capacity(views.image * n);
    for view in 0..views.image {
        let policy = augment.policy(view);
        for pair in pairs {
            let instr = policy.sample(rng);
            pixels.extend_from_slice(apply_augmentation(&pair.image, &instr).pixels());
            codes.extend_from_slice(&instr.encode());
            instructions.push(instr);
        }
    }
    let mut texts = Vec::with_capacity(views.text * n * text_dim);
    for view in 0..views.text {
        for pair in pairs {
            if view == 0 {
                texts.extend_from_slice(&pair.text);
            } else {
                texts.extend(
                    pair.text
                        .iter()
                        .map(|v| v + views.text_noise * rng.sample::<f64, _>(StandardNormal)),
                );
            }
        }
    }
    Ok(EmbeddingBatch {
        layout,
        samples: pairs.iter().map(|p| p.index).collect(),
        instructions,
        pixels: DenseMatrix::new(views.image * n, pixel_dim, pixels)?,
        codes: DenseMatrix::new(views.image * n, ENCODING_DIM, codes)?,
        texts: DenseMatrix::new(views.text * n, text_dim, texts)?,
    })
}

/// Loss selection plus how supervision is organized across domains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub loss: LossSpec,
    pub supervision: Supervision,
    pub weights: DomainWeights,
}

impl Objective {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            loss: config.loss.spec(),
            supervision: config.similarity.supervision,
            weights: domain_weights(config.views.image, config.views.text)?,
        })
    }

    fn includes_trivial(&self) -> bool {
        self.loss.kind == LossKind::MpNce && self.loss.mpnce.include_trivial
    }

    /// Loss report for a log-score matrix. Separated supervision averages
    /// independent losses over the per-domain restrictions that have at
    /// least one usable row.
    pub fn evaluate(&self, log_scores: &DenseMatrix, sets: &PairIndexSets) -> Result<LossReport> {
        match self.supervision {
            Supervision::Unified => self.loss.evaluate(log_scores, sets, &self.weights),
            Supervision::Separated => {
                let mut parts = Vec::with_capacity(3);
                for d in Domain::ALL {
                    let restricted = sets.restricted_to(d).requiring_positives(self.includes_trivial());
                    if restricted.num_active() > 0 {
                        parts.push(self.loss.evaluate(log_scores, &restricted, &self.weights)?);
                    }
                }
                let coef = 1.0 / parts.len().max(1) as f64;
                let weighted: Vec<(f64, LossReport)> = parts.into_iter().map(|r| (coef, r)).collect();
                LossReport::combine(&weighted)
            }
        }
    }
}

pub struct StepOutput {
    pub loss: f64,
    pub grads: Gradients,
    pub scores: ScoreMatrix,
}

/// Forward pass only; used by the finite-difference oracle.
pub fn batch_loss(model: &Model, batch: &EmbeddingBatch, objective: &Objective) -> Result<f64> {
    let z = model.embed(batch)?;
    let scores = score_matrix(&z, batch.layout, &model.similarity()?)?;
    let sets = PairIndexSets::build(batch.layout);
    Ok(objective.evaluate(scores.log_scores(), &sets)?.loss)
}

/// Loss and gradients with respect to every parameter in the store.
pub fn batch_loss_and_grad(model: &Model, batch: &EmbeddingBatch, objective: &Objective) -> Result<StepOutput> {
    let enc = &model.encoders;
    let (zi, icache) = enc.embed_images(&model.store, &batch.pixels, &batch.codes)?;
    let (zt, tcache) = enc.embed_texts(&model.store, &batch.texts)?;
    let image_rows = zi.rows();
    let z = DenseMatrix::vstack(&[zi, zt])?;
    let scores = score_matrix(&z, batch.layout, &model.similarity()?)?;
    let sets = PairIndexSets::build(batch.layout);
    let report = objective.evaluate(scores.log_scores(), &sets)?;
    let sg = scores.backward_log_scores(&report.grad_log_scores)?;
    let mut grads = Gradients::zeros_like(&model.store);
    let d_images = sg.embeddings.row_slice(0, image_rows);
    let d_texts = sg.embeddings.row_slice(image_rows, z.rows() - image_rows);
    enc.backward_images(&model.store, &icache, &d_images, &mut grads)?;
    enc.backward_texts(&model.store, &tcache, &d_texts, &mut grads)?;
    grads.accumulate(LOG_TAU_PARAM, &DenseMatrix::row_vector(&sg.log_tau))?;
    grads.accumulate(OFFSET_PARAM, &DenseMatrix::row_vector(&sg.offset))?;
    Ok(StepOutput {
        loss: report.loss,
        grads,
        scores,
    })
}

/// Linear warmup to `base` followed by cosine decay to zero, per step.
pub fn learning_rate(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    base * 0.5 * (1.0 + (PI * progress.min(1.0)).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Recalls {
    pub image_to_text_r1: f64,
    pub image_to_text_r5: f64,
    pub text_to_image_r1: f64,
    pub text_to_image_r5: f64,
}

impl Recalls {
    /// Mean of both retrieval directions at rank 1.
    pub fn r1(&self) -> f64 {
        0.5 * (self.image_to_text_r1 + self.text_to_image_r1)
    }
}

fn unit_rows(m: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Degenerate(format!("embedding {r} has norm {norm}")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Recall@1/5 of paired rows ranked by cosine, which orders candidates the
/// same way as the image–text score for any positive temperature. Ties
/// count against the true match.
pub fn retrieval_recalls(images: &DenseMatrix, texts: &DenseMatrix) -> Result<Recalls> {
    let n = images.rows();
    if n < 5 {
        return Err(Error::Contract(format!("R@5 needs at least 5 pairs, got {n}")));
    }
    texts.ensure_shape("retrieval texts", n, images.cols())?;
    let sim = unit_rows(images)?.matmul_t(&unit_rows(texts)?)?;
    let mut hits = [0usize; 4];
    for i in 0..n {
        let truth = sim.get(i, i);
        let i2t = (0..n).filter(|&j| j != i && sim.get(i, j) >= truth).count();
        let t2i = (0..n).filter(|&j| j != i && sim.get(j, i) >= truth).count();
        hits[0] += usize::from(i2t < 1);
        hits[1] += usize::from(i2t < 5);
        hits[2] += usize::from(t2i < 1);
        hits[3] += usize::from(t2i < 5);
    }
    let f = |h: usize| h as f64 / n as f64;
    Ok(Recalls {
        image_to_text_r1: f(hits[0]),
        image_to_text_r5: f(hits[1]),
        text_to_image_r1: f(hits[2]),
        text_to_image_r5: f(hits[3]),
    })
}

fn identity_codes(k: usize) -> DenseMatrix {
    let code = AugmentationInstruction::identity().encode();
    DenseMatrix::from_fn(k, ENCODING_DIM, |_, c| code[c])
}

fn pixel_matrix(pairs: &[SyntheticPair]) -> Result<DenseMatrix> {
    let dim = pairs.first().map_or(0, |p| p.image.pixels().len());
    let data: Vec<f64> = pairs.iter().flat_map(|p| p.image.pixels().iter().copied()).collect();
    DenseMatrix::new(pairs.len(), dim, data)
}

fn text_matrix(pairs: &[SyntheticPair]) -> Result<DenseMatrix> {
    let dim = pairs.first().map_or(0, |p| p.text.len());
    let data: Vec<f64> = pairs.iter().flat_map(|p| p.text.iter().copied()).collect();
    DenseMatrix::new(pairs.len(), dim, data)
}

/// Retrieval between un-augmented eval images and their captions.
pub fn eval_retrieval(model: &Model, pairs: &[SyntheticPair]) -> Result<Recalls> {
    let pixels = pixel_matrix(pairs)?;
    let (zi, _) = model
        .encoders
        .embed_images(&model.store, &pixels, &identity_codes(pairs.len()))?;
    let (zt, _) = model.encoders.embed_texts(&model.store, &text_matrix(pairs)?)?;
    retrieval_recalls(&zi, &zt)
}

fn standardize(train: &mut DenseMatrix, test: &mut DenseMatrix) {
    let (n, d) = train.shape();
    for c in 0..d {
        let mean = (0..n).map(|r| train.get(r, c)).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (train.get(r, c) - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var.sqrt() + 1e-8);
        for m in [&mut *train, &mut *test] {
            for r in 0..m.rows() {
                let v = (m.get(r, c) - mean) * inv;
                m.set(r, c, v);
            }
        }
    }
}

/// Accuracy of a softmax-regression classifier fitted on standardized
/// features with full-batch Adam and no weight decay.
pub fn linear_probe(
    train: &DenseMatrix,
    train_labels: &[usize],
    test: &DenseMatrix,
    test_labels: &[usize],
    n_classes: usize,
    steps: usize,
    lr: f64,
) -> Result<f64> {
    if train.rows() != train_labels.len() || test.rows() != test_labels.len() {
        return Err(Error::shape("probe labels", train.rows(), train_labels.len()));
    }
    if test.rows() == 0 {
        return Err(Error::Contract("probe needs at least one test sample".into()));
    }
    let (mut xtr, mut xte) = (train.clone(), test.clone());
    standardize(&mut xtr, &mut xte);
    let mut store = ParamStore::new();
    store.insert("probe.weight", DenseMatrix::zeros(xtr.cols(), n_classes), false);
    store.insert("probe.bias", DenseMatrix::zeros(1, n_classes), false);
    let cfg = AdamWConfig {
        lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let logits = |store: &ParamStore, x: &DenseMatrix| -> Result<DenseMatrix> {
        let mut out = x.matmul(store.get("probe.weight")?)?;
        out.add_row_broadcast(store.get("probe.bias")?)?;
        Ok(out)
    };
    let n = xtr.rows() as f64;
    for _ in 0..steps {
        let mut d = logits(&store, &xtr)?;
        for (r, &y) in train_labels.iter().enumerate() {
            let row = d.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (c, v) in row.iter_mut().enumerate() {
                *v = ((*v - max).exp() / sum - f64::from(u8::from(c == y))) / n;
            }
        }
        let mut grads = Gradients::new();
        grads.accumulate("probe.weight", &xtr.t_matmul(&d)?)?;
        grads.accumulate("probe.bias", &d.sum_rows())?;
        adamw_step(&mut store, &grads, &cfg)?;
    }
    let out = logits(&store, &xte)?;
    let correct = test_labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = out.row(r);
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == y
        })
        .count();
    Ok(correct as f64 / test_labels.len() as f64)
}

/// Probe accuracy on frozen representations `h` of un-augmented images.
pub fn eval_probe(model: &Model, data: &Dataset, config: &ExperimentConfig) -> Result<f64> {
    let k = config.eval.probe_train.min(data.train.len());
    let train = &data.train[..k];
    let h = |pairs: &[SyntheticPair]| {
        model
            .encoders
            .represent_images(&model.store, &pixel_matrix(pairs)?, &identity_codes(pairs.len()))
    };
    let labels = |pairs: &[SyntheticPair]| pairs.iter().map(|p| p.concept.class).collect::<Vec<_>>();
    linear_probe(
        &h(train)?,
        &labels(train),
        &h(&data.eval)?,
        &labels(&data.eval),
        config.world.n_classes,
        config.eval.probe_steps,
        config.eval.probe_lr,
    )
}

/// Area under the ROC curve of `positives` over `negatives` (Mann–Whitney,
/// ties count one half). `None` when either side is empty.
pub fn auc(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&v| (v, true))
        .chain(negatives.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let p = positives.len() as f64;
    let n = negatives.len() as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainDensity {
    pub domain: &'static str,
    pub positive_count: usize,
    pub negative_count: usize,
    pub positive_mean: f64,
    pub negative_mean: f64,
    pub auc: Option<f64>,
    /// Counts over equal-width cosine bins spanning `[-1, 1]`.
    pub positive_histogram: Vec<usize>,
    pub negative_histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityStats {
    pub domains: Vec<DomainDensity>,
    /// AUC of all positive pairs over all negative pairs, domains pooled.
    pub pooled_auc: Option<f64>,
}

impl DensityStats {
    /// Mean AUC over the domains where it is defined.
    pub fn mean_auc(&self) -> f64 {
        let v: Vec<f64> = self.domains.iter().filter_map(|d| d.auc).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn get(&self, domain: Domain) -> &DomainDensity {
        &self.domains[domain.index()]
    }
}

fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for &v in values {
        let b = (((v + 1.0) / 2.0) * bins as f64).floor();
        h[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    h
}

/// Cosine distributions of non-trivial positive and negative pairs (each
/// unordered pair once), split by domain combination.
pub fn similarity_density_stats(cosines: &DenseMatrix, sets: &PairIndexSets, bins: usize) -> Result<DensityStats> {
    let layout = sets.layout();
    let m = layout.total();
    cosines.ensure_shape("density cosines", m, m)?;
    let bins = bins.max(1);
    let mut pos: [Vec<f64>; 3] = Default::default();
    let mut neg: [Vec<f64>; 3] = Default::default();
    for i in 0..m {
        for &j in sets.positives(i).iter().filter(|&&j| j > i) {
            pos[layout.domain(i, j).index()].push(cosines.get(i, j));
        }
        for &j in sets.negatives(i).iter().filter(|&&j| j > i) {
            neg[layout.domain(i, j).index()].push(cosines.get(i, j));
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let domains = Domain::ALL
        .iter()
        .map(|d| {
            let (p, n) = (&pos[d.index()], &neg[d.index()]);
            DomainDensity {
                domain: d.name(),
                positive_count: p.len(),
                negative_count: n.len(),
                positive_mean: mean(p),
                negative_mean: mean(n),
                auc: auc(p, n),
                positive_histogram: histogram(p, bins),
                negative_histogram: histogram(n, bins),
            }
        })
        .collect();
    let all_pos: Vec<f64> = pos.concat();
    let all_neg: Vec<f64> = neg.concat();
    Ok(DensityStats {
        domains,
        pooled_auc: auc(&all_pos, &all_neg),
    })
}

/// The fixed augmented eval batch used for density statistics; identical
/// across epochs and across runs sharing a seed.
pub fn density_batch(data: &Dataset, config: &ExperimentConfig) -> Result<EmbeddingBatch> {
    let pairs: Vec<&SyntheticPair> = data.eval.iter().take(config.eval.density_batch).collect();
    let mut rng = substream(config.seed, Stream::Density);
    assemble_batch(&pairs, &config.views, &config.augment, &mut rng)
}

pub fn density_stats(model: &Model, batch: &EmbeddingBatch, bins: usize) -> Result<DensityStats> {
    let z = model.embed(batch)?;
    let scores = score_matrix(&z, batch.layout, &model.similarity()?)?;
    similarity_density_stats(scores.cosines(), &PairIndexSets::build(batch.layout), bins)
}

/// One row of the per-epoch metrics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub recalls: Recalls,
    pub probe_accuracy: f64,
    pub positive_mean: [f64; 3],
    pub negative_mean: [f64; 3],
    pub auc: [Option<f64>; 3],
    pub pooled_auc: Option<f64>,
    pub tau: [f64; 3],
    pub offset: [f64; 3],
}

impl MetricsRecord {
    pub const CSV_COLUMNS: &'static [&'static str] = &[
        "epoch",
        "lr",
        "loss",
        "i2t_r1",
        "i2t_r5",
        "t2i_r1",
        "t2i_r5",
        "probe_accuracy",
        "pos_cos_image_image",
        "pos_cos_image_text",
        "pos_cos_text_text",
        "neg_cos_image_image",
        "neg_cos_image_text",
        "neg_cos_text_text",
        "auc_image_image",
        "auc_image_text",
        "auc_text_text",
        "auc_pooled",
        "tau_image_image",
        "tau_image_text",
        "tau_text_text",
        "offset_image_image",
        "offset_image_text",
        "offset_text_text",
    ];

    pub fn csv_row(&self) -> String {
        let r = &self.recalls;
        let mut cells = vec![
            self.epoch.to_string(),
            self.lr.to_string(),
            self.loss.to_string(),
            r.image_to_text_r1.to_string(),
            r.image_to_text_r5.to_string(),
            r.text_to_image_r1.to_string(),
            r.text_to_image_r5.to_string(),
            self.probe_accuracy.to_string(),
        ];
        cells.extend(self.positive_mean.iter().map(f64::to_string));
        cells.extend(self.negative_mean.iter().map(f64::to_string));
        let opt = |a: &Option<f64>| a.map_or("NaN".to_string(), |v| v.to_string());
        cells.extend(self.auc.iter().map(opt));
        cells.push(opt(&self.pooled_auc));
        cells.extend(self.tau.iter().map(f64::to_string));
        cells.extend(self.offset.iter().map(f64::to_string));
        cells.join(",")
    }
}

/// Metrics CSV: a `# `-prefixed header block, the column row, one row per
/// epoch (epoch 0 is the untrained model).
pub fn metrics_csv(history: &[MetricsRecord], header: &str) -> String {
    let mut out = crate::artifacts::comment_block(header);
    out.push_str(&MetricsRecord::CSV_COLUMNS.join(","));
    out.push('\n');
    for rec in history {
        out.push_str(&rec.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Epoch 0 (before training) followed by one record per epoch.
    pub history: Vec<MetricsRecord>,
    pub density: DensityStats,
}

impl TrainOutcome {
    pub fn last(&self) -> &MetricsRecord {
        self.history.last().expect("history always holds epoch 0")
    }
}

#[derive(Serialize)]
struct BatchDump<'a> {
    epoch: usize,
    step: usize,
    samples: &'a [usize],
    instructions: &'a [AugmentationInstruction],
    log_tau: [f64; 3],
    offset: [f64; 3],
}

fn evaluate_epoch(
    model: &Model,
    data: &Dataset,
    config: &ExperimentConfig,
    density: &EmbeddingBatch,
    epoch: usize,
    lr: f64,
    loss: f64,
) -> Result<(MetricsRecord, DensityStats)> {
    let recalls = eval_retrieval(model, &data.eval)?;
    let probe_accuracy = eval_probe(model, data, config)?;
    let stats = density_stats(model, density, config.eval.histogram_bins)?;
    let sim = model.similarity()?;
    let record = MetricsRecord {
        epoch,
        lr,
        loss,
        recalls,
        probe_accuracy,
        positive_mean: std::array::from_fn(|d| stats.domains[d].positive_mean),
        negative_mean: std::array::from_fn(|d| stats.domains[d].negative_mean),
        auc: std::array::from_fn(|d| stats.domains[d].auc),
        pooled_auc: stats.pooled_auc,
        tau: Domain::ALL.map(|d| sim.tau(d)),
        offset: Domain::ALL.map(|d| sim.offset(d)),
    };
    Ok((record, stats))
}

/// Generates the dataset for `config.seed` and trains on it.
pub fn train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = generate_dataset(&config.world, config.seed)?;
    train_on(config, &data)
}

/// Full training run; deterministic in `(config, data)`.
pub fn train_on(config: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if data.config != config.world {
        return Err(Error::Contract(
            "dataset was generated from a different world config".into(),
        ));
    }
    let mut model = Model::new(config)?;
    let objective = Objective::from_config(config)?;
    let density = density_batch(data, config)?;
    let mut data_rng = substream(config.seed, Stream::Data);
    let mut aug_rng = substream(config.seed, Stream::Augmentation);

    let n = config.train.batch_size;
    let steps_per_epoch = data.train.len() / n;
    let total_steps = steps_per_epoch * config.train.epochs;
    let warmup = steps_per_epoch * config.train.warmup_epochs;

    let (initial, mut stats) = evaluate_epoch(&model, data, config, &density, 0, 0.0, f64::NAN)?;
    let mut history = vec![initial];
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0;
    for epoch in 1..=config.train.epochs {
        order.shuffle(&mut data_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks_exact(n) {
            let pairs: Vec<&SyntheticPair> = chunk.iter().map(|&i| &data.train[i]).collect();
            let batch = assemble_batch(&pairs, &config.views, &config.augment, &mut aug_rng)?;
            let out = batch_loss_and_grad(&model, &batch, &objective).and_then(|o| {
                if o.loss.is_finite() && o.grads.is_finite() {
                    Ok(o)
                } else {
                    Err(Error::NonFinite(format!("loss {} or its gradient", o.loss)))
                }
            });
            let out = match out {
                Ok(o) => o,
                Err(e @ (Error::NonFinite(_) | Error::Degenerate(_))) => {
                    let sim = model.similarity()?;
                    let dump = BatchDump {
                        epoch,
                        step,
                        samples: &batch.samples,
                        instructions: &batch.instructions,
                        log_tau: sim.log_tau,
                        offset: sim.offset,
                    };
                    let json = serde_json::to_string(&dump).map_err(|e| Error::Serialization(e.to_string()))?;
                    return Err(Error::NonFinite(format!(
                        "training aborted: {e}; offending batch: {json}"
                    )));
                }
                Err(e) => return Err(e),
            };
            lr = learning_rate(config.train.lr, step, warmup, total_steps);
            adamw_step(&mut model.store, &out.grads, &config.train.adamw(lr))?;
            loss_sum += out.loss;
            step += 1;
        }
        let (record, s) = evaluate_epoch(
            &model,
            data,
            config,
            &density,
            epoch,
            lr,
            loss_sum / steps_per_epoch as f64,
        )?;
        history.push(record);
        stats = s;
    }
    Ok(TrainOutcome {
        model,
        history,
        density: stats,
    })
}

/// Axis of an ablation grid; each yields a fixed list of cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    /// The five loss configurations.
    Loss,
    /// Shared vs domain-dependent scores, separated vs unified supervision.
    Similarity,
    /// Augmentation embedding at the head, nowhere, or at the encoder.
    Awareness,
    /// Projection head types with and without the augmentation embedding.
    Head,
    /// Weak/strong view mixes with and without the augmentation embedding.
    Augmentation,
    /// Image and text view counts at a roughly constant total batch.
    Views,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AblationCell {
    pub id: String,
    pub overrides: Vec<String>,
}

fn cell(id: &str, overrides: &[&str]) -> AblationCell {
    AblationCell {
        id: id.to_string(),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
    }
}

impl AblationAxis {
    pub fn cells(self, base: &ExperimentConfig) -> Vec<AblationCell> {
        match self {
            AblationAxis::Loss => vec![
                cell("milnce", &["loss.kind=milnce"]),
                cell("supcon", &["loss.kind=supcon"]),
                cell(
                    "mpnce-no-trivial-no-weights",
                    &["loss.kind=mpnce", "loss.trivial=false", "loss.weights=false"],
                ),
                cell(
                    "mpnce-no-weights",
                    &["loss.kind=mpnce", "loss.trivial=true", "loss.weights=false"],
                ),
                cell("mpnce", &["loss.kind=mpnce", "loss.trivial=true", "loss.weights=true"]),
            ],
            AblationAxis::Similarity => vec![
                cell(
                    "shared-unified",
                    &["similarity.mode=shared", "similarity.supervision=unified"],
                ),
                cell(
                    "domain-separated",
                    &["similarity.mode=domain_dependent", "similarity.supervision=separated"],
                ),
                cell(
                    "domain-unified",
                    &["similarity.mode=domain_dependent", "similarity.supervision=unified"],
                ),
            ],
            AblationAxis::Awareness => vec![
                cell("agnostic-head", &["model.awareness=agnostic"]),
                cell("aware-encoder", &["model.awareness=encoder"]),
                cell("aware-head", &["model.awareness=head"]),
            ],
            AblationAxis::Head => {
                let mut cells = Vec::new();
                for (aware, tag) in [("agnostic", "no-aug"), ("head", "aug")] {
                    let heads: &[(&str, &str, usize)] = if aware == "agnostic" {
                        &[
                            ("mlp3", "mlp", 3),
                            ("mlp6", "mlp", 6),
                            ("res1", "residual", 1),
                            ("res3", "residual", 3),
                        ]
                    } else {
                        &[
                            ("linear", "linear", 1),
                            ("mlp3", "mlp", 3),
                            ("mlp6", "mlp", 6),
                            ("res1", "residual", 1),
                            ("res3", "residual", 3),
                        ]
                    };
                    for &(name, kind, depth) in heads {
                        cells.push(AblationCell {
                            id: format!("{tag}-{name}"),
                            overrides: vec![
                                format!("model.awareness={aware}"),
                                format!("model.head_kind={kind}"),
                                format!("model.head_depth={depth}"),
                            ],
                        });
                    }
                }
                cells
            }
            AblationAxis::Augmentation => {
                let mut cells = Vec::new();
                for (aware, tag, depth) in [("agnostic", "no-aug", 1), ("head", "aug", 3)] {
                    for (mix, first, other) in [
                        ("3weak", "weak", "weak"),
                        ("1weak-2strong", "weak", "strong"),
                        ("3strong", "strong", "strong"),
                    ] {
                        cells.push(AblationCell {
                            id: format!("{tag}-{mix}"),
                            overrides: vec![
                                format!("model.awareness={aware}"),
                                "model.head_kind=residual".into(),
                                format!("model.head_depth={depth}"),
                                "views.image=3".into(),
                                format!("augment.first_view={first}"),
                                format!("augment.other_views={other}"),
                            ],
                        });
                    }
                }
                cells
            }
            AblationAxis::Views => {
                let total = (base.views.image + base.views.text) * base.train.batch_size;
                [(1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (4, 1)]
                    .iter()
                    .map(|&(v, t)| {
                        let n = (total / (v + t)).max(2);
                        AblationCell {
                            id: format!("v{v}-t{t}"),
                            overrides: vec![
                                format!("views.image={v}"),
                                format!("views.text={t}"),
                                format!("train.batch_size={n}"),
                            ],
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Final metrics of one `(cell, seed)` run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRun {
    pub seed: u64,
    pub r1: f64,
    pub final_metrics: MetricsRecord,
    /// Mean of the per-domain AUCs that are defined.
    pub mean_auc: f64,
    pub pooled_auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: AblationCell,
    pub runs: Vec<CellRun>,
    pub r1: MeanSd,
    pub r5: MeanSd,
    pub probe_accuracy: MeanSd,
    pub mean_auc: MeanSd,
    pub pooled_auc: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSummary>,
}

impl AblationTable {
    pub fn cell(&self, id: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.cell.id == id)
    }

    /// Tab-separated comparison table, one row per cell.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("cell");
        for col in ["r1", "r5", "probe", "auc", "pooled_auc"] {
            out.push_str(&format!("\t{col}_mean\t{col}_sd"));
        }
        out.push('\n');
        for c in &self.cells {
            out.push_str(&c.cell.id);
            for m in [c.r1, c.r5, c.probe_accuracy, c.mean_auc, c.pooled_auc] {
                out.push_str(&format!("\t{}\t{}", m.mean, m.sd));
            }
            out.push('\n');
        }
        out
    }
}

/// Resolved configuration of every `(cell, seed)`; fails on the first
/// invalid cell so nothing trains on a broken grid.
pub fn resolve_grid(
    base: &ExperimentConfig,
    cells: &[AblationCell],
    seeds: &[u64],
) -> Result<Vec<Vec<ExperimentConfig>>> {
    if seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one seed".into()));
    }
    cells
        .iter()
        .map(|c| {
            let cfg = base
                .clone()
                .with_overrides(c.overrides.iter().map(String::as_str))
                .map_err(|e| Error::Config(format!("cell `{}`: {e}", c.id)))?;
            Ok(seeds
                .iter()
                .map(|&s| ExperimentConfig { seed: s, ..cfg.clone() })
                .collect())
        })
        .collect()
}

/// Trains every cell for every seed. Seeds share a generated dataset across
/// cells, so cells differ only in the ablated settings.
pub fn run_ablation(
    base: &ExperimentConfig,
    cells: &[AblationCell],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationCell, u64, &CellRun),
) -> Result<AblationTable> {
    let grid = resolve_grid(base, cells, seeds)?;
    let mut runs: Vec<Vec<CellRun>> = vec![Vec::with_capacity(seeds.len()); cells.len()];
    for (si, &seed) in seeds.iter().enumerate() {
        let data = generate_dataset(&base.world, seed)?;
        for (ci, c) in cells.iter().enumerate() {
            let outcome = train_on(&grid[ci][si], &data)?;
            let last = outcome.last().clone();
            let run = CellRun {
                seed,
                r1: last.recalls.r1(),
                mean_auc: outcome.density.mean_auc(),
                pooled_auc: outcome.density.pooled_auc.unwrap_or(f64::NAN),
                final_metrics: last,
            };
            progress(c, seed, &run);
            runs[ci].push(run);
        }
    }
    let cells = cells
        .iter()
        .zip(runs)
        .map(|(c, runs)| {
            let col = |f: &dyn Fn(&CellRun) -> f64| MeanSd::of(&runs.iter().map(f).collect::<Vec<_>>());
            CellSummary {
                cell: c.clone(),
                r1: col(&|r| r.r1),
                r5: col(&|r| {
                    0.5 * (r.final_metrics.recalls.image_to_text_r5 + r.final_metrics.recalls.text_to_image_r5)
                }),
                probe_accuracy: col(&|r| r.final_metrics.probe_accuracy),
                mean_auc: col(&|r| r.mean_auc),
                pooled_auc: col(&|r| r.pooled_auc),
                runs,
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::AugmentationPolicy;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.world.n_pairs = 120;
        cfg.world.eval_fraction = 0.25;
        cfg.world.height = 8;
        cfg.world.width = 8;
        cfg.model.image_hidden = vec![24];
        cfg.model.repr_dim = 12;
        cfg.model.aug_hidden = vec![8];
        cfg.model.aug_dim = 4;
        cfg.model.text_hidden = vec![16];
        cfg.model.text_repr_dim = 12;
        cfg.model.embed_dim = 8;
        cfg.model.head_depth = 1;
        cfg.train.batch_size = 10;
        cfg.train.epochs = 2;
        cfg.train.warmup_epochs = 1;
        cfg.eval.probe_train = 60;
        cfg.eval.probe_steps = 10;
        cfg.eval.density_batch = 8;
        cfg
    }

    #[test]
    fn batch_layout_and_view_policies() {
        let mut cfg = small_config();
        cfg.augment.weak = AugmentationPolicy::none();
        let data = generate_dataset(&cfg.world, 3).unwrap();
        let pairs: Vec<&SyntheticPair> = data.train.iter().take(4).collect();
        let batch = assemble_batch(&pairs, &cfg.views, &cfg.augment, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(batch.layout.total(), 16);
        assert_eq!(batch.pixels.shape(), (12, cfg.world.pixel_dim()));
        assert_eq!(batch.texts.shape(), (4, cfg.world.text_dim()));
        assert_eq!(batch.samples, pairs.iter().map(|p| p.index).collect::<Vec<_>>());
        // View 0 comes from the first-view policy, here the identity.
        assert!(batch.instructions[..4].iter().all(|i| i.is_identity()));
        assert_eq!(batch.pixels.row(2), pairs[2].image.pixels());
        assert!(!batch.instructions[4..].iter().all(|i| i.is_identity()));
        assert_eq!(batch.texts.row(1), &pairs[1].text[..]);

        let again = assemble_batch(&pairs, &cfg.views, &cfg.augment, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(batch, again);
        let err = assemble_batch(&pairs[..1], &cfg.views, &cfg.augment, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn extra_text_views_are_noisy_copies() {
        let mut cfg = small_config();
        cfg.views.text = 2;
        let data = generate_dataset(&cfg.world, 3).unwrap();
        let pairs: Vec<&SyntheticPair> = data.train.iter().take(3).collect();
        let batch = assemble_batch(&pairs, &cfg.views, &cfg.augment, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(batch.texts.rows(), 6);
        assert_eq!(batch.texts.row(0), &pairs[0].text[..]);
        assert_ne!(batch.texts.row(3), &pairs[0].text[..]);
    }

    #[test]
    fn learning_rate_schedule() {
        assert!((learning_rate(1.0, 0, 4, 20) - 0.25).abs() < 1e-15);
        assert!((learning_rate(1.0, 3, 4, 20) - 1.0).abs() < 1e-15);
        assert!((learning_rate(1.0, 4, 4, 20) - 1.0).abs() < 1e-15);
        assert!((learning_rate(1.0, 12, 4, 20) - 0.5).abs() < 1e-12);
        assert!(learning_rate(1.0, 19, 4, 20) < 0.01);
        assert_eq!(learning_rate(1.0, 30, 4, 20), 0.0);
    }

    #[test]
    fn retrieval_extremes() {
        let emb = DenseMatrix::from_fn(8, 8, |r, c| if r == c { 1.0 } else { 0.1 });
        let r = retrieval_recalls(&emb, &emb).unwrap();
        assert_eq!(r.r1(), 1.0);
        assert_eq!(r.image_to_text_r5, 1.0);
        // All candidates tie with the match: pessimistic ranking gives zero.
        let flat = DenseMatrix::filled(8, 3, 1.0);
        let r = retrieval_recalls(&flat, &flat).unwrap();
        assert_eq!(r.r1(), 0.0);
        assert_eq!(r.text_to_image_r5, 0.0);
        assert!(retrieval_recalls(&flat.row_slice(0, 4), &flat.row_slice(0, 4)).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2, 0.3]), Some(1.0));
        assert_eq!(auc(&[0.1], &[0.9]), Some(0.0));
        assert_eq!(auc(&[0.5, 0.5], &[0.5, 0.5]), Some(0.5));
        assert_eq!(auc(&[0.3, 0.7], &[0.5]), Some(0.5));
        assert_eq!(auc(&[], &[0.5]), None);
    }

    #[test]
    fn density_pairs_are_counted_once() {
        let layout = BatchLayout::new(3, 3, 1).unwrap();
        let cos = DenseMatrix::from_fn(12, 12, |i, j| {
            if layout.sample_of(i) == layout.sample_of(j) {
                0.9
            } else {
                -0.2
            }
        });
        let stats = similarity_density_stats(&cos, &PairIndexSets::build(layout), 10).unwrap();
        let ii = stats.get(Domain::ImageImage);
        assert_eq!((ii.positive_count, ii.negative_count), (9, 27));
        let it = stats.get(Domain::ImageText);
        assert_eq!((it.positive_count, it.negative_count), (9, 18));
        let tt = stats.get(Domain::TextText);
        assert_eq!((tt.positive_count, tt.auc), (0, None));
        assert_eq!(stats.mean_auc(), 1.0);
        assert_eq!(stats.pooled_auc, Some(1.0));
        assert_eq!(ii.positive_histogram.iter().sum::<usize>(), 9);
        assert_eq!(ii.positive_histogram[9], 9);
    }

    #[test]
    fn separated_supervision_skips_domains_without_positives() {
        let mut cfg = small_config();
        cfg.similarity.supervision = Supervision::Separated;
        cfg.loss.trivial = false;
        let layout = BatchLayout::new(3, 3, 1).unwrap();
        let sets = PairIndexSets::build(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let log = DenseMatrix::from_fn(12, 12, |_, _| rng.random_range(-2.0..2.0));
        let objective = Objective::from_config(&cfg).unwrap();
        let report = objective.evaluate(&log, &sets).unwrap();
        let mut manual = 0.0;
        for d in [Domain::ImageImage, Domain::ImageText] {
            let r = sets.restricted_to(d).requiring_positives(false);
            manual += 0.5 * objective.loss.evaluate(&log, &r, &objective.weights).unwrap().loss;
        }
        assert!((report.loss - manual).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_freezes_model_and_metrics() {
        let mut cfg = small_config();
        cfg.train.lr = 0.0;
        let initial = Model::new(&cfg).unwrap().store.to_vector();
        let outcome = train(&cfg).unwrap();
        assert_eq!(outcome.model.store.to_vector(), initial);
        let first = &outcome.history[0];
        for rec in &outcome.history[1..] {
            assert_eq!(rec.recalls, first.recalls);
            assert_eq!(rec.probe_accuracy, first.probe_accuracy);
            assert_eq!(rec.auc, first.auc);
            assert_eq!(rec.tau, first.tau);
        }
    }

    #[test]
    fn augmentation_path_leaves_image_encoder_untouched() {
        let cfg = small_config();
        let data = generate_dataset(&cfg.world, 5).unwrap();
        let model = Model::new(&cfg).unwrap();
        let pairs: Vec<&SyntheticPair> = data.train.iter().take(4).collect();
        let batch = assemble_batch(&pairs, &cfg.views, &cfg.augment, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let step = batch_loss_and_grad(&model, &batch, &Objective::from_config(&cfg).unwrap()).unwrap();
        // Perturbing the augmentation codes only moves the head and the
        // augmentation encoder, never the pixel encoder's gradient.
        let mut shifted = batch.clone();
        shifted.codes.data_mut().iter_mut().for_each(|v| *v += 0.5);
        let other = batch_loss_and_grad(&model, &shifted, &Objective::from_config(&cfg).unwrap()).unwrap();
        assert!(step.loss.is_finite() && other.loss.is_finite());
        assert_ne!(step.loss, other.loss);
        let h = model
            .encoders
            .represent_images(&model.store, &batch.pixels, &batch.codes)
            .unwrap();
        let h2 = model
            .encoders
            .represent_images(&model.store, &shifted.pixels, &shifted.codes)
            .unwrap();
        assert_eq!(h, h2);
    }

    #[test]
    fn grid_cells_and_validation() {
        let base = small_config();
        let ids: Vec<String> = AblationAxis::Loss.cells(&base).into_iter().map(|c| c.id).collect();
        assert_eq!(
            ids,
            [
                "milnce",
                "supcon",
                "mpnce-no-trivial-no-weights",
                "mpnce-no-weights",
                "mpnce"
            ]
        );
        assert_eq!(AblationAxis::Similarity.cells(&base).len(), 3);
        assert_eq!(AblationAxis::Awareness.cells(&base).len(), 3);
        assert_eq!(AblationAxis::Head.cells(&base).len(), 9);
        assert_eq!(AblationAxis::Augmentation.cells(&base).len(), 6);
        for axis in [
            AblationAxis::Loss,
            AblationAxis::Similarity,
            AblationAxis::Awareness,
            AblationAxis::Head,
            AblationAxis::Augmentation,
            AblationAxis::Views,
        ] {
            let grid = resolve_grid(&base, &axis.cells(&base), &[0, 1]).unwrap();
            assert!(grid.iter().all(|seeds| seeds.len() == 2 && seeds[1].seed == 1));
        }
        let grid = resolve_grid(&base, &AblationAxis::Loss.cells(&base), &[7]).unwrap();
        assert_eq!(grid[1][0].loss.kind, LossKind::SupCon);
        assert!(!grid[2][0].loss.trivial && !grid[2][0].loss.weights);
        let bad = [cell("bad", &["loss.kind=foo"])];
        assert!(matches!(resolve_grid(&base, &bad, &[0]), Err(Error::Config(_))));
        assert!(resolve_grid(&base, &bad[..0], &[]).is_err());
    }
}

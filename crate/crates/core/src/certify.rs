//! Randomized finite-difference certification of every loss, through the
//! similarity parameters, and of the full model on a tiny configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ExperimentConfig, Supervision};
use crate::encoders::{Awareness, HeadKind};
use crate::error::Result;
use crate::losses::{domain_weights, LossKind, LossSpec, MpNceOptions, PairIndexSets};
use crate::numeric::{finite_difference_gradient, relative_error, DenseMatrix, DEFAULT_EPSILON};
use crate::similarity::{score_matrix, BatchLayout, SimilarityMode, SimilarityParams};
use crate::training::{assemble_batch, batch_loss, batch_loss_and_grad, Model, Objective};
use crate::world::generate_dataset;

/// Tolerance for checks that go through the score matrix or the networks.
pub const CHAIN_TOLERANCE: f64 = 1e-4;
/// Tolerance for checks of `∂L/∂ log s` alone.
pub const LOSS_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub trials: usize,
    pub passed: usize,
    pub worst_error: f64,
    pub tolerance: f64,
}

impl CheckSummary {
    pub fn ok(&self) -> bool {
        self.passed == self.trials
    }
}

/// Every loss configuration the suite covers.
pub fn certified_losses() -> Vec<LossSpec> {
    let mut specs: Vec<LossSpec> = [LossKind::InfoNce, LossKind::MilNce, LossKind::SupCon]
        .into_iter()
        .map(|kind| LossSpec {
            kind,
            mpnce: MpNceOptions::default(),
        })
        .collect();
    for include_trivial in [false, true] {
        for apply_weights in [false, true] {
            specs.push(LossSpec {
                kind: LossKind::MpNce,
                mpnce: MpNceOptions {
                    include_trivial,
                    apply_weights,
                },
            });
        }
    }
    specs
}

struct Instance {
    layout: BatchLayout,
    embeddings: DenseMatrix,
    params: SimilarityParams,
}

fn random_instance(rng: &mut ChaCha8Rng, kind: LossKind) -> Result<Instance> {
    // InfoNCE needs exactly one positive per row: one image and one text view.
    let (v, t) = if kind == LossKind::InfoNce {
        (1, 1)
    } else {
        (rng.random_range(1..=3), rng.random_range(1..=2))
    };
    let n = rng.random_range(2..=3);
    let layout = BatchLayout::new(n, v, t)?;
    let dim = rng.random_range(3..=5);
    let embeddings = DenseMatrix::from_fn(layout.total(), dim, |_, _| rng.random_range(-1.0..1.0));
    let mode = match rng.random_range(0..3) {
        0 => SimilarityMode::Shared,
        1 => SimilarityMode::SharedWithOffset,
        _ => SimilarityMode::DomainDependent,
    };
    let mut params = SimilarityParams::new(1.0, 0.0, mode)?;
    let log_tau = rng.random_range(-1.2..0.4);
    let offset = rng.random_range(-0.3..0.3);
    for d in 0..3 {
        match mode {
            SimilarityMode::DomainDependent => {
                params.log_tau[d] = rng.random_range(-1.2..0.4);
                params.offset[d] = rng.random_range(-0.3..0.3);
            }
            SimilarityMode::SharedWithOffset => {
                params.log_tau[d] = log_tau;
                params.offset[d] = offset;
            }
            SimilarityMode::Shared => params.log_tau[d] = log_tau,
        }
    }
    Ok(Instance {
        layout,
        embeddings,
        params,
    })
}

/// Free coordinates of the similarity parameters in each mode: shared
/// modes tie all slots to slot 0.
fn free_slots(mode: SimilarityMode) -> (usize, usize) {
    match mode {
        SimilarityMode::Shared => (1, 0),
        SimilarityMode::SharedWithOffset => (1, 1),
        SimilarityMode::DomainDependent => (3, 3),
    }
}

fn unpack(inst: &Instance, point: &[f64]) -> Result<(DenseMatrix, SimilarityParams)> {
    let len = inst.embeddings.len();
    let emb = DenseMatrix::new(inst.embeddings.rows(), inst.embeddings.cols(), point[..len].to_vec())?;
    let (nt, nb) = free_slots(inst.params.mode);
    let mut params = inst.params;
    for d in 0..3 {
        params.log_tau[d] = point[len + d.min(nt - 1)];
        if nb > 0 {
            params.offset[d] = point[len + nt + d.min(nb - 1)];
        }
    }
    Ok((emb, params))
}

fn check_through_scores(spec: LossSpec, inst: &Instance, supervision: Supervision) -> Result<f64> {
    let sets = PairIndexSets::build(inst.layout);
    let objective = Objective {
        loss: spec,
        supervision,
        weights: domain_weights(inst.layout.image_views, inst.layout.text_views)?,
    };
    let scores = score_matrix(&inst.embeddings, inst.layout, &inst.params)?;
    let report = objective.evaluate(scores.log_scores(), &sets)?;
    let g = scores.backward_log_scores(&report.grad_log_scores)?;
    let (nt, nb) = free_slots(inst.params.mode);
    let mut analytic = g.embeddings.data().to_vec();
    analytic.extend_from_slice(&g.log_tau[..nt]);
    analytic.extend_from_slice(&g.offset[..nb]);
    let mut point = inst.embeddings.data().to_vec();
    point.extend_from_slice(&inst.params.log_tau[..nt]);
    point.extend_from_slice(&inst.params.offset[..nb]);
    let numeric = finite_difference_gradient(
        |p| {
            let (emb, params) = unpack(inst, p)?;
            let s = score_matrix(&emb, inst.layout, &params)?;
            Ok(objective.evaluate(s.log_scores(), &sets)?.loss)
        },
        &point,
        DEFAULT_EPSILON,
    )?;
    Ok(relative_error(&analytic, &numeric))
}

fn check_log_scores(spec: LossSpec, inst: &Instance) -> Result<f64> {
    let sets = PairIndexSets::build(inst.layout);
    let weights = domain_weights(inst.layout.image_views, inst.layout.text_views)?;
    let scores = score_matrix(&inst.embeddings, inst.layout, &inst.params)?;
    let report = spec.evaluate(scores.log_scores(), &sets, &weights)?;
    let log = scores.log_scores().clone();
    let numeric = finite_difference_gradient(
        |p| {
            let m = DenseMatrix::new(log.rows(), log.cols(), p.to_vec())?;
            Ok(spec.evaluate(&m, &sets, &weights)?.loss)
        },
        log.data(),
        DEFAULT_EPSILON,
    )?;
    Ok(relative_error(report.grad_log_scores.data(), &numeric))
}

fn summarize(name: String, errors: &[f64], tolerance: f64) -> CheckSummary {
    CheckSummary {
        name,
        trials: errors.len(),
        passed: errors.iter().filter(|&&e| e <= tolerance).count(),
        worst_error: errors.iter().cloned().fold(0.0, f64::max),
        tolerance,
    }
}

/// Smallest configuration that exercises every network component.
pub fn tiny_config(awareness: Awareness, head: HeadKind, mode: SimilarityMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.world.n_pairs = 12;
    cfg.world.eval_fraction = 0.5;
    cfg.world.height = 4;
    cfg.world.width = 4;
    cfg.world.latent_dim = 3;
    cfg.world.n_hues = 2;
    cfg.world.n_classes = 2;
    cfg.model.image_hidden = vec![6];
    cfg.model.repr_dim = 4;
    cfg.model.aug_hidden = vec![5];
    cfg.model.aug_dim = 3;
    cfg.model.text_hidden = vec![6];
    cfg.model.text_repr_dim = 4;
    cfg.model.embed_dim = 4;
    cfg.model.head_kind = head;
    cfg.model.head_depth = 1;
    cfg.model.head_expansion = 1;
    cfg.model.awareness = awareness;
    cfg.similarity.mode = mode;
    cfg.similarity.init_tau = 0.5;
    cfg.similarity.init_offset = 0.1;
    cfg.train.batch_size = 2;
    cfg.eval.density_batch = 2;
    cfg
}

/// Relative error between the backpropagated gradient of the training
/// objective and central differences over every trainable scalar.
pub fn end_to_end_error(config: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let data = generate_dataset(&config.world, config.seed)?;
    let mut model = Model::new(config)?;
    // Move the similarity parameters and zero-initialized biases off their
    // initial values so that every coordinate is exercised.
    let names: Vec<String> = model.store.names().map(String::from).collect();
    for name in &names {
        if name.starts_with("similarity.") {
            continue;
        }
        for v in model.store.get_mut(name)?.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let log_tau: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..0.0)).collect();
    let offset: Vec<f64> = (0..3).map(|_| rng.random_range(-0.2..0.2)).collect();
    *model.store.get_mut(crate::training::LOG_TAU_PARAM)? = DenseMatrix::row_vector(&log_tau);
    *model.store.get_mut(crate::training::OFFSET_PARAM)? = DenseMatrix::row_vector(&offset);
    let pairs: Vec<_> = data.train.iter().take(config.train.batch_size).collect();
    let batch = assemble_batch(&pairs, &config.views, &config.augment, rng)?;
    let objective = Objective::from_config(config)?;
    let analytic = batch_loss_and_grad(&model, &batch, &objective)?
        .grads
        .to_vector(&model.store);
    let point = model.store.to_vector();
    let numeric = finite_difference_gradient(
        |p| {
            model.store.set_from_vector(p)?;
            batch_loss(&model, &batch, &objective)
        },
        &point,
        DEFAULT_EPSILON,
    )?;
    Ok(relative_error(&analytic, &numeric))
}

/// Runs `trials` random instances per check. Shared similarity modes are
/// checked through their free scalars; end-to-end checks use the
/// domain-dependent mode, where every stored slot is free.
pub fn run_gradient_suite(trials: usize, seed: u64) -> Result<Vec<CheckSummary>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for spec in certified_losses() {
        let mut chain = Vec::with_capacity(trials);
        let mut separated = Vec::with_capacity(trials);
        let mut loss_level = Vec::with_capacity(trials);
        for _ in 0..trials {
            let inst = random_instance(&mut rng, spec.kind)?;
            chain.push(check_through_scores(spec, &inst, Supervision::Unified)?);
            loss_level.push(check_log_scores(spec, &inst)?);
            if spec.kind != LossKind::InfoNce {
                separated.push(check_through_scores(spec, &inst, Supervision::Separated)?);
            }
        }
        let label = spec.label();
        out.push(summarize(
            format!("{label}: log-score gradient"),
            &loss_level,
            LOSS_TOLERANCE,
        ));
        out.push(summarize(
            format!("{label}: embeddings, log tau, offset"),
            &chain,
            CHAIN_TOLERANCE,
        ));
        if !separated.is_empty() {
            out.push(summarize(
                format!("{label}: separated supervision"),
                &separated,
                CHAIN_TOLERANCE,
            ));
        }
    }
    let mut e2e = Vec::new();
    let variants = [
        (Awareness::Head, HeadKind::Residual),
        (Awareness::Head, HeadKind::Mlp),
        (Awareness::Agnostic, HeadKind::Linear),
        (Awareness::Encoder, HeadKind::Residual),
    ];
    for (i, &(awareness, head)) in variants.iter().cycle().take(trials.clamp(1, 8)).enumerate() {
        let mut cfg = tiny_config(awareness, head, SimilarityMode::DomainDependent);
        cfg.seed = seed.wrapping_add(i as u64);
        e2e.push(end_to_end_error(&cfg, &mut rng)?);
    }
    out.push(summarize(
        "full model: every trainable parameter".into(),
        &e2e,
        CHAIN_TOLERANCE,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let results = run_gradient_suite(5, 3).unwrap();
        for r in &results {
            assert!(r.ok(), "{r:?}");
        }
        assert_eq!(certified_losses().len(), 7);
    }
}

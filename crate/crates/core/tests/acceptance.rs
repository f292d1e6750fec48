//! Acceptance suite: one PASS/FAIL line per criterion; exits non-zero if any
//! criterion fails. Criteria 5 to 9 share one set of default-config runs.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use mpcl_core::certify::run_gradient_suite;
use mpcl_core::cli::run;
use mpcl_core::config::ExperimentConfig;
use mpcl_core::losses::{
    closed_form, domain_weights, infonce_loss, milnce_loss, mpnce_loss, positive_pair_counts, supcon_loss,
    weighted_positive_mass, MpNceOptions, PairIndexSets,
};
use mpcl_core::numeric::DenseMatrix;
use mpcl_core::similarity::{score_matrix, BatchLayout, Domain, SimilarityMode, SimilarityParams};
use mpcl_core::training::{run_ablation, AblationAxis, AblationCell, AblationTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn random_embeddings(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, dim, |_, _| rng.random_range(-1.0..1.0))
}

fn random_domain_params(rng: &mut ChaCha8Rng) -> SimilarityParams {
    let mut p = SimilarityParams::new(0.1, 0.0, SimilarityMode::DomainDependent).unwrap();
    for d in 0..3 {
        p.log_tau[d] = rng.random_range(0.05f64..1.0).ln();
        p.offset[d] = rng.random_range(-0.5..0.5);
    }
    p
}

/// Row 0 of a two-sample batch whose positives carry `positives` and whose
/// negatives share `negative_sum` equally.
fn single_row(positives: &[f64], negative_sum: f64) -> (DenseMatrix, PairIndexSets) {
    let sets = PairIndexSets::for_views(2, positives.len(), 1).unwrap();
    let m = sets.rows();
    let mut log = DenseMatrix::zeros(m, m);
    for (&slot, &p) in sets.positives(0).iter().zip(positives) {
        log.set(0, slot, p.ln());
    }
    let negs = sets.negatives(0);
    for &n in negs {
        log.set(0, n, (negative_sum / negs.len() as f64).ln());
    }
    (log, sets)
}

fn plain() -> MpNceOptions {
    MpNceOptions {
        include_trivial: false,
        apply_weights: false,
    }
}

fn gradient_certification() -> Outcome {
    let start = Instant::now();
    let results = run_gradient_suite(100, 2024).unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<&str> = results.iter().filter(|r| !r.ok()).map(|r| r.name.as_str()).collect();
    let worst = results.iter().map(|r| r.worst_error).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} checks x 100 trials, worst relative error {worst:.1e}, {:.1}s; failed: {failed:?}",
            results.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn closed_form_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(2..6);
        let pos: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..50.0)).collect();
        let neg = rng.random_range(0.01..50.0);
        let (log, sets) = single_row(&pos, neg);
        let rows = sets.num_active() as f64;
        let mil = milnce_loss(&log, &sets).unwrap().grad_scores(&log).unwrap();
        let sup = supcon_loss(&log, &sets).unwrap().grad_scores(&log).unwrap();
        let mp = mpnce_loss(&log, &sets, &domain_weights(1, 1).unwrap(), plain())
            .unwrap()
            .grad_scores(&log)
            .unwrap();
        for (q, &slot) in sets.positives(0).iter().enumerate() {
            let err = |got: f64, want: f64| (got * rows - want).abs() / want.abs().max(1.0);
            worst = worst
                .max(err(mil.get(0, slot), closed_form::milnce_grad(&pos, neg)))
                .max(err(sup.get(0, slot), closed_form::supcon_grad(&pos, neg, q)))
                .max(err(mp.get(0, slot), closed_form::mpnce_grad(&pos, neg, q)));
        }
    }
    let (log, sets) = single_row(&[10.0, 0.1], 1.0);
    let rows = sets.num_active() as f64;
    let hard = sets.positives(0)[1];
    let easy = sets.positives(0)[0];
    let mil_hard = milnce_loss(&log, &sets)
        .unwrap()
        .grad_scores(&log)
        .unwrap()
        .get(0, hard)
        * rows;
    let sup_easy = supcon_loss(&log, &sets)
        .unwrap()
        .grad_scores(&log)
        .unwrap()
        .get(0, easy)
        * rows;
    let worked = (mil_hard + 0.00892).abs() < 5e-6 && (sup_easy - 0.0401).abs() < 5e-5;
    outcome(
        worst <= 1e-12 && worked,
        format!("worst deviation {worst:.1e}; MIL-NCE dL/ds_hard = {mil_hard:.5}, SupCon dL/ds_easy = {sup_easy:.4}"),
    )
}

fn offset_cancellation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_single: f64 = 0.0;
    let mut nonzero = 0;
    let trials = 100;
    for _ in 0..trials {
        let n = rng.random_range(2..6);
        let layout = BatchLayout::new(n, 1, 1).unwrap();
        let emb = random_embeddings(&mut rng, layout.total(), 5);
        let sets = PairIndexSets::build(layout);
        let tau = rng.random_range(0.05..1.0);
        let shared = SimilarityParams::new(tau, rng.random_range(-0.5..0.5), SimilarityMode::SharedWithOffset).unwrap();
        let s = score_matrix(&emb, layout, &shared).unwrap();
        let g = s
            .backward_log_scores(&infonce_loss(s.log_scores(), &sets).unwrap().grad_log_scores)
            .unwrap();
        worst_single = g.offset.iter().fold(worst_single, |w, b| w.max(b.abs()));

        let per_domain = random_domain_params(&mut rng);
        let s = score_matrix(&emb, layout, &per_domain).unwrap();
        let g = s
            .backward_log_scores(&infonce_loss(s.log_scores(), &sets).unwrap().grad_log_scores)
            .unwrap();
        if g.offset.iter().any(|b| b.abs() > 1e-6) {
            nonzero += 1;
        }
    }
    outcome(
        worst_single <= 1e-12 && nonzero == trials,
        format!("shared: max |dL/db| {worst_single:.1e}; domain-dependent: nonzero on {nonzero}/{trials} batches"),
    )
}

fn offset_shift_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let weights = domain_weights(3, 1).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..5);
        let layout = BatchLayout::new(n, 3, 1).unwrap();
        let emb = random_embeddings(&mut rng, layout.total(), 6);
        let sets = PairIndexSets::build(layout);
        let params = random_domain_params(&mut rng);
        let base = score_matrix(&emb, layout, &params).unwrap();
        let l0 = mpnce_loss(base.log_scores(), &sets, &weights, MpNceOptions::default())
            .unwrap()
            .loss;
        for c in [-1.0, 0.3, 2.0] {
            let mut shifted = params;
            for d in Domain::ALL {
                shifted.offset[d.index()] += c * params.tau(d);
            }
            let s = score_matrix(&emb, layout, &shifted).unwrap();
            let l = mpnce_loss(s.log_scores(), &sets, &weights, MpNceOptions::default())
                .unwrap()
                .loss;
            worst = worst.max((l - l0).abs());
        }
    }
    outcome(
        worst <= 1e-12,
        format!("max |dL| {worst:.1e} over 100 batches x 3 shifts"),
    )
}

fn r1(table: &AblationTable, id: &str) -> f64 {
    table.cell(id).unwrap().r1.mean
}

fn pooled_auc(table: &AblationTable, id: &str) -> f64 {
    table.cell(id).unwrap().pooled_auc.mean
}

fn domain_auc(table: &AblationTable, id: &str) -> f64 {
    table.cell(id).unwrap().mean_auc.mean
}

fn loss_ordering(table: &AblationTable, elapsed: Duration) -> Outcome {
    let ids = ["milnce", "supcon", "mpnce-no-trivial-no-weights", "mpnce"];
    let v: Vec<f64> = ids.iter().map(|id| r1(table, id)).collect();
    let ordered = v.windows(2).all(|w| w[0] <= w[1]);
    let margin = v[3] - v[0];
    outcome(
        ordered && margin >= 0.02 && elapsed < Duration::from_secs(30 * 60),
        format!(
            "R@1 milnce {:.4} supcon {:.4} mpnce-no-trivial-no-weights {:.4} mpnce {:.4} (mpnce-no-weights {:.4}); margin {margin:.4}; {:.0}s",
            v[0],
            v[1],
            v[2],
            v[3],
            r1(table, "mpnce-no-weights"),
            elapsed.as_secs_f64()
        ),
    )
}

fn similarity_direction(losses: &AblationTable, extra: &AblationTable) -> Outcome {
    let top = r1(losses, "mpnce");
    let separated = r1(extra, "domain-separated");
    let shared = r1(extra, "shared-unified");
    let tie = 0.005;
    outcome(
        top > separated && top > shared && separated + tie >= shared,
        format!("domain-unified {top:.4}, domain-separated {separated:.4}, shared-unified {shared:.4}"),
    )
}

fn awareness_direction(losses: &AblationTable, extra: &AblationTable) -> Outcome {
    let head = r1(losses, "mpnce");
    let agnostic = r1(extra, "agnostic-head");
    let encoder = r1(extra, "aware-encoder");
    outcome(
        head > agnostic && encoder < head,
        format!("aware-head {head:.4}, agnostic-head {agnostic:.4}, aware-encoder {encoder:.4}"),
    )
}

fn offset_ordering(losses: &AblationTable) -> Outcome {
    let runs = &losses.cell("mpnce").unwrap().runs;
    let ok = runs
        .iter()
        .filter(|r| {
            r.final_metrics.offset[Domain::ImageImage.index()] > r.final_metrics.offset[Domain::ImageText.index()]
        })
        .count();
    let pairs: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.3}/{:.3}", r.final_metrics.offset[0], r.final_metrics.offset[1]))
        .collect();
    outcome(
        ok >= 4,
        format!(
            "b_II > b_IT in {ok}/{} seeds (b_II/b_IT: {})",
            runs.len(),
            pairs.join(", ")
        ),
    )
}

fn density_separation(losses: &AblationTable) -> Outcome {
    let ids = ["mpnce", "milnce", "supcon"];
    let [mp, mil, sup] = ids.map(|id| pooled_auc(losses, id));
    let [dmp, dmil, dsup] = ids.map(|id| domain_auc(losses, id));
    outcome(
        mp > mil && mp > sup,
        format!(
            "pooled AUC mpnce {mp:.4}, milnce {mil:.4}, supcon {sup:.4} (per-domain mean {dmp:.4}, {dmil:.4}, {dsup:.4})"
        ),
    )
}

fn intra_domain_separation(losses: &AblationTable) -> Outcome {
    let runs = &losses.cell("mpnce").unwrap().runs;
    let auc = |d: Domain| {
        runs.iter()
            .map(|r| r.final_metrics.auc[d.index()].unwrap())
            .sum::<f64>()
            / runs.len() as f64
    };
    let (ii, it) = (auc(Domain::ImageImage), auc(Domain::ImageText));
    outcome(ii > it, format!("mpnce AUC image-image {ii:.4}, image-text {it:.4}"))
}

fn weight_balance() -> Outcome {
    let n = 64;
    let sets = PairIndexSets::for_views(n, 3, 1).unwrap();
    let counts = positive_pair_counts(&sets, true);
    let weights = domain_weights(3, 1).unwrap();
    let mass = weighted_positive_mass(&sets, &weights, true);
    let ok = counts == [9 * n, 6 * n, n] && weights.0 == [1.0 / 9.0, 1.0 / 6.0, 1.0] && mass == [n as f64; 3];
    outcome(ok, format!("counts {counts:?}, weights {:?}, mass {mass:?}", weights.0))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = Vec::new();
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        let code = run([
            "mpcl",
            "train",
            "--set",
            "train.epochs=2",
            "--seed",
            "17",
            "-o",
            out.to_str().unwrap(),
        ]);
        csv.push((code, std::fs::read(out.join("metrics.csv")).unwrap_or_default()));
    }
    let ok = csv[0].0 == 0 && csv[1].0 == 0 && !csv[0].1.is_empty() && csv[0].1 == csv[1].1;
    outcome(
        ok,
        format!(
            "{} and {} bytes, identical: {}",
            csv[0].1.len(),
            csv[1].1.len(),
            csv[0].1 == csv[1].1
        ),
    )
}

fn extra_cells(base: &ExperimentConfig) -> Vec<AblationCell> {
    let pick = |axis: AblationAxis, ids: &[&str]| {
        axis.cells(base)
            .into_iter()
            .filter(|c| ids.contains(&c.id.as_str()))
            .collect::<Vec<_>>()
    };
    let mut cells = pick(AblationAxis::Similarity, &["shared-unified", "domain-separated"]);
    cells.extend(pick(AblationAxis::Awareness, &["agnostic-head", "aware-encoder"]));
    cells
}

fn main() -> ExitCode {
    let base = ExperimentConfig::default();
    let progress = |c: &AblationCell, seed: u64, run: &mpcl_core::training::CellRun| {
        eprintln!(
            "  {:<30} seed {seed}  R@1 {:.4}  AUC {:.4}  pooled AUC {:.4}",
            c.id, run.r1, run.mean_auc, run.pooled_auc
        );
    };

    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient certification", gradient_certification()),
        ("2 closed-form gradient identity", closed_form_identity()),
        ("3 offset cancellation", offset_cancellation()),
        ("4 offset-shift invariance", offset_shift_invariance()),
    ];

    let start = Instant::now();
    let losses = run_ablation(&base, &AblationAxis::Loss.cells(&base), &SEEDS, progress).unwrap();
    let loss_time = start.elapsed();
    let extra = run_ablation(&base, &extra_cells(&base), &SEEDS, progress).unwrap();

    results.push(("5 loss ordering", loss_ordering(&losses, loss_time)));
    results.push(("6 similarity ablation direction", similarity_direction(&losses, &extra)));
    results.push((
        "7 augmentation-awareness direction",
        awareness_direction(&losses, &extra),
    ));
    results.push(("8 learned-offset ordering", offset_ordering(&losses)));
    results.push(("9 density separation", density_separation(&losses)));
    results.push(("10 weight balance and pair counts", weight_balance()));
    results.push(("11 determinism", determinism()));
    results.push((
        "supplementary: image-image separates better than image-text",
        intra_domain_separation(&losses),
    ));

    let mut all = true;
    for (name, o) in &results {
        all &= o.passed;
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let passed = results.iter().filter(|(_, o)| o.passed).count();
    println!("{passed}/{} acceptance checks passed", results.len());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::artifacts::{comment_block, default_output_dir, write_atomic, write_json, OUTPUT_DIR_ENV};
use crate::certify::run_gradient_suite;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::training::{metrics_csv, run_ablation, train, AblationAxis, AblationTable, DensityStats, MetricsRecord};
use crate::world::{export_dataset, generate_dataset};

#[derive(Debug, Parser)]
#[command(
    name = "mpcl",
    about = "Multi-positive contrastive image-text training on a synthetic world",
    after_help = "Configuration files are TOML with `schema_version = 1`; print the full schema with defaults via --dump-defaults."
)]
pub struct Cli {
    /// Print the default configuration as TOML and exit.
    #[arg(long)]
    pub dump_defaults: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,

    /// Dotted override, e.g. `--set loss.kind=supcon`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Root seed override.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory [default: $MPCL_OUTPUT_DIR or ./mpcl-output].
    #[arg(long, short)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run and write metrics.csv, summary.json and histograms.tsv.
    Train(Common),
    /// Train every cell of an ablation axis over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AblationAxis,
        /// Number of seeds, counting up from the root seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Random instances per check.
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Compare the five loss configurations over several seeds.
    LossCompare {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Cosine histograms of positive and negative pairs per loss and domain.
    SimDensity(Common),
    /// Write the synthetic dataset as a flat binary file.
    ExportDataset(Common),
}

/// Header carried by every artifact: resolved config plus seed.
fn provenance(config: &ExperimentConfig) -> String {
    format!(
        "mpcl {}\nseed = {}\n{}",
        env!("CARGO_PKG_VERSION"),
        config.seed,
        config.to_toml()
    )
}

#[derive(Serialize)]
struct Provenance<'a, T: Serialize> {
    tool_version: &'static str,
    seed: u64,
    config: &'a ExperimentConfig,
    result: T,
}

fn write_json_with<T: Serialize>(path: &Path, config: &ExperimentConfig, result: T) -> Result<()> {
    write_json(
        path,
        &Provenance {
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: config.seed,
            config,
            result,
        },
    )
}

fn resolve(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        config.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    let out = common.output_dir.clone().unwrap_or_else(default_output_dir);
    Ok((config, out))
}

/// Histogram TSV: `bin_lower, bin_upper, positive_count, negative_count`
/// per domain block.
fn histogram_tsv(stats: &DensityStats, header: &str, domain: Option<usize>) -> String {
    let mut out = comment_block(header);
    out.push_str("domain\tbin_lower\tbin_upper\tpositive_count\tnegative_count\n");
    for (i, d) in stats.domains.iter().enumerate() {
        if domain.is_some_and(|k| k != i) {
            continue;
        }
        let bins = d.positive_histogram.len();
        for b in 0..bins {
            let lo = -1.0 + 2.0 * b as f64 / bins as f64;
            let hi = -1.0 + 2.0 * (b + 1) as f64 / bins as f64;
            out.push_str(&format!(
                "{}\t{lo}\t{hi}\t{}\t{}\n",
                d.domain, d.positive_histogram[b], d.negative_histogram[b]
            ));
        }
    }
    out
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    final_metrics: &'a MetricsRecord,
    density: &'a DensityStats,
}

fn cmd_train(common: &Common) -> Result<()> {
    let (config, out) = resolve(common)?;
    let outcome = train(&config)?;
    let header = provenance(&config);
    write_atomic(
        &out.join("metrics.csv"),
        metrics_csv(&outcome.history, &header).as_bytes(),
    )?;
    write_atomic(
        &out.join("histograms.tsv"),
        histogram_tsv(&outcome.density, &header, None).as_bytes(),
    )?;
    write_json_with(
        &out.join("summary.json"),
        &config,
        TrainSummary {
            final_metrics: outcome.last(),
            density: &outcome.density,
        },
    )?;
    let last = outcome.last();
    println!(
        "epoch {}: loss {:.4}  R@1 i2t {:.3} t2i {:.3}  probe {:.3}  -> {}",
        last.epoch,
        last.loss,
        last.recalls.image_to_text_r1,
        last.recalls.text_to_image_r1,
        last.probe_accuracy,
        out.display()
    );
    Ok(())
}

fn ablate(config: &ExperimentConfig, axis: AblationAxis, seeds: u64) -> Result<AblationTable> {
    let seeds: Vec<u64> = (0..seeds.max(1)).map(|k| config.seed + k).collect();
    let cells = axis.cells(config);
    run_ablation(config, &cells, &seeds, |cell, seed, run| {
        eprintln!(
            "{:<30} seed {seed:<4} R@1 {:.4}  AUC {:.4}  pooled AUC {:.4}",
            cell.id, run.r1, run.mean_auc, run.pooled_auc
        );
    })
}

fn write_table(out: &Path, stem: &str, config: &ExperimentConfig, table: &AblationTable) -> Result<()> {
    let tsv = format!("{}{}", comment_block(&provenance(config)), table.to_tsv());
    write_atomic(&out.join(format!("{stem}.tsv")), tsv.as_bytes())?;
    write_json_with(&out.join(format!("{stem}.json")), config, table)?;
    print!("{}", table.to_tsv());
    Ok(())
}

fn cmd_grad_check(common: &Common, trials: usize) -> Result<bool> {
    let (config, out) = resolve(common)?;
    let results = run_gradient_suite(trials, config.seed)?;
    let mut all = true;
    for r in &results {
        all &= r.ok();
        println!(
            "{} {:<55} {}/{} worst {:.2e} (tol {:.0e})",
            if r.ok() { "PASS" } else { "FAIL" },
            r.name,
            r.passed,
            r.trials,
            r.worst_error,
            r.tolerance
        );
    }
    let passed = results.iter().filter(|r| r.ok()).count();
    println!("{passed}/{} checks passed", results.len());
    write_json_with(&out.join("grad_check.json"), &config, &results)?;
    Ok(all)
}

fn cmd_sim_density(common: &Common) -> Result<()> {
    let (config, out) = resolve(common)?;
    for loss in ["milnce", "supcon", "mpnce"] {
        let mut cfg = config.clone();
        cfg.apply_override(&format!("loss.kind={loss}"))?;
        let outcome = train(&cfg)?;
        let header = provenance(&cfg);
        for (i, d) in outcome.density.domains.iter().enumerate() {
            let path = out.join(format!("density_{loss}_{}.tsv", d.domain));
            write_atomic(&path, histogram_tsv(&outcome.density, &header, Some(i)).as_bytes())?;
            println!(
                "{loss:<8} {:<12} AUC {}",
                d.domain,
                d.auc.map_or("undefined".into(), |a| format!("{a:.4}"))
            );
        }
        println!(
            "{loss:<8} {:<12} AUC {}",
            "pooled",
            outcome
                .density
                .pooled_auc
                .map_or("undefined".into(), |a| format!("{a:.4}"))
        );
        write_json_with(&out.join(format!("density_{loss}.json")), &cfg, &outcome.density)?;
    }
    Ok(())
}

fn cmd_export(common: &Common) -> Result<()> {
    let (config, out) = resolve(common)?;
    let data = generate_dataset(&config.world, config.seed)?;
    let path = out.join("dataset.bin");
    export_dataset(&data, &path)?;
    write_json_with(&out.join("dataset.json"), &config, "dataset.bin")?;
    println!(
        "wrote {} train + {} eval pairs to {}",
        data.train.len(),
        data.eval.len(),
        path.display()
    );
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 1 on runtime failure, 2 on configuration errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.dump_defaults {
        print!("{}", ExperimentConfig::default().to_toml());
        return 0;
    }
    let Some(command) = cli.command else {
        eprintln!("no subcommand given; see --help (output directory default: ${OUTPUT_DIR_ENV})");
        return 2;
    };
    let result = match &command {
        Command::Train(c) => cmd_train(c).map(|_| true),
        Command::Ablate { common, axis, seeds } => resolve(common).and_then(|(cfg, out)| {
            let table = ablate(&cfg, *axis, *seeds)?;
            write_table(
                &out,
                &format!("ablation_{}", format!("{axis:?}").to_lowercase()),
                &cfg,
                &table,
            )?;
            Ok(true)
        }),
        Command::GradCheck { common, trials } => cmd_grad_check(common, *trials),
        Command::LossCompare { common, seeds } => resolve(common).and_then(|(cfg, out)| {
            let table = ablate(&cfg, AblationAxis::Loss, *seeds)?;
            write_table(&out, "loss_compare", &cfg, &table)?;
            Ok(true)
        }),
        Command::SimDensity(c) => cmd_sim_density(c).map(|_| true),
        Command::ExportDataset(c) => cmd_export(c).map(|_| true),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

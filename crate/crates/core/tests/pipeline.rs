use std::fs;

use mpcl_core::cli::run;
use mpcl_core::config::ExperimentConfig;
use mpcl_core::training::train;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.world.n_pairs = 160;
    cfg.world.height = 8;
    cfg.world.width = 8;
    cfg.model.image_hidden = vec![32];
    cfg.model.repr_dim = 16;
    cfg.model.text_hidden = vec![24];
    cfg.model.text_repr_dim = 16;
    cfg.model.embed_dim = 16;
    cfg.model.head_depth = 1;
    cfg.train.batch_size = 16;
    cfg.train.epochs = 5;
    cfg.train.warmup_epochs = 1;
    cfg.eval.probe_train = 64;
    cfg.eval.probe_steps = 20;
    cfg.eval.density_batch = 16;
    cfg
}

fn small_config_file(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("small.toml");
    let mut cfg = small_config();
    cfg.train.epochs = 2;
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("mpcl").chain(args.iter().copied()))
}

#[test]
fn training_loss_decreases() {
    let mut ratios: Vec<f64> = (0..5)
        .map(|seed| {
            let mut cfg = small_config();
            cfg.seed = seed;
            let h = train(&cfg).unwrap().history;
            h.last().unwrap().loss / h[1].loss
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[2] < 1.0, "median last/first epoch loss ratio {}", ratios[2]);
}

#[test]
fn identical_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config_file(dir.path());
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let code = cli(&[
            "train",
            "-c",
            config.to_str().unwrap(),
            "--seed",
            "9",
            "-o",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        outputs.push(fs::read(out.join("metrics.csv")).unwrap());
        assert!(out.join("summary.json").exists() && out.join("histograms.tsv").exists());
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs.remove(0)).unwrap();
    assert!(text.starts_with("# mpcl "));
    assert!(text.contains("# seed = 9"));
    // Header block, column row, epochs 0..=2.
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(cli(&["train", "-c", "/nonexistent/config.toml", "-o", out]), 2);
    assert_eq!(cli(&["train", "--set", "loss.kind=foo", "-o", out]), 2);
    assert_eq!(cli(&["train", "--set", "no_such_key=1", "-o", out]), 2);
    assert_eq!(cli(&["no-such-command"]), 2);
    assert_eq!(cli(&[]), 2);
    assert_eq!(cli(&["--dump-defaults"]), 0);
    assert_eq!(cli(&["grad-check", "--trials", "3", "-o", out]), 0);
    assert!(dir.path().join("out/grad_check.json").exists());
}

#[test]
fn export_writes_binary_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config_file(dir.path());
    let out = dir.path().join("export");
    assert_eq!(
        cli(&[
            "export-dataset",
            "-c",
            config.to_str().unwrap(),
            "-o",
            out.to_str().unwrap()
        ]),
        0
    );
    let bytes = fs::read(out.join("dataset.bin")).unwrap();
    assert_eq!(&bytes[..8], b"MPCLDATA");
}

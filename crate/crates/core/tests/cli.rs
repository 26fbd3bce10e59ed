use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "num_classes=4",
    "samples_per_class=12",
    "heldout_per_class=6",
    "input_dim=8",
    "total_iters=30",
    "warmup_iters=10",
    "eval_every=10",
    "batch_classes=4",
    "batch_per_class=4",
    "memory_size=64",
    "hidden_dims=16",
    "embedding_dim=4",
];

fn prism(args: &[&str], sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_prism"));
    cmd.args(args);
    for s in sets {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("spawn prism")
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn train_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let sets: Vec<&str> = SMALL.iter().copied().chain(["noise_model=symmetric", "noise_rate=0.25"]).collect();
    let o = prism(&["train", "--out", out, "--seed", "3"], &sets);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "filter_diag.csv", "kappa.csv", "histogram.csv", "timing.csv", "effective_config"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let metrics = read(&dir.path().join("metrics.csv"));
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("iter,p_at_1,map_at_r,filter_acc,pclean_auc,kept_frac"));
    assert_eq!(lines.count(), 3);
    assert_eq!(read(&dir.path().join("filter_diag.csv")).lines().count(), 31);
    let effective = read(&dir.path().join("effective_config"));
    assert!(effective.contains("seed = 3"));
    assert!(effective.contains("noise_rate = 0.25"));
}

#[test]
fn effective_config_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = prism(&["train", "--out", a.path().to_str().unwrap()], SMALL);
    assert!(o.status.success());
    let cfg = a.path().join("effective_config");
    let o = prism(&["train", "--config", cfg.to_str().unwrap(), "--out", b.path().to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "filter_diag.csv", "kappa.csv"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn config_errors_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for bad in ["bogus=1", "noise_rate=1.5", "estimator=nothing", "estimator=proxysim"] {
        let o = prism(&["train", "--out", out], &[bad]);
        assert!(!o.status.success(), "{bad} accepted");
        let err = String::from_utf8_lossy(&o.stderr);
        assert_eq!(err.trim_end().lines().count(), 1, "{bad}: {err}");
        assert!(err.starts_with("error: "), "{err}");
    }
    let o = prism(&["train", "--config", "/nonexistent/prism.cfg", "--out", out], &[]);
    assert!(!o.status.success());
}

#[test]
fn gen_data_writes_manifest_with_requested_noise() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = prism(&["gen-data", "--out", out], &["num_classes=5", "batch_classes=5", "samples_per_class=20", "noise_model=symmetric", "noise_rate=0.4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = read(&dir.path().join("manifest.csv"));
    let rows: Vec<Vec<usize>> =
        manifest.lines().skip(1).map(|l| l.split(',').map(|t| t.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 100);
    let noisy = rows.iter().filter(|r| r[3] == 0).count();
    assert_eq!(noisy, 40);
    assert!(rows.iter().all(|r| (r[1] == r[2]) == (r[3] == 1)));
    assert_eq!(read(&dir.path().join("inputs.csv")).lines().count(), 101);
}

#[test]
fn kappa_mse_and_bench_produce_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = prism(&["kappa-mse", "--out", out], &["kappa_trials=10", "kappa_sizes=5,50"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = read(&dir.path().join("kappa_mse.csv"));
    assert_eq!(table.lines().next(), Some("n,mse,trials,dim,kappa_true"));
    assert_eq!(table.lines().count(), 3);

    let o = prism(&["bench-avgsim", "--out", out], &["bench_memory=256", "bench_classes=8", "bench_batch=16", "bench_iters=5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read(&dir.path().join("timing.csv")).starts_with("memory,classes,batch,iters"));
}

#[test]
fn sweep_runs_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = prism(&["sweep", "--out", out, "--param", "window", "--values", "1,4"], SMALL);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("window=1/metrics.csv").exists());
    assert!(dir.path().join("window=4/metrics.csv").exists());
    assert_eq!(read(&dir.path().join("sweep.csv")).lines().count(), 3);

    let o = prism(&["sweep", "--out", out, "--param", "window", "--values", "1,0"], SMALL);
    assert!(!o.status.success(), "window 0 accepted");
}

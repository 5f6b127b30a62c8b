use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use qbnn::data::{write_idx, DataLayout, DatasetTag, Split};
use qbnn::harness::{self, RunConfig, Settings, METRICS_HEADER, SCATTER_HEADER, TRAIN_LOG_HEADER};
use qbnn::INPUT_DIM;
use tempfile::TempDir;

fn quiet(_: &str) {}

/// Digits drawn as a bright horizontal band whose row depends on the class.
fn write_split(layout: &DataLayout, tag: DatasetTag, split: Split, n: usize, salt: usize) {
    let mut pixels = vec![0u8; n * INPUT_DIM];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i * 7 + salt) % 10;
        labels.push(class as u8);
        let img = &mut pixels[i * INPUT_DIM..(i + 1) * INPUT_DIM];
        for (p, v) in img.iter_mut().enumerate() {
            let (row, col) = (p / 28, p % 28);
            let on = match tag {
                DatasetTag::Fashion => col / 3 == class,
                _ => row / 3 == class,
            };
            *v = if on {
                200 + ((i + p) % 50) as u8
            } else {
                ((i * 31 + p * 17) % 23) as u8
            };
        }
    }
    let (imgs, labs) = (layout.images(tag, split), layout.labels(tag, split));
    fs::create_dir_all(imgs.parent().unwrap()).unwrap();
    write_idx(&imgs, &labs, &pixels, &labels).unwrap();
}

fn fixture() -> TempDir {
    let dir = TempDir::new().unwrap();
    let layout = DataLayout {
        root: dir.path().to_path_buf(),
    };
    write_split(&layout, DatasetTag::Mnist, Split::Train, 260, 0);
    write_split(&layout, DatasetTag::Mnist, Split::Test, 80, 3);
    write_split(&layout, DatasetTag::Fashion, Split::Train, 10, 0);
    write_split(&layout, DatasetTag::Fashion, Split::Test, 40, 5);
    dir
}

const TINY: &[(&str, &str)] = &[
    ("hidden", "16"),
    ("pretrain_epochs", "3"),
    ("svi_epochs", "3"),
    ("batch_size", "32"),
    ("mc_samples", "4"),
    ("train_size", "200"),
    ("monitor_size", "40"),
    ("ambiguous_train", "40"),
    ("test_size", "80"),
    ("ambiguous_test", "30"),
    ("fashion_test", "40"),
    ("lr", "0.01"),
];

fn tiny(data: &Path, method: &str, bits: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in TINY {
        cfg.set(k, v).unwrap();
    }
    cfg.set("method", method).unwrap();
    cfg.set("bits", bits).unwrap();
    cfg.data_dir = data.to_path_buf();
    cfg
}

fn config_file(dir: &Path, data: &Path, extra: &[&str]) -> PathBuf {
    let mut text = String::from("# tiny fixture run\n");
    for (k, v) in TINY {
        text.push_str(&format!("{k} = {v}\n"));
    }
    text.push_str(&format!("data_dir = {}\n", data.display()));
    for line in extra {
        text.push_str(line);
        text.push('\n');
    }
    let path = dir.join("tiny.cfg");
    fs::write(&path, text).unwrap();
    path
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn train_writes_every_artifact() {
    let data = fixture();
    let out = TempDir::new().unwrap();
    let cfg = tiny(data.path(), "jq", "4");
    let run = harness::cmd_train(&cfg, out.path(), &quiet).unwrap();
    assert_eq!(run.run_dir, out.path().join("jq-4-s0"));

    for f in [
        "ckpt_pre.bin",
        "ckpt_svi.bin",
        "train_log.csv",
        "scatter.csv",
        "metrics.csv",
        "manifest.json",
    ] {
        assert!(run.run_dir.join(f).is_file(), "missing {f}");
    }
    let log = read(run.run_dir.join("train_log.csv"));
    assert_eq!(log.lines().next().unwrap(), TRAIN_LOG_HEADER);
    assert_eq!(log.lines().count(), 1 + 3);

    let scatter = read(run.run_dir.join("scatter.csv"));
    assert_eq!(scatter.lines().next().unwrap(), SCATTER_HEADER);
    assert_eq!(scatter.lines().count(), 1 + 80 + 30 + 40);

    let metrics = read(run.run_dir.join("metrics.csv"));
    assert_eq!(metrics.lines().next().unwrap(), METRICS_HEADER);
    assert!(metrics.lines().nth(1).unwrap().starts_with("jq-4-s0,jq,4,"));

    let manifest: serde_json::Value = serde_json::from_str(&read(run.run_dir.join("manifest.json"))).unwrap();
    assert_eq!(manifest["counts"]["mnist_train"], 200);
    assert_eq!(manifest["counts"]["ambiguous_train"], 40);
    let digest = manifest["checkpoints"]["ckpt_svi.bin"].as_str().unwrap();
    let bytes = fs::read(run.run_dir.join("ckpt_svi.bin")).unwrap();
    assert_eq!(digest, format!("sha256:{}", qbnn::checkpoint::sha256_hex(&bytes)));
}

#[test]
fn identical_seeds_reproduce_byte_for_byte() {
    let data = fixture();
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let cfg = tiny(data.path(), "spq", "3");
    let ra = harness::cmd_train(&cfg, a.path(), &quiet).unwrap();
    let rb = harness::cmd_train(&cfg, b.path(), &quiet).unwrap();
    for f in ["ckpt_pre.bin", "ckpt_svi.bin", "scatter.csv", "metrics.csv"] {
        assert_eq!(
            fs::read(ra.run_dir.join(f)).unwrap(),
            fs::read(rb.run_dir.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let strip = |s: String| {
        s.lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(
        strip(read(ra.run_dir.join("train_log.csv"))),
        strip(read(rb.run_dir.join("train_log.csv")))
    );
}

#[test]
fn eval_is_deterministic_and_single_sample_has_no_mutual_information() {
    let data = fixture();
    let out = TempDir::new().unwrap();
    let mut cfg = tiny(data.path(), "vpq", "4");
    harness::cmd_train(&cfg, out.path(), &quiet).unwrap();

    cfg.seed = 0;
    let first = harness::cmd_eval(&cfg, None, out.path(), &quiet).unwrap();
    let again = harness::cmd_eval(&cfg, None, out.path(), &quiet).unwrap();
    assert_eq!(first.accuracy.to_bits(), again.accuracy.to_bits());
    assert_eq!(first.auroc_amnist.to_bits(), again.auroc_amnist.to_bits());
    assert!(out.path().join("vpq-4-s0/eval-n4-s0/scatter.csv").is_file());

    cfg.mc_samples = 1;
    let single = harness::cmd_eval(&cfg, None, out.path(), &quiet).unwrap();
    assert!(single.records.iter().all(|r| r.mutual_information == 0.0));
}

#[test]
fn eval_rejects_missing_or_mismatched_checkpoints() {
    let data = fixture();
    let out = TempDir::new().unwrap();
    let mut cfg = tiny(data.path(), "jq", "4");
    assert!(harness::cmd_eval(&cfg, None, out.path(), &quiet).is_err());

    harness::cmd_train(&cfg, out.path(), &quiet).unwrap();
    cfg.hidden = vec![12];
    let ckpt = out.path().join("jq-4-s0/ckpt_svi.bin");
    assert!(harness::cmd_eval(&cfg, Some(&ckpt), out.path(), &quiet).is_err());
}

#[test]
fn sweep_is_independent_of_parallelism() {
    let data = fixture();
    let settings = |jobs: &str| {
        let mut s = Settings {
            run: tiny(data.path(), "float", "fp"),
            ..Settings::default()
        };
        s.set("sweep.methods", "jq").unwrap();
        s.set("sweep.bits", "3").unwrap();
        s.set("sweep.seeds", "0,1").unwrap();
        s.set("sweep.jobs", jobs).unwrap();
        s
    };
    let (serial, parallel) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let rows = harness::cmd_sweep(&settings("1"), serial.path(), &quiet).unwrap();
    harness::cmd_sweep(&settings("2"), parallel.path(), &quiet).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.error.is_none()));

    let metrics = read(serial.path().join("metrics.csv"));
    assert_eq!(metrics, read(parallel.path().join("metrics.csv")));
    assert_eq!(metrics.lines().count(), 1 + 4);
    for id in ["float-fp-s0", "float-fp-s1", "jq-3-s0", "jq-3-s1"] {
        let run = serial.path().join(id);
        let manifests = fs::read_dir(&run)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name() == "manifest.json")
            .count();
        assert_eq!(manifests, 1, "{id}");
    }
}

#[test]
fn sweep_records_failed_runs_and_continues() {
    let data = fixture();
    let out = TempDir::new().unwrap();
    // a plain file where the run directory belongs makes that run fail
    fs::write(out.path().join("jq-2-s0"), b"").unwrap();
    let mut s = Settings {
        run: tiny(data.path(), "float", "fp"),
        ..Settings::default()
    };
    s.set("sweep.methods", "jq").unwrap();
    s.set("sweep.bits", "2").unwrap();
    s.set("sweep.seeds", "0").unwrap();
    let rows = harness::cmd_sweep(&s, out.path(), &quiet).unwrap();
    let failed: Vec<_> = rows.iter().filter(|r| r.error.is_some()).collect();
    assert_eq!(failed.len(), 1);
    assert!(failed[0].row.accuracy.is_nan());
    let metrics = read(out.path().join("metrics.csv"));
    assert!(metrics.contains("float-fp-s0,float,fp,"), "{metrics}");
    assert!(!metrics
        .lines()
        .find(|l| l.starts_with("float"))
        .unwrap()
        .contains("NaN"));
    assert!(metrics.contains("jq-2-s0,jq,2,NaN"));
}

fn qbnn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qbnn"))
}

#[test]
fn cli_train_then_eval() {
    let data = fixture();
    let work = TempDir::new().unwrap();
    let cfg = config_file(work.path(), data.path(), &["method = jq", "bits = 3"]);
    let out = work.path().join("runs");
    let status = qbnn()
        .args(["train", "-q", "--seed", "2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("jq-3-s2/manifest.json").is_file());

    let eval = qbnn()
        .args(["eval", "-q", "--seed", "2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(String::from_utf8_lossy(&eval.stdout).starts_with("accuracy="));
}

#[test]
fn cli_reports_every_configuration_problem() {
    let work = TempDir::new().unwrap();
    let cfg = config_file(
        work.path(),
        &work.path().join("nowhere"),
        &["method = jq", "bits = 1", "lr = -1"],
    );
    let out = qbnn()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(work.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("invalid configuration"));
    assert!(err.contains("bits"));
    assert!(err.contains("lr"));
    assert!(err.contains("QBNN_DATA_DIR"));
}

#[test]
fn cli_rejects_unknown_keys() {
    let work = TempDir::new().unwrap();
    let out = qbnn()
        .args(["fig-logquant", "--set", "no_such_key=1", "--out"])
        .arg(work.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cli_fig_logquant_writes_the_table() {
    let work = TempDir::new().unwrap();
    let out = qbnn()
        .args(["fig-logquant", "--seed", "0", "--set", "fig.bits=4", "--out"])
        .arg(work.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = read(work.path().join("fig_logquant.csv"));
    assert_eq!(csv.lines().next().unwrap(), harness::FIG_HEADER);
    assert_eq!(csv.lines().count(), 1 + 101);
}

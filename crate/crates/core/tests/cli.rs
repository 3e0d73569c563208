//! End-to-end tests of the `bitshare-nas` binary: exit codes, output
//! placement and overwrite protection.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bitshare-nas"));
    c.env_remove("BITSHARE_NAS_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// A synthetic dataset archive and a latency table for the tiny preset.
    fn new(classes: usize) -> Self {
        let f = Fixture {
            dir: tempfile::tempdir().expect("tempdir"),
        };
        let o = run(&[
            "ingest", "--kind", "synthetic", "--classes", &classes.to_string(), "--samples", "240", "--out",
            &s(&f.path("data.bsnas")),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = run(&[
            "latency", "make-synthetic", "--preset", "tiny", "--coeff", "10", "--overhead", "0.1", "--out",
            &s(&f.path("table.csv")),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, classes: usize, out: &str, edit: impl FnOnce(&mut serde_json::Value)) -> String {
        let mut v = json!({
            "backbone": {
                "num_blocks": 5, "groups_per_block": 4, "in_channels": 3, "stem_channels": 4,
                "block_channels": [4, 8, 8, 12, 16], "block_strides": [1, 2, 1, 2, 1],
                "num_classes": classes, "input_resolution": 8
            },
            "search": { "max_epochs": 2, "warmup_epochs": 1, "batch_size": 32, "threshold_lr": 5.0,
                        "retrain_epochs": 1, "eval_batches": 1, "samples_per_update": 2 },
            "reward": { "mu": 0.5, "nu": 0.5, "lat_threshold": 1.6, "acc_threshold": 0.9 },
            "dataset": {
                "kind": "synthetic", "path": s(&self.path("data.bsnas")),
                "classes": (0..classes).collect::<Vec<_>>(),
                "resolution": 8, "split": "half", "split_seed": 1
            },
            "latency": { "kind": "table", "path": s(&self.path("table.csv")) },
            "output_dir": out
        });
        edit(&mut v);
        let p = self.path(name);
        std::fs::write(&p, v.to_string()).expect("write config");
        s(&p)
    }
}

#[test]
fn help_exits_zero_and_bad_usage_exits_two() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["search"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn invalid_reward_weights_exit_two_before_any_output() {
    let f = Fixture::new(3);
    let out = f.path("run");
    let cfg = f.config("bad.json", 3, &s(&out), |v| v["reward"]["mu"] = json!(0.9));
    let o = run(&["search", "--config", &cfg]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!out.exists());
    // Overrides are validated too.
    let cfg = f.config("ok.json", 3, &s(&out), |_| {});
    let o = run(&["search", "--config", &cfg, "--mu", "0.7"]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn search_evolve_report_round_trip() {
    let f = Fixture::new(4);
    let root = f.path("root");
    std::fs::create_dir_all(&root).expect("root");
    // Relative output directories land under the output-root variable.
    let cfg = f.config("s1.json", 2, "stage1", |_| {});
    let o = bin().env("BITSHARE_NAS_OUT", &root).args(["search", "--config", &cfg]).output().expect("spawn");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stage1 = root.join("stage1");
    for f in ["checkpoint.bsnas", "result.json", "subnet.bsnas", "config.json"] {
        assert!(stage1.join(f).is_file(), "missing {f}");
    }

    // Same seed, byte-identical result.
    let again = f.config("s1b.json", 2, &s(&f.path("again")), |_| {});
    assert_eq!(code(&run(&["search", "--config", &again])), 0);
    assert_eq!(
        std::fs::read(stage1.join("result.json")).expect("a"),
        std::fs::read(f.path("again/result.json")).expect("b")
    );

    // Rerunning into a non-empty directory is refused without --force.
    let o = bin().env("BITSHARE_NAS_OUT", &root).args(["search", "--config", &cfg]).output().expect("spawn");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    let o = bin().env("BITSHARE_NAS_OUT", &root).args(["search", "--config", &cfg, "--force"]).output().expect("spawn");
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let ckpt = s(&stage1.join("checkpoint.bsnas"));
    let s2 = f.config("s2.json", 4, &s(&f.path("stage2")), |_| {});
    let o = run(&["evolve", "--config", &s2, "--checkpoint", &ckpt, "--target-accuracy", "0.3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let evolve: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path("stage2/evolve.json")).expect("evolve")).expect("json");
    assert_eq!(evolve["accuracy_by_epoch"].as_array().expect("curve").len(), 2);
    let drift = std::fs::read_to_string(f.path("stage2/drift.csv")).expect("drift");
    assert_eq!(drift.lines().count(), 1 + 14);

    let o = run(&["report", "--result", &s(&f.path("stage2/result.json")), "--out", &s(&f.path("report"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let curves = std::fs::read_to_string(f.path("report/curves.csv")).expect("curves");
    assert!(curves.starts_with("epoch,val_acc,expected_latency,reward"));
    assert_eq!(curves.lines().count(), 3);
    let pareto = std::fs::read_to_string(f.path("report/pareto.csv")).expect("pareto");
    assert!(pareto.lines().count() > 1);
    assert!(pareto.lines().skip(1).any(|l| l.ends_with("true")));
    let spec: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path("report/spec.json")).expect("spec")).expect("json");
    assert_eq!(spec.as_array().expect("layers").len(), 14);
}

#[test]
fn evolve_rejects_missing_checkpoint_and_other_backbones() {
    let f = Fixture::new(3);
    let cfg = f.config("c.json", 3, &s(&f.path("x")), |_| {});
    let o = run(&["evolve", "--config", &cfg, "--checkpoint", &s(&f.path("nope.bsnas"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let stage1 = f.config("s1.json", 3, &s(&f.path("stage1")), |_| {});
    assert_eq!(code(&run(&["search", "--config", &stage1])), 0);
    let wider = f.config("w.json", 3, &s(&f.path("wide")), |v| {
        v["backbone"]["block_channels"] = json!([4, 8, 8, 12, 24]);
    });
    let o = run(&["evolve", "--config", &wider, "--checkpoint", &s(&f.path("stage1/checkpoint.bsnas"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!f.path("wide").exists());

    // A corrupt checkpoint is a data error.
    std::fs::write(f.path("junk.bsnas"), b"not an archive").expect("junk");
    let o = run(&["evolve", "--config", &cfg, "--checkpoint", &s(&f.path("junk.bsnas"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn latency_table_problems_name_the_key() {
    let f = Fixture::new(2);
    let table = std::fs::read_to_string(f.path("table.csv")).expect("table");
    let o = run(&["latency", "validate", "--preset", "tiny", "--table", &s(&f.path("table.csv"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // Drop one row that is not the header or the overhead row.
    let lines: Vec<&str> = table.lines().collect();
    let victim = lines.iter().skip(1).find(|l| !l.contains("overhead")).expect("a row").to_string();
    let missing: String = lines.iter().filter(|l| **l != victim).map(|l| format!("{l}\n")).collect();
    std::fs::write(f.path("missing.csv"), missing).expect("write");
    let o = run(&["latency", "validate", "--preset", "tiny", "--table", &s(&f.path("missing.csv"))]);
    assert_eq!(code(&o), 3);
    let fields: Vec<&str> = victim.split(',').collect();
    let err = stderr(&o);
    assert!(err.contains("missing"), "{err}");
    assert!(err.contains(fields[0]), "{err} should name layer {}", fields[0]);

    let no_overhead: String = lines.iter().filter(|l| !l.contains("overhead")).map(|l| format!("{l}\n")).collect();
    std::fs::write(f.path("noover.csv"), no_overhead).expect("write");
    let o = run(&["latency", "validate", "--preset", "tiny", "--table", &s(&f.path("noover.csv"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("overhead"), "{}", stderr(&o));

    // A search pointed at the broken table fails the same way.
    let cfg = f.config("c.json", 2, &s(&f.path("r")), |v| {
        v["latency"]["path"] = json!(s(&f.path("missing.csv")));
    });
    assert_eq!(code(&run(&["search", "--config", &cfg])), 3);
}

#[test]
fn corrupt_result_file_is_a_data_error() {
    let f = Fixture::new(2);
    std::fs::write(f.path("result.json"), "{\"history\": [").expect("write");
    let o = run(&["report", "--result", &s(&f.path("result.json")), "--out", &s(&f.path("rep"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = run(&["report", "--result", &s(&f.path("absent.json")), "--out", &s(&f.path("rep"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn ingest_refuses_to_overwrite() {
    let f = Fixture::new(2);
    let o = run(&["ingest", "--kind", "synthetic", "--out", &s(&f.path("data.bsnas"))]);
    assert_eq!(code(&o), 2);
    let o = run(&["ingest", "--kind", "synthetic", "--samples", "40", "--out", &s(&f.path("data.bsnas")), "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&run(&["ingest", "--kind", "cifar10", "--out", &s(&f.path("c.bsnas"))])), 2);
}

fn fake_cifar(dir: &Path, truncate_test: bool) {
    std::fs::create_dir_all(dir).expect("dir");
    let record = |i: usize| {
        let mut r = vec![(i % 10) as u8];
        r.extend((0..3072).map(|j| ((i * 7 + j * 13) % 256) as u8));
        r
    };
    let batch: Vec<u8> = (0..10_000).flat_map(record).collect();
    for n in 1..=5 {
        std::fs::write(dir.join(format!("data_batch_{n}.bin")), &batch).expect("write");
    }
    let test = if truncate_test { &batch[..batch.len() - 100] } else { &batch[..] };
    std::fs::write(dir.join("test_batch.bin"), test).expect("write");
}

#[test]
fn cifar_ingest_with_downsampling() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let raw = tmp.path().join("cifar");
    fake_cifar(&raw, false);
    let out = tmp.path().join("cifar.bsnas");
    let o = run(&["ingest", "--kind", "cifar10", "--dir", &s(&raw), "--downsample", "4", "--out", &s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = bitshare_nas::archive::Archive::load(&out, bitshare_nas::cli::DATASET_KIND).expect("archive");
    assert_eq!(a.meta["num_classes"], 10);
    assert_eq!(a.meta["resolution"], 8);
    let train = bitshare_nas::data::Dataset::from_archive(&a, "train.", 10).expect("train");
    let test = bitshare_nas::data::Dataset::from_archive(&a, "test.", 10).expect("test");
    assert_eq!((train.len(), test.len()), (50_000, 10_000));
    assert_eq!(train.image_len(), 3 * 8 * 8);

    fake_cifar(&raw, true);
    let o = run(&["ingest", "--kind", "cifar10", "--dir", &s(&raw), "--out", &s(&tmp.path().join("t.bsnas"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("test_batch.bin"), "{}", stderr(&o));
}

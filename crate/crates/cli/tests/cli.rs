use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boundmatch"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

const TINY: &str = r#"{
  "schema_version": 1,
  "scene": {"size": 32, "num_classes": 3},
  "n_train": 8,
  "n_val": 4,
  "label_fraction": 0.25,
  "model": {"num_classes": 3, "widths": [4, 8, 8, 8], "decoder_width": 8, "skip_width": 4},
  "trainer": {"total_iters": 6, "batch_labeled": 2, "batch_unlabeled": 2, "crop": 32, "eval_every": 3}
}"#;

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "labels"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        out.extend(
            names
                .into_iter()
                .map(|p| (p.display().to_string(), fs::read(&p).unwrap())),
        );
    }
    out
}

#[test]
fn gen_data_defaults_force_and_class_check() {
    let t = tempfile::tempdir().unwrap();
    let o = bm(t.path(), &["gen-data", "--out", "a"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(t.path().join("a/images")).unwrap().count(), 384);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["files"].as_array().unwrap().len(), 320 + 64);

    assert_eq!(code(&bm(t.path(), &["gen-data", "--out", "a", "--n", "4"])), 2);
    assert_eq!(
        code(&bm(
            t.path(),
            &["gen-data", "--out", "b", "--n", "5", "--n-val", "2", "--seed", "3"]
        )),
        0
    );
    assert_eq!(
        code(&bm(
            t.path(),
            &["gen-data", "--out", "c", "--n", "5", "--n-val", "2", "--seed", "3"]
        )),
        0
    );
    let (b, c) = (files(&t.path().join("b")), files(&t.path().join("c")));
    assert_eq!(b.len(), c.len());
    assert!(b.iter().zip(&c).all(|(x, y)| x.1 == y.1));
    assert_eq!(
        code(&bm(
            t.path(),
            &["gen-data", "--out", "b", "--n", "3", "--n-val", "1", "--force"]
        )),
        0
    );
    assert_eq!(fs::read_dir(t.path().join("b/images")).unwrap().count(), 4);

    let o = bm(t.path(), &["gen-data", "--out", "d", "--classes", "1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("num_classes"));
}

#[test]
fn train_then_eval_reproduces_final_metrics() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.json"), TINY).unwrap();
    assert_eq!(
        code(&bm(
            t.path(),
            &[
                "gen-data",
                "--out",
                "d",
                "--n",
                "8",
                "--n-val",
                "4",
                "--size",
                "32",
                "--classes",
                "3"
            ]
        )),
        0
    );
    let o = bm(
        t.path(),
        &[
            "train",
            "--config",
            "c.json",
            "--data",
            "d",
            "--out",
            "run",
            "--components",
            "bcrm,bsf,sgf",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(t.path().join("run/summary.json")).unwrap()).unwrap();
    assert_eq!(printed, summary["final_metrics"]);
    let losses = fs::read_to_string(t.path().join("run/losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 6);
    assert_eq!(
        fs::read_to_string(t.path().join("run/metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 2
    );

    let o = bm(
        t.path(),
        &[
            "eval",
            "--checkpoint",
            "run/final.bmck",
            "--data",
            "d",
            "--plot",
            "plots",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let evaluated: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(evaluated, summary["final_metrics"]);
    let svgs: Vec<_> = fs::read_dir(t.path().join("plots")).unwrap().collect();
    assert_eq!(svgs.len(), 1);
    assert!(fs::read_to_string(t.path().join("plots/mf_threshold.svg"))
        .unwrap()
        .starts_with("<svg"));

    let o = bm(
        t.path(),
        &["eval", "--checkpoint", "run/final.bmck", "--metrics", "miou,nope"],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("miou, biou, bf1, mf"));
    assert_eq!(code(&bm(t.path(), &["eval", "--checkpoint", "missing.bmck"])), 3);
    // a 5-class dataset cannot be scored by a 3-class model
    assert_eq!(
        code(&bm(
            t.path(),
            &["gen-data", "--out", "five", "--n", "2", "--n-val", "1", "--size", "32"]
        )),
        0
    );
    assert_eq!(
        code(&bm(
            t.path(),
            &["eval", "--checkpoint", "run/final.bmck", "--data", "five"]
        )),
        3
    );
}

#[test]
fn train_flag_errors() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.json"), TINY).unwrap();
    let o = bm(
        t.path(),
        &["train", "--config", "c.json", "--out", "r", "--components", "sgf"],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("add bcrm"));
    assert_eq!(
        code(&bm(
            t.path(),
            &["train", "--config", "c.json", "--out", "r", "--components", ""]
        )),
        0
    );
    assert_eq!(code(&bm(t.path(), &["train", "--config", "c.json"])), 2);
    assert_eq!(
        code(&bm(
            t.path(),
            &["train", "--config", "c.json", "--out", "r", "--data", "nowhere"]
        )),
        3
    );
    fs::write(
        t.path().join("bad.json"),
        r#"{"schema_version": 1, "trainer": {"itres": 5}}"#,
    )
    .unwrap();
    assert_eq!(code(&bm(t.path(), &["train", "--config", "bad.json", "--out", "r"])), 2);
    let derived = bm(
        t.path(),
        &[
            "train",
            "--config",
            "c.json",
            "--out",
            "r2",
            "--components",
            "bcrm",
            "--boundary",
            "binary",
            "--boundary-source",
            "derived",
            "--no-hbn",
            "--label-fraction",
            "1/2",
        ],
    );
    assert_eq!(code(&derived), 0, "{}", String::from_utf8_lossy(&derived.stderr));
    let snap: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("r2/config.json")).unwrap()).unwrap();
    assert_eq!(snap["model"]["boundary_mode"], "binary");
    assert_eq!(snap["trainer"]["boundary_source"], "derived");
    assert_eq!(snap["trainer"]["hbn"], false);
    assert_eq!(snap["label_fraction"], 0.5);
}

#[test]
fn ablate_writes_one_row_per_run_and_repeats_exactly() {
    let t = tempfile::tempdir().unwrap();
    fs::write(
        t.path().join("c.json"),
        TINY.replace("\"total_iters\": 6", "\"total_iters\": 2"),
    )
    .unwrap();
    fs::write(
        t.path().join("arms.json"),
        r#"[{"name": "samth"}, {"name": "full", "components": "bcrm,bsf,sgf"}, {"name": "sup", "semi_supervised": false}]"#,
    )
    .unwrap();
    let run = |out: &str| {
        let o = bm(
            t.path(),
            &[
                "ablate",
                "--config",
                "c.json",
                "--seeds",
                "2",
                "--arms",
                "arms.json",
                "--out",
                out,
            ],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(t.path().join(out).join("ablation.csv")).unwrap()
    };
    let a = run("a1");
    assert_eq!(a.lines().count(), 1 + 3 * 2);
    assert!(a.starts_with("arm,seed,miou,biou,bf1\n"));
    assert_eq!(a, run("a2"));
    let means = fs::read_to_string(t.path().join("a1/means.csv")).unwrap();
    assert_eq!(means.lines().count(), 1 + 3);

    fs::write(t.path().join("dup.json"), r#"[{"name": "x"}, {"name": "x"}]"#).unwrap();
    assert_eq!(
        code(&bm(
            t.path(),
            &["ablate", "--config", "c.json", "--arms", "dup.json", "--out", "z"]
        )),
        2
    );
    let o = Command::new(env!("CARGO_BIN_EXE_boundmatch"))
        .current_dir(t.path())
        .env("BOUNDMATCH_THREADS", "zero")
        .args(["ablate", "--config", "c.json", "--out", "z"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_clean_and_fails_with_fault() {
    let t = tempfile::tempdir().unwrap();
    let o = bm(t.path(), &["gradcheck", "--cases", "2", "--oracle-cases", "50"]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("conv2d") && table.contains("max_rel") && table.contains("boundary_f1"));
    let o = bm(
        t.path(),
        &[
            "gradcheck",
            "--cases",
            "2",
            "--oracle-cases",
            "10",
            "--inject-fault",
            "conv2d",
        ],
    );
    assert_eq!(code(&o), 4);
    assert_eq!(code(&bm(t.path(), &["gradcheck", "--inject-fault", "nonsense"])), 2);
}

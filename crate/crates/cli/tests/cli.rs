use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use volnet::data::{read_manifest, write_manifest, Split};
use volnet::explain::read_heatmap;
use volnet::models::{decode_checkpoint, encode_checkpoint, AttentionKind, BackboneKind, Model, ModelSpec};
use volnet::run::RunConfig;
use volnet::training::TrainLog;

fn volnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn phantoms(dir: &Path, seed: u64, count: usize, dim: usize) -> PathBuf {
    let out = dir.join("phantoms");
    ok(&volnet(&[
        "phantom",
        "--seed",
        &seed.to_string(),
        "--count",
        &count.to_string(),
        "--dim",
        &dim.to_string(),
        "--out",
        p(&out),
    ]));
    out.join("manifest.csv")
}

/// A small network that trains in seconds.
fn tiny_config(dir: &Path, manifest: &Path, attention: AttentionKind, positions: Vec<usize>) -> PathBuf {
    let mut spec = ModelSpec::desk(BackboneKind::DenseNet121, attention, positions);
    spec.width_multiplier = 0.125;
    spec.stage_config = [1, 1, 1, 1];
    let mut cfg = RunConfig::new(spec, manifest.to_path_buf(), dir.join("run"));
    cfg.train.epochs = 1;
    cfg.seed = 5;
    let path = dir.join("tiny.toml");
    cfg.write(&path).unwrap();
    path
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn phantom_is_deterministic_and_counts_match() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    phantoms(a.path(), 7, 12, 16);
    phantoms(b.path(), 7, 12, 16);
    assert_eq!(tree(a.path()), tree(b.path()));

    let c = tempfile::tempdir().unwrap();
    let out = c.path().join("ph");
    let stdout = ok(&volnet(&[
        "phantom",
        "--seed",
        "1",
        "--positives",
        "5",
        "--negatives",
        "15",
        "--dim",
        "16",
        "--out",
        p(&out),
    ]));
    assert!(stdout.contains("positives: 5, negatives: 15"), "{stdout}");
    let m = read_manifest(&out.join("manifest.csv")).unwrap();
    assert_eq!(m.rows.iter().filter(|r| r.label == 1).count(), 5);
    assert_eq!(m.rows.len(), 20);
}

#[test]
fn invalid_phantom_dim_exits_2_naming_minimum() {
    let d = tempfile::tempdir().unwrap();
    let out = volnet(&["phantom", "--dim", "4", "--count", "4", "--out", p(&d.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("minimum 8"), "{err}");
}

#[test]
fn train_reproduces_from_saved_config_and_eval_writes_report() {
    let d = tempfile::tempdir().unwrap();
    let manifest = phantoms(d.path(), 3, 40, 64);
    let cfg = tiny_config(d.path(), &manifest, AttentionKind::Sanet, vec![1, 2, 3, 4]);
    let run1 = d.path().join("run1");
    ok(&volnet(&["train", "--config", p(&cfg), "--out", p(&run1)]));
    for f in ["config", "log", "checkpoint"] {
        assert!(run1.join(f).is_file(), "{f} missing");
    }
    let run2 = d.path().join("run2");
    ok(&volnet(&[
        "train",
        "--config",
        p(&run1.join("config")),
        "--out",
        p(&run2),
    ]));
    let log = |r: &Path| TrainLog::from_jsonl(&std::fs::read_to_string(r.join("log")).unwrap()).unwrap();
    assert_eq!(log(&run1).without_timing(), log(&run2).without_timing());
    assert_eq!(
        std::fs::read(run1.join("checkpoint")).unwrap(),
        std::fs::read(run2.join("checkpoint")).unwrap()
    );

    let stdout = ok(&volnet(&[
        "eval",
        "--checkpoint",
        p(&run1.join("checkpoint")),
        "--manifest",
        p(&manifest),
        "--out",
        p(&run1),
    ]));
    assert!(stdout.contains("auc:"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run1.join("report.json")).unwrap()).unwrap();
    let mut keys: Vec<String> = report.as_object().unwrap().keys().cloned().collect();
    let mut expected: Vec<String> = volnet::evaluation::REPORT_KEYS.iter().map(|s| s.to_string()).collect();
    keys.sort();
    expected.sort();
    assert_eq!(keys, expected);
    assert!(report["localization"].is_object());
    let roc = std::fs::read_to_string(run1.join("roc.csv")).unwrap();
    assert!(roc.starts_with("fpr,tpr,threshold\n"));

    // moving a training case into the test split trips the leakage guard
    let mut m = read_manifest(&manifest).unwrap();
    let row = m.rows.iter_mut().find(|r| r.split == Split::Train).unwrap();
    row.split = Split::Test;
    let leaky = manifest.with_file_name("leaky.csv");
    write_manifest(&leaky, &m.rows).unwrap();
    let out = volnet(&[
        "eval",
        "--checkpoint",
        p(&run1.join("checkpoint")),
        "--manifest",
        p(&leaky),
        "--out",
        p(&d.path().join("leak")),
    ]);
    assert_eq!(out.status.code(), Some(4));

    // DeLong comparison of the score file with itself and with another run
    let scores = run1.join("scores.csv");
    let self_cmp = ok(&volnet(&["compare", p(&scores), p(&scores)]));
    assert!(self_cmp.contains("p_value: 1\n"), "{self_cmp}");
}

#[test]
fn compare_is_symmetric_and_rejects_unpaired_ids() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a.csv");
    let b = d.path().join("b.csv");
    let c = d.path().join("c.csv");
    std::fs::write(&a, "id,label,score\nx,0,0.1\ny,1,0.7\nz,0,0.4\nw,1,0.3\nv,1,0.9\n").unwrap();
    std::fs::write(&b, "id,label,score\nv,1,0.6\nw,1,0.8\nz,0,0.2\ny,1,0.5\nx,0,0.3\n").unwrap();
    std::fs::write(&c, "id,label,score\nq,0,0.1\nr,1,0.7\ns,0,0.4\nt,1,0.3\nu,1,0.9\n").unwrap();
    let ab = ok(&volnet(&["compare", p(&a), p(&b)]));
    let ba = ok(&volnet(&["compare", p(&b), p(&a)]));
    let pv = |s: &str| s.lines().find(|l| l.starts_with("p_value")).unwrap().to_string();
    assert_eq!(pv(&ab), pv(&ba));
    assert_eq!(volnet(&["compare", p(&a), p(&c)]).status.code(), Some(2));
}

#[test]
fn train_builds_requested_topologies() {
    let d = tempfile::tempdir().unwrap();
    let manifest = phantoms(d.path(), 4, 12, 64);
    for (positions, expected) in [("1,2,3,4", vec![1, 2, 3, 4]), ("1", vec![1])] {
        let run = d.path().join(format!("run-{}", expected.len()));
        ok(&volnet(&[
            "train",
            "--arch",
            "sanet",
            "--backbone",
            "densenet121-3d",
            "--positions",
            positions,
            "--epochs",
            "0",
            "--manifest",
            p(&manifest),
            "--out",
            p(&run),
        ]));
        let (model, _): (Model<f32>, _) = decode_checkpoint(&std::fs::read(run.join("checkpoint")).unwrap()).unwrap();
        assert_eq!(model.spec.attention, AttentionKind::Sanet);
        assert_eq!(model.spec.stage_config, [6, 12, 24, 16]);
        let got: Vec<usize> = model.blocks().iter().map(|(k, _)| *k).collect();
        assert_eq!(got, expected);
    }
}

#[test]
fn explain_emits_stage_maps_and_aggregate() {
    let d = tempfile::tempdir().unwrap();
    let manifest = phantoms(d.path(), 6, 12, 64);
    let cfg = tiny_config(d.path(), &manifest, AttentionKind::None, vec![]);
    let run = d.path().join("run");
    ok(&volnet(&[
        "train",
        "--config",
        p(&cfg),
        "--epochs",
        "0",
        "--out",
        p(&run),
    ]));
    let ckpt = run.join("checkpoint");
    let volume = manifest.with_file_name("volumes").join("phantom-0000.volr");
    let out = d.path().join("explain");
    let stdout = ok(&volnet(&[
        "explain",
        "--checkpoint",
        p(&ckpt),
        "--volume",
        p(&volume),
        "--out",
        p(&out),
        "--taps",
        "all",
        "--aggregate",
    ]));
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 5, "{stdout}");
    for (line, name) in lines.iter().zip(["stage1", "stage2", "stage3", "stage4", "aggregate"]) {
        assert!(line.starts_with(&format!("{name}: ")), "{line}");
        let h = read_heatmap(Path::new(line.split_once(": ").unwrap().1)).unwrap();
        assert_eq!(h.dims, [64; 3]);
        assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    let bad = volnet(&[
        "explain",
        "--checkpoint",
        p(&ckpt),
        "--volume",
        p(&volume),
        "--out",
        p(&out),
        "--taps",
        "stage9",
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("stage4"));

    // a zeroed head makes the logit independent of every tap
    let (mut model, info): (Model<f32>, _) = decode_checkpoint(&std::fs::read(&ckpt).unwrap()).unwrap();
    for p in model.params.iter_mut().filter(|p| p.name.starts_with("head.")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let zeroed = d.path().join("zeroed.ckpt");
    std::fs::write(&zeroed, encode_checkpoint(&model, &info).unwrap()).unwrap();
    let z = volnet(&[
        "explain",
        "--checkpoint",
        p(&zeroed),
        "--volume",
        p(&volume),
        "--out",
        p(&out),
        "--taps",
        "stage2",
    ]);
    ok(&z);
    assert!(String::from_utf8_lossy(&z.stderr).contains("warning"));
    let h = read_heatmap(&out.join("heatmaps").join("phantom-0000.stage2.volr")).unwrap();
    assert!(h.is_zero());
}

#[test]
fn non_finite_loss_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let manifest = phantoms(d.path(), 8, 16, 64);
    let cfg = tiny_config(d.path(), &manifest, AttentionKind::None, vec![]);
    let out = volnet(&[
        "train",
        "--config",
        p(&cfg),
        "--lr",
        "1e30",
        "--epochs",
        "3",
        "--out",
        p(&d.path().join("nan")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_manifest_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let out = volnet(&["train", "--out", p(d.path())]);
    assert_eq!(out.status.code(), Some(2));
}

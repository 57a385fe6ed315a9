use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use probatlas::dict::load_dictionary;
use probatlas_cli::population::load_truth;

fn probatlas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probatlas"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = probatlas(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

#[test]
fn phantom_writes_every_subject_and_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let pop = tmp.path().join("pop");
    ok(&[
        "phantom",
        "--train",
        "60",
        "--test",
        "20",
        "--seed",
        "1",
        "--out",
        s(&pop),
    ]);
    let dirs = fs::read_dir(&pop)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("subject_")
        })
        .count();
    assert_eq!(dirs, 80);
    for i in 0..80 {
        assert!(pop.join(format!("subject_{i}/seg.vol")).is_file());
        assert!(pop.join(format!("subject_{i}/img.vol")).is_file());
    }
    let truth = load_truth(&pop).unwrap().unwrap();
    assert_eq!((truth.train.len(), truth.test.len()), (60, 20));
    assert_eq!(truth.config.seed, 1);
    assert!(truth.subjects.iter().all(|t| t.phenotypes.len() == 8));
    let run = json(&pop.join("run.json"));
    assert_eq!(run["command"], "phantom");
    assert_eq!(run["outputs"].as_object().unwrap().len(), 161);
}

#[test]
fn usage_errors_exit_with_two() {
    let out = probatlas(&["phantom", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--out") && err.contains("Usage"), "{err}");

    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().join("x");
    for args in [
        vec!["phantom", "--grid", "4x4", "--out", s(&o)],
        vec!["phantom", "--phenotypes", "0", "--out", s(&o)],
        vec!["phantom", "--train", "0", "--out", s(&o)],
        vec!["build", "--pop", "p", "--damping", "1.5", "--out", s(&o)],
        vec!["build", "--pop", "p", "--preference", "lots", "--out", s(&o)],
        vec!["eval", "--pop", "p", "--dicts", "a=b", "--alpha", "0", "--out", s(&o)],
        vec!["eval", "--pop", "p", "--dicts", "nonsense", "--out", s(&o)],
        vec!["frobnicate"],
    ] {
        assert_eq!(probatlas(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn identical_population_builds_one_cluster_per_region() {
    let tmp = tempfile::tempdir().unwrap();
    let (pop, dict) = (tmp.path().join("pop"), tmp.path().join("dict"));
    ok(&[
        "phantom",
        "--train",
        "12",
        "--test",
        "0",
        "--phenotypes",
        "1",
        "--shape-noise",
        "0",
        "--intensity-noise",
        "0",
        "--out",
        s(&pop),
    ]);
    let report = ok(&["build", "--pop", s(&pop), "--out", s(&dict)]);
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    for r in rows {
        assert_eq!(r.split(',').nth(1), Some("1"), "{r}");
    }
}

#[test]
fn corrupt_subject_file_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let pop = tmp.path().join("pop");
    ok(&[
        "phantom",
        "--grid",
        "32",
        "--regions",
        "2",
        "--train",
        "6",
        "--test",
        "0",
        "--out",
        s(&pop),
    ]);
    let bad = pop.join("subject_3/seg.vol");
    let mut bytes = fs::read(&bad).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&bad, bytes).unwrap();
    let out = probatlas(&["build", "--pop", s(&pop), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(s(&bad)), "{err}");
}

#[test]
fn apply_on_training_subjects_matches_planted_phenotypes() {
    let tmp = tempfile::tempdir().unwrap();
    let (pop, dict) = (tmp.path().join("pop"), tmp.path().join("dict"));
    // noiseless intensities; shapes keep their jitter
    ok(&[
        "phantom",
        "--train",
        "30",
        "--test",
        "4",
        "--intensity-noise",
        "0",
        "--seed",
        "8",
        "--out",
        s(&pop),
    ]);
    ok(&["build", "--pop", s(&pop), "--out", s(&dict)]);
    let truth = load_truth(&pop).unwrap().unwrap();
    let d = load_dictionary(&dict).unwrap();
    for (pos, &i) in truth.train.iter().enumerate().step_by(5) {
        let out = tmp.path().join(format!("atlas_{i}"));
        ok(&[
            "apply",
            "--dict",
            s(&dict),
            "--subject",
            s(&pop.join(format!("subject_{i}"))),
            "--out",
            s(&out),
        ]);
        let sel = json(&out.join("selections.json"));
        for rd in &d.regions {
            let c = sel[rd.region.to_string()]["c_max"].as_u64().unwrap() as usize;
            let members = &rd.entries[c].members;
            assert!(members.contains(&pos), "subject {i} region {}", rd.region);
            let r = rd.region as usize - 1;
            let mut votes = [0usize; 3];
            for &m in members {
                votes[truth.subjects[truth.train[m]].phenotypes[r]] += 1;
            }
            let dominant = (0..3).max_by_key(|&p| votes[p]).unwrap();
            assert_eq!(dominant, truth.subjects[i].phenotypes[r]);
        }
        for k in 0..=8 {
            assert!(out.join(format!("label_{k}.vol")).is_file());
        }
        assert!(json(&out.join("run.json"))["cpu_seconds"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn subject_on_another_grid_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (pop, other, dict) = (
        tmp.path().join("pop"),
        tmp.path().join("other"),
        tmp.path().join("dict"),
    );
    ok(&[
        "phantom",
        "--grid",
        "32",
        "--regions",
        "2",
        "--train",
        "8",
        "--test",
        "0",
        "--out",
        s(&pop),
    ]);
    ok(&[
        "phantom",
        "--grid",
        "36",
        "--regions",
        "2",
        "--train",
        "1",
        "--test",
        "0",
        "--out",
        s(&other),
    ]);
    ok(&["build", "--pop", s(&pop), "--out", s(&dict)]);
    let out = probatlas(&[
        "apply",
        "--dict",
        s(&dict),
        "--subject",
        s(&other.join("subject_0/img.vol")),
        "--out",
        s(&tmp.path().join("a")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("32x32x32") && err.contains("36x36x36"), "{err}");
}

#[test]
fn eval_echoes_alpha_and_skips_self_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let (pop, dict) = (tmp.path().join("pop"), tmp.path().join("dict"));
    ok(&[
        "phantom",
        "--grid",
        "40",
        "--regions",
        "3",
        "--train",
        "20",
        "--test",
        "8",
        "--out",
        s(&pop),
    ]);
    ok(&["build", "--pop", s(&pop), "--out", s(&dict)]);
    let report = tmp.path().join("out/report.csv");
    let dicts = format!("a={},b={}", s(&dict), s(&dict));
    let stdout = ok(&[
        "eval",
        "--pop",
        s(&pop),
        "--dicts",
        &dicts,
        "--alpha",
        "0.01",
        "--out",
        s(&report),
    ]);
    assert!(stdout.contains("wilcoxon metric=js a=a b=b skipped"), "{stdout}");
    let run = json(&tmp.path().join("out/report.run.json"));
    assert_eq!(run["config"]["alpha"], 0.01);
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("subject,variant,region,js,dice\n"));
    // 8 subjects × 2 variants × (3 regions + mean)
    assert_eq!(csv.lines().count(), 1 + 8 * 2 * 4);
    let summary = fs::read_to_string(tmp.path().join("out/report.summary.txt")).unwrap();
    assert_eq!(summary, stdout);
}

#[test]
fn fuse_accepts_files_or_a_population() {
    let tmp = tempfile::tempdir().unwrap();
    let pop = tmp.path().join("pop");
    ok(&[
        "phantom",
        "--grid",
        "32",
        "--regions",
        "2",
        "--train",
        "5",
        "--test",
        "0",
        "--out",
        s(&pop),
    ]);
    let files: Vec<String> = (0..5)
        .map(|i| s(&pop.join(format!("subject_{i}/seg.vol"))).to_string())
        .collect();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let mut args = vec!["fuse", "--out", s(&a)];
    args.extend(files.iter().map(String::as_str));
    ok(&args);
    ok(&["fuse", "--pop", s(&pop), "--out", s(&b)]);
    for f in ["mean_seg.vol", "vote_margin.vol"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    assert_eq!(probatlas(&["fuse", "--out", s(&a)]).status.code(), Some(2));
}

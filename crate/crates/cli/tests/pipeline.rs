use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use geoharvest_cli::config::PipelineConfig;
use geoharvest_cli::manifest::Manifest;
use geoharvest_cli::stages::{self, AnswerRecord, Stage};

fn core_data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(name)
}

fn config(root: &Path, extra: &[&str]) -> PipelineConfig {
    let mut sets = vec![
        format!("paths.corpus={}", root.join("corpus").display()),
        format!("paths.gold={}", root.join("gold.json").display()),
        format!("paths.models={}", root.join("models").display()),
        format!("paths.output={}", root.join("out").display()),
    ];
    sets.extend(extra.iter().map(|s| s.to_string()));
    PipelineConfig::load(None, &sets).unwrap()
}

fn metric(root: &Path, key: &str) -> f64 {
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("out/metrics.json")).unwrap()).unwrap();
    json[key].as_f64().unwrap_or_else(|| panic!("no metric {key} in {json}"))
}

#[test]
fn clean_corpus_is_identified_exactly() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), &["synth.paraphrase_noise=0.0", "synth.typography_noise=0.0", "decode.mode=pipeline"]);
    for s in [Stage::Synth, Stage::TrainIdent, Stage::TrainAlign, Stage::Decode, Stage::Eval] {
        stages::run_stage(s, &cfg).unwrap();
    }
    assert_eq!(metric(d.path(), "ident.strict.f1"), 1.0);
    assert_eq!(metric(d.path(), "test.ident.strict.f1"), 1.0);
}

#[test]
fn eval_without_predictions_scores_zero() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), &[]);
    stages::run_stage(Stage::Synth, &cfg).unwrap();
    stages::run_stage(Stage::Eval, &cfg).unwrap();
    assert_eq!(metric(d.path(), "ident.strict.f1"), 0.0);
    assert_eq!(metric(d.path(), "align.nmi"), 0.0);
    assert_eq!(metric(d.path(), "parse.full.f1"), 0.0);
}

fn full_run(root: &Path) -> Vec<(String, Vec<u8>)> {
    let cfg = config(root, &["joint.steps=200", "joint.iterations=1"]);
    for s in [
        Stage::Synth,
        Stage::TrainIdent,
        Stage::TrainAlign,
        Stage::TrainJoint,
        Stage::TrainSplit,
        Stage::Decode,
        Stage::Parse,
        Stage::Fuse,
        Stage::Eval,
    ] {
        stages::run_stage(s, &cfg).unwrap();
    }
    let mut files = Vec::new();
    for dir in ["models", "out"] {
        let mut names: Vec<_> = fs::read_dir(root.join(dir)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            let rel = format!("{dir}/{}", p.file_name().unwrap().to_string_lossy());
            let text = fs::read_to_string(&p).unwrap().replace(&root.display().to_string(), "<root>");
            files.push((rel, text.into_bytes()));
        }
    }
    files
}

#[test]
fn same_config_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fa = full_run(a.path());
    let fb = full_run(b.path());
    assert!(fa.iter().any(|(n, _)| n == "out/manifest-fuse.json"));
    assert_eq!(fa.len(), fb.len());
    for ((na, ta), (nb, tb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ta == tb, "{na} differs between runs");
    }
    let m = Manifest::load(&a.path().join("out/manifest-decode.json")).unwrap();
    assert_eq!(m.stage, "decode");
    assert!(m.inputs.keys().any(|k| k.ends_with("ident-joint.model")));
    assert!(m.outputs.keys().any(|k| k.ends_with("alignment.txt")));
}

#[test]
fn ablation_rows_follow_the_group_list() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), &[]);
    stages::run_stage(Stage::Synth, &cfg).unwrap();
    let rows = stages::run_ablation(&cfg, &[]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].group, "none");
    let err = stages::run_ablation(&cfg, &["no_such_group".to_string()]).unwrap_err();
    assert!(err.to_string().contains("no_such_group"), "{err}");
    let rows = stages::run_ablation(&cfg, &["keywords".to_string()]).unwrap();
    assert_eq!(rows.iter().map(|r| r.group.as_str()).collect::<Vec<_>>(), ["none", "keywords"]);
}

#[test]
fn solves_the_inscribed_angle_problem() {
    let d = tempfile::tempdir().unwrap();
    let fig = core_data("inscribed_angle");
    let mut cfg = config(d.path(), &[]);
    cfg.paths.problems = Some(fig.join("problem.json"));
    cfg.paths.axiom_names = Some(fig.join("names.txt"));
    stages::solve_stage(&cfg, Some(&fig.join("rules.txt"))).unwrap();
    let answers: Vec<AnswerRecord> = serde_json::from_str(&fs::read_to_string(d.path().join("out/answers.json")).unwrap()).unwrap();
    assert_eq!(answers.len(), 1);
    assert_eq!(answers[0].kind, "choice");
    assert_eq!(answers[0].choice, Some(2));
    assert!((answers[0].value.unwrap() - 60.0).abs() < 1e-9);
    let text = fs::read_to_string(d.path().join("out/explanations.txt")).unwrap();
    assert!(text.contains("inscribed angle is half"), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with('(')).count(), 4);
}

#[test]
fn missing_input_is_named() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), &[]);
    let err = stages::run_stage(Stage::TrainIdent, &cfg).unwrap_err().to_string();
    assert!(err.contains("corpus"), "{err}");
    stages::run_stage(Stage::Synth, &cfg).unwrap();
    let err = stages::run_stage(Stage::Decode, &cfg).unwrap_err().to_string();
    assert!(err.contains("identification model"), "{err}");
}

#[test]
fn binary_reports_errors_with_nonzero_exit() {
    let d = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_geoharvest");
    let out = Command::new(bin)
        .current_dir(d.path())
        .args(["--set", "fusion.method=vote", "fuse"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vote"));

    let fig = core_data("inscribed_angle");
    let out = Command::new(bin)
        .current_dir(d.path())
        .arg("--set")
        .arg(format!("paths.axiom_names={}", fig.join("names.txt").display()))
        .args(["solve", "--rules"])
        .arg(fig.join("rules.txt"))
        .arg("--problems")
        .arg(fig.join("problem.json"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.path().join("work/out/manifest-solve.json").exists());
}

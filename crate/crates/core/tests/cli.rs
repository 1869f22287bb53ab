//! Command-line behaviour on small synthetic data: exit codes, idempotence,
//! reproducibility records and the shapes of the emitted CSVs.

use std::fs;
use std::path::Path;

use bravl::cli::{dispatch, RUN_RECORD};

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("bravl").chain(args.iter().copied()))
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

const SMALL: [&str; 10] = [
    "--seen-classes",
    "6",
    "--novel-classes",
    "5",
    "--samples-per-class",
    "6",
    "--test-samples-per-class",
    "3",
    "--seed",
    "7",
];

/// Raw and preprocessed small datasets under `dir`.
fn prepare(dir: &Path) {
    let mut synth = vec!["synth", "--out"];
    let raw = path(dir, "raw");
    synth.push(&raw);
    synth.extend(SMALL);
    assert_eq!(run(&synth), 0);
    assert_eq!(run(&["preprocess", "--data", &raw, "--out", &path(dir, "pre")]), 0);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(run(&[]), 2);
    assert_eq!(run(&["nonsense"]), 2);
    assert_eq!(run(&["synth"]), 2);
    assert_eq!(run(&["train", "--data", "x", "--out", "y", "--unknown-flag"]), 2);
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["--version"]), 0);
    for sub in ["synth", "preprocess", "train", "decode", "analyze", "ablate"] {
        assert_eq!(run(&[sub, "--help"]), 0, "{sub}");
    }
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = path(dir.path(), "missing");
    assert_eq!(run(&["preprocess", "--data", &missing, "--out", &path(dir.path(), "o")]), 1);
    assert_eq!(run(&["train", "--data", &missing, "--out", &path(dir.path(), "o"), "--set", "bogus=1"]), 1);
    assert_eq!(run(&["ablate", "--data", &missing, "--out", &path(dir.path(), "o"), "--variants", "fast"]), 1);
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        assert_eq!(run(&["synth", "--seed", "7", "--out", &path(dir.path(), name)]), 0);
    }
    let a = files(&dir.path().join("a"));
    assert!(a.iter().any(|(n, _)| n == RUN_RECORD));
    // The record holds the command line, which names the output directory.
    let strip = |v: Vec<(String, Vec<u8>)>| v.into_iter().filter(|(n, _)| n != RUN_RECORD).collect::<Vec<_>>();
    assert_eq!(strip(a), strip(files(&dir.path().join("b"))));
}

#[test]
fn train_decode_analyze_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let pre = path(d, "pre");
    assert_eq!(run(&["train", "--data", &pre, "--out", &path(d, "run"), "--epochs", "2", "--set", "k=3"]), 0);
    let record = fs::read_to_string(d.join("run").join(RUN_RECORD)).unwrap();
    for key in ["version=", "argv=", "seed=0", "config_hash="] {
        assert!(record.contains(key), "{record}");
    }
    let log = fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,beta,elbo,recon_b,recon_v,recon_t,kl,intra,inter,total\n"));

    let ck = path(d, "run/checkpoint");
    assert_eq!(
        run(&["decode", "--data", &pre, "--checkpoint", &ck, "--out", &path(d, "dec"), "--compare", "v", "--export-latents"]),
        0
    );
    let report = fs::read_to_string(d.join("dec/report.csv")).unwrap();
    assert!(report.starts_with("metric,value\nmodalities,vt\n"), "{report}");
    let per_class = fs::read_to_string(d.join("dec/report_per_class.csv")).unwrap();
    assert!(per_class.starts_with("class,n,top1,top5,gain\n"), "{per_class}");
    assert_eq!(per_class.lines().count(), 1 + 5);
    for f in ["baseline.csv", "latents_classifier.bvlm", "latents_test_brain.bvlm", RUN_RECORD] {
        assert!(d.join("dec").join(f).exists(), "{f}");
    }

    for analysis in ["voxel-weights", "crossgen", "cosine"] {
        let out = path(d, analysis);
        assert_eq!(run(&["analyze", analysis, "--checkpoint", &ck, "--data", &pre, "--out", &out]), 0, "{analysis}");
    }
    let weights = fs::read_to_string(d.join("voxel-weights/voxel_weights.csv")).unwrap();
    assert!(weights.lines().skip(1).all(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap() >= 0.0));
    let cosine = fs::read_to_string(d.join("cosine/cosine.csv")).unwrap();
    assert!(cosine.contains("\nlatent_vt,") && cosine.contains("\nlatent_b,"), "{cosine}");
    assert!(fs::read_to_string(d.join("crossgen/crossgen.csv")).unwrap().contains("\nseen,"));

    // The voxel-weights analysis needs the preprocessing directory.
    assert_eq!(run(&["analyze", "voxel-weights", "--checkpoint", &ck, "--out", &path(d, "x")]), 1);
}

#[test]
fn resume_extends_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let pre = path(d, "pre");
    let common = ["--data", pre.as_str(), "--set", "k=3"];
    let mut full = vec!["train", "--out"];
    let full_out = path(d, "full");
    full.push(&full_out);
    full.extend(common);
    full.extend(["--epochs", "3"]);
    assert_eq!(run(&full), 0);

    let mut short = vec!["train", "--out"];
    let short_out = path(d, "short");
    short.push(&short_out);
    short.extend(common);
    short.extend(["--epochs", "1"]);
    assert_eq!(run(&short), 0);
    let mut resumed = vec!["train", "--out"];
    let resumed_out = path(d, "resumed");
    let from = path(d, "short/checkpoint");
    resumed.push(&resumed_out);
    resumed.extend(common);
    resumed.extend(["--epochs", "3", "--resume", &from]);
    assert_eq!(run(&resumed), 0);
    assert_eq!(files(&d.join("full/checkpoint")), files(&d.join("resumed/checkpoint")));

    // A different objective cannot continue the checkpoint.
    let mut other = resumed.clone();
    other.extend(["--lambda1", "0.5"]);
    assert_eq!(run(&other), 1);
}

#[test]
fn ablate_writes_rows_and_means() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let out = path(d, "abl");
    let args = [
        "ablate",
        "--data",
        &path(d, "pre"),
        "--out",
        &out,
        "--variants",
        "full,elbo-only",
        "--seeds",
        "3",
        "--epochs",
        "1",
        "--k",
        "3",
    ];
    assert_eq!(run(&args), 0);
    let csv = fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,posterior,seed,top1,top5");
    assert_eq!(lines.len(), 1 + 2 * 3 + 2);
    assert_eq!(lines.iter().filter(|l| l.contains(",mean,")).count(), 2);
}

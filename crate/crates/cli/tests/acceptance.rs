//! CLI acceptance: every subcommand re-run on the same manifest writes
//! bitwise-identical files. Prints one `PASS`/`FAIL` line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

const BIN: &str = env!("CARGO_BIN_EXE_rosa");

fn rosa(args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "rosa {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn exit_code(args: &[&str]) -> Option<i32> {
    Command::new(BIN).args(args).output().ok()?.status.code()
}

/// Relative path to contents of every file below `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

/// Runs the full command sequence in `root` and returns the files it wrote.
fn pipeline(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = root.join("data");
    rosa(&[
        "gen-data",
        "--out",
        &s(&data),
        "--n-images",
        "12",
        "--n-val",
        "2",
        "--n-test",
        "3",
        "--size",
        "16",
        "--seed",
        "5",
    ])?;
    let manifest = root.join("experiment.json");
    std::fs::write(
        &manifest,
        r#"{
  "dataset": "data/manifest.json",
  "output_dir": "run",
  "seed": 3,
  "rosa": {"slic": {"k": 4}},
  "crf": {"iters": 2},
  "attack": {"epsilon": 4, "max_iters": 3},
  "sgd": {"epochs": 2, "batch_size": 4},
  "rosa_sgd": {"epochs": 1, "batch_size": 4, "learning_rate": 0.001},
  "defenses": [{"kind": "none"}, {"kind": "quant", "bits": 4}, {"kind": "rosa"}],
  "sweep_epsilons": [0, 2]
}
"#,
    )
    .map_err(|e| e.to_string())?;
    let m = s(&manifest);
    let run = root.join("run");
    rosa(&["train", "--manifest", &m])?;
    rosa(&["attack", "--manifest", &m])?;
    rosa(&[
        "predict",
        "--manifest",
        &m,
        "--defense",
        "rosa",
        "--input-dir",
        &s(&run.join("attack/eps4")),
    ])?;
    rosa(&[
        "predict",
        "--manifest",
        &m,
        "--defense",
        "none",
        "--resample-shield",
        "2",
    ])?;
    rosa(&[
        "eval",
        "--pred-dir",
        &s(&run.join("predictions/rosa")),
        "--gt-dir",
        &s(&data.join("masks")),
        "--out",
        &s(&run.join("eval/rosa.json")),
    ])?;
    rosa(&["sweep", "--manifest", &m])?;
    rosa(&["ablate", "--manifest", &m, "--epsilon", "3"])?;
    Ok(snapshot(root))
}

fn main() -> ExitCode {
    // same directory both times, so resolved paths match as well
    let root = tempfile::tempdir().unwrap();
    let result = pipeline(root.path()).and_then(|first| {
        for entry in std::fs::read_dir(root.path()).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                std::fs::remove_dir_all(path).unwrap();
            } else {
                std::fs::remove_file(path).unwrap();
            }
        }
        let second = pipeline(root.path())?;
        let differing: Vec<String> = first
            .keys()
            .chain(second.keys())
            .filter(|k| first.get(*k) != second.get(*k))
            .map(|k| k.display().to_string())
            .collect();
        Ok((first.len(), differing))
    });
    let codes = (
        exit_code(&["train", "--manifest", "/nonexistent/experiment.json"]),
        exit_code(&[
            "eval",
            "--pred-dir",
            ".",
            "--gt-dir",
            ".",
            "--out",
            "x.json",
            "--thresholds",
            "many",
        ]),
    );
    let (pass, detail) = match result {
        Ok((n, differing)) if differing.is_empty() && n > 0 => (
            codes == (Some(3), Some(2)),
            format!("{n} files identical across two runs of gen-data/train/attack/predict/eval/sweep/ablate; exit codes (missing manifest, bad flag) = {codes:?}"),
        ),
        Ok((n, differing)) => (false, format!("{} of {n} files differ: {differing:?}", differing.len())),
        Err(e) => (false, e),
    };
    println!(
        "{} criterion  9 determinism: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

pub const BIN: &str = env!("CARGO_BIN_EXE_codeseek");

pub struct Demo {
    _dir: tempfile::TempDir,
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub index: PathBuf,
}

pub fn codeseek(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("CODESEEK_SEED")
        .env_remove("CODESEEK_CONFIG")
        .env_remove("CODESEEK_DATA_ROOT")
        .output()
        .expect("spawn codeseek")
}

pub fn ok(args: &[&str]) -> String {
    let out = codeseek(args);
    assert!(
        out.status.success(),
        "codeseek {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Demo corpus, a briefly fine-tuned checkpoint and an index over all 100 demo pairs.
pub fn demo() -> &'static Demo {
    static DEMO: OnceLock<Demo> = OnceLock::new();
    DEMO.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("demo.json");
        let checkpoint = dir.path().join("demo.ckpt");
        let index = dir.path().join("demo.idx");
        ok(&["--seed", "7", "ingest", "--demo", "--out", p(&corpus)]);
        ok(&[
            "--seed",
            "7",
            "finetune",
            "--corpus",
            p(&corpus),
            "--epochs",
            "3",
            "--out",
            p(&checkpoint),
        ]);
        ok(&[
            "index",
            "--checkpoint",
            p(&checkpoint),
            "--corpus",
            p(&corpus),
            "--split",
            "all",
            "--out",
            p(&index),
        ]);
        Demo {
            _dir: dir,
            corpus,
            checkpoint,
            index,
        }
    })
}

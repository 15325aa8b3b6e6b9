//! Short end-to-end runs of every command on a few phantoms.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use tokenct::cli::run;
use tokenct::dataset::{write_samples, Manifest};
use tokenct::io::read_rvol;
use tokenct::io::text::{read_token_lines, TokenSet};
use tokenct::pipeline::{tokenize_dir, TOKENS};
use tokenct::training::{train_stage, RunConfig, Stage};
use tokenct::Error;
use tokenct_core::preprocess::PreprocessConfig;
use tokenct_core::translator::SequenceLayout;

struct Run {
    _dir: tempfile::TempDir,
    data: PathBuf,
    ck: PathBuf,
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("tokenct").chain(args.iter().copied()))
}

/// Three phantoms, one epoch per stage.
fn trained() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let ck = dir.path().join("ck");
        assert_eq!(cli(&["phantom", "gen", "--out", s(&data), "--count", "3", "--seed", "4", "--fractions", "0.6,0.4,0"]), 0);
        assert_eq!(cli(&["preprocess", "--data", s(&data)]), 0);
        assert_eq!(cli(&["drr", "project", "--data", s(&data)]), 0);
        for stage in ["vq2d", "vq3d", "gpt"] {
            assert_eq!(cli(&["train", stage, "--data", s(&data), "--checkpoints", s(&ck), "--epochs", "1"]), 0, "{stage}");
        }
        Run { _dir: dir, data, ck }
    })
}

#[test]
fn stages_leave_checkpoints_reports_and_tokens() {
    let r = trained();
    for stage in ["vq2d", "vq3d", "gpt"] {
        assert!(r.ck.join(format!("{stage}.ckpt")).exists());
        let csv = std::fs::read_to_string(r.ck.join(format!("{stage}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }
    let set = TokenSet::load(r.ck.join(TOKENS)).unwrap();
    assert_eq!(set.records.len(), 3);
    for rec in &set.records {
        assert_eq!((rec.pa.len(), rec.lat.len(), rec.ct.len()), (16, 16, 64));
    }
}

#[test]
fn retokenizing_is_byte_identical() {
    let r = trained();
    let out = r.ck.parent().unwrap().join("again.txt");
    assert_eq!(cli(&["tokenize", "--data", s(&r.data), "--checkpoints", s(&r.ck), "--out", s(&out)]), 0);
    let a = std::fs::read(r.ck.join(TOKENS)).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), a);
}

#[test]
fn empty_manifest_gives_an_empty_token_set() {
    let r = trained();
    let dir = tempfile::tempdir().unwrap();
    Manifest::default().save(dir.path()).unwrap();
    let set = tokenize_dir(dir.path(), &r.ck, 12.0).unwrap();
    assert!(set.records.is_empty());
}

#[test]
fn mismatched_extents_are_a_data_error() {
    let r = trained();
    let dir = tempfile::tempdir().unwrap();
    let pre = PreprocessConfig { resize_extents: [16; 3], ..PreprocessConfig::desk_scale() };
    let m = Manifest::phantoms(1, 0, [1.0, 0.0, 0.0]).unwrap();
    write_samples(dir.path(), &tokenct::dataset::phantom_samples(&m, &pre, 12.0).unwrap()).unwrap();
    let e = tokenize_dir(dir.path(), &r.ck, 12.0).unwrap_err();
    assert!(matches!(e, Error::Core(tokenct_core::Error::Data(_))), "{e}");
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn reconstruction_in_both_modes() {
    let r = trained();
    let out = r.ck.parent().unwrap();
    let pa = r.data.join("pa/00000.rvol");
    let lat = r.data.join("lat/00000.rvol");
    let n = 256;
    let layout = SequenceLayout::desk();
    for (views, name) in [("pa,lat", "bi"), ("pa", "mono")] {
        let vol = out.join(format!("{name}.rvol"));
        let tok = out.join(format!("{name}.txt"));
        let png = out.join(format!("{name}.png"));
        let mut args = vec!["reconstruct", "--checkpoints", s(&r.ck), "--pa", s(&pa), "--views", views];
        args.extend(["--out", s(&vol), "--tokens", s(&tok), "--png", s(&png)]);
        if views == "pa,lat" {
            args.extend(["--lat", s(&lat)]);
        }
        assert_eq!(cli(&args), 0, "{views}");
        assert_eq!(read_rvol(&vol).unwrap().extents(), [32; 3]);
        let t = read_token_lines(&tok).unwrap();
        assert_eq!(t.len(), 97);
        assert_eq!(t[0], 2 * n);
        assert!(t[1..33].iter().all(|&x| x < n));
        assert!(t[33..].iter().all(|&x| (n..2 * n).contains(&x)));
        assert!(png.exists());
        layout.validate_prefix(&t).unwrap();
        let truth = r.data.join("ct/00000.rvol");
        assert_eq!(cli(&["eval", "--truth", s(&truth), "--pred", s(&vol)]), 0);
    }
    assert_eq!(cli(&["reconstruct", "--checkpoints", s(&r.ck), "--pa", s(&pa), "--views", "lat", "--out", "x"]), 1);
    assert_eq!(cli(&["reconstruct", "--checkpoints", s(&r.ck), "--pa", s(&pa), "--out", "x"]), 1);
}

#[test]
fn identical_configs_train_identically() {
    let r = trained();
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = RunConfig::desk(Stage::Vq3d);
            cfg.epochs = 2;
            cfg.data = r.data.clone();
            cfg.checkpoints = dir.path().into();
            let summary = train_stage(&cfg).unwrap();
            let bytes = std::fs::read(&summary.checkpoint).unwrap();
            (summary.best_epoch, summary.reports.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>(), bytes)
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn gpt_needs_both_autoencoders() {
    let r = trained();
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(r.ck.join("vq2d.ckpt"), dir.path().join("vq2d.ckpt")).unwrap();
    let mut cfg = RunConfig::desk(Stage::Gpt);
    cfg.data = r.data.clone();
    cfg.checkpoints = dir.path().into();
    assert!(matches!(train_stage(&cfg), Err(Error::Dependency(_))));
}

//! End-to-end subcommand runs through the public entry point.

use std::path::Path;

fn run(args: &[&str]) -> (i32, String, String) {
    let argv: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = tokmerge::cli::run(&argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn line_with<'a>(text: &'a str, prefix: &str) -> &'a str {
    text.lines()
        .find(|l| l.starts_with(prefix))
        .unwrap_or_else(|| panic!("no line starting with '{}' in:\n{}", prefix, text))
}

fn kv(text: &str, key: &str) -> String {
    line_with(text, &format!("{}=", key)).split('=').nth(1).unwrap().to_string()
}

const TINY_SYNTH: &str = "grid=2x2,patch=2,classes=2,n=8,sigma=0.1,seed=5";

fn tiny_train(extra: &[&str], out_dir: &Path) -> (i32, String, String) {
    let out_s = out_dir.to_str().unwrap();
    let mut args = vec![
        "train", "--synth", TINY_SYNTH, "--depth", "2", "--dim", "8", "--heads", "2",
        "--adapter", "adaptformer:2", "--epochs", "2", "--warmup", "1", "--batch", "4",
        "--out", out_s,
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn flops_preset_reports_baseline() {
    let (code, out, _) = run(&["flops", "--preset", "vitb16"]);
    assert_eq!(code, 0);
    assert!(out.contains("tokens: 197 -> 197"));
    assert_eq!(kv(&out, "total_mac"), "17563060224");
}

#[test]
fn flops_merge_layer_six_reduces() {
    let (code, out, _) =
        run(&["flops", "--preset", "vitb16", "--merge", "bdm", "--merge-layer", "6"]);
    assert_eq!(code, 0);
    assert_eq!(kv(&out, "tokens_out"), "99");
    let reduction: f64 = kv(&out, "reduction").parse().unwrap();
    assert!(reduction >= 0.23, "reduction {}", reduction);
    let total: u64 = kv(&out, "total_mac").parse().unwrap();
    assert!(total <= 13_600_000_000, "total {}", total);
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, err) = tiny_train(&["--merge", "none"], dir.path());
    assert_eq!(code, 0, "stderr: {}", err);
    assert!(out.contains("step-0 loss:"));
    assert!(out.contains("final val acc:"));
    assert!(line_with(&out, "tokens per layer:").contains("5 5 5"));
    for f in ["metrics.csv", "ckpt_best.fpet", "ckpt_final.fpet"] {
        assert!(dir.path().join(f).exists(), "missing {}", f);
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,split,loss,acc,lr\n"));
    assert_eq!(csv.lines().count(), 1 + 4); // 2 epochs x (train + val)
}

#[test]
fn step0_loss_separates_merge_from_init() {
    // zero-initialized adapters: merging is the only difference at step 0,
    // and differentiable matching agrees with checkerboard soft matching
    let d_none = tempfile::tempdir().unwrap();
    let d_bdm = tempfile::tempdir().unwrap();
    let d_bsm = tempfile::tempdir().unwrap();
    let (c1, none_out, _) = tiny_train(&["--merge", "none"], d_none.path());
    let (c2, bdm_out, _) = tiny_train(
        &["--merge", "bdm", "--merge-layer", "0", "--refine-rank", "2"],
        d_bdm.path(),
    );
    let (c3, bsm_out, _) = tiny_train(
        &["--merge", "bsm", "--split", "checkerboard", "--merge-layer", "0"],
        d_bsm.path(),
    );
    assert_eq!((c1, c2, c3), (0, 0, 0));
    let loss = |s: &str| line_with(s, "step-0 loss:").to_string();
    assert_ne!(loss(&none_out), loss(&bdm_out));
    assert_eq!(loss(&bdm_out), loss(&bsm_out));
}

#[test]
fn train_needs_a_data_source() {
    let (code, _, err) = run(&["train", "--out", "/tmp/nowhere"]);
    assert_eq!(code, 1);
    assert!(err.contains("data source"), "stderr: {}", err);
}

#[test]
fn odd_grid_rejects_checkerboard() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&[
        "train", "--synth", "grid=3x3,patch=2,classes=2,n=4", "--merge", "bdm",
        "--merge-layer", "0", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 1, "stderr: {}", err);
}

#[test]
fn eval_reads_back_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, _) = tiny_train(&["--merge", "bsm", "--merge-layer", "0"], dir.path());
    assert_eq!(code, 0);
    let ckpt = dir.path().join("ckpt_final.fpet");
    let (code, out, err) = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--synth", TINY_SYNTH]);
    assert_eq!(code, 0, "stderr: {}", err);
    assert!(out.contains("top-1 accuracy:"));
    assert!(out.contains("tokens: 5 -> 3")); // both A rows merged into the 3 B slots
}

#[test]
fn eval_rejects_mismatched_data() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, _) = tiny_train(&["--merge", "none"], dir.path());
    assert_eq!(code, 0);
    let ckpt = dir.path().join("ckpt_final.fpet");
    let (code, _, err) = run(&[
        "eval", "--ckpt", ckpt.to_str().unwrap(), "--synth", "grid=2x2,patch=2,classes=3,n=4",
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("classes"), "stderr: {}", err);
}

#[test]
fn inspect_merge_none_keeps_every_patch() {
    let (code, out, err) = run(&[
        "inspect-merge", "--synth", TINY_SYNTH, "--depth", "1", "--dim", "8", "--heads", "2",
        "--merge", "none",
    ]);
    assert_eq!(code, 0, "stderr: {}", err);
    assert!(out.contains("(4 patch groups)"));
    assert!(out.contains("0 1\n2 3"));
}

#[test]
fn inspect_merge_bdm_pairs_a_with_b() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, err) = run(&[
        "inspect-merge", "--synth", TINY_SYNTH, "--depth", "2", "--dim", "8", "--heads", "2",
        "--merge", "bdm", "--merge-layer", "0", "--refine-rank", "2", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "stderr: {}", err);
    let grid: Vec<Vec<usize>> = out
        .lines()
        .filter(|l| l.chars().all(|c| c.is_ascii_digit() || c == ' ') && !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(|t| t.parse().unwrap()).collect())
        .collect();
    assert_eq!(grid.len(), 2);
    // every even-parity cell shares its group with some odd-parity cell
    for (i, j) in [(0usize, 0usize), (1, 1)] {
        let g = grid[i][j];
        assert!(
            grid[0][1] == g || grid[1][0] == g,
            "A cell ({},{}) unmerged in {:?}",
            i,
            j,
            grid
        );
    }
    let ppm = std::fs::read(dir.path().join("groups.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6"));
}

#[test]
fn inspect_merge_rejects_flags_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, _) = tiny_train(&["--merge", "none"], dir.path());
    assert_eq!(code, 0);
    let ckpt = dir.path().join("ckpt_final.fpet");
    let (code, _, err) = run(&[
        "inspect-merge", "--ckpt", ckpt.to_str().unwrap(), "--synth", TINY_SYNTH, "--depth", "3",
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("conflict"), "stderr: {}", err);
}

#[test]
fn config_file_fills_gaps_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "depth=1\ndim=16\nheads=2\n# comment\nmerge=none\n").unwrap();
    let (code, out, err) = run(&["flops", "--config", cfg.to_str().unwrap(), "--depth", "2"]);
    assert_eq!(code, 0, "stderr: {}", err);
    assert!(out.contains("layer1_mac="), "depth flag should win:\n{}", out);
    assert!(!out.contains("layer2_mac="));
    // dim=16 from the file: per-layer cost is (4+2*4)*n*16^2 + 2*n^2*16
    let layer0: u64 = kv(&out, "layer0_mac").parse().unwrap();
    let n = 65u64;
    assert_eq!(layer0, 12 * n * 16 * 16 + 2 * n * n * 16);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "depht=1\n").unwrap();
    let (code, _, err) = run(&["flops", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("unknown key"), "stderr: {}", err);
}

#[test]
fn usage_errors_and_help() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("train") && out.contains("inspect-merge"));

    let (code, _, err) = run(&["flops", "--bogus"]);
    assert_eq!(code, 1);
    assert!(!err.is_empty());

    let (code, _, err) = run(&["flops", "--merge", "prune"]);
    assert_eq!(code, 1);
    assert!(err.contains("unknown merge method"));

    let (code, _, _) = run(&[]);
    assert_eq!(code, 1);
}

#[test]
fn seeded_runs_are_identical() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (c1, out1, _) = tiny_train(&["--merge", "bdm", "--merge-layer", "0", "--refine-rank", "2", "--seed", "9"], d1.path());
    let (c2, out2, _) = tiny_train(&["--merge", "bdm", "--merge-layer", "0", "--refine-rank", "2", "--seed", "9"], d2.path());
    assert_eq!((c1, c2), (0, 0));
    let strip = |s: &str, dir: &Path| s.replace(dir.to_str().unwrap(), "");
    assert_eq!(strip(&out1, d1.path()), strip(&out2, d2.path()));
    assert_eq!(
        std::fs::read(d1.path().join("ckpt_final.fpet")).unwrap(),
        std::fs::read(d2.path().join("ckpt_final.fpet")).unwrap()
    );
}

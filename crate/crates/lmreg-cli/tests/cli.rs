//! End-to-end tests of the `lmreg` binary: flag handling, exit codes, and
//! the full gen-data -> train -> register -> evaluate pipeline on a tiny
//! configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lmreg_core::eval::EvalReport;
use lmreg_core::volume::{read_volume, write_volume, DisplacementField, Volume, VolumeGeometry};

fn lmreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_CONFIG: &str = r#"
[model]
input_dims = [16, 16, 16]
base_channels = 4
d_model = 32
heads = 2
stack_depth = 1
cascade_steps = 2

[train]
steps = 6
lr = 0.0005
seed = 3
deterministic = true

[loss]
lambda = 0.04

[synth]
size = [16, 16, 16]
count = 3
seed = 3
max_disp = 2.0
smooth_sigma = 3.0
n_shapes = 2
"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, TINY_CONFIG).unwrap();
    path.display().to_string()
}

fn gen_tiny_data(dir: &Path) -> String {
    let data = dir.join("data");
    let out = lmreg(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--size",
        "16,16,16",
        "--count",
        "3",
        "--seed",
        "3",
        "--max-disp",
        "2.0",
        "--smooth",
        "3.0",
        "--shapes",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    data.display().to_string()
}

#[test]
fn help_documents_every_subcommand() {
    let out = lmreg(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for cmd in ["gen-data", "train", "register", "evaluate", "gradcheck"] {
        assert!(text.contains(cmd), "missing {cmd} in help");
    }
    for cmd in ["gen-data", "train", "register", "evaluate", "gradcheck"] {
        let out = lmreg(&[cmd, "--help"]);
        assert_eq!(code(&out), 0, "{cmd} --help failed");
    }
}

#[test]
fn unknown_flags_exit_with_usage_code() {
    let out = lmreg(&["gradcheck", "--bogus-flag"]);
    assert_eq!(code(&out), 2);
    let out = lmreg(&["no-such-command"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_data_writes_the_expected_files_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path());
    let names = || {
        let mut v: Vec<String> = fs::read_dir(&data)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        v.sort();
        v
    };
    let files = names();
    assert_eq!(files.len(), 16); // 3 pairs x 5 volumes + manifest
    assert!(files.contains(&"manifest.txt".to_string()));

    let before: Vec<Vec<u8>> = files
        .iter()
        .map(|f| fs::read(Path::new(&data).join(f)).unwrap())
        .collect();
    gen_tiny_data(dir.path());
    let after: Vec<Vec<u8>> = names()
        .iter()
        .map(|f| fs::read(Path::new(&data).join(f)).unwrap())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn gen_data_rejects_sizes_not_divisible_by_eight() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmreg(&[
        "gen-data",
        "--out",
        dir.path().join("d").to_str().unwrap(),
        "--size",
        "12,16,16",
        "--count",
        "1",
        "--seed",
        "1",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("divisible by 8"), "{}", stderr(&out));
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = gen_tiny_data(dir.path());
    let ckpt = dir.path().join("model.ckpt");

    let out = lmreg(&[
        "train",
        "--config",
        &config,
        "--data",
        &data,
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("effective configuration"));
    let trace = fs::read_to_string(format!("{}.trace", ckpt.display())).unwrap();
    assert_eq!(trace.lines().count(), 6);
    let first: Vec<&str> = trace.lines().next().unwrap().split('\t').collect();
    assert_eq!(first.len(), 4);
    assert_eq!(first[0], "0");

    // register a pair from the dataset
    let field_path = dir.path().join("field.vol");
    let warped_path = dir.path().join("warped.vol");
    let out = lmreg(&[
        "register",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--moving",
        Path::new(&data).join("pair0_moving.vol").to_str().unwrap(),
        "--fixed",
        Path::new(&data).join("pair0_fixed.vol").to_str().unwrap(),
        "--out-field",
        field_path.to_str().unwrap(),
        "--out-warped",
        warped_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let field = read_volume(&field_path).unwrap().into_field().unwrap();
    assert_eq!(field.geometry, VolumeGeometry::new(16, 16, 16));
    assert!(read_volume(&warped_path).unwrap().into_scalar().is_ok());

    // evaluate the predicted field
    let report_path = dir.path().join("report.txt");
    let out = lmreg(&[
        "evaluate",
        "--field",
        field_path.to_str().unwrap(),
        "--moving-seg",
        Path::new(&data).join("pair0_movingseg.vol").to_str().unwrap(),
        "--fixed-seg",
        Path::new(&data).join("pair0_fixedseg.vol").to_str().unwrap(),
        "--report",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = EvalReport::from_text(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report.mean_dice >= 0.0 && report.mean_dice <= 1.0);
    assert_eq!(stdout(&out), fs::read_to_string(&report_path).unwrap());

    // the ground-truth field scores near-perfect overlap
    let out = lmreg(&[
        "evaluate",
        "--field",
        Path::new(&data).join("pair0_gtfield.vol").to_str().unwrap(),
        "--moving-seg",
        Path::new(&data).join("pair0_movingseg.vol").to_str().unwrap(),
        "--fixed-seg",
        Path::new(&data).join("pair0_fixedseg.vol").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let report = EvalReport::from_text(&stdout(&out)).unwrap();
    assert!(report.mean_dice >= 0.95, "{}", report.mean_dice);
}

#[test]
fn identical_pair_registration_stays_near_identity() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = gen_tiny_data(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    let out = lmreg(&[
        "train",
        "--config",
        &config,
        "--data",
        &data,
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let field_path = dir.path().join("selffield.vol");
    let moving = Path::new(&data).join("pair0_moving.vol");
    let out = lmreg(&[
        "register",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--moving",
        moving.to_str().unwrap(),
        "--fixed",
        moving.to_str().unwrap(),
        "--out-field",
        field_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let field = read_volume(&field_path).unwrap().into_field().unwrap();
    assert!(field.max_abs() < 0.5, "max |u| = {}", field.max_abs());
}

#[test]
fn cascade_phase_without_predecessor_checkpoint_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = gen_tiny_data(dir.path());
    let out = lmreg(&[
        "train",
        "--config",
        &config,
        "--data",
        &data,
        "--out",
        dir.path().join("c.ckpt").to_str().unwrap(),
        "--phase",
        "cascade_step_2",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn resume_continues_the_trace_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = gen_tiny_data(dir.path());
    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    let out = lmreg(&[
        "train", "--config", &config, "--data", &data, "--out",
        first.to_str().unwrap(), "--steps", "4",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = lmreg(&[
        "train", "--config", &config, "--data", &data, "--out",
        second.to_str().unwrap(), "--steps", "4", "--resume",
        first.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let trace = fs::read_to_string(format!("{}.trace", second.display())).unwrap();
    assert_eq!(trace.lines().next().unwrap().split('\t').next().unwrap(), "4");
}

#[test]
fn training_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = gen_tiny_data(dir.path());
    let run = |name: &str| {
        let ckpt = dir.path().join(name);
        let out = lmreg(&[
            "train", "--config", &config, "--data", &data, "--out",
            ckpt.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fs::read_to_string(format!("{}.trace", ckpt.display())).unwrap()
    };
    assert_eq!(run("drun1.ckpt"), run("drun2.ckpt"));
}

#[test]
fn register_with_missing_checkpoint_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmreg(&[
        "register",
        "--ckpt",
        dir.path().join("nope.ckpt").to_str().unwrap(),
        "--moving",
        dir.path().join("m.vol").to_str().unwrap(),
        "--fixed",
        dir.path().join("f.vol").to_str().unwrap(),
        "--out-field",
        dir.path().join("out.vol").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn evaluate_zero_field_on_equal_segs_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path());
    let zero = DisplacementField::zeros(VolumeGeometry::new(16, 16, 16));
    let zero_path = dir.path().join("zero.vol");
    write_volume(&Volume::Field(zero), &zero_path).unwrap();
    let seg = Path::new(&data).join("pair0_fixedseg.vol");
    let out = lmreg(&[
        "evaluate",
        "--field",
        zero_path.to_str().unwrap(),
        "--moving-seg",
        seg.to_str().unwrap(),
        "--fixed-seg",
        seg.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = EvalReport::from_text(&stdout(&out)).unwrap();
    assert_eq!(report.mean_dice, 1.0);
    assert_eq!(report.pct_nonpos_jacobian, 0.0);
}

#[test]
fn evaluate_geometry_mismatch_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path());
    let zero = DisplacementField::zeros(VolumeGeometry::new(8, 8, 8));
    let zero_path = dir.path().join("zero8.vol");
    write_volume(&Volume::Field(zero), &zero_path).unwrap();
    let seg = Path::new(&data).join("pair0_fixedseg.vol");
    let out = lmreg(&[
        "evaluate",
        "--field",
        zero_path.to_str().unwrap(),
        "--moving-seg",
        seg.to_str().unwrap(),
        "--fixed-seg",
        seg.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_passes_by_default_and_fails_below_the_roundoff_floor() {
    let out = lmreg(&["gradcheck", "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("conv3d_stride1"));
    assert!(text.contains("total_loss"));

    let again = lmreg(&["gradcheck", "--seed", "5"]);
    assert_eq!(stdout(&again), text);

    let out = lmreg(&["gradcheck", "--seed", "5", "--tol", "1e-12"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn config_with_unknown_keys_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[model]\nnot_a_field = 1\n").unwrap();
    let out = lmreg(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("x.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("not_a_field"));
}

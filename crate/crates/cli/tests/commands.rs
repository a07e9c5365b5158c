use std::fs;
use std::path::Path;
use std::process::Command;

use bitemporal_cli::commands::{
    load_checkpoint, manifest_in, CHECKPOINT_FILE, MONTAGE_DIR, REPORT_CSV_FILE,
};
use bitemporal_cli::{
    cmd_eval, cmd_generate, cmd_inspect, cmd_train_denoiser, GenerateMode, RunConfig,
    RESOLVED_CONFIG_FILE,
};
use bitemporal_core::cd_eval::Arm;
use bitemporal_core::change::derive_change_mask;
use bitemporal_core::dataset::read_all;

const SMALL: &str = "seed = 4\n\
                     train.steps = 5\n\
                     train.scenes = 2\n\
                     generate.count = 8\n\
                     generate.ddim_substeps = 5\n\
                     real.count = 20\n\
                     eval.ratios = 0.5,1.0\n\
                     eval.pretrain_steps = 10\n\
                     eval.finetune_steps = 5\n";

fn small(overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::resolve(Some(SMALL), &o).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bitemporal"))
}

fn stderr_of(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn oracle_generate_writes_consistent_dataset_and_montages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(&[]);
    let pairs = cmd_generate(&cfg, &GenerateMode::Oracle, tmp.path(), 2).unwrap();
    assert_eq!(pairs.len(), 8);
    let back = read_all(&manifest_in(tmp.path())).unwrap();
    assert_eq!(back.len(), 8);
    for (i, p) in back.iter().enumerate() {
        assert_eq!(p.index, i);
        assert_eq!(p.change, derive_change_mask(&p.y1, &p.y2).unwrap());
    }
    assert_eq!(
        fs::read_dir(tmp.path().join(MONTAGE_DIR)).unwrap().count(),
        8
    );
    let resolved = fs::read_to_string(tmp.path().join(RESOLVED_CONFIG_FILE)).unwrap();
    assert_eq!(RunConfig::resolve(Some(&resolved), &[]).unwrap(), cfg);
    let summary = cmd_inspect(&manifest_in(tmp.path()), None, 0).unwrap();
    assert!(summary.contains("records     8"), "{summary}");
    assert!(summary.contains(&cfg.hash()), "{summary}");
}

#[test]
fn checkpoint_must_match_configured_architecture() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(&[]);
    cmd_train_denoiser(&cfg, tmp.path()).unwrap();
    let ckpt = tmp.path().join(CHECKPOINT_FILE);
    assert!(load_checkpoint(&cfg, &ckpt).is_ok());
    let wider = small(&["denoiser.base_channels=8"]);
    let err = cmd_generate(
        &wider,
        &GenerateMode::Model(ckpt.clone()),
        &tmp.path().join("g"),
        1,
    )
    .unwrap_err();
    assert_eq!(err.category(), "arch", "{err}");
    let err = cmd_generate(
        &cfg,
        &GenerateMode::Model(tmp.path().join("none.ckpt")),
        &tmp.path().join("g"),
        1,
    )
    .unwrap_err();
    assert_eq!(err.category(), "io", "{err}");
}

fn datasets(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let syn = root.join("syn");
    let real = root.join("real");
    cmd_generate(&small(&[]), &GenerateMode::Oracle, &syn, 2).unwrap();
    cmd_generate(&small(&["seed=5"]), &GenerateMode::Real, &real, 2).unwrap();
    (manifest_in(&syn), manifest_in(&real))
}

#[test]
fn eval_reports_one_row_per_arm_and_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let (syn, real) = datasets(tmp.path());
    let cfg = small(&[]);
    let report = cmd_eval(&cfg, &syn, &real, &tmp.path().join("eval"), 2).unwrap();
    assert_eq!(report.rows.len(), 6);
    for arm in [Arm::OnlySup, Arm::PretrainFinetune, Arm::ZeroShot] {
        for ratio in [0.5, 1.0] {
            let row = report.row(arm, ratio).unwrap();
            assert_eq!(row.runs, 5);
        }
    }
    let csv = fs::read_to_string(tmp.path().join("eval").join(REPORT_CSV_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 7);
    // Five seeds give a population deviation in every std column.
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_ne!(cells[4], "-", "{line}");
    }

    let err = cmd_eval(&cfg, &syn, &syn, &tmp.path().join("bad"), 1).unwrap_err();
    assert_eq!(err.category(), "data", "{err}");
}

#[test]
fn binary_reports_categorised_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.cfg");
    fs::write(&cfg_path, "train.steps = 3\n").unwrap();
    let out = bin()
        .args(["train-denoiser", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(tmp.path().join("t"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert!(
        err.starts_with("error[config]: ") && err.contains("`seed`"),
        "{err}"
    );
    assert_eq!(err.trim_end().lines().count(), 1);

    let out = bin()
        .args([
            "generate",
            "--oracle",
            "--seed",
            "1",
            "--set",
            "colour=blue",
            "--out",
        ])
        .arg(tmp.path().join("g"))
        .output()
        .unwrap();
    assert!(
        stderr_of(&out).starts_with("error[config]: "),
        "{}",
        stderr_of(&out)
    );
    assert!(stderr_of(&out).contains("`colour`"));

    let out = bin()
        .args(["inspect"])
        .arg(tmp.path().join("missing"))
        .output()
        .unwrap();
    assert!(
        stderr_of(&out).starts_with("error[io]: "),
        "{}",
        stderr_of(&out)
    );
}

#[test]
fn binary_flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.cfg");
    fs::write(&cfg_path, SMALL).unwrap();
    let out_dir = tmp.path().join("g");
    let out = bin()
        .args([
            "generate",
            "--oracle",
            "--count",
            "3",
            "--seed",
            "9",
            "--workers",
            "2",
            "--config",
        ])
        .arg(&cfg_path)
        .args(["--set", "generate.ddim_substeps=4", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let resolved = fs::read_to_string(out_dir.join(RESOLVED_CONFIG_FILE)).unwrap();
    for line in [
        "seed = 9",
        "generate.count = 3",
        "generate.ddim_substeps = 4",
        "train.steps = 5",
    ] {
        assert!(
            resolved.lines().any(|l| l == line),
            "missing `{line}` in\n{resolved}"
        );
    }
    assert_eq!(read_all(&manifest_in(&out_dir)).unwrap().len(), 3);

    let out = bin().arg("inspect").arg(&out_dir).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("records     3"));
}

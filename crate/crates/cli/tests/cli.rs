use std::fs;
use std::process::Command;

fn cfpinn(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cfpinn"))
        .args(args)
        .output()
        .unwrap()
}

const TINY: &[&str] = &[
    "--layers",
    "1",
    "--width",
    "4",
    "--grid-t",
    "5",
    "--grid-x",
    "3",
    "--lbfgs-max-iters",
    "5",
];

#[test]
fn forward_then_export_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec![
        "forward", "--n-ic", "4", "--n-bc", "4", "--n-f", "20", "--seed", "7", "--out", out,
    ];
    args.extend(TINY);
    let run = cfpinn(&args);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let summary = String::from_utf8(run.stdout).unwrap();
    assert!(summary.contains("\"relative_l2\""));

    let ck = dir.path().join("seed-7/checkpoint.txt");
    let grid = dir.path().join("regrid.csv");
    let export = cfpinn(&[
        "export-grid",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--n-t",
        "5",
        "--n-x",
        "3",
        "--out",
        grid.to_str().unwrap(),
    ]);
    assert!(export.status.success());
    assert_eq!(
        fs::read(&grid).unwrap(),
        fs::read(dir.path().join("seed-7/grid.csv")).unwrap()
    );
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("inv.toml");
    fs::write(&cfg, "alpha = 0.3\nn-data = 30\nadam-steps = 3\nseed = 1\n").unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec![
        "inverse",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "2",
        "--out",
        out,
    ];
    args.extend(TINY);
    let run = cfpinn(&args);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let echo = fs::read_to_string(dir.path().join("seed-2/config.echo")).unwrap();
    assert!(echo.contains("alpha = 0.3"));
    assert!(echo.contains("n_data = 30"));
    assert!(dir.path().join("seed-2/adam.csv").is_file());
}

#[test]
fn eval_oracle_prints_exact_values() {
    let run = cfpinn(&["eval-oracle", "--alpha", "0.5", "--t", "1", "--x", "0,-0.5"]);
    assert!(run.status.success());
    let text = String::from_utf8(run.stdout).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "t,x,u");
    assert_eq!(lines.len(), 3);
    let u: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    let expected = (0.5 / (4.0 * std::f64::consts::PI * 0.5073f64)).sqrt();
    assert!((u - expected).abs() < 1e-15);
}

#[test]
fn invalid_arguments_fail() {
    assert!(!cfpinn(&["forward", "--alpha", "1.5"]).status.success());
    assert!(!cfpinn(&["inverse", "--weights", "1,0.1"]).status.success());
    assert!(!cfpinn(&["eval-oracle", "--t", "0", "--x", "0"])
        .status
        .success());
}

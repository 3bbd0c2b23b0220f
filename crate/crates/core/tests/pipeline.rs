use std::fs;

use cfpinn::harness::{self, Checkpoint, ExperimentConfig, GridSpec, Mode};

fn small_forward() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::forward(0.5);
    cfg.hidden_layers = 2;
    cfg.width = 6;
    cfg.n_ic = 6;
    cfg.n_bc = 6;
    cfg.n_f = 60;
    cfg.optim.lbfgs.max_iters = 40;
    cfg.grid = GridSpec { n_t: 7, n_x: 5 };
    cfg
}

#[test]
fn forward_run_writes_consistent_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small_forward();
    cfg.seed = 3;
    cfg.output_dir = Some(root.path().to_path_buf());
    let summary = harness::run_forward(&cfg).unwrap();
    let dir = root.path().join("seed-3");
    assert_eq!(cfg.run_dir().unwrap(), dir);

    let echo = fs::read_to_string(dir.join("config.echo")).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&echo).unwrap(), cfg);
    let back =
        harness::RunSummary::from_json(&fs::read_to_string(dir.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(back, summary);

    let ck = Checkpoint::load(&dir.join("checkpoint.txt")).unwrap();
    let (loss, errors) = harness::recompute_metrics(&cfg, &ck).unwrap();
    assert_eq!(loss, summary.loss);
    assert_eq!(errors, summary.errors);

    let grid = fs::read_to_string(dir.join("grid.csv")).unwrap();
    let mut lines = grid.lines();
    assert_eq!(lines.next(), Some("# resolution n_t=7 n_x=5"));
    assert_eq!(lines.next(), Some("t,x,u_pred,u_exact,abs_error"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 35);
    for r in &rows {
        assert_eq!(r[4], (r[2] - r[3]).abs());
    }
    assert!(rows.windows(2).all(|w| w[0][0] <= w[1][0]));

    let mut again = Vec::new();
    harness::export_grid(&ck, &cfg.domain, cfg.grid, &mut again).unwrap();
    assert_eq!(again, grid.as_bytes());

    let history = fs::read_to_string(dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("iter,loss,grad_norm,step"));
    assert_eq!(history.lines().count(), summary.lbfgs_iterations + 1);
    let losses: Vec<f64> = history
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(losses.windows(2).all(|w| w[1] <= w[0]));

    let points = fs::read_to_string(dir.join("points.csv")).unwrap();
    assert_eq!(points.lines().count(), 1 + 6 + 6 + 60);
    assert!(!dir.join("adam.csv").exists());
}

#[test]
fn rerun_overwrites_identically() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small_forward();
    cfg.mode = Mode::ForwardWeighted;
    cfg.output_dir = Some(root.path().to_path_buf());
    let read_all = || {
        [
            "checkpoint.txt",
            "grid.csv",
            "history.csv",
            "points.csv",
            "config.echo",
        ]
        .map(|f| fs::read(cfg.run_dir().unwrap().join(f)).unwrap())
    };
    let a = harness::run_forward(&cfg).unwrap();
    let first = read_all();
    let b = harness::run_forward(&cfg).unwrap();
    assert_eq!(a.without_timing(), b.without_timing());
    assert_eq!(first, read_all());
}

#[test]
fn inverse_run_reports_lambda() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::inverse(0.8);
    cfg.hidden_layers = 2;
    cfg.width = 6;
    cfg.n_data = Some(80);
    cfg.noise_level = 0.01;
    cfg.optim.adam_steps = 50;
    cfg.optim.lbfgs.max_iters = 30;
    cfg.grid = GridSpec { n_t: 4, n_x: 4 };
    cfg.output_dir = Some(root.path().to_path_buf());
    let s = harness::run_inverse(&cfg).unwrap();
    let lambda = s.lambda_hat.unwrap();
    assert_eq!(
        s.lambda_error_percent.unwrap(),
        100.0 * (lambda - 0.5073).abs() / 0.5073
    );
    assert_eq!(s.loss.mse_ic, 0.0);
    let dir = cfg.run_dir().unwrap();
    let ck = Checkpoint::load(&dir.join("checkpoint.txt")).unwrap();
    assert!(ck.lambda_learned);
    assert_eq!(ck.lambda.to_bits(), lambda.to_bits());
    let adam = fs::read_to_string(dir.join("adam.csv")).unwrap();
    assert_eq!(adam.lines().count(), 51);
    assert!(harness::run_forward(&cfg).is_err());
}

#[test]
fn sweeps_fill_every_cell_and_are_repeatable() {
    let mut base = small_forward();
    base.optim.lbfgs.max_iters = 5;
    let t = harness::sweep_data(&base, &[10, 20], &[30, 60, 90]).unwrap();
    assert_eq!(t.cells.len(), 2);
    assert!(t
        .cells
        .iter()
        .all(|r| r.len() == 3 && r.iter().all(Option::is_some)));
    assert_eq!(
        t,
        harness::sweep_data(&base, &[10, 20], &[30, 60, 90]).unwrap()
    );

    let root = tempfile::tempdir().unwrap();
    base.output_dir = Some(root.path().to_path_buf());
    let a = harness::sweep_arch(&base, &[1, 2], &[3]).unwrap();
    assert_eq!((a.rows.len(), a.cols.len()), (2, 1));
    assert!(root
        .path()
        .join("layers-2_neurons-3/seed-0/summary.json")
        .is_file());
    let table = fs::read_to_string(root.path().join("sweep-seed-0.csv")).unwrap();
    assert!(table.contains("lbfgs_max_iters=5"));
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn sweep_records_failed_cells_as_missing() {
    let base = small_forward();
    // A zero-width network is rejected and must show up as an empty cell.
    let t = harness::sweep_arch(&base, &[1], &[0, 2]).unwrap();
    assert_eq!(t.cells[0][0], None);
    assert!(t.cells[0][1].is_some());
}

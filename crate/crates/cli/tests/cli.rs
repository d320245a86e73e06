//! End-to-end checks of the command-line contract: exit codes, validation,
//! and output shape.

use std::process::{Command, Output};

fn diffvar(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_diffvar"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

#[test]
fn constant_functional_estimates_exactly() {
    let out = diffvar(
        &[
            "estimate",
            "functional=constant",
            "constant_value=1.5",
            "n_paths=50",
            "n_steps=4",
        ],
        &[],
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let row = text
        .lines()
        .find(|l| l.contains(",free_energy,"))
        .expect("free energy row");
    assert!(row.contains("1.5000000000000000e0"));
    assert!(row.contains("0.0000000000000000e0"));
    assert!(text.starts_with("command,config_hash,seed,n_steps,n_paths,item,value,std_error,status"));
}

#[test]
fn unknown_key_exits_2_with_no_rows() {
    let out = diffvar(&["estimate", "n_stepz=8"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty(), "no output rows on validation failure");
    assert!(!out.stderr.is_empty());
}

#[test]
fn malformed_value_exits_2() {
    let out = diffvar(&["estimate", "n_steps=eight"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

#[test]
fn enumeration_guard_exits_2() {
    let out = diffvar(&["oracle", "n_steps=25", "dim=1"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = diffvar(&["oracle", "n_steps=12", "dim=2"], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_delay_schedule_exits_2() {
    let out = diffvar(
        &[
            "approx-density",
            "functional=terminal_linear",
            "n_steps=8",
            "schedule=2,0.5,2,0",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn injected_sign_error_fails_the_battery() {
    let out = diffvar(
        &[
            "verify",
            "inject_sign_error=true",
            "n_paths=5000",
            "n_steps=16",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(3));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.ends_with(",FAIL")));
}

#[test]
fn default_battery_passes_on_brownian_and_degenerate_presets() {
    for preset in ["brownian", "degenerate"] {
        let out = diffvar(
            &[
                "verify",
                &format!("preset={preset}"),
                "n_paths=20000",
                "n_steps=32",
            ],
            &[],
        );
        assert!(
            out.status.success(),
            "verify failed on preset {preset}: {}",
            String::from_utf8_lossy(&out.stdout)
        );
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(!text.lines().any(|l| l.ends_with(",FAIL")));
    }
}

#[test]
fn pervasive_rejections_exit_3() {
    // log(x1) is NaN on about half the paths, far past the rejection budget.
    let out = diffvar(
        &[
            "estimate",
            "functional=expr",
            "expr=log(x1)",
            "n_paths=2000",
            "n_steps=8",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_file_with_comments_and_overrides() {
    let dir = std::env::temp_dir().join("diffvar-cli-test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("est.cfg");
    std::fs::write(
        &path,
        "# free energy of a constant\nfunctional = constant\nconstant_value = 2.0\nn_paths = 10\nn_steps = 4\n",
    )
    .unwrap();
    let out = diffvar(
        &[
            "estimate",
            "--config",
            path.to_str().unwrap(),
            "constant_value=3.0",
        ],
        &[],
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("3.0000000000000000e0"));
}

#[test]
fn expression_functional_runs() {
    let out = diffvar(
        &[
            "estimate",
            "functional=expr",
            "expr=0.5 * x1 ^ 2 - b1",
            "n_paths=500",
            "n_steps=8",
        ],
        &[],
    );
    assert!(out.status.success());
    // Bad expressions are configuration errors.
    let bad = diffvar(
        &["estimate", "functional=expr", "expr=x9 +", "n_paths=10"],
        &[],
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn quadratic_free_energy_matches_the_gaussian_closed_form() {
    // -log E[exp(-x(1)^2)] = log(3)/2 for the driver-valued state.
    let out = diffvar(
        &[
            "estimate",
            "functional=terminal_quadratic",
            "n_steps=64",
            "n_paths=100000",
            "seed=2",
        ],
        &[],
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let row = text
        .lines()
        .find(|l| l.contains(",free_energy,"))
        .unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    let value: f64 = fields[6].parse().unwrap();
    let se: f64 = fields[7].parse().unwrap();
    let target = 0.5 * 3.0f64.ln();
    assert!(
        (value - target).abs() <= 3.0 * se + 0.005,
        "estimate {value} +- {se} vs {target}"
    );
}

#[test]
fn oracle_one_step_matches_minus_log_cosh() {
    let out = diffvar(
        &[
            "oracle",
            "functional=terminal_linear",
            "n_steps=1",
            "dim=1",
        ],
        &[],
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let fe_row = text
        .lines()
        .find(|l| l.contains(",free_energy,"))
        .unwrap();
    let value: f64 = fe_row.split(',').nth(6).unwrap().parse().unwrap();
    let expected = -(1.0f64.cosh().ln());
    assert!(
        (value - expected).abs() <= 1e-14,
        "unexpected free energy {value} vs -log cosh(1) = {expected}"
    );
}

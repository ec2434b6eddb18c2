use std::process::Command;

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_gfs-prune")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn help_exits_zero() {
    let (code, stdout, _) = run(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["sweep", "trace", "membership", "bounds", "train", "prune", "gradcheck"] {
        assert!(stdout.contains(sub), "help is missing `{sub}`");
    }
}

#[test]
fn config_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).0, 1);
    let (code, _, err) = run(&["bounds", "--set", "no_such_key=3"]);
    assert_eq!(code, 1);
    assert!(err.contains("no_such_key"), "{err}");
    assert_eq!(run(&["bounds", "--set", "activation=relu"]).0, 1);
    assert_eq!(run(&["trace", "/dev/null", "--rule", "median"]).0, 1);
}

#[test]
fn missing_files_exit_three() {
    assert_eq!(run(&["sweep", "-c", "/nonexistent/sweep.cfg"]).0, 3);
    assert_eq!(run(&["trace", "/nonexistent/grid.csv"]).0, 3);
    assert_eq!(run(&["prune", "--net", "/nonexistent/net.bin"]).0, 3);
}

#[test]
fn csv_headers() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.csv");
    let g = grid.to_str().unwrap();
    let (code, _, err) = run(&[
        "sweep", "--set", "data.pool=200", "--set", "data.d=6", "--set", "sizes=32,64", "--set", "widths=16",
        "--set", "trials=1", "--set", "iterations=20", "--set", "checkpoint_every=10", "--set",
        "prune.iterations=5", "--set", "train.batch=8", "--set", "prune.batch=8", "-o", g,
    ]);
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(&grid).unwrap();
    assert!(text.starts_with("m,t,N,trial,accuracy,loss\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 3);
    let (code, trace, _) = run(&["trace", g]);
    assert_eq!(code, 0);
    assert!(trace.starts_with("m,N,target,threshold\n"));

    let (code, grad, _) = run(&["gradcheck", "--pairs", "2", "--coords", "5"]);
    assert_eq!(code, 0);
    assert!(grad.starts_with("pair,activation,criterion,index,analytic,numeric,rel_error\n"));
}

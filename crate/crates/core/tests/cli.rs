use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn knr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_knr"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn knr")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn identify_then_track_with_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = knr(
        &[
            "identify",
            "--system",
            "vdp",
            "--trials",
            "5",
            "--horizon",
            "1",
            "--seed",
            "3",
            "--out",
            "m.txt",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let model = fs::read_to_string(dir.path().join("m.txt")).unwrap();
    let mut lines = model.lines();
    assert_eq!(lines.next(), Some("KNR-MODEL v1"));
    assert_eq!(
        lines.next().unwrap().split(' ').take(3).collect::<Vec<_>>(),
        ["4", "1", "2"]
    );
    assert_eq!(lines.next(), Some("vdp"));

    let out = knr(
        &[
            "track",
            "--system",
            "vdp",
            "--controller",
            "knr",
            "--model",
            "m.txt",
            "--tf",
            "2",
            "--out",
            "t.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let traj = fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert!(traj.starts_with("t,x1,x2,y1,r1,u1\n"));
    assert_eq!(traj.lines().count(), 200 + 1);
    assert!(!traj.contains('\r'));
}

#[test]
fn track_nr_honours_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = knr(
        &[
            "track",
            "--system",
            "car",
            "--controller",
            "nr",
            "--alpha",
            "20",
            "--lookahead",
            "0.5",
            "--tf",
            "1",
            "--dt",
            "0.01",
            "--deriv",
            "fdm",
            "--out",
            "car.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let traj = fs::read_to_string(dir.path().join("car.csv")).unwrap();
    assert!(traj.starts_with("t,x1,x2,x3,y1,y2,r1,r2,u1,u2\n"));
    assert_eq!(traj.lines().count(), 101);
}

#[test]
fn compare_writes_report_and_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("short.toml"),
        "system = \"crane\"\nt_final = 1.0\n",
    )
    .unwrap();
    let out = knr(
        &[
            "compare",
            "--system",
            "crane",
            "--runs",
            "2",
            "--seed",
            "5",
            "--report",
            "r.csv",
            "--traj-dir",
            "traj",
            "--workers",
            "2",
            "--config",
            "short.toml",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(
        rows[0],
        "system,controller,runs,mean_mse,mean_id_time_s,mean_track_time_s,seed"
    );
    assert!(rows[1].starts_with("crane,nr,2,"));
    assert!(rows[2].starts_with("crane,knr,2,"));
    assert!(rows[2].ends_with(",5"));
    let mut names: Vec<String> = fs::read_dir(dir.path().join("traj"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "crane_knr_seed5.csv",
            "crane_knr_seed6.csv",
            "crane_nr_seed5.csv",
            "crane_nr_seed6.csv"
        ]
    );
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &[
            "track",
            "--system",
            "boat",
            "--controller",
            "nr",
            "--out",
            "x.csv",
        ],
        &[
            "track",
            "--system",
            "vdp",
            "--controller",
            "nr",
            "--alpha",
            "0",
            "--out",
            "x.csv",
        ],
        &[
            "track",
            "--system",
            "vdp",
            "--controller",
            "knr",
            "--model",
            "missing.txt",
            "--out",
            "x.csv",
        ],
        &[
            "identify",
            "--system",
            "vdp",
            "--horizon",
            "0.505",
            "--out",
            "m.txt",
        ],
        &[
            "compare", "--system", "vdp", "--runs", "0", "--report", "r.csv",
        ],
    ];
    for args in cases {
        assert_eq!(code(&knr(args, dir.path())), 2, "{args:?}");
    }

    fs::write(
        dir.path().join("bad.toml"),
        "system = \"vdp\"\nunknown = 1\n",
    )
    .unwrap();
    let out = knr(
        &[
            "track",
            "--system",
            "vdp",
            "--controller",
            "nr",
            "--config",
            "bad.toml",
            "--out",
            "x.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 2);

    fs::write(dir.path().join("m.txt"), "KNR-MODEL v2\n").unwrap();
    let out = knr(
        &[
            "track",
            "--system",
            "vdp",
            "--controller",
            "knr",
            "--model",
            "m.txt",
            "--out",
            "x.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn numerical_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("blowup.toml"),
        "system = \"vdp\"\nu0 = [1e200]\n",
    )
    .unwrap();
    let out = knr(
        &[
            "track",
            "--system",
            "vdp",
            "--controller",
            "nr",
            "--config",
            "blowup.toml",
            "--out",
            "x.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("x.csv").exists());
}

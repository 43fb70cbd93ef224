use std::path::PathBuf;
use std::process::Command;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn vppsim(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_vppsim")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn scenario(name: &str) -> String {
    root().join("scenarios").join(name).display().to_string()
}

#[test]
fn validate_bundled_scenario() {
    let (code, out, _) = vppsim(&["validate", &scenario("fig5_mpc.toml")]);
    assert_eq!(code, 0);
    assert!(out.contains("fig5_mpc: ok"), "{out}");
}

#[test]
fn config_error_exits_with_one_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let grid = root().join("networks/five_bus.grid");
    std::fs::write(
        &bad,
        format!("name = \"b\"\ngrid = {:?}\ncontroller = \"agc\"\nduration_s = 60\n[agc]\nagc_period_s = 0\n", grid),
    )
    .unwrap();
    let (code, _, err) = vppsim(&["validate", bad.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("agc.agc_period_s"), "{err}");
    let (code, _, _) = vppsim(&["run", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(code, 1);
}

#[test]
fn run_writes_trace_and_chart_then_compare_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("a.csv");
    let svg = dir.path().join("a.svg");
    let (code, _, err) = vppsim(&[
        "run",
        &scenario("droop_step.toml"),
        "--csv-out",
        csv.to_str().unwrap(),
        "--svg",
        svg.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("t_s,freq_hz,ace_mw,gen1_mw"));
    assert_eq!(text.lines().count(), 601);
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let csv_b = dir.path().join("b.csv");
    let (code, _, _) = vppsim(&[
        "run",
        &scenario("droop_step.toml"),
        "--seed",
        "11",
        "--csv-out",
        csv_b.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let (code, out, _) = vppsim(&["compare", csv.to_str().unwrap(), csv_b.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.contains("vpp1 service duration"), "{out}");

    let (code, _, err) = vppsim(&["compare", csv.to_str().unwrap(), scenario("fig5_mpc.toml").as_str()]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn mpc_debug_dumps_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("short.toml");
    let text = std::fs::read_to_string(scenario("fig5_mpc.toml"))
        .unwrap()
        .replace("duration_s = 4200", "duration_s = 120")
        .replace("../networks/five_bus.grid", root().join("networks/five_bus.grid").to_str().unwrap());
    std::fs::write(&script, text).unwrap();
    let dumps = dir.path().join("dumps");
    let (code, _, err) = vppsim(&[
        "run",
        script.to_str().unwrap(),
        "--csv-out",
        dir.path().join("s.csv").to_str().unwrap(),
        "--debug-dumps",
        dumps.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(std::fs::read_dir(&dumps).unwrap().count(), 2);
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("unstable.toml");
    let text = std::fs::read_to_string(scenario("droop_step.toml"))
        .unwrap()
        .replace("../networks/five_bus.grid", root().join("networks/five_bus.grid").to_str().unwrap())
        .replace("seed = 7", "seed = 7\n\n[dynamics]\ndamping_d_pu = 500.0");
    std::fs::write(&script, text).unwrap();
    let (code, _, err) = vppsim(&["run", script.to_str().unwrap(), "--csv-out", dir.path().join("u.csv").to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("unstable at t ="), "{err}");
}

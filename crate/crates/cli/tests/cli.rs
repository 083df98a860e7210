use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn atomchain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atomchain")).args(args).output().unwrap()
}

fn bundled(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../configs/{name}.json"))
}

fn small_scenario() -> Value {
    json!({
        "name": "small",
        "model": {"spacing_over_lambda": 0.1, "atom_count": 21, "zeeman_slope_gamma0": 0.2, "sum_cutoff": 2000},
        "field": {"breakpoints": [{"t_gamma0inv": 0.0, "zero_point_sites": 0.0}, {"t_gamma0inv": 2.0, "zero_point_sites": 3.0}]},
        "initial": {"center_site": 0.0, "k_c_over_k0": 1.5, "width_denominator": 10.0,
                    "amplitudes": {"explicit": {"psi_plus": [0.168, 0.0], "psi_minus": [0.168, 0.0]}}},
        "samples": {"linear": {"start_gamma0inv": 0.0, "end_gamma0inv": 4.0, "count": 41}},
        "analyses": ["spectrum", "amplitudes", "plateaus", "reversals", "decay_fit"],
        "decay_fit_windows_gamma0inv": [[0.0, 4.0]]
    })
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn run_ok(args: &[&str]) -> Output {
    let out = atomchain(args);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn evolve_writes_observables_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_scenario());
    let out = dir.path().join("out");
    run_ok(&["evolve", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(first_line(&out.join("observables.csv")), "t,P_plus,P_minus,P_t,n_bar,force,lc_fraction");
    assert_eq!(first_line(&out.join("spectrum.csv")), "t,k_over_k0,pI,pII,residual");
    assert!(first_line(&out.join("amplitudes.csv")).starts_with("t,re_plus_-10,im_plus_-10,re_minus_-10"));
    let rows = fs::read_to_string(out.join("observables.csv")).unwrap().lines().count();
    assert_eq!(rows, 42);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["name"], "small");
    assert!(manifest["tolerances"].is_object());
    assert_eq!(manifest["config"]["model"]["sum_cutoff"], 2000);
}

#[test]
fn overrides_reach_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_scenario());
    let out = dir.path().join("out");
    run_ok(&[
        "project",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--dt-max",
        "0.002",
        "--sum-cutoff",
        "1500",
    ]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["model"]["sum_cutoff"], 1500);
    assert_eq!(manifest["config"]["integrator"]["dt_max_gamma0inv"], 0.002);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_scenario());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&["evolve", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    }
    for name in ["observables.csv", "spectrum.csv", "amplitudes.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn bands_writes_one_table_per_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = bundled("bands_fig1");
    run_ok(&[
        "bands",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--sum-cutoff",
        "1000",
        "--workers",
        "2",
    ]);
    for b in ["0", "4", "8", "12"] {
        let path = dir.path().join(format!("bands_bc{b}.csv"));
        assert_eq!(first_line(&path), "k_over_k0,band,re_ev,decay_rate,p_plus,p_minus");
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1 + 2 * 1001);
    }
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn sweep_writes_lifetime_table() {
    let dir = tempfile::tempdir().unwrap();
    let spec = json!({
        "name": "tiny",
        "base": small_scenario(),
        "axes": [{"parameter": "k_c_over_k0", "values": [1.0, 2.0, 3.0]},
                 {"parameter": "psi_phase", "range": {"start": 0.0, "stop": 3.0, "step": 3.0}}],
        "figure_of_merit": {"p_total_at": {"horizon_gamma0inv": 3.0}}
    });
    let config = write_config(dir.path(), &spec);
    let out = dir.path().join("out");
    run_ok(&["sweep", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", "3"]);
    let table = fs::read_to_string(out.join("lifetime.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "index,k_c_over_k0,center_site,psi_phase,zeeman_slope_gamma0,figure_of_merit,value,p_total_end,modal_rate,at_floor,method,error"
    );
    assert_eq!(lines.count(), 6);
}

#[test]
fn unknown_field_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = small_scenario();
    value["initial"]["k_center"] = json!(1.0);
    let config = write_config(dir.path(), &value);
    let out = atomchain(&["evolve", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("k_center"));
}

#[test]
fn invalid_value_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = small_scenario();
    value["model"]["atom_count"] = json!(0);
    let config = write_config(dir.path(), &value);
    let out = atomchain(&["evolve", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("atom_count"));
}

#[test]
fn step_underflow_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = small_scenario();
    value["integrator"] = json!({"method": "stepped", "dt_max_gamma0inv": 1e-3,
                                 "local_tolerance": 1e-300, "min_step_gamma0inv": 1e-3});
    let config = write_config(dir.path(), &value);
    let out = atomchain(&["evolve", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_config_exits_with_1() {
    let out = atomchain(&["evolve", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(1));
}

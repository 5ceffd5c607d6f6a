use std::path::Path;
use std::process::{Command, Output};

use phasescope::io::CsvTable;
use sha2::{Digest, Sha256};

fn phasescope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phasescope"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn file_hash(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn basis_dimension() {
    let out = phasescope(&["basis", "--L", "6", "--N", "6"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("dimension 462"));
}

#[test]
fn two_site_eigenvalues_match_closed_form() {
    let out = phasescope(&[
        "model",
        "--L",
        "2",
        "--N",
        "2",
        "--u-over-j",
        "1",
        "--no-rescale",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    let printed: Vec<f64> = text.lines().filter_map(|l| l.trim().parse().ok()).collect();
    assert_eq!(printed.len(), 3, "{text}");
    let (j, u) = (0.5f64.sqrt(), 0.5f64.sqrt());
    let root = (u * u / 4.0 + 4.0 * j * j).sqrt();
    let mut expected = [u, u / 2.0 + root, u / 2.0 - root];
    expected.sort_by(f64::total_cmp);
    for (a, b) in printed.iter().zip(expected) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn invalid_input_exits_one() {
    assert_eq!(
        phasescope(&["basis", "--L", "6", "--N", "-1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(phasescope(&["model", "--bogus"]).status.code(), Some(1));
    assert_eq!(phasescope(&["--help"]).status.code(), Some(0));
}

#[test]
fn model_dump_embeds_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let out = phasescope(&[
        "model",
        "--L",
        "3",
        "--N",
        "3",
        "--measurement",
        "pop",
        "--out",
        p(dir.path()),
    ]);
    assert!(out.status.success());
    let spectrum = CsvTable::read(&dir.path().join("spectrum.csv")).unwrap();
    let energies = spectrum.column("energy").unwrap();
    assert_eq!(energies.len(), 10);
    assert!((energies[9] - energies[0] - 20.0).abs() < 1e-9);
    assert!(spectrum.header["rescale_factor"].as_f64().unwrap() > 0.0);
    assert!(spectrum.header["version"]
        .as_str()
        .unwrap()
        .starts_with("phasescope"));
    let m = CsvTable::read(&dir.path().join("measurement.csv")).unwrap();
    assert_eq!(m.header["config"]["model"]["num_sites"], 3);
    assert!(dir.path().join("hamiltonian.csv").exists());
}

#[test]
fn perturbative_commuting_case_is_all_delta_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out_dir = dir.path().join(sub);
        let out = phasescope(&[
            "perturbative",
            "--L",
            "3",
            "--N",
            "3",
            "--u-values",
            "inf",
            "--kinds",
            "pop",
            "--spacing",
            "0.05",
            "--out",
            p(&out_dir),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        out_dir
    };
    let first = run("a");
    let second = run("b");
    let summary = CsvTable::read(&first.join("perturbative_pop_summary.csv")).unwrap();
    assert_eq!(summary.column("delta_fraction").unwrap(), vec![1.0]);
    for name in [
        "perturbative_pop.csv",
        "perturbative_pop_summary.csv",
        "components/pop_u00.csv",
    ] {
        assert_eq!(
            file_hash(&first.join(name)),
            file_hash(&second.join(name)),
            "{name}"
        );
    }
    // unit square normalization checked by trapezoid quadrature on the emitted grid
    let spectra = CsvTable::read(&first.join("perturbative_pop.csv")).unwrap();
    let omega = spectra.column("omega").unwrap();
    let s = spectra.column("S").unwrap();
    let step = omega[1] - omega[0];
    let mut square = 0.0;
    for k in 0..s.len() {
        let w = if k == 0 || k + 1 == s.len() { 0.5 } else { 1.0 };
        square += w * s[k] * s[k] * step;
    }
    assert!((square - 1.0).abs() < 1e-6, "{square}");
}

#[test]
fn zero_strength_eigenstate_gives_single_bin() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("rec.csv");
    let psd = dir.path().join("psd.csv");
    let out = phasescope(&[
        "trajectory",
        "--L",
        "2",
        "--N",
        "2",
        "--u-over-j",
        "inf",
        "--measurement",
        "pop",
        "--gamma",
        "0",
        "--initial",
        "fock:0,2",
        "--total-time",
        "10",
        "--out",
        p(&rec),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(phasescope(&[
        "psd",
        "--record",
        p(&rec),
        "--out",
        p(&psd),
        "--no-mean-removal"
    ])
    .status
    .success());
    let table = CsvTable::read(&psd).unwrap();
    let omega = table.column("omega").unwrap();
    let s = table.column("S").unwrap();
    let nonzero: Vec<usize> = (0..s.len()).filter(|&k| s[k] > 1e-20).collect();
    assert_eq!(nonzero.len(), 1);
    assert_eq!(omega[nonzero[0]], 0.0);
    assert!((s[nonzero[0]] - 10.0).abs() < 1e-9);
}

#[test]
fn qnd_pipeline_reports_boundary_and_is_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let traj = |name: &str, seed: &str| {
        let path = dir.path().join(name);
        let out = phasescope(&[
            "trajectory",
            "--L",
            "2",
            "--N",
            "2",
            "--u-over-j",
            "inf",
            "--measurement",
            "pop",
            "--gamma",
            "0.5",
            "--initial",
            "fock:1,1",
            "--total-time",
            "200",
            "--seed",
            seed,
            "--out",
            p(&path),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        path
    };
    let a = traj("a.csv", "11");
    let b = traj("b.csv", "11");
    let c = traj("c.csv", "12");
    assert_eq!(file_hash(&a), file_hash(&b));
    assert_ne!(file_hash(&a), file_hash(&c));

    let psd = dir.path().join("psd.csv");
    let fit = dir.path().join("fit.json");
    assert!(phasescope(&["psd", "--record", p(&a), "--out", p(&psd)])
        .status
        .success());
    let out = phasescope(&["fit", "--psd", p(&psd), "--out", p(&fit)]);
    assert!(out.status.success());
    let printed: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert!(printed["overlap"].as_f64().unwrap() <= 1.0);
    // signal plus white noise: the best width runs into the upper end of the scan
    assert_eq!(printed["boundary_flag"], true);
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&fit).unwrap()).unwrap();
    assert!(saved["spectrum"]["record"]["config"]["trajectory"]["seed"] == 11);
}

#[test]
fn sweep_exit_codes_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = phasescope(&["sweep", "--print-default-plan", "--L", "2", "--N", "2"]);
    assert!(out.status.success());
    let mut plan: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    plan["u_over_j"] = serde_json::json!([0.5, 4.0]);
    plan["gamma"] = serde_json::json!([0.1]);
    plan["measurements"] = serde_json::json!([{"kind": "coherence"}]);
    plan["seeds_per_cell"] = serde_json::json!(1);
    plan["trajectory"]["total_time"] = serde_json::json!(20.0);
    plan["trajectory"]["step_check"] = serde_json::json!(false);
    let plan_path = dir.path().join("plan.json");
    std::fs::write(&plan_path, plan.to_string()).unwrap();
    let out_dir = dir.path().join("out");
    let out = phasescope(&[
        "sweep",
        "--plan",
        p(&plan_path),
        "--out",
        p(&out_dir),
        "--workers",
        "1",
        "--save-records",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for name in ["diagram.csv", "diagram.json", "report.md"] {
        assert!(out_dir.join(name).exists(), "{name}");
    }
    assert_eq!(
        std::fs::read_dir(out_dir.join("records")).unwrap().count(),
        2
    );

    plan["gamma"] = serde_json::json!([0.1, 0.01]);
    std::fs::write(&plan_path, plan.to_string()).unwrap();
    let out = phasescope(&["sweep", "--plan", p(&plan_path), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));

    plan["gamma"] = serde_json::json!([0.1]);
    plan["model"] = serde_json::json!({"num_sites": 3, "num_particles": 2, "u_over_j": 1.0,
        "measurement": {"kind": "coherence"}});
    plan["u_over_j"] = serde_json::json!([1.0, "inf"]);
    std::fs::write(&plan_path, plan.to_string()).unwrap();
    let out = phasescope(&["sweep", "--plan", p(&plan_path), "--out", p(&out_dir)]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn lattice_matrix_dump() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let out = phasescope(&[
        "lattice",
        "--depth",
        "5",
        "--sites",
        "4",
        "--probe",
        "half-period",
        "--out",
        p(&path),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = CsvTable::read(&path).unwrap();
    assert_eq!(table.rows.len(), 16);
    assert_eq!(table.header["probe"]["mode"], "half_period");
}

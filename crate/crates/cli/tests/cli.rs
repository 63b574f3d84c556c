use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lpo_mor::io::{self, EnergyFile, ReducedFile};
use lpo_mor::{lyapunov, sim, CpVector, LpoSystem, Method};
use nalgebra::DMatrix;
use tempfile::TempDir;

fn lpo_mor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpo-mor"))
        .args(args)
        .env("LPO_MOR_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_system() -> LpoSystem<f64> {
    let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.2, 0.0, 0.0, -2.0, 0.5, 0.1, 0.0, -3.0]);
    let b = DMatrix::from_column_slice(3, 1, &[1.0, 0.5, -1.0]);
    let c1 = CpVector::from_factors(vec![DMatrix::from_column_slice(3, 1, &[1.0, -1.0, 2.0])]).unwrap();
    LpoSystem::new(a, b, vec![c1]).unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|f| f.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn energy_quadratic_block_matches_dense_gramian() {
    let dir = TempDir::new().unwrap();
    let sys_path = dir.path().join("toy.json");
    let out = dir.path().join("energy.json");
    let sys = toy_system();
    io::write_system(&sys_path, &sys).unwrap();
    let run = lpo_mor(&["energy", path_str(&sys_path), "--tol", "1e-12", "--out", path_str(&out)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let e = io::read_json::<EnergyFile>(&out).unwrap().to_energy::<f64>().unwrap();
    let w2 = e.coefficient(2).unwrap().matrix_form().unwrap();
    let c = sys.linear_output_row().unwrap();
    let gram = lyapunov::solve_lyapunov_general(&sys.a().transpose(), &(c.transpose() * &c)).unwrap();
    assert!((&w2 - &gram).norm() <= 1e-9 * gram.norm(), "{w2} vs {gram}");
}

#[test]
fn energy_ell_override_is_recorded() {
    let dir = TempDir::new().unwrap();
    let sys_path = dir.path().join("toy.json");
    let out = dir.path().join("energy.json");
    io::write_system(&sys_path, &toy_system()).unwrap();
    let run = lpo_mor(&["energy", path_str(&sys_path), "--ell", "5", "--out", path_str(&out)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let file: EnergyFile = io::read_json(&out).unwrap();
    assert!(!file.reports.is_empty());
    assert!(file.reports.iter().all(|r| r.ell == 5));
    assert!(String::from_utf8_lossy(&run.stdout).contains("ell = 5"));
}

#[test]
fn unstable_system_exits_2_naming_eigenvalue() {
    let dir = TempDir::new().unwrap();
    let sys_path = dir.path().join("unstable.json");
    let out = dir.path().join("energy.json");
    let sys = toy_system();
    let flipped = LpoSystem::new_unchecked(-sys.a(), sys.b().clone(), sys.outputs().to_vec()).unwrap();
    io::write_system(&sys_path, &flipped).unwrap();
    let run = lpo_mor(&["energy", path_str(&sys_path), "--out", path_str(&out)]);
    assert_eq!(code(&run), 2);
    let msg = stderr(&run);
    assert!(msg.contains("eigenvalue") && msg.contains("non-negative real part"), "{msg}");
    assert!(!out.exists());
}

#[test]
fn energy_reduce_on_msd_gives_stable_rom() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("rom.json");
    let run = lpo_mor(&[
        "reduce", "msd", "--masses", "8", "--method", "energy", "--r", "4", "--L", "0.1", "--max-iters", "20",
        "--out", path_str(&out),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let file: ReducedFile = io::read_json(&out).unwrap();
    assert_eq!(file.provenance.method, Method::EnergyBased);
    assert_eq!(file.provenance.radius, Some(0.1));
    assert!(file.provenance.stable);
    let rom = file.to_model::<f64>().unwrap();
    assert_eq!(rom.order(), 4);
    assert!(rom.reduced.is_stable().unwrap());
}

#[test]
fn bt_rejects_quadratic_output() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("rom.json");
    let run = lpo_mor(&["reduce", "msd", "--masses", "3", "--method", "bt", "--r", "2", "--out", path_str(&out)]);
    assert_eq!(code(&run), 2, "{}", stderr(&run));
}

#[test]
fn qobt_rejects_cubic_output() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("rom.json");
    let run = lpo_mor(&[
        "reduce", "convdiff", "--grid", "4", "--method", "qobt", "--r", "2", "--out", path_str(&out),
    ]);
    assert_eq!(code(&run), 2, "{}", stderr(&run));
}

#[test]
fn qobt_on_msd_records_provenance() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("rom.json");
    let run = lpo_mor(&["reduce", "msd", "--method", "qobt", "--r", "10", "--out", path_str(&out)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let file: ReducedFile = io::read_json(&out).unwrap();
    assert_eq!(file.provenance.method, Method::Qobt);
    assert_eq!(file.provenance.hankel_singular_values.len(), 50);
    // the ROM written by the binary equals the library's
    let lib = lpo_mor::mor::qobt_reduce(&sim::build_msd(25, 1.0, 1.0, 1.0).unwrap(), 10).unwrap();
    assert_eq!(file.to_model::<f64>().unwrap().reduced.a(), lib.reduced.a());
}

#[test]
fn simulate_compare_writes_four_columns() {
    let dir = TempDir::new().unwrap();
    let rom = dir.path().join("rom.json");
    let csv_path = dir.path().join("cmp.csv");
    let run = lpo_mor(&[
        "reduce", "convdiff", "--grid", "6", "--method", "energy", "--r", "5", "--out", path_str(&rom),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let run = lpo_mor(&[
        "simulate", "convdiff", "--grid", "6", "--input", "convdiff_input", "--t1", "1", "--compare",
        path_str(&rom), "--out", path_str(&csv_path),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let (header, rows) = read_csv(&csv_path);
    assert_eq!(header, ["t", "y", "yhat", "abs_err"]);
    assert_eq!(rows.len(), 1001);
    for r in &rows {
        assert_eq!(r.len(), 4);
        assert!(((r[1] - r[2]).abs() - r[3]).abs() <= 1e-12 * (1.0 + r[3]));
    }
    // 17 significant digits
    let text = fs::read_to_string(&csv_path).unwrap();
    let second = text.lines().nth(2).unwrap().split(',').next().unwrap();
    assert_eq!(second, "1.0000000000000000e-3");
}

#[test]
fn halving_dt_changes_msd_output_negligibly() {
    let dir = TempDir::new().unwrap();
    let coarse = dir.path().join("coarse.csv");
    let fine = dir.path().join("fine.csv");
    for (dt, path) in [("2e-3", &coarse), ("1e-3", &fine)] {
        let run = lpo_mor(&["simulate", "msd", "--masses", "5", "--dt", dt, "--out", path_str(path)]);
        assert_eq!(code(&run), 0, "{}", stderr(&run));
    }
    let (header, c) = read_csv(&coarse);
    assert_eq!(header, ["t", "y"]);
    let (_, f) = read_csv(&fine);
    assert_eq!(f.len(), 2 * c.len() - 1);
    let scale = f.iter().fold(0.0f64, |m, r| m.max(r[1].abs()));
    let dev = c
        .iter()
        .enumerate()
        .fold(0.0f64, |m, (i, r)| m.max((r[1] - f[2 * i][1]).abs()));
    assert!(dev <= 1e-9 * scale, "deviation {dev:e}, scale {scale:e}");
}

#[test]
fn missing_compare_model_exits_2() {
    let dir = TempDir::new().unwrap();
    let run = lpo_mor(&[
        "simulate", "msd", "--masses", "2", "--compare", path_str(&dir.path().join("nope.json")), "--out",
        path_str(&dir.path().join("out.csv")),
    ]);
    assert_eq!(code(&run), 2);
}

#[test]
fn bad_thread_count_exits_2() {
    let dir = TempDir::new().unwrap();
    let run = Command::new(env!("CARGO_BIN_EXE_lpo-mor"))
        .args(["simulate", "msd", "--masses", "2", "--out", path_str(&dir.path().join("o.csv"))])
        .env("LPO_MOR_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&run), 2);
}

#[test]
fn runs_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        let run = lpo_mor(&[
            "reduce", "msd", "--masses", "6", "--method", "energy", "--r", "3", "--max-iters", "10", "--out",
            path_str(p),
        ]);
        assert_eq!(code(&run), 0, "{}", stderr(&run));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! with the measured quantity, its tolerance and the runtime budget.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use lpo_mor::cp_tensor::CpVector;
use lpo_mor::energy::{self, BallSpec, EnergyFunction, SymmetryPolicy};
use lpo_mor::kron_solver::{self, ObservabilityOptions};
use lpo_mor::mor::{self, EnergyReduceOptions};
use lpo_mor::sim::{self, InputSignal, SimulationOptions};
use lpo_mor::stiefel::{self, OptimizerConfig, StiefelPoint};
use lpo_mor::system::{frequency_response_error, logspace, LpoSystem};
use lpo_mor::{io, linalg, lyapunov};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<(bool, String), String>;

struct Line {
    id: u32,
    title: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

fn run(id: u32, title: &'static str, budget_secs: u64, f: impl FnOnce() -> Check) -> Line {
    let start = Instant::now();
    let (ok, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(budget_secs);
    Line {
        id,
        title,
        passed: ok && elapsed <= budget,
        detail,
        elapsed,
        budget,
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// Random matrix shifted so that its spectral abscissa is `-margin`.
fn random_stable(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n) / (n as f64).sqrt();
    let alpha = linalg::spectral_abscissa(&a).unwrap();
    a - DMatrix::identity(n, n) * (alpha + margin)
}

fn random_orthonormal(rng: &mut ChaCha8Rng, n: usize, r: usize) -> DMatrix<f64> {
    random_matrix(rng, n, r).qr().q()
}

fn rank_one_cp(vectors: &[DVector<f64>]) -> CpVector<f64> {
    CpVector::rank_one(vectors).unwrap()
}

fn quadrature_vs_lyapunov() -> Check {
    let sys = sim::build_convdiff::<f64>(10, 0.0).map_err(e2s)?;
    let a = sys.a();
    if !linalg::is_symmetric(a, 1e-14) {
        return Err("diffusion matrix is not symmetric".into());
    }
    let c1 = sys.outputs()[0].clone();
    let c_col = c1.densify().map_err(e2s)?;
    let gram = lyapunov::solve_lyapunov_dual(a, &DMatrix::from_column_slice(c_col.len(), 1, c_col.as_slice()))
        .map_err(e2s)?;
    let err_at = |ell: usize| -> std::result::Result<f64, String> {
        let obs = kron_solver::build_observability_coefficients(
            a,
            std::slice::from_ref(&c1),
            &ObservabilityOptions {
                ell: Some(ell),
                compress: None,
                ..Default::default()
            },
        )
        .map_err(e2s)?;
        let w2 = obs.coefficients[&2].matrix_form().map_err(e2s)?;
        Ok((w2 - &gram).norm() / gram.norm())
    };
    let err40 = err_at(40)?;
    // log(err) against sqrt(ell): the slope of the fitted line should be -pi
    let ells = [4usize, 9, 16, 25];
    let pts: Vec<(f64, f64)> = ells
        .iter()
        .map(|&l| err_at(l).map(|e| ((l as f64).sqrt(), e.ln())))
        .collect::<std::result::Result<_, _>>()?;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let intercept = my - slope * mx;
    let c_fit = pts.iter().map(|p| p.1 + PI * p.0).fold(f64::MIN, f64::max).exp();
    let bounded = pts.iter().all(|p| p.1 <= (c_fit * (-PI * p.0).exp()).ln() + 1e-12);
    let slope_ok = (slope / -PI - 1.0).abs() <= 0.25;
    Ok((
        err40 <= 1e-6 && slope_ok && bounded,
        format!(
            "rel. Frobenius error at ell = 40: {err40:.3e} (tol 1e-6); fitted slope {slope:.3} vs -pi \
             (intercept {intercept:.2}), constant {c_fit:.2e}"
        ),
    ))
}

fn dense_kronecker_oracle() -> Check {
    let mut r = rng(2);
    let n = 3;
    let a = random_stable(&mut r, n, 0.5);
    let vs: Vec<_> = (0..3).map(|_| random_vector(&mut r, n)).collect();
    let rhs = rank_one_cp(&vs);
    let spectral = kron_solver::estimate_spectral_box(&a).map_err(e2s)?;
    let choice = kron_solver::choose_ell(&spectral, 3, 1e-10);
    let rule = kron_solver::quadrature_rule(choice.ell, 3, spectral.lambda_min).map_err(e2s)?;
    let w = kron_solver::solve_kron_lowrank(&a, &rhs, &rule).map_err(e2s)?.densify().map_err(e2s)?;
    // L_3(A^T) = A^T ⊗ I ⊗ I + I ⊗ A^T ⊗ I + I ⊗ I ⊗ A^T, assembled here directly
    let at = a.transpose();
    let id = DMatrix::<f64>::identity(n, n);
    let l3 = at.kronecker(&id).kronecker(&id) + id.kronecker(&at).kronecker(&id) + id.kronecker(&id).kronecker(&at);
    let b = vs[0].kronecker(&vs[1]).kronecker(&vs[2]);
    let exact = l3.lu().solve(&(-b)).ok_or("dense Kronecker sum is singular")?;
    let err = (&w - &exact).norm() / exact.norm();
    Ok((err <= 1e-7, format!("rel. error {err:.3e} (tol 1e-7), ell = {}", choice.ell)))
}

fn energy_pde_and_simulation() -> Check {
    let sys = sim::build_msd::<f64>(10, 1.0, 1.0, 1.0).map_err(e2s)?;
    let n = sys.dim();
    let obs = kron_solver::build_observability_coefficients(
        sys.a(),
        sys.outputs(),
        &ObservabilityOptions {
            tol: 1e-12,
            ..Default::default()
        },
    )
    .map_err(e2s)?;
    let e = EnergyFunction::new(obs.coefficients, SymmetryPolicy::Auto).map_err(e2s)?;
    let mut r = rng(3);
    let mut worst_pde = 0.0f64;
    for _ in 0..100 {
        let x = random_vector(&mut r, n);
        let grad = energy::eval_energy_state_gradient(&e, &x).map_err(e2s)?;
        let y = sys.output(&x).map_err(e2s)?;
        let residual = grad.dot(&(sys.a() * &x)) + 0.5 * y * y;
        let ex = energy::eval_energy(&e, &x).map_err(e2s)?;
        worst_pde = worst_pde.max(residual.abs() / (1.0 + ex.abs()));
    }
    let zero = InputSignal::zero(sys.inputs());
    let mut worst_sim = 0.0f64;
    for _ in 0..5 {
        let dir = random_vector(&mut r, n);
        let x0 = &dir * (r.random_range(0.01..0.1) / dir.norm());
        let traj = sim::simulate_with(
            &sys,
            &zero,
            (0.0, 150.0),
            5e-3,
            &SimulationOptions {
                x0: Some(x0.clone()),
                record_states: false,
            },
        )
        .map_err(e2s)?;
        let sq: Vec<f64> = traj.outputs.iter().map(|y| y * y).collect();
        let released = 0.5 * sim::trapezoid(&traj.times, &sq);
        let predicted = energy::eval_energy(&e, &x0).map_err(e2s)?;
        worst_sim = worst_sim.max((predicted - released).abs() / released.abs());
    }
    Ok((
        worst_pde <= 1e-8 && worst_sim <= 1e-3,
        format!(
            "max PDE residual / (1 + |E|) {worst_pde:.3e} (tol 1e-8); \
             max rel. deviation from simulated output energy {worst_sim:.3e} (tol 1e-3)"
        ),
    ))
}

/// `Gamma(m / 2)` for a positive integer `m`.
fn gamma_half(m: usize) -> f64 {
    if m.is_multiple_of(2) {
        (1..m / 2).map(|i| i as f64).product()
    } else {
        let mut g = PI.sqrt();
        let mut x = 0.5;
        while x + 1e-9 < m as f64 / 2.0 {
            g *= x;
            x += 1.0;
        }
        g
    }
}

/// Mean of `x^alpha` over the ball of radius `radius` in `R^n`: the sphere
/// integral `2 prod Gamma(b_i) / Gamma(sum b_i)` with `b_i = (alpha_i + 1) / 2`
/// divided by `|alpha| + n`, normalized by the ball volume.
fn ball_moment(alpha: &[usize], radius: f64) -> f64 {
    if alpha.iter().any(|a| a % 2 == 1) {
        return 0.0;
    }
    let n = alpha.len();
    let total: usize = alpha.iter().sum();
    let sphere = 2.0 * alpha.iter().map(|&a| gamma_half(a + 1)).product::<f64>() / gamma_half(total + n);
    let volume = PI.powf(n as f64 / 2.0) / gamma_half(n + 2);
    radius.powi(total as i32) * sphere / (total + n) as f64 / volume
}

/// Dense `E[x^{⊗k}]` over the ball, first slot slowest.
fn moment_tensor(n: usize, k: usize, radius: f64) -> DVector<f64> {
    let len = n.pow(k as u32);
    DVector::from_fn(len, |flat, _| {
        let mut alpha = vec![0; n];
        let mut idx = flat;
        for _ in 0..k {
            alpha[idx % n] += 1;
            idx /= n;
        }
        ball_moment(&alpha, radius)
    })
}

fn quadratic_output_energy(seed: u64, n: usize) -> std::result::Result<EnergyFunction<f64>, String> {
    let mut r = rng(seed);
    let a = random_stable(&mut r, n, 0.5);
    let c1 = rank_one_cp(&[random_vector(&mut r, n)]);
    let c2 = rank_one_cp(&[random_vector(&mut r, n), random_vector(&mut r, n)]);
    let obs = kron_solver::build_observability_coefficients(&a, &[c1, c2], &ObservabilityOptions::default())
        .map_err(e2s)?;
    EnergyFunction::new(obs.coefficients, SymmetryPolicy::Implicit).map_err(e2s)
}

fn trace_formula_oracles() -> Check {
    // (a) exact moments
    let n = 3;
    let radius = 0.8;
    let e = quadratic_output_energy(41, n)?;
    let q = random_orthonormal(&mut rng(42), n, 2);
    let ball = BallSpec::new(radius, n).map_err(e2s)?;
    let f = energy::objective_f(&e, &q, &ball).map_err(e2s)?;
    let proj = &q * q.transpose();
    let mut exact = 0.0;
    for (&k, w) in e.coefficients() {
        let mut pk = proj.clone();
        for _ in 1..k {
            pk = pk.kronecker(&proj);
        }
        exact += w.densify().map_err(e2s)?.dot(&(pk * moment_tensor(n, k, radius)));
    }
    let err_a = (f - exact).abs() / exact.abs();

    // (b) Monte Carlo over the ball
    let n = 4;
    let radius = 1.0;
    let e = quadratic_output_energy(43, n)?;
    let mut r = rng(44);
    let q = random_orthonormal(&mut r, n, 2);
    let ball = BallSpec::new(radius, n).map_err(e2s)?;
    let f_mc = energy::objective_f(&e, &q, &ball).map_err(e2s)?;
    let proj = &q * q.transpose();
    let samples = 1_000_000usize;
    let normal = rand_distr::StandardNormal;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let g = DVector::<f64>::from_fn(n, |_, _| r.sample(normal));
        let scale = radius * r.random::<f64>().powf(1.0 / n as f64) / g.norm();
        let x = &proj * (g * scale);
        let v = 2.0 * energy::eval_energy(&e, &x).map_err(e2s)?;
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / samples as f64;
    let se = ((sum_sq / samples as f64 - mean * mean) / (samples as f64 - 1.0)).sqrt();
    let z = (f_mc - mean).abs() / se;
    Ok((
        err_a <= 1e-8 && z <= 3.0,
        format!(
            "exact-moment rel. error {err_a:.3e} (tol 1e-8); Monte Carlo deviation {z:.2} standard errors \
             (tol 3, F = {f_mc:.6e}, mean {mean:.6e})"
        ),
    ))
}

fn gradient_check() -> Check {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for inst in 0..10u64 {
        let n = 3 + (inst as usize % 3);
        let r = 1 + (inst as usize % 2);
        let e = quadratic_output_energy(100 + inst, n)?;
        let mut rg = rng(200 + inst);
        let q = random_orthonormal(&mut rg, n, r);
        let ball = BallSpec::new(rg.random_range(0.5..2.0), n).map_err(e2s)?;
        let grad = energy::gradient_f(&e, &q, &ball).map_err(e2s)?;
        let f = |m: &DMatrix<f64>| energy::objective_and_gradient_unchecked(&e, m, &ball).map(|v| v.0);
        let mut fd = DMatrix::zeros(n, r);
        for i in 0..n {
            for j in 0..r {
                let mut qp = q.clone();
                qp[(i, j)] += h;
                let mut qm = q.clone();
                qm[(i, j)] -= h;
                fd[(i, j)] = (f(&qp).map_err(e2s)? - f(&qm).map_err(e2s)?) / (2.0 * h);
            }
        }
        worst = worst.max((&grad - &fd).norm() / fd.norm());
    }
    Ok((worst <= 1e-5, format!("max rel. gradient error {worst:.3e} over 10 instances (tol 1e-5)")))
}

fn bt_equivalence() -> Check {
    let mut r = rng(6);
    let n = 40;
    let a = random_stable(&mut r, n, 0.3);
    let b = random_matrix(&mut r, n, 1);
    let c1 = rank_one_cp(&[random_vector(&mut r, n)]);
    let sys = LpoSystem::new(a, b, vec![c1]).map_err(e2s)?;
    let bt = mor::balanced_truncation(&sys, 6).map_err(e2s)?;
    let omegas = logspace(1e-2, 1e2, 20);
    let h_bt = bt.reduced.frequency_response(&omegas).map_err(e2s)?;
    let mut worst = 0.0f64;
    for radius in [0.01, 1.0, 100.0] {
        let opts = EnergyReduceOptions {
            tol: 1e-12,
            ..Default::default()
        };
        let rom = mor::energy_based_reduce_with(&sys, 6, radius, &opts).map_err(e2s)?;
        let h = rom.reduced.frequency_response(&omegas).map_err(e2s)?;
        worst = worst.max(frequency_response_error(&h_bt, &h));
    }
    Ok((
        worst <= 1e-8,
        format!("max rel. transfer-function deviation from BT {worst:.3e} over L in {{0.01, 1, 100}} (tol 1e-8)"),
    ))
}

/// Iteration budget of the subspace optimization in the benchmark runs.
const BENCH_MAX_ITERS: usize = 250;

fn msd_experiment() -> Check {
    let sys = sim::build_msd::<f64>(25, 1.0, 1.0, 1.0).map_err(e2s)?;
    let u = InputSignal::msd(sys.inputs());
    let span = (0.0, 20.0);
    let fom = sim::simulate(&sys, &u, span, sim::DEFAULT_DT).map_err(e2s)?;
    let scale = sim::linf_norm(&fom);
    let rel_err = |rom: &LpoSystem<f64>| -> std::result::Result<f64, String> {
        let tr = sim::simulate(rom, &u, span, sim::DEFAULT_DT).map_err(e2s)?;
        Ok(sim::error_metrics(&fom, &tr).map_err(e2s)?.linf / scale)
    };
    let qobt = mor::qobt_reduce(&sys, 10).map_err(e2s)?;
    let mut ok = qobt.provenance.stable;
    let mut parts = vec![format!(
        "QOBT {} err {:.2e}",
        if qobt.provenance.stable { "stable" } else { "UNSTABLE" },
        rel_err(&qobt.reduced)?
    )];
    let opts = EnergyReduceOptions {
        optimizer: OptimizerConfig {
            max_iters: BENCH_MAX_ITERS,
            ..Default::default()
        },
        ..Default::default()
    };
    let inn = mor::input_normal_energy(&sys, &opts).map_err(e2s)?;
    for radius in [0.01, 0.1, 1.0] {
        let rom = mor::energy_based_reduce_from(&sys, &inn, 10, radius, &opts).map_err(e2s)?;
        let err = rel_err(&rom.reduced)?;
        ok &= rom.provenance.stable && err <= 1e-2;
        parts.push(format!(
            "L={radius} {} err {err:.2e}",
            if rom.provenance.stable { "stable" } else { "UNSTABLE" }
        ));
    }
    Ok((ok, format!("{} (tol 1e-2 relative L-inf)", parts.join(", "))))
}

fn convdiff_experiment(g: usize) -> Check {
    let sys = sim::build_convdiff::<f64>(g, 1.0).map_err(e2s)?;
    let u = InputSignal::convdiff(sys.inputs());
    let span = (0.0, 10.0);
    let dt = 5e-4;
    let fom = sim::simulate(&sys, &u, span, dt).map_err(e2s)?;
    let opts = EnergyReduceOptions {
        optimizer: OptimizerConfig {
            max_iters: BENCH_MAX_ITERS,
            ..Default::default()
        },
        ..Default::default()
    };
    let r = 15;
    let inn = mor::input_normal_energy(&sys, &opts).map_err(e2s)?;
    let rom = mor::energy_based_reduce_from(&sys, &inn, r, 1.0, &opts).map_err(e2s)?;
    let tr = sim::simulate(&rom.reduced, &u, span, dt).map_err(e2s)?;
    let err = sim::error_metrics(&fom, &tr).map_err(e2s)?.linf / sim::linf_norm(&fom);
    let big_r = sys.outputs().iter().map(|c| c.rank()).max().unwrap_or(1);
    let mut ranks_ok = true;
    let mut ranks = Vec::new();
    for rep in &inn.reports {
        let kappa = rep.k / 2;
        let bound = (2 * rep.ell + 1) * ((kappa.max(1) - 1) * big_r * big_r + big_r);
        ranks_ok &= rep.rank <= bound;
        ranks.push(format!("w{}: {} <= {}", rep.k, rep.rank, bound));
    }
    Ok((
        rom.provenance.stable && err <= 1e-2 && ranks_ok,
        format!(
            "n = {}, ROM {}, rel. L-inf error {err:.3e} (tol 1e-2), ranks [{}]",
            sys.dim(),
            if rom.provenance.stable { "stable" } else { "UNSTABLE" },
            ranks.join(", ")
        ),
    ))
}

fn property_suites() -> Check {
    let config = Config {
        cases: 100,
        failure_persistence: None,
        ..Config::default()
    };
    let runner = || TestRunner::new_with_rng(config.clone(), TestRng::from_seed(RngAlgorithm::ChaCha, &[9; 32]));
    let mut failures = Vec::new();
    let mut count = 0;
    let mut record = |name: &str, res: std::result::Result<(), String>| {
        count += 1;
        if let Err(e) = res {
            failures.push(format!("{name}: {e}"));
        }
    };

    // symmetrization leaves the polynomial unchanged
    record(
        "cp symmetrization",
        runner()
            .run(&(any::<u64>(), 1usize..5, 1usize..4), |(seed, k, n)| {
                let mut r = rng(seed);
                let vs: Vec<_> = (0..k).map(|_| random_vector(&mut r, n)).collect();
                let c = rank_one_cp(&vs);
                let x = random_vector(&mut r, n);
                let (a, b) = (c.eval(&x).unwrap(), c.symmetrize().eval(&x).unwrap());
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
                Ok(())
            })
            .map_err(e2s),
    );
    // Lyapunov residual
    record(
        "lyapunov residual",
        runner()
            .run(&(any::<u64>(), 1usize..8), |(seed, n)| {
                let mut r = rng(seed);
                let a = random_stable(&mut r, n, 0.2);
                let b = random_matrix(&mut r, n, 2);
                let c = &b * b.transpose();
                let p = lyapunov::solve_lyapunov_general(&a, &c).unwrap();
                prop_assert!(lyapunov::lyapunov_residual(&a, &p, &c) <= 1e-9 * (1.0 + c.norm()));
                Ok(())
            })
            .map_err(e2s),
    );
    // tangent projection and retraction
    record(
        "stiefel geometry",
        runner()
            .run(&(any::<u64>(), 2usize..7, 0.0f64..2.0), |(seed, n, t)| {
                let mut r = rng(seed);
                let k = 1 + (seed as usize % n);
                let q = StiefelPoint::new(random_orthonormal(&mut r, n, k)).unwrap();
                let xi = stiefel::tangent_project(q.matrix(), &random_matrix(&mut r, n, k)).unwrap();
                let skew = q.matrix().transpose() * &xi + xi.transpose() * q.matrix();
                prop_assert!(skew.norm() <= 1e-12);
                let moved = stiefel::retract_qr(&q, &xi, t).unwrap();
                prop_assert!(linalg::orthonormality_defect(moved.matrix()) <= 1e-10);
                Ok(())
            })
            .map_err(e2s),
    );
    // energy: trace polynomial is invariant under rotations within the span
    record(
        "objective span invariance",
        runner()
            .run(&(any::<u64>(), 2usize..5), |(seed, n)| {
                let e = quadratic_output_energy(seed, n).unwrap();
                let mut r = rng(seed ^ 1);
                let k = 1 + (seed as usize % n);
                let q = random_orthonormal(&mut r, n, k);
                let rot = random_orthonormal(&mut r, k, k);
                let ball = BallSpec::new(1.0, n).unwrap();
                let f1 = energy::objective_f(&e, &q, &ball).unwrap();
                let f2 = energy::objective_f(&e, &(&q * rot), &ball).unwrap();
                prop_assert!((f1 - f2).abs() <= 1e-10 * (1.0 + f1.abs()));
                Ok(())
            })
            .map_err(e2s),
    );
    // oblique projection identities
    record(
        "projection identities",
        runner()
            .run(&(any::<u64>(), 3usize..8), |(seed, n)| {
                let mut r = rng(seed);
                let a = random_stable(&mut r, n, 0.5);
                let b = random_matrix(&mut r, n, 1);
                let c1 = rank_one_cp(&[random_vector(&mut r, n)]);
                let c2 = rank_one_cp(&[random_vector(&mut r, n), random_vector(&mut r, n)]);
                let sys = LpoSystem::new(a, b, vec![c1, c2]).unwrap();
                let rom = mor::qobt_reduce(&sys, 1 + seed as usize % (n - 1)).unwrap();
                prop_assert!(rom.biorthogonality_defect() <= 1e-10);
                let id = DMatrix::<f64>::identity(n, n);
                let pg = rom.w.transpose() * (id - &rom.v * rom.w.transpose());
                prop_assert!(pg.norm() <= 1e-10 * (1.0 + rom.w.norm() * rom.v.norm() * rom.w.norm()));
                prop_assert!((rom.reduced.a() - rom.w.transpose() * sys.a() * &rom.v).norm() <= 1e-12 * (1.0 + sys.a().norm()));
                Ok(())
            })
            .map_err(e2s),
    );
    // simulation: linear superposition for a linear output
    record(
        "simulation linearity",
        runner()
            .run(&(any::<u64>(), 1usize..5, -2.0f64..2.0), |(seed, n, alpha)| {
                let mut r = rng(seed);
                let sys = LpoSystem::new(
                    random_stable(&mut r, n, 0.5),
                    random_matrix(&mut r, n, 1),
                    vec![rank_one_cp(&[random_vector(&mut r, n)])],
                )
                .unwrap();
                let u1 = InputSignal::step(1, 1.0);
                let u2 = InputSignal::step(1, alpha);
                let y1 = sim::simulate(&sys, &u1, (0.0, 1.0), 1e-2).unwrap();
                let y2 = sim::simulate(&sys, &u2, (0.0, 1.0), 1e-2).unwrap();
                for (a, b) in y1.outputs.iter().zip(&y2.outputs) {
                    prop_assert!((alpha * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                }
                Ok(())
            })
            .map_err(e2s),
    );
    // serialization round trip
    record(
        "json round trip",
        runner()
            .run(&(any::<u64>(), 1usize..4, 1usize..4), |(seed, k, n)| {
                let mut r = rng(seed);
                let c = CpVector::from_factors((0..k).map(|_| random_matrix(&mut r, n, 2)).collect()).unwrap();
                let text = serde_json::to_string(&io::CpJson::from_cp(&c)).unwrap();
                let back: CpVector<f64> = serde_json::from_str::<io::CpJson>(&text).unwrap().to_cp().unwrap();
                let (a, b) = (back.densify().unwrap(), c.densify().unwrap());
                prop_assert!((a - &b).norm() <= 1e-15 * b.norm());
                Ok(())
            })
            .map_err(e2s),
    );
    Ok((
        failures.is_empty(),
        if failures.is_empty() {
            format!("{count} suites x 100 cases passed")
        } else {
            failures.join("; ")
        },
    ))
}

// Runs without the libtest harness so the report is never captured.
fn main() {
    let mut lines = vec![
        run(1, "quadrature vs Lyapunov", 10, quadrature_vs_lyapunov),
        run(2, "dense Kronecker oracle", 1, dense_kronecker_oracle),
        run(3, "energy PDE and simulation", 30, energy_pde_and_simulation),
        run(4, "trace formula oracles", 60, trace_formula_oracles),
        run(5, "gradient check", 30, gradient_check),
        run(6, "BT equivalence", 60, bt_equivalence),
        run(7, "mass-spring-damper", 300, msd_experiment),
        run(8, "convection-diffusion", 600, || convdiff_experiment(20)),
        run(9, "property suites", 600, property_suites),
    ];
    if std::env::var_os("LPO_MOR_FULL_CONVDIFF").is_some() {
        lines.push(run(8, "convection-diffusion, n = 2025", 3600, || convdiff_experiment(45)));
    }
    println!();
    for l in &lines {
        println!(
            "{} criterion {} ({}): {} [{:.1}s of {}s]",
            if l.passed { "PASS" } else { "FAIL" },
            l.id,
            l.title,
            l.detail,
            l.elapsed.as_secs_f64(),
            l.budget.as_secs()
        );
    }
    let failed: Vec<_> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all {} criteria passed", lines.len());
}

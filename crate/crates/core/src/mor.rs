//! Projection-based reduction: balanced truncation, quadratic-output
//! balanced truncation and energy-based reduction of LPO systems.

use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use crate::cp_tensor::CpVector;
use crate::energy::{self, BallSpec, EnergyFunction, SymmetryPolicy};
use crate::error::{Error, Result};
use crate::kron_solver::{self, DegreeReport, ObservabilityOptions};
use crate::linalg;
use crate::lyapunov;
use crate::scalar::Real;
use crate::stiefel::{self, OptimizerConfig, StiefelPoint};
use crate::system::LpoSystem;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "BT")]
    Bt,
    #[serde(rename = "QOBT")]
    Qobt,
    EnergyBased,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerStats {
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub stalled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: Method,
    pub r: usize,
    /// Radius `L` of the averaging ball (energy-based only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Singular values of the balanced Gramian pair (BT and QOBT only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hankel_singular_values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerStats>,
    /// Quadrature parameter used per energy degree (energy-based only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub quadrature: Vec<(usize, usize)>,
    pub spectral_abscissa: f64,
    pub stable: bool,
}

#[derive(Clone, Debug)]
pub struct ReducedModel<T: Real> {
    pub v: DMatrix<T>,
    pub w: DMatrix<T>,
    pub reduced: LpoSystem<T>,
    pub provenance: Provenance,
}

impl<T: Real> ReducedModel<T> {
    pub fn order(&self) -> usize {
        self.reduced.dim()
    }

    /// `||W^T V - I||_F`.
    pub fn biorthogonality_defect(&self) -> T {
        let r = self.v.ncols();
        (self.w.tr_mul(&self.v) - DMatrix::identity(r, r)).norm()
    }
}

fn check_order<T: Real>(sys: &LpoSystem<T>, r: usize) -> Result<()> {
    if r == 0 || r > sys.dim() {
        return Err(Error::InvalidArgument(format!(
            "reduced order must lie in 1..={}, got {r}",
            sys.dim()
        )));
    }
    Ok(())
}

/// `A_r = W^T A V`, `B_r = W^T B`, `c_k -> (V^T ⊗ .. ⊗ V^T) c_k`.
pub fn project_lpo<T: Real>(sys: &LpoSystem<T>, v: &DMatrix<T>, w: &DMatrix<T>) -> Result<LpoSystem<T>> {
    let n = sys.dim();
    if v.nrows() != n || w.shape() != v.shape() {
        return Err(Error::Dimension(format!(
            "V is {}x{}, W is {}x{}, system has n = {n}",
            v.nrows(),
            v.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    let r = v.ncols();
    let defect = (w.tr_mul(v) - DMatrix::identity(r, r)).norm();
    if defect > T::tol(1e-8) {
        return Err(Error::InvalidArgument(format!(
            "projection is not biorthogonal: ||W^T V - I||_F = {:.3e}",
            defect.to_f64_lossy()
        )));
    }
    let a = w.tr_mul(&(sys.a() * v));
    let b = w.tr_mul(sys.b());
    let vt = v.transpose();
    let outputs = sys
        .outputs()
        .iter()
        .map(|c| c.apply_all(&vt))
        .collect::<Result<Vec<_>>>()?;
    LpoSystem::new_unchecked(a, b, outputs)
}

/// A factor `Z` with `Z Z^T = X` for a symmetric positive semidefinite `X`.
fn gramian_factor<T: Real>(x: &DMatrix<T>) -> DMatrix<T> {
    lyapunov::cholesky_spd(x).unwrap_or_else(|_| linalg::psd_factor(x))
}

/// Square-root balancing of `P = Zc Zc^T` and `Q = Zo Zo^T`. Returns
/// `(V, W, sigma)` with all singular values of `Zo^T Zc` in descending order.
pub fn square_root_balance<T: Real>(
    zc: &DMatrix<T>,
    zo: &DMatrix<T>,
    r: usize,
) -> Result<(DMatrix<T>, DMatrix<T>, Vec<T>)> {
    let m = zo.tr_mul(zc);
    let svd = SVD::new(m, true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let vt = svd.v_t.as_ref().ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sigma: Vec<T> = order.iter().map(|&i| svd.singular_values[i]).collect();
    if r > sigma.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {r} states from {} singular values",
            sigma.len()
        )));
    }
    if !(sigma[r - 1] > sigma[0] * T::default_epsilon()) {
        return Err(Error::Numerical(format!(
            "singular value {r} vanishes; the system is not minimal at this order"
        )));
    }
    if r < sigma.len() && sigma[r - 1] - sigma[r] <= T::tol(1e-10) * sigma[0] {
        log::warn!(
            "no gap between singular values {r} and {}: {:.6e} vs {:.6e}",
            r + 1,
            sigma[r - 1].to_f64_lossy(),
            sigma[r].to_f64_lossy()
        );
    }
    let n = zc.nrows();
    let mut v = DMatrix::zeros(n, r);
    let mut w = DMatrix::zeros(n, r);
    for (col, &i) in order.iter().take(r).enumerate() {
        let s = sigma[col].sqrt();
        let y = vt.row(i).transpose();
        v.set_column(col, &((zc * y) / s));
        w.set_column(col, &((zo * u.column(i)) / s));
    }
    Ok((v, w, sigma))
}

fn finish<T: Real>(
    sys: &LpoSystem<T>,
    v: DMatrix<T>,
    w: DMatrix<T>,
    mut provenance: Provenance,
) -> Result<ReducedModel<T>> {
    let reduced = project_lpo(sys, &v, &w)?;
    let abscissa = reduced.spectral_abscissa()?;
    provenance.spectral_abscissa = abscissa.to_f64_lossy();
    provenance.stable = abscissa < T::zero();
    if !provenance.stable {
        log::warn!(
            "reduced model of order {} is not asymptotically stable (abscissa {:.3e})",
            provenance.r,
            provenance.spectral_abscissa
        );
    }
    Ok(ReducedModel {
        v,
        w,
        reduced,
        provenance,
    })
}

fn to_f64_vec<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

fn require_linear<T: Real>(sys: &LpoSystem<T>) -> Result<()> {
    if sys.degree() != 1 {
        return Err(Error::InvalidArgument(format!(
            "balanced truncation needs a linear output (d = 1), got d = {}",
            sys.degree()
        )));
    }
    Ok(())
}

/// Hankel singular values of a system with linear output.
pub fn hankel_singular_values<T: Real>(sys: &LpoSystem<T>) -> Result<Vec<T>> {
    require_linear(sys)?;
    let (zc, zo) = linear_gramian_factors(sys)?;
    let sv = SVD::new(zo.tr_mul(&zc), false, false).singular_values;
    let mut s: Vec<T> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    Ok(s)
}

fn linear_gramian_factors<T: Real>(sys: &LpoSystem<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let p = lyapunov::solve_lyapunov_general(sys.a(), &(sys.b() * sys.b().transpose()))?;
    let c = sys.linear_output_row()?.transpose();
    let q = lyapunov::solve_lyapunov_dual(sys.a(), &c)?;
    Ok((gramian_factor(&p), gramian_factor(&q)))
}

pub fn balanced_truncation<T: Real>(sys: &LpoSystem<T>, r: usize) -> Result<ReducedModel<T>> {
    require_linear(sys)?;
    check_order(sys, r)?;
    let (zc, zo) = linear_gramian_factors(sys)?;
    let (v, w, sigma) = square_root_balance(&zc, &zo, r)?;
    finish(
        sys,
        v,
        w,
        Provenance {
            method: Method::Bt,
            r,
            radius: None,
            hankel_singular_values: to_f64_vec(&sigma),
            optimizer: None,
            quadrature: Vec::new(),
            spectral_abscissa: 0.0,
            stable: false,
        },
    )
}

/// Controllability Gramian `P` and the quadratic-output Gramian `Q` with
/// `A^T Q + Q A + M P M + c_1 c_1^T = 0`, where `M` is the symmetric
/// matrix of the quadratic output.
pub fn qobt_gramians<T: Real>(sys: &LpoSystem<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
    if sys.degree() > 2 {
        return Err(Error::InvalidArgument(format!(
            "QOBT supports outputs of degree at most 2, got d = {}",
            sys.degree()
        )));
    }
    let p = lyapunov::solve_lyapunov_general(sys.a(), &(sys.b() * sys.b().transpose()))?;
    let c1 = sys.linear_output_row()?.transpose();
    let mut rhs = &c1 * c1.transpose();
    if let Some(c2) = sys.output_coefficient(2) {
        let m = linalg::symmetric_part(&c2.matrix_form()?);
        rhs += &m * &p * &m;
    }
    let q = lyapunov::solve_lyapunov_general(&sys.a().transpose(), &rhs)?;
    Ok((p, q))
}

pub fn qobt_reduce<T: Real>(sys: &LpoSystem<T>, r: usize) -> Result<ReducedModel<T>> {
    check_order(sys, r)?;
    let (p, q) = qobt_gramians(sys)?;
    let (v, w, sigma) = square_root_balance(&gramian_factor(&p), &gramian_factor(&q), r)?;
    finish(
        sys,
        v,
        w,
        Provenance {
            method: Method::Qobt,
            r,
            radius: None,
            hankel_singular_values: to_f64_vec(&sigma),
            optimizer: None,
            quadrature: Vec::new(),
            spectral_abscissa: 0.0,
            stable: false,
        },
    )
}

#[derive(Clone, Debug)]
pub struct EnergyReduceOptions<T: Real> {
    pub optimizer: OptimizerConfig,
    /// Accuracy target for the energy coefficients.
    pub tol: T,
    /// Fixed quadrature parameter instead of the a-priori choice.
    pub ell: Option<usize>,
    pub symmetry: SymmetryPolicy,
    /// Starting basis (n x r) in input-normal coordinates; defaults to the
    /// leading eigenvectors of the transformed quadratic coefficient.
    pub initial: Option<DMatrix<T>>,
}

impl<T: Real> Default for EnergyReduceOptions<T> {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            tol: T::tol(1e-8),
            ell: None,
            symmetry: SymmetryPolicy::Auto,
            initial: None,
        }
    }
}

/// Relative floor for the eigenvalues of the controllability Gramian.
/// Directions below it are numerically uncontrollable; they are kept with
/// the floor as eigenvalue so that the factor stays invertible.
pub const GRAMIAN_FLOOR: f64 = 1e-13;

/// Invertible factor `Z` of the controllability Gramian, `Z Z^T ≈ P`, with
/// its inverse. `Z` is the Cholesky factor when `P` is well conditioned and
/// a floored eigenfactor otherwise.
#[derive(Clone, Debug)]
pub struct ControllabilityFactor<T: Real> {
    pub z: DMatrix<T>,
    pub inverse: DMatrix<T>,
    pub cholesky: bool,
    /// Number of eigenvalues above the floor.
    pub numerical_rank: usize,
}

pub fn controllability_factor<T: Real>(sys: &LpoSystem<T>) -> Result<ControllabilityFactor<T>> {
    let p = lyapunov::solve_lyapunov_general(sys.a(), &(sys.b() * sys.b().transpose()))?;
    let n = sys.dim();
    let threshold = T::tol(GRAMIAN_FLOOR);
    if let Ok(r) = lyapunov::cholesky_spd(&p) {
        let dmax = r.diagonal().iter().fold(T::zero(), |m, &v| m.max(v));
        let dmin = r.diagonal().iter().fold(dmax, |m, &v| m.min(v));
        if dmin * dmin > threshold * dmax * dmax {
            if let Some(inv) = r.solve_lower_triangular(&DMatrix::identity(n, n)) {
                return Ok(ControllabilityFactor {
                    z: r,
                    inverse: inv,
                    cholesky: true,
                    numerical_rank: n,
                });
            }
        }
    }
    let (values, vectors) = linalg::symmetric_eigen_desc(&p);
    let top = values[0];
    if !(top > T::zero()) {
        return Err(Error::NotPositiveDefinite);
    }
    let floor = threshold * top;
    let numerical_rank = values.iter().take_while(|&&v| v > floor).count();
    if numerical_rank < n {
        log::info!(
            "controllability Gramian has numerical rank {numerical_rank} of {n}; \
             the remaining eigenvalues are raised to {:.3e}",
            floor.to_f64_lossy()
        );
    }
    let mut z = vectors.clone();
    let mut inverse = vectors.transpose();
    for j in 0..n {
        let s = values[j].max(floor).sqrt();
        z.column_mut(j).scale_mut(s);
        inverse.row_mut(j).unscale_mut(s);
    }
    Ok(ControllabilityFactor {
        z,
        inverse,
        cholesky: false,
        numerical_rank,
    })
}

/// Energy function in input-normal coordinates `x = Z x~`.
#[derive(Clone, Debug)]
pub struct InputNormalEnergy<T: Real> {
    pub factor: ControllabilityFactor<T>,
    pub energy: EnergyFunction<T>,
    /// Per-degree quadrature and rank records of the original coefficients.
    pub reports: Vec<DegreeReport>,
}

pub fn input_normal_energy<T: Real>(
    sys: &LpoSystem<T>,
    opts: &EnergyReduceOptions<T>,
) -> Result<InputNormalEnergy<T>> {
    let factor = controllability_factor(sys)?;
    let obs = kron_solver::build_observability_coefficients(
        sys.a(),
        sys.outputs(),
        &ObservabilityOptions {
            tol: opts.tol,
            ell: opts.ell,
            even_only: true,
            ..Default::default()
        },
    )?;
    let e = EnergyFunction::new(obs.coefficients, opts.symmetry)?;
    let energy = energy::to_input_normal(&e, &factor.z, &[])?.0.merge_permuted_terms();
    Ok(InputNormalEnergy {
        factor,
        energy,
        reports: obs.reports,
    })
}

/// `Y` with `w = vec(Y Y^T)` when every term of the order-2 vector `w` is
/// `weight u ⊗ u` with a nonnegative weight.
fn gram_factor<T: Real>(w: &CpVector<T>) -> Option<DMatrix<T>> {
    let pool = w.pool();
    let mut y = DMatrix::zeros(w.dim(), w.rank());
    for j in 0..w.rank() {
        let t = w.term(j);
        let weight = w.weights()[j];
        if t[0] != t[1] || weight < T::zero() {
            return None;
        }
        y.column_mut(j).copy_from(&(pool.column(t[0] as usize) * weight.sqrt()));
    }
    Some(y)
}

/// Leading `r` eigenvectors of the symmetric part of the quadratic
/// coefficient. When the coefficient is a sum of weighted squares, the left
/// singular vectors of its factor are used instead; they resolve small
/// eigenvalue gaps to full precision.
pub fn leading_quadratic_subspace<T: Real>(e: &EnergyFunction<T>, r: usize) -> Result<DMatrix<T>> {
    let w2 = e
        .coefficient(2)
        .ok_or_else(|| Error::InvalidArgument("energy function has no quadratic part".into()))?;
    if let Some(y) = gram_factor(w2).filter(|y| y.ncols() >= r) {
        let svd = SVD::new(y, true, false);
        let u = svd
            .u
            .ok_or_else(|| Error::Numerical("SVD of the quadratic factor failed".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .partial_cmp(&svd.singular_values[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        return Ok(DMatrix::from_fn(u.nrows(), r, |i, j| u[(i, order[j])]));
    }
    let m = linalg::symmetric_part(&w2.matrix_form()?);
    let (_, vecs) = linalg::symmetric_eigen_desc(&m);
    Ok(vecs.columns(0, r).clone_owned())
}

pub fn energy_based_reduce<T: Real>(
    sys: &LpoSystem<T>,
    r: usize,
    radius: T,
    cfg: &OptimizerConfig,
    tol: T,
) -> Result<ReducedModel<T>> {
    let opts = EnergyReduceOptions {
        optimizer: cfg.clone(),
        tol,
        ..Default::default()
    };
    energy_based_reduce_with(sys, r, radius, &opts)
}

pub fn energy_based_reduce_with<T: Real>(
    sys: &LpoSystem<T>,
    r: usize,
    radius: T,
    opts: &EnergyReduceOptions<T>,
) -> Result<ReducedModel<T>> {
    check_order(sys, r)?;
    let inn = input_normal_energy(sys, opts)?;
    energy_based_reduce_from(sys, &inn, r, radius, opts)
}

/// Reduction from a precomputed input-normal energy, so that several radii
/// can share one energy computation. `opts.tol`, `ell` and `symmetry` are
/// not used here.
pub fn energy_based_reduce_from<T: Real>(
    sys: &LpoSystem<T>,
    inn: &InputNormalEnergy<T>,
    r: usize,
    radius: T,
    opts: &EnergyReduceOptions<T>,
) -> Result<ReducedModel<T>> {
    check_order(sys, r)?;
    if inn.factor.z.nrows() != sys.dim() {
        return Err(Error::Dimension(format!(
            "energy was computed for dimension {}, system has {}",
            inn.factor.z.nrows(),
            sys.dim()
        )));
    }
    let n = sys.dim();
    let ball = BallSpec::new(radius, n)?;
    if r > inn.factor.numerical_rank {
        log::warn!(
            "reduced order {r} exceeds the numerical rank {} of the controllability Gramian",
            inn.factor.numerical_rank
        );
    }
    let q0 = match &opts.initial {
        Some(q) => StiefelPoint::from_span(q)?,
        None => StiefelPoint::new(leading_quadratic_subspace(&inn.energy, r)?)?,
    };
    if q0.matrix().shape() != (n, r) {
        return Err(Error::Dimension(format!(
            "initial basis is {}x{}, expected {n}x{r}",
            q0.matrix().nrows(),
            q0.matrix().ncols()
        )));
    }
    let res = stiefel::maximize_on_stiefel(
        |q| energy::objective_and_gradient_unchecked(&inn.energy, q, &ball),
        q0,
        &opts.optimizer,
    )?;
    let q = res.point.matrix();
    let v = &inn.factor.z * q;
    let w = inn.factor.inverse.tr_mul(q);
    finish(
        sys,
        v,
        w,
        Provenance {
            method: Method::EnergyBased,
            r,
            radius: Some(radius.to_f64_lossy()),
            hankel_singular_values: Vec::new(),
            optimizer: Some(OptimizerStats {
                iterations: res.iterations,
                initial_objective: res.initial_value().to_f64_lossy(),
                final_objective: res.final_value().to_f64_lossy(),
                grad_norm: res.grad_norm.to_f64_lossy(),
                converged: res.converged,
                stalled: res.stalled,
            }),
            quadrature: inn.reports.iter().map(|rep| (rep.k, rep.ell)).collect(),
            spectral_abscissa: 0.0,
            stable: false,
        },
    )
}

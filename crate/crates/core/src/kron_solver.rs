//! Low-rank solution of Kronecker-sum systems `L_k(A^T) w = -C_k` by sinc
//! quadrature of the integral representation of the inverse, and assembly
//! of the observability energy coefficients of an LPO system.
//!
//! `L_k(M) = sum_j I ⊗ .. ⊗ M ⊗ .. ⊗ I` with `M` in slot `j`. For stable `M`,
//! `-L_k(M)^{-1} = int_0^inf exp(t M) ⊗ .. ⊗ exp(t M) dt`, and the
//! quadrature turns this into a weighted sum of factor-wise exponential
//! actions, so a CP right-hand side of rank `R` yields a CP solution of
//! rank at most `(2 ell + 1) R`.
//!
//! Right-hand sides are stored with a positive sign; the minus sign of the
//! equation is applied inside [`solve_kron_lowrank`].

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Complex, DMatrix};
use rayon::prelude::*;

use crate::cp_tensor::CpVector;
use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, Eigendecomposition};
use crate::scalar::Real;

/// Upper limit for the automatically chosen quadrature parameter.
pub const ELL_MAX: usize = 200;

/// Eigenvector condition number above which the exponential action falls
/// back to dense matrix exponentials.
pub const CONDITION_FALLBACK: f64 = 1e8;

/// Nodes `alpha_i` and weights `omega_i`, `i = -ell..=ell`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule<T: Real> {
    pub ell: usize,
    pub k: usize,
    pub lambda_min: T,
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

pub fn quadrature_rule<T: Real>(ell: usize, k: usize, lambda_min: T) -> Result<QuadratureRule<T>> {
    if ell == 0 {
        return Err(Error::InvalidArgument("quadrature parameter ell must be at least 1".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("Kronecker order k must be at least 1".into()));
    }
    if !(lambda_min > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "lambda_min must be positive, got {}",
            lambda_min.to_f64_lossy()
        )));
    }
    let h = PI / (ell as f64).sqrt();
    let scale = k as f64 * lambda_min.to_f64_lossy();
    let mut nodes = Vec::with_capacity(2 * ell + 1);
    let mut weights = Vec::with_capacity(2 * ell + 1);
    for i in -(ell as i64)..=(ell as i64) {
        let ih = i as f64 * h;
        nodes.push(T::lit(ih.exp().asinh() / scale));
        weights.push(T::lit(h / ((1.0 + (-2.0 * ih).exp()).sqrt() * scale)));
    }
    Ok(QuadratureRule {
        ell,
        k,
        lambda_min,
        nodes,
        weights,
    })
}

/// Bounds on the spectrum `Λ(A) ⊂ [-lambda_max, -lambda_min] + i[-mu, mu]`
/// and the eigenvector condition number.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBox<T: Real> {
    pub lambda_min: T,
    pub lambda_max: T,
    pub mu: T,
    pub kappa_x: T,
    pub symmetric: bool,
}

impl<T: Real> SpectralBox<T> {
    pub fn from_eigendecomposition(eig: &Eigendecomposition<T>) -> Result<Self> {
        linalg::ensure_stable(&eig.values)?;
        let mut lambda_min = T::lit(f64::INFINITY);
        let mut lambda_max = T::zero();
        let mut mu = T::zero();
        for v in &eig.values {
            lambda_min = lambda_min.min(-v.re);
            lambda_max = lambda_max.max(-v.re);
            mu = mu.max(v.im.abs());
        }
        Ok(Self {
            lambda_min,
            lambda_max,
            mu,
            kappa_x: eig.condition.max(T::one()),
            symmetric: eig.symmetric,
        })
    }
}

pub fn estimate_spectral_box<T: Real>(a: &DMatrix<T>) -> Result<SpectralBox<T>> {
    let values = linalg::eigenvalues(a)?;
    linalg::ensure_stable(&values)?;
    SpectralBox::from_eigendecomposition(&Eigendecomposition::new(a)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EllChoice {
    pub ell: usize,
    /// The bound could not be met within [`ELL_MAX`].
    pub capped: bool,
}

/// Smallest `ell` with
/// `kappa_x^k / (k lambda_min) * exp(mu / (lambda_min pi)) * exp(-pi sqrt(ell)) <= tol`.
pub fn choose_ell<T: Real>(spectral: &SpectralBox<T>, k: usize, tol: T) -> EllChoice {
    let lam = spectral.lambda_min.to_f64_lossy();
    let kappa = spectral.kappa_x.to_f64_lossy().max(1.0);
    let mu = spectral.mu.to_f64_lossy();
    let tol = tol.to_f64_lossy();
    let log_const = k as f64 * kappa.ln() - (k as f64 * lam).ln() + mu / (lam * PI);
    let root = (log_const - tol.ln()) / PI;
    if !root.is_finite() || !(tol > 0.0) {
        return EllChoice {
            ell: ELL_MAX,
            capped: true,
        };
    }
    let mut ell = if root <= 0.0 {
        1
    } else {
        (root * root).ceil().max(1.0) as usize
    };
    // guard against the ceiling landing one short through roundoff
    while ell < ELL_MAX && log_const - PI * (ell as f64).sqrt() > tol.ln() {
        ell += 1;
    }
    if ell > ELL_MAX {
        log::warn!("quadrature bound needs ell = {ell}; capping at {ELL_MAX}");
        return EllChoice {
            ell: ELL_MAX,
            capped: true,
        };
    }
    EllChoice { ell, capped: false }
}

/// Number of slots of `C_k` and the rank bound `(kappa - 1) R^2 + R`
/// (`1` for `k = 2`).
pub fn rhs_rank_bound(k: usize, r: usize) -> usize {
    if k <= 2 {
        1
    } else {
        let kappa = k / 2;
        (kappa - 1) * r * r + r
    }
}

/// Minimal right-hand side: `2 sum_{i<k/2} c_i ⊗ c_{k-i}` plus `c_{k/2} ⊗ c_{k/2}`
/// for even `k`. Defines the same polynomial as `sum_{i=1}^{k-1} c_i ⊗ c_{k-i}`
/// and agrees with it after symmetrization.
///
/// `outputs[i - 1]` is `c_i`; a missing or zero-rank entry counts as zero.
pub fn assemble_rhs<T: Real>(outputs: &[CpVector<T>], k: usize) -> Result<CpVector<T>> {
    let d = outputs.len();
    if d == 0 {
        return Err(Error::InvalidArgument("no output coefficients supplied".into()));
    }
    if k < 2 || k > 2 * d {
        return Err(Error::InvalidArgument(format!(
            "degree k = {k} outside 2..={}",
            2 * d
        )));
    }
    let n = outputs[0].dim();
    for (i, c) in outputs.iter().enumerate() {
        if c.order() != i + 1 || c.dim() != n {
            return Err(Error::Dimension(format!(
                "output coefficient c_{} has order {} and dimension {}, expected {} and {n}",
                i + 1,
                c.order(),
                c.dim(),
                i + 1
            )));
        }
    }
    let two = T::lit(2.0);
    let mut acc = CpVector::zeros(k, n);
    for i in 1..=k / 2 {
        let j = k - i;
        if j > d {
            continue;
        }
        let (a, b) = (&outputs[i - 1], &outputs[j - 1]);
        if a.is_zero_rank() || b.is_zero_rank() {
            continue;
        }
        let mut term = CpVector::kron(a, b)?;
        if i != j {
            term = term.scale(two);
        }
        acc = CpVector::add(&acc, &term)?;
    }
    Ok(acc)
}

enum ExpKernel<T: Real> {
    /// Orthogonal eigenvectors: `exp(t M) = X diag(e^{t λ}) X^T`.
    Symmetric { vectors: DMatrix<T>, values: Vec<T> },
    Diagonalizable(Eigendecomposition<T>),
    /// Dense matrix exponentials per node.
    Dense(DMatrix<T>),
}

/// Repeated application of `exp(t M)` to blocks of vectors, sharing one
/// factorization of `M` across every node and every degree.
pub struct ExpAction<T: Real> {
    kernel: ExpKernel<T>,
    spectral: SpectralBox<T>,
}

impl<T: Real> ExpAction<T> {
    /// Prepares the action of `exp(t M)`; `M` must be stable.
    pub fn new(m: &DMatrix<T>) -> Result<Self> {
        let values = linalg::eigenvalues(m)?;
        linalg::ensure_stable(&values)?;
        let eig = Eigendecomposition::new(m);
        let eig = match eig {
            Ok(e) => e,
            Err(Error::Numerical(msg)) => {
                log::warn!("eigendecomposition unusable ({msg}); using dense exponentials");
                let spectral = box_from_values(&values, T::lit(f64::INFINITY));
                return Ok(Self {
                    kernel: ExpKernel::Dense(m.clone()),
                    spectral,
                });
            }
            Err(e) => return Err(e),
        };
        let spectral = SpectralBox::from_eigendecomposition(&eig)?;
        let kernel = if eig.symmetric {
            ExpKernel::Symmetric {
                vectors: linalg::real_part(&eig.vectors),
                values: eig.values.iter().map(|v| v.re).collect(),
            }
        } else if eig.condition > T::lit(CONDITION_FALLBACK) {
            log::warn!(
                "eigenvector condition number {:.3e} too large; using dense exponentials",
                eig.condition.to_f64_lossy()
            );
            ExpKernel::Dense(m.clone())
        } else {
            ExpKernel::Diagonalizable(eig)
        };
        Ok(Self { kernel, spectral })
    }

    pub fn spectral_box(&self) -> &SpectralBox<T> {
        &self.spectral
    }

    pub fn uses_dense_fallback(&self) -> bool {
        matches!(self.kernel, ExpKernel::Dense(_))
    }

    /// `exp(t_i M) U` for every `t_i`, in order.
    pub fn apply_many(&self, times: &[T], u: &DMatrix<T>) -> Vec<DMatrix<T>> {
        match &self.kernel {
            ExpKernel::Symmetric { vectors, values } => {
                let y = vectors.tr_mul(u);
                times
                    .par_iter()
                    .map(|&t| {
                        let mut z = y.clone();
                        for (i, mut row) in z.row_iter_mut().enumerate() {
                            row.scale_mut((values[i] * t).exp());
                        }
                        vectors * z
                    })
                    .collect()
            }
            ExpKernel::Diagonalizable(eig) => {
                let y: CMatrix<T> = &eig.inverse * linalg::to_complex(u);
                times
                    .par_iter()
                    .map(|&t| {
                        let mut z = y.clone();
                        for (i, mut row) in z.row_iter_mut().enumerate() {
                            let lt = eig.values[i] * Complex::new(t, T::zero());
                            let e = Complex::new(lt.re.exp() * lt.im.cos(), lt.re.exp() * lt.im.sin());
                            row.iter_mut().for_each(|v| *v *= e);
                        }
                        linalg::real_part(&(&eig.vectors * z))
                    })
                    .collect()
            }
            ExpKernel::Dense(m) => times
                .par_iter()
                .map(|&t| (m * t).exp() * u)
                .collect(),
        }
    }
}

fn box_from_values<T: Real>(values: &[Complex<T>], kappa: T) -> SpectralBox<T> {
    let mut lambda_min = T::lit(f64::INFINITY);
    let mut lambda_max = T::zero();
    let mut mu = T::zero();
    for v in values {
        lambda_min = lambda_min.min(-v.re);
        lambda_max = lambda_max.max(-v.re);
        mu = mu.max(v.im.abs());
    }
    SpectralBox {
        lambda_min,
        lambda_max,
        mu,
        kappa_x: kappa,
        symmetric: false,
    }
}

/// Quadrature solution of `L_k(M) w = -rhs` where `exp_action` acts with `M`.
pub fn solve_with_action<T: Real>(
    exp_action: &ExpAction<T>,
    rhs: &CpVector<T>,
    rule: &QuadratureRule<T>,
) -> Result<CpVector<T>> {
    if rhs.order() != rule.k {
        return Err(Error::Dimension(format!(
            "right-hand side of order {} with a quadrature rule for k = {}",
            rhs.order(),
            rule.k
        )));
    }
    let n = rhs.dim();
    if rhs.is_zero_rank() {
        return Ok(CpVector::zeros(rhs.order(), n));
    }
    let k = rhs.order();
    let pool = rhs.pool();
    let p = pool.ncols();
    let blocks = exp_action.apply_many(&rule.nodes, pool);
    let nodes = blocks.len();
    let mut out_pool = DMatrix::zeros(n, p * nodes);
    for (i, b) in blocks.iter().enumerate() {
        out_pool.columns_mut(i * p, p).copy_from(b);
    }
    let rank = rhs.rank();
    let mut terms = Vec::with_capacity(nodes * rank * k);
    let mut weights = Vec::with_capacity(nodes * rank);
    for (i, &omega) in rule.weights.iter().enumerate() {
        let offset = (i * p) as u32;
        for j in 0..rank {
            terms.extend(rhs.term(j).iter().map(|&t| t + offset));
            weights.push(omega * rhs.weights()[j]);
        }
    }
    CpVector::from_parts(k, out_pool, terms, weights)
}

/// Quadrature solution of `L_k(A^T) w = -rhs`.
pub fn solve_kron_lowrank<T: Real>(
    a: &DMatrix<T>,
    rhs: &CpVector<T>,
    rule: &QuadratureRule<T>,
) -> Result<CpVector<T>> {
    if a.nrows() != rhs.dim() || !a.is_square() {
        return Err(Error::Dimension(format!(
            "A is {}x{}, right-hand side has dimension {}",
            a.nrows(),
            a.ncols(),
            rhs.dim()
        )));
    }
    let action = ExpAction::new(&a.transpose())?;
    solve_with_action(&action, rhs, rule)
}

#[derive(Clone, Debug)]
pub struct ObservabilityOptions<T: Real> {
    /// Target of the a-priori quadrature bound.
    pub tol: T,
    /// Fixed quadrature parameter for every degree, bypassing the bound.
    pub ell: Option<usize>,
    /// Skip odd degrees (they do not enter the ball-averaged objective).
    pub even_only: bool,
    /// Column-parallelism tolerance for rank compression; `None` disables it.
    pub compress: Option<T>,
}

impl<T: Real> Default for ObservabilityOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::tol(1e-8),
            ell: None,
            even_only: false,
            compress: Some(T::tol(1e-12)),
        }
    }
}

/// Per-degree record of how a coefficient was computed.
#[derive(Clone, Debug, PartialEq)]
pub struct DegreeReport {
    pub k: usize,
    pub ell: usize,
    pub capped: bool,
    pub rhs_rank: usize,
    pub rank: usize,
    pub rank_bound: usize,
}

#[derive(Clone, Debug)]
pub struct ObservabilityCoefficients<T: Real> {
    pub coefficients: BTreeMap<usize, CpVector<T>>,
    pub reports: Vec<DegreeReport>,
    pub spectral: SpectralBox<T>,
}

/// Computes `w_2, .., w_{2d}` with `L_k(A^T) w_k = -C_k`.
pub fn build_observability_coefficients<T: Real>(
    a: &DMatrix<T>,
    outputs: &[CpVector<T>],
    opts: &ObservabilityOptions<T>,
) -> Result<ObservabilityCoefficients<T>> {
    let d = outputs.len();
    if d == 0 {
        return Err(Error::InvalidArgument("no output coefficients supplied".into()));
    }
    if !a.is_square() || a.nrows() != outputs[0].dim() {
        return Err(Error::Dimension(format!(
            "A is {}x{}, outputs have dimension {}",
            a.nrows(),
            a.ncols(),
            outputs[0].dim()
        )));
    }
    if let Some(0) = opts.ell {
        return Err(Error::InvalidArgument("ell must be at least 1".into()));
    }
    let action = ExpAction::new(&a.transpose())?;
    let spectral = action.spectral_box().clone();
    let r_max = outputs
        .iter()
        .skip(1)
        .map(|c| c.rank())
        .max()
        .unwrap_or(1)
        .max(1);
    let mut coefficients = BTreeMap::new();
    let mut reports = Vec::new();
    for k in 2..=2 * d {
        if opts.even_only && k % 2 == 1 {
            continue;
        }
        let rhs = assemble_rhs(outputs, k)?;
        let choice = match opts.ell {
            Some(ell) => EllChoice { ell, capped: false },
            None => choose_ell(&spectral, k, opts.tol),
        };
        let rule = quadrature_rule(choice.ell, k, spectral.lambda_min)?;
        let mut w = solve_with_action(&action, &rhs, &rule)?;
        if let Some(ctol) = opts.compress {
            w = w.compress(ctol);
        }
        log::info!(
            "degree {k}: ell = {}, rhs rank {}, coefficient rank {}",
            choice.ell,
            rhs.rank(),
            w.rank()
        );
        reports.push(DegreeReport {
            k,
            ell: choice.ell,
            capped: choice.capped,
            rhs_rank: rhs.rank(),
            rank: w.rank(),
            rank_bound: (2 * choice.ell + 1) * rhs_rank_bound(k, r_max),
        });
        coefficients.insert(k, w);
    }
    Ok(ObservabilityCoefficients {
        coefficients,
        reports,
        spectral,
    })
}

/// Dense `L_k(M)` of size `n^k x n^k`, for small reference problems.
pub fn dense_kronecker_sum<T: Real>(m: &DMatrix<T>, k: usize) -> DMatrix<T> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(n.pow(k as u32), n.pow(k as u32));
    for slot in 0..k {
        let mut term = DMatrix::identity(1, 1);
        for s in 0..k {
            term = if s == slot {
                term.kronecker(m)
            } else {
                term.kronecker(&DMatrix::identity(n, n))
            };
        }
        out += term;
    }
    out
}

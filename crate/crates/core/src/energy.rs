//! Observability energy functions `E(x) = 1/2 sum_k w_k^T x^{⊗k}`, their
//! input-normal transformation, and the ball-averaged subspace objective.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cp_tensor::CpVector;
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;

/// Largest `rank * k!` for which even coefficients are symmetrized
/// explicitly under [`SymmetryPolicy::Auto`].
pub const EXPLICIT_SYMMETRIZATION_LIMIT: usize = 50_000;

/// How even-degree coefficients are made symmetric for the trace formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymmetryPolicy {
    /// Store the symmetrized tensor.
    Explicit,
    /// Keep the tensor as is and average over slot pairings when tracing.
    Implicit,
    /// Explicit while `rank * k!` stays below [`EXPLICIT_SYMMETRIZATION_LIMIT`].
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyFunction<T: Real> {
    dim: usize,
    coefficients: BTreeMap<usize, CpVector<T>>,
    /// Whether the stored coefficient of a degree is already symmetric.
    symmetrized: BTreeMap<usize, bool>,
}

fn factorial(k: usize) -> usize {
    (1..=k).product()
}

impl<T: Real> EnergyFunction<T> {
    /// Assembles an energy function; even degrees are symmetrized according
    /// to `policy`, odd degrees are stored unchanged.
    pub fn new(coefficients: BTreeMap<usize, CpVector<T>>, policy: SymmetryPolicy) -> Result<Self> {
        let dim = coefficients
            .values()
            .next()
            .map(|c| c.dim())
            .ok_or_else(|| Error::InvalidArgument("energy function without coefficients".into()))?;
        let mut out = BTreeMap::new();
        let mut flags = BTreeMap::new();
        for (k, w) in coefficients {
            if w.order() != k || w.dim() != dim {
                return Err(Error::Dimension(format!(
                    "coefficient of degree {k} has order {} and dimension {}, expected {k} and {dim}",
                    w.order(),
                    w.dim()
                )));
            }
            if k < 2 {
                return Err(Error::InvalidArgument(format!(
                    "energy coefficients start at degree 2, got {k}"
                )));
            }
            let explicit = k % 2 == 0
                && match policy {
                    SymmetryPolicy::Explicit => true,
                    SymmetryPolicy::Implicit => false,
                    SymmetryPolicy::Auto => {
                        w.rank().saturating_mul(factorial(k)) <= EXPLICIT_SYMMETRIZATION_LIMIT
                    }
                };
            let w = if explicit { w.symmetrize() } else { w };
            flags.insert(k, explicit || k == 2 && is_symmetric_order2(&w));
            out.insert(k, w);
        }
        Ok(Self {
            dim,
            coefficients: out,
            symmetrized: flags,
        })
    }

    /// Rebuilds from stored parts without touching the coefficients.
    pub fn from_parts(
        coefficients: BTreeMap<usize, CpVector<T>>,
        symmetrized: BTreeMap<usize, bool>,
    ) -> Result<Self> {
        let mut e = Self::new(coefficients, SymmetryPolicy::Implicit)?;
        for (k, flag) in symmetrized {
            if e.coefficients.contains_key(&k) {
                e.symmetrized.insert(k, flag);
            }
        }
        Ok(e)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Highest degree `2d` present.
    pub fn degree(&self) -> usize {
        self.coefficients.keys().copied().max().unwrap_or(0)
    }

    pub fn coefficients(&self) -> &BTreeMap<usize, CpVector<T>> {
        &self.coefficients
    }

    pub fn coefficient(&self, k: usize) -> Option<&CpVector<T>> {
        self.coefficients.get(&k)
    }

    pub fn is_symmetrized(&self, k: usize) -> bool {
        self.symmetrized.get(&k).copied().unwrap_or(false)
    }

    pub fn symmetrized_flags(&self) -> &BTreeMap<usize, bool> {
        &self.symmetrized
    }

    fn check_state(&self, x: &DVector<T>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "state of length {} for an energy function on R^{}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn eval(&self, x: &DVector<T>) -> Result<T> {
        self.check_state(x)?;
        let mut acc = T::zero();
        for w in self.coefficients.values() {
            acc += w.eval(x)?;
        }
        Ok(acc * T::lit(0.5))
    }

    pub fn state_gradient(&self, x: &DVector<T>) -> Result<DVector<T>> {
        self.check_state(x)?;
        let mut acc = DVector::zeros(self.dim);
        for w in self.coefficients.values() {
            acc += w.eval_gradient(x)?;
        }
        Ok(acc * T::lit(0.5))
    }

    /// Merges terms of implicitly symmetrized coefficients that differ
    /// only by a slot permutation. Values, gradients and the objective are
    /// unchanged.
    pub fn merge_permuted_terms(&self) -> Self {
        let coefficients = self
            .coefficients
            .iter()
            .map(|(&k, w)| {
                let w = if self.is_symmetrized(k) { w.clone() } else { w.merge_permuted_terms() };
                (k, w)
            })
            .collect();
        Self {
            dim: self.dim,
            coefficients,
            symmetrized: self.symmetrized.clone(),
        }
    }

    /// Every coefficient mapped by `M ⊗ .. ⊗ M`; symmetry flags carry over.
    pub fn transform(&self, m: &DMatrix<T>) -> Result<Self> {
        let mut coefficients = BTreeMap::new();
        for (&k, w) in &self.coefficients {
            coefficients.insert(k, w.apply_all(m)?);
        }
        Ok(Self {
            dim: m.nrows(),
            coefficients,
            symmetrized: self.symmetrized.clone(),
        })
    }
}

fn is_symmetric_order2<T: Real>(w: &CpVector<T>) -> bool {
    w.matrix_form()
        .map(|m| linalg::is_symmetric(&m, T::tol(1e-12)))
        .unwrap_or(false)
}

pub fn eval_energy<T: Real>(e: &EnergyFunction<T>, x: &DVector<T>) -> Result<T> {
    e.eval(x)
}

pub fn eval_energy_state_gradient<T: Real>(e: &EnergyFunction<T>, x: &DVector<T>) -> Result<DVector<T>> {
    e.state_gradient(x)
}

/// Input-normal coordinates `x = R x~`: every energy coefficient and output
/// coefficient is mapped by `R^T ⊗ .. ⊗ R^T`.
pub fn to_input_normal<T: Real>(
    e: &EnergyFunction<T>,
    r: &DMatrix<T>,
    outputs: &[CpVector<T>],
) -> Result<(EnergyFunction<T>, Vec<CpVector<T>>)> {
    if !r.is_square() || r.nrows() != e.dim() {
        return Err(Error::Dimension(format!(
            "transformation is {}x{}, energy function lives on R^{}",
            r.nrows(),
            r.ncols(),
            e.dim()
        )));
    }
    let rt = r.transpose();
    let e_t = e.transform(&rt)?;
    let outs = outputs
        .iter()
        .map(|c| c.apply_all(&rt))
        .collect::<Result<Vec<_>>>()?;
    Ok((e_t, outs))
}

/// Ball of radius `radius` in `R^dim`. The ball may live in more
/// dimensions than the energy function, which is then taken to be constant
/// along the trailing coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallSpec<T: Real> {
    pub radius: T,
    pub dim: usize,
}

impl<T: Real> BallSpec<T> {
    pub fn new(radius: T, dim: usize) -> Result<Self> {
        if !(radius > T::zero()) || !radius.is_finite_value() {
            return Err(Error::InvalidArgument(format!(
                "ball radius must be positive, got {}",
                radius.to_f64_lossy()
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("ball dimension must be positive".into()));
        }
        Ok(Self { radius, dim })
    }
}

/// `L^{2 kappa} (2 kappa - 1)!! n!! / (n + 2 kappa)!!`, the ball average of
/// `x_1^{2 kappa}` times `(2 kappa - 1)!!` pairings.
pub fn moment_coefficient<T: Real>(kappa: usize, n: usize, radius: T) -> Result<T> {
    if kappa == 0 {
        return Err(Error::InvalidArgument("moment order kappa must be at least 1".into()));
    }
    let l = radius.to_f64_lossy();
    if !(l > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {l}")));
    }
    // n!! / (n + 2 kappa)!! = 1 / prod_{j=1..kappa} (n + 2j)
    let mut log = 2.0 * kappa as f64 * l.ln();
    for i in 1..=kappa {
        log += ((2 * i - 1) as f64).ln() - ((n + 2 * i) as f64).ln();
    }
    Ok(T::lit(log.exp()))
}

fn check_ball<T: Real>(e: &EnergyFunction<T>, q: &DMatrix<T>, ball: &BallSpec<T>) -> Result<()> {
    if ball.dim < e.dim() || q.nrows() != e.dim() {
        return Err(Error::Dimension(format!(
            "energy on R^{}, basis with {} rows, ball in R^{}",
            e.dim(),
            q.nrows(),
            ball.dim
        )));
    }
    Ok(())
}

fn objective_impl<T: Real>(
    e: &EnergyFunction<T>,
    q: &DMatrix<T>,
    ball: &BallSpec<T>,
    check: bool,
) -> Result<(T, DMatrix<T>)> {
    check_ball(e, q, ball)?;
    if check {
        linalg::check_orthonormal(q)?;
    }
    let mut value = T::zero();
    let mut grad = DMatrix::zeros(q.nrows(), q.ncols());
    for (&k, w) in e.coefficients() {
        if k % 2 == 1 {
            continue;
        }
        let c = moment_coefficient(k / 2, ball.dim, ball.radius)?;
        let implicit = !e.is_symmetrized(k);
        let (v, g) = w.pair_trace_with_gradient_unchecked(q, implicit)?;
        value += c * v;
        grad += g * c;
    }
    Ok((value, grad))
}

/// `F(Q) = sum_kappa c_kappa(n, L) tr((Q^{⊗kappa})^T W_{2 kappa} Q^{⊗kappa})`,
/// the ball average of `2 E(Q Q^T x)`. Odd degrees average out.
pub fn objective_f<T: Real>(e: &EnergyFunction<T>, q: &DMatrix<T>, ball: &BallSpec<T>) -> Result<T> {
    Ok(objective_impl(e, q, ball, true)?.0)
}

/// Euclidean gradient of [`objective_f`] with respect to `Q`.
pub fn gradient_f<T: Real>(
    e: &EnergyFunction<T>,
    q: &DMatrix<T>,
    ball: &BallSpec<T>,
) -> Result<DMatrix<T>> {
    Ok(objective_impl(e, q, ball, true)?.1)
}

pub fn objective_and_gradient<T: Real>(
    e: &EnergyFunction<T>,
    q: &DMatrix<T>,
    ball: &BallSpec<T>,
) -> Result<(T, DMatrix<T>)> {
    objective_impl(e, q, ball, true)
}

/// The trace polynomial behind [`objective_f`] and its gradient, evaluated
/// for any `n x r` matrix. Agrees with the checked version on the Stiefel
/// manifold.
pub fn objective_and_gradient_unchecked<T: Real>(
    e: &EnergyFunction<T>,
    q: &DMatrix<T>,
    ball: &BallSpec<T>,
) -> Result<(T, DMatrix<T>)> {
    objective_impl(e, q, ball, false)
}

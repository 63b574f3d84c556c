//! Riemannian gradient ascent on the Stiefel manifold
//! `St(n, r) = {Q in R^{n x r} : Q^T Q = I}` with a QR retraction and
//! Armijo backtracking.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;

/// A matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct StiefelPoint<T: Real> {
    q: DMatrix<T>,
}

impl<T: Real> StiefelPoint<T> {
    pub fn new(q: DMatrix<T>) -> Result<Self> {
        if q.ncols() > q.nrows() {
            return Err(Error::Dimension(format!(
                "Stiefel point needs r <= n, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        linalg::check_orthonormal(&q)?;
        Ok(Self { q })
    }

    /// Orthonormalizes the columns of `m` (thin QR, positive diagonal).
    pub fn from_span(m: &DMatrix<T>) -> Result<Self> {
        Self::new(linalg::orthonormal_basis(m))
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.q
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.q
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// Stop once the Riemannian gradient norm falls below `grad_tol` times
    /// the Euclidean gradient norm at the starting point.
    pub grad_tol: f64,
    /// First trial step, measured as the length of the step `t * xi`
    /// relative to `||Q||_F`.
    pub initial_step: f64,
    pub backtracking: f64,
    pub armijo: f64,
    pub max_halvings: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-8,
            initial_step: 0.5,
            backtracking: 0.5,
            armijo: 1e-4,
            max_halvings: 50,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iters > 0
            && self.grad_tol > 0.0
            && self.initial_step > 0.0
            && self.backtracking > 0.0
            && self.backtracking < 1.0
            && self.armijo > 0.0
            && self.armijo < 1.0
            && self.max_halvings > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer configuration {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizationResult<T: Real> {
    pub point: StiefelPoint<T>,
    /// Objective at the start and after every accepted step.
    pub values: Vec<T>,
    pub iterations: usize,
    pub grad_norm: T,
    pub converged: bool,
    /// The line search failed; `point` is the best iterate found.
    pub stalled: bool,
}

impl<T: Real> OptimizationResult<T> {
    pub fn initial_value(&self) -> T {
        self.values[0]
    }

    pub fn final_value(&self) -> T {
        *self.values.last().expect("at least the initial value")
    }
}

/// `P_Q(G) = G - Q (Q^T G + G^T Q) / 2`.
pub fn tangent_project<T: Real>(q: &DMatrix<T>, g: &DMatrix<T>) -> Result<DMatrix<T>> {
    if q.shape() != g.shape() {
        return Err(Error::Dimension(format!(
            "point is {}x{}, direction is {}x{}",
            q.nrows(),
            q.ncols(),
            g.nrows(),
            g.ncols()
        )));
    }
    let qtg = q.tr_mul(g);
    let sym = (&qtg + qtg.transpose()) * T::lit(0.5);
    Ok(g - q * sym)
}

/// `qf(Q + t xi)`: the Q factor of a thin QR with positive diagonal.
pub fn retract_qr<T: Real>(q: &StiefelPoint<T>, xi: &DMatrix<T>, t: T) -> Result<StiefelPoint<T>> {
    if q.matrix().shape() != xi.shape() {
        return Err(Error::Dimension("tangent vector shape does not match the point".into()));
    }
    if t == T::zero() {
        return Ok(q.clone());
    }
    let moved = q.matrix() + xi * t;
    let (qf, _) = linalg::thin_qr(&moved);
    Ok(StiefelPoint { q: qf })
}

/// Maximizes `f` over the Stiefel manifold. `f_grad` returns the objective
/// and its Euclidean gradient.
pub fn maximize_on_stiefel<T, F>(
    f_grad: F,
    q0: StiefelPoint<T>,
    cfg: &OptimizerConfig,
) -> Result<OptimizationResult<T>>
where
    T: Real,
    F: Fn(&DMatrix<T>) -> Result<(T, DMatrix<T>)>,
{
    cfg.validate()?;
    let (mut value, grad) = f_grad(q0.matrix())?;
    let mut values = vec![value];
    let mut q = q0;
    let (n, r) = q.matrix().shape();
    if r == n {
        // the objective only depends on span(Q), which is everything
        return Ok(OptimizationResult {
            point: q,
            values,
            iterations: 0,
            grad_norm: T::zero(),
            converged: true,
            stalled: false,
        });
    }
    let scale = grad.norm().max(T::default_epsilon() * T::default_epsilon());
    let tol = T::lit(cfg.grad_tol) * scale;
    let beta = T::lit(cfg.backtracking);
    let c = T::lit(cfg.armijo);
    let step_len = T::lit(cfg.initial_step) * T::from_count(r).sqrt();
    let mut xi = tangent_project(q.matrix(), &grad)?;
    let mut xi_norm = xi.norm();
    let t_first = step_len / xi_norm.max(T::default_epsilon() * T::default_epsilon());
    let (t_lo, t_hi) = (t_first * T::lit(1e-8), t_first * T::lit(1e8));
    let mut prev: Option<(DMatrix<T>, DMatrix<T>)> = None;
    let mut iterations = 0;
    let mut stalled = false;
    while xi_norm > tol && iterations < cfg.max_iters {
        let xi2 = xi_norm * xi_norm;
        // Barzilai-Borwein trial step from the last two iterates
        let mut t = match &prev {
            None => t_first,
            Some((q_old, xi_old)) => {
                let s = q.matrix() - q_old;
                let y = &xi - xi_old;
                let sy = s.dot(&y).abs();
                let bb = if iterations % 2 == 0 {
                    s.dot(&s) / sy
                } else {
                    sy / y.dot(&y)
                };
                if bb.is_finite_value() && bb > T::zero() {
                    bb.max(t_lo).min(t_hi)
                } else {
                    t_first
                }
            }
        };
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let cand = retract_qr(&q, &xi, t)?;
            let (v, g) = f_grad(cand.matrix())?;
            if v.is_finite_value() && v >= value + c * t * xi2 {
                accepted = Some((cand, v, g));
                break;
            }
            t *= beta;
        }
        match accepted {
            Some((cand, v, g)) => {
                let new_xi = tangent_project(cand.matrix(), &g)?;
                prev = Some((std::mem::replace(&mut q, cand).into_matrix(), std::mem::replace(&mut xi, new_xi)));
                value = v;
                values.push(v);
                iterations += 1;
                xi_norm = xi.norm();
            }
            None => {
                log::warn!(
                    "line search failed after {} reductions at iteration {iterations}",
                    cfg.max_halvings
                );
                stalled = true;
                break;
            }
        }
    }
    let converged = xi_norm <= tol;
    log::info!(
        "stiefel ascent: {iterations} iterations, objective {:.6e} -> {:.6e}, |grad| {:.3e}",
        values[0].to_f64_lossy(),
        value.to_f64_lossy(),
        xi_norm.to_f64_lossy()
    );
    Ok(OptimizationResult {
        point: q,
        values,
        iterations,
        grad_norm: xi_norm,
        converged,
        stalled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut ChaCha8Rng, n: usize, r: usize) -> StiefelPoint<f64> {
        StiefelPoint::from_span(&DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0)))
            .unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &m * m.transpose()
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_point(&mut rng, 6, 2);
        let g = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let xi = tangent_project(q.matrix(), &g).unwrap();
        let again = tangent_project(q.matrix(), &xi).unwrap();
        assert!((&again - &xi).norm() < 1e-12);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, -2.0]);
        let normal = q.matrix() * s;
        assert!(tangent_project(q.matrix(), &normal).unwrap().norm() < 1e-14);
        assert!(tangent_project(q.matrix(), &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn retraction_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_point(&mut rng, 7, 3);
        let g = DMatrix::from_fn(7, 3, |_, _| rng.random_range(-1.0..1.0));
        let xi = tangent_project(q.matrix(), &g).unwrap();
        assert_eq!(retract_qr(&q, &xi, 0.0).unwrap(), q);
        let err = |t: f64| (retract_qr(&q, &xi, t).unwrap().matrix() - (q.matrix() + &xi * t)).norm();
        let (e1, e2) = (err(1e-2), err(5e-3));
        let slope = (e1 / e2).log2();
        assert!((slope - 2.0).abs() < 0.1, "slope {slope}");
        let p = retract_qr(&q, &xi, 0.7).unwrap();
        assert!(linalg::orthonormality_defect(p.matrix()) < 1e-12);
    }

    #[test]
    fn quadratic_trace_reaches_top_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_spd(&mut rng, 8);
        let (vals, vecs) = linalg::symmetric_eigen_desc(&w);
        let q0 = random_point(&mut rng, 8, 3);
        let f = |q: &DMatrix<f64>| Ok(((q.transpose() * &w * q).trace(), &w * q * 2.0));
        let res = maximize_on_stiefel(f, q0, &OptimizerConfig::default()).unwrap();
        let top: f64 = vals.iter().take(3).sum();
        assert!((res.final_value() - top).abs() < 1e-8 * top, "{} vs {top}", res.final_value());
        assert!(res.values.windows(2).all(|v| v[1] >= v[0]));
        assert!(res.converged && !res.stalled);
        let span = vecs.columns(0, 3).clone_owned();
        assert!(linalg::subspace_distance(&span, res.point.matrix()) < 1e-6);
    }

    #[test]
    fn start_at_optimum_does_not_move() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_spd(&mut rng, 6);
        let (_, vecs) = linalg::symmetric_eigen_desc(&w);
        let q0 = StiefelPoint::new(vecs.columns(0, 2).clone_owned()).unwrap();
        let f = |q: &DMatrix<f64>| Ok(((q.transpose() * &w * q).trace(), &w * q * 2.0));
        let res = maximize_on_stiefel(f, q0.clone(), &OptimizerConfig::default()).unwrap();
        assert!(res.iterations <= 1);
        assert!((res.point.matrix() - q0.matrix()).norm() < 1e-8);
    }

    #[test]
    fn full_dimension_short_circuits() {
        let q0 = StiefelPoint::new(DMatrix::<f64>::identity(3, 3)).unwrap();
        let res = maximize_on_stiefel(|q| Ok((q.trace(), q.clone())), q0, &OptimizerConfig::default())
            .unwrap();
        assert_eq!(res.iterations, 0);
        assert!(res.converged);
    }

    #[test]
    fn config_validation() {
        let bad = OptimizerConfig {
            backtracking: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(StiefelPoint::new(DMatrix::<f64>::from_element(3, 2, 1.0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn iterates_stay_on_manifold_and_increase(seed in any::<u64>(), r in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_spd(&mut rng, 6);
            let q0 = random_point(&mut rng, 6, r);
            let seen = std::cell::RefCell::new(Vec::new());
            let f = |q: &DMatrix<f64>| {
                seen.borrow_mut().push(linalg::orthonormality_defect(q));
                let wq = &w * q;
                // quartic term keeps the problem non-quadratic
                let t = (q.transpose() * &wq).trace();
                Ok((t + 0.1 * t * t, wq * (2.0 + 0.4 * t)))
            };
            let cfg = OptimizerConfig { max_iters: 60, ..Default::default() };
            let res = maximize_on_stiefel(f, q0, &cfg).unwrap();
            prop_assert!(res.values.windows(2).all(|v| v[1] >= v[0]));
            prop_assert!(seen.borrow().iter().all(|&d| d <= 1e-10));
            prop_assert!(linalg::orthonormality_defect(res.point.matrix()) <= 1e-10);
        }
    }
}

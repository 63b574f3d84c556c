//! Dense linear algebra helpers: real and complex Schur forms, a
//! quasi-triangular Sylvester solver, eigendecompositions for the
//! exponential action, and a handful of small utilities.

use nalgebra::{Complex, DMatrix, DVector, Schur, SymmetricEigen, QR, SVD};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub type CMatrix<T> = DMatrix<Complex<T>>;

pub fn frobenius<T: Real>(a: &DMatrix<T>) -> T {
    a.norm()
}

/// `||a - b||_F / ||b||_F`, falling back to the absolute difference when `b` vanishes.
pub fn rel_diff<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    let d = (a - b).norm();
    let s = b.norm();
    if s > T::zero() {
        d / s
    } else {
        d
    }
}

pub fn symmetric_part<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    (a + a.transpose()) * T::lit(0.5)
}

pub fn is_symmetric<T: Real>(a: &DMatrix<T>, rel_tol: T) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.norm();
    (a - a.transpose()).norm() <= rel_tol * scale
}

/// Dense Kronecker product with the first factor as the slow index.
pub fn kron<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    a.kronecker(b)
}

/// `||Q^T Q - I||_F`.
pub fn orthonormality_defect<T: Real>(q: &DMatrix<T>) -> T {
    let g = q.transpose() * q;
    (g - DMatrix::identity(q.ncols(), q.ncols())).norm()
}

pub fn check_orthonormal<T: Real>(q: &DMatrix<T>) -> Result<()> {
    let defect = orthonormality_defect(q);
    if defect > T::tol(1e-8) || !defect.is_finite_value() {
        return Err(Error::NotOrthonormal(defect.to_f64_lossy()));
    }
    Ok(())
}

/// Thin QR factorization with a non-negative diagonal in `R`.
pub fn thin_qr<T: Real>(m: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
    let qr = QR::new(m.clone());
    let mut q = qr.q();
    let mut r = qr.r();
    for i in 0..r.nrows() {
        if r[(i, i)] < T::zero() {
            r.row_mut(i).neg_mut();
            q.column_mut(i).neg_mut();
        }
    }
    (q, r)
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue.
///
/// Ties keep the order produced by the factorization, which makes the
/// result deterministic for a given input.
pub fn symmetric_eigen_desc<T: Real>(a: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let eig = SymmetricEigen::new(symmetric_part(a));
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// A factor `Z` with `Z Z^T` equal to the positive part of a symmetric matrix.
pub fn psd_factor<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    let (values, mut vectors) = symmetric_eigen_desc(a);
    for (j, lambda) in values.iter().enumerate() {
        let s = lambda.max(T::zero()).sqrt();
        vectors.column_mut(j).scale_mut(s);
    }
    vectors
}

/// Sine of the largest principal angle between the column spans of two
/// matrices with orthonormal columns.
pub fn subspace_distance<T: Real>(q1: &DMatrix<T>, q2: &DMatrix<T>) -> T {
    let residual = q2 - q1 * (q1.transpose() * q2);
    let svd = SVD::new(residual, false, false);
    svd.singular_values.iter().fold(T::zero(), |m, &s| m.max(s))
}

/// Orthonormal basis of the column span of `m`.
pub fn orthonormal_basis<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    thin_qr(m).0
}

/// Real Schur form `A = U T U^T` with negligible subdiagonal entries
/// flushed to exact zeros.
pub fn real_schur<T: Real>(a: &DMatrix<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)));
    }
    // a deflation threshold of exactly eps can stall on matrices with
    // clustered spectra, so loosen it gradually
    let schur = [4.0, 64.0, 1024.0]
        .iter()
        .find_map(|&f| Schur::try_new(a.clone(), T::default_epsilon() * T::lit(f), 300 * n.max(10)))
        .ok_or_else(|| Error::Numerical("real Schur iteration did not converge".into()))?;
    let (u, mut t) = schur.unpack();
    let eps = T::default_epsilon();
    for j in 0..n {
        for i in (j + 2)..n {
            t[(i, j)] = T::zero();
        }
    }
    for i in 0..n.saturating_sub(1) {
        let sub = t[(i + 1, i)].abs();
        if sub <= eps * (t[(i, i)].abs() + t[(i + 1, i + 1)].abs()) {
            t[(i + 1, i)] = T::zero();
        }
    }
    for i in 0..n.saturating_sub(2) {
        if t[(i + 1, i)] != T::zero() && t[(i + 2, i + 1)] != T::zero() {
            return Err(Error::Numerical(
                "real Schur factor is not quasi-triangular".into(),
            ));
        }
    }
    Ok((u, t))
}

/// Diagonal blocks `(start, size)` of a quasi-upper-triangular matrix.
pub fn schur_blocks<T: Real>(t: &DMatrix<T>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut blocks = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != T::zero() {
            blocks.push((i, 2));
            i += 2;
        } else {
            blocks.push((i, 1));
            i += 1;
        }
    }
    blocks
}

fn block_2x2_eigenvalues<T: Real>(p: T, q: T, r: T, s: T) -> [Complex<T>; 2] {
    let half = T::lit(0.5);
    let mean = (p + s) * half;
    let diff = (p - s) * half;
    let disc = diff * diff + q * r;
    if disc >= T::zero() {
        let root = disc.sqrt();
        [
            Complex::new(mean + root, T::zero()),
            Complex::new(mean - root, T::zero()),
        ]
    } else {
        let root = (-disc).sqrt();
        [Complex::new(mean, root), Complex::new(mean, -root)]
    }
}

/// Eigenvalues of a quasi-upper-triangular matrix, read off its diagonal blocks.
pub fn quasi_triangular_eigenvalues<T: Real>(t: &DMatrix<T>) -> Vec<Complex<T>> {
    let mut out = Vec::with_capacity(t.nrows());
    for (i, size) in schur_blocks(t) {
        if size == 1 {
            out.push(Complex::new(t[(i, i)], T::zero()));
        } else {
            out.extend(block_2x2_eigenvalues(
                t[(i, i)],
                t[(i, i + 1)],
                t[(i + 1, i)],
                t[(i + 1, i + 1)],
            ));
        }
    }
    out
}

pub fn eigenvalues<T: Real>(a: &DMatrix<T>) -> Result<Vec<Complex<T>>> {
    let (_, t) = real_schur(a)?;
    Ok(quasi_triangular_eigenvalues(&t))
}

/// Rejects eigenvalue sets containing a value with non-negative real part.
pub fn ensure_stable<T: Real>(values: &[Complex<T>]) -> Result<()> {
    if let Some(worst) = values
        .iter()
        .max_by(|a, b| a.re.partial_cmp(&b.re).unwrap_or(std::cmp::Ordering::Equal))
    {
        if worst.re >= T::zero() || !worst.re.is_finite_value() {
            return Err(Error::Unstable {
                re: worst.re.to_f64_lossy(),
                im: worst.im.to_f64_lossy(),
            });
        }
    }
    Ok(())
}

/// Largest real part over the spectrum (the spectral abscissa).
pub fn spectral_abscissa<T: Real>(a: &DMatrix<T>) -> Result<T> {
    let values = eigenvalues(a)?;
    Ok(values
        .iter()
        .fold(T::lit(f64::NEG_INFINITY), |m, v| m.max(v.re)))
}

fn solve_small_sylvester<T: Real>(
    m1: &DMatrix<T>,
    s: &DMatrix<T>,
    rhs: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let a = m1.nrows();
    let b = s.nrows();
    if a == 1 && b == 1 {
        let d = m1[(0, 0)] + s[(0, 0)];
        if d == T::zero() {
            return Err(Error::Numerical("singular Sylvester operator".into()));
        }
        return Ok(DMatrix::from_element(1, 1, rhs[(0, 0)] / d));
    }
    let dim = a * b;
    let mut k = DMatrix::zeros(dim, dim);
    for j in 0..b {
        for i in 0..a {
            let row = i + a * j;
            for ip in 0..a {
                k[(row, ip + a * j)] += m1[(i, ip)];
            }
            for jp in 0..b {
                k[(row, i + a * jp)] += s[(jp, j)];
            }
        }
    }
    let v = DVector::from_column_slice(rhs.as_slice());
    let z = k
        .full_piv_lu()
        .solve(&v)
        .ok_or_else(|| Error::Numerical("singular Sylvester operator".into()))?;
    Ok(DMatrix::from_column_slice(a, b, z.as_slice()))
}

/// Solves `T1 X + X T2 = C` for quasi-upper-triangular `T1` and `T2` by
/// block back-substitution.
pub fn solve_quasi_triangular_sylvester<T: Real>(
    t1: &DMatrix<T>,
    t2: &DMatrix<T>,
    c: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let p = t1.nrows();
    let q = t2.nrows();
    if c.nrows() != p || c.ncols() != q {
        return Err(Error::Dimension(format!(
            "Sylvester right-hand side is {}x{}, expected {}x{}",
            c.nrows(),
            c.ncols(),
            p,
            q
        )));
    }
    let row_blocks = schur_blocks(t1);
    let col_blocks = schur_blocks(t2);
    let mut x = DMatrix::<T>::zeros(p, q);
    for &(j0, js) in &col_blocks {
        let mut rhs = c.columns(j0, js).clone_owned();
        if j0 > 0 {
            rhs -= x.columns(0, j0) * t2.view((0, j0), (j0, js));
        }
        let s = t2.view((j0, j0), (js, js)).clone_owned();
        for &(i0, is) in row_blocks.iter().rev() {
            let mut r = rhs.rows(i0, is).clone_owned();
            let end = i0 + is;
            if end < p {
                r -= t1.view((i0, end), (is, p - end)) * x.view((end, j0), (p - end, js));
            }
            let m1 = t1.view((i0, i0), (is, is)).clone_owned();
            let z = solve_small_sylvester(&m1, &s, &r)?;
            x.view_mut((i0, j0), (is, js)).copy_from(&z);
        }
    }
    Ok(x)
}

/// Reverses row and column order: `J M J` with `J` the exchange matrix.
pub fn flip<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let (r, c) = m.shape();
    DMatrix::from_fn(r, c, |i, j| m[(r - 1 - i, c - 1 - j)])
}

fn flip_columns<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let (r, c) = m.shape();
    DMatrix::from_fn(r, c, |i, j| m[(i, c - 1 - j)])
}

/// Solves `A X + X A^T + C = 0` given the real Schur form of `A`.
pub fn solve_lyapunov_schur<T: Real>(
    u: &DMatrix<T>,
    t: &DMatrix<T>,
    c: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    // T Y + Y T^T = -U^T C U; with the exchange matrix J, T (Y J) + (Y J)(J T^T J) = -U^T C U J
    // and J T^T J is again quasi-upper-triangular.
    let rhs = -(u.transpose() * c * u);
    let t2 = flip(&t.transpose());
    let yj = solve_quasi_triangular_sylvester(t, &t2, &flip_columns(&rhs))?;
    let y = flip_columns(&yj);
    Ok(u * y * u.transpose())
}

/// Complex upper-triangular Schur form obtained from the real one by
/// unitary triangularization of each 2x2 diagonal block.
pub fn complex_schur<T: Real>(u: &DMatrix<T>, t: &DMatrix<T>) -> (CMatrix<T>, CMatrix<T>) {
    let n = t.nrows();
    let mut tc: CMatrix<T> = t.map(|v| Complex::new(v, T::zero()));
    let mut uc: CMatrix<T> = u.map(|v| Complex::new(v, T::zero()));
    for (i, size) in schur_blocks(t) {
        if size != 2 {
            continue;
        }
        let (p, q, r, s) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
        let lambda = block_2x2_eigenvalues(p, q, r, s)[0];
        let cp = Complex::new(p, T::zero());
        let cs = Complex::new(s, T::zero());
        // eigenvector of [[p, q], [r, s]] for lambda
        let (v0, v1) = if q.abs() >= r.abs() {
            (Complex::new(q, T::zero()), lambda - cp)
        } else {
            (lambda - cs, Complex::new(r, T::zero()))
        };
        let norm = (v0.norm_sqr() + v1.norm_sqr()).sqrt();
        let (v0, v1) = (v0.unscale(norm), v1.unscale(norm));
        // unitary G = [[v0, -conj(v1)], [v1, conj(v0)]]
        let g00 = v0;
        let g01 = -v1.conj();
        let g10 = v1;
        let g11 = v0.conj();
        for col in 0..n {
            let a0 = tc[(i, col)];
            let a1 = tc[(i + 1, col)];
            tc[(i, col)] = g00.conj() * a0 + g10.conj() * a1;
            tc[(i + 1, col)] = g01.conj() * a0 + g11.conj() * a1;
        }
        for row in 0..n {
            let a0 = tc[(row, i)];
            let a1 = tc[(row, i + 1)];
            tc[(row, i)] = a0 * g00 + a1 * g10;
            tc[(row, i + 1)] = a0 * g01 + a1 * g11;
            let b0 = uc[(row, i)];
            let b1 = uc[(row, i + 1)];
            uc[(row, i)] = b0 * g00 + b1 * g10;
            uc[(row, i + 1)] = b0 * g01 + b1 * g11;
        }
        tc[(i + 1, i)] = Complex::new(T::zero(), T::zero());
    }
    (uc, tc)
}

/// Eigendecomposition `A = X diag(values) X^{-1}` with unit-norm eigenvector columns.
#[derive(Clone, Debug)]
pub struct Eigendecomposition<T: Real> {
    pub values: Vec<Complex<T>>,
    pub vectors: CMatrix<T>,
    pub inverse: CMatrix<T>,
    /// 2-norm condition number of `vectors`.
    pub condition: T,
    pub symmetric: bool,
}

impl<T: Real> Eigendecomposition<T> {
    pub fn new(a: &DMatrix<T>) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() {
            return Err(Error::Dimension(format!(
                "expected a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if is_symmetric(a, T::default_epsilon() * T::from_count(n.max(1)) * T::lit(16.0)) {
            let eig = SymmetricEigen::new(symmetric_part(a));
            let vectors = eig.eigenvectors.map(|v| Complex::new(v, T::zero()));
            let inverse = vectors.transpose();
            return Ok(Self {
                values: eig
                    .eigenvalues
                    .iter()
                    .map(|&v| Complex::new(v, T::zero()))
                    .collect(),
                vectors,
                inverse,
                condition: T::one(),
                symmetric: true,
            });
        }
        let (u, t) = real_schur(a)?;
        let (uc, tc) = complex_schur(&u, &t);
        let values: Vec<Complex<T>> = (0..n).map(|i| tc[(i, i)]).collect();
        let tnorm = tc.iter().fold(T::zero(), |s, v| s + v.norm_sqr()).sqrt();
        let smin = (T::default_epsilon() * tnorm).max(T::default_epsilon() * T::default_epsilon());
        let zero = Complex::new(T::zero(), T::zero());
        let mut y = CMatrix::from_element(n, n, zero);
        for j in 0..n {
            y[(j, j)] = Complex::new(T::one(), T::zero());
            let lj = tc[(j, j)];
            for i in (0..j).rev() {
                let mut s = zero;
                for m in (i + 1)..=j {
                    s += tc[(i, m)] * y[(m, j)];
                }
                let mut d = tc[(i, i)] - lj;
                if d.norm_sqr().sqrt() < smin {
                    d = Complex::new(smin, T::zero());
                }
                y[(i, j)] = -s / d;
            }
        }
        let mut vectors = uc * y;
        for mut col in vectors.column_iter_mut() {
            let nrm = col.iter().fold(T::zero(), |s, v| s + v.norm_sqr()).sqrt();
            if nrm > T::zero() {
                col.iter_mut().for_each(|v| *v = v.unscale(nrm));
            }
        }
        let svd = SVD::new(vectors.clone(), false, false);
        let smax = svd.singular_values.iter().fold(T::zero(), |m, &s| m.max(s));
        let smin_v = svd
            .singular_values
            .iter()
            .fold(T::lit(f64::INFINITY), |m, &s| m.min(s));
        let condition = if smin_v > T::zero() {
            smax / smin_v
        } else {
            T::lit(f64::INFINITY)
        };
        if !condition.is_finite_value() {
            return Err(Error::Numerical(
                "matrix is not diagonalizable in working precision; perturb it slightly".into(),
            ));
        }
        let inverse = vectors.clone().lu().try_inverse().ok_or_else(|| {
            Error::Numerical(
                "eigenvector matrix is singular; the matrix is not diagonalizable".into(),
            )
        })?;
        Ok(Self {
            values,
            vectors,
            inverse,
            condition,
            symmetric: false,
        })
    }

    /// True when every eigenvalue and eigenvector entry is exactly real.
    pub fn is_real(&self) -> bool {
        self.values.iter().all(|v| v.im == T::zero())
            && self.vectors.iter().all(|v| v.im == T::zero())
            && self.inverse.iter().all(|v| v.im == T::zero())
    }
}

pub fn real_part<T: Real>(m: &CMatrix<T>) -> DMatrix<T> {
    m.map(|v| v.re)
}

pub fn to_complex<T: Real>(m: &DMatrix<T>) -> CMatrix<T> {
    m.map(|v| Complex::new(v, T::zero()))
}

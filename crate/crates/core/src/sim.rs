//! Fixed-step RK4 simulation of LPO systems and the two benchmark families.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::cp_tensor::CpVector;
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;
use crate::system::LpoSystem;

/// Default integration step.
pub const DEFAULT_DT: f64 = 1e-3;

type SignalFn = Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum InputKind {
    Zero,
    Step(f64),
    /// `exp(-2t) sin(t/2)` on every channel.
    Msd,
    /// `100 / (t + 1) sin(5t)` on every channel.
    ConvDiff,
    Custom(SignalFn),
}

/// A named input `t -> R^m`.
#[derive(Clone)]
pub struct InputSignal {
    pub name: String,
    pub channels: usize,
    pub kind: InputKind,
}

impl fmt::Debug for InputSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InputSignal")
            .field("name", &self.name)
            .field("channels", &self.channels)
            .finish()
    }
}

impl InputSignal {
    pub fn zero(channels: usize) -> Self {
        Self::named("zero", channels, InputKind::Zero)
    }

    pub fn step(channels: usize, amplitude: f64) -> Self {
        Self::named("step", channels, InputKind::Step(amplitude))
    }

    pub fn msd(channels: usize) -> Self {
        Self::named("msd", channels, InputKind::Msd)
    }

    pub fn convdiff(channels: usize) -> Self {
        Self::named("convdiff", channels, InputKind::ConvDiff)
    }

    pub fn custom<F>(name: &str, channels: usize, f: F) -> Self
    where
        F: Fn(f64) -> Vec<f64> + Send + Sync + 'static,
    {
        Self::named(name, channels, InputKind::Custom(Arc::new(f)))
    }

    fn named(name: &str, channels: usize, kind: InputKind) -> Self {
        Self {
            name: name.to_string(),
            channels,
            kind,
        }
    }

    /// Built-in signal by name: `zero`, `step`, `msd` (or `msd_input`),
    /// `convdiff` (or `convdiff_input`).
    pub fn by_name(name: &str, channels: usize) -> Result<Self> {
        match name {
            "zero" => Ok(Self::zero(channels)),
            "step" => Ok(Self::step(channels, 1.0)),
            "msd" | "msd_input" => Ok(Self::msd(channels)),
            "convdiff" | "convdiff_input" => Ok(Self::convdiff(channels)),
            other => Err(Error::InvalidArgument(format!(
                "unknown input signal '{other}' (expected zero, step, msd or convdiff)"
            ))),
        }
    }

    pub fn eval_f64(&self, t: f64) -> Vec<f64> {
        let m = self.channels;
        match &self.kind {
            InputKind::Zero => vec![0.0; m],
            InputKind::Step(a) => vec![*a; m],
            InputKind::Msd => vec![(-2.0 * t).exp() * (0.5 * t).sin(); m],
            InputKind::ConvDiff => vec![100.0 / (t + 1.0) * (5.0 * t).sin(); m],
            InputKind::Custom(f) => f(t),
        }
    }

    pub fn eval<T: Real>(&self, t: T) -> Result<DVector<T>> {
        let v = self.eval_f64(t.to_f64_lossy());
        if v.len() != self.channels {
            return Err(Error::Dimension(format!(
                "input '{}' returned {} values, expected {}",
                self.name,
                v.len(),
                self.channels
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "input '{}' is not finite at t = {}",
                self.name,
                t.to_f64_lossy()
            )));
        }
        Ok(DVector::from_iterator(v.len(), v.into_iter().map(T::lit)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T: Real> {
    pub times: Vec<T>,
    /// Empty when states were not recorded.
    pub states: Vec<DVector<T>>,
    pub outputs: Vec<T>,
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// `A` stored densely or, when mostly zero, row-compressed.
enum Operator<T: Real> {
    Dense(DMatrix<T>),
    Sparse {
        n: usize,
        row_start: Vec<usize>,
        cols: Vec<usize>,
        vals: Vec<T>,
    },
}

impl<T: Real> Operator<T> {
    fn new(a: &DMatrix<T>) -> Self {
        let n = a.nrows();
        let nnz = a.iter().filter(|v| **v != T::zero()).count();
        if n < 64 || nnz * 10 > n * n {
            return Operator::Dense(a.clone());
        }
        let mut row_start = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        for i in 0..n {
            row_start.push(cols.len());
            for j in 0..n {
                let v = a[(i, j)];
                if v != T::zero() {
                    cols.push(j);
                    vals.push(v);
                }
            }
        }
        row_start.push(cols.len());
        Operator::Sparse {
            n,
            row_start,
            cols,
            vals,
        }
    }

    fn apply(&self, x: &DVector<T>) -> DVector<T> {
        match self {
            Operator::Dense(a) => a * x,
            Operator::Sparse {
                n,
                row_start,
                cols,
                vals,
            } => DVector::from_fn(*n, |i, _| {
                let mut acc = T::zero();
                for p in row_start[i]..row_start[i + 1] {
                    acc += vals[p] * x[cols[p]];
                }
                acc
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimulationOptions<T: Real> {
    pub x0: Option<DVector<T>>,
    pub record_states: bool,
}

impl<T: Real> Default for SimulationOptions<T> {
    fn default() -> Self {
        Self {
            x0: None,
            record_states: true,
        }
    }
}

/// Classical RK4 from the zero state on `[t0, t1]`. The step is shrunk
/// slightly when `dt` does not divide the interval.
pub fn simulate<T: Real>(
    sys: &LpoSystem<T>,
    u: &InputSignal,
    t_span: (T, T),
    dt: T,
) -> Result<Trajectory<T>> {
    simulate_with(sys, u, t_span, dt, &SimulationOptions::default())
}

pub fn simulate_with<T: Real>(
    sys: &LpoSystem<T>,
    u: &InputSignal,
    t_span: (T, T),
    dt: T,
    opts: &SimulationOptions<T>,
) -> Result<Trajectory<T>> {
    let (t0, t1) = t_span;
    if !(dt > T::zero()) || !dt.is_finite_value() {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {}", dt.to_f64_lossy())));
    }
    if !(t1 > t0) {
        return Err(Error::InvalidArgument(format!(
            "empty time interval [{}, {}]",
            t0.to_f64_lossy(),
            t1.to_f64_lossy()
        )));
    }
    if u.channels != sys.inputs() {
        return Err(Error::Dimension(format!(
            "input '{}' has {} channels, system has {} inputs",
            u.name,
            u.channels,
            sys.inputs()
        )));
    }
    let n = sys.dim();
    let mut x = match &opts.x0 {
        Some(x0) if x0.len() != n => {
            return Err(Error::Dimension(format!("initial state has length {}, expected {n}", x0.len())))
        }
        Some(x0) => x0.clone(),
        None => DVector::zeros(n),
    };
    let span = (t1 - t0).to_f64_lossy();
    let steps = ((span / dt.to_f64_lossy()) - 1e-9).ceil().max(1.0) as usize;
    let h = (t1 - t0) / T::from_count(steps);
    let half = h * T::lit(0.5);
    let op = Operator::new(sys.a());
    let b = sys.b();
    let f = |x: &DVector<T>, u: &DVector<T>| op.apply(x) + b * u;

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::new();
    let mut outputs = Vec::with_capacity(steps + 1);
    times.push(t0);
    outputs.push(sys.output(&x)?);
    if opts.record_states {
        states.push(x.clone());
    }
    let mut u_now = u.eval(t0)?;
    for i in 0..steps {
        let t = t0 + h * T::from_count(i);
        let t_next = t0 + h * T::from_count(i + 1);
        let u_mid = u.eval(t + half)?;
        let u_next = u.eval(t_next)?;
        let k1 = f(&x, &u_now);
        let k2 = f(&(&x + &k1 * half), &u_mid);
        let k3 = f(&(&x + &k2 * half), &u_mid);
        let k4 = f(&(&x + &k3 * h), &u_next);
        x += (k1 + (k2 + k3) * T::lit(2.0) + k4) * (h / T::lit(6.0));
        if x.iter().any(|v| !v.is_finite_value()) {
            return Err(Error::Diverged(t_next.to_f64_lossy()));
        }
        let y = sys.output(&x)?;
        if !y.is_finite_value() {
            return Err(Error::Diverged(t_next.to_f64_lossy()));
        }
        times.push(t_next);
        outputs.push(y);
        if opts.record_states {
            states.push(x.clone());
        }
        u_now = u_next;
    }
    Ok(Trajectory { times, states, outputs })
}

/// Mass-spring-damper chain with `n_masses` masses, each tied to the ground
/// and to its neighbours by a spring and a damper. The state is
/// `(positions, momenta)`, forces act on the first and last mass, and the
/// output is the first position plus the Hamiltonian
/// `p^T p / (2 m) + q^T K q / 2`.
pub fn build_msd<T: Real>(n_masses: usize, mass: T, stiffness: T, damping: T) -> Result<LpoSystem<T>> {
    if n_masses == 0 {
        return Err(Error::InvalidArgument("at least one mass is required".into()));
    }
    for (name, v) in [("mass", mass), ("stiffness", stiffness), ("damping", damping)] {
        if !(v > T::zero()) || !v.is_finite_value() {
            return Err(Error::InvalidArgument(format!(
                "{name} must be positive, got {}",
                v.to_f64_lossy()
            )));
        }
    }
    let nm = n_masses;
    let n = 2 * nm;
    let chain = |coef: T| {
        let mut m = DMatrix::zeros(nm, nm);
        for i in 0..nm {
            let neighbours = usize::from(i > 0) + usize::from(i + 1 < nm);
            m[(i, i)] = coef * T::from_count(1 + neighbours);
            if i + 1 < nm {
                m[(i, i + 1)] = -coef;
                m[(i + 1, i)] = -coef;
            }
        }
        m
    };
    let k = chain(stiffness);
    let d = chain(damping);
    let inv_m = T::one() / mass;
    let mut a = DMatrix::zeros(n, n);
    for i in 0..nm {
        a[(i, nm + i)] = inv_m;
    }
    a.view_mut((nm, 0), (nm, nm)).copy_from(&(-&k));
    a.view_mut((nm, nm), (nm, nm)).copy_from(&(-&d * inv_m));
    let mut b = DMatrix::zeros(n, 2);
    b[(nm, 0)] = T::one();
    b[(n - 1, 1)] = T::one();

    // Hamiltonian quadratic form, stored through its eigendecomposition
    let mut h = DMatrix::zeros(n, n);
    h.view_mut((0, 0), (nm, nm)).copy_from(&(&k * T::lit(0.5)));
    for i in 0..nm {
        h[(nm + i, nm + i)] = inv_m * T::lit(0.5);
    }
    let (values, vectors) = linalg::symmetric_eigen_desc(&h);
    let c2 = CpVector::symmetric_sum(&vectors, values.as_slice(), 2)?;
    let c1 = CpVector::unit(n, 0);
    LpoSystem::new(a, b, vec![c1, c2])
}

/// Convection-diffusion on the unit square with homogeneous Dirichlet data,
/// `g x g` interior grid points ordered with x fastest, 5-point Laplacian and
/// first-order upwind convection with velocity `(v, v)`. `B` is all ones and
/// the output is `10 x_1 + 100 x_2^2 + 1000 x_3^3`.
pub fn build_convdiff<T: Real>(g: usize, v: T) -> Result<LpoSystem<T>> {
    if g < 3 {
        return Err(Error::InvalidArgument(format!("grid needs g >= 3, got {g}")));
    }
    if !v.is_finite_value() || v < T::zero() {
        return Err(Error::InvalidArgument(format!(
            "convection speed must be non-negative, got {}",
            v.to_f64_lossy()
        )));
    }
    let n = g * g;
    let h = T::one() / T::from_count(g + 1);
    let diff = T::one() / (h * h);
    let conv = v / h;
    let idx = |i: usize, j: usize| i + g * j;
    let mut a = DMatrix::zeros(n, n);
    for j in 0..g {
        for i in 0..g {
            let p = idx(i, j);
            a[(p, p)] = -diff * T::lit(4.0) - conv * T::lit(2.0);
            if i > 0 {
                a[(p, idx(i - 1, j))] = diff + conv;
            }
            if i + 1 < g {
                a[(p, idx(i + 1, j))] = diff;
            }
            if j > 0 {
                a[(p, idx(i, j - 1))] = diff + conv;
            }
            if j + 1 < g {
                a[(p, idx(i, j + 1))] = diff;
            }
        }
    }
    let b = DMatrix::from_element(n, 1, T::one());
    let c1 = CpVector::unit(n, 0).scale(T::lit(10.0));
    let c2 = CpVector::power(&unit_vector(n, 1), 2).scale(T::lit(100.0));
    let c3 = CpVector::power(&unit_vector(n, 2), 3).scale(T::lit(1000.0));
    LpoSystem::new(a, b, vec![c1, c2, c3])
}

fn unit_vector<T: Real>(n: usize, i: usize) -> DVector<T> {
    let mut e = DVector::zeros(n);
    e[i] = T::one();
    e
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMetrics<T: Real> {
    pub linf: T,
    /// Trapezoidal `L2` norm of the difference.
    pub l2: T,
    pub pointwise: Vec<T>,
}

pub fn error_metrics<T: Real>(y_ref: &Trajectory<T>, y_rom: &Trajectory<T>) -> Result<ErrorMetrics<T>> {
    if y_ref.len() != y_rom.len() {
        return Err(Error::Dimension(format!(
            "trajectories have {} and {} samples",
            y_ref.len(),
            y_rom.len()
        )));
    }
    let tol = T::tol(1e-9);
    for (a, b) in y_ref.times.iter().zip(&y_rom.times) {
        if (*a - *b).abs() > tol * a.abs().max(T::one()) {
            return Err(Error::Dimension(format!(
                "time grids differ at t = {} vs {}",
                a.to_f64_lossy(),
                b.to_f64_lossy()
            )));
        }
    }
    let pointwise: Vec<T> = y_ref
        .outputs
        .iter()
        .zip(&y_rom.outputs)
        .map(|(a, b)| (*a - *b).abs())
        .collect();
    let linf = pointwise.iter().fold(T::zero(), |m, &v| m.max(v));
    let sq: Vec<T> = pointwise.iter().map(|&e| e * e).collect();
    let l2 = trapezoid(&y_ref.times, &sq).sqrt();
    Ok(ErrorMetrics { linf, l2, pointwise })
}

/// Trapezoidal rule on an arbitrary grid.
pub fn trapezoid<T: Real>(times: &[T], values: &[T]) -> T {
    times
        .windows(2)
        .zip(values.windows(2))
        .fold(T::zero(), |acc, (t, v)| acc + (t[1] - t[0]) * (v[0] + v[1]) * T::lit(0.5))
}

/// `max_t |y(t)|`.
pub fn linf_norm<T: Real>(traj: &Trajectory<T>) -> T {
    traj.outputs.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
}

//! Vectors in `R^(n^k)` held in canonical polyadic (CP) form.
//!
//! A [`CpVector`] of order `k` and rank `R` represents
//!
//! ```text
//! w = sum_j weight_j * u_1^j ⊗ u_2^j ⊗ ... ⊗ u_k^j
//! ```
//!
//! where the first slot is the slowest-varying index of the dense
//! expansion. Factor columns live in a shared column pool and each term
//! stores the pool index used in every slot. Operations that only
//! reshuffle terms (permutation, symmetrization, Kronecker products) never
//! copy column data, and matrix actions that hit every slot with the same
//! matrix touch each distinct column once.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;

/// Largest dense expansion [`CpVector::densify`] agrees to build.
pub const MAX_DENSE_LEN: usize = 100_000_000;

/// Terms per parallel work item. Fixed so reductions do not depend on the
/// thread count.
const CHUNK: usize = 4096;

/// A bijection on the slots `0..k` of an order-`k` tensor.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    /// `map[i]` is the slot of the input that lands in slot `i` of the output.
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let k = map.len();
        let mut seen = vec![false; k];
        for &m in &map {
            if m >= k || seen[m] {
                return Err(Error::InvalidArgument(format!(
                    "{map:?} is not a permutation of 0..{k}"
                )));
            }
            seen[m] = true;
        }
        Ok(Self { map })
    }

    pub fn identity(k: usize) -> Self {
        Self {
            map: (0..k).collect(),
        }
    }

    pub fn order(&self) -> usize {
        self.map.len()
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    /// All `k!` permutations in lexicographic order.
    pub fn all(k: usize) -> Vec<Permutation> {
        let mut cur: Vec<usize> = (0..k).collect();
        let mut out = vec![Permutation { map: cur.clone() }];
        while next_permutation(&mut cur) {
            out.push(Permutation { map: cur.clone() });
        }
        out
    }
}

/// Advances `v` to the next lexicographic arrangement; false after the last one.
fn next_permutation<E: Ord>(v: &mut [E]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// All perfect matchings of the slots `0..2 kappa`.
pub fn perfect_matchings(slots: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(rest: &[usize], acc: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if rest.is_empty() {
            out.push(acc.clone());
            return;
        }
        let first = rest[0];
        for i in 1..rest.len() {
            acc.push((first, rest[i]));
            let remaining: Vec<usize> = rest[1..]
                .iter()
                .enumerate()
                .filter(|&(idx, _)| idx + 1 != i)
                .map(|(_, &v)| v)
                .collect();
            rec(&remaining, acc, out);
            acc.pop();
        }
    }
    let mut out = Vec::new();
    if slots.is_multiple_of(2) {
        let all: Vec<usize> = (0..slots).collect();
        rec(&all, &mut Vec::new(), &mut out);
    }
    out
}

fn column_key<T: Real>(col: &[T]) -> Vec<u64> {
    col.iter()
        .map(|v| {
            let x = v.to_f64_lossy();
            if x == 0.0 {
                0
            } else {
                x.to_bits()
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpVector<T: Real> {
    order: usize,
    dim: usize,
    pool: DMatrix<T>,
    /// Pool indices, term-major: slot `s` of term `j` is `terms[j * order + s]`.
    terms: Vec<u32>,
    weights: Vec<T>,
}

impl<T: Real> CpVector<T> {
    /// The zero vector, stored with rank 0.
    pub fn zeros(order: usize, dim: usize) -> Self {
        assert!(order >= 1, "CP order must be at least 1");
        Self {
            order,
            dim,
            pool: DMatrix::zeros(dim, 0),
            terms: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Builds a CP vector from `k` factor matrices of identical shape `n x R`.
    pub fn from_factors(factors: Vec<DMatrix<T>>) -> Result<Self> {
        let order = factors.len();
        if order == 0 {
            return Err(Error::InvalidArgument("a CP vector needs at least one factor".into()));
        }
        let (dim, rank) = factors[0].shape();
        for (s, f) in factors.iter().enumerate() {
            if f.shape() != (dim, rank) {
                return Err(Error::Dimension(format!(
                    "factor {s} is {}x{}, expected {dim}x{rank}",
                    f.nrows(),
                    f.ncols()
                )));
            }
        }
        let mut pool = DMatrix::zeros(dim, order * rank);
        for (s, f) in factors.iter().enumerate() {
            pool.columns_mut(s * rank, rank).copy_from(f);
        }
        let mut terms = Vec::with_capacity(order * rank);
        for j in 0..rank {
            for s in 0..order {
                terms.push((s * rank + j) as u32);
            }
        }
        let mut out = Self {
            order,
            dim,
            pool,
            terms,
            weights: vec![T::one(); rank],
        };
        out.dedup_pool();
        Ok(out)
    }

    /// Low-level constructor from a column pool, term index tuples and weights.
    pub fn from_parts(
        order: usize,
        pool: DMatrix<T>,
        terms: Vec<u32>,
        weights: Vec<T>,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("a CP vector needs at least one factor".into()));
        }
        if terms.len() != order * weights.len() {
            return Err(Error::Dimension(format!(
                "{} term indices for {} terms of order {order}",
                terms.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = terms.iter().find(|&&t| t as usize >= pool.ncols()) {
            return Err(Error::Dimension(format!(
                "term index {bad} outside pool of {} columns",
                pool.ncols()
            )));
        }
        Ok(Self {
            order,
            dim: pool.nrows(),
            pool,
            terms,
            weights,
        })
    }

    /// `u_1 ⊗ ... ⊗ u_k`.
    pub fn rank_one(vectors: &[DVector<T>]) -> Result<Self> {
        let factors = vectors
            .iter()
            .map(|v| DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
            .collect();
        Self::from_factors(factors)
    }

    /// `u ⊗ u ⊗ ... ⊗ u` with `order` slots.
    pub fn power(u: &DVector<T>, order: usize) -> Self {
        let pool = DMatrix::from_column_slice(u.len(), 1, u.as_slice());
        Self {
            order,
            dim: u.len(),
            pool,
            terms: vec![0; order],
            weights: vec![T::one()],
        }
    }

    /// Unit basis vector `e_i` as an order-1 CP vector.
    pub fn unit(dim: usize, i: usize) -> Self {
        let mut e = DVector::zeros(dim);
        e[i] = T::one();
        Self::power(&e, 1)
    }

    /// Sum of symmetric rank-one terms `sum_j weight_j u_j ⊗ ... ⊗ u_j`.
    pub fn symmetric_sum(columns: &DMatrix<T>, weights: &[T], order: usize) -> Result<Self> {
        if columns.ncols() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} columns but {} weights",
                columns.ncols(),
                weights.len()
            )));
        }
        let mut terms = Vec::with_capacity(order * weights.len());
        for j in 0..weights.len() {
            terms.extend(std::iter::repeat_n(j as u32, order));
        }
        Self::from_parts(order, columns.clone(), terms, weights.to_vec())
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of rank-one terms in the representation.
    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn is_zero_rank(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn pool(&self) -> &DMatrix<T> {
        &self.pool
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn term(&self, j: usize) -> &[u32] {
        &self.terms[j * self.order..(j + 1) * self.order]
    }

    /// Factor matrix of slot `s` with term weights folded into slot 0.
    pub fn factor(&self, s: usize) -> DMatrix<T> {
        let rank = self.rank();
        let mut out = DMatrix::zeros(self.dim, rank);
        for j in 0..rank {
            let idx = self.term(j)[s] as usize;
            let mut col = out.column_mut(j);
            col.copy_from(&self.pool.column(idx));
            if s == 0 {
                col.scale_mut(self.weights[j]);
            }
        }
        out
    }

    /// All factor matrices, weights folded into the first one.
    pub fn factors(&self) -> Vec<DMatrix<T>> {
        (0..self.order).map(|s| self.factor(s)).collect()
    }

    pub fn scale(&self, alpha: T) -> Self {
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w *= alpha);
        out
    }

    /// Merges bitwise-identical pool columns and drops unused ones. The
    /// represented vector and the rank are unchanged.
    pub fn dedup_pool(&mut self) {
        let mut remap = vec![u32::MAX; self.pool.ncols()];
        let mut used = vec![false; self.pool.ncols()];
        for &t in &self.terms {
            used[t as usize] = true;
        }
        let mut seen: HashMap<Vec<u64>, u32> = HashMap::new();
        let mut keep = Vec::new();
        for (c, &is_used) in used.iter().enumerate() {
            if !is_used {
                continue;
            }
            let key = column_key(self.pool.column(c).as_slice());
            let id = *seen.entry(key).or_insert_with(|| {
                keep.push(c);
                (keep.len() - 1) as u32
            });
            remap[c] = id;
        }
        if keep.len() == self.pool.ncols() && keep.iter().enumerate().all(|(i, &c)| i == c) {
            return;
        }
        self.pool = self.pool.select_columns(keep.iter());
        self.terms.iter_mut().for_each(|t| *t = remap[*t as usize]);
    }

    /// Merges terms with identical index tuples by summing their weights and
    /// removes terms whose weight is exactly zero.
    pub fn merge_terms(&self) -> Self {
        let mut index: HashMap<&[u32], usize> = HashMap::new();
        let mut terms: Vec<u32> = Vec::new();
        let mut weights: Vec<T> = Vec::new();
        for j in 0..self.rank() {
            let key = self.term(j);
            match index.get(key) {
                Some(&pos) => weights[pos] += self.weights[j],
                None => {
                    index.insert(key, weights.len());
                    terms.extend_from_slice(key);
                    weights.push(self.weights[j]);
                }
            }
        }
        let mut out_terms = Vec::with_capacity(terms.len());
        let mut out_weights = Vec::with_capacity(weights.len());
        for (j, &w) in weights.iter().enumerate() {
            if w != T::zero() {
                out_terms.extend_from_slice(&terms[j * self.order..(j + 1) * self.order]);
                out_weights.push(w);
            }
        }
        let mut out = Self {
            order: self.order,
            dim: self.dim,
            pool: self.pool.clone(),
            terms: out_terms,
            weights: out_weights,
        };
        out.dedup_pool();
        out
    }

    /// Sorts the slot indices of every term and merges the resulting
    /// duplicates. The symmetrization, and with it the homogeneous
    /// polynomial, is unchanged; the vector itself generally is not.
    pub fn merge_permuted_terms(&self) -> Self {
        let mut out = self.clone();
        if self.order > 1 {
            out.terms.chunks_mut(self.order).for_each(|t| t.sort_unstable());
        }
        out.merge_terms()
    }

    /// Rank compression: columns that are parallel within `tol` (in the
    /// sense `1 - |cos| <= tol`) are expressed through one representative,
    /// after which terms with identical index tuples are merged.
    ///
    /// Candidates are found by bucketing sign-normalized unit columns on a
    /// grid of width `sqrt(2 tol)`, so pairs straddling a bucket boundary
    /// may survive uncompressed.
    pub fn compress(&self, tol: T) -> Self {
        let ncols = self.pool.ncols();
        let grid = (tol * T::lit(2.0)).sqrt().max(T::default_epsilon());
        let mut reps: Vec<DVector<T>> = Vec::new();
        let mut buckets: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        // (representative, scale) per pool column; None for a zero column
        let mut mapping: Vec<Option<(u32, T)>> = Vec::with_capacity(ncols);
        for c in 0..ncols {
            let col = self.pool.column(c);
            let nrm = col.norm();
            if nrm == T::zero() {
                mapping.push(None);
                continue;
            }
            let mut unit = col.unscale(nrm);
            let lead = unit
                .iter()
                .enumerate()
                .fold((0, T::zero()), |(bi, bv), (i, &v)| {
                    if v.abs() > bv.abs() {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0;
            let sign = if unit[lead] < T::zero() { -T::one() } else { T::one() };
            unit.scale_mut(sign);
            let key: Vec<i64> = unit
                .iter()
                .map(|&v| (v / grid).round().to_f64_lossy() as i64)
                .collect();
            let bucket = buckets.entry(key).or_default();
            let mut found = None;
            for &r in bucket.iter() {
                let cos = reps[r].dot(&unit);
                if T::one() - cos.abs() <= tol {
                    found = Some((r as u32, nrm * sign * cos));
                    break;
                }
            }
            let entry = match found {
                Some(e) => e,
                None => {
                    reps.push(unit);
                    bucket.push(reps.len() - 1);
                    ((reps.len() - 1) as u32, nrm * sign)
                }
            };
            mapping.push(Some(entry));
        }
        let mut pool = DMatrix::zeros(self.dim, reps.len());
        for (i, r) in reps.iter().enumerate() {
            pool.set_column(i, r);
        }
        let mut terms = Vec::with_capacity(self.terms.len());
        let mut weights = Vec::with_capacity(self.rank());
        'term: for j in 0..self.rank() {
            let mut w = self.weights[j];
            let start = terms.len();
            for &t in self.term(j) {
                match mapping[t as usize] {
                    Some((rep, s)) => {
                        terms.push(rep);
                        w *= s;
                    }
                    None => {
                        terms.truncate(start);
                        continue 'term;
                    }
                }
            }
            weights.push(w);
        }
        Self {
            order: self.order,
            dim: self.dim,
            pool,
            terms,
            weights,
        }
        .merge_terms()
    }

    /// Explicit Kronecker expansion of length `n^k`, refused above
    /// [`MAX_DENSE_LEN`] entries.
    pub fn densify(&self) -> Result<DVector<T>> {
        let len = (self.dim as u128).pow(self.order as u32);
        if len > MAX_DENSE_LEN as u128 {
            return Err(Error::InvalidArgument(format!(
                "dense expansion with {len} entries exceeds the {MAX_DENSE_LEN} entry limit"
            )));
        }
        let len = len as usize;
        let mut out = DVector::zeros(len);
        let mut buf = Vec::with_capacity(len);
        let mut next = Vec::with_capacity(len);
        for j in 0..self.rank() {
            buf.clear();
            buf.push(self.weights[j]);
            for &t in self.term(j) {
                let col = self.pool.column(t as usize);
                next.clear();
                for &a in &buf {
                    for &b in col.iter() {
                        next.push(a * b);
                    }
                }
                std::mem::swap(&mut buf, &mut next);
            }
            for (o, &v) in out.iter_mut().zip(buf.iter()) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// The canonical `n^kappa x n^kappa` matricization of an order-`2 kappa`
    /// vector (column-major reshape of the dense expansion). Its trace pairs
    /// slot `m` with slot `kappa + m`.
    pub fn square_matricization(&self) -> Result<DMatrix<T>> {
        if !self.order.is_multiple_of(2) {
            return Err(Error::OddOrder(self.order));
        }
        let side = self.dim.pow((self.order / 2) as u32);
        let dense = self.densify()?;
        Ok(DMatrix::from_column_slice(side, side, dense.as_slice()))
    }

    /// For order 2: the `n x n` matrix `M` with `vec(M) = w` (column-major),
    /// i.e. `M = sum_j weight_j u_2^j (u_1^j)^T`. Built without densifying.
    pub fn matrix_form(&self) -> Result<DMatrix<T>> {
        if self.order != 2 {
            return Err(Error::InvalidArgument(format!(
                "matrix form needs order 2, got {}",
                self.order
            )));
        }
        let f1 = self.factor(0);
        let f2 = self.factor(1);
        Ok(f2 * f1.transpose())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::Dimension(format!(
                "vector of length {len} does not match CP dimension {}",
                self.dim
            )));
        }
        Ok(())
    }

    /// Evaluates the homogeneous polynomial `w^T (x ⊗ ... ⊗ x)`.
    pub fn eval(&self, x: &DVector<T>) -> Result<T> {
        self.check_dim(x.len())?;
        if self.is_zero_rank() {
            return Ok(T::zero());
        }
        let proj = self.pool.tr_mul(x);
        let k = self.order;
        let partial: Vec<T> = self
            .weights
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, ws)| {
                let base = c * CHUNK;
                let mut acc = T::zero();
                for (off, &w) in ws.iter().enumerate() {
                    let j = base + off;
                    let mut p = w;
                    for &t in &self.terms[j * k..(j + 1) * k] {
                        p *= proj[t as usize];
                    }
                    acc += p;
                }
                acc
            })
            .collect();
        Ok(partial.into_iter().fold(T::zero(), |a, b| a + b))
    }

    /// Gradient of `x -> w^T (x ⊗ ... ⊗ x)`, valid for any (not necessarily
    /// symmetric) coefficient.
    pub fn eval_gradient(&self, x: &DVector<T>) -> Result<DVector<T>> {
        self.check_dim(x.len())?;
        let ncols = self.pool.ncols();
        if self.is_zero_rank() {
            return Ok(DVector::zeros(self.dim));
        }
        let proj = self.pool.tr_mul(x);
        let k = self.order;
        let partial: Vec<Vec<T>> = self
            .weights
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, ws)| {
                let base = c * CHUNK;
                let mut acc = vec![T::zero(); ncols];
                for (off, &w) in ws.iter().enumerate() {
                    let j = base + off;
                    let idx = &self.terms[j * k..(j + 1) * k];
                    for s in 0..k {
                        let mut p = w;
                        for (m, &t) in idx.iter().enumerate() {
                            if m != s {
                                p *= proj[t as usize];
                            }
                        }
                        acc[idx[s] as usize] += p;
                    }
                }
                acc
            })
            .collect();
        let mut coef = DVector::zeros(ncols);
        for part in partial {
            for (c, v) in coef.iter_mut().zip(part) {
                *c += v;
            }
        }
        Ok(&self.pool * coef)
    }

    /// Reorders the slots: slot `i` of the result is slot `tau(i)` of `self`.
    pub fn permute(&self, tau: &Permutation) -> Result<Self> {
        if tau.order() != self.order {
            return Err(Error::Dimension(format!(
                "permutation of order {} applied to CP vector of order {}",
                tau.order(),
                self.order
            )));
        }
        let k = self.order;
        let mut terms = Vec::with_capacity(self.terms.len());
        for j in 0..self.rank() {
            let idx = self.term(j);
            terms.extend(tau.map().iter().map(|&m| idx[m]));
        }
        debug_assert_eq!(terms.len(), k * self.rank());
        Ok(Self {
            terms,
            ..self.clone()
        })
    }

    /// Average over all slot orderings. Coinciding orderings (repeated
    /// factor columns) are emitted once with their combined weight, and
    /// identical terms across the whole vector are merged.
    pub fn symmetrize(&self) -> Self {
        let mut base = self.clone();
        base.dedup_pool();
        let k = self.order;
        let mut terms = Vec::new();
        let mut weights = Vec::new();
        for j in 0..base.rank() {
            let mut ids: Vec<u32> = base.term(j).to_vec();
            ids.sort_unstable();
            let start = weights.len();
            loop {
                terms.extend_from_slice(&ids);
                weights.push(base.weights[j]);
                if !next_permutation(&mut ids) {
                    break;
                }
            }
            let count = T::from_count(weights.len() - start);
            for w in &mut weights[start..] {
                *w /= count;
            }
        }
        debug_assert_eq!(terms.len(), k * weights.len());
        Self {
            order: k,
            dim: self.dim,
            pool: base.pool,
            terms,
            weights,
        }
        .merge_terms()
    }

    /// Applies `M_1 ⊗ ... ⊗ M_k`; each `M_s` must have `n` columns and all
    /// must share the same row count.
    pub fn apply_factorwise(&self, mats: &[DMatrix<T>]) -> Result<Self> {
        if mats.len() != self.order {
            return Err(Error::Dimension(format!(
                "{} matrices supplied for a CP vector of order {}",
                mats.len(),
                self.order
            )));
        }
        let rows = mats[0].nrows();
        for (s, m) in mats.iter().enumerate() {
            if m.ncols() != self.dim || m.nrows() != rows {
                return Err(Error::Dimension(format!(
                    "matrix {s} is {}x{}, expected {rows}x{}",
                    m.nrows(),
                    m.ncols(),
                    self.dim
                )));
            }
        }
        if mats.iter().all(|m| m == &mats[0]) {
            return self.apply_all(&mats[0]);
        }
        let p = self.pool.ncols();
        let mut pool = DMatrix::zeros(rows, p * self.order);
        for (s, m) in mats.iter().enumerate() {
            pool.columns_mut(s * p, p).copy_from(&(m * &self.pool));
        }
        let k = self.order;
        let terms = self
            .terms
            .iter()
            .enumerate()
            .map(|(i, &t)| t + ((i % k) * p) as u32)
            .collect();
        let mut out = Self {
            order: k,
            dim: rows,
            pool,
            terms,
            weights: self.weights.clone(),
        };
        out.dedup_pool();
        Ok(out)
    }

    /// Applies `M ⊗ ... ⊗ M` (the same matrix in every slot).
    pub fn apply_all(&self, m: &DMatrix<T>) -> Result<Self> {
        if m.ncols() != self.dim {
            return Err(Error::Dimension(format!(
                "matrix with {} columns applied to CP vector of dimension {}",
                m.ncols(),
                self.dim
            )));
        }
        Ok(Self {
            order: self.order,
            dim: m.nrows(),
            pool: m * &self.pool,
            terms: self.terms.clone(),
            weights: self.weights.clone(),
        })
    }

    /// Kronecker product `a ⊗ b` of order `p + q` and rank `R_a R_b`.
    pub fn kron(a: &Self, b: &Self) -> Result<Self> {
        if a.dim != b.dim {
            return Err(Error::Dimension(format!(
                "Kronecker product of CP vectors with dimensions {} and {}",
                a.dim, b.dim
            )));
        }
        let pa = a.pool.ncols();
        let mut pool = DMatrix::zeros(a.dim, pa + b.pool.ncols());
        pool.columns_mut(0, pa).copy_from(&a.pool);
        pool.columns_mut(pa, b.pool.ncols()).copy_from(&b.pool);
        let order = a.order + b.order;
        let mut terms = Vec::with_capacity(order * a.rank() * b.rank());
        let mut weights = Vec::with_capacity(a.rank() * b.rank());
        for ja in 0..a.rank() {
            for jb in 0..b.rank() {
                terms.extend_from_slice(a.term(ja));
                terms.extend(b.term(jb).iter().map(|&t| t + pa as u32));
                weights.push(a.weights[ja] * b.weights[jb]);
            }
        }
        let mut out = Self {
            order,
            dim: a.dim,
            pool,
            terms,
            weights,
        };
        out.dedup_pool();
        Ok(out)
    }

    /// `a + b` by concatenating terms; rank is `R_a + R_b`.
    pub fn add(a: &Self, b: &Self) -> Result<Self> {
        if a.order != b.order || a.dim != b.dim {
            return Err(Error::Dimension(format!(
                "cannot add CP vectors of shapes (order {}, dim {}) and (order {}, dim {})",
                a.order, a.dim, b.order, b.dim
            )));
        }
        let pa = a.pool.ncols();
        let mut pool = DMatrix::zeros(a.dim, pa + b.pool.ncols());
        pool.columns_mut(0, pa).copy_from(&a.pool);
        pool.columns_mut(pa, b.pool.ncols()).copy_from(&b.pool);
        let mut terms = a.terms.clone();
        terms.extend(b.terms.iter().map(|&t| t + pa as u32));
        let mut weights = a.weights.clone();
        weights.extend_from_slice(&b.weights);
        let mut out = Self {
            order: a.order,
            dim: a.dim,
            pool,
            terms,
            weights,
        };
        out.dedup_pool();
        Ok(out)
    }

    fn projected_pool(&self, q: &DMatrix<T>, check: bool) -> Result<DMatrix<T>> {
        if q.nrows() != self.dim {
            return Err(Error::Dimension(format!(
                "basis has {} rows, CP dimension is {}",
                q.nrows(),
                self.dim
            )));
        }
        if check {
            linalg::check_orthonormal(q)?;
        }
        Ok(q.tr_mul(&self.pool))
    }

    /// `tr((Q ⊗ ... ⊗ Q)^T W (Q ⊗ ... ⊗ Q))` for the square matricization
    /// `W` of a symmetric order-`2 kappa` vector, evaluated term-wise as
    /// `sum_j weight_j prod_m (u_{kappa+m}^j)^T Q Q^T u_m^j`.
    ///
    /// The coefficient must already be symmetric; see
    /// [`CpVector::sym_pair_trace`] for the implicitly symmetrized variant.
    pub fn pair_trace(&self, q: &DMatrix<T>) -> Result<T> {
        let kappa = self.half_order()?;
        let matching: Vec<(usize, usize)> = (0..kappa).map(|m| (m, kappa + m)).collect();
        Ok(self.contract_matchings(q, &[matching], false, true)?.0)
    }

    /// [`CpVector::pair_trace`] of the symmetrization of `self`, computed
    /// without forming it: the average over all perfect matchings of the
    /// `2 kappa` slots.
    pub fn sym_pair_trace(&self, q: &DMatrix<T>) -> Result<T> {
        let kappa = self.half_order()?;
        Ok(self
            .contract_matchings(q, &perfect_matchings(2 * kappa), false, true)?
            .0)
    }

    /// Value and Euclidean gradient (an `n x r` matrix) of `Q -> pair trace`.
    /// With `implicit_symmetrization` the coefficient is treated as its
    /// symmetrization.
    pub fn pair_trace_with_gradient(
        &self,
        q: &DMatrix<T>,
        implicit_symmetrization: bool,
    ) -> Result<(T, DMatrix<T>)> {
        self.pair_trace_impl(q, implicit_symmetrization, true)
    }

    /// [`CpVector::pair_trace_with_gradient`] without the orthonormality
    /// check. For arbitrary `Q` this is the polynomial
    /// `sum_j weight_j prod_m (u_m^j)^T Q Q^T u_{kappa+m}^j`, which makes it
    /// usable for finite-difference checks off the Stiefel manifold.
    pub fn pair_trace_with_gradient_unchecked(
        &self,
        q: &DMatrix<T>,
        implicit_symmetrization: bool,
    ) -> Result<(T, DMatrix<T>)> {
        self.pair_trace_impl(q, implicit_symmetrization, false)
    }

    fn pair_trace_impl(
        &self,
        q: &DMatrix<T>,
        implicit_symmetrization: bool,
        check: bool,
    ) -> Result<(T, DMatrix<T>)> {
        let kappa = self.half_order()?;
        let matchings = if implicit_symmetrization {
            perfect_matchings(2 * kappa)
        } else {
            vec![(0..kappa).map(|m| (m, kappa + m)).collect()]
        };
        let (value, grad) = self.contract_matchings(q, &matchings, true, check)?;
        Ok((value, grad.expect("gradient requested")))
    }

    fn half_order(&self) -> Result<usize> {
        if !self.order.is_multiple_of(2) {
            return Err(Error::OddOrder(self.order));
        }
        Ok(self.order / 2)
    }

    fn contract_matchings(
        &self,
        q: &DMatrix<T>,
        matchings: &[Vec<(usize, usize)>],
        want_grad: bool,
        check: bool,
    ) -> Result<(T, Option<DMatrix<T>>)> {
        let proj = self.projected_pool(q, check)?;
        let r = q.ncols();
        let ncols = self.pool.ncols();
        if self.is_zero_rank() {
            let grad = want_grad.then(|| DMatrix::zeros(self.dim, r));
            return Ok((T::zero(), grad));
        }
        let k = self.order;
        let inv_count = T::one() / T::from_count(matchings.len());
        let pdata = proj.as_slice();
        let col = |c: u32| &pdata[c as usize * r..(c as usize + 1) * r];
        let dot = |a: &[T], b: &[T]| a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y);
        let partial: Vec<(T, Option<Vec<T>>)> = self
            .weights
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, ws)| {
                let base = c * CHUNK;
                let mut value = T::zero();
                let mut acc = if want_grad {
                    Some(vec![T::zero(); r * ncols])
                } else {
                    None
                };
                let mut edge_vals: Vec<T> = Vec::with_capacity(k / 2);
                for (off, &w) in ws.iter().enumerate() {
                    let j = base + off;
                    let idx = &self.terms[j * k..(j + 1) * k];
                    let scale = w * inv_count;
                    for matching in matchings {
                        edge_vals.clear();
                        for &(a, b) in matching {
                            edge_vals.push(dot(col(idx[a]), col(idx[b])));
                        }
                        let prod = edge_vals.iter().fold(T::one(), |p, &v| p * v);
                        value += scale * prod;
                        if let Some(acc) = acc.as_mut() {
                            for (e, &(a, b)) in matching.iter().enumerate() {
                                let mut others = scale;
                                for (f, &v) in edge_vals.iter().enumerate() {
                                    if f != e {
                                        others *= v;
                                    }
                                }
                                let (ia, ib) = (idx[a] as usize, idx[b] as usize);
                                let pb = col(idx[b]);
                                let pa = col(idx[a]);
                                for i in 0..r {
                                    acc[ia * r + i] += others * pb[i];
                                    acc[ib * r + i] += others * pa[i];
                                }
                            }
                        }
                    }
                }
                (value, acc)
            })
            .collect();
        let mut value = T::zero();
        let mut coef = if want_grad {
            Some(DMatrix::<T>::zeros(r, ncols))
        } else {
            None
        };
        for (v, acc) in partial {
            value += v;
            if let (Some(coef), Some(acc)) = (coef.as_mut(), acc) {
                for (c, a) in coef.as_mut_slice().iter_mut().zip(acc) {
                    *c += a;
                }
            }
        }
        let grad = coef.map(|coef| &self.pool * coef.transpose());
        Ok((value, grad))
    }
}

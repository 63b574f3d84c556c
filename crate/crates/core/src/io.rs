//! JSON documents for CP vectors, systems, energy functions and reduced
//! models. Numbers are written as shortest round-trip decimals.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cp_tensor::CpVector;
use crate::energy::EnergyFunction;
use crate::error::{Error, Result};
use crate::kron_solver::DegreeReport;
use crate::mor::{Provenance, ReducedModel};
use crate::scalar::Real;
use crate::system::LpoSystem;

/// `{order, dim, rank, factors}`; `factors[s]` is the column-major
/// `dim x rank` factor of slot `s`, with term weights folded into slot 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpJson {
    pub order: usize,
    pub dim: usize,
    pub rank: usize,
    pub factors: Vec<Vec<f64>>,
}

impl CpJson {
    pub fn from_cp<T: Real>(c: &CpVector<T>) -> Self {
        Self {
            order: c.order(),
            dim: c.dim(),
            rank: c.rank(),
            factors: c
                .factors()
                .iter()
                .map(|f| f.iter().map(|v| v.to_f64_lossy()).collect())
                .collect(),
        }
    }

    pub fn to_cp<T: Real>(&self) -> Result<CpVector<T>> {
        if self.factors.len() != self.order || self.order == 0 {
            return Err(Error::Dimension(format!(
                "CP vector of order {} lists {} factors",
                self.order,
                self.factors.len()
            )));
        }
        if self.rank == 0 {
            return Ok(CpVector::zeros(self.order, self.dim));
        }
        let mut mats = Vec::with_capacity(self.order);
        for (s, f) in self.factors.iter().enumerate() {
            if f.len() != self.dim * self.rank {
                return Err(Error::Dimension(format!(
                    "factor {s} has {} entries, expected {} x {}",
                    f.len(),
                    self.dim,
                    self.rank
                )));
            }
            mats.push(DMatrix::from_iterator(
                self.dim,
                self.rank,
                f.iter().map(|&v| T::lit(v)),
            ));
        }
        CpVector::from_factors(mats)
    }
}

/// Compressed sparse rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsrJson {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

/// A matrix given either as a list of rows or in CSR form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixJson {
    Dense(Vec<Vec<f64>>),
    Csr(CsrJson),
}

impl MatrixJson {
    pub fn dense<T: Real>(m: &DMatrix<T>) -> Self {
        MatrixJson::Dense(
            m.row_iter()
                .map(|row| row.iter().map(|v| v.to_f64_lossy()).collect())
                .collect(),
        )
    }

    pub fn csr<T: Real>(m: &DMatrix<T>) -> Self {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != T::zero() {
                    indices.push(j);
                    values.push(v.to_f64_lossy());
                }
            }
            indptr.push(indices.len());
        }
        MatrixJson::Csr(CsrJson {
            nrows: m.nrows(),
            ncols: m.ncols(),
            indptr,
            indices,
            values,
        })
    }

    /// Dense rows, or CSR when at most a tenth of the entries are nonzero.
    pub fn auto<T: Real>(m: &DMatrix<T>) -> Self {
        let nnz = m.iter().filter(|v| **v != T::zero()).count();
        if m.nrows() >= 16 && nnz * 10 <= m.len() {
            Self::csr(m)
        } else {
            Self::dense(m)
        }
    }

    pub fn to_matrix<T: Real>(&self) -> Result<DMatrix<T>> {
        match self {
            MatrixJson::Dense(rows) => {
                let nrows = rows.len();
                let ncols = rows.first().map_or(0, |r| r.len());
                if rows.iter().any(|r| r.len() != ncols) {
                    return Err(Error::Dimension("dense matrix rows have unequal lengths".into()));
                }
                Ok(DMatrix::from_fn(nrows, ncols, |i, j| T::lit(rows[i][j])))
            }
            MatrixJson::Csr(c) => {
                if c.indptr.len() != c.nrows + 1
                    || c.indices.len() != c.values.len()
                    || c.indptr.last() != Some(&c.values.len())
                    || c.indptr.windows(2).any(|w| w[0] > w[1])
                {
                    return Err(Error::Dimension("inconsistent CSR index arrays".into()));
                }
                let mut m = DMatrix::zeros(c.nrows, c.ncols);
                for i in 0..c.nrows {
                    for p in c.indptr[i]..c.indptr[i + 1] {
                        let j = c.indices[p];
                        if j >= c.ncols {
                            return Err(Error::Dimension(format!(
                                "CSR column index {j} out of range for {} columns",
                                c.ncols
                            )));
                        }
                        m[(i, j)] += T::lit(c.values[p]);
                    }
                }
                Ok(m)
            }
        }
    }
}

/// `{n, m, d, A, B, outputs}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemFile {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    #[serde(rename = "A")]
    pub a: MatrixJson,
    #[serde(rename = "B")]
    pub b: MatrixJson,
    pub outputs: Vec<CpJson>,
}

impl SystemFile {
    pub fn from_system<T: Real>(sys: &LpoSystem<T>) -> Self {
        Self {
            n: sys.dim(),
            m: sys.inputs(),
            d: sys.degree(),
            a: MatrixJson::auto(sys.a()),
            b: MatrixJson::dense(sys.b()),
            outputs: sys.outputs().iter().map(CpJson::from_cp).collect(),
        }
    }

    /// Builds the system, checking stability unless `skip_stability`.
    pub fn to_system<T: Real>(&self, skip_stability: bool) -> Result<LpoSystem<T>> {
        let a = self.a.to_matrix()?;
        let b = self.b.to_matrix()?;
        if a.shape() != (self.n, self.n) || b.shape() != (self.n, self.m) || self.outputs.len() != self.d {
            return Err(Error::Dimension(format!(
                "header says n = {}, m = {}, d = {}; found A {}x{}, B {}x{}, {} outputs",
                self.n,
                self.m,
                self.d,
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                self.outputs.len()
            )));
        }
        let outputs = self
            .outputs
            .iter()
            .map(|c| c.to_cp())
            .collect::<Result<Vec<_>>>()?;
        if skip_stability {
            LpoSystem::new_unchecked(a, b, outputs)
        } else {
            LpoSystem::new(a, b, outputs)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub k: usize,
    pub ell: usize,
    pub capped: bool,
    pub rhs_rank: usize,
    pub rank: usize,
    pub rank_bound: usize,
}

impl From<&DegreeReport> for ReportJson {
    fn from(r: &DegreeReport) -> Self {
        Self {
            k: r.k,
            ell: r.ell,
            capped: r.capped,
            rhs_rank: r.rhs_rank,
            rank: r.rank,
            rank_bound: r.rank_bound,
        }
    }
}

/// Energy coefficients as a map from degree to CP vector, with the
/// symmetrization flags and optional per-degree solver metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyFile {
    pub n: usize,
    pub coefficients: BTreeMap<usize, CpJson>,
    #[serde(default)]
    pub symmetrized: BTreeMap<usize, bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reports: Vec<ReportJson>,
}

impl EnergyFile {
    pub fn from_energy<T: Real>(e: &EnergyFunction<T>, reports: &[DegreeReport]) -> Self {
        Self {
            n: e.dim(),
            coefficients: e.coefficients().iter().map(|(&k, w)| (k, CpJson::from_cp(w))).collect(),
            symmetrized: e.symmetrized_flags().clone(),
            reports: reports.iter().map(ReportJson::from).collect(),
        }
    }

    pub fn to_energy<T: Real>(&self) -> Result<EnergyFunction<T>> {
        let mut coefficients = BTreeMap::new();
        let mut flags = BTreeMap::new();
        for (&k, c) in &self.coefficients {
            let w = c.to_cp()?;
            if w.order() != k || w.dim() != self.n {
                return Err(Error::Dimension(format!(
                    "degree {k} entry has order {} and dimension {}",
                    w.order(),
                    w.dim()
                )));
            }
            coefficients.insert(k, w);
            flags.insert(k, self.symmetrized.get(&k).copied().unwrap_or(false));
        }
        EnergyFunction::from_parts(coefficients, flags)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionJson {
    #[serde(rename = "V")]
    pub v: MatrixJson,
    #[serde(rename = "W")]
    pub w: MatrixJson,
}

/// A reduced system in the system schema, plus provenance and projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedFile {
    #[serde(flatten)]
    pub system: SystemFile,
    pub provenance: Provenance,
    pub projection: ProjectionJson,
}

impl ReducedFile {
    pub fn from_model<T: Real>(rom: &ReducedModel<T>) -> Self {
        Self {
            system: SystemFile::from_system(&rom.reduced),
            provenance: rom.provenance.clone(),
            projection: ProjectionJson {
                v: MatrixJson::dense(&rom.v),
                w: MatrixJson::dense(&rom.w),
            },
        }
    }

    pub fn to_model<T: Real>(&self) -> Result<ReducedModel<T>> {
        Ok(ReducedModel {
            v: self.projection.v.to_matrix()?,
            w: self.projection.w.to_matrix()?,
            reduced: self.system.to_system(true)?,
            provenance: self.provenance.clone(),
        })
    }
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Reads a system document. Reduced-model documents are accepted too;
/// their extra fields are ignored.
pub fn read_system<T: Real>(path: &Path, skip_stability: bool) -> Result<LpoSystem<T>> {
    read_json::<SystemFile>(path)?.to_system(skip_stability)
}

pub fn write_system<T: Real>(path: &Path, sys: &LpoSystem<T>) -> Result<()> {
    write_json(path, &SystemFile::from_system(sys))
}

pub fn read_reduced<T: Real>(path: &Path) -> Result<ReducedModel<T>> {
    read_json::<ReducedFile>(path)?.to_model()
}

pub fn write_reduced<T: Real>(path: &Path, rom: &ReducedModel<T>) -> Result<()> {
    write_json(path, &ReducedFile::from_model(rom))
}

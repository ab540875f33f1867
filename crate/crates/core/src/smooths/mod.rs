//! Model terms: spline bases, penalties, frailty blocks and the assembled design.

pub mod crs;
pub mod design;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub use crs::CubicSplineBasis;
pub use design::{DesignOptions, Penalty, PenaltyKind, PenalizedDesign};

use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 10;

/// Eigenvalues below this fraction of the largest count as zero.
pub const NULL_SPACE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Spline,
    Linear,
    RandomEffect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub name: String,
    pub kind: TermKind,
    /// Covariate column, or grouping column for random effects.
    pub covariate: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Member of the minimal model; never penalized out.
    #[serde(default, rename = "fixed")]
    pub fixed_in_model: bool,
}

impl TermSpec {
    pub fn spline(name: &str, covariate: &str, k: usize) -> Self {
        Self {
            name: name.into(),
            kind: TermKind::Spline,
            covariate: covariate.into(),
            k: Some(k),
            fixed_in_model: false,
        }
    }

    pub fn linear(name: &str, covariate: &str) -> Self {
        Self {
            name: name.into(),
            kind: TermKind::Linear,
            covariate: covariate.into(),
            k: None,
            fixed_in_model: false,
        }
    }

    pub fn random_effect(name: &str, group: &str) -> Self {
        Self {
            name: name.into(),
            kind: TermKind::RandomEffect,
            covariate: group.into(),
            k: None,
            fixed_in_model: true,
        }
    }

    pub fn fixed(mut self) -> Self {
        self.fixed_in_model = true;
        self
    }

    pub fn basis_dim(&self) -> usize {
        self.k.unwrap_or(DEFAULT_K)
    }

    /// Whether the term takes part in selection (gets a null-space penalty).
    pub fn selectable(&self) -> bool {
        !self.fixed_in_model && self.kind != TermKind::RandomEffect
    }
}

/// Declarative model: candidate terms plus the names forming the minimal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub terms: Vec<TermSpec>,
    #[serde(default)]
    pub min_model: Vec<String>,
}

impl ModelSpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let mut spec: ModelSpec = serde_json::from_str(s)?;
        spec.normalize()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Marks minimal-model terms fixed and validates names and basis sizes.
    pub fn normalize(&mut self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (i, t) in self.terms.iter().enumerate() {
            if seen.insert(t.name.clone(), i).is_some() {
                return Err(Error::Spec(format!("duplicate term name `{}`", t.name)));
            }
            if t.kind == TermKind::Spline && t.basis_dim() < 4 {
                return Err(Error::Spec(format!("term `{}`: k must be >= 4", t.name)));
            }
        }
        for name in &self.min_model {
            let i = *seen
                .get(name)
                .ok_or_else(|| Error::Spec(format!("min_model names unknown term `{name}`")))?;
            self.terms[i].fixed_in_model = true;
        }
        Ok(())
    }

    pub fn minimal_terms(&self) -> Vec<TermSpec> {
        self.terms
            .iter()
            .filter(|t| t.fixed_in_model)
            .cloned()
            .collect()
    }

    pub fn candidate_terms(&self) -> Vec<TermSpec> {
        self.terms
            .iter()
            .filter(|t| !t.fixed_in_model)
            .cloned()
            .collect()
    }

    /// Overrides the basis dimension of every spline term.
    pub fn with_k(mut self, k: usize) -> Self {
        for t in &mut self.terms {
            if t.kind == TermKind::Spline {
                t.k = Some(k);
            }
        }
        self
    }
}

/// How a term maps a covariate value to model-matrix columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TermBasis {
    Spline { basis: CubicSplineBasis },
    /// Standardized covariate `(x - mean) / sd`.
    Linear { mean: f64, sd: f64 },
    RandomEffect { levels: Vec<String> },
}

impl TermBasis {
    pub fn dim(&self) -> usize {
        match self {
            TermBasis::Spline { basis } => basis.dim(),
            TermBasis::Linear { .. } => 1,
            TermBasis::RandomEffect { levels } => levels.len(),
        }
    }

    /// Dense rows at covariate values `xs` (not for random effects).
    pub fn design(&self, xs: &[f64]) -> Result<DMatrix<f64>> {
        match self {
            TermBasis::Spline { basis } => Ok(basis.design(xs)),
            TermBasis::Linear { mean, sd } => Ok(DMatrix::from_iterator(
                xs.len(),
                1,
                xs.iter().map(|x| (x - mean) / sd),
            )),
            TermBasis::RandomEffect { .. } => Err(Error::Spec(
                "random effects have no continuous basis".into(),
            )),
        }
    }
}

/// Evaluated block columns on the training rows.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockColumns {
    Dense(DMatrix<f64>),
    /// One indicator column per level; `level[i]` is row i's column.
    Indicator { level: Vec<usize>, n_levels: usize },
}

impl BlockColumns {
    pub fn ncols(&self) -> usize {
        match self {
            BlockColumns::Dense(m) => m.ncols(),
            BlockColumns::Indicator { n_levels, .. } => *n_levels,
        }
    }

    pub fn nrows(&self) -> usize {
        match self {
            BlockColumns::Dense(m) => m.nrows(),
            BlockColumns::Indicator { level, .. } => level.len(),
        }
    }

    /// Materialized dense copy (tests and small problems).
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            BlockColumns::Dense(m) => m.clone(),
            BlockColumns::Indicator { level, n_levels } => {
                let mut m = DMatrix::zeros(level.len(), *n_levels);
                for (i, &l) in level.iter().enumerate() {
                    m[(i, l)] = 1.0;
                }
                m
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedBlock {
    pub term: TermSpec,
    pub basis: TermBasis,
    pub columns: BlockColumns,
    /// Wiggliness penalty in the block's coefficient space (unscaled).
    pub s_wiggle: DMatrix<f64>,
    /// Shrinkage penalty on the null space of `s_wiggle`.
    pub s_null: Option<DMatrix<f64>>,
    pub knots: Vec<f64>,
}

impl PenalizedBlock {
    pub fn width(&self) -> usize {
        self.columns.ncols()
    }

    /// Whether `s_wiggle` carries any penalty at all.
    pub fn has_wiggle_penalty(&self) -> bool {
        self.s_wiggle.iter().any(|v| *v != 0.0)
    }
}

/// Centered cubic regression spline block on covariate values `x`.
pub fn cubic_spline_block(x: &[f64], k: usize) -> Result<PenalizedBlock> {
    cubic_spline_term(TermSpec::spline("s", "x", k), x)
}

pub fn cubic_spline_term(term: TermSpec, x: &[f64]) -> Result<PenalizedBlock> {
    let k = term.basis_dim();
    let knots = crs::quantile_knots(x, k).map_err(|e| Error::Term {
        term: term.name.clone(),
        message: e.to_string(),
    })?;
    let mut basis = CubicSplineBasis::with_knots(knots.clone())?;
    let raw = basis.raw_design(x);
    let colsum = DVector::from_iterator(k, raw.column_iter().map(|c| c.sum()));
    basis.absorb_constraint(&colsum)?;
    let z = basis.constraint().expect("absorbed").clone();
    let mut columns = raw * &z;
    // remove the rounding residue of the centering
    let n = x.len() as f64;
    for mut col in columns.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    let s_wiggle = symmetrize(basis.penalty());
    Ok(PenalizedBlock {
        term,
        basis: TermBasis::Spline { basis },
        columns: BlockColumns::Dense(columns),
        s_wiggle,
        s_null: None,
        knots,
    })
}

/// Standardized single-column linear block; unpenalized apart from selection.
pub fn linear_block(term: TermSpec, x: &[f64]) -> Result<PenalizedBlock> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Term {
            term: term.name.clone(),
            message: "covariate is constant".into(),
        });
    }
    let sd = var.sqrt();
    let columns = DMatrix::from_iterator(x.len(), 1, x.iter().map(|v| (v - mean) / sd));
    Ok(PenalizedBlock {
        term,
        basis: TermBasis::Linear { mean, sd },
        columns: BlockColumns::Dense(columns),
        s_wiggle: DMatrix::zeros(1, 1),
        s_null: None,
        knots: vec![],
    })
}

/// Identity-penalized indicator block for a grouping factor (frailty).
pub fn random_effect_block<S: AsRef<str>>(group: &[S]) -> Result<PenalizedBlock> {
    random_effect_term(TermSpec::random_effect("re", "group"), group)
}

pub fn random_effect_term<S: AsRef<str>>(term: TermSpec, group: &[S]) -> Result<PenalizedBlock> {
    let mut levels: Vec<String> = group.iter().map(|g| g.as_ref().to_string()).collect();
    levels.sort();
    levels.dedup();
    if levels.len() < 2 {
        return Err(Error::Term {
            term: term.name.clone(),
            message: "random effect needs at least 2 levels".into(),
        });
    }
    let index: BTreeMap<&str, usize> = levels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let level = group.iter().map(|g| index[g.as_ref()]).collect();
    let n_levels = levels.len();
    Ok(PenalizedBlock {
        term,
        basis: TermBasis::RandomEffect { levels },
        columns: BlockColumns::Indicator { level, n_levels },
        s_wiggle: DMatrix::identity(n_levels, n_levels),
        s_null: None,
        knots: vec![],
    })
}

/// Adds `S_null = U0 U0'`, with `U0` spanning the null space of `S_wiggle`.
///
/// A full-rank wiggle penalty leaves a zero `S_null` (logged).
pub fn null_shrinkage_penalty(mut block: PenalizedBlock) -> PenalizedBlock {
    let u0 = null_space_basis(&block.s_wiggle);
    if u0.ncols() == 0 {
        log::warn!(
            "term `{}`: wiggle penalty has full rank, null-space penalty is zero",
            block.term.name
        );
    }
    block.s_null = Some(symmetrize(&u0 * u0.transpose()));
    block
}

/// Orthonormal basis for the null space of a symmetric PSD matrix.
pub fn null_space_basis(s: &DMatrix<f64>) -> DMatrix<f64> {
    let p = s.nrows();
    let eig = SymmetricEigen::new(s.clone());
    let max = eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let cols: Vec<usize> = (0..p)
        .filter(|&i| eig.eigenvalues[i].abs() <= NULL_SPACE_TOL * max || max == 0.0)
        .collect();
    let mut u0 = DMatrix::zeros(p, cols.len());
    for (c, &i) in cols.iter().enumerate() {
        u0.set_column(c, &eig.eigenvectors.column(i));
    }
    u0
}

/// Numerical rank of a symmetric PSD matrix under [`NULL_SPACE_TOL`].
pub fn psd_rank(s: &DMatrix<f64>) -> usize {
    s.nrows() - null_space_basis(s).ncols()
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

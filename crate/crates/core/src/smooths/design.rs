//! Assembled model matrix over pseudo-data rows.
//!
//! Coefficients are laid out block by block in term order, followed by one
//! unpenalized coefficient per event-time stratum. Spline and linear blocks are
//! stored densely; random-effect and stratum blocks are indicator factors and
//! never materialized.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    cubic_spline_term, linear_block, null_shrinkage_penalty, random_effect_term, BlockColumns,
    PenalizedBlock, TermBasis, TermKind, TermSpec,
};
use crate::coxpois::PseudoData;
use crate::error::{Error, Result};
use crate::survdata::CohortTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Wiggle,
    Null,
    RandomEffect,
}

/// One penalty matrix `S_j`, embedded at `range` of the coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub label: String,
    pub kind: PenaltyKind,
    pub block: usize,
    pub range: Range<usize>,
    /// Scaled penalty (range.len() square).
    pub matrix: DMatrix<f64>,
    /// Factor applied to the block's raw penalty.
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DesignOptions {
    /// Attach null-space shrinkage penalties to selectable terms.
    pub null_penalties: bool,
}

#[derive(Debug, Clone)]
struct Factor {
    offset: usize,
    level: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PenalizedDesign {
    pub blocks: Vec<PenalizedBlock>,
    pub block_ranges: Vec<Range<usize>>,
    pub stratum_range: Range<usize>,
    /// Stratum level of each row (indicator columns of the event-time factor).
    pub stratum: Vec<usize>,
    pub penalties: Vec<Penalty>,
    pub total_p: usize,
    n: usize,
    dense: DMatrix<f64>,
    /// Global coefficient index of each dense column.
    dense_map: Vec<usize>,
    factors: Vec<Factor>,
}

impl PenalizedDesign {
    /// Builds blocks for `terms` on the pseudo-data rows.
    pub fn build(pseudo: &PseudoData, terms: &[TermSpec], opts: DesignOptions) -> Result<Self> {
        let blocks = terms
            .iter()
            .map(|t| build_block(pseudo, t, opts))
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(blocks, pseudo)
    }

    /// Assembles blocks built on `pseudo` plus its event-time stratum factor.
    pub fn from_blocks(blocks: Vec<PenalizedBlock>, pseudo: &PseudoData) -> Result<Self> {
        let stratum = pseudo.stratum.clone();
        let n_strata = pseudo.n_strata();
        let weights = pseudo.null_weights();
        let n = stratum.len();
        let mut offset = 0;
        let mut block_ranges = Vec::with_capacity(blocks.len());
        let mut dense_cols: Vec<&DMatrix<f64>> = Vec::new();
        let mut dense_map = Vec::new();
        let mut factors = Vec::new();
        let mut penalties = Vec::new();
        for (bi, b) in blocks.iter().enumerate() {
            if b.columns.nrows() != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: b.columns.nrows(),
                });
            }
            let w = b.width();
            let range = offset..offset + w;
            match &b.columns {
                BlockColumns::Dense(m) => {
                    dense_cols.push(m);
                    dense_map.extend(range.clone());
                }
                BlockColumns::Indicator { level, .. } => factors.push(Factor {
                    offset,
                    level: level.clone(),
                }),
            }
            penalties.extend(block_penalties(bi, b, range.clone(), &weights));
            block_ranges.push(range);
            offset += w;
        }
        let stratum_range = offset..offset + n_strata;
        if stratum.iter().any(|&s| s >= n_strata) {
            return Err(Error::Spec("stratum level out of range".into()));
        }
        factors.push(Factor {
            offset,
            level: stratum.clone(),
        });
        let total_p = offset + n_strata;
        let pd = dense_map.len();
        let mut dense = DMatrix::zeros(n, pd);
        let mut c = 0;
        for m in dense_cols {
            dense.columns_mut(c, m.ncols()).copy_from(m);
            c += m.ncols();
        }
        Ok(Self {
            blocks,
            block_ranges,
            stratum_range,
            stratum,
            penalties,
            total_p,
            n,
            dense,
            dense_map,
            factors,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_strata(&self) -> usize {
        self.stratum_range.len()
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.term.name == name)
    }

    /// Linear predictor `X beta`.
    pub fn eta(&self, beta: &DVector<f64>) -> DVector<f64> {
        assert_eq!(beta.len(), self.total_p);
        let mut eta = if self.dense_map.is_empty() {
            DVector::zeros(self.n)
        } else {
            let bd = DVector::from_iterator(self.dense_map.len(), self.dense_map.iter().map(|&g| beta[g]));
            &self.dense * bd
        };
        for f in &self.factors {
            for (e, &l) in eta.iter_mut().zip(&f.level) {
                *e += beta[f.offset + l];
            }
        }
        eta
    }

    /// Contribution of block `bi` to the linear predictor.
    pub fn block_eta(&self, bi: usize, beta: &DVector<f64>) -> DVector<f64> {
        let r = self.block_ranges[bi].clone();
        match &self.blocks[bi].columns {
            BlockColumns::Dense(m) => m * beta.rows(r.start, r.len()),
            BlockColumns::Indicator { level, .. } => {
                DVector::from_iterator(self.n, level.iter().map(|&l| beta[r.start + l]))
            }
        }
    }

    /// `X' v`.
    pub fn xt_v(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.total_p);
        if !self.dense_map.is_empty() {
            let d = self.dense.tr_mul(v);
            for (j, &g) in self.dense_map.iter().enumerate() {
                out[g] = d[j];
            }
        }
        for f in &self.factors {
            for (vi, &l) in v.iter().zip(&f.level) {
                out[f.offset + l] += vi;
            }
        }
        out
    }

    /// `X' diag(w) X`.
    pub fn xtwx(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let p = self.total_p;
        let pd = self.dense_map.len();
        let mut h = DMatrix::zeros(p, p);
        if pd > 0 {
            // transpose first: gemm is far faster than the dot-product tr_mul
            let mut xwt = self.dense.transpose();
            for (mut col, wi) in xwt.column_iter_mut().zip(w.iter()) {
                col *= *wi;
            }
            let g = &xwt * &self.dense;
            for (a, &ga) in self.dense_map.iter().enumerate() {
                for (b, &gb) in self.dense_map.iter().enumerate() {
                    h[(ga, gb)] = g[(a, b)];
                }
            }
        }
        for (fi, f) in self.factors.iter().enumerate() {
            for (i, &l) in f.level.iter().enumerate() {
                let c = f.offset + l;
                h[(c, c)] += w[i];
                for g in &self.factors[fi + 1..] {
                    let c2 = g.offset + g.level[i];
                    h[(c, c2)] += w[i];
                    h[(c2, c)] += w[i];
                }
            }
            for (j, &gj) in self.dense_map.iter().enumerate() {
                let col = self.dense.column(j);
                for (i, &l) in f.level.iter().enumerate() {
                    h[(gj, f.offset + l)] += w[i] * col[i];
                }
            }
        }
        // mirror dense x factor entries
        for &gj in &self.dense_map {
            for c in 0..p {
                if !self.is_dense(c) {
                    h[(c, gj)] = h[(gj, c)];
                }
            }
        }
        h
    }

    fn is_dense(&self, g: usize) -> bool {
        self.dense_map.binary_search(&g).is_ok()
    }

    /// Diagonal of `X M X'` for a symmetric p x p matrix `m`.
    pub fn leverages(&self, m: &DMatrix<f64>) -> DVector<f64> {
        let pd = self.dense_map.len();
        let mut lev = DVector::zeros(self.n);
        if pd > 0 {
            let mdd = DMatrix::from_fn(pd, pd, |a, b| m[(self.dense_map[a], self.dense_map[b])]);
            let t = &self.dense * mdd;
            for j in 0..pd {
                let (tc, xc) = (t.column(j), self.dense.column(j));
                for i in 0..self.n {
                    lev[i] += tc[i] * xc[i];
                }
            }
        }
        for (fi, f) in self.factors.iter().enumerate() {
            for (i, &l) in f.level.iter().enumerate() {
                let c = f.offset + l;
                lev[i] += m[(c, c)];
                for g in &self.factors[fi + 1..] {
                    lev[i] += 2.0 * m[(c, g.offset + g.level[i])];
                }
            }
            for (j, &gj) in self.dense_map.iter().enumerate() {
                let col = self.dense.column(j);
                for (i, &l) in f.level.iter().enumerate() {
                    lev[i] += 2.0 * col[i] * m[(gj, f.offset + l)];
                }
            }
        }
        lev
    }

    /// Total penalty `sum_j lambda_j S_j` as a p x p matrix.
    pub fn s_lambda(&self, lambda: &[f64]) -> DMatrix<f64> {
        assert_eq!(lambda.len(), self.penalties.len());
        let mut s = DMatrix::zeros(self.total_p, self.total_p);
        for (pen, &l) in self.penalties.iter().zip(lambda) {
            let r = &pen.range;
            let mut view = s.view_mut((r.start, r.start), (r.len(), r.len()));
            view += &pen.matrix * l;
        }
        s
    }

    /// Dense model matrix (for tests and small problems).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n, self.total_p);
        for (j, &g) in self.dense_map.iter().enumerate() {
            x.set_column(g, &self.dense.column(j));
        }
        for f in &self.factors {
            for (i, &l) in f.level.iter().enumerate() {
                x[(i, f.offset + l)] = 1.0;
            }
        }
        x
    }

    /// Term columns (strata excluded) evaluated on the cohort intervals, densely.
    pub fn term_matrix_on_cohort(&self, cohort: &CohortTable) -> Result<DMatrix<f64>> {
        let n = cohort.intervals().len();
        let mut x = DMatrix::zeros(n, self.stratum_range.start);
        for (b, r) in self.blocks.iter().zip(&self.block_ranges) {
            match &b.basis {
                TermBasis::RandomEffect { levels } => {
                    let labels = cohort_group_labels(cohort, &b.term.covariate)?;
                    for (i, lab) in labels.iter().enumerate() {
                        let l = levels.binary_search(lab).map_err(|_| Error::Term {
                            term: b.term.name.clone(),
                            message: format!("unknown level `{lab}`"),
                        })?;
                        x[(i, r.start + l)] = 1.0;
                    }
                }
                basis => {
                    let v = cohort.covariate_column(&b.term.covariate)?;
                    x.columns_mut(r.start, r.len()).copy_from(&basis.design(&v)?);
                }
            }
        }
        Ok(x)
    }
}

fn block_penalties(bi: usize, b: &PenalizedBlock, range: Range<usize>, weights: &[f64]) -> Vec<Penalty> {
    let name = &b.term.name;
    if b.term.kind == TermKind::RandomEffect {
        return vec![Penalty {
            label: format!("{name}:re"),
            kind: PenaltyKind::RandomEffect,
            block: bi,
            range,
            matrix: b.s_wiggle.clone(),
            scale: 1.0,
        }];
    }
    let target = information_scale(&b.columns, weights);
    let mut out = Vec::new();
    let mut push = |kind: PenaltyKind, m: &DMatrix<f64>, suffix: &str| {
        let norm = m.norm();
        if norm > 0.0 {
            let scale = target / norm;
            out.push(Penalty {
                label: format!("{name}:{suffix}"),
                kind,
                block: bi,
                range: range.clone(),
                matrix: m * scale,
                scale,
            });
        }
    };
    if b.has_wiggle_penalty() {
        push(PenaltyKind::Wiggle, &b.s_wiggle, "wiggle");
    }
    if let Some(sn) = &b.s_null {
        push(PenaltyKind::Null, sn, "null");
    }
    out
}

/// Size of the block's Fisher information `X_j' W0 X_j` under the stratum-only
/// model, so that `rho = 0` balances penalty and data and `|rho| = 15` is
/// effectively a limit.
fn information_scale(cols: &BlockColumns, weights: &[f64]) -> f64 {
    match cols {
        BlockColumns::Dense(m) => {
            let mut xw = m.clone();
            for (mut row, w) in xw.row_iter_mut().zip(weights) {
                row *= w.sqrt();
            }
            xw.tr_mul(&xw).norm()
        }
        BlockColumns::Indicator { .. } => 1.0,
    }
}

/// Builds one term's block on the pseudo-data rows.
pub fn build_block(pseudo: &PseudoData, term: &TermSpec, opts: DesignOptions) -> Result<PenalizedBlock> {
    let block = match term.kind {
        TermKind::RandomEffect => {
            let labels = pseudo.group_labels(&term.covariate)?;
            random_effect_term(term.clone(), &labels)?
        }
        TermKind::Spline => {
            let x = pseudo.column(&term.covariate)?;
            cubic_spline_term(term.clone(), x)?
        }
        TermKind::Linear => {
            let x = pseudo.column(&term.covariate)?;
            linear_block(term.clone(), x)?
        }
    };
    let block = if opts.null_penalties && term.selectable() {
        null_shrinkage_penalty(block)
    } else {
        block
    };
    Ok(block)
}

/// Categorical labels of a grouping column on the cohort intervals.
pub fn cohort_group_labels(cohort: &CohortTable, column: &str) -> Result<Vec<String>> {
    use crate::survdata::{LOCATION_COL, SUBJECT_COL};
    match column {
        LOCATION_COL => Ok(cohort.intervals().iter().map(|iv| iv.location_id.clone()).collect()),
        SUBJECT_COL => Ok(cohort.intervals().iter().map(|iv| iv.subject_id.clone()).collect()),
        other => Ok(cohort
            .covariate_column(other)?
            .into_iter()
            .map(|v| v.to_string())
            .collect()),
    }
}

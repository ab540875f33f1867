use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Cholesky factor of a symmetric positive definite matrix after diagonal
/// equilibration, `D H D = L L'` with `D = diag(h_ii^-1/2)`.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    d: DVector<f64>,
}

impl SpdFactor {
    pub fn new(h: &DMatrix<f64>) -> Option<Self> {
        let n = h.nrows();
        let d = DVector::from_iterator(
            n,
            h.diagonal()
                .iter()
                .map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }),
        );
        let mut hs = h.clone();
        for j in 0..n {
            for i in 0..n {
                hs[(i, j)] *= d[i] * d[j];
            }
        }
        let chol = Cholesky::new(hs)?;
        Some(Self { chol, d })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.component_mul(&self.d);
        self.chol.solve_mut(&mut x);
        x.component_mul_assign(&self.d);
        x
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            col.component_mul_assign(&self.d);
        }
        self.chol.solve_mut(&mut x);
        for mut col in x.column_iter_mut() {
            col.component_mul_assign(&self.d);
        }
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        let n = inv.nrows();
        for j in 0..n {
            for i in 0..n {
                inv[(i, j)] *= self.d[i] * self.d[j];
            }
        }
        (&inv + inv.transpose()) * 0.5
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        let ld: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        ld - 2.0 * self.d.iter().map(|v| v.ln()).sum::<f64>()
    }
}

/// Orthonormal basis of the range space of a symmetric PSD matrix, with the
/// positive eigenvalues, under a relative tolerance.
pub fn range_space(s: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, Vec<f64>) {
    let eig = SymmetricEigen::new(s.clone());
    let max = eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b));
    let keep: Vec<usize> = (0..s.nrows())
        .filter(|&i| max > 0.0 && eig.eigenvalues[i] > rel_tol * max)
        .collect();
    let mut u = DMatrix::zeros(s.nrows(), keep.len());
    let mut vals = Vec::with_capacity(keep.len());
    for (c, &i) in keep.iter().enumerate() {
        u.set_column(c, &eig.eigenvectors.column(i));
        vals.push(eig.eigenvalues[i]);
    }
    (u, vals)
}

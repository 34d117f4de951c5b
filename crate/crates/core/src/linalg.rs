//! Dense matrices and the singular value decomposition used by every other module.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration. It is slower than a
//! bidiagonalization-based solver but accurate to working precision, which keeps
//! the orthonormality and truncation-error identities tight enough to test
//! directly.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of Jacobi sweeps before giving up.
pub const SWEEP_LIMIT: usize = 60;
/// A column pair counts as orthogonal once |a_p·a_q| / (‖a_p‖‖a_q‖) drops below this.
pub const CONVERGENCE_TOL: f64 = 1e-12;
/// Singular values below this fraction of σ₁ are clamped to zero.
pub const RELATIVE_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("jacobi svd did not converge within {sweeps} sweeps (off-diagonal metric {off_norm:e})")]
    NotConverged { sweeps: usize, off_norm: f64 },
    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("degenerate matrix: all singular values are zero")]
    Degenerate,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense, finite, row-major real matrix (always stored in standard layout).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix(Array2<f64>);

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = LinalgError;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix {
            rows: m.rows(),
            cols: m.cols(),
            data: m.to_row_major(),
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::InvalidInput(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(LinalgError::InvalidInput(format!(
                "expected {} values for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        let array = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| LinalgError::InvalidInput(e.to_string()))?;
        Self::from_array(array)
    }

    pub fn from_array(array: Array2<f64>) -> Result<Self> {
        if array.nrows() == 0 || array.ncols() == 0 {
            return Err(LinalgError::InvalidInput("empty matrix".into()));
        }
        if let Some(bad) = array.iter().find(|v| !v.is_finite()) {
            return Err(LinalgError::InvalidInput(format!(
                "non-finite entry {bad}"
            )));
        }
        if array.is_standard_layout() {
            Ok(Matrix(array))
        } else {
            Ok(Matrix(array.as_standard_layout().into_owned()))
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix(Array2::zeros((rows, cols)))
    }

    pub fn identity(n: usize) -> Self {
        assert!(n > 0, "matrix dimensions must be positive");
        Matrix(Array2::eye(n))
    }

    /// Entries drawn i.i.d. from N(0, scale²) in row-major order.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix(Array2::from_shape_vec((rows, cols), data).expect("shape matches data"))
    }

    /// Square diagonal matrix.
    pub fn from_diag(values: &[f64]) -> Result<Self> {
        Self::from_array(Array2::from_diag(&Array1::from(values.to_vec())))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[[r, c]]
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    /// Mutable access for in-place updates (training). Callers keep entries finite.
    pub fn array_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix(self.0.t().as_standard_layout().into_owned())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols() != other.rows() {
            return Err(LinalgError::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows(),
                self.cols(),
                other.rows(),
                other.cols()
            )));
        }
        Ok(Matrix(self.0.dot(&other.0)))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// ‖self − other‖_F.
    pub fn frobenius_distance(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Thin SVD `M = U · diag(σ) · Vᵀ` with `r = min(m, n)` singular values.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank_limit(&self) -> usize {
        self.sigma.len()
    }

    pub fn source_shape(&self) -> (usize, usize) {
        (self.u.rows(), self.vt.cols())
    }
}

/// Rank-k factor pair: `u_k` (m×k) and `w_k = Σ_k V_kᵀ` (k×n).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedFactors {
    pub rank: usize,
    pub u_k: Matrix,
    pub w_k: Matrix,
}

impl TruncatedFactors {
    pub fn new(u_k: Matrix, w_k: Matrix) -> Result<Self> {
        if u_k.cols() != w_k.rows() {
            return Err(LinalgError::ShapeMismatch(format!(
                "u_k is {}x{} but w_k is {}x{}",
                u_k.rows(),
                u_k.cols(),
                w_k.rows(),
                w_k.cols()
            )));
        }
        let rank = u_k.cols();
        let max = u_k.rows().min(w_k.cols());
        if rank > max {
            return Err(LinalgError::RankOutOfRange { rank, max });
        }
        Ok(TruncatedFactors { rank, u_k, w_k })
    }

    pub fn rows(&self) -> usize {
        self.u_k.rows()
    }

    pub fn cols(&self) -> usize {
        self.w_k.cols()
    }

    /// Stored parameter count, k·(m+n).
    pub fn param_count(&self) -> usize {
        self.rank * (self.rows() + self.cols())
    }
}

/// Thin singular value decomposition by one-sided Jacobi rotations.
///
/// Output is deterministic: singular values are sorted non-increasing (stable on
/// ties) and each column of `u` is flipped so its largest-magnitude entry is
/// non-negative, the first such row winning ties.
pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    if m.0.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::InvalidInput("matrix has non-finite entries".into()));
    }
    let (rows, cols) = m.shape();
    if rows >= cols {
        jacobi_tall(m.view())
    } else {
        // M = U Σ Vᵀ  ⇔  Mᵀ = V Σ Uᵀ; decompose the tall transpose and swap roles.
        let t = jacobi_tall(m.view().reversed_axes())?;
        let mut f = SvdFactors {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        };
        fix_signs(&mut f);
        Ok(f)
    }
}

/// Jacobi on a matrix with rows ≥ cols. Returns factors with the sign convention applied.
fn jacobi_tall(a: ArrayView2<'_, f64>) -> Result<SvdFactors> {
    let (m, n) = a.dim();
    // Column-major working copies so each rotation touches contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    let mut last_metric = 0.0;
    for _ in 0..SWEEP_LIMIT {
        if converged {
            break;
        }
        let mut max_metric: f64 = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let metric = gamma.abs() / (alpha * beta).sqrt();
                max_metric = max_metric.max(metric);
                if metric < CONVERGENCE_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        last_metric = max_metric;
        converged = max_metric < CONVERGENCE_TOL;
    }
    if !converged {
        return Err(LinalgError::NotConverged {
            sweeps: SWEEP_LIMIT,
            off_norm: last_metric,
        });
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps index order on exact ties.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let top = norms[order[0]];
    let mut sigma = Vec::with_capacity(n);
    let mut u = Array2::<f64>::zeros((m, n));
    let mut vt = Array2::<f64>::zeros((n, n));
    let mut needs_completion = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        let clamped = s == 0.0 || s < RELATIVE_CLAMP * top;
        if clamped {
            sigma.push(0.0);
            needs_completion.push(k);
        } else {
            sigma.push(s);
            for i in 0..m {
                u[[i, k]] = cols[j][i] / s;
            }
        }
        for i in 0..n {
            vt[[k, i]] = v[j][i];
        }
    }
    complete_orthonormal_columns(&mut u, &needs_completion);

    let mut f = SvdFactors {
        u: Matrix(u),
        sigma,
        vt: Matrix(vt),
    };
    fix_signs(&mut f);
    Ok(f)
}

fn rotate(vecs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = vecs.split_at_mut(q);
    let (xp, xq) = (&mut head[p], &mut tail[0]);
    for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
        let ap = *a;
        let aq = *b;
        *a = c * ap - s * aq;
        *b = s * ap + c * aq;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every other
/// column, by Gram–Schmidt over the standard basis.
fn complete_orthonormal_columns(u: &mut Array2<f64>, targets: &[usize]) {
    if targets.is_empty() {
        return;
    }
    let m = u.nrows();
    let mut basis: Vec<Array1<f64>> = (0..u.ncols())
        .filter(|c| !targets.contains(c))
        .map(|c| u.column(c).to_owned())
        .collect();
    let mut next_axis = 0;
    for &target in targets {
        loop {
            assert!(next_axis < m, "ran out of basis vectors during completion");
            let mut cand = Array1::<f64>::zeros(m);
            cand[next_axis] = 1.0;
            next_axis += 1;
            // Two passes of modified Gram–Schmidt for numerical orthogonality.
            for _ in 0..2 {
                for b in &basis {
                    let proj = cand.dot(b);
                    cand.scaled_add(-proj, b);
                }
            }
            let norm = cand.dot(&cand).sqrt();
            if norm > 1e-6 {
                cand /= norm;
                u.column_mut(target).assign(&cand);
                basis.push(cand);
                break;
            }
        }
    }
}

fn fix_signs(f: &mut SvdFactors) {
    let k = f.sigma.len();
    for c in 0..k {
        let col = f.u.0.column(c);
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            f.u.0.column_mut(c).mapv_inplace(|x| -x);
            f.vt.0.row_mut(c).mapv_inplace(|x| -x);
        }
    }
}

/// Keeps the leading `k` singular triplets, folding Σ into the right factor.
pub fn truncate(f: &SvdFactors, k: usize) -> Result<TruncatedFactors> {
    let max = f.rank_limit();
    if k == 0 || k > max {
        return Err(LinalgError::RankOutOfRange { rank: k, max });
    }
    let u_k = f.u.0.slice(s![.., ..k]).as_standard_layout().into_owned();
    let mut w_k = f.vt.0.slice(s![..k, ..]).as_standard_layout().into_owned();
    for (mut row, &s) in w_k.axis_iter_mut(Axis(0)).zip(&f.sigma[..k]) {
        row *= s;
    }
    Ok(TruncatedFactors {
        rank: k,
        u_k: Matrix(u_k),
        w_k: Matrix(w_k),
    })
}

pub fn reconstruct(t: &TruncatedFactors) -> Result<Matrix> {
    t.u_k.matmul(&t.w_k)
}

/// Fraction of the singular-value sum carried by the top `k` values.
pub fn energy(f: &SvdFactors, k: usize) -> Result<f64> {
    let max = f.rank_limit();
    if k == 0 || k > max {
        return Err(LinalgError::RankOutOfRange { rank: k, max });
    }
    let total: f64 = f.sigma.iter().sum();
    if total <= 0.0 {
        return Err(LinalgError::Degenerate);
    }
    if k == max {
        return Ok(1.0);
    }
    let kept: f64 = f.sigma[..k].iter().sum();
    Ok((kept / total).min(1.0))
}

/// Smallest rank whose energy reaches `target`; the full rank when nothing smaller does.
pub fn energy_to_rank(f: &SvdFactors, target: f64) -> usize {
    let total: f64 = f.sigma.iter().sum();
    let max = f.rank_limit();
    if total <= 0.0 {
        return max;
    }
    let mut kept = 0.0;
    for (i, s) in f.sigma.iter().enumerate() {
        kept += s;
        if i + 1 == max || kept / total >= target {
            return i + 1;
        }
    }
    max
}

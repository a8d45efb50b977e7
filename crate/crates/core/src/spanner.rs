//! Approximate barycentric spanners of the dataset features and the
//! coefficient representation `λ(c) = (1/n) Σ c_k φ(s_k, a_k)`.

use nalgebra::{DMatrix, DVector};

use crate::data::OfflineDataset;
use crate::error::{invalid, Error, Result};

/// A `C`-approximate barycentric spanner of the dataset feature rows.
#[derive(Clone, Debug)]
pub struct Spanner {
    /// Dataset indices of the spanner rows, in basis order.
    pub indices: Vec<usize>,
    /// `r × d`, the chosen feature rows.
    pub basis: DMatrix<f64>,
    /// `n × r`, `φ_k = Σ_j b_kj φ_{indices[j]}`.
    pub conversion: DMatrix<f64>,
    pub rank: usize,
    /// Accepted swaps.
    pub swaps: usize,
    /// `ln |det|` of the working basis (within the span) after each swap,
    /// starting with the initial basis.
    pub log_det_history: Vec<f64>,
}

impl Spanner {
    /// Indices as a comma-separated list, for logs.
    pub fn indices_csv(&self) -> String {
        self.indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Swap budget; exceeding it means the determinant bookkeeping went wrong.
pub fn swap_cap(d: usize) -> usize {
    let log2 = (d as f64).log2().max(0.0);
    64 * d * ((log2 + 1.0).ceil() as usize).max(1)
}

/// Awerbuch–Kleinberg swap search restricted to the span of the features.
pub fn compute_spanner(ds: &OfflineDataset, c_approx: f64) -> Result<Spanner> {
    if !(c_approx > 1.0) {
        return Err(invalid(format!("approximation factor {c_approx} must exceed 1")));
    }
    let x = ds.features();
    let (n, d) = (x.nrows(), x.ncols());
    let max_norm = x.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    if max_norm == 0.0 {
        return Err(Error::Degenerate("every feature row is zero".into()));
    }

    let (mut indices, q) = pivoted_basis(x, 1e-9 * max_norm);
    let r = indices.len();
    // coordinates of every row inside the span
    let y = x * &q;

    let mut m = select_rows(&y, &indices);
    let mut log_det = m.clone().lu().determinant().abs().ln();
    let mut log_det_history = vec![log_det];
    let mut b = coordinates(&y, &m)?;
    let cap = swap_cap(d);
    let mut swaps = 0;
    loop {
        let (mut best, mut at) = (0.0, (0, 0));
        for k in 0..n {
            for j in 0..r {
                let v = b[(k, j)].abs();
                if v > best {
                    best = v;
                    at = (k, j);
                }
            }
        }
        if best <= c_approx {
            break;
        }
        if swaps == cap {
            return Err(Error::Degenerate(format!("spanner search exceeded {cap} swaps")));
        }
        // replacing row j by row k scales |det| by |b_kj|
        let (k, j) = at;
        indices[j] = k;
        m.set_row(j, &y.row(k));
        log_det += best.ln();
        log_det_history.push(log_det);
        swaps += 1;
        b = coordinates(&y, &m)?;
    }
    for (j, &k) in indices.iter().enumerate() {
        let mut row = b.row_mut(k);
        row.fill(0.0);
        row[j] = 1.0;
    }
    let basis = select_rows(x, &indices);
    Ok(Spanner { indices, basis, conversion: b, rank: r, swaps, log_det_history })
}

/// Greedy pivoted Gram–Schmidt over the rows of `x`.
///
/// Returns the pivot rows (a maximal independent subset) and a `d × r`
/// orthonormal basis of their span.
fn pivoted_basis(x: &DMatrix<f64>, tol: f64) -> (Vec<usize>, DMatrix<f64>) {
    let d = x.ncols();
    let mut residual = x.clone();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut pivots = Vec::new();
    while pivots.len() < d {
        let (k, norm) = residual
            .row_iter()
            .enumerate()
            .map(|(k, r)| (k, r.norm()))
            .fold((0, 0.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if norm <= tol {
            break;
        }
        let mut v: DVector<f64> = x.row(k).transpose();
        for _ in 0..2 {
            for c in &cols {
                let proj = c.dot(&v);
                v.axpy(-proj, c, 1.0);
            }
        }
        let len = v.norm();
        if len <= tol {
            break;
        }
        v /= len;
        let coef = &residual * &v;
        residual -= coef * v.transpose();
        cols.push(v);
        pivots.push(k);
    }
    let mut q = DMatrix::<f64>::zeros(d, cols.len());
    for (j, c) in cols.iter().enumerate() {
        q.set_column(j, c);
    }
    (pivots, q)
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Solves `Y = B M` for `B`.
fn coordinates(y: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lu = m.transpose().lu();
    let bt = lu
        .solve(&y.transpose())
        .ok_or_else(|| Error::Singular("spanner basis".into()))?;
    Ok(bt.transpose())
}

/// A coefficient vector `c` with its box bound and cached `λ(c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefLambda {
    pub coefs: DVector<f64>,
    pub bound: f64,
    pub lambda: DVector<f64>,
}

impl CoefLambda {
    pub fn new(coefs: DVector<f64>, bound: f64, ds: &OfflineDataset) -> Result<Self> {
        if !bound.is_finite() || bound < 0.0 {
            return Err(invalid(format!("coefficient bound {bound} must be finite and nonnegative")));
        }
        if coefs.iter().any(|c| !(c.abs() <= bound * (1.0 + 1e-12))) {
            return Err(invalid(format!("coefficients leave the box [-{bound}, {bound}]")));
        }
        let lambda = lambda_of(&coefs, ds)?;
        Ok(Self { coefs, bound, lambda })
    }

    pub fn zeros(bound: f64, ds: &OfflineDataset) -> Self {
        Self { coefs: DVector::zeros(ds.len()), bound, lambda: DVector::zeros(ds.dim()) }
    }

    pub(crate) fn from_parts(coefs: DVector<f64>, bound: f64, lambda: DVector<f64>) -> Self {
        Self { coefs, bound, lambda }
    }
}

/// `c'_j = Σ_k b_kj c_k` on the spanner indices, zero elsewhere.
///
/// `λ(c') = λ(c)`. The returned bound is the largest `|c'_j|`.
pub fn convert_coeffs(c: &CoefLambda, sp: &Spanner) -> CoefLambda {
    let on_basis = sp.conversion.tr_mul(&c.coefs);
    let mut coefs = DVector::<f64>::zeros(c.coefs.len());
    for (j, &k) in sp.indices.iter().enumerate() {
        coefs[k] = on_basis[j];
    }
    let n = c.coefs.len() as f64;
    let lambda = sp.basis.tr_mul(&on_basis) / n;
    let bound = on_basis.amax();
    CoefLambda { coefs, bound, lambda }
}

/// `λ(c) = (1/n) Σ c_k φ(s_k, a_k)`.
pub fn lambda_of(c: &DVector<f64>, ds: &OfflineDataset) -> Result<DVector<f64>> {
    if c.len() != ds.len() {
        return Err(invalid(format!("{} coefficients for {} samples", c.len(), ds.len())));
    }
    Ok(ds.features().tr_mul(c) / ds.len() as f64)
}

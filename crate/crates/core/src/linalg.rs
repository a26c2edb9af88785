//! Small dense linear algebra: mode-n unfolding, a deterministic one-sided
//! Jacobi SVD with its reverse-mode derivative, and a cyclic Jacobi
//! eigensolver for symmetric matrices.

use crate::error::{GapError, Result};
use crate::tensor::Tensor;

/// Off-diagonal cosine below which a Jacobi rotation is skipped.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 60;
/// Minimum relative singular-value gap for differentiating through the SVD.
pub const SEPARATION_EPS: f64 = 1e-8;
/// Pivots below this fraction of the largest column norm count as rank loss.
const RANK_TOLERANCE: f64 = 1e-13;

/// Mode-`n` unfolding (`n` counted from 1): the result has `I_n` rows and
/// one column per combination of the remaining indices, taken in row-major
/// order.
pub fn mode_n_unfold(t: &Tensor, n: usize) -> Result<Tensor> {
    let rank = t.rank();
    if n == 0 || n > rank {
        return Err(GapError::Dimension(format!(
            "mode {n} out of range for rank-{rank} tensor"
        )));
    }
    let axis = n - 1;
    let mut perm = vec![axis];
    perm.extend((0..rank).filter(|&a| a != axis));
    let rows = t.shape()[axis];
    let permuted = t.permute(&perm)?;
    permuted.reshaped(&[rows, t.len() / rows])
}

/// Inverse of [`mode_n_unfold`] for a tensor of shape `shape`.
pub fn mode_n_fold(matrix: &Tensor, n: usize, shape: &[usize]) -> Result<Tensor> {
    let rank = shape.len();
    if n == 0 || n > rank {
        return Err(GapError::Dimension(format!(
            "mode {n} out of range for rank-{rank} tensor"
        )));
    }
    let axis = n - 1;
    let mut perm = vec![axis];
    perm.extend((0..rank).filter(|&a| a != axis));
    let permuted_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let permuted = matrix.reshaped(&permuted_shape)?;
    let mut inverse = vec![0; rank];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    permuted.permute(&inverse)
}

/// A gradient tensor reshaped to a matrix with no more rows than columns.
#[derive(Clone, Debug, PartialEq)]
pub struct UnfoldedGrad {
    pub matrix: Tensor,
    pub original_shape: Vec<usize>,
    pub transposed: bool,
}

impl UnfoldedGrad {
    /// Mode-1 unfolds a weight gradient of rank ≥ 2 and orients it.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() < 2 {
            return Err(GapError::Dimension(format!(
                "cannot unfold a rank-{} tensor",
                t.rank()
            )));
        }
        let mut out = orient_min_rows(&mode_n_unfold(t, 1)?)?;
        out.original_shape = t.shape().to_vec();
        Ok(out)
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    /// Maps a matrix in the oriented layout back to the original shape.
    pub fn refold(&self, matrix: &Tensor) -> Result<Tensor> {
        if matrix.shape() != self.matrix.shape() {
            return Err(GapError::Dimension(format!(
                "refold expects {:?}, got {:?}",
                self.matrix.shape(),
                matrix.shape()
            )));
        }
        let unoriented = if self.transposed { matrix.transpose()? } else { matrix.clone() };
        mode_n_fold(&unoriented, 1, &self.original_shape)
    }
}

/// Returns `g` if it has no more rows than columns, otherwise `gᵀ` with the
/// transposed flag set. Square matrices keep their orientation.
pub fn orient_min_rows(g: &Tensor) -> Result<UnfoldedGrad> {
    if g.rank() != 2 {
        return Err(GapError::Dimension(format!(
            "orientation needs rank 2, got {:?}",
            g.shape()
        )));
    }
    let transposed = g.rows() > g.cols();
    Ok(UnfoldedGrad {
        matrix: if transposed { g.transpose()? } else { g.clone() },
        original_shape: g.shape().to_vec(),
        transposed,
    })
}

/// Thin SVD `g = u·diag(sigma)·vᵀ` of an `m x n` matrix with `m ≤ n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    /// `m x m`, orthonormal columns.
    pub u: Tensor,
    /// Length `m`, nonincreasing, nonnegative.
    pub sigma: Tensor,
    /// `n x m`, orthonormal columns.
    pub v: Tensor,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Tensor {
        self.reconstruct_with(self.sigma.data())
    }

    /// `u·diag(values)·vᵀ`.
    pub fn reconstruct_with(&self, values: &[f64]) -> Tensor {
        let (m, r) = (self.u.rows(), self.u.cols());
        let n = self.v.rows();
        let mut out = vec![0.0; m * n];
        for k in 0..r {
            let s = values[k];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let a = self.u.at(i, k) * s;
                if a == 0.0 {
                    continue;
                }
                let row = &mut out[i * n..(i + 1) * n];
                for (j, o) in row.iter_mut().enumerate() {
                    *o += a * self.v.at(j, k);
                }
            }
        }
        Tensor::from_parts(vec![m, n], out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Householder QR with column pivoting of the matrix whose columns are
/// `cols`, stopping once the remaining columns are numerically zero.
/// Returns `(R, Q, perm)` with `R` as `rank` rows of length `cols.len()`
/// and `Q` as `rank` orthonormal vectors.
fn pivoted_qr(mut cols: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>) {
    let m = cols.len();
    let n = cols.first().map_or(0, Vec::len);
    let mut perm: Vec<usize> = (0..m).collect();
    let largest = cols.iter().map(|c| norm(c)).fold(0.0, f64::max);
    let tol = largest * RANK_TOLERANCE;
    let mut reflectors: Vec<Vec<f64>> = Vec::new();
    let mut rank = 0;
    for k in 0..m.min(n) {
        let (pivot, pivot_norm) = (k..m)
            .map(|j| (j, norm(&cols[j][k..])))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(pivot_norm > tol) {
            break;
        }
        cols.swap(k, pivot);
        perm.swap(k, pivot);
        let x = &cols[k][k..];
        let alpha = if x[0] >= 0.0 { -pivot_norm } else { pivot_norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vn = norm(&v);
        if vn > 0.0 {
            v.iter_mut().for_each(|e| *e /= vn);
        }
        for col in cols.iter_mut().skip(k) {
            let tail = &mut col[k..];
            let proj = 2.0 * dot(&v, tail);
            for (t, vi) in tail.iter_mut().zip(&v) {
                *t -= proj * vi;
            }
        }
        cols[k][k] = alpha;
        for e in cols[k][k + 1..].iter_mut() {
            *e = 0.0;
        }
        reflectors.push(v);
        rank += 1;
    }
    let r: Vec<Vec<f64>> = (0..rank)
        .map(|i| (0..m).map(|j| if j >= i { cols[j][i] } else { 0.0 }).collect())
        .collect();
    // Q e_i = H_0 H_1 ... H_{rank-1} e_i
    let q: Vec<Vec<f64>> = (0..rank)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            for (k, v) in reflectors.iter().enumerate().rev() {
                let tail = &mut e[k..];
                let proj = 2.0 * dot(v, tail);
                for (t, vi) in tail.iter_mut().zip(v) {
                    *t -= proj * vi;
                }
            }
            e
        })
        .collect();
    (r, q, perm)
}

/// Extends `basis` (orthonormal vectors of length `dim`) to `target`
/// vectors, greedily adding the standard basis vector with the largest
/// residual.
fn complete_basis(basis: &mut Vec<Vec<f64>>, dim: usize, target: usize) {
    let mut residual: Vec<f64> = (0..dim)
        .map(|i| 1.0 - basis.iter().map(|b| b[i] * b[i]).sum::<f64>())
        .collect();
    while basis.len() < target {
        let (best, _) = residual
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &r)| if r > acc.1 { (i, r) } else { acc });
        let mut w = vec![0.0; dim];
        w[best] = 1.0;
        for _ in 0..2 {
            for b in basis.iter() {
                let p = dot(b, &w);
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= p * bi;
                }
            }
        }
        let wn = norm(&w);
        w.iter_mut().for_each(|e| *e /= wn);
        for (r, wi) in residual.iter_mut().zip(&w) {
            *r -= wi * wi;
        }
        residual[best] = f64::NEG_INFINITY;
        basis.push(w);
    }
}

/// One-sided Jacobi SVD of an `m x n` matrix with `m ≤ n`.
///
/// The rows of `g` are first reduced by a column-pivoted QR, which exposes
/// the numerical rank; Jacobi rotations then orthogonalise the columns of
/// the small triangular factor. Columns belonging to zero singular values
/// are completed deterministically. Each left singular vector is signed so
/// that its largest-magnitude entry is nonnegative.
pub fn svd(g: &Tensor) -> Result<SvdResult> {
    if g.rank() != 2 || g.rows() > g.cols() {
        return Err(GapError::Dimension(format!(
            "svd expects an m x n matrix with m <= n, got {:?}",
            g.shape()
        )));
    }
    if !g.all_finite() {
        return Err(GapError::NonFinite("svd input".into()));
    }
    let (m, n) = (g.rows(), g.cols());
    let rows: Vec<Vec<f64>> = (0..m).map(|i| g.row(i).to_vec()).collect();
    let (r_factor, q, perm) = pivoted_qr(rows);
    let rank = r_factor.len();

    // X = P·Rᵀ, stored by column: x[i][perm[j]] = R[i][j].
    let mut x: Vec<Vec<f64>> = (0..rank)
        .map(|i| {
            let mut col = vec![0.0; m];
            for j in 0..m {
                col[perm[j]] = r_factor[i][j];
            }
            col
        })
        .collect();
    let mut rot: Vec<Vec<f64>> = (0..rank)
        .map(|i| {
            let mut e = vec![0.0; rank];
            e[i] = 1.0;
            e
        })
        .collect();

    let mut converged = rank < 2;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(GapError::Convergence { sweeps, residual });
        }
        sweeps += 1;
        converged = true;
        residual = 0.0;
        for p in 0..rank {
            for q_ in p + 1..rank {
                let alpha = dot(&x[p], &x[p]);
                let beta = dot(&x[q_], &x[q_]);
                let gamma = dot(&x[p], &x[q_]);
                if gamma == 0.0 {
                    continue;
                }
                let cosine = gamma.abs() / (alpha * beta).sqrt();
                residual = f64::max(residual, cosine);
                if cosine <= JACOBI_TOLERANCE {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut x, p, q_, c, s);
                rotate(&mut rot, p, q_, c, s);
            }
        }
    }

    let mut order: Vec<(f64, usize)> = x.iter().enumerate().map(|(i, c)| (norm(c), i)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut sigma = Vec::with_capacity(m);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    for &(s, i) in &order {
        if !(s > 0.0) {
            continue;
        }
        sigma.push(s);
        u_cols.push(x[i].iter().map(|e| e / s).collect());
        // V = Q·J, column i.
        let mut v = vec![0.0; n];
        for (k, qk) in q.iter().enumerate() {
            let w = rot[i][k];
            for (vj, qj) in v.iter_mut().zip(qk) {
                *vj += w * qj;
            }
        }
        v_cols.push(v);
    }
    sigma.resize(m, 0.0);
    complete_basis(&mut u_cols, m, m);
    complete_basis(&mut v_cols, n, m);

    for (u, v) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let lead = u
            .iter()
            .fold(0.0f64, |acc, e| if e.abs() > acc.abs() { *e } else { acc });
        if lead < 0.0 {
            u.iter_mut().for_each(|e| *e = -*e);
            v.iter_mut().for_each(|e| *e = -*e);
        }
    }

    Ok(SvdResult {
        u: columns_to_matrix(&u_cols, m),
        sigma: Tensor::vector(sigma),
        v: columns_to_matrix(&v_cols, n),
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (a, b) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xa, xb) = (*a, *b);
        *a = c * xa - s * xb;
        *b = s * xa + c * xb;
    }
}

fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> Tensor {
    let k = cols.len();
    let mut data = vec![0.0; rows * k];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[i * k + j] = *v;
        }
    }
    Tensor::from_parts(vec![rows, k], data)
}

/// Cotangents of the SVD outputs. Missing entries are treated as zero.
#[derive(Clone, Debug, Default)]
pub struct SvdCotangent {
    pub u: Option<Tensor>,
    pub sigma: Option<Tensor>,
    pub v: Option<Tensor>,
}

/// Smallest relative gap between singular values, counting the distance of
/// the smallest one to zero.
pub fn separation(res: &SvdResult) -> f64 {
    let s = res.sigma.data();
    let top = s.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return 0.0;
    }
    let mut gap = s.last().copied().unwrap_or(0.0) / top;
    for w in s.windows(2) {
        gap = gap.min((w[0] - w[1]).abs() / top);
    }
    gap
}

/// Reverse-mode derivative of `g ↦ (u, sigma, v)`.
///
/// Fails with [`GapError::Degenerate`] when two singular values (or the
/// smallest one and zero) are closer than [`SEPARATION_EPS`] relative to
/// the largest, where the derivative is unbounded.
pub fn svd_backward(res: &SvdResult, cot: &SvdCotangent) -> Result<Tensor> {
    let gap = separation(res);
    if gap < SEPARATION_EPS {
        return Err(GapError::Degenerate {
            gap,
            threshold: SEPARATION_EPS,
        });
    }
    let (m, n) = (res.u.rows(), res.v.rows());
    let s = res.sigma.data();
    let u = &res.u;
    let v = &res.v;

    // Inner m x m matrix sandwiched between U and Vᵀ.
    let mut inner = vec![0.0; m * m];
    let f = |i: usize, j: usize| if i == j { 0.0 } else { 1.0 / (s[j] * s[j] - s[i] * s[i]) };
    if let Some(du) = &cot.u {
        let utdu = u.transpose()?.matmul(du)?;
        for i in 0..m {
            for j in 0..m {
                let skew = utdu.at(i, j) - utdu.at(j, i);
                inner[i * m + j] += f(i, j) * skew * s[j];
            }
        }
    }
    if let Some(ds) = &cot.sigma {
        for i in 0..m {
            inner[i * m + i] += ds.data()[i];
        }
    }
    let mut extra: Option<Tensor> = None;
    if let Some(dv) = &cot.v {
        let vtdv = v.transpose()?.matmul(dv)?;
        for i in 0..m {
            for j in 0..m {
                let skew = vtdv.at(i, j) - vtdv.at(j, i);
                inner[i * m + j] += s[i] * f(i, j) * skew;
            }
        }
        if m < n {
            // U·S⁻¹·dVᵀ·(I - V·Vᵀ)
            let dvt = dv.transpose()?;
            let proj = dvt.sub(&dvt.matmul(v)?.matmul(&v.transpose()?)?)?;
            let mut scaled = proj;
            for i in 0..m {
                let inv = 1.0 / s[i];
                for j in 0..n {
                    let val = scaled.at(i, j) * inv;
                    scaled.set(i, j, val);
                }
            }
            extra = Some(u.matmul(&scaled)?);
        }
    }
    let inner = Tensor::from_parts(vec![m, m], inner);
    let mut out = u.matmul(&inner)?.matmul(&v.transpose()?)?;
    if let Some(e) = extra {
        out = out.add(&e)?;
    }
    Ok(out)
}

/// Reverse-mode derivative of `(g, s) ↦ u·diag(s ∘ sigma)·vᵀ` through the
/// SVD of `g`. Returns the cotangents of `g` and `s`.
pub fn spectral_scale_backward(
    res: &SvdResult,
    scales: &[f64],
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let m = res.u.rows();
    let sigma = res.sigma.data();
    let scaled: Vec<f64> = sigma.iter().zip(scales).map(|(a, b)| a * b).collect();
    let gv = upstream.matmul(&res.v)?; // m x m
    let gtu = upstream.transpose()?.matmul(&res.u)?; // n x m
    let core = res.u.transpose()?.matmul(&gv)?;
    let diag: Vec<f64> = (0..m).map(|i| core.at(i, i)).collect();
    let du = gv.mul(&Tensor::vector(scaled.clone()).repeat_rows(m)?)?;
    let dv = gtu.mul(&Tensor::vector(scaled).repeat_rows(gtu.rows())?)?;
    let dsigma: Vec<f64> = diag.iter().zip(scales).map(|(c, s)| c * s).collect();
    let dscales: Vec<f64> = diag.iter().zip(sigma).map(|(c, s)| c * s).collect();
    let dg = svd_backward(
        res,
        &SvdCotangent {
            u: Some(du),
            sigma: Some(Tensor::vector(dsigma)),
            v: Some(dv),
        },
    )?;
    Ok((dg, Tensor::vector(dscales)))
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in ascending order with matching eigenvector
/// columns.
pub fn symmetric_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(GapError::Dimension(format!(
            "eigensolver needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    let n = a.rows();
    let mut w = a.clone();
    let mut vecs = Tensor::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    for sweep in 0..=MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| w.at(i, j) * w.at(i, j))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        if sweep == MAX_SWEEPS {
            return Err(GapError::Convergence { sweeps: sweep, residual: off / scale });
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = w.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (w.at(q, q) - w.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (w.at(k, p), w.at(k, q));
                    w.set(k, p, c * akp - s * akq);
                    w.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (w.at(p, k), w.at(q, k));
                    w.set(p, k, c * apk - s * aqk);
                    w.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (vecs.at(k, p), vecs.at(k, q));
                    vecs.set(k, p, c * vkp - s * vkq);
                    vecs.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w.at(i, i).total_cmp(&w.at(j, j)));
    let values = order.iter().map(|&i| w.at(i, i)).collect();
    let vectors = Tensor::from_fn(&[n, n], |idx| vecs.at(idx / n, order[idx % n]));
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::finite_diff_grad;
    use crate::tensor::relative_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn orthonormality_residual(q: &Tensor) -> f64 {
        let qtq = q.transpose().unwrap().matmul(q).unwrap();
        qtq.distance(&Tensor::identity(q.cols()))
    }

    #[test]
    fn unfold_of_matrix_mode_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::standard_normal(&[3, 5], &mut rng);
        assert_eq!(mode_n_unfold(&a, 1).unwrap(), a);
        assert_eq!(mode_n_unfold(&a, 2).unwrap(), a.transpose().unwrap());
        assert!(matches!(mode_n_unfold(&a, 3), Err(GapError::Dimension(_))));
        assert!(mode_n_unfold(&a, 0).is_err());
    }

    #[test]
    fn unfold_round_trips_three_way_tensor() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let u = mode_n_unfold(&t, 1).unwrap();
        assert_eq!(u.shape(), &[2, 12]);
        assert_eq!(mode_n_fold(&u, 1, &[2, 3, 4]).unwrap(), t);
    }

    #[test]
    fn every_mode_preserves_the_entry_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::standard_normal(&[3, 4, 5], &mut rng);
        let mut reference: Vec<f64> = t.data().to_vec();
        reference.sort_by(f64::total_cmp);
        for n in 1..=3 {
            let u = mode_n_unfold(&t, n).unwrap();
            assert_eq!(u.rows(), t.shape()[n - 1]);
            let mut entries = u.data().to_vec();
            entries.sort_by(f64::total_cmp);
            assert_eq!(entries, reference);
            assert_eq!(mode_n_fold(&u, n, t.shape()).unwrap(), t);
        }
    }

    #[test]
    fn orientation_rule() {
        let wide = Tensor::zeros(&[2, 5]);
        let tall = Tensor::zeros(&[5, 2]);
        let square = Tensor::zeros(&[40, 40]);
        let o = orient_min_rows(&wide).unwrap();
        assert!(!o.transposed && o.matrix.shape() == [2, 5]);
        let o = orient_min_rows(&tall).unwrap();
        assert!(o.transposed && o.matrix.shape() == [2, 5]);
        assert!(!orient_min_rows(&square).unwrap().transposed);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Tensor::standard_normal(&[6, 3], &mut rng);
        let u = UnfoldedGrad::from_tensor(&g).unwrap();
        assert_eq!(u.refold(&u.matrix).unwrap(), g);
        let conv = Tensor::standard_normal(&[4, 2, 3, 3], &mut rng);
        let u = UnfoldedGrad::from_tensor(&conv).unwrap();
        assert_eq!(u.matrix.shape(), &[4, 18]);
        assert_eq!(u.refold(&u.matrix).unwrap(), conv);
    }

    #[test]
    fn svd_of_diagonal_matrix() {
        let g = Tensor::diag(&[3.0, 1.0]);
        let res = svd(&g).unwrap();
        assert_eq!(res.sigma.data(), &[3.0, 1.0]);
        assert_eq!(res.u, Tensor::identity(2));
        assert_eq!(res.v, Tensor::identity(2));
    }

    #[test]
    fn svd_of_zero_matrix() {
        let g = Tensor::zeros(&[3, 5]);
        let res = svd(&g).unwrap();
        assert!(res.sigma.data().iter().all(|&s| s == 0.0));
        assert_eq!(res.reconstruct(), g);
        assert!(orthonormality_residual(&res.u) < 1e-12);
        assert!(orthonormality_residual(&res.v) < 1e-12);
    }

    #[test]
    fn svd_rejects_tall_input() {
        assert!(matches!(svd(&Tensor::zeros(&[4, 2])), Err(GapError::Dimension(_))));
    }

    #[test]
    fn singular_values_match_gram_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = Tensor::standard_normal(&[8, 20], &mut rng);
        let res = svd(&g).unwrap();
        let gram = g.matmul(&g.transpose().unwrap()).unwrap();
        let (eig, _) = symmetric_eigen(&gram).unwrap();
        let mut roots: Vec<f64> = eig.iter().map(|e| e.max(0.0).sqrt()).collect();
        roots.reverse();
        for (s, r) in res.sigma.data().iter().zip(&roots) {
            assert!(((s - r) / r).abs() < 1e-9, "{s} vs {r}");
        }
    }

    #[test]
    fn rank_deficient_outer_product_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::standard_normal(&[40, 5], &mut rng);
        let b = Tensor::standard_normal(&[5, 40], &mut rng);
        let g = a.matmul(&b).unwrap();
        let res = svd(&g).unwrap();
        assert!(res.reconstruct().distance(&g) / g.frobenius_norm() < 1e-10);
        assert!(orthonormality_residual(&res.u) < 1e-10);
        assert!(orthonormality_residual(&res.v) < 1e-10);
        assert!(res.sigma.data()[5..].iter().all(|&s| s < 1e-10 * res.sigma.data()[0]));
    }

    #[test]
    fn sign_convention_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = Tensor::standard_normal(&[6, 9], &mut rng);
        let res = svd(&g).unwrap();
        for j in 0..6 {
            let col = res.u.column(j);
            let lead = col.iter().fold(0.0f64, |acc, e| if e.abs() > acc.abs() { *e } else { acc });
            assert!(lead >= 0.0);
        }
    }

    #[test]
    fn backward_through_sigma_of_diagonal() {
        let res = svd(&Tensor::diag(&[3.0, 1.0])).unwrap();
        let ds = Tensor::vector(vec![0.7, -1.3]);
        let out = svd_backward(
            &res,
            &SvdCotangent { sigma: Some(ds.clone()), ..Default::default() },
        )
        .unwrap();
        let expected = res
            .u
            .matmul(&Tensor::diag(ds.data()))
            .unwrap()
            .matmul(&res.v.transpose().unwrap())
            .unwrap();
        assert!(out.distance(&expected) < 1e-15);
    }

    #[test]
    fn backward_refuses_tied_singular_values() {
        let res = svd(&Tensor::diag(&[2.0, 2.0])).unwrap();
        let cot = SvdCotangent { sigma: Some(Tensor::vector(vec![1.0, 1.0])), ..Default::default() };
        assert!(matches!(svd_backward(&res, &cot), Err(GapError::Degenerate { .. })));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = Tensor::standard_normal(&[4, 6], &mut rng);
        let wu = Tensor::standard_normal(&[4, 4], &mut rng);
        let ws = Tensor::standard_normal(&[4], &mut rng);
        let wv = Tensor::standard_normal(&[6, 4], &mut rng);
        let objective = |x: &Tensor| -> Result<f64> {
            let r = svd(x)?;
            Ok(r.u.dot(&wu) + r.sigma.dot(&ws) + r.v.dot(&wv))
        };
        let res = svd(&g).unwrap();
        assert!(separation(&res) > 1e-3);
        let analytic = svd_backward(
            &res,
            &SvdCotangent { u: Some(wu.clone()), sigma: Some(ws.clone()), v: Some(wv.clone()) },
        )
        .unwrap();
        let fd = finite_diff_grad(objective, &g, 1e-6).unwrap();
        let err = relative_error(analytic.data(), fd.data(), 1e-12);
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn spectral_scale_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let g = Tensor::standard_normal(&[3, 7], &mut rng);
        let scales = vec![1.7, 0.4, 1.1];
        let w = Tensor::standard_normal(&[3, 7], &mut rng);
        let res = svd(&g).unwrap();
        let (dg, ds) = spectral_scale_backward(&res, &scales, &w).unwrap();
        let fd_g = finite_diff_grad(
            |x| {
                let r = svd(x)?;
                let s: Vec<f64> = r.sigma.data().iter().zip(&scales).map(|(a, b)| a * b).collect();
                Ok(r.reconstruct_with(&s).dot(&w))
            },
            &g,
            1e-6,
        )
        .unwrap();
        assert!(relative_error(dg.data(), fd_g.data(), 1e-12) < 1e-6);
        let fd_s = finite_diff_grad(
            |s| {
                let v: Vec<f64> = res.sigma.data().iter().zip(s.data()).map(|(a, b)| a * b).collect();
                Ok(res.reconstruct_with(&v).dot(&w))
            },
            &Tensor::vector(scales.clone()),
            1e-6,
        )
        .unwrap();
        assert!(relative_error(ds.data(), fd_s.data(), 1e-12) < 1e-7);

        // Unit scales make the map the identity, so the cotangent passes through.
        let (dg1, _) = spectral_scale_backward(&res, &[1.0; 3], &w).unwrap();
        assert!(dg1.distance(&w) < 1e-10);
    }

    #[test]
    fn eigensolver_on_known_matrix() {
        let a = Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-14 && (vals[1] - 3.0).abs() < 1e-14);
        assert!(orthonormality_residual(&vecs) < 1e-14);
    }
}

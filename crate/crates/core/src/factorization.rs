//! Thin SVD by one-sided Jacobi rotations and rank truncation of the token
//! embedding into a factor pair.

use crate::error::{Error, Result};
use crate::model::{Model, TokenEmbedding};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// `input = u · diag(sigma) · v`, `k = min(m, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    /// `m × k`, orthonormal columns.
    pub u: Tensor,
    /// `k` values, nonincreasing.
    pub sigma: Vec<f64>,
    /// `k × n`, orthonormal rows.
    pub v: Tensor,
}

impl SvdResult {
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Tensor {
        let k = self.sigma.len();
        let mut us = self.u.clone();
        let cols = us.cols();
        for row in us.data_mut().chunks_mut(cols) {
            for (x, s) in row.iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        debug_assert_eq!(cols, k);
        us.matmul(&self.v).expect("consistent factor shapes")
    }
}

/// Thin SVD of an `m × n` matrix.
///
/// Works column-wise on the taller orientation: rotates column pairs of a
/// working copy until every pair is orthogonal up to `1e-12` relative
/// off-diagonal mass, then reads singular values off the column norms.
/// Singular vectors for zero singular values are completed to an orthonormal
/// set. Each `u` column is signed so its first nonzero entry is positive.
pub fn svd(w: &Tensor) -> Result<SvdResult> {
    let (m, n) = w.require_matrix("svd")?;
    if w.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("svd: non-finite input".into()));
    }
    if m < n {
        let t = svd(&w.transpose()?)?;
        // Wᵀ = U Σ V  ⇒  W = Vᵀ Σ Uᵀ
        let mut out = SvdResult {
            u: t.v.transpose()?,
            sigma: t.sigma,
            v: t.u.transpose()?,
        };
        canonical_signs(&mut out);
        return Ok(out);
    }

    // Column-major working copy of W (n columns of length m).
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| w.at(i, j)).collect()).collect();
    let mut vmat: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let total: f64 = w.data().iter().map(|x| x * x).sum();

    let mut converged = total == 0.0;
    let mut off = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(a, b)| a * b).sum();
                off += gamma * gamma;
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vmat, p, q, c, s);
            }
        }
        if off.sqrt() <= OFF_DIAGONAL_TOL * total {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "svd: no convergence after {MAX_SWEEPS} sweeps (off-diagonal mass {:.3e})",
            off.sqrt()
        )));
    }

    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (c.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let k = n;
    let scale = order.first().map_or(0.0, |o| o.0);
    let mut u = Tensor::zeros(&[m, k]);
    let mut v = Tensor::zeros(&[k, n]);
    let mut sigma = Vec::with_capacity(k);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for (slot, &(s, j)) in order.iter().enumerate() {
        let column = if s > scale * 1e-14 && s > 0.0 {
            sigma.push(s);
            cols[j].iter().map(|x| x / s).collect()
        } else {
            sigma.push(0.0);
            complete_basis(&basis, m)
        };
        for i in 0..m {
            u.set(i, slot, column[i]);
        }
        basis.push(column);
        for i in 0..n {
            v.set(slot, i, vmat[j][i]);
        }
    }
    let mut out = SvdResult { u, sigma, v };
    canonical_signs(&mut out);
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Unit vector orthogonal to every vector in `basis` (Gram–Schmidt over the
/// canonical basis).
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d: f64 = cand.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in cand.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > best_norm {
            best_norm = norm;
            best = Some(cand);
        }
        if best_norm > 0.5 {
            break;
        }
    }
    let mut v = best.expect("m > basis.len()");
    v.iter_mut().for_each(|x| *x /= best_norm);
    v
}

fn canonical_signs(out: &mut SvdResult) {
    let (m, k) = (out.u.rows(), out.u.cols());
    let n = out.v.cols();
    for j in 0..k {
        let first = (0..m).map(|i| out.u.at(i, j)).find(|x| x.abs() > 1e-15);
        if matches!(first, Some(x) if x < 0.0) {
            for i in 0..m {
                out.u.set(i, j, -out.u.at(i, j));
            }
            for i in 0..n {
                out.v.set(j, i, -out.v.at(j, i));
            }
        }
    }
}

/// Keeps the `rank` largest components, splitting `√σ` into both factors:
/// `E_U = U_r·diag(√σ)`, `E_V = diag(√σ)·V_r`.
pub fn truncate(svd: &SvdResult, rank: usize) -> Result<(Tensor, Tensor)> {
    let k = svd.rank_capacity();
    if rank == 0 || rank > k {
        return Err(Error::contract(format!("truncate: rank {rank} outside 1..={k}")));
    }
    let keep: Vec<usize> = (0..rank).collect();
    let mut eu = svd.u.select_cols(&keep)?;
    let mut ev = svd.v.select_rows(&keep)?;
    let roots: Vec<f64> = svd.sigma[..rank].iter().map(|s| s.sqrt()).collect();
    for row in eu.data_mut().chunks_mut(rank) {
        for (x, r) in row.iter_mut().zip(&roots) {
            *x *= r;
        }
    }
    let n = ev.cols();
    for (row, r) in ev.data_mut().chunks_mut(n).zip(&roots) {
        row.iter_mut().for_each(|x| *x *= r);
    }
    Ok((eu, ev))
}

/// `‖W − E_U·E_V‖_F`
pub fn reconstruction_error(w: &Tensor, eu: &Tensor, ev: &Tensor) -> Result<f64> {
    let approx = eu.matmul(ev)?;
    if approx.shape() != w.shape() {
        return Err(Error::Dimension {
            op: "reconstruction_error",
            left: w.shape().to_vec(),
            right: approx.shape().to_vec(),
        });
    }
    Ok(w.sub(&approx)?.frobenius_norm())
}

/// Replaces a dense token embedding with its rank-`rank` SVD factors and
/// records the retained singular values on the model.
pub fn factorize_embedding(model: &mut Model, rank: usize) -> Result<()> {
    let TokenEmbedding::Dense(table) = &model.params.embedding else {
        return Err(Error::contract("embedding is already factorized"));
    };
    let decomposition = svd(table)?;
    let (u, v) = truncate(&decomposition, rank)?;
    model.params.embedding = TokenEmbedding::Factorized { u, v };
    model.config.rank = rank;
    model.singular_values = Some(decomposition.sigma[..rank].to_vec());
    model.check_invariants()
}

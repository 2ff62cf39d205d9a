//! Block-partitioned bases of the latent space and the algebra on top of them:
//! composing latents from coefficients, encoding latents back, projecting onto one
//! block and mixing blocks from different coefficient vectors.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::schema::AttributeSchema;

/// Condition numbers at or above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e8;

/// A square matrix `P` whose columns are partitioned into blocks `P_0..P_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub p: DMatrix<f64>,
    pub schema: AttributeSchema,
}

impl BasisMatrix {
    pub fn new(p: DMatrix<f64>, schema: AttributeSchema) -> Result<Self> {
        let d = schema.dim();
        check_len("basis rows", d, p.nrows())?;
        check_len("basis columns", d, p.ncols())?;
        Ok(Self { p, schema })
    }

    pub fn identity(schema: AttributeSchema) -> Self {
        let d = schema.dim();
        Self {
            p: DMatrix::identity(d, d),
            schema,
        }
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    /// Columns of block `i` as an owned `D x n_i` matrix.
    pub fn block(&self, i: usize) -> DMatrix<f64> {
        let r = self.schema.range(i);
        self.p.columns(r.start, r.len()).into_owned()
    }

    /// Ratio of largest to smallest singular value; infinite when singular.
    pub fn condition_number(&self) -> f64 {
        condition_number(&self.p)
    }

    /// Factorizes `P` once so many latents can be encoded cheaply.
    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::new(&self.p)
    }
}

pub(crate) fn condition_number(p: &DMatrix<f64>) -> f64 {
    let s = p.singular_values();
    let max = s.max();
    let min = s.min();
    if min == 0.0 || !min.is_finite() || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Cached pivoted LU factorization of a basis.
pub struct Encoder {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    pub condition: f64,
}

impl Encoder {
    pub fn new(p: &DMatrix<f64>) -> Result<Self> {
        let condition = condition_number(p);
        if condition >= MAX_CONDITION {
            return Err(Error::SingularBasis { condition });
        }
        Ok(Self {
            lu: p.clone().lu(),
            condition,
        })
    }

    pub fn encode(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("latent", self.lu.l().nrows(), w.len())?;
        self.lu.solve(w).ok_or(Error::SingularBasis {
            condition: self.condition,
        })
    }

    /// Solves for every column of `w` at once.
    pub fn encode_columns(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len("latent", self.lu.l().nrows(), w.nrows())?;
        self.lu.solve(w).ok_or(Error::SingularBasis {
            condition: self.condition,
        })
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        self.lu.try_inverse().ok_or(Error::SingularBasis {
            condition: self.condition,
        })
    }
}

/// `w = P a`.
pub fn compose(p: &BasisMatrix, a: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("coefficients", p.dim(), a.len())?;
    Ok(&p.p * a)
}

/// Coefficients `a` with `P a = w`, by pivoted LU.
pub fn encode(p: &BasisMatrix, w: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("latent", p.dim(), w.len())?;
    p.encoder()?.encode(w)
}

/// `P_i a_i` where `a = encode(P, w)`.
pub fn project(p: &BasisMatrix, w: &DVector<f64>, i: usize) -> Result<DVector<f64>> {
    check_block(p, i)?;
    let a = encode(p, w)?;
    Ok(block_part(p, &a, i))
}

pub(crate) fn block_part(p: &BasisMatrix, a: &DVector<f64>, i: usize) -> DVector<f64> {
    let r = p.schema.range(i);
    p.p.columns(r.start, r.len()) * a.rows(r.start, r.len())
}

fn check_block(p: &BasisMatrix, i: usize) -> Result<()> {
    if i < p.schema.n_blocks() {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange {
            index: i,
            len: p.schema.n_blocks(),
        })
    }
}

/// Coefficient vector taking blocks in `k` from `a_tgt` and all others from `a_src`.
pub fn mix_coeffs(
    p: &BasisMatrix,
    a_src: &DVector<f64>,
    a_tgt: &DVector<f64>,
    k: &[usize],
) -> Result<DVector<f64>> {
    check_len("source coefficients", p.dim(), a_src.len())?;
    check_len("target coefficients", p.dim(), a_tgt.len())?;
    let mut m = a_src.clone();
    for &b in k {
        check_block(p, b)?;
        let r = p.schema.range(b);
        m.rows_mut(r.start, r.len())
            .copy_from(&a_tgt.rows(r.start, r.len()));
    }
    Ok(m)
}

/// `w_mix = sum_{k in K} P_k a_tgt,k + sum_{l not in K} P_l a_src,l`.
pub fn mix(
    p: &BasisMatrix,
    a_src: &DVector<f64>,
    a_tgt: &DVector<f64>,
    k: &[usize],
) -> Result<DVector<f64>> {
    let m = mix_coeffs(p, a_src, a_tgt, k)?;
    Ok(&p.p * m)
}

/// Matrix of `||P_i^T P_j||_F^2` for `i != j`, zero on the diagonal.
pub fn gram_offdiag(p: &BasisMatrix) -> DMatrix<f64> {
    let g = p.p.transpose() * &p.p;
    let nb = p.schema.n_blocks();
    let mut out = DMatrix::zeros(nb, nb);
    for i in 0..nb {
        let ri = p.schema.range(i);
        for j in 0..nb {
            if i == j {
                continue;
            }
            let rj = p.schema.range(j);
            out[(i, j)] = g
                .view((ri.start, rj.start), (ri.len(), rj.len()))
                .norm_squared();
        }
    }
    out
}

/// Largest `|u . v|` over unit columns `u` in `P_i`, `v` in `P_j`, `i != j`.
pub fn max_cross_coherence(p: &BasisMatrix) -> f64 {
    let d = p.dim();
    let mut cols = p.p.clone();
    for j in 0..d {
        let n = cols.column(j).norm();
        if n > 0.0 {
            cols.column_mut(j).unscale_mut(n);
        }
    }
    let g = cols.transpose() * &cols;
    let mut best = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            if p.schema.block_of_coord(i) != p.schema.block_of_coord(j) {
                best = best.max(g[(i, j)].abs());
            }
        }
    }
    best
}

/// Replaces every block by an orthonormal basis of the same span.
pub fn orthonormalize_within_blocks(p: &BasisMatrix) -> Result<BasisMatrix> {
    let mut out = p.p.clone();
    for i in 0..p.schema.n_blocks() {
        let r = p.schema.range(i);
        let q = orthonormal_basis(&p.block(i)).ok_or(Error::RankDeficientBlock { block: i })?;
        out.columns_mut(r.start, r.len()).copy_from(&q);
    }
    Ok(BasisMatrix {
        p: out,
        schema: p.schema.clone(),
    })
}

/// Thin QR with a positive diagonal in R, or `None` when the columns are rank deficient.
pub fn orthonormal_basis(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let scale = m.norm().max(f64::MIN_POSITIVE);
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..m.ncols() {
        let rjj = r[(j, j)];
        if !(rjj.abs() > 1e-12 * scale) {
            return None;
        }
        if rjj < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Some(q)
}

/// Principal angles (radians, ascending) between the column spans of `a` and `b`.
///
/// Both inputs must have full column rank. Small angles come from the sines of the
/// residual `Q_b - Q_a Q_a^T Q_b`, large ones from the cosines, which keeps both ends accurate.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<Vec<f64>> {
    let qa = orthonormal_basis(a)?;
    let qb = orthonormal_basis(b)?;
    let k = qa.ncols().min(qb.ncols());
    let c = qa.transpose() * &qb;
    let mut cos: Vec<f64> = c.singular_values().iter().copied().collect();
    cos.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let resid = &qb - &qa * &c;
    let mut sin: Vec<f64> = resid.singular_values().iter().copied().collect();
    sin.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Some(
        (0..k)
            .map(|i| {
                let ci = cos[i].clamp(0.0, 1.0);
                if ci * ci >= 0.5 {
                    sin[i].clamp(0.0, 1.0).asin()
                } else {
                    ci.acos()
                }
            })
            .collect(),
    )
}

//! Edit directions inside learned subspaces and the edits built from them.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::schema::AttrKind;
use crate::subspace::{mix, BasisMatrix, Encoder};
use crate::world::Dataset;

/// A unit direction inside attribute block `block` (1-based; block 0 is the residual).
#[derive(Debug, Clone, PartialEq)]
pub struct EditDirection {
    pub block: usize,
    pub coeff_dir: DVector<f64>,
    pub latent_dir: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub regularization: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            regularization: 1e-4,
            epochs: 50,
            seed: 0,
        }
    }
}

/// `sign(w . x + b)` classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub w: DVector<f64>,
    pub b: f64,
}

impl LinearSvm {
    pub fn decision(&self, x: &DVector<f64>) -> f64 {
        self.w.dot(x) + self.b
    }

    /// Fraction of columns of `x` classified with the sign of `labels`.
    pub fn accuracy(&self, x: &DMatrix<f64>, labels: &[f64]) -> f64 {
        let hits = x
            .column_iter()
            .zip(labels)
            .filter(|(c, &y)| (self.w.dot(c) + self.b) * y > 0.0)
            .count();
        hits as f64 / labels.len() as f64
    }
}

/// Soft-margin hinge-loss SVM by Pegasos stochastic subgradient steps on `[x; 1]`.
///
/// `x` holds one sample per column and `labels` are `+1` / `-1`.
pub fn fit_linear_svm(x: &DMatrix<f64>, labels: &[f64], cfg: &SvmConfig) -> Result<LinearSvm> {
    check_len("svm labels", x.ncols(), labels.len())?;
    if !(cfg.regularization > 0.0) {
        return Err(Error::BadConfig {
            field: "svm.regularization".into(),
            reason: "must be positive".into(),
        });
    }
    let dim = x.nrows();
    let lambda = cfg.regularization;
    let radius = 1.0 / lambda.sqrt();
    let mut w = DVector::zeros(dim + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..x.ncols()).collect();
    let mut t = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let xi = x.column(i);
            let margin = labels[i] * (w.rows(0, dim).dot(&xi) + w[dim]);
            w *= 1.0 - eta * lambda;
            if margin < 1.0 {
                let mut head = w.rows_mut(0, dim);
                head.axpy(eta * labels[i], &xi, 1.0);
                w[dim] += eta * labels[i];
            }
            let n = w.norm();
            if n > radius {
                w *= radius / n;
            }
        }
    }
    Ok(LinearSvm {
        w: w.rows(0, dim).into_owned(),
        b: w[dim],
    })
}

fn check_attr_block(p: &BasisMatrix, block: usize) -> Result<()> {
    if block >= 1 && block < p.schema.n_blocks() {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange {
            index: block,
            len: p.schema.n_blocks(),
        })
    }
}

/// `+1` / `-1` labels: binary scores split at 0.5, continuous scores at their median.
pub fn svm_labels(y: &[f64], kind: AttrKind) -> Vec<f64> {
    let cut = match kind {
        AttrKind::Binary => 0.5,
        AttrKind::Continuous => {
            let mut s = y.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = s.len();
            if n % 2 == 1 {
                s[n / 2]
            } else {
                0.5 * (s[n / 2 - 1] + s[n / 2])
            }
        }
    };
    y.iter().map(|&v| if v > cut { 1.0 } else { -1.0 }).collect()
}

/// SVM normal in the block-`block` coefficients of `data`, oriented so `+` raises the score.
pub fn fit_svm_direction(p: &BasisMatrix, data: &Dataset, block: usize, cfg: &SvmConfig) -> Result<EditDirection> {
    check_attr_block(p, block)?;
    let k = block - 1;
    check_len("dataset latents", p.dim(), data.w.nrows())?;
    check_len("dataset scores", p.schema.n_attrs(), data.y.nrows())?;
    let y: Vec<f64> = data.y.row(k).iter().copied().collect();
    let labels = svm_labels(&y, p.schema.kinds[k]);
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::DegenerateLabels { attribute: k });
    }
    let a = Encoder::new(&p.p)?.encode_columns(&data.w)?;
    let r = p.schema.range(block);
    let ak = a.rows(r.start, r.len()).into_owned();
    let svm = fit_linear_svm(&ak, &labels, cfg)?;
    let mut dir = within_subspace_direction(p, block, &svm.w)?;
    // Orient by the sign of cov(a_k . dir, y_k).
    let proj: Vec<f64> = ak.column_iter().map(|c| c.dot(&dir.coeff_dir)).collect();
    let n = y.len() as f64;
    let mp = proj.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = proj.iter().zip(&y).map(|(p, y)| (p - mp) * (y - my)).sum();
    if cov < 0.0 {
        dir.coeff_dir.neg_mut();
        dir.latent_dir.neg_mut();
    }
    Ok(dir)
}

/// Unit direction `normalize(P_k c)` for a coefficient direction `c` in block `block`.
pub fn within_subspace_direction(p: &BasisMatrix, block: usize, coeff_dir: &DVector<f64>) -> Result<EditDirection> {
    check_attr_block(p, block)?;
    let r = p.schema.range(block);
    check_len("coefficient direction", r.len(), coeff_dir.len())?;
    let n = coeff_dir.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    let c = coeff_dir / n;
    let l = p.p.columns(r.start, r.len()) * &c;
    let ln = l.norm();
    if ln == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(EditDirection {
        block,
        coeff_dir: c,
        latent_dir: l / ln,
    })
}

/// `w + alpha * latent_dir`.
pub fn edit(p: &BasisMatrix, w: &DVector<f64>, dir: &EditDirection, alpha: f64) -> Result<DVector<f64>> {
    check_len("latent", p.dim(), w.len())?;
    check_len("edit direction", p.dim(), dir.latent_dir.len())?;
    Ok(w + &dir.latent_dir * alpha)
}

/// Imports blocks `k` of `w_tgt` into `w_src`.
pub fn transfer_attributes(p: &BasisMatrix, w_src: &DVector<f64>, w_tgt: &DVector<f64>, k: &[usize]) -> Result<DVector<f64>> {
    let enc = p.encoder()?;
    mix(p, &enc.encode(w_src)?, &enc.encode(w_tgt)?, k)
}

/// Applies every `(direction, alpha)` of `plan` in order.
pub fn sequential_edit(p: &BasisMatrix, w: &DVector<f64>, plan: &[(EditDirection, f64)]) -> Result<DVector<f64>> {
    plan.iter()
        .try_fold(w.clone(), |acc, (d, a)| edit(p, &acc, d, *a))
}

//! Losses, their analytic gradients and the training loop for the basis `P`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::schema::{AttrKind, AttributeSchema};
use crate::subspace::{gram_offdiag, mix_coeffs, BasisMatrix, Encoder};
use crate::world::{sigmoid, Dataset, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Gd,
}

/// How per-sample coefficients are handled during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoeffUpdate {
    /// `a = P^-1 w` exactly at every step; `P` follows the reduced gradient.
    Eliminated,
    /// Coefficients are free parameters updated alongside `P`.
    Joint,
}

/// How mixing partners are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partner {
    /// An independent random donor for every attribute block.
    PerAttribute,
    /// One random donor supplies all attribute blocks.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub lambda_orth: f64,
    pub lambda_mixing: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub coeff_update: CoeffUpdate,
    pub partner: Partner,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_orth: 0.001,
            lambda_mixing: 3e-5,
            epochs: 300,
            batch_size: 100,
            learning_rate: 3e-3,
            seed: 12345,
            optimizer: Optimizer::Adam,
            coeff_update: CoeffUpdate::Eliminated,
            partner: Partner::PerAttribute,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::BadConfig {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if !(self.lambda_orth >= 0.0) {
            return bad("lambda_orth", "must be non-negative");
        }
        if !(self.lambda_mixing >= 0.0) {
            return bad("lambda_mixing", "must be non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        Ok(())
    }
}

/// Loss components of one evaluation; `rec` and `mix` are batch means.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub orth: f64,
    pub mix: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub basis: BasisMatrix,
    /// One coefficient vector per training sample, as columns.
    pub coeffs: DMatrix<f64>,
    pub schema: AttributeSchema,
    pub hyper: Hyperparams,
    /// Epoch means of the batch losses.
    pub history: Vec<LossBreakdown>,
}

impl TrainedModel {
    pub fn coeff(&self, i: usize) -> DVector<f64> {
        self.coeffs.column(i).into_owned()
    }

    /// Mean over samples of `||w - P a||_1 / D`.
    pub fn reconstruction_error(&self, data: &Dataset) -> f64 {
        let r = &data.w - &self.basis.p * &self.coeffs;
        r.iter().map(|v| v.abs()).sum::<f64>() / (r.nrows() * r.ncols()) as f64
    }
}

/// `||w - P a||_1`.
pub fn loss_rec(w: &DVector<f64>, p: &BasisMatrix, a: &DVector<f64>) -> Result<f64> {
    check_len("latent", p.dim(), w.len())?;
    check_len("coefficients", p.dim(), a.len())?;
    Ok((w - &p.p * a).lp_norm(1))
}

/// `sum_{i != j} ||P_i^T P_j||_F^2`.
pub fn loss_orth(p: &BasisMatrix) -> f64 {
    gram_offdiag(p).sum()
}

fn cross_mask(schema: &AttributeSchema) -> DMatrix<f64> {
    let d = schema.dim();
    DMatrix::from_fn(d, d, |i, j| {
        if schema.block_of_coord(i) == schema.block_of_coord(j) {
            0.0
        } else {
            1.0
        }
    })
}

/// `dL_orth/dP = 4 P (M .* P^T P)` with `M` masking out within-block entries.
pub fn grad_orth(p: &BasisMatrix) -> DMatrix<f64> {
    let g = p.p.transpose() * &p.p;
    &p.p * g.component_mul(&cross_mask(&p.schema)) * 4.0
}

fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Classification loss of one logit against a target score, and its derivative.
fn attr_loss(kind: AttrKind, s: f64, y: f64) -> (f64, f64) {
    match kind {
        AttrKind::Binary => (softplus(s) - y * s, sigmoid(s) - y),
        AttrKind::Continuous => ((s - y).abs(), sign0(s - y)),
    }
}

struct MixTerms {
    per_sample: Vec<f64>,
    grad_w: DMatrix<f64>,
}

/// Mixing loss of every column of `w_mix` against `targets`, and its gradient w.r.t. `w_mix`.
fn mix_core(world: &World, w_mix: &DMatrix<f64>, targets: &DMatrix<f64>) -> MixTerms {
    let fwd = world.forward(w_mix);
    let kinds = &world.schema().kinds;
    let (n, b) = fwd.logits.shape();
    let mut dl = DMatrix::zeros(n, b);
    let mut per_sample = vec![0.0; b];
    for j in 0..b {
        for k in 0..n {
            let (l, d) = attr_loss(kinds[k], fwd.logits[(k, j)], targets[(k, j)]);
            per_sample[j] += l;
            dl[(k, j)] = d;
        }
    }
    let grad_w = world.backward(&fwd, &dl);
    MixTerms { per_sample, grad_w }
}

fn check_world(world: &World, p: &BasisMatrix) -> Result<()> {
    if world.schema() != &p.schema {
        return Err(Error::SchemaMismatch(
            "basis schema differs from world schema".into(),
        ));
    }
    Ok(())
}

/// Classifier losses of `x_mix = G(mix(P, a_src, a_tgt, K))`: imported attributes against
/// `y_tgt`, the others against `y_src`. `k` holds block indices (attribute `i` is block `i + 1`).
#[allow(clippy::too_many_arguments)]
pub fn loss_mixing(
    world: &World,
    p: &BasisMatrix,
    a_src: &DVector<f64>,
    a_tgt: &DVector<f64>,
    y_src: &DVector<f64>,
    y_tgt: &DVector<f64>,
    k: &[usize],
) -> Result<f64> {
    let (loss, _, _) = mixing_with_grad(world, p, a_src, a_tgt, y_src, y_tgt, k)?;
    Ok(loss)
}

/// Loss, `dL/dP` and `(dL/da_src, dL/da_tgt)`.
pub type MixingGrad = (f64, DMatrix<f64>, (DVector<f64>, DVector<f64>));

/// [`loss_mixing`] with its gradients w.r.t. `P`, `a_src` and `a_tgt`.
#[allow(clippy::too_many_arguments)]
pub fn mixing_with_grad(
    world: &World,
    p: &BasisMatrix,
    a_src: &DVector<f64>,
    a_tgt: &DVector<f64>,
    y_src: &DVector<f64>,
    y_tgt: &DVector<f64>,
    k: &[usize],
) -> Result<MixingGrad> {
    check_world(world, p)?;
    let n = world.n_attrs();
    check_len("source scores", n, y_src.len())?;
    check_len("target scores", n, y_tgt.len())?;
    let m = mix_coeffs(p, a_src, a_tgt, k)?;
    let mut targets = DMatrix::from_column_slice(n, 1, y_src.as_slice());
    for &b in k {
        if b >= 1 {
            targets[(b - 1, 0)] = y_tgt[b - 1];
        }
    }
    let w_mix = &p.p * &m;
    let terms = mix_core(world, &DMatrix::from_column_slice(w_mix.len(), 1, w_mix.as_slice()), &targets);
    let gw = terms.grad_w.column(0).into_owned();
    let grad_p = &gw * m.transpose();
    let gm = p.p.tr_mul(&gw);
    let mut g_tgt = DVector::zeros(p.dim());
    let mut g_src = gm.clone();
    for &b in k {
        let r = p.schema.range(b);
        g_tgt.rows_mut(r.start, r.len()).copy_from(&gm.rows(r.start, r.len()));
        g_src.rows_mut(r.start, r.len()).fill(0.0);
    }
    Ok((terms.per_sample[0], grad_p, (g_src, g_tgt)))
}

/// Training samples and, for each, the dataset index donating each attribute block.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub samples: Vec<usize>,
    /// `donors[b][k]` supplies block `k + 1` of sample `b`'s mix.
    pub donors: Vec<Vec<usize>>,
}

impl Batch {
    /// Dataset indices whose coefficients the batch reads, in first-use order.
    pub fn touched(&self) -> Vec<usize> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for (b, &s) in self.samples.iter().enumerate() {
            for &j in std::iter::once(&s).chain(self.donors[b].iter()) {
                if seen.insert(j, ()).is_none() {
                    out.push(j);
                }
            }
        }
        out
    }
}

/// Total loss and gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub loss: LossBreakdown,
    pub grad_p: DMatrix<f64>,
    /// Dataset indices matching the columns of `grad_coeffs`.
    pub touched: Vec<usize>,
    pub grad_coeffs: DMatrix<f64>,
}

fn validate_batch(world: &World, data: &Dataset, p: &BasisMatrix, coeffs: &DMatrix<f64>, batch: &Batch) -> Result<()> {
    check_world(world, p)?;
    let d = p.dim();
    check_len("dataset latents", d, data.w.nrows())?;
    check_len("coefficient rows", d, coeffs.nrows())?;
    check_len("coefficient columns", data.len(), coeffs.ncols())?;
    check_len("batch donors", batch.samples.len(), batch.donors.len())?;
    if batch.samples.is_empty() {
        return Err(Error::BadConfig {
            field: "batch".into(),
            reason: "must be non-empty".into(),
        });
    }
    for (b, &s) in batch.samples.iter().enumerate() {
        check_len("donors per sample", world.n_attrs(), batch.donors[b].len())?;
        for &j in std::iter::once(&s).chain(batch.donors[b].iter()) {
            if j >= data.len() {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    len: data.len(),
                });
            }
        }
    }
    Ok(())
}

/// `lambda_orth * L_orth + mean_b (L_rec + lambda_mixing * L_mixing)` over the batch.
pub fn total_loss(
    world: &World,
    data: &Dataset,
    batch: &Batch,
    p: &BasisMatrix,
    coeffs: &DMatrix<f64>,
    hyper: &Hyperparams,
) -> Result<LossBreakdown> {
    Ok(total_loss_grad(world, data, batch, p, coeffs, hyper)?.loss)
}

/// [`total_loss`] with gradients w.r.t. `P` and every coefficient column the batch touches.
pub fn total_loss_grad(
    world: &World,
    data: &Dataset,
    batch: &Batch,
    p: &BasisMatrix,
    coeffs: &DMatrix<f64>,
    hyper: &Hyperparams,
) -> Result<BatchGrad> {
    validate_batch(world, data, p, coeffs, batch)?;
    let schema = &p.schema;
    let d = p.dim();
    let n = world.n_attrs();
    let bsz = batch.samples.len();
    let inv_b = 1.0 / bsz as f64;

    let touched = batch.touched();
    let col_of: HashMap<usize, usize> = touched.iter().enumerate().map(|(c, &j)| (j, c)).collect();
    let mut grad_coeffs = DMatrix::zeros(d, touched.len());

    // Reconstruction.
    let mut rec = 0.0;
    let mut grad_p = DMatrix::zeros(d, d);
    for &s in &batch.samples {
        let a = coeffs.column(s);
        let r = data.w.column(s) - &p.p * a;
        rec += r.lp_norm(1);
        let sg = r.map(sign0);
        grad_p -= &sg * a.transpose() * inv_b;
        let ga = p.p.tr_mul(&sg) * inv_b;
        let mut col = grad_coeffs.column_mut(col_of[&s]);
        col -= ga;
    }
    rec *= inv_b;

    // Mixing.
    let mut m = DMatrix::zeros(d, bsz);
    let mut targets = DMatrix::zeros(n, bsz);
    for (b, &s) in batch.samples.iter().enumerate() {
        let r0 = schema.range(0);
        m.view_mut((r0.start, b), (r0.len(), 1))
            .copy_from(&coeffs.view((r0.start, s), (r0.len(), 1)));
        for k in 0..n {
            let donor = batch.donors[b][k];
            let r = schema.range(k + 1);
            m.view_mut((r.start, b), (r.len(), 1))
                .copy_from(&coeffs.view((r.start, donor), (r.len(), 1)));
            targets[(k, b)] = data.y[(k, donor)];
        }
    }
    let mix;
    if hyper.lambda_mixing > 0.0 {
        let terms = mix_core(world, &(&p.p * &m), &targets);
        mix = terms.per_sample.iter().sum::<f64>() * inv_b;
        let scale = hyper.lambda_mixing * inv_b;
        let gw = terms.grad_w * scale;
        grad_p += &gw * m.transpose();
        let gm = p.p.tr_mul(&gw);
        for (b, &s) in batch.samples.iter().enumerate() {
            let r0 = schema.range(0);
            let mut c = grad_coeffs.view_mut((r0.start, col_of[&s]), (r0.len(), 1));
            c += gm.view((r0.start, b), (r0.len(), 1));
            for k in 0..n {
                let r = schema.range(k + 1);
                let col = col_of[&batch.donors[b][k]];
                let mut c = grad_coeffs.view_mut((r.start, col), (r.len(), 1));
                c += gm.view((r.start, b), (r.len(), 1));
            }
        }
    } else {
        let w_mix = &p.p * &m;
        mix = mix_core(world, &w_mix, &targets).per_sample.iter().sum::<f64>() * inv_b;
    }

    let orth = loss_orth(p);
    if hyper.lambda_orth > 0.0 {
        grad_p += grad_orth(p) * hyper.lambda_orth;
    }
    let total = hyper.lambda_orth * orth + rec + hyper.lambda_mixing * mix;
    Ok(BatchGrad {
        loss: LossBreakdown {
            rec,
            orth,
            mix,
            total,
        },
        grad_p,
        touched,
        grad_coeffs,
    })
}

/// Max over components of `|g_an - g_fd| / max(1e-12, |g_an| + |g_fd|)` with central differences.
pub fn grad_check<F>(f: F, analytic: &[f64], params: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), params.len());
    let mut x = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs()).max(1e-12);
        worst = worst.max(err);
    }
    worst
}

/// Orthonormal `D x D` matrix from the QR factor of a Gaussian matrix, with a positive-diagonal `R`.
pub fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

struct Adam {
    m: DMatrix<f64>,
    v: DMatrix<f64>,
    t: Vec<i32>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Adam {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: DMatrix::zeros(rows, cols),
            v: DMatrix::zeros(rows, cols),
            t: vec![0; cols],
        }
    }

    /// Updates column `col` of `x` given its gradient.
    fn step_column(&mut self, x: &mut DMatrix<f64>, col: usize, g: impl Iterator<Item = f64>, lr: f64) {
        self.t[col] += 1;
        let c1 = 1.0 - BETA1.powi(self.t[col]);
        let c2 = 1.0 - BETA2.powi(self.t[col]);
        for (i, gi) in g.enumerate() {
            let m = &mut self.m[(i, col)];
            *m = BETA1 * *m + (1.0 - BETA1) * gi;
            let v = &mut self.v[(i, col)];
            *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
            x[(i, col)] -= lr * (self.m[(i, col)] / c1) / ((self.v[(i, col)] / c2).sqrt() + EPS);
        }
    }
}

fn update(
    opt: Optimizer,
    state: &mut Adam,
    x: &mut DMatrix<f64>,
    col: usize,
    g: impl Iterator<Item = f64>,
    lr: f64,
) {
    match opt {
        Optimizer::Adam => state.step_column(x, col, g, lr),
        Optimizer::Gd => {
            for (i, gi) in g.enumerate() {
                x[(i, col)] -= lr * gi;
            }
        }
    }
}

/// Draws a shuffled epoch of batches with their mixing donors.
fn epoch_batches(rng: &mut ChaCha8Rng, n: usize, n_attrs: usize, hyper: &Hyperparams) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(hyper.batch_size)
        .map(|chunk| {
            let donors = chunk
                .iter()
                .map(|_| match hyper.partner {
                    Partner::PerAttribute => (0..n_attrs).map(|_| rng.random_range(0..n)).collect(),
                    Partner::Single => vec![rng.random_range(0..n); n_attrs],
                })
                .collect();
            Batch {
                samples: chunk.to_vec(),
                donors,
            }
        })
        .collect()
}

/// Learns `P` on `data`; deterministic in `hyper.seed`.
pub fn train(world: &World, data: &Dataset, schema: &AttributeSchema, hyper: &Hyperparams) -> Result<TrainedModel> {
    hyper.validate()?;
    if world.schema() != schema {
        return Err(Error::SchemaMismatch("schema differs from the world's".into()));
    }
    if data.is_empty() {
        return Err(Error::BadConfig {
            field: "dataset".into(),
            reason: "must be non-empty".into(),
        });
    }
    let d = schema.dim();
    check_len("dataset latents", d, data.w.nrows())?;
    check_len("dataset scores", schema.n_attrs(), data.y.nrows())?;
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut basis = BasisMatrix::new(random_orthonormal(&mut rng, d), schema.clone())?;
    let mut coeffs = Encoder::new(&basis.p)?.encode_columns(&data.w)?;
    let mut p_state = Adam::new(d, d);
    let mut c_state = Adam::new(d, if hyper.coeff_update == CoeffUpdate::Joint { n } else { 0 });
    let mut history = Vec::with_capacity(hyper.epochs);
    let lr = hyper.learning_rate;

    for epoch in 0..hyper.epochs {
        let batches = epoch_batches(&mut rng, n, schema.n_attrs(), hyper);
        let mut acc = LossBreakdown::default();
        for batch in &batches {
            let diverged = |_| Error::DivergedTraining { epoch };
            let eliminated = hyper.coeff_update == CoeffUpdate::Eliminated;
            if eliminated {
                let enc = Encoder::new(&basis.p).map_err(diverged)?;
                for &j in &batch.touched() {
                    let a = enc.encode(&data.w.column(j).into_owned()).map_err(diverged)?;
                    coeffs.set_column(j, &a);
                }
            }
            let g = total_loss_grad(world, data, batch, &basis, &coeffs, hyper)?;
            if !g.loss.total.is_finite() {
                return Err(Error::DivergedTraining { epoch });
            }
            acc.rec += g.loss.rec;
            acc.orth += g.loss.orth;
            acc.mix += g.loss.mix;
            acc.total += g.loss.total;

            let mut grad_p = g.grad_p;
            if eliminated {
                // Coefficients follow P through a = P^-1 w: subtract P^-T sum_j g_j a_j^T.
                let mut s = DMatrix::zeros(d, d);
                for (c, &j) in g.touched.iter().enumerate() {
                    s += g.grad_coeffs.column(c) * coeffs.column(j).transpose();
                }
                let lu = basis.p.transpose().lu();
                let corr = lu.solve(&s).ok_or(Error::DivergedTraining { epoch })?;
                grad_p -= corr;
            } else {
                for (c, &j) in g.touched.iter().enumerate() {
                    let col: Vec<f64> = g.grad_coeffs.column(c).iter().copied().collect();
                    update(hyper.optimizer, &mut c_state, &mut coeffs, j, col.into_iter(), lr);
                }
            }
            for j in 0..d {
                let col: Vec<f64> = grad_p.column(j).iter().copied().collect();
                update(hyper.optimizer, &mut p_state, &mut basis.p, j, col.into_iter(), lr);
            }
            if basis.p.iter().any(|v| !v.is_finite()) {
                return Err(Error::DivergedTraining { epoch });
            }
        }
        let nb = batches.len() as f64;
        history.push(LossBreakdown {
            rec: acc.rec / nb,
            orth: acc.orth / nb,
            mix: acc.mix / nb,
            total: acc.total / nb,
        });
    }

    if hyper.coeff_update == CoeffUpdate::Eliminated {
        coeffs = Encoder::new(&basis.p)
            .map_err(|_| Error::DivergedTraining { epoch: hyper.epochs })?
            .encode_columns(&data.w)?;
    }
    Ok(TrainedModel {
        basis,
        coeffs,
        schema: schema.clone(),
        hyper: hyper.clone(),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_naive() {
        for s in [-5.0, -0.3, 0.0, 0.7, 4.0] {
            assert!((softplus(s) - (1.0 + f64::exp(s)).ln()).abs() < 1e-14);
        }
        assert!(softplus(-800.0) >= 0.0 && softplus(800.0) == 800.0);
    }

    #[test]
    fn bce_derivative_is_sigmoid_residual() {
        let (l, d) = attr_loss(AttrKind::Binary, 0.0, 0.5);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn continuous_subgradient_zero_at_kink() {
        assert_eq!(attr_loss(AttrKind::Continuous, 2.0, 2.0), (0.0, 0.0));
        assert_eq!(attr_loss(AttrKind::Continuous, 1.0, 3.0), (2.0, -1.0));
    }

    #[test]
    fn hyperparams_validation() {
        let h = Hyperparams { epochs: 0, ..Hyperparams::default() };
        assert!(h.validate().is_err());
        let h = Hyperparams { learning_rate: 0.0, ..Hyperparams::default() };
        assert!(h.validate().is_err());
        assert!(Hyperparams::default().validate().is_ok());
    }
}

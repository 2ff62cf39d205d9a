//! A frozen synthetic stand-in for a pretrained generator stack.
//!
//! Latents are built from a known orthonormal factor basis `Q`: block `k` of `Q` spans
//! the directions that drive attribute `k`. The generator is one affine layer plus tanh,
//! every attribute classifier is one tanh hidden layer plus a linear head, and the
//! identity embedder is affine. Everything is differentiable, so the training losses
//! can be backpropagated analytically.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::schema::{AttrKind, AttributeSchema};

/// Construction parameters of a [`World`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub schema: AttributeSchema,
    /// Injected correlations between the leading factors of two attributes.
    pub corr: Vec<(String, String, f64)>,
    pub dx: usize,
    pub dh: usize,
    pub de: usize,
    /// Scale of generator weights from foreign factors into a unit.
    pub crosstalk: f64,
    /// Scale of classifier weights on other attributes' units.
    pub off_block_read: f64,
    /// Scale of classifier weights on residual units.
    pub residual_read: f64,
    /// `(reader, source, ratio)`: classifier `reader` also reads the units of `source`, with
    /// a sensitivity to the source block of `ratio` times that to its own block.
    pub cross_reads: Vec<(String, String, f64)>,
    /// Minimum share of logit-gradient energy off the leading axis of a block.
    pub min_secondary: f64,
    /// Identity-embedder column scale for each attribute's units (default 1).
    pub identity_scales: Vec<(String, f64)>,
    /// Target standard deviation of binary logits; continuous logits get 1.
    pub binary_logit_std: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let s = |a: &str| a.to_string();
        Self {
            seed: 1,
            schema: AttributeSchema::default_faces(),
            corr: vec![(s("age"), s("glasses"), 0.6), (s("age"), s("gender"), 0.4)],
            dx: 48,
            dh: 24,
            de: 16,
            crosstalk: 0.005,
            off_block_read: 0.002,
            residual_read: 0.002,
            cross_reads: vec![
                (s("glasses"), s("age"), 0.07),
                (s("age"), s("glasses"), 0.05),
                (s("gender"), s("age"), 0.05),
            ],
            min_secondary: 0.25,
            identity_scales: vec![
                (s("pose"), 0.2),
                (s("smile"), 0.2),
                (s("glasses"), 0.2),
                (s("age"), 0.6),
                (s("gender"), 0.6),
            ],
            binary_logit_std: 2.0,
        }
    }
}

/// One attribute classifier: `s = c . tanh(H x + b) + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    /// Ground-truth factor basis, columns partitioned like the schema.
    pub q: DMatrix<f64>,
    /// Correlation-injecting factor mixing, `w = Q A z`.
    pub a: DMatrix<f64>,
    pub wg: DMatrix<f64>,
    pub bg: DVector<f64>,
    pub heads: Vec<Head>,
    pub e: DMatrix<f64>,
    pub be: DVector<f64>,
}

/// Latents and attribute scores, one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub w: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

/// One `(w, y)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub w: DVector<f64>,
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.w.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.w.ncols() == 0
    }

    pub fn sample(&self, i: usize) -> LabeledSample {
        LabeledSample {
            w: self.w.column(i).into_owned(),
            y: self.y.column(i).into_owned(),
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            let v: f64 = rng.sample(StandardNormal);
            m[(i, j)] = v * scale;
        }
    }
    m
}

fn gauss_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

/// Orthogonal matrix with first column `u` (unit): identity or a Householder reflection.
fn frame_with_first(u: &DVector<f64>) -> DMatrix<f64> {
    let n = u.len();
    let mut v = -u.clone();
    v[0] += 1.0;
    let vv = v.norm_squared();
    if vv < 1e-30 {
        return DMatrix::identity(n, n);
    }
    DMatrix::identity(n, n) - (&v * v.transpose()) * (2.0 / vv)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub(crate) fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

impl World {
    /// Units of the generator that belong to attribute `k` (zero-based).
    pub fn attr_units(&self, k: usize) -> std::ops::Range<usize> {
        attr_units(&self.config.schema, k)
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.config.schema
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn n_attrs(&self) -> usize {
        self.heads.len()
    }

    /// `w = Q A z`.
    pub fn map_latent(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("z", self.dim(), z.len())?;
        Ok(&self.q * (&self.a * z))
    }

    /// `x = tanh(W_g w + b_g)`.
    pub fn generate(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("latent", self.dim(), w.len())?;
        Ok((&self.wg * w + &self.bg).map(f64::tanh))
    }

    /// `dx/dw`, `Dx x D`.
    pub fn generate_jacobian(&self, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        let x = self.generate(w)?;
        let mut j = self.wg.clone();
        for (i, xi) in x.iter().enumerate() {
            j.row_mut(i).scale_mut(1.0 - xi * xi);
        }
        Ok(j)
    }

    /// Hidden features `l(x) = tanh(H_k x + b_k)` of attribute `k` (zero-based).
    pub fn features(&self, x: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
        let head = self.head(k)?;
        check_len("observation", self.config.dx, x.len())?;
        Ok((&head.h * x + &head.b).map(f64::tanh))
    }

    pub fn features_jacobian(&self, x: &DVector<f64>, k: usize) -> Result<DMatrix<f64>> {
        let l = self.features(x, k)?;
        let mut j = self.head(k)?.h.clone();
        for (i, li) in l.iter().enumerate() {
            j.row_mut(i).scale_mut(1.0 - li * li);
        }
        Ok(j)
    }

    fn head(&self, k: usize) -> Result<&Head> {
        self.heads.get(k).ok_or(Error::IndexOutOfRange {
            index: k,
            len: self.heads.len(),
        })
    }

    /// Pre-activation score `c_k . l(x) + t_k`.
    pub fn logit(&self, x: &DVector<f64>, k: usize) -> Result<f64> {
        let head = self.head(k)?;
        Ok(head.c.dot(&self.features(x, k)?) + head.t)
    }

    /// Attribute scores: sigmoid of the logit for binary attributes, the logit itself otherwise.
    pub fn classify(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("observation", self.config.dx, x.len())?;
        let mut y = DVector::zeros(self.n_attrs());
        for k in 0..self.n_attrs() {
            let s = self.logit(x, k)?;
            y[k] = match self.config.schema.kinds[k] {
                AttrKind::Binary => sigmoid(s),
                AttrKind::Continuous => s,
            };
        }
        Ok(y)
    }

    /// `dy/dx`, `N x Dx`.
    pub fn classify_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.n_attrs(), self.config.dx);
        for k in 0..self.n_attrs() {
            let head = &self.heads[k];
            let dl = self.features_jacobian(x, k)?;
            let mut row = dl.tr_mul(&head.c).transpose();
            if self.config.schema.kinds[k] == AttrKind::Binary {
                let p = sigmoid(self.logit(x, k)?);
                row *= p * (1.0 - p);
            }
            j.row_mut(k).copy_from(&row);
        }
        Ok(j)
    }

    /// Affine identity embedding `E x + b_e`.
    pub fn identity_embed(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("observation", self.config.dx, x.len())?;
        Ok(&self.e * x + &self.be)
    }

    /// Orthonormal basis of ground-truth block `i`.
    pub fn true_subspace(&self, i: usize) -> Result<DMatrix<f64>> {
        let s = self.schema();
        if i >= s.n_blocks() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: s.n_blocks(),
            });
        }
        let r = s.range(i);
        Ok(self.q.columns(r.start, r.len()).into_owned())
    }

    /// Draws `z ~ N(0, I)` and labels `w = M(z)` with the classifiers.
    pub fn sample_dataset(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gauss(&mut rng, n, self.dim(), 1.0).transpose();
        let w = &self.q * (&self.a * z);
        let y = self.scores_batch(&w);
        Dataset { w, y }
    }

    /// Attribute scores for every latent column.
    pub fn scores_batch(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut s = self.forward(w).logits;
        for k in 0..self.n_attrs() {
            if self.config.schema.kinds[k] == AttrKind::Binary {
                s.row_mut(k).apply(|v| *v = sigmoid(*v));
            }
        }
        s
    }

    /// Observations for every latent column.
    pub fn generate_batch(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = &self.wg * w;
        for mut col in x.column_iter_mut() {
            col += &self.bg;
            col.apply(|v| *v = v.tanh());
        }
        x
    }

    /// Identity embeddings for every observation column.
    pub fn embed_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut e = &self.e * x;
        for mut col in e.column_iter_mut() {
            col += &self.be;
        }
        e
    }

    /// Batched forward pass from latents to logits, keeping what backprop needs.
    pub fn forward(&self, w: &DMatrix<f64>) -> Forward {
        let x = self.generate_batch(w);
        let mut hidden = Vec::with_capacity(self.n_attrs());
        let mut logits = DMatrix::zeros(self.n_attrs(), w.ncols());
        for (k, head) in self.heads.iter().enumerate() {
            let mut h = &head.h * &x;
            for mut col in h.column_iter_mut() {
                col += &head.b;
                col.apply(|v| *v = v.tanh());
            }
            let s = head.c.tr_mul(&h);
            for j in 0..w.ncols() {
                logits[(k, j)] = s[j] + head.t;
            }
            hidden.push(h);
        }
        Forward { x, hidden, logits }
    }

    /// Gradient w.r.t. the latents given the gradient w.r.t. the logits (`N x B`).
    pub fn backward(&self, fwd: &Forward, dlogits: &DMatrix<f64>) -> DMatrix<f64> {
        let b = fwd.x.ncols();
        let mut gx = DMatrix::zeros(self.config.dx, b);
        for (k, head) in self.heads.iter().enumerate() {
            let h = &fwd.hidden[k];
            let mut gz = &head.c * dlogits.row(k);
            gz.zip_apply(h, |g, hv| *g *= 1.0 - hv * hv);
            gx += head.h.tr_mul(&gz);
        }
        gx.zip_apply(&fwd.x, |g, xv| *g *= 1.0 - xv * xv);
        self.wg.tr_mul(&gx)
    }
}

impl World {
    /// RMS norm of the gradient of each logit (rows) w.r.t. each factor block (columns),
    /// over `n` latents from [`World::sample_dataset`].
    pub fn block_sensitivity(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let schema = self.schema();
        let w = self.sample_dataset(n, seed).w;
        let fwd = self.forward(&w);
        let mut out = DMatrix::zeros(self.n_attrs(), schema.n_blocks());
        for k in 0..self.n_attrs() {
            let mut dl = DMatrix::zeros(self.n_attrs(), n);
            dl.row_mut(k).fill(1.0);
            let gf = self.q.tr_mul(&self.backward(&fwd, &dl));
            for b in 0..schema.n_blocks() {
                let r = schema.range(b);
                out[(k, b)] = (gf.rows(r.start, r.len()).norm_squared() / n as f64).sqrt();
            }
        }
        out
    }
}

/// Intermediate values of [`World::forward`].
pub struct Forward {
    pub x: DMatrix<f64>,
    pub hidden: Vec<DMatrix<f64>>,
    pub logits: DMatrix<f64>,
}

fn attr_units(schema: &AttributeSchema, k: usize) -> std::ops::Range<usize> {
    let start: usize = schema.block_sizes[1..=k].iter().take(k).map(|n| 2 * n).sum();
    start..start + 2 * schema.block_sizes[k + 1]
}

/// Share of gradient energy orthogonal to the mean gradient, for a head reading only its own units.
fn secondary_fraction(
    f_own: &DMatrix<f64>,
    g_own: &DMatrix<f64>,
    bg_own: &DVector<f64>,
    h_own: &DMatrix<f64>,
    bh: &DVector<f64>,
    c: &DVector<f64>,
) -> f64 {
    let n = g_own.ncols();
    let samples = f_own.ncols();
    let mut grads = DMatrix::zeros(n, samples);
    for s in 0..samples {
        let f = f_own.column(s);
        let u = (g_own * f + bg_own).map(f64::tanh);
        let h = (h_own * &u + bh).map(f64::tanh);
        let gh = c.component_mul(&h.map(|v| 1.0 - v * v));
        let gu = h_own.tr_mul(&gh).component_mul(&u.map(|v| 1.0 - v * v));
        grads.set_column(s, &g_own.tr_mul(&gu));
    }
    let mean = grads.column_mean();
    let mn = mean.norm();
    if mn == 0.0 {
        return 0.0;
    }
    let dir = mean / mn;
    let total: f64 = grads.iter().map(|v| v * v).sum();
    let along: f64 = grads.column_iter().map(|g| g.dot(&dir).powi(2)).sum();
    1.0 - along / total
}

/// Builds the world deterministically from its config.
pub fn make_world(config: &WorldConfig) -> Result<World> {
    let schema = &config.schema;
    schema.validate()?;
    let d = schema.dim();
    let n_attr = schema.n_attrs();
    let attr_unit_total: usize = schema.block_sizes[1..].iter().map(|n| 2 * n).sum();
    if config.dx <= attr_unit_total {
        return Err(Error::BadConfig {
            field: "dx".into(),
            reason: format!("needs more than {attr_unit_total} units"),
        });
    }
    if config.dh == 0 || config.de == 0 {
        return Err(Error::BadConfig {
            field: "dh/de".into(),
            reason: "must be positive".into(),
        });
    }
    let corr_s = correlation_matrix(schema, &config.corr)?;
    let a = corr_s.cholesky().ok_or_else(|| {
        Error::BadCorrelationSpec("requested correlations are not jointly realizable".into())
    })?;
    let a = a.l();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let qr = gauss(&mut rng, d, d, 1.0).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }

    // Generator weights in factor coordinates; W_g = F Q^T.
    let mut f = gauss(&mut rng, config.dx, d, config.crosstalk);
    for k in 0..n_attr {
        let cols = schema.range(k + 1);
        let n = cols.len();
        for (m, u) in attr_units(schema, k).enumerate() {
            let mut v = DVector::from_fn(n, |_, _| 0.2 * rng.random_range(-1.0..1.0));
            v[m % n] += 1.0;
            let gain = rng.random_range(0.7..1.1);
            v *= gain / v.norm();
            for (j, col) in cols.clone().enumerate() {
                f[(u, col)] = v[j];
            }
        }
    }
    let res = schema.range(0);
    let res_scale = 0.9 / (res.len() as f64).sqrt();
    for u in attr_unit_total..config.dx {
        for col in res.clone() {
            f[(u, col)] = rng.sample::<f64, _>(StandardNormal) * res_scale;
        }
    }
    let bg = gauss_vec(&mut rng, config.dx, 0.1);

    let mut heads = Vec::with_capacity(n_attr);
    for k in 0..n_attr {
        let units = attr_units(schema, k);
        let cols = schema.range(k + 1);
        let f_own = gauss(&mut rng, cols.len(), 2000, 1.0);
        let g_own = f.view((units.start, cols.start), (units.len(), cols.len())).into_owned();
        let bg_own = bg.rows(units.start, units.len()).into_owned();
        let mut best: Option<(f64, Head)> = None;
        for _ in 0..200 {
            let mut h = gauss(&mut rng, config.dh, config.dx, config.off_block_read);
            let own = gauss(&mut rng, config.dh, units.len(), 1.0);
            h.columns_mut(units.start, units.len()).copy_from(&own);
            let n_res = config.dx - attr_unit_total;
            let res = gauss(&mut rng, config.dh, n_res, config.residual_read);
            h.columns_mut(attr_unit_total, n_res).copy_from(&res);
            let b = gauss_vec(&mut rng, config.dh, 0.2);
            let c = gauss_vec(&mut rng, config.dh, 1.0 / (config.dh as f64).sqrt());
            let frac = if cols.len() > 1 {
                secondary_fraction(&f_own, &g_own, &bg_own, &own, &b, &c)
            } else {
                1.0
            };
            let better = best.as_ref().is_none_or(|(bf, _)| frac > *bf);
            if better {
                best = Some((frac, Head { h, b, c, t: 0.0 }));
            }
            if frac >= config.min_secondary {
                break;
            }
        }
        heads.push(best.expect("at least one draw").1);
    }
    let mut cross = Vec::with_capacity(config.cross_reads.len());
    for (reader, source, ratio) in &config.cross_reads {
        let rk = schema.attr_index(reader)?;
        let sk = schema.attr_index(source)?;
        if rk == sk || !(*ratio >= 0.0) {
            return Err(Error::BadConfig {
                field: "cross_reads".into(),
                reason: format!("`{reader}` must read another attribute with a non-negative ratio"),
            });
        }
        let units = attr_units(schema, sk);
        let block = gauss(&mut rng, config.dh, units.len(), *ratio);
        heads[rk].h.columns_mut(units.start, units.len()).copy_from(&block);
        cross.push((rk, sk, *ratio));
    }

    let mut world = World {
        config: config.clone(),
        q,
        a,
        wg: DMatrix::zeros(config.dx, d),
        bg,
        heads,
        e: DMatrix::zeros(config.de, config.dx),
        be: DVector::zeros(config.de),
    };
    world.wg = &f * world.q.transpose();

    // Scale cross-reads to their target sensitivity ratios; a few passes absorb the tanh curvature.
    for _ in 0..3 {
        let sens = world.block_sensitivity(2000, config.seed ^ 0xc105_5eed);
        for &(rk, sk, ratio) in &cross {
            let got = sens[(rk, sk + 1)] / sens[(rk, rk + 1)];
            if got > 0.0 {
                let units = attr_units(schema, sk);
                world.heads[rk].h.columns_mut(units.start, units.len()).scale_mut(ratio / got);
            }
        }
    }

    // Rotate each block so its leading factor follows the mean logit gradient.
    let probe_f = gauss(&mut rng, d, 4000, 1.0);
    let probe_w = &world.q * &probe_f;
    let fwd = world.forward(&probe_w);
    for k in 0..n_attr {
        let mut dl = DMatrix::zeros(n_attr, probe_w.ncols());
        dl.row_mut(k).fill(1.0);
        let gw = world.backward(&fwd, &dl);
        let gf = world.q.tr_mul(&gw);
        let cols = schema.range(k + 1);
        let mean = gf.rows(cols.start, cols.len()).column_mean();
        let rot = frame_with_first(&(mean.clone() / mean.norm()));
        let qk = world.q.columns(cols.start, cols.len()) * &rot;
        world.q.columns_mut(cols.start, cols.len()).copy_from(&qk);
    }
    // W_g is unchanged by the relabeling; logits are standardized on the same probe.
    for k in 0..n_attr {
        let mut l: Vec<f64> = fwd.logits.row(k).iter().copied().collect();
        let n = l.len() as f64;
        let mean = l.iter().sum::<f64>() / n;
        let sd = (l.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = match schema.kinds[k] {
            AttrKind::Binary => config.binary_logit_std,
            AttrKind::Continuous => 1.0,
        };
        let scale = target / sd;
        for v in l.iter_mut() {
            *v *= scale;
        }
        world.heads[k].c *= scale;
        world.heads[k].t = -median(&mut l);
    }

    let mut e = gauss(&mut rng, config.de, config.dx, 1.0 / (config.dx as f64).sqrt());
    for k in 0..n_attr {
        let scale = config
            .identity_scales
            .iter()
            .find(|(n, _)| n == &schema.names[k])
            .map_or(1.0, |(_, s)| *s);
        for u in attr_units(schema, k) {
            e.column_mut(u).scale_mut(scale);
        }
    }
    world.e = e;
    world.be = gauss_vec(&mut rng, config.de, 0.1);
    Ok(world)
}

/// Factor correlation matrix with the requested entries between leading factors.
fn correlation_matrix(schema: &AttributeSchema, corr: &[(String, String, f64)]) -> Result<DMatrix<f64>> {
    let d = schema.dim();
    let mut s = DMatrix::identity(d, d);
    for (a, b, rho) in corr {
        if !(rho.abs() < 1.0) {
            return Err(Error::BadCorrelationSpec(format!(
                "|rho| must be below 1 for ({a}, {b}), got {rho}"
            )));
        }
        let ia = schema
            .block_of(a)
            .map_err(|_| Error::BadCorrelationSpec(format!("unknown attribute `{a}`")))?;
        let ib = schema
            .block_of(b)
            .map_err(|_| Error::BadCorrelationSpec(format!("unknown attribute `{b}`")))?;
        if ia == ib {
            return Err(Error::BadCorrelationSpec(format!("`{a}` paired with itself")));
        }
        let (i, j) = (schema.offset(ia), schema.offset(ib));
        s[(i, j)] = *rho;
        s[(j, i)] = *rho;
    }
    Ok(s)
}

//! Disentanglement measurements on edited latents.
//!
//! Attribute indices here are zero-based (`0..N`); edit directions carry their 1-based block.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::editing::{fit_svm_direction, EditDirection, SvmConfig};
use crate::error::{check_len, Error, Result};
use crate::subspace::{principal_angles, BasisMatrix};
use crate::training::{loss_orth, train, Hyperparams};
use crate::world::{Dataset, World};

/// `(c_k . l(x) + t_k) / ||c_k||`: signed distance of the features to the head's hyperplane.
pub fn attribute_score(world: &World, x: &DVector<f64>, k: usize) -> Result<f64> {
    let l = world.features(x, k)?;
    let head = &world.heads[k];
    Ok(score_from_features(&head.c, head.t, &l))
}

pub fn score_from_features(c: &DVector<f64>, t: f64, l: &DVector<f64>) -> f64 {
    (c.dot(l) + t) / c.norm()
}

/// `attribute_score(x_edit) - attribute_score(x)`.
pub fn perceptual_delta(world: &World, x: &DVector<f64>, x_edit: &DVector<f64>, k: usize) -> Result<f64> {
    Ok(attribute_score(world, x_edit, k)? - attribute_score(world, x, k)?)
}

/// Scores of every attribute (rows) for every latent column.
fn scores_of_latents(world: &World, w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = world.forward(w).logits;
    for (k, head) in world.heads.iter().enumerate() {
        let n = head.c.norm();
        s.row_mut(k).apply(|v| *v /= n);
    }
    s
}

/// Standard Pearson correlation; `None` when either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Per-attribute edit strengths for the correlation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AlphaSampler {
    Uniform { lo: f64, hi: f64 },
}

impl Default for AlphaSampler {
    fn default() -> Self {
        AlphaSampler::Uniform { lo: -3.0, hi: 3.0 }
    }
}

impl AlphaSampler {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            AlphaSampler::Uniform { lo, hi } => {
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            AlphaSampler::Uniform { lo, hi } => format!("uniform[{lo},{hi}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    /// Absolute Pearson correlations between the attributes' delta series.
    pub matrix: DMatrix<f64>,
    /// Mean of the off-diagonal entries of each column.
    pub avg_row: Vec<f64>,
    pub n_eval: usize,
    pub edit_spec: String,
    /// Attributes whose delta series had zero variance; their off-diagonal entries are 0.
    pub zero_variance: Vec<usize>,
}

fn check_directions(world: &World, dirs: &[EditDirection]) -> Result<()> {
    check_len("edit directions", world.n_attrs(), dirs.len())?;
    for (k, d) in dirs.iter().enumerate() {
        if d.block != k + 1 {
            return Err(Error::SchemaMismatch(format!(
                "direction {k} targets block {}, expected {}",
                d.block,
                k + 1
            )));
        }
        check_len("edit direction", world.dim(), d.latent_dir.len())?;
    }
    Ok(())
}

/// Edits every attribute at once with independent strengths and correlates the score deltas.
pub fn correlation_matrix(
    world: &World,
    dirs: &[EditDirection],
    n_eval: usize,
    seed: u64,
    sampler: AlphaSampler,
) -> Result<CorrelationReport> {
    check_directions(world, dirs)?;
    let n = world.n_attrs();
    let w = world.sample_dataset(n_eval, seed).w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a1fa);
    let mut w_edit = w.clone();
    for mut col in w_edit.column_iter_mut() {
        for d in dirs {
            let a = sampler.draw(&mut rng);
            col.axpy(a, &d.latent_dir, 1.0);
        }
    }
    let delta = scores_of_latents(world, &w_edit) - scores_of_latents(world, &w);
    let series: Vec<Vec<f64>> = (0..n).map(|k| delta.row(k).iter().copied().collect()).collect();
    let mut matrix = DMatrix::identity(n, n);
    let mut zero_variance = Vec::new();
    for (k, s) in series.iter().enumerate() {
        if pearson(s, s).is_none() {
            zero_variance.push(k);
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let r = pearson(&series[i], &series[j]).map_or(0.0, f64::abs);
            matrix[(i, j)] = r;
            matrix[(j, i)] = r;
        }
    }
    let avg_row = (0..n)
        .map(|j| {
            if n < 2 {
                0.0
            } else {
                (matrix.column(j).sum() - 1.0) / (n - 1) as f64
            }
        })
        .collect();
    Ok(CorrelationReport {
        matrix,
        avg_row,
        n_eval,
        edit_spec: format!("all {n} attributes edited at once, alpha ~ {}", sampler.describe()),
        zero_variance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectCurves {
    /// Zero-based index of the edited attribute.
    pub attribute: usize,
    pub alphas: Vec<f64>,
    /// Mean delta of every attribute (columns) at every alpha (rows).
    pub deltas: DMatrix<f64>,
}

/// The default strength grid `-3, -2.5, ..., 3`.
pub fn default_alpha_grid() -> Vec<f64> {
    (-6..=6).map(|i| i as f64 * 0.5).collect()
}

/// Mean score change of every attribute along one edit direction, per strength.
pub fn effect_curves(world: &World, dir: &EditDirection, alphas: &[f64], n_eval: usize, seed: u64) -> Result<EffectCurves> {
    check_len("edit direction", world.dim(), dir.latent_dir.len())?;
    if !alphas.contains(&0.0) {
        return Err(Error::BadConfig {
            field: "alphas".into(),
            reason: "grid must contain 0".into(),
        });
    }
    let n = world.n_attrs();
    let w = world.sample_dataset(n_eval, seed).w;
    let base = scores_of_latents(world, &w);
    let mut deltas = DMatrix::zeros(alphas.len(), n);
    for (i, &a) in alphas.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let mut w_edit = w.clone();
        for mut col in w_edit.column_iter_mut() {
            col.axpy(a, &dir.latent_dir, 1.0);
        }
        let d = scores_of_latents(world, &w_edit) - &base;
        for k in 0..n {
            deltas[(i, k)] = d.row(k).mean();
        }
    }
    Ok(EffectCurves {
        attribute: dir.block - 1,
        alphas: alphas.to_vec(),
        deltas,
    })
}

/// A named list of simultaneous edits.
#[derive(Debug, Clone, PartialEq)]
pub struct EditPlan {
    pub name: String,
    pub edits: Vec<(EditDirection, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRow {
    pub name: String,
    /// Mean cosine similarity of identity embeddings.
    pub cs: f64,
    /// Mean Euclidean distance of identity embeddings.
    pub ed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub rows: Vec<IdentityRow>,
}

impl IdentityReport {
    pub fn row(&self, name: &str) -> Option<&IdentityRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Identity-embedding similarity between original and edited observations, per plan.
pub fn identity_scores(world: &World, plans: &[EditPlan], n_eval: usize, seed: u64) -> Result<IdentityReport> {
    let w = world.sample_dataset(n_eval, seed).w;
    let e0 = world.embed_batch(&world.generate_batch(&w));
    let mut rows = Vec::with_capacity(plans.len());
    for plan in plans {
        let mut w_edit = w.clone();
        for (d, a) in &plan.edits {
            check_len("edit direction", world.dim(), d.latent_dir.len())?;
            for mut col in w_edit.column_iter_mut() {
                col.axpy(*a, &d.latent_dir, 1.0);
            }
        }
        let e1 = world.embed_batch(&world.generate_batch(&w_edit));
        let (mut cs, mut ed) = (0.0, 0.0);
        for (u, v) in e0.column_iter().zip(e1.column_iter()) {
            if u == v {
                cs += 1.0;
                continue;
            }
            cs += (u.dot(&v) / (u.norm() * v.norm())).clamp(-1.0, 1.0);
            ed += (u - v).norm();
        }
        rows.push(IdentityRow {
            name: plan.name.clone(),
            cs: cs / n_eval as f64,
            ed: ed / n_eval as f64,
        });
    }
    Ok(IdentityReport { rows })
}

/// Single-attribute plans for `names` plus an "All" plan editing every attribute, at strength `alpha`.
pub fn identity_plans(world: &World, dirs: &[EditDirection], names: &[&str], alpha: f64) -> Result<Vec<EditPlan>> {
    check_directions(world, dirs)?;
    let schema = world.schema();
    let mut plans = Vec::new();
    for name in names {
        let k = schema.attr_index(name)?;
        plans.push(EditPlan {
            name: name.to_string(),
            edits: vec![(dirs[k].clone(), alpha)],
        });
    }
    plans.push(EditPlan {
        name: "All".into(),
        edits: dirs.iter().map(|d| (d.clone(), alpha)).collect(),
    });
    Ok(plans)
}

/// Principal angles between each learned attribute block and its ground-truth block.
pub fn subspace_alignment(world: &World, p: &BasisMatrix) -> Result<Vec<Vec<f64>>> {
    if world.schema().block_sizes != p.schema.block_sizes {
        return Err(Error::DimensionMismatch {
            what: "block sizes",
            expected: world.schema().dim(),
            found: p.schema.dim(),
        });
    }
    (1..p.schema.n_blocks())
        .map(|b| {
            principal_angles(&p.block(b), &world.true_subspace(b)?)
                .ok_or(Error::RankDeficientBlock { block: b })
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Settings shared by the evaluation protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_eval: usize,
    pub seed: u64,
    pub alpha_sampler: AlphaSampler,
    pub alphas: Vec<f64>,
    /// Strength of every edit in the identity plans.
    pub identity_alpha: f64,
    pub identity_attrs: Vec<String>,
    pub svm: SvmConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_eval: 1000,
            seed: 777,
            alpha_sampler: AlphaSampler::default(),
            alphas: default_alpha_grid(),
            identity_alpha: 2.0,
            identity_attrs: vec!["smile".into(), "pose".into(), "glasses".into()],
            svm: SvmConfig::default(),
        }
    }
}

/// SVM directions for every attribute of a basis, fit on `data`.
pub fn fit_all_directions(p: &BasisMatrix, data: &Dataset, svm: &SvmConfig) -> Result<Vec<EditDirection>> {
    (1..p.schema.n_blocks())
        .map(|b| fit_svm_direction(p, data, b, svm))
        .collect()
}

/// Measurements of one trained basis under [`EvalConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSummary {
    pub corr: CorrelationReport,
    pub identity: IdentityReport,
    /// Principal angles per attribute.
    pub angles: Vec<Vec<f64>>,
    pub l_orth: f64,
    pub gram_max: f64,
}

impl ModelSummary {
    pub fn mean_angles(&self) -> Vec<f64> {
        self.angles.iter().map(|a| mean(a)).collect()
    }

    pub fn all_row(&self) -> &IdentityRow {
        self.identity.row("All").expect("identity plans include All")
    }
}

pub fn summarize(world: &World, data: &Dataset, p: &BasisMatrix, cfg: &EvalConfig) -> Result<ModelSummary> {
    let dirs = fit_all_directions(p, data, &cfg.svm)?;
    let corr = correlation_matrix(world, &dirs, cfg.n_eval, cfg.seed, cfg.alpha_sampler)?;
    let names: Vec<&str> = cfg.identity_attrs.iter().map(String::as_str).collect();
    let plans = identity_plans(world, &dirs, &names, cfg.identity_alpha)?;
    let identity = identity_scores(world, &plans, cfg.n_eval, cfg.seed)?;
    let angles = subspace_alignment(world, p)?;
    let gram = crate::subspace::gram_offdiag(p);
    Ok(ModelSummary {
        corr,
        identity,
        angles,
        l_orth: loss_orth(p),
        gram_max: gram.max(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub lambdas: Vec<f64>,
    pub summaries: Vec<ModelSummary>,
}

/// Trains one model per `lambda_orth` with otherwise identical settings and summarizes each.
pub fn ablate(world: &World, data: &Dataset, base: &Hyperparams, lambdas: &[f64], cfg: &EvalConfig) -> Result<AblationReport> {
    if lambdas.is_empty() {
        return Err(Error::BadConfig {
            field: "lambdas".into(),
            reason: "must be non-empty".into(),
        });
    }
    let mut summaries = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        let hyper = Hyperparams {
            lambda_orth: l,
            ..base.clone()
        };
        let model = train(world, data, world.schema(), &hyper)?;
        summaries.push(summarize(world, data, &model.basis, cfg)?);
    }
    Ok(AblationReport {
        lambdas: lambdas.to_vec(),
        summaries,
    })
}

#![allow(dead_code)]

use latent_subspaces::training::random_orthonormal;
use latent_subspaces::{AttrKind, AttributeSchema, BasisMatrix, Dataset};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn gauss_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Schema with anonymous binary attributes and the given block sizes.
pub fn schema_with(blocks: &[usize]) -> AttributeSchema {
    let n = blocks.len() - 1;
    AttributeSchema::new(
        (0..n).map(|i| format!("a{i}")).collect(),
        vec![AttrKind::Binary; n],
        blocks.to_vec(),
    )
    .unwrap()
}

/// `U diag(s) V^T` with singular values in `[0.5, 2]`.
pub fn well_conditioned(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let u = random_orthonormal(rng, d);
    let v = random_orthonormal(rng, d);
    let s = DMatrix::from_diagonal(&DVector::from_fn(d, |_, _| rng.random_range(0.5..2.0)));
    u * s * v.transpose()
}

pub fn random_basis(seed: u64, schema: &AttributeSchema) -> BasisMatrix {
    let mut r = rng(seed);
    BasisMatrix::new(well_conditioned(&mut r, schema.dim()), schema.clone()).unwrap()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.amax()
}

/// D=6, N=2 world: one binary and one continuous attribute with 2-dimensional blocks.
pub fn tiny_world(seed: u64) -> latent_subspaces::World {
    use latent_subspaces::{make_world, WorldConfig};
    let schema = AttributeSchema::new(
        vec!["smile".into(), "age".into()],
        vec![AttrKind::Binary, AttrKind::Continuous],
        vec![2, 2, 2],
    )
    .unwrap();
    make_world(&WorldConfig {
        seed,
        schema,
        corr: vec![],
        dx: 12,
        dh: 6,
        de: 4,
        cross_reads: vec![],
        identity_scales: vec![],
        ..WorldConfig::default()
    })
    .unwrap()
}

/// The pinned easy configuration: default world, 2000 samples, default hyperparameters.
pub struct Pinned {
    pub world: latent_subspaces::World,
    pub data: latent_subspaces::Dataset,
    pub hyper: latent_subspaces::Hyperparams,
    pub eval: latent_subspaces::evaluation::EvalConfig,
}

pub fn pinned() -> Pinned {
    use latent_subspaces::{make_world, Hyperparams, WorldConfig};
    let world = make_world(&WorldConfig::default()).unwrap();
    let data = world.sample_dataset(2000, 1001);
    Pinned {
        world,
        data,
        hyper: Hyperparams::default(),
        eval: Default::default(),
    }
}

/// Coefficients whose block-1 part is separable with margin along `normal`; latents `P a`.
pub fn separable_data(p: &BasisMatrix, normal: &DVector<f64>, n: usize, seed: u64) -> (Dataset, DMatrix<f64>) {
    let d = p.dim();
    let r1 = p.schema.range(1);
    let mut r = rng(seed);
    let mut a = gauss_mat(&mut r, d, n);
    let mut y = DMatrix::zeros(1, n);
    for j in 0..n {
        let mut blk = a.view((r1.start, j), (r1.len(), 1)).into_owned();
        let side: f64 = if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let along = blk.dot(normal);
        blk += normal * (side * (0.5 + along.abs()) - along);
        a.view_mut((r1.start, j), (r1.len(), 1)).copy_from(&blk);
        y[(0, j)] = if side > 0.0 { 0.9 } else { 0.1 };
    }
    (Dataset { w: &p.p * &a, y }, a)
}

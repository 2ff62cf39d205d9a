mod common;

use common::*;
use latent_subspaces::subspace::encode;
use latent_subspaces::training::{
    grad_check, grad_orth, loss_mixing, loss_orth, loss_rec, mixing_with_grad, random_orthonormal, total_loss,
    total_loss_grad, Batch, CoeffUpdate, Partner,
};
use latent_subspaces::{train, AttrKind, AttributeSchema, BasisMatrix, Dataset, Hyperparams, World};
use nalgebra::{DMatrix, DVector};

const H: f64 = 1e-6;

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

fn basis_from(params: &[f64], schema: &AttributeSchema) -> BasisMatrix {
    let d = schema.dim();
    BasisMatrix::new(DMatrix::from_column_slice(d, d, params), schema.clone()).unwrap()
}

#[test]
fn loss_rec_examples() {
    let p = BasisMatrix::identity(schema_with(&[1, 1]));
    let w = DVector::from_vec(vec![1.0, 2.0]);
    assert_eq!(loss_rec(&w, &p, &w).unwrap(), 0.0);
    assert_eq!(loss_rec(&w, &p, &DVector::zeros(2)).unwrap(), 3.0);

    let schema = AttributeSchema::default_faces();
    let p = random_basis(21, &schema);
    let w = gauss_vec(&mut rng(22), 32);
    assert!(loss_rec(&w, &p, &encode(&p, &w).unwrap()).unwrap() < 1e-9);
}

#[test]
fn loss_orth_examples() {
    assert_eq!(loss_orth(&BasisMatrix::identity(AttributeSchema::default_faces())), 0.0);
    // P_0 = P_1 = [e1]: both the (0,1) and (1,0) terms count.
    let p = BasisMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]), schema_with(&[1, 1])).unwrap();
    assert_eq!(loss_orth(&p), 2.0);
}

#[test]
fn loss_orth_invariant_under_block_rotations() {
    let schema = AttributeSchema::default_faces();
    let p = random_basis(23, &schema);
    let mut r = rng(24);
    let mut rotated = p.p.clone();
    for b in 0..schema.n_blocks() {
        let range = schema.range(b);
        let rot = random_orthonormal(&mut r, range.len());
        let nb = p.p.columns(range.start, range.len()) * rot;
        rotated.columns_mut(range.start, range.len()).copy_from(&nb);
    }
    let q = BasisMatrix::new(rotated, schema).unwrap();
    assert!((loss_orth(&p) - loss_orth(&q)).abs() < 1e-9);
}

#[test]
fn grad_check_on_quadratic() {
    let f = |p: &[f64]| p.iter().map(|v| v * v).sum::<f64>();
    assert!(grad_check(f, &[2.0, 4.0], &[1.0, 2.0], H) < 1e-9);
}

#[test]
fn grad_orth_matches_finite_differences() {
    let schema = schema_with(&[2, 3, 1, 2]);
    for seed in 0..10 {
        let p = random_basis(100 + seed, &schema);
        let f = |x: &[f64]| loss_orth(&basis_from(x, &schema));
        let err = grad_check(f, &flat(&grad_orth(&p)), &flat(&p.p), H);
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

fn sample_of(world: &World, w: &DVector<f64>) -> DVector<f64> {
    world.classify(&world.generate(w).unwrap()).unwrap()
}

#[test]
fn self_mix_loss_is_score_entropy() {
    let world = tiny_world(3);
    let schema = world.schema().clone();
    let p = random_basis(31, &schema);
    let w = gauss_vec(&mut rng(32), 6);
    let a = encode(&p, &w).unwrap();
    let y = sample_of(&world, &w);
    let oracle: f64 = schema
        .kinds
        .iter()
        .zip(y.iter())
        .map(|(k, &v)| match k {
            AttrKind::Binary => -(v * v.ln() + (1.0 - v) * (1.0 - v).ln()),
            AttrKind::Continuous => 0.0,
        })
        .sum();
    for k in [vec![], vec![1], vec![1, 2], vec![0, 1, 2]] {
        let l = loss_mixing(&world, &p, &a, &a, &y, &y, &k).unwrap();
        assert!((l - oracle).abs() < 1e-12, "{k:?}: {l} vs {oracle}");
    }
}

#[test]
fn continuous_term_vanishes_at_its_target() {
    let world = tiny_world(3);
    let p = BasisMatrix::identity(world.schema().clone());
    let w = gauss_vec(&mut rng(33), 6);
    let mut y = sample_of(&world, &w);
    let base = loss_mixing(&world, &p, &w, &w, &y, &y, &[]).unwrap();
    // Moving the binary target changes the loss; moving nothing on the continuous side does not.
    y[0] = 0.9;
    let moved = loss_mixing(&world, &p, &w, &w, &y, &y, &[]).unwrap();
    assert!(moved != base);
    let s = world.logit(&world.generate(&w).unwrap(), 0).unwrap();
    let bce = |t: f64| (1.0 + s.exp()).ln() - t * s;
    let y0 = sample_of(&world, &w)[0];
    assert!((moved - base - (bce(0.9) - bce(y0))).abs() < 1e-12);
}

#[test]
fn mixing_gradients_match_finite_differences() {
    let world = tiny_world(4);
    let schema = world.schema().clone();
    let mut r = rng(40);
    for i in 0..10 {
        let p = random_basis(400 + i, &schema);
        let (ws, wt) = (gauss_vec(&mut r, 6), gauss_vec(&mut r, 6));
        let (a_src, a_tgt) = (encode(&p, &ws).unwrap(), encode(&p, &wt).unwrap());
        // Shifted targets keep the continuous L1 term off its kink.
        let shift = DVector::from_vec(vec![-0.1, 0.3]);
        let (y_src, y_tgt) = (sample_of(&world, &ws) + &shift, sample_of(&world, &wt) - &shift);
        let k = [[1].as_slice(), &[2], &[1, 2], &[]][i as usize % 4];
        let (_, gp, (gs, gt)) = mixing_with_grad(&world, &p, &a_src, &a_tgt, &y_src, &y_tgt, k).unwrap();

        let f = |x: &[f64]| loss_mixing(&world, &basis_from(x, &schema), &a_src, &a_tgt, &y_src, &y_tgt, k).unwrap();
        let err = grad_check(f, &flat(&gp), &flat(&p.p), H);
        assert!(err < 1e-5, "P, point {i}: {err}");

        let f = |x: &[f64]| loss_mixing(&world, &p, &DVector::from_column_slice(x), &a_tgt, &y_src, &y_tgt, k).unwrap();
        let err = grad_check(f, gs.as_slice(), a_src.as_slice(), H);
        assert!(err < 1e-5, "a_src, point {i}: {err}");
        let f = |x: &[f64]| loss_mixing(&world, &p, &a_src, &DVector::from_column_slice(x), &y_src, &y_tgt, k).unwrap();
        let err = grad_check(f, gt.as_slice(), a_tgt.as_slice(), H);
        assert!(err < 1e-5, "a_tgt, point {i}: {err}");
    }
}

fn tiny_batch(n: usize, seed: u64) -> Batch {
    use rand::Rng;
    let mut r = rng(seed);
    let samples: Vec<usize> = (0..3).map(|_| r.random_range(0..n)).collect();
    let donors = samples.iter().map(|_| (0..2).map(|_| r.random_range(0..n)).collect()).collect();
    Batch { samples, donors }
}

fn perturbed_coeffs(p: &BasisMatrix, data: &Dataset, seed: u64) -> DMatrix<f64> {
    let enc = p.encoder().unwrap().encode_columns(&data.w).unwrap();
    enc + gauss_mat(&mut rng(seed), data.w.nrows(), data.len()) * 0.1
}

#[test]
fn total_loss_examples() {
    let world = tiny_world(5);
    let schema = world.schema().clone();
    let data = world.sample_dataset(8, 50);
    let p = random_basis(51, &schema);
    let coeffs = perturbed_coeffs(&p, &data, 52);
    let batch = tiny_batch(8, 53);

    let zero = Hyperparams { lambda_orth: 0.0, lambda_mixing: 0.0, ..Hyperparams::default() };
    let l = total_loss(&world, &data, &batch, &p, &coeffs, &zero).unwrap();
    let mean_rec = batch
        .samples
        .iter()
        .map(|&s| loss_rec(&data.w.column(s).into_owned(), &p, &coeffs.column(s).into_owned()).unwrap())
        .sum::<f64>()
        / 3.0;
    assert!((l.total - mean_rec).abs() < 1e-12);

    // One sample: the weighted sum of the three terms, each evaluated on its own.
    let hyper = Hyperparams { lambda_orth: 0.3, lambda_mixing: 0.7, ..Hyperparams::default() };
    let single = Batch { samples: vec![2], donors: vec![vec![5, 6]] };
    let l = total_loss(&world, &data, &single, &p, &coeffs, &hyper).unwrap();
    let w2 = data.w.column(2).into_owned();
    let a2 = coeffs.column(2).into_owned();
    let rec = loss_rec(&w2, &p, &a2).unwrap();
    // Block 1 from sample 5 and block 2 from sample 6, which equals two successive imports.
    let mut tgt = a2.clone();
    tgt.rows_mut(2, 2).copy_from(&coeffs.view((2, 5), (2, 1)));
    tgt.rows_mut(4, 2).copy_from(&coeffs.view((4, 6), (2, 1)));
    let y_tgt = DVector::from_vec(vec![data.y[(0, 5)], data.y[(1, 6)]]);
    let mix = loss_mixing(&world, &p, &a2, &tgt, &data.y.column(2).into_owned(), &y_tgt, &[1, 2]).unwrap();
    let expect = 0.3 * loss_orth(&p) + rec + 0.7 * mix;
    assert!((l.total - expect).abs() < 1e-12, "{} vs {expect}", l.total);
    assert!((l.rec - rec).abs() < 1e-12 && (l.mix - mix).abs() < 1e-12);
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let world = tiny_world(6);
    let schema = world.schema().clone();
    let data = world.sample_dataset(8, 60);
    let hyper = Hyperparams { lambda_orth: 0.5, lambda_mixing: 1.0, ..Hyperparams::default() };
    for i in 0..10 {
        let p = random_basis(600 + i, &schema);
        let coeffs = perturbed_coeffs(&p, &data, 700 + i);
        let batch = tiny_batch(8, 800 + i);
        let g = total_loss_grad(&world, &data, &batch, &p, &coeffs, &hyper).unwrap();

        let f = |x: &[f64]| total_loss(&world, &data, &batch, &basis_from(x, &schema), &coeffs, &hyper).unwrap().total;
        let err = grad_check(f, &flat(&g.grad_p), &flat(&p.p), H);
        assert!(err < 1e-5, "P, point {i}: {err}");

        let cols: Vec<f64> = g.touched.iter().flat_map(|&j| coeffs.column(j).iter().copied().collect::<Vec<_>>()).collect();
        let f = |x: &[f64]| {
            let mut c = coeffs.clone();
            for (n, &j) in g.touched.iter().enumerate() {
                c.column_mut(j).copy_from_slice(&x[n * 6..(n + 1) * 6]);
            }
            total_loss(&world, &data, &batch, &p, &c, &hyper).unwrap().total
        };
        let err = grad_check(f, &flat(&g.grad_coeffs), &cols, H);
        assert!(err < 1e-5, "coefficients, point {i}: {err}");
    }
}

#[test]
fn lambda_weights_scale_their_terms() {
    let world = tiny_world(7);
    let schema = world.schema().clone();
    let data = world.sample_dataset(8, 70);
    let p = random_basis(71, &schema);
    let coeffs = perturbed_coeffs(&p, &data, 72);
    let batch = tiny_batch(8, 73);
    let at = |lo: f64, lm: f64| {
        total_loss(&world, &data, &batch, &p, &coeffs, &Hyperparams { lambda_orth: lo, lambda_mixing: lm, ..Hyperparams::default() })
            .unwrap()
    };
    let base = at(0.0, 0.0);
    let l = at(2.0, 3.0);
    assert!((l.total - (base.rec + 2.0 * l.orth + 3.0 * l.mix)).abs() < 1e-12);
}

fn small_hyper() -> Hyperparams {
    Hyperparams { epochs: 4, batch_size: 16, lambda_mixing: 1e-3, ..Hyperparams::default() }
}

#[test]
fn training_is_deterministic() {
    let world = tiny_world(8);
    let data = world.sample_dataset(64, 80);
    for (coeff_update, partner) in [
        (CoeffUpdate::Eliminated, Partner::PerAttribute),
        (CoeffUpdate::Joint, Partner::Single),
    ] {
        let hyper = Hyperparams { coeff_update, partner, ..small_hyper() };
        let a = train(&world, &data, world.schema(), &hyper).unwrap();
        let b = train(&world, &data, world.schema(), &hyper).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.basis, b.basis);
        assert_eq!(a.coeffs, b.coeffs);
        assert_eq!(a.history.len(), 4);
    }
}

#[test]
fn training_rejects_bad_input() {
    let world = tiny_world(8);
    let data = world.sample_dataset(16, 81);
    let bad = Hyperparams { batch_size: 0, ..small_hyper() };
    assert!(train(&world, &data, world.schema(), &bad).is_err());
    let other = AttributeSchema::default_faces();
    assert!(train(&world, &data, &other, &small_hyper()).is_err());
}

#[test]
fn defaults_use_the_published_settings() {
    assert_eq!(Hyperparams::default().lambda_orth, 0.001);
    assert_eq!(pinned().data.len(), 2000);
}

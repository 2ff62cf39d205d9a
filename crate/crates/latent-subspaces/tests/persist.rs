use std::path::Path;

use latent_subspaces::evaluation::{effect_curves, fit_all_directions, summarize, EvalConfig};
use latent_subspaces::persist::{
    load_dataset, load_model, load_world, save_dataset, save_model, save_world, world_hash, write_alignment,
    write_correlation, write_curves, write_history, write_identity, Provenance,
};
use latent_subspaces::{make_world, train, Dataset, Error, Hyperparams, TrainedModel, World, WorldConfig};

fn bits(m: &nalgebra::DMatrix<f64>) -> Vec<u64> {
    m.iter().map(|v| v.to_bits()).collect()
}

fn setup() -> (World, Dataset, TrainedModel) {
    let world = make_world(&WorldConfig::default()).unwrap();
    let data = world.sample_dataset(200, 3);
    let hyper = Hyperparams { epochs: 3, batch_size: 50, ..Hyperparams::default() };
    let model = train(&world, &data, world.schema(), &hyper).unwrap();
    (world, data, model)
}

fn reports(world: &World, data: &Dataset, model: &TrainedModel) -> Vec<u8> {
    let cfg = EvalConfig { n_eval: 200, ..EvalConfig::default() };
    let s = summarize(world, data, &model.basis, &cfg).unwrap();
    let dirs = fit_all_directions(&model.basis, data, &cfg.svm).unwrap();
    let curves = effect_curves(world, &dirs[0], &cfg.alphas, cfg.n_eval, cfg.seed).unwrap();
    let names = &world.schema().names;
    let prov = Provenance { config_hash: "x".into(), seeds: vec![("eval".into(), cfg.seed)], note: String::new() };
    let mut out = Vec::new();
    write_correlation(&mut out, &prov, names, &s.corr).unwrap();
    write_identity(&mut out, &prov, &s.identity).unwrap();
    write_alignment(&mut out, &prov, names, &s.angles).unwrap();
    write_curves(&mut out, &prov, names, &curves).unwrap();
    write_history(&mut out, &prov, &model.history).unwrap();
    out
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn files_round_trip_bit_exact() {
    let (world, data, model) = setup();
    let dir = tempfile::tempdir().unwrap();
    let (wp, dp, mp) = (dir.path().join("w.json"), dir.path().join("d.json"), dir.path().join("m.json"));
    let hash = world_hash(&world);

    save_world(&wp, &world).unwrap();
    let w2 = load_world(&wp).unwrap();
    assert_eq!(w2, world);
    assert_eq!(bits(&w2.wg), bits(&world.wg));
    assert_eq!(world_hash(&w2), hash);

    save_dataset(&dp, &data, &hash, 3).unwrap();
    let (d2, h2) = load_dataset(&dp).unwrap();
    assert_eq!(h2, hash);
    assert_eq!(bits(&d2.w), bits(&data.w));
    assert_eq!(bits(&d2.y), bits(&data.y));

    save_model(&mp, &model, &hash).unwrap();
    let (m2, h3) = load_model(&mp).unwrap();
    assert_eq!(h3, hash);
    assert_eq!(bits(&m2.basis.p), bits(&model.basis.p));
    assert_eq!(m2, model);

    // Saving what was loaded reproduces the files byte for byte.
    let again = dir.path().join("again.json");
    save_world(&again, &w2).unwrap();
    assert_eq!(read(&again), read(&wp));
    save_dataset(&again, &d2, &hash, 3).unwrap();
    assert_eq!(read(&again), read(&dp));
    save_model(&again, &m2, &hash).unwrap();
    assert_eq!(read(&again), read(&mp));
}

#[test]
fn reloaded_model_reproduces_reports() {
    let (world, data, model) = setup();
    let dir = tempfile::tempdir().unwrap();
    let hash = world_hash(&world);
    save_world(&dir.path().join("w.json"), &world).unwrap();
    save_dataset(&dir.path().join("d.json"), &data, &hash, 3).unwrap();
    save_model(&dir.path().join("m.json"), &model, &hash).unwrap();
    let w2 = load_world(&dir.path().join("w.json")).unwrap();
    let (d2, _) = load_dataset(&dir.path().join("d.json")).unwrap();
    let (m2, _) = load_model(&dir.path().join("m.json")).unwrap();
    assert_eq!(reports(&w2, &d2, &m2), reports(&world, &data, &model));
}

#[test]
fn files_declare_kind_and_version() {
    let (world, _, _) = setup();
    let dir = tempfile::tempdir().unwrap();
    let wp = dir.path().join("w.json");
    save_world(&wp, &world).unwrap();
    let text = read(&wp);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["kind"], "world");
    assert_eq!(v["version"], 1);
    assert_eq!(v["D"], 32);

    // A world file is not a model file.
    assert!(matches!(load_model(&wp), Err(Error::Format { .. })));
    let bumped = text.replacen("\"version\": 1", "\"version\": 99", 1);
    std::fs::write(&wp, bumped).unwrap();
    assert!(matches!(load_world(&wp), Err(Error::Format { .. })));
}

#[test]
fn malformed_shapes_are_rejected() {
    let (world, _, _) = setup();
    let dir = tempfile::tempdir().unwrap();
    let wp = dir.path().join("w.json");
    save_world(&wp, &world).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&read(&wp)).unwrap();
    v["Q"].as_array_mut().unwrap().pop();
    std::fs::write(&wp, v.to_string()).unwrap();
    assert!(matches!(load_world(&wp), Err(Error::Format { .. })));
}

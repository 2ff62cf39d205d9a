// `!(x < 1.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use latent_subspaces::editing::{
    edit, fit_svm_direction, sequential_edit, transfer_attributes, within_subspace_direction, EditDirection,
};
use latent_subspaces::evaluation::{
    ablate, correlation_matrix, effect_curves, fit_all_directions, identity_plans, identity_scores,
    subspace_alignment,
};
use latent_subspaces::persist::{self, Provenance};
use latent_subspaces::{make_world, train, Dataset, Error, Result, TrainedModel, World};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

mod config;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "latsub", version, about = "Learn, edit and evaluate orthogonal attribute subspaces")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the seed of the command's own random stream.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the synthetic world and write world.json.
    MakeWorld,
    /// Sample a labeled dataset from a world into dataset.json.
    Sample {
        #[arg(long)]
        world: PathBuf,
    },
    /// Train a basis and write model.json plus history.csv.
    Train {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        lambda_orth: Option<f64>,
    },
    /// Move latents along one attribute direction.
    Edit {
        #[arg(long)]
        model: PathBuf,
        /// Latents to edit (a latents or dataset file).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        attribute: String,
        #[arg(long, allow_hyphen_values = true)]
        alpha: f64,
        /// Explicit direction in the attribute's subspace coordinates, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        coeff_dir: Option<Vec<f64>>,
        /// Labeled data for fitting an SVM direction when no explicit direction is given.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Import attribute subspaces of target latents into source latents, pairwise.
    Transfer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Attribute names, comma separated.
        #[arg(long, value_delimiter = ',')]
        attributes: Vec<String>,
    },
    /// Apply a plan of SVM-direction edits in order.
    Sequential {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Steps as `attribute=alpha`, comma separated, e.g. `smile=1.5,pose=-2`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        plan: Vec<String>,
    },
    /// Write an evaluation report.
    Eval {
        which: EvalKind,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Edited attribute for `curves`; every attribute when omitted.
        #[arg(long)]
        attribute: Option<String>,
    },
    /// Train one model per lambda_orth and compare them.
    Ablate {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalKind {
    Corr,
    Curves,
    Identity,
    Align,
}

/// Latent vectors plus how they were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LatentsFile {
    version: u32,
    kind: String,
    #[serde(default)]
    provenance: Vec<EditRecord>,
    latents: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EditRecord {
    operation: String,
    model_hash: String,
    source: String,
    #[serde(default)]
    target: Option<String>,
    #[serde(default)]
    attributes: Vec<String>,
    #[serde(default)]
    directions: Vec<DirectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DirectionRecord {
    attribute: String,
    block: usize,
    alpha: f64,
    coeff_dir: Vec<f64>,
    latent_dir: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Some(seed) = cli.seed_override {
        match &cli.cmd {
            Cmd::MakeWorld => cfg.world.seed = seed,
            Cmd::Sample { .. } => cfg.dataset.seed = seed,
            Cmd::Train { .. } | Cmd::Ablate { .. } => cfg.train.seed = seed,
            Cmd::Eval { .. } => cfg.eval.seed = seed,
            Cmd::Edit { .. } | Cmd::Sequential { .. } => cfg.eval.svm.seed = seed,
            Cmd::Transfer { .. } => {}
        }
    }
    if let Cmd::Train {
        lambda_orth: Some(l), ..
    } = &cli.cmd
    {
        cfg.train.lambda_orth = *l;
    }
    if let Cmd::Ablate { lambdas: Some(l), .. } = &cli.cmd {
        cfg.ablate.lambdas = l.clone();
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;

    match cli.cmd {
        Cmd::MakeWorld => cmd_make_world(&cfg),
        Cmd::Sample { world } => cmd_sample(&cfg, &world),
        Cmd::Train { world, dataset, .. } => cmd_train(&cfg, &world, &dataset),
        Cmd::Edit {
            model,
            input,
            attribute,
            alpha,
            coeff_dir,
            dataset,
        } => cmd_edit(&cfg, &model, &input, &attribute, alpha, coeff_dir, dataset.as_deref()),
        Cmd::Transfer {
            model,
            source,
            target,
            attributes,
        } => cmd_transfer(&cfg, &model, &source, &target, &attributes),
        Cmd::Sequential {
            model,
            input,
            dataset,
            plan,
        } => cmd_sequential(&cfg, &model, &input, &dataset, &plan),
        Cmd::Eval {
            which,
            model,
            world,
            dataset,
            attribute,
        } => cmd_eval(&cfg, which, &model, &world, &dataset, attribute.as_deref()),
        Cmd::Ablate { world, dataset, .. } => cmd_ablate(&cfg, &world, &dataset),
    }
}

fn cmd_make_world(cfg: &RunConfig) -> Result<()> {
    let world = make_world(&cfg.world).map_err(|e| match e {
        Error::BadCorrelationSpec(reason) => Error::BadConfig {
            field: "world.corr".into(),
            reason,
        },
        other => other,
    })?;
    let path = cfg.out.join("world.json");
    persist::save_world(&path, &world)?;
    println!("wrote {} (hash {})", path.display(), persist::world_hash(&world));
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, world_path: &Path) -> Result<()> {
    let world = persist::load_world(world_path)?;
    let data = world.sample_dataset(cfg.dataset.n, cfg.dataset.seed);
    let path = cfg.out.join("dataset.json");
    persist::save_dataset(&path, &data, &persist::world_hash(&world), cfg.dataset.seed)?;
    println!("wrote {} ({} samples)", path.display(), data.len());
    Ok(())
}

/// World and dataset, checked to belong together.
fn load_pair(world_path: &Path, data_path: &Path) -> Result<(World, Dataset, String)> {
    let world = persist::load_world(world_path)?;
    let hash = persist::world_hash(&world);
    let (data, data_hash) = persist::load_dataset(data_path)?;
    if data_hash != hash {
        return Err(Error::SchemaMismatch(format!(
            "dataset {} was sampled from a different world",
            data_path.display()
        )));
    }
    Ok((world, data, hash))
}

fn provenance(cfg: &RunConfig, seeds: &[(&str, u64)], note: String) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        note,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_train(cfg: &RunConfig, world_path: &Path, data_path: &Path) -> Result<()> {
    let (world, data, hash) = load_pair(world_path, data_path)?;
    let model = train(&world, &data, world.schema(), &cfg.train)?;
    let path = cfg.out.join("model.json");
    persist::save_model(&path, &model, &hash)?;
    let prov = provenance(
        cfg,
        &[("world", world.config.seed), ("train", cfg.train.seed)],
        format!("world_hash {hash}"),
    );
    persist::write_history(create(&cfg.out.join("history.csv"))?, &prov, &model.history)?;
    let last = model.history.last().copied().unwrap_or_default();
    println!(
        "wrote {} (L_rec {:.3e}, L_orth {:.3e}, L_mixing {:.4}, total {:.4e})",
        path.display(),
        last.rec,
        last.orth,
        last.mix,
        last.total
    );
    Ok(())
}

fn load_model_checked(path: &Path) -> Result<(TrainedModel, String)> {
    let text = std::fs::read(path)?;
    let (model, _) = persist::load_model(path)?;
    Ok((model, persist::sha256_hex(&text)))
}

fn load_latents(path: &Path, dim: usize) -> Result<Vec<DVector<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = persist::from_json("latents", &text)?;
    let rows: Vec<Vec<f64>> = match value.get("kind").and_then(|k| k.as_str()) {
        Some("dataset") => {
            let f: persist::DatasetFile = persist::from_json("dataset", &text)?;
            f.rows.into_iter().map(|r| r.w).collect()
        }
        _ => {
            let f: LatentsFile = persist::from_json("latents", &text)?;
            if f.kind != "latents" {
                return Err(Error::Format {
                    kind: "latents",
                    reason: format!("`kind` is \"{}\"", f.kind),
                });
            }
            f.latents
        }
    };
    rows.into_iter()
        .map(|r| {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "latent",
                    expected: dim,
                    found: r.len(),
                });
            }
            Ok(DVector::from_vec(r))
        })
        .collect()
}

fn write_latents(path: &Path, latents: &[DVector<f64>], record: EditRecord) -> Result<()> {
    let f = LatentsFile {
        version: persist::FORMAT_VERSION,
        kind: "latents".into(),
        provenance: vec![record],
        latents: latents.iter().map(|v| v.iter().copied().collect()).collect(),
    };
    std::fs::write(path, persist::to_json(&f))?;
    println!("wrote {} ({} latents)", path.display(), latents.len());
    Ok(())
}

fn direction_record(model: &TrainedModel, d: &EditDirection, alpha: f64) -> DirectionRecord {
    DirectionRecord {
        attribute: model.schema.names[d.block - 1].clone(),
        block: d.block,
        alpha,
        coeff_dir: d.coeff_dir.iter().copied().collect(),
        latent_dir: d.latent_dir.iter().copied().collect(),
    }
}

fn svm_direction(cfg: &RunConfig, model: &TrainedModel, dataset: &Path, attribute: &str) -> Result<EditDirection> {
    let block = model.schema.block_of(attribute)?;
    let (data, _) = persist::load_dataset(dataset)?;
    fit_svm_direction(&model.basis, &data, block, &cfg.eval.svm)
}

fn cmd_edit(
    cfg: &RunConfig,
    model_path: &Path,
    input: &Path,
    attribute: &str,
    alpha: f64,
    coeff_dir: Option<Vec<f64>>,
    dataset: Option<&Path>,
) -> Result<()> {
    let (model, model_hash) = load_model_checked(model_path)?;
    let block = model.schema.block_of(attribute)?;
    let dir = match (coeff_dir, dataset) {
        (Some(c), _) => within_subspace_direction(&model.basis, block, &DVector::from_vec(c))?,
        (None, Some(ds)) => svm_direction(cfg, &model, ds, attribute)?,
        (None, None) => {
            return Err(Error::BadConfig {
                field: "coeff-dir".into(),
                reason: "give --coeff-dir or --dataset to fit an SVM direction".into(),
            })
        }
    };
    let latents = load_latents(input, model.basis.dim())?;
    let edited = latents
        .iter()
        .map(|w| edit(&model.basis, w, &dir, alpha))
        .collect::<Result<Vec<_>>>()?;
    let record = EditRecord {
        operation: "edit".into(),
        model_hash,
        source: input.display().to_string(),
        target: None,
        attributes: vec![attribute.to_string()],
        directions: vec![direction_record(&model, &dir, alpha)],
    };
    write_latents(&cfg.out.join("edited.json"), &edited, record)
}

fn cmd_transfer(cfg: &RunConfig, model_path: &Path, source: &Path, target: &Path, attributes: &[String]) -> Result<()> {
    let (model, model_hash) = load_model_checked(model_path)?;
    let blocks = attributes
        .iter()
        .map(|a| model.schema.block_of(a))
        .collect::<Result<Vec<_>>>()?;
    let src = load_latents(source, model.basis.dim())?;
    let tgt = load_latents(target, model.basis.dim())?;
    if src.len() != tgt.len() {
        return Err(Error::DimensionMismatch {
            what: "target latent count",
            expected: src.len(),
            found: tgt.len(),
        });
    }
    let out = src
        .iter()
        .zip(&tgt)
        .map(|(s, t)| transfer_attributes(&model.basis, s, t, &blocks))
        .collect::<Result<Vec<_>>>()?;
    let record = EditRecord {
        operation: "transfer".into(),
        model_hash,
        source: source.display().to_string(),
        target: Some(target.display().to_string()),
        attributes: attributes.to_vec(),
        directions: Vec::new(),
    };
    write_latents(&cfg.out.join("transferred.json"), &out, record)
}

fn parse_step(step: &str) -> Result<(String, f64)> {
    let bad = || Error::BadConfig {
        field: "plan".into(),
        reason: format!("step `{step}` is not `attribute=alpha`"),
    };
    let (name, alpha) = step.split_once('=').ok_or_else(bad)?;
    let alpha: f64 = alpha.trim().parse().map_err(|_| bad())?;
    Ok((name.trim().to_string(), alpha))
}

fn cmd_sequential(cfg: &RunConfig, model_path: &Path, input: &Path, dataset: &Path, plan: &[String]) -> Result<()> {
    let (model, model_hash) = load_model_checked(model_path)?;
    let steps = plan.iter().map(|s| parse_step(s)).collect::<Result<Vec<_>>>()?;
    let (data, _) = persist::load_dataset(dataset)?;
    let mut edits = Vec::with_capacity(steps.len());
    for (name, alpha) in &steps {
        let block = model.schema.block_of(name)?;
        edits.push((fit_svm_direction(&model.basis, &data, block, &cfg.eval.svm)?, *alpha));
    }
    let latents = load_latents(input, model.basis.dim())?;
    let out = latents
        .iter()
        .map(|w| sequential_edit(&model.basis, w, &edits))
        .collect::<Result<Vec<_>>>()?;
    let record = EditRecord {
        operation: "sequential".into(),
        model_hash,
        source: input.display().to_string(),
        target: None,
        attributes: steps.iter().map(|(n, _)| n.clone()).collect(),
        directions: edits.iter().map(|(d, a)| direction_record(&model, d, *a)).collect(),
    };
    write_latents(&cfg.out.join("sequential.json"), &out, record)
}

fn cmd_eval(
    cfg: &RunConfig,
    which: EvalKind,
    model_path: &Path,
    world_path: &Path,
    data_path: &Path,
    attribute: Option<&str>,
) -> Result<()> {
    let (world, data, hash) = load_pair(world_path, data_path)?;
    let (model, model_world) = persist::load_model(model_path)?;
    if model.schema != *world.schema() {
        return Err(Error::SchemaMismatch("model and world schemas differ".into()));
    }
    if model_world != hash {
        return Err(Error::SchemaMismatch("model was trained on a different world".into()));
    }
    let names = &world.schema().names;
    let e = &cfg.eval;
    let prov = |what: &str| {
        provenance(
            cfg,
            &[("world", world.config.seed), ("train", model.hyper.seed), ("eval", e.seed), ("svm", e.svm.seed)],
            format!("{what} world_hash {hash}"),
        )
    };
    let p = &model.basis;
    match which {
        EvalKind::Corr => {
            let dirs = fit_all_directions(p, &data, &e.svm)?;
            let rep = correlation_matrix(&world, &dirs, e.n_eval, e.seed, e.alpha_sampler)?;
            let path = cfg.out.join("corr.csv");
            persist::write_correlation(create(&path)?, &prov(&rep.edit_spec), names, &rep)?;
            println!("wrote {}", path.display());
        }
        EvalKind::Curves => {
            let dirs = fit_all_directions(p, &data, &e.svm)?;
            let targets: Vec<usize> = match attribute {
                Some(a) => vec![world.schema().attr_index(a)?],
                None => (0..names.len()).collect(),
            };
            for k in targets {
                let c = effect_curves(&world, &dirs[k], &e.alphas, e.n_eval, e.seed)?;
                let path = cfg.out.join(format!("curves_{}.csv", names[k]));
                persist::write_curves(create(&path)?, &prov(&format!("edit {}", names[k])), names, &c)?;
                println!("wrote {}", path.display());
            }
        }
        EvalKind::Identity => {
            let dirs = fit_all_directions(p, &data, &e.svm)?;
            let attrs: Vec<&str> = e.identity_attrs.iter().map(String::as_str).collect();
            let plans = identity_plans(&world, &dirs, &attrs, e.identity_alpha)?;
            let rep = identity_scores(&world, &plans, e.n_eval, e.seed)?;
            let path = cfg.out.join("identity.csv");
            persist::write_identity(create(&path)?, &prov(&format!("alpha {}", e.identity_alpha)), &rep)?;
            println!("wrote {}", path.display());
        }
        EvalKind::Align => {
            let angles = subspace_alignment(&world, p)?;
            let path = cfg.out.join("align.csv");
            persist::write_alignment(create(&path)?, &prov("principal angles"), names, &angles)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, world_path: &Path, data_path: &Path) -> Result<()> {
    let (world, data, hash) = load_pair(world_path, data_path)?;
    let rep = ablate(&world, &data, &cfg.train, &cfg.ablate.lambdas, &cfg.eval)?;
    let path = cfg.out.join("ablation.csv");
    let prov = provenance(
        cfg,
        &[("world", world.config.seed), ("train", cfg.train.seed), ("eval", cfg.eval.seed)],
        format!("world_hash {hash}"),
    );
    persist::write_ablation(create(&path)?, &prov, &world.schema().names, &rep)?;
    println!("wrote {}", path.display());
    Ok(())
}

//! Versioned JSON files for worlds, datasets and models, and CSV reports.
//!
//! Numbers are written with shortest round-trip formatting and parsed exactly, so
//! `load(save(x)) == x` holds bit for bit.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{AblationReport, CorrelationReport, EffectCurves, IdentityReport};
use crate::schema::AttributeSchema;
use crate::subspace::BasisMatrix;
use crate::training::{Hyperparams, LossBreakdown, TrainedModel};
use crate::world::{Dataset, Head, World, WorldConfig};

pub const FORMAT_VERSION: u32 = 1;

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(kind: &'static str, field: &str, rows: &Rows, ncols: Option<usize>) -> Result<DMatrix<f64>> {
    let bad = |reason: String| Error::Format { kind, reason };
    let nr = rows.len();
    let nc = match ncols {
        Some(c) => c,
        None => rows.first().map_or(0, Vec::len),
    };
    if let Some(i) = rows.iter().position(|r| r.len() != nc) {
        return Err(bad(format!("`{field}` row {i} has {} entries, expected {nc}", rows[i].len())));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn check_shape(kind: &'static str, field: &str, m: &DMatrix<f64>, r: usize, c: usize) -> Result<()> {
    if m.shape() == (r, c) {
        Ok(())
    } else {
        Err(Error::Format {
            kind,
            reason: format!("`{field}` is {}x{}, expected {r}x{c}", m.nrows(), m.ncols()),
        })
    }
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn check_header(kind: &'static str, found_kind: &str, version: u32) -> Result<()> {
    if found_kind != kind {
        return Err(Error::Format {
            kind,
            reason: format!("`kind` is \"{found_kind}\""),
        });
    }
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            kind,
            reason: format!("unsupported version {version}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFile {
    #[serde(rename = "H")]
    pub h: Rows,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineFile {
    #[serde(rename = "W")]
    pub w: Rows,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFile {
    pub version: u32,
    pub kind: String,
    pub seed: u64,
    #[serde(rename = "D")]
    pub d: usize,
    pub schema: AttributeSchema,
    pub config: WorldConfig,
    #[serde(rename = "Q")]
    pub q: Rows,
    #[serde(rename = "A")]
    pub a: Rows,
    pub generator: AffineFile,
    pub classifiers: Vec<HeadFile>,
    pub embedder: AffineFile,
}

impl WorldFile {
    pub fn from_world(world: &World) -> Self {
        Self {
            version: FORMAT_VERSION,
            kind: "world".into(),
            seed: world.config.seed,
            d: world.dim(),
            schema: world.schema().clone(),
            config: world.config.clone(),
            q: to_rows(&world.q),
            a: to_rows(&world.a),
            generator: AffineFile {
                w: to_rows(&world.wg),
                b: vec_of(&world.bg),
            },
            classifiers: world
                .heads
                .iter()
                .map(|h| HeadFile {
                    h: to_rows(&h.h),
                    b: vec_of(&h.b),
                    c: vec_of(&h.c),
                    t: h.t,
                })
                .collect(),
            embedder: AffineFile {
                w: to_rows(&world.e),
                b: vec_of(&world.be),
            },
        }
    }

    pub fn into_world(self) -> Result<World> {
        const K: &str = "world";
        check_header(K, &self.kind, self.version)?;
        self.schema
            .validate()
            .map_err(|e| Error::Format { kind: K, reason: e.to_string() })?;
        if self.schema != self.config.schema || self.seed != self.config.seed {
            return Err(Error::Format {
                kind: K,
                reason: "`schema`/`seed` disagree with `config`".into(),
            });
        }
        let d = self.schema.dim();
        if self.d != d {
            return Err(Error::Format {
                kind: K,
                reason: format!("`D` is {} but the schema sums to {d}", self.d),
            });
        }
        let c = &self.config;
        let q = from_rows(K, "Q", &self.q, Some(d))?;
        check_shape(K, "Q", &q, d, d)?;
        let a = from_rows(K, "A", &self.a, Some(d))?;
        check_shape(K, "A", &a, d, d)?;
        let wg = from_rows(K, "generator.W", &self.generator.w, Some(d))?;
        check_shape(K, "generator.W", &wg, c.dx, d)?;
        let bg = DVector::from_vec(self.generator.b);
        check_shape(K, "generator.b", &DMatrix::from_column_slice(bg.len(), 1, bg.as_slice()), c.dx, 1)?;
        if self.classifiers.len() != self.schema.n_attrs() {
            return Err(Error::Format {
                kind: K,
                reason: format!("{} classifiers for {} attributes", self.classifiers.len(), self.schema.n_attrs()),
            });
        }
        let mut heads = Vec::with_capacity(self.classifiers.len());
        for hf in self.classifiers {
            let h = from_rows(K, "classifiers.H", &hf.h, Some(c.dx))?;
            check_shape(K, "classifiers.H", &h, c.dh, c.dx)?;
            if hf.b.len() != c.dh || hf.c.len() != c.dh {
                return Err(Error::Format {
                    kind: K,
                    reason: format!("classifier bias/head length must be {}", c.dh),
                });
            }
            heads.push(Head {
                h,
                b: DVector::from_vec(hf.b),
                c: DVector::from_vec(hf.c),
                t: hf.t,
            });
        }
        let e = from_rows(K, "embedder.W", &self.embedder.w, Some(c.dx))?;
        check_shape(K, "embedder.W", &e, c.de, c.dx)?;
        if self.embedder.b.len() != c.de {
            return Err(Error::Format {
                kind: K,
                reason: format!("`embedder.b` must have length {}", c.de),
            });
        }
        Ok(World {
            config: self.config,
            q,
            a,
            wg,
            bg,
            heads,
            e,
            be: DVector::from_vec(self.embedder.b),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub w: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub version: u32,
    pub kind: String,
    pub world_hash: String,
    pub n: usize,
    pub seed: u64,
    pub rows: Vec<DatasetRow>,
}

impl DatasetFile {
    pub fn from_dataset(data: &Dataset, world_hash: &str, seed: u64) -> Self {
        Self {
            version: FORMAT_VERSION,
            kind: "dataset".into(),
            world_hash: world_hash.into(),
            n: data.len(),
            seed,
            rows: (0..data.len())
                .map(|i| DatasetRow {
                    w: data.w.column(i).iter().copied().collect(),
                    y: data.y.column(i).iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        const K: &str = "dataset";
        check_header(K, &self.kind, self.version)?;
        if self.rows.len() != self.n || self.n == 0 {
            return Err(Error::Format {
                kind: K,
                reason: format!("`n` is {} but {} rows are present", self.n, self.rows.len()),
            });
        }
        let d = self.rows[0].w.len();
        let na = self.rows[0].y.len();
        if let Some(i) = self.rows.iter().position(|r| r.w.len() != d || r.y.len() != na) {
            return Err(Error::Format {
                kind: K,
                reason: format!("row {i} has a different length"),
            });
        }
        Ok(Dataset {
            w: DMatrix::from_fn(d, self.n, |i, j| self.rows[j].w[i]),
            y: DMatrix::from_fn(na, self.n, |i, j| self.rows[j].y[i]),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub kind: String,
    pub world_hash: String,
    pub schema: AttributeSchema,
    /// `P`, row-major.
    #[serde(rename = "P")]
    pub p: Rows,
    pub hyper: Hyperparams,
    pub final_losses: LossBreakdown,
    pub history: Vec<LossBreakdown>,
    /// One coefficient vector per training sample.
    pub coeffs: Rows,
}

impl ModelFile {
    pub fn from_model(model: &TrainedModel, world_hash: &str) -> Self {
        Self {
            version: FORMAT_VERSION,
            kind: "model".into(),
            world_hash: world_hash.into(),
            schema: model.schema.clone(),
            p: to_rows(&model.basis.p),
            hyper: model.hyper.clone(),
            final_losses: model.history.last().copied().unwrap_or_default(),
            history: model.history.clone(),
            coeffs: to_rows(&model.coeffs.transpose()),
        }
    }

    pub fn to_model(&self) -> Result<TrainedModel> {
        const K: &str = "model";
        check_header(K, &self.kind, self.version)?;
        self.schema
            .validate()
            .map_err(|e| Error::Format { kind: K, reason: e.to_string() })?;
        let d = self.schema.dim();
        let p = from_rows(K, "P", &self.p, Some(d))?;
        check_shape(K, "P", &p, d, d)?;
        let coeffs = from_rows(K, "coeffs", &self.coeffs, Some(d))?.transpose();
        Ok(TrainedModel {
            basis: BasisMatrix::new(p, self.schema.clone())?,
            coeffs,
            schema: self.schema.clone(),
            hyper: self.hyper.clone(),
            history: self.history.clone(),
        })
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("file structs serialize");
    s.push('\n');
    s
}

pub fn from_json<T: DeserializeOwned>(kind: &'static str, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Format {
        kind,
        reason: e.to_string(),
    })
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash identifying a world: SHA-256 of its compact JSON file form.
pub fn world_hash(world: &World) -> String {
    let compact = serde_json::to_vec(&WorldFile::from_world(world)).expect("world serializes");
    sha256_hex(&compact)
}

pub fn save_world(path: &Path, world: &World) -> Result<()> {
    std::fs::write(path, to_json(&WorldFile::from_world(world)))?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<World> {
    let text = std::fs::read_to_string(path)?;
    from_json::<WorldFile>("world", &text)?.into_world()
}

pub fn save_dataset(path: &Path, data: &Dataset, world_hash: &str, seed: u64) -> Result<()> {
    std::fs::write(path, to_json(&DatasetFile::from_dataset(data, world_hash, seed)))?;
    Ok(())
}

/// The dataset and the hash of the world it was sampled from.
pub fn load_dataset(path: &Path) -> Result<(Dataset, String)> {
    let text = std::fs::read_to_string(path)?;
    let f: DatasetFile = from_json("dataset", &text)?;
    Ok((f.to_dataset()?, f.world_hash))
}

pub fn save_model(path: &Path, model: &TrainedModel, world_hash: &str) -> Result<()> {
    std::fs::write(path, to_json(&ModelFile::from_model(model, world_hash)))?;
    Ok(())
}

/// The model and the hash of the world it was trained on.
pub fn load_model(path: &Path) -> Result<(TrainedModel, String)> {
    let text = std::fs::read_to_string(path)?;
    let f: ModelFile = from_json("model", &text)?;
    Ok((f.to_model()?, f.world_hash))
}

/// Context written as the `#` header line of every report.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Vec<(String, u64)>,
    pub note: String,
}

impl Provenance {
    pub fn header(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let mut line = format!("# config_hash={} seeds={}", self.config_hash, seeds.join(","));
        if !self.note.is_empty() {
            line.push_str(" note=");
            line.push_str(&self.note.replace('\n', " "));
        }
        line
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format {
            kind: "report",
            reason: format!("{other:?}"),
        },
    }
}

fn write_table<W: Write>(mut out: W, prov: &Provenance, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    writeln!(out, "{}", prov.header())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_correlation<W: Write>(out: W, prov: &Provenance, names: &[String], rep: &CorrelationReport) -> Result<()> {
    let mut header = vec!["attribute".to_string()];
    header.extend(names.iter().cloned());
    let mut rows: Vec<Vec<String>> = names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mut r = vec![n.clone()];
            r.extend(rep.matrix.row(i).iter().map(|&v| num(v)));
            r
        })
        .collect();
    let mut avg = vec!["average".to_string()];
    avg.extend(rep.avg_row.iter().map(|&v| num(v)));
    rows.push(avg);
    let mut flags = vec!["zero_variance".to_string()];
    flags.extend((0..names.len()).map(|k| (rep.zero_variance.contains(&k) as u8).to_string()));
    rows.push(flags);
    write_table(out, prov, &header, &rows)
}

pub fn write_curves<W: Write>(out: W, prov: &Provenance, names: &[String], c: &EffectCurves) -> Result<()> {
    let mut header = vec!["alpha".to_string()];
    header.extend(names.iter().map(|n| format!("delta_{n}")));
    let rows: Vec<Vec<String>> = c
        .alphas
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let mut r = vec![num(a)];
            r.extend(c.deltas.row(i).iter().map(|&v| num(v)));
            r
        })
        .collect();
    write_table(out, prov, &header, &rows)
}

pub fn write_identity<W: Write>(out: W, prov: &Provenance, rep: &IdentityReport) -> Result<()> {
    let header = vec!["edit".to_string(), "C_s".into(), "E_d".into()];
    let rows: Vec<Vec<String>> = rep
        .rows
        .iter()
        .map(|r| vec![r.name.clone(), num(r.cs), num(r.ed)])
        .collect();
    write_table(out, prov, &header, &rows)
}

/// One row per attribute with its principal angles in radians.
pub fn write_alignment<W: Write>(out: W, prov: &Provenance, names: &[String], angles: &[Vec<f64>]) -> Result<()> {
    let width = angles.iter().map(Vec::len).max().unwrap_or(0);
    let mut header = vec!["attribute".to_string(), "mean_rad".into()];
    header.extend((0..width).map(|i| format!("angle_{i}")));
    let rows: Vec<Vec<String>> = names
        .iter()
        .zip(angles)
        .map(|(n, a)| {
            let mut r = vec![n.clone(), num(crate::evaluation::mean(a))];
            r.extend(a.iter().map(|&v| num(v)));
            r.resize(width + 2, String::new());
            r
        })
        .collect();
    write_table(out, prov, &header, &rows)
}

pub fn write_history<W: Write>(out: W, prov: &Provenance, history: &[LossBreakdown]) -> Result<()> {
    let header: Vec<String> = ["epoch", "L_rec", "L_orth", "L_mixing", "total"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = history
        .iter()
        .enumerate()
        .map(|(e, h)| vec![(e + 1).to_string(), num(h.rec), num(h.orth), num(h.mix), num(h.total)])
        .collect();
    write_table(out, prov, &header, &rows)
}

/// Metrics as rows, one column per `lambda_orth`.
pub fn write_ablation<W: Write>(out: W, prov: &Provenance, names: &[String], rep: &AblationReport) -> Result<()> {
    let mut header = vec!["metric".to_string()];
    header.extend(rep.lambdas.iter().map(|l| format!("lambda_orth={l}")));
    let mut rows = Vec::new();
    let mut push = |name: String, f: &dyn Fn(usize) -> f64| {
        let mut r = vec![name];
        r.extend((0..rep.summaries.len()).map(|i| num(f(i))));
        rows.push(r);
    };
    for (k, n) in names.iter().enumerate() {
        push(format!("avg_corr_{n}"), &|i| rep.summaries[i].corr.avg_row[k]);
    }
    push("identity_all_C_s".into(), &|i| rep.summaries[i].all_row().cs);
    push("identity_all_E_d".into(), &|i| rep.summaries[i].all_row().ed);
    for (k, n) in names.iter().enumerate() {
        push(format!("mean_angle_rad_{n}"), &|i| rep.summaries[i].mean_angles()[k]);
    }
    push("L_orth".into(), &|i| rep.summaries[i].l_orth);
    push("gram_offdiag_max".into(), &|i| rep.summaries[i].gram_max);
    write_table(out, prov, &header, &rows)
}

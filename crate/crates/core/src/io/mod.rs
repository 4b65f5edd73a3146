//! Files on disk: embeddings, run configs, worlds, checkpoints and reports.
//!
//! Every write goes to a temporary sibling first and is renamed into place.

mod embf;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use embf::{EmbeddingFile, MAGIC, VERSION};

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::synth::{
    AlignmentConfig, ModalitySamples, ModelParams, ScenarioConfig, SyntheticWorld, TraceStep,
    TrainConfig, Variant,
};

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))
}

/// Everything one run needs, as a single JSON document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub alignment: AlignmentConfig,
    pub train: TrainConfig,
    /// Loss composition used by `train` when no variant is given.
    pub variant: Option<Variant>,
    /// Output directory used when no `--out` is given.
    pub out_dir: Option<PathBuf>,
}

/// Pulls the offending key out of a serde message, if it names one.
fn field_of(message: &str) -> String {
    for marker in ["unknown field `", "missing field `", "unknown variant `"] {
        if let Some(start) = message.find(marker) {
            let rest = &message[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    "<document>".to_string()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            let message = e.to_string();
            Error::ConfigInvalid {
                field: field_of(&message),
                message,
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.alignment.validate()?;
        self.train.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub rows: usize,
    pub dim: usize,
    pub sha256: String,
}

/// Provenance of a generated world. The only artifact carrying a timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub created_unix: u64,
    pub files: Vec<FileEntry>,
}

/// Everything about a world that is not an embedding matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldMeta {
    scenario: ScenarioConfig,
    banks: Vec<Vec<usize>>,
    train_identities: Vec<u32>,
    test_identities: Vec<u32>,
    aerial_altitude: Vec<f64>,
    /// One `0`/`1` character per aerial token.
    aerial_visible: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const META_FILE: &str = "world.json";

fn modality_files(world: &SyntheticWorld) -> Vec<(String, EmbeddingFile)> {
    let mut out = Vec::new();
    let mut push = |name: &str, m: &Matrix, ids: Option<&[u32]>| {
        let file = EmbeddingFile::from_matrix(m, ids.map(<[u32]>::to_vec)).expect("sizes fit u32");
        out.push((format!("{name}.embf"), file));
    };
    push("prototypes", &world.prototypes, None);
    push("attribute_pool", &world.attribute_pool, None);
    let sets = [
        ("text", Some(&world.text)),
        ("aerial", Some(&world.aerial)),
        ("ground", world.ground.as_ref()),
    ];
    for (name, set) in sets {
        if let Some(set) = set {
            push(
                &format!("{name}_globals"),
                &set.globals,
                Some(&set.identities),
            );
            if let Some(t) = &set.tokens {
                push(&format!("{name}_tokens"), t, None);
            }
        }
    }
    out
}

/// Writes a world as embedding files plus metadata, then the manifest.
pub fn write_world(dir: &Path, world: &SyntheticWorld, config_hash: &str) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (name, file) in modality_files(world) {
        let bytes = file.to_bytes();
        atomic_write(&dir.join(&name), &bytes)?;
        files.push(FileEntry {
            name,
            rows: file.rows(),
            dim: file.dim(),
            sha256: sha256_hex(&bytes),
        });
    }
    let meta = WorldMeta {
        scenario: world.config.clone(),
        banks: world.banks.clone(),
        train_identities: world.train_identities.clone(),
        test_identities: world.test_identities.clone(),
        aerial_altitude: world.aerial.altitude.clone(),
        aerial_visible: world
            .aerial
            .visible
            .iter()
            .map(|&v| if v { '1' } else { '0' })
            .collect(),
    };
    write_json(&dir.join(META_FILE), &meta)?;
    let created_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = Manifest {
        config_hash: config_hash.to_string(),
        seed: world.config.seed,
        created_unix,
        files,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

fn read_matrix(dir: &Path, name: &str) -> Result<(Matrix, Option<Vec<u32>>)> {
    let file = EmbeddingFile::read(&dir.join(format!("{name}.embf")))?;
    Ok((file.to_matrix()?, file.ids().map(<[u32]>::to_vec)))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptFile(msg.into())
}

/// Loads a world written by [`write_world`]. Features come back as the
/// stored 32-bit values.
pub fn read_world(dir: &Path) -> Result<SyntheticWorld> {
    let manifest = read_manifest(dir)?;
    for entry in &manifest.files {
        let bytes = fs::read(dir.join(&entry.name))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(corrupt(format!(
                "{} does not match its manifest digest",
                entry.name
            )));
        }
    }
    let meta: WorldMeta = read_json(&dir.join(META_FILE))?;
    let cfg = meta.scenario;
    cfg.validate()
        .map_err(|e| corrupt(format!("{META_FILE}: {e}")))?;
    let n = cfg.tokens_per_sample;

    let samples = |name: &str, tokens: bool| -> Result<ModalitySamples> {
        let (globals, ids) = read_matrix(dir, &format!("{name}_globals"))?;
        let identities = ids.ok_or_else(|| corrupt(format!("{name}_globals has no identities")))?;
        if identities
            .iter()
            .any(|&id| id as usize >= cfg.num_identities)
            || globals.cols() != cfg.dim
        {
            return Err(corrupt(format!(
                "{name}_globals disagrees with {META_FILE}"
            )));
        }
        let tokens = if tokens {
            let (t, _) = read_matrix(dir, &format!("{name}_tokens"))?;
            if t.rows() != globals.rows() * n || t.cols() != cfg.dim {
                return Err(corrupt(format!("{name}_tokens has {} rows", t.rows())));
            }
            Some(t)
        } else {
            None
        };
        let len = identities.len();
        Ok(ModalitySamples {
            globals,
            identities,
            visible: if tokens.is_some() {
                vec![true; len * n]
            } else {
                Vec::new()
            },
            tokens,
            altitude: vec![1.0; len],
        })
    };
    let text = samples("text", true)?;
    let mut aerial = samples("aerial", true)?;
    let ground = if cfg.has_ground() {
        Some(samples("ground", false)?)
    } else {
        None
    };

    if meta.aerial_altitude.len() != aerial.len() || meta.aerial_visible.len() != aerial.len() * n {
        return Err(corrupt(format!(
            "{META_FILE}: aerial annotations do not match the samples"
        )));
    }
    aerial.altitude = meta.aerial_altitude;
    aerial.visible = meta
        .aerial_visible
        .chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(corrupt(format!("{META_FILE}: visibility flag {other:?}"))),
        })
        .collect::<Result<_>>()?;

    let (prototypes, _) = read_matrix(dir, "prototypes")?;
    let (attribute_pool, _) = read_matrix(dir, "attribute_pool")?;
    Ok(SyntheticWorld {
        config: cfg,
        prototypes,
        attribute_pool,
        banks: meta.banks,
        text,
        aerial,
        ground,
        train_identities: meta.train_identities,
        test_identities: meta.test_identities,
    })
}

/// Trained parameters and the settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub variant: Variant,
    pub config_hash: String,
    pub alignment: AlignmentConfig,
    pub train: TrainConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let ck: Checkpoint = read_json(path)?;
        let d = ck.params.dim();
        let square = [&ck.params.w_text, &ck.params.w_aerial, &ck.params.w_ground]
            .iter()
            .all(|w| w.shape() == (d, d));
        if !square || ck.params.fuzzy.as_ref().is_some_and(|f| f.dim() != d) {
            return Err(corrupt(format!(
                "{}: parameter shapes disagree",
                path.display()
            )));
        }
        if ck.variant.weighting().is_some() != ck.params.fuzzy.is_some() {
            return Err(corrupt(format!(
                "{}: token branch does not match {}",
                path.display(),
                ck.variant
            )));
        }
        Ok(ck)
    }
}

/// One JSON object per line.
pub fn write_trace(path: &Path, trace: &[TraceStep]) -> Result<()> {
    let mut out = String::new();
    for step in trace {
        out.push_str(&serde_json::to_string(step)?);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceStep>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| corrupt(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn write_report(path: &Path, report: &crate::metrics::MetricReport) -> Result<()> {
    write_json(path, report)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

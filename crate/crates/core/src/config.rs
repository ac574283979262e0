//! Run configuration files: JSON with a version field, unknown keys
//! rejected. Relative paths resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::MultiHeadModel;
use crate::model::{AuxAttachment, ModelSpec};
use crate::params::HeadId;
use crate::tensor::Scalar;
use crate::train::{self, RunDir, Scheme, TrainConfig, TrainOutcome};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Named preset; ignored when `spec` is given.
    #[serde(default)]
    pub preset: Option<String>,
    /// Complete model description instead of a preset.
    #[serde(default)]
    pub spec: Option<ModelSpec>,
    /// Defaults to the dataset's class count.
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// Defaults to the dataset's image height.
    #[serde(default)]
    pub image_size: Option<usize>,
    #[serde(default)]
    pub dropout: Option<f64>,
    /// Replaces the preset's auxiliary heads.
    #[serde(default)]
    pub aux: Option<Vec<AuxAttachment>>,
    /// Keeps only these heads of the preset (named as in the full preset).
    /// `C1` is always kept.
    #[serde(default)]
    pub attachments: Option<Vec<HeadId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub synthetic_seed: u64,
    /// Dataset directories.
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// Everything needed to reproduce a run, written next to its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedRun {
    pub version: u32,
    pub tool: String,
    pub precision: u32,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        if c.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "version: {} is not supported (expected {CONFIG_VERSION})",
                c.version
            )));
        }
        Ok(c)
    }

    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut c.data.train, &mut c.data.test, &mut c.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let d = &self.data;
        match (&d.synthetic, &d.train, &d.test) {
            (Some(_), None, None) | (None, Some(_), Some(_)) => {}
            _ => {
                return Err(Error::config(
                    "data: give either `synthetic` or both `train` and `test` directories",
                ))
            }
        }
        if self.model.preset.is_none() && self.model.spec.is_none() {
            return Err(Error::config("model: give a `preset` or a full `spec`"));
        }
        if let Some(a) = &self.model.attachments {
            if self.model.aux.is_some() {
                return Err(Error::config(
                    "model: `attachments` and `aux` are exclusive",
                ));
            }
            if !a.contains(&HeadId::FINAL) {
                return Err(Error::config("model.attachments: C1 must be listed"));
            }
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match (&self.data.synthetic, &self.data.train, &self.data.test) {
            (Some(s), _, _) => generate_synthetic(s, self.data.synthetic_seed),
            (None, Some(tr), Some(te)) => {
                let train = Dataset::load(tr)?;
                let test = Dataset::load(te)?.with_stats_of(&train)?;
                Ok((train, test))
            }
            _ => Err(Error::config("data: no source given")),
        }
    }

    /// The model to train for this config and dataset.
    pub fn model_spec(&self, data: &Dataset) -> Result<ModelSpec> {
        let m = &self.model;
        let mut spec = match (&m.spec, &m.preset) {
            (Some(s), _) => s.clone(),
            (None, Some(p)) => ModelSpec::preset(
                p,
                m.num_classes.unwrap_or(data.num_classes),
                m.image_size.unwrap_or(data.shape[1]),
            )?,
            (None, None) => return Err(Error::config("model: give a `preset` or a full `spec`")),
        };
        if m.spec.is_none() {
            spec.input_shape = data.shape;
        }
        if let Some(d) = m.dropout {
            spec.dropout = d;
        }
        if let Some(aux) = &m.aux {
            spec.aux = aux.clone();
        }
        if let Some(keep) = &m.attachments {
            spec = select_attachments(&spec, keep)?;
        }
        if self.train.loss.scheme == Scheme::Baseline {
            spec = spec.without_aux();
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn resolve(&self, data: &Dataset, precision: u32) -> Result<ResolvedRun> {
        Ok(ResolvedRun {
            version: CONFIG_VERSION,
            tool: format!("dks {}", env!("CARGO_PKG_VERSION")),
            precision,
            model: self.model_spec(data)?,
            data: self.data.clone(),
            train: self.train.clone(),
        })
    }
}

/// Writes `config.resolved.json` into `dir`.
pub fn write_snapshot<S: Serialize>(dir: &Path, value: &S) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("config.resolved.json");
    let text = serde_json::to_string_pretty(value).expect("snapshot serializes") + "\n";
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// Trains the configured model into `dir` (snapshot, metrics, checkpoints).
/// The model is initialized from `train.seed`.
pub fn run_training(
    cfg: &RunConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    dir: &Path,
    precision: u32,
) -> Result<TrainOutcome> {
    let resolved = cfg.resolve(train_set, precision)?;
    write_snapshot(dir, &resolved)?;
    let run = RunDir {
        dir: dir.to_path_buf(),
    };
    fn go<T: Scalar>(
        r: &ResolvedRun,
        tr: &Dataset,
        te: &Dataset,
        run: &RunDir,
    ) -> Result<TrainOutcome> {
        let mut model = MultiHeadModel::<T>::build(&r.model, r.train.seed)?;
        train::train(&mut model, tr, te, &r.train, Some(run))
    }
    match precision {
        32 => go::<f32>(&resolved, train_set, test_set, &run),
        64 => go::<f64>(&resolved, train_set, test_set, &run),
        p => Err(Error::config(format!("precision: {p} is not 32 or 64"))),
    }
}

/// Keeps the listed heads of `spec` (ids as numbered in `spec`).
pub fn select_attachments(spec: &ModelSpec, keep: &[HeadId]) -> Result<ModelSpec> {
    let heads = spec.aux_by_head();
    for id in keep {
        if *id != HeadId::FINAL && !heads.iter().any(|(h, _)| h == id) {
            return Err(Error::config(format!(
                "model.attachments: {id} is not a head of this model (has C1..C{})",
                heads.len() + 1
            )));
        }
    }
    let mut out = spec.clone();
    out.aux = heads
        .into_iter()
        .filter(|(h, _)| keep.contains(h))
        .map(|(_, a)| a.clone())
        .collect();
    Ok(out)
}

/// Parses `C1C2C3`-style head lists.
pub fn parse_head_list(s: &str) -> Result<Vec<HeadId>> {
    let mut out = Vec::new();
    for part in s.split('C').skip(1) {
        out.push(format!("C{part}").parse()?);
    }
    if out.is_empty() || !s.starts_with('C') {
        return Err(Error::config(format!(
            "{s:?} is not a head list like C1C2C3"
        )));
    }
    Ok(out)
}

//! Model checkpoints: `manifest.json` plus `params.tnsr`, a sequence of
//! `SECTION <name>` lines each followed by one `TNSR` block. Optimizer
//! accumulators are stored as `opt.<name>` sections.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Stream, Variant};
use crate::params::{self, ParamTree};
use crate::tensor::Tensor;
use crate::train::{OptimizerState, TrainConfig, Trainer};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.tnsr";
const FORMAT: u32 = 1;
const OPT_PREFIX: &str = "opt.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub variant: Variant,
    pub stream: Stream,
    /// Regions per side `N`.
    pub grid: usize,
    /// Input channels `C` of the encoded stream.
    pub channels: usize,
    /// Feature channels `D`.
    pub features: usize,
    /// Hidden channels `K`.
    pub hidden: usize,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Completed optimizer iterations.
    pub iteration: usize,
    pub has_optimizer: bool,
    pub parameters: Vec<ParamEntry>,
}

/// Loaded checkpoint; optimizer state is present when it was saved.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
    pub train: Option<TrainConfig>,
    pub iteration: usize,
}

impl Checkpoint {
    /// Trainer resuming from this checkpoint with `config`.
    pub fn into_trainer(self, config: TrainConfig) -> Result<Trainer> {
        let mut trainer = Trainer::new(self.model, config)?;
        if let Some(opt) = self.optimizer {
            trainer.optimizer = opt;
        }
        trainer.iteration = self.iteration;
        Ok(trainer)
    }
}

fn write_sections(out: &mut impl Write, prefix: &str, tree: &crate::model::ModelParams) -> Result<()> {
    for (name, t) in params::flatten(tree) {
        writeln!(out, "SECTION {prefix}{name}")?;
        t.write_tnsr(out)?;
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Saves a bare model.
pub fn save_model(dir: &Path, model: &Model) -> Result<()> {
    save(dir, model, None, None, 0)
}

/// Saves the full training state so that training can resume.
pub fn save_trainer(dir: &Path, trainer: &Trainer) -> Result<()> {
    save(dir, &trainer.model, Some(&trainer.optimizer), Some(&trainer.config), trainer.iteration)
}

fn save(dir: &Path, model: &Model, optimizer: Option<&OptimizerState>, train: Option<&TrainConfig>, iteration: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut body = Vec::new();
    write_sections(&mut body, "", &model.params)?;
    if let Some(opt) = optimizer {
        write_sections(&mut body, OPT_PREFIX, opt)?;
    }
    let cfg = &model.config;
    let manifest = CheckpointManifest {
        format: FORMAT,
        variant: cfg.variant,
        stream: cfg.stream,
        grid: cfg.grid(),
        channels: cfg.input_channels(),
        features: cfg.feature_channels,
        hidden: cfg.hidden,
        model: cfg.clone(),
        train: train.cloned(),
        iteration,
        has_optimizer: optimizer.is_some(),
        parameters: params::flatten(&model.params)
            .into_iter()
            .map(|(name, t)| ParamEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    write_atomic(&dir.join(PARAMS_FILE), &body)?;
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!(
            "checkpoint format {} (expected {FORMAT})",
            manifest.format
        )));
    }
    Ok(manifest)
}

fn read_sections(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut sections = BTreeMap::new();
    loop {
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let name = line
            .strip_suffix('\n')
            .and_then(|l| l.strip_prefix("SECTION "))
            .ok_or_else(|| Error::Format(format!("expected a SECTION line, found {line:?}")))?
            .to_string();
        let tensor = Tensor::read_tnsr(&mut input)?;
        if sections.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate section {name}")));
        }
    }
    Ok(sections)
}

fn fill(tree: &mut crate::model::ModelParams, prefix: &str, sections: &mut BTreeMap<String, Tensor>) -> Result<()> {
    let mut failure = None;
    tree.visit_mut("", &mut |name, slot| {
        if failure.is_some() {
            return;
        }
        match sections.remove(&format!("{prefix}{name}")) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                failure = Some(Error::Format(format!(
                    "section {prefix}{name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )))
            }
            None => failure = Some(Error::Format(format!("missing section {prefix}{name}"))),
        }
    });
    failure.map_or(Ok(()), Err)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(manifest.model.clone(), 0)?;
    let mut sections = read_sections(&dir.join(PARAMS_FILE))?;
    fill(&mut model.params, "", &mut sections)?;
    let optimizer = if manifest.has_optimizer {
        let mut opt = model.params.map(&mut |t| Tensor::zeros(t.shape()));
        fill(&mut opt, OPT_PREFIX, &mut sections)?;
        Some(opt)
    } else {
        None
    };
    if let Some(extra) = sections.keys().next() {
        return Err(Error::Format(format!("unexpected section {extra}")));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        train: manifest.train,
        iteration: manifest.iteration,
    })
}

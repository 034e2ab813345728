//! Sequential transfer chains: train on one dataset, carry every weight
//! except the output layer to the next, and repeat.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::datasets::DatasetIndex;
use crate::digest::canonical_hash;
use crate::error::{Error, Result};
use crate::geometry::Split;
use crate::models::{
    swap_head, write_atomic, Architecture, BuildOptions, Checkpoint, EncoderKind, LandmarkNet, ModelSpec,
    Pretrained, StageRecord,
};
use crate::train::{train_on_index, FitReport, RunDir, TrainConfig};

pub const INIT_CHECKPOINT: &str = "init.ckpt";
const REGISTRY_DIR: &str = "registry";
const REGISTRY_INDEX: &str = "index.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainStart {
    Imagenet,
    /// Random initialisation, for runs without pretrained weights.
    Scratch,
}

impl ChainStart {
    fn pretrained(self) -> Pretrained {
        match self {
            ChainStart::Imagenet => Pretrained::Imagenet,
            ChainStart::Scratch => Pretrained::None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChainStart::Imagenet => "imagenet",
            ChainStart::Scratch => "scratch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub start: ChainStart,
    /// Dataset names in training order; the last one is the target.
    pub stages: Vec<String>,
    /// Per-dataset training settings replacing the shared ones.
    #[serde(default)]
    pub overrides: BTreeMap<String, TrainConfig>,
}

impl ChainSpec {
    pub fn new(start: ChainStart, stages: &[&str]) -> Self {
        Self {
            start,
            stages: stages.iter().map(|s| s.to_string()).collect(),
            overrides: BTreeMap::new(),
        }
    }

    pub fn target(&self) -> &str {
        self.stages.last().map(String::as_str).unwrap_or("")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("a chain needs at least one dataset".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if self.stages[..i].contains(s) {
                return Err(Error::Config(format!("dataset `{s}` appears twice in chain {self}")));
            }
        }
        Ok(())
    }

    fn prefix(&self, len: usize) -> ChainSpec {
        ChainSpec {
            start: self.start,
            stages: self.stages[..len].to_vec(),
            overrides: self
                .overrides
                .iter()
                .filter(|(k, _)| self.stages[..len].contains(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Filesystem-safe name, e.g. `imagenet-chest-head`.
    pub fn slug(&self) -> String {
        std::iter::once(self.start.name())
            .chain(self.stages.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join("-")
    }
}

impl fmt::Display for ChainSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.start.name())?;
        for s in &self.stages {
            write!(f, " > {s}")?;
        }
        Ok(())
    }
}

/// Every ordered sequence of at most `max_stages` distinct datasets,
/// shortest first.
pub fn enumerate_chains(datasets: &[&str], max_stages: usize, start: ChainStart) -> Vec<ChainSpec> {
    fn extend(prefix: &mut Vec<usize>, n: usize, len: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == len {
            out.push(prefix.clone());
            return;
        }
        for i in 0..n {
            if !prefix.contains(&i) {
                prefix.push(i);
                extend(prefix, n, len, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    for len in 1..=max_stages.min(datasets.len()) {
        let mut seqs = Vec::new();
        extend(&mut Vec::new(), datasets.len(), len, &mut seqs);
        out.extend(seqs.into_iter().map(|s| {
            let names: Vec<&str> = s.iter().map(|&i| datasets[i]).collect();
            ChainSpec::new(start, &names)
        }));
    }
    out
}

#[derive(Debug, Clone)]
pub struct ChainOptions {
    pub architecture: Architecture,
    pub encoder: EncoderKind,
    pub width_divisor: usize,
    pub train: TrainConfig,
    pub build: BuildOptions,
    /// Reuse a completed stage when another chain shares the same prefix.
    pub reuse_prefixes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub dataset: String,
    pub run_id: String,
    pub init_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub reused: bool,
    pub fit: Option<FitReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub chain: ChainSpec,
    pub stages: Vec<StageResult>,
}

impl ChainResult {
    pub fn final_checkpoint(&self) -> &Path {
        &self.stages.last().expect("validated chain has a stage").best_checkpoint
    }

    pub fn final_run_id(&self) -> &str {
        &self.stages.last().expect("validated chain has a stage").run_id
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Registry {
    /// Prefix run id to completed best checkpoint.
    entries: BTreeMap<String, RegistryEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegistryEntry {
    chain: String,
    best_checkpoint: PathBuf,
    lineage: Vec<StageRecord>,
}

impl Registry {
    fn path(root: &Path) -> PathBuf {
        root.join(REGISTRY_DIR).join(REGISTRY_INDEX)
    }

    fn load(root: &Path) -> Result<Self> {
        let path = Self::path(root);
        if !path.is_file() {
            return Ok(Self::default());
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn save(&self, root: &Path) -> Result<()> {
        write_atomic(&Self::path(root), &serde_json::to_vec_pretty(self)?)
    }
}

fn stage_run_id(chain: &ChainSpec, stage: usize, opts: &ChainOptions) -> Result<String> {
    let prefix = chain.prefix(stage + 1);
    let key = (
        &prefix,
        opts.architecture,
        opts.encoder,
        opts.width_divisor,
        &opts.train,
        opts.build.seed,
    );
    let hash = canonical_hash(&key)?;
    let base = format!(
        "chain-{}-{}-{}-{}",
        opts.architecture,
        opts.encoder,
        prefix.slug(),
        &hash[..10]
    );
    if opts.reuse_prefixes {
        Ok(base)
    } else {
        // the full chain keeps otherwise identical prefixes apart
        Ok(format!("{base}-of-{}", chain.slug()))
    }
}

/// Trains each stage of `chain` in order, writing runs under `out_root`.
pub fn run_chain(
    chain: &ChainSpec,
    datasets: &BTreeMap<String, DatasetIndex>,
    opts: &ChainOptions,
    out_root: &Path,
) -> Result<ChainResult> {
    chain.validate()?;
    for name in &chain.stages {
        if !datasets.contains_key(name) {
            return Err(Error::Config(format!("chain {chain} needs dataset `{name}`, which is not loaded")));
        }
    }
    let mut registry = Registry::load(out_root)?;
    let mut stages: Vec<StageResult> = Vec::with_capacity(chain.stages.len());
    for (i, name) in chain.stages.iter().enumerate() {
        let index = &datasets[name];
        let run_stage = |stages: &[StageResult], registry: &mut Registry| -> Result<StageResult> {
            let run_id = stage_run_id(chain, i, opts)?;
            let cfg = chain.overrides.get(name).unwrap_or(&opts.train);
            if opts.reuse_prefixes {
                if let Some(entry) = registry.entries.get(&run_id) {
                    if entry.best_checkpoint.is_file() {
                        info!("chain {chain}: reusing stage {i} ({name}) from {run_id}");
                        let dir = entry.best_checkpoint.parent().unwrap_or(out_root);
                        return Ok(StageResult {
                            dataset: name.clone(),
                            run_id: run_id.clone(),
                            init_checkpoint: dir.join(INIT_CHECKPOINT),
                            best_checkpoint: entry.best_checkpoint.clone(),
                            reused: true,
                            fit: None,
                        });
                    }
                }
            }
            let k = index.spec().landmark_count;
            let mut net = match stages.last() {
                None => {
                    let spec = ModelSpec::new(opts.architecture, opts.encoder, k)
                        .with_pretrained(chain.start.pretrained())
                        .with_width_divisor(opts.width_divisor);
                    LandmarkNet::build(&spec, &opts.build)?
                }
                Some(prev) => swap_head(&Checkpoint::load(&prev.best_checkpoint)?, k, &opts.build)?,
            };
            let hash = canonical_hash(&(chain.prefix(i + 1), cfg))?;
            let run = RunDir::create(out_root, &run_id, name, Some(hash))?;
            net.save(&run.path.join(INIT_CHECKPOINT))?;
            run.write_json("config.json", &(chain.prefix(i + 1), net.spec(), cfg))?;
            let ids = index.ids(Split::Train);
            let fit = train_on_index(&mut net, index, &ids, cfg, Some(&run))?;
            registry.entries.insert(
                run_id.clone(),
                RegistryEntry {
                    chain: chain.prefix(i + 1).to_string(),
                    best_checkpoint: run.best_checkpoint(),
                    lineage: net.lineage().to_vec(),
                },
            );
            registry.save(out_root)?;
            Ok(StageResult {
                dataset: name.clone(),
                run_id,
                init_checkpoint: run.path.join(INIT_CHECKPOINT),
                best_checkpoint: run.best_checkpoint(),
                reused: false,
                fit: Some(fit),
            })
        };
        let stage = run_stage(&stages, &mut registry).map_err(|e| Error::ChainStage {
            stage: i,
            dataset: name.clone(),
            source: Box::new(e),
        })?;
        stages.push(stage);
    }
    Ok(ChainResult {
        chain: chain.clone(),
        stages,
    })
}

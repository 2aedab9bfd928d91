//! Experiment configuration, training runs, and evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{panoptic_quality, random_baseline_miou, ConfusionMatrix, PqTally, SegmentationReport};
use crate::model::{GraphonomyModel, Knowledge, ModelConfig, ModelSpec};
use crate::optim::{OptimConfig, Optimizer};
use crate::panoptic::{ground_truth_segments, PanopticModel, PanopticSpec};
use crate::params::{load_checkpoint, save_checkpoint, Manifest, NamedGrads, ParamStore};
use crate::sampler::UniversalSampler;
use crate::synth::{read_dataset, split_dir, SceneSample};
use crate::taxonomy::{EmbeddingTable, LabelTaxonomy};
use crate::transfer::Scheme;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    /// Root written by `gen`: `<data>/<domain>/{train,test}`.
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    /// Base checkpoint for incremental runs.
    #[serde(default)]
    pub from: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Train on the target domain only.
    Single,
    /// Train on the other domains first, then on the target.
    TransferPretrain,
    /// Train on all domains, one domain per batch.
    Universal,
    /// Extend a checkpoint with the target domain and train only the new
    /// parameters.
    Incremental,
    Panoptic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanopticClasses {
    pub domain: String,
    pub stuff: Vec<String>,
    pub things: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub mode: Mode,
    pub paths: Paths,
    #[serde(default)]
    pub domains: Vec<String>,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub model: ModelConfig,
    pub optimizer: OptimConfig,
    /// Optimizer for the first phase of `transfer_pretrain`.
    #[serde(default)]
    pub pretrain: Option<OptimConfig>,
    /// Train on only the first `n` target scenes.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub panoptic: Option<PanopticClasses>,
    pub seed: u64,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    /// Reads a config; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let p = &mut cfg.paths;
        for opt in [&mut p.taxonomy, &mut p.embeddings, &mut p.from] {
            if let Some(x) = opt {
                resolve(&base, x);
            }
        }
        resolve(&base, &mut p.data);
        resolve(&base, &mut p.checkpoints);
        Ok(cfg)
    }

    fn target(&self) -> Result<&str> {
        self.target
            .as_deref()
            .ok_or_else(|| Error::Config(format!("mode {:?} needs a target domain", self.mode)))
    }

    /// Checks toggles, mode requirements, and that referenced inputs exist.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        let exists = |what: &str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} '{}' does not exist", p.display())))
            }
        };
        exists("data directory", &self.paths.data)?;
        if let Some(e) = &self.paths.embeddings {
            exists("embeddings file", e)?;
        }
        if self.model.transfer.scheme.contains(Scheme::Semantic) && self.paths.embeddings.is_none() {
            return Err(Error::Config("semantic transfer needs paths.embeddings".into()));
        }
        if self.mode == Mode::Panoptic {
            if self.panoptic.is_none() {
                return Err(Error::Config("panoptic mode needs a panoptic block".into()));
            }
            return Ok(());
        }
        let taxonomy = self
            .paths
            .taxonomy
            .as_deref()
            .ok_or_else(|| Error::Config("paths.taxonomy is required".into()))?;
        exists("taxonomy", taxonomy)?;
        match self.mode {
            Mode::Single | Mode::TransferPretrain => {
                let t = self.target()?;
                if !self.domains.iter().any(|d| d == t) {
                    return Err(Error::Config(format!("target '{t}' is not among the domains")));
                }
                if self.mode == Mode::TransferPretrain {
                    if self.pretrain.is_none() {
                        return Err(Error::Config("transfer_pretrain needs a pretrain block".into()));
                    }
                    if self.domains.len() < 2 {
                        return Err(Error::Config("transfer_pretrain needs a source domain".into()));
                    }
                }
            }
            Mode::Universal => {
                if self.domains.is_empty() {
                    return Err(Error::Config("universal mode needs domains".into()));
                }
            }
            Mode::Incremental => {
                self.target()?;
            }
            Mode::Panoptic => unreachable!(),
        }
        if let Some(p) = &self.pretrain {
            p.validate()?;
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoints.join(format!("{}.bin", self.name))
    }

    pub fn log_path(&self) -> PathBuf {
        self.paths.checkpoints.join(format!("{}.log", self.name))
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub iter: usize,
    pub domain: String,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}", self.iter, self.domain, self.loss, self.lr)
    }
}

impl LogRecord {
    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Input(format!("malformed log line '{line}'"));
        let mut it = line.split('\t');
        let mut field = || it.next().ok_or_else(bad);
        let iter = field()?.parse().map_err(|_| bad())?;
        let domain = field()?.to_string();
        let loss = field()?.parse().map_err(|_| bad())?;
        let lr = field()?.parse().map_err(|_| bad())?;
        Ok(Self {
            iter,
            domain,
            loss,
            lr,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelDescriptor {
    Parsing(ModelSpec),
    Panoptic(PanopticSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Parsing(GraphonomyModel),
    Panoptic(PanopticModel),
}

impl AnyModel {
    pub fn params(&self) -> &ParamStore {
        match self {
            AnyModel::Parsing(m) => &m.params,
            AnyModel::Panoptic(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::Parsing(m) => &mut m.params,
            AnyModel::Panoptic(m) => &mut m.params,
        }
    }

    pub fn descriptor(&self) -> ModelDescriptor {
        match self {
            AnyModel::Parsing(m) => ModelDescriptor::Parsing(m.spec.clone()),
            AnyModel::Panoptic(m) => ModelDescriptor::Panoptic(m.spec.clone()),
        }
    }

    pub fn domains(&self) -> Vec<String> {
        match self {
            AnyModel::Parsing(m) => m.domain_names(),
            AnyModel::Panoptic(m) => vec![m.spec.domain.clone()],
        }
    }

    pub fn batch_grads(
        &self,
        batch: &[&SceneSample],
        domain: &str,
        workers: usize,
    ) -> Result<(f64, NamedGrads)> {
        match self {
            AnyModel::Parsing(m) => m.batch_grads(batch, domain, workers),
            AnyModel::Panoptic(m) => m.batch_grads(batch, workers),
        }
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<Manifest> {
        let model = serde_json::to_value(self.descriptor()).expect("descriptor serializes");
        save_checkpoint(path, self.params(), model, extra)
    }

    pub fn load(path: &Path) -> Result<(Self, Manifest)> {
        let (params, manifest) = load_checkpoint(path)?;
        let desc: ModelDescriptor = serde_json::from_value(manifest.model.clone())
            .map_err(|e| Error::Integrity(format!("{}: bad model description: {e}", path.display())))?;
        let model = match desc {
            ModelDescriptor::Parsing(spec) => {
                let m = GraphonomyModel { spec, params };
                m.validate()
                    .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
                AnyModel::Parsing(m)
            }
            ModelDescriptor::Panoptic(spec) => AnyModel::Panoptic(PanopticModel { spec, params }),
        };
        Ok((model, manifest))
    }
}

pub fn load_split(data: &Path, domain: &str, split: &str) -> Result<Vec<SceneSample>> {
    let dir = split_dir(data, domain, split);
    if !dir.is_dir() {
        return Err(Error::Input(format!("no {split} data for '{domain}' at {}", dir.display())));
    }
    read_dataset(&dir)
}

/// Runs `opt.iterations` steps over batches drawn from `pools`.
pub fn run_phase(
    model: &mut AnyModel,
    pools: &[(String, Vec<SceneSample>)],
    opt: &OptimConfig,
    seed: u64,
    workers: usize,
    log: &mut Vec<LogRecord>,
) -> Result<()> {
    let sizes: Vec<usize> = pools.iter().map(|(_, p)| p.len()).collect();
    let mut sampler = UniversalSampler::new(&sizes, opt.batch, seed)?;
    let mut optim = Optimizer::new(opt.clone());
    for _ in 0..opt.iterations {
        let b = sampler.next_batch();
        let (domain, pool) = &pools[b.pool];
        let batch: Vec<&SceneSample> = b.indices.iter().map(|&i| &pool[i]).collect();
        let (loss, grads) = model.batch_grads(&batch, domain, workers)?;
        if !loss.is_finite() {
            return Err(Error::Contract(format!(
                "loss became {loss} at iteration {}",
                log.len()
            )));
        }
        let lr = optim.step(model.params_mut(), &grads)?;
        log.push(LogRecord {
            iter: log.len(),
            domain: domain.clone(),
            loss,
            lr,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub workers: usize,
    /// Overrides `paths.from`.
    pub from: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: AnyModel,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: Vec<LogRecord>,
    pub manifest: Manifest,
}

struct Inputs {
    taxonomy: LabelTaxonomy,
    embeddings: Option<EmbeddingTable>,
}

impl Inputs {
    fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let taxonomy = LabelTaxonomy::load(cfg.paths.taxonomy.as_ref().expect("validated"))?;
        let embeddings = cfg
            .paths
            .embeddings
            .as_ref()
            .map(EmbeddingTable::load)
            .transpose()?;
        Ok(Self {
            taxonomy,
            embeddings,
        })
    }

    fn knowledge(&self) -> Knowledge<'_> {
        Knowledge {
            taxonomy: &self.taxonomy,
            embeddings: self.embeddings.as_ref(),
        }
    }
}

fn pools(cfg: &ExperimentConfig, domains: &[String]) -> Result<Vec<(String, Vec<SceneSample>)>> {
    domains
        .iter()
        .map(|d| {
            let mut samples = load_split(&cfg.paths.data, d, "train")?;
            if cfg.target.as_deref() == Some(d.as_str()) {
                if let Some(n) = cfg.train_limit {
                    samples.truncate(n);
                }
            }
            Ok((d.clone(), samples))
        })
        .collect()
}

fn channels(pools: &[(String, Vec<SceneSample>)]) -> Result<usize> {
    pools
        .iter()
        .flat_map(|(_, p)| p.first())
        .map(|s| s.channels())
        .next()
        .ok_or_else(|| Error::Input("no training samples".into()))
}

/// Validates `cfg`, trains, and writes the checkpoint and log.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let workers = opts.workers.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut extra = serde_json::json!({
        "name": cfg.name,
        "mode": cfg.mode,
        "seed": cfg.seed,
    });
    let model = match cfg.mode {
        Mode::Panoptic => {
            let classes = cfg.panoptic.as_ref().expect("validated");
            let pools = vec![(
                classes.domain.clone(),
                load_split(&cfg.paths.data, &classes.domain, "train")?,
            )];
            let spec = PanopticSpec {
                config: cfg.model.clone(),
                channels: channels(&pools)?,
                domain: classes.domain.clone(),
                stuff: classes.stuff.clone(),
                things: classes.things.clone(),
            };
            let mut model = AnyModel::Panoptic(PanopticModel::new(spec, &mut rng)?);
            run_phase(&mut model, &pools, &cfg.optimizer, cfg.seed, workers, &mut log)?;
            model
        }
        Mode::Single | Mode::Universal => {
            let inputs = Inputs::load(cfg)?;
            let trained = match cfg.mode {
                Mode::Single => vec![cfg.target()?.to_string()],
                _ => cfg.domains.clone(),
            };
            let pools = pools(cfg, &trained)?;
            let m = GraphonomyModel::new(
                cfg.model.clone(),
                channels(&pools)?,
                &cfg.domains,
                inputs.knowledge(),
                &mut rng,
            )?;
            let mut model = AnyModel::Parsing(m);
            run_phase(&mut model, &pools, &cfg.optimizer, cfg.seed, workers, &mut log)?;
            model
        }
        Mode::TransferPretrain => {
            let inputs = Inputs::load(cfg)?;
            let target = cfg.target()?.to_string();
            let sources: Vec<String> = cfg.domains.iter().filter(|d| **d != target).cloned().collect();
            let source_pools = pools(cfg, &sources)?;
            let target_pool = pools(cfg, std::slice::from_ref(&target))?;
            let m = GraphonomyModel::new(
                cfg.model.clone(),
                channels(&target_pool)?,
                &cfg.domains,
                inputs.knowledge(),
                &mut rng,
            )?;
            let mut model = AnyModel::Parsing(m);
            let pre = cfg.pretrain.as_ref().expect("validated");
            run_phase(&mut model, &source_pools, pre, cfg.seed, workers, &mut log)?;
            run_phase(
                &mut model,
                &target_pool,
                &cfg.optimizer,
                cfg.seed.wrapping_add(1),
                workers,
                &mut log,
            )?;
            model
        }
        Mode::Incremental => {
            let inputs = Inputs::load(cfg)?;
            let from = opts
                .from
                .clone()
                .or_else(|| cfg.paths.from.clone())
                .ok_or_else(|| Error::Config("incremental mode needs a base checkpoint".into()))?;
            let (base, manifest) = AnyModel::load(&from)?;
            let AnyModel::Parsing(mut m) = base else {
                return Err(Error::Config("incremental mode needs a parsing checkpoint".into()));
            };
            let target = cfg.target()?.to_string();
            m.incremental_extend(&target, inputs.knowledge(), &mut rng)?;
            extra["base_checkpoint_sha256"] = manifest.sha256.into();
            extra["frozen_checksum"] = m.params.frozen_checksum().into();
            let pools = pools(cfg, std::slice::from_ref(&target))?;
            let mut model = AnyModel::Parsing(m);
            run_phase(&mut model, &pools, &cfg.optimizer, cfg.seed, workers, &mut log)?;
            model
        }
    };
    extra["iterations"] = log.len().into();
    extra["final_loss"] = log.last().map(|r| r.loss).into();
    let checkpoint = cfg.checkpoint_path();
    let manifest = model.save(&checkpoint, extra)?;
    let log_path = cfg.log_path();
    let text: String = log.iter().map(|r| format!("{r}\n")).collect();
    fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        model,
        checkpoint,
        log_path,
        log,
        manifest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainReport {
    pub labels: Vec<String>,
    pub scenes: usize,
    #[serde(flatten)]
    pub metrics: SegmentationReport,
    /// Expected mIoU of a uniform random predictor on the same data.
    pub random_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PanopticSummary {
    pub pq: Option<f64>,
    pub pq_thing: Option<f64>,
    pub pq_stuff: Option<f64>,
    pub thing: PqTally,
    pub stuff: PqTally,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub domains: BTreeMap<String, DomainReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub panoptic: Option<PanopticSummary>,
}

fn predict_all(
    model: &AnyModel,
    samples: &[SceneSample],
    domain: &str,
    workers: usize,
) -> Result<Vec<Vec<usize>>> {
    let one = |s: &SceneSample| match model {
        AnyModel::Parsing(m) => m.predict(s, domain),
        AnyModel::Panoptic(m) => m.predict(s),
    };
    if workers > 1 {
        samples.par_iter().map(one).collect()
    } else {
        samples.iter().map(one).collect()
    }
}

fn labels_of(model: &AnyModel, domain: &str) -> Result<Vec<String>> {
    match model {
        AnyModel::Parsing(m) => Ok(m.domain(domain)?.labels.clone()),
        AnyModel::Panoptic(m) => Ok(m.spec.stuff.iter().chain(&m.spec.things).cloned().collect()),
    }
}

/// Evaluates `model` on the test split of `domains` (all of the model's
/// domains when `None`).
pub fn evaluate_model(
    model: &AnyModel,
    data: &Path,
    domains: Option<&[String]>,
    workers: usize,
) -> Result<EvalReport> {
    let all = model.domains();
    let chosen: Vec<String> = match domains {
        None => all.clone(),
        Some(ds) => {
            for d in ds {
                if !all.contains(d) {
                    return Err(Error::Config(format!("checkpoint has no domain '{d}'")));
                }
            }
            ds.to_vec()
        }
    };
    let mut report = EvalReport {
        domains: BTreeMap::new(),
        panoptic: None,
    };
    for domain in &chosen {
        let samples = load_split(data, domain, "test")?;
        let labels = labels_of(model, domain)?;
        let preds = predict_all(model, &samples, domain, workers)?;
        let mut cm = ConfusionMatrix::new(labels.len());
        let mut gt_all = Vec::new();
        for (s, p) in samples.iter().zip(&preds) {
            let gt = s.label_map(domain)?;
            cm.add(p, gt)?;
            gt_all.extend_from_slice(gt);
        }
        if let AnyModel::Panoptic(m) = model {
            let n_stuff = m.spec.stuff.len();
            let (mut thing, mut stuff) = (PqTally::default(), PqTally::default());
            for (s, p) in samples.iter().zip(&preds) {
                let owner = crate::projection::region_owner(&s.regions(), s.height(), s.width());
                let pred = crate::panoptic::predicted_segments(p, &owner, n_stuff);
                let gt = ground_truth_segments(s, domain, n_stuff)?;
                let r = panoptic_quality(&pred, &gt, |c| m.spec.is_thing(c))?;
                thing.merge(&r.thing);
                stuff.merge(&r.stuff);
            }
            let mut all = thing.clone();
            all.merge(&stuff);
            report.panoptic = Some(PanopticSummary {
                pq: all.pq(),
                pq_thing: thing.pq(),
                pq_stuff: stuff.pq(),
                thing,
                stuff,
            });
        }
        report.domains.insert(
            domain.clone(),
            DomainReport {
                random_miou: random_baseline_miou(&gt_all, labels.len(), 3, 0),
                labels,
                scenes: samples.len(),
                metrics: cm.report(),
            },
        );
    }
    Ok(report)
}

pub fn evaluate(
    checkpoint: &Path,
    data: &Path,
    domains: Option<&[String]>,
    workers: usize,
) -> Result<EvalReport> {
    let (model, _) = AnyModel::load(checkpoint)?;
    evaluate_model(&model, data, domains, workers)
}

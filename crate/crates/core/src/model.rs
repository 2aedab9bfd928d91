//! The multi-domain parsing model.
//!
//! Every domain owns a projection, one graph-convolution weight per
//! reasoning round, and a per-pixel linear head. Every ordered pair of
//! domains owns a transfer edge. A forward pass for an active domain
//! projects the shared features into every domain's graph, runs `T` rounds
//! of intra-graph reasoning followed by bidirectional transfer between the
//! active graph and each other graph, re-projects the active graph, and
//! classifies every pixel.
//!
//! Parameter names: `<d>.proj.{P,W1,W_re}`, `<d>.adj`, `<d>.gcn.<t>`,
//! `<d>.head.{W,b}`, and `transfer.<t><-<s>.{W_tr,A,att,handcraft,semantic}`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{accumulate, Bound, NamedGrads, ParamStore};
use crate::projection::{fan_in_uniform, flatten_pixels, project, reproject, PixelPooling, Projection};
use crate::reasoning::{gcn_layer, normalize_adjacency};
use crate::synth::SceneSample;
use crate::taxonomy::{semantic_transfer, EmbeddingTable, LabelTaxonomy};
use crate::tensor::Tensor;
use crate::transfer::{
    bidirectional_step, init_learnable, Scheme, SchemeSet, TransferContext, TransferEdge,
    UpdateOrder,
};

fn yes() -> bool {
    true
}

fn default_slope() -> f64 {
    Activation::DEFAULT_LEAKY_SLOPE
}

fn default_dim() -> usize {
    32
}

fn default_rounds() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntraConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Knowledge adjacency when set, identity otherwise.
    #[serde(default = "yes")]
    pub use_adjacency: bool,
}

impl Default for IntraConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            use_adjacency: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    #[serde(default)]
    pub scheme: SchemeSet,
    #[serde(default)]
    pub order: UpdateOrder,
    #[serde(default = "default_slope")]
    pub attention_slope: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            scheme: SchemeSet::none(),
            order: UpdateOrder::default(),
            attention_slope: default_slope(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Node feature dimension `D`.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Reasoning rounds `T`.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub pooling: PixelPooling,
    #[serde(default)]
    pub intra: IntraConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: default_dim(),
            rounds: default_rounds(),
            pooling: PixelPooling::default(),
            intra: IntraConfig::default(),
            transfer: TransferConfig::default(),
        }
    }
}

impl ModelConfig {
    /// The plain per-pixel classifier, no graph at all.
    pub fn baseline() -> Self {
        Self {
            intra: IntraConfig {
                enabled: false,
                use_adjacency: false,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.rounds == 0 {
            return Err(Error::Config("model dim and rounds must be positive".into()));
        }
        if self.intra.use_adjacency && !self.intra.enabled {
            return Err(Error::Config(
                "intra.use_adjacency requires intra.enabled".into(),
            ));
        }
        let s = self.transfer.attention_slope;
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::Config(format!("attention slope {s} outside (0, 1)")));
        }
        Ok(())
    }

    pub fn graph_enabled(&self) -> bool {
        self.intra.enabled || self.transfer_enabled()
    }

    pub fn transfer_enabled(&self) -> bool {
        !self.transfer.scheme.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub labels: Vec<String>,
}

/// Everything but the parameter values; stored in checkpoint manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub channels: usize,
    pub domains: Vec<DomainSpec>,
}

/// Knowledge sources consulted when a model or branch is created.
#[derive(Clone, Copy, Debug)]
pub struct Knowledge<'a> {
    pub taxonomy: &'a LabelTaxonomy,
    pub embeddings: Option<&'a EmbeddingTable>,
}

pub fn edge_prefix(target: &str, source: &str) -> String {
    format!("transfer.{target}<-{source}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphonomyModel {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

impl GraphonomyModel {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        channels: usize,
        domains: &[String],
        knowledge: Knowledge<'_>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if domains.is_empty() {
            return Err(Error::Config("a model needs at least one domain".into()));
        }
        let mut model = Self {
            spec: ModelSpec {
                config,
                channels,
                domains: Vec::new(),
            },
            params: ParamStore::new(),
        };
        for d in domains {
            model.add_domain(d, knowledge, rng)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.spec.config
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.spec.domains.iter().map(|d| d.name.clone()).collect()
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSpec> {
        self.spec
            .domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("model has no domain '{name}'")))
    }

    /// Adds a branch plus transfer edges to and from every existing domain.
    fn add_domain<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        knowledge: Knowledge<'_>,
        rng: &mut R,
    ) -> Result<()> {
        if self.spec.domains.iter().any(|d| d.name == name) {
            return Err(Error::Config(format!("domain '{name}' already in the model")));
        }
        let labels = knowledge.taxonomy.domain(name)?.labels.clone();
        if labels.is_empty() {
            return Err(Error::Config(format!("domain '{name}' has no labels")));
        }
        let cfg = self.spec.config.clone();
        let (c, d, n) = (self.spec.channels, cfg.dim, labels.len());
        let p = &mut self.params;
        if cfg.graph_enabled() {
            p.add_param(&format!("{name}.proj.P"), fan_in_uniform(&[c, n], rng))?;
            p.add_param(&format!("{name}.proj.W1"), fan_in_uniform(&[c, d], rng))?;
            p.add_param(&format!("{name}.proj.W_re"), fan_in_uniform(&[d, c], rng))?;
        }
        if cfg.intra.enabled {
            let adj = if cfg.intra.use_adjacency {
                normalize_adjacency(&knowledge.taxonomy.intra_adjacency(name)?)?
            } else {
                Tensor::eye(n)
            };
            p.add_buffer(&format!("{name}.adj"), adj)?;
            for t in 0..cfg.rounds {
                p.add_param(&format!("{name}.gcn.{t}"), fan_in_uniform(&[d, d], rng))?;
            }
        }
        p.add_param(&format!("{name}.head.W"), fan_in_uniform(&[c, n], rng))?;
        p.add_param(&format!("{name}.head.b"), Tensor::zeros(&[1, n]))?;
        let new = DomainSpec {
            name: name.to_string(),
            labels,
        };
        let existing = self.spec.domains.clone();
        for old in &existing {
            self.add_edge(&new, old, knowledge, rng)?;
            self.add_edge(old, &new, knowledge, rng)?;
        }
        self.spec.domains.push(new);
        Ok(())
    }

    fn add_edge<R: Rng + ?Sized>(
        &mut self,
        target: &DomainSpec,
        source: &DomainSpec,
        knowledge: Knowledge<'_>,
        rng: &mut R,
    ) -> Result<()> {
        let cfg = &self.spec.config;
        if !cfg.transfer_enabled() {
            return Ok(());
        }
        let pre = edge_prefix(&target.name, &source.name);
        let (nt, ns, d) = (target.labels.len(), source.labels.len(), cfg.dim);
        let p = &mut self.params;
        p.add_param(&format!("{pre}.W_tr"), fan_in_uniform(&[d, d], rng))?;
        for &s in cfg.transfer.scheme.schemes() {
            match s {
                Scheme::Learnable => p.add_param(&format!("{pre}.A"), init_learnable(nt, ns, rng))?,
                Scheme::Attention => {
                    p.add_param(&format!("{pre}.att"), fan_in_uniform(&[2 * d, 1], rng))?
                }
                Scheme::Handcraft => p.add_buffer(
                    &format!("{pre}.handcraft"),
                    knowledge.taxonomy.handcraft_transfer(&source.name, &target.name)?,
                )?,
                Scheme::Semantic => {
                    let table = knowledge.embeddings.ok_or_else(|| {
                        Error::Config("semantic transfer needs an embeddings file".into())
                    })?;
                    p.add_buffer(
                        &format!("{pre}.semantic"),
                        semantic_transfer(table, &target.labels, &source.labels)?,
                    )?
                }
                Scheme::Feature => {}
            }
        }
        Ok(())
    }

    /// Adds `name` as a new branch connected to every existing graph, after
    /// freezing everything already in the model.
    pub fn incremental_extend<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        knowledge: Knowledge<'_>,
        rng: &mut R,
    ) -> Result<()> {
        if self.spec.domains.iter().any(|d| d.name == name) {
            return Err(Error::Config(format!("domain '{name}' already in the model")));
        }
        let snapshot = self.clone();
        self.params.freeze_all();
        if let Err(e) = self.add_domain(name, knowledge, rng) {
            *self = snapshot;
            return Err(e);
        }
        Ok(())
    }

    /// Checks that every parameter a forward pass needs exists with the
    /// right shape.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.spec.config;
        cfg.validate()?;
        let (c, d) = (self.spec.channels, cfg.dim);
        let expect = |name: String, shape: &[usize]| -> Result<()> {
            let t = self.params.get(&name)?;
            if t.shape() != shape {
                return Err(Error::Integrity(format!(
                    "'{name}' has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        for dom in &self.spec.domains {
            let (name, n) = (&dom.name, dom.labels.len());
            expect(format!("{name}.head.W"), &[c, n])?;
            expect(format!("{name}.head.b"), &[1, n])?;
            if cfg.graph_enabled() {
                expect(format!("{name}.proj.P"), &[c, n])?;
                expect(format!("{name}.proj.W1"), &[c, d])?;
                expect(format!("{name}.proj.W_re"), &[d, c])?;
            }
            if cfg.intra.enabled {
                expect(format!("{name}.adj"), &[n, n])?;
                for t in 0..cfg.rounds {
                    expect(format!("{name}.gcn.{t}"), &[d, d])?;
                }
            }
            if cfg.transfer_enabled() {
                for other in self.spec.domains.iter().filter(|o| o.name != dom.name) {
                    let pre = edge_prefix(name, &other.name);
                    expect(format!("{pre}.W_tr"), &[d, d])?;
                    let m = other.labels.len();
                    for &s in cfg.transfer.scheme.schemes() {
                        match s {
                            Scheme::Learnable => expect(format!("{pre}.A"), &[n, m])?,
                            Scheme::Attention => expect(format!("{pre}.att"), &[2 * d, 1])?,
                            Scheme::Handcraft => expect(format!("{pre}.handcraft"), &[n, m])?,
                            Scheme::Semantic => expect(format!("{pre}.semantic"), &[n, m])?,
                            Scheme::Feature => {}
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        Bound::bind(&self.params, tape, &[])
    }

    fn edge<'a>(&'a self, bound: &Bound, target: &str, source: &str) -> Result<TransferEdge<'a>> {
        let pre = edge_prefix(target, source);
        let cfg = &self.spec.config;
        let buffer = |suffix: &str| -> Result<Option<&'a Tensor>> {
            let name = format!("{pre}.{suffix}");
            if self.params.contains(&name) {
                self.params.get(&name).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(TransferEdge {
            schemes: &cfg.transfer.scheme,
            ctx: TransferContext {
                handcraft: buffer("handcraft")?,
                semantic: buffer("semantic")?,
                learnable: bound.try_get(&format!("{pre}.A")),
                attention: bound.try_get(&format!("{pre}.att")),
                attention_slope: cfg.transfer.attention_slope,
            },
            w_tr: bound.get(&format!("{pre}.W_tr"))?,
            activation: Activation::Relu,
        })
    }

    /// Enhanced `HW×C` features for `active`.
    pub fn enhance(&self, tape: &mut Tape, bound: &Bound, x: Var, active: &str) -> Result<Var> {
        self.domain(active)?;
        let cfg = &self.spec.config;
        let flat = flatten_pixels(tape, x)?;
        if !cfg.graph_enabled() {
            return Ok(flat);
        }
        let names: Vec<&str> = if cfg.transfer_enabled() {
            self.spec.domains.iter().map(|d| d.name.as_str()).collect()
        } else {
            vec![active]
        };
        let ai = names.iter().position(|n| *n == active).expect("active is listed");
        let mut graphs = Vec::with_capacity(names.len());
        for name in &names {
            let proj = Projection {
                p: bound.get(&format!("{name}.proj.P"))?,
                w1: bound.get(&format!("{name}.proj.W1"))?,
                w_re: bound.get(&format!("{name}.proj.W_re"))?,
            };
            graphs.push((project(tape, flat, &proj, name, cfg.pooling)?, proj.w_re));
        }
        for round in 0..cfg.rounds {
            if cfg.intra.enabled {
                for (g, _) in graphs.iter_mut() {
                    let adj = bound.get(&format!("{}.adj", g.domain))?;
                    let w = bound.get(&format!("{}.gcn.{round}", g.domain))?;
                    g.z = gcn_layer(tape, g.z, adj, w, Activation::Relu)?;
                }
            }
            if cfg.transfer_enabled() {
                for oi in (0..names.len()).filter(|&i| i != ai) {
                    let a_from_o = self.edge(bound, active, names[oi])?;
                    let o_from_a = self.edge(bound, names[oi], active)?;
                    let (za, zo) = bidirectional_step(
                        tape,
                        graphs[ai].0.z,
                        graphs[oi].0.z,
                        &a_from_o,
                        &o_from_a,
                        cfg.transfer.order,
                    )?;
                    graphs[ai].0.z = za;
                    graphs[oi].0.z = zo;
                }
            }
        }
        let (g, w_re) = &graphs[ai];
        reproject(tape, g, flat, *w_re)
    }

    /// Per-pixel `HW×L` logits for `active`.
    pub fn logits(&self, tape: &mut Tape, bound: &Bound, features: &Tensor, active: &str) -> Result<Var> {
        let x = tape.constant(features.clone());
        let enhanced = self.enhance(tape, bound, x, active)?;
        let w = bound.get(&format!("{active}.head.W"))?;
        let b = bound.get(&format!("{active}.head.b"))?;
        let raw = tape.matmul(enhanced, w)?;
        tape.add_row(raw, b)
    }

    /// Loss and gradients of the trainable parameters for one sample.
    pub fn sample_grads(&self, sample: &SceneSample, active: &str) -> Result<(f64, NamedGrads)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let logits = self.logits(&mut tape, &bound, &sample.features, active)?;
        let loss = tape.cross_entropy(logits, sample.label_map(active)?)?;
        let mut grads = tape.backward(loss)?;
        let named = bound.gradients(&self.params, &mut grads)?;
        Ok((tape.value(loss).item(), named))
    }

    /// Mean loss and mean gradients over a batch. Samples are reduced in
    /// order, so the result does not depend on `workers`.
    pub fn batch_grads(
        &self,
        batch: &[&SceneSample],
        active: &str,
        workers: usize,
    ) -> Result<(f64, NamedGrads)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let per_sample: Vec<(f64, NamedGrads)> = if workers > 1 {
            batch
                .par_iter()
                .map(|s| self.sample_grads(s, active))
                .collect::<Result<_>>()?
        } else {
            batch
                .iter()
                .map(|s| self.sample_grads(s, active))
                .collect::<Result<_>>()?
        };
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grads = NamedGrads::new();
        for (l, g) in per_sample {
            loss += l;
            accumulate(&mut grads, g);
        }
        for g in grads.values_mut() {
            *g = g.scale(scale);
        }
        Ok((loss * scale, grads))
    }

    pub fn predict(&self, sample: &SceneSample, domain: &str) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let logits = self.logits(&mut tape, &bound, &sample.features, domain)?;
        Ok(tape.value(logits).argmax_rows())
    }
}

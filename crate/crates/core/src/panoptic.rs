//! Stuff-and-things segmentation with a semantic graph for stuff and an
//! instance graph for things.
//!
//! Stuff nodes come from the learned projection; instance nodes are pooled
//! over region boxes and connected by attention. The two graphs exchange
//! messages each round. Re-projected stuff features and the owning
//! instance's node features are concatenated per pixel and classified over
//! stuff and thing classes together.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape};
use crate::error::{Error, Result};
use crate::metrics::Segment;
use crate::model::{edge_prefix, ModelConfig};
use crate::params::{accumulate, Bound, NamedGrads, ParamStore};
use crate::projection::{
    fan_in_uniform, flatten_pixels, instance_project, instance_reproject, project, region_owner,
    reproject, Projection, Region,
};
use crate::reasoning::{attention_adjacency, gcn_layer, normalize_adjacency};
use crate::synth::SceneSample;
use crate::tensor::Tensor;
use crate::transfer::{bidirectional_step, Scheme, TransferContext, TransferEdge};

pub const STUFF: &str = "stuff";
pub const INSTANCES: &str = "inst";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticSpec {
    pub config: ModelConfig,
    pub channels: usize,
    /// Name of the label map in each sample.
    pub domain: String,
    pub stuff: Vec<String>,
    pub things: Vec<String>,
}

impl PanopticSpec {
    pub fn classes(&self) -> usize {
        self.stuff.len() + self.things.len()
    }

    pub fn is_thing(&self, class: usize) -> bool {
        class >= self.stuff.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanopticModel {
    pub spec: PanopticSpec,
    pub params: ParamStore,
}

impl PanopticModel {
    pub fn new<R: Rng + ?Sized>(spec: PanopticSpec, rng: &mut R) -> Result<Self> {
        let cfg = &spec.config;
        cfg.validate()?;
        for &s in cfg.transfer.scheme.schemes() {
            if !matches!(s, Scheme::Feature | Scheme::Attention) {
                return Err(Error::Config(format!(
                    "instance graphs change size per image; scheme '{}' needs a fixed node set",
                    s.as_str()
                )));
            }
        }
        if spec.stuff.is_empty() {
            return Err(Error::Config("panoptic model needs stuff classes".into()));
        }
        let (c, d, ns) = (spec.channels, cfg.dim, spec.stuff.len());
        let mut p = ParamStore::new();
        if cfg.graph_enabled() {
            p.add_param("stuff.proj.P", fan_in_uniform(&[c, ns], rng))?;
            p.add_param("stuff.proj.W1", fan_in_uniform(&[c, d], rng))?;
            p.add_param("stuff.proj.W_re", fan_in_uniform(&[d, c], rng))?;
        }
        p.add_param("inst.W", fan_in_uniform(&[c, d], rng))?;
        if cfg.intra.enabled {
            let adj = if cfg.intra.use_adjacency {
                let mut full = Tensor::filled(&[ns, ns], 1.0);
                for i in 0..ns {
                    full.set(i, i, 0.0);
                }
                normalize_adjacency(&full)?
            } else {
                Tensor::eye(ns)
            };
            p.add_buffer("stuff.adj", adj)?;
            p.add_param("inst.att", fan_in_uniform(&[2 * d, 1], rng))?;
            for t in 0..cfg.rounds {
                p.add_param(&format!("stuff.gcn.{t}"), fan_in_uniform(&[d, d], rng))?;
                p.add_param(&format!("inst.gcn.{t}"), fan_in_uniform(&[d, d], rng))?;
            }
        }
        if cfg.transfer_enabled() {
            for (t, s) in [(STUFF, INSTANCES), (INSTANCES, STUFF)] {
                let pre = edge_prefix(t, s);
                p.add_param(&format!("{pre}.W_tr"), fan_in_uniform(&[d, d], rng))?;
                if cfg.transfer.scheme.contains(Scheme::Attention) {
                    p.add_param(&format!("{pre}.att"), fan_in_uniform(&[2 * d, 1], rng))?;
                }
            }
        }
        let l = spec.classes();
        p.add_param("head.W", fan_in_uniform(&[c + d, l], rng))?;
        p.add_param("head.b", Tensor::zeros(&[1, l]))?;
        Ok(Self { spec, params: p })
    }

    fn edge<'a>(&'a self, bound: &Bound, target: &str, source: &str) -> Result<TransferEdge<'a>> {
        let pre = edge_prefix(target, source);
        let cfg = &self.spec.config;
        Ok(TransferEdge {
            schemes: &cfg.transfer.scheme,
            ctx: TransferContext {
                attention: bound.try_get(&format!("{pre}.att")),
                attention_slope: cfg.transfer.attention_slope,
                ..TransferContext::default()
            },
            w_tr: bound.get(&format!("{pre}.W_tr"))?,
            activation: Activation::Relu,
        })
    }

    /// `HW×(S+K)` logits.
    pub fn logits(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: &Tensor,
        regions: &[Region],
    ) -> Result<crate::autodiff::Var> {
        let cfg = &self.spec.config;
        let shape = features.shape().to_vec();
        let x = tape.constant(features.clone());
        let inst_w = bound.get("inst.W")?;
        let mut inst = instance_project(tape, x, regions, inst_w)?;
        let has_instances = !regions.is_empty();
        let stuff_map = if cfg.graph_enabled() {
            let flat = flatten_pixels(tape, x)?;
            let proj = Projection {
                p: bound.get("stuff.proj.P")?,
                w1: bound.get("stuff.proj.W1")?,
                w_re: bound.get("stuff.proj.W_re")?,
            };
            let mut stuff = project(tape, flat, &proj, STUFF, cfg.pooling)?;
            for round in 0..cfg.rounds {
                if cfg.intra.enabled {
                    let adj = bound.get("stuff.adj")?;
                    let w = bound.get(&format!("stuff.gcn.{round}"))?;
                    stuff.z = gcn_layer(tape, stuff.z, adj, w, Activation::Relu)?;
                    if has_instances {
                        let att = bound.get("inst.att")?;
                        let a = attention_adjacency(
                            tape,
                            inst.z,
                            att,
                            cfg.transfer.attention_slope,
                            None,
                        )?;
                        let w = bound.get(&format!("inst.gcn.{round}"))?;
                        inst.z = gcn_layer(tape, inst.z, a, w, Activation::Relu)?;
                    }
                }
                if cfg.transfer_enabled() && has_instances {
                    let s_from_i = self.edge(bound, STUFF, INSTANCES)?;
                    let i_from_s = self.edge(bound, INSTANCES, STUFF)?;
                    let (zs, zi) = bidirectional_step(
                        tape,
                        stuff.z,
                        inst.z,
                        &s_from_i,
                        &i_from_s,
                        cfg.transfer.order,
                    )?;
                    stuff.z = zs;
                    inst.z = zi;
                }
            }
            let enhanced = reproject(tape, &stuff, flat, proj.w_re)?;
            tape.reshape(enhanced, &shape)?
        } else {
            x
        };
        let joined = instance_reproject(tape, &inst, stuff_map)?;
        let flat = flatten_pixels(tape, joined)?;
        let raw = tape.matmul(flat, bound.get("head.W")?)?;
        tape.add_row(raw, bound.get("head.b")?)
    }

    pub fn sample_grads(&self, sample: &SceneSample) -> Result<(f64, NamedGrads)> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&self.params, &mut tape, &[])?;
        let logits = self.logits(&mut tape, &bound, &sample.features, &sample.regions())?;
        let loss = tape.cross_entropy(logits, sample.label_map(&self.spec.domain)?)?;
        let mut grads = tape.backward(loss)?;
        let named = bound.gradients(&self.params, &mut grads)?;
        Ok((tape.value(loss).item(), named))
    }

    pub fn batch_grads(&self, batch: &[&SceneSample], workers: usize) -> Result<(f64, NamedGrads)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let per_sample: Vec<(f64, NamedGrads)> = if workers > 1 {
            batch
                .par_iter()
                .map(|s| self.sample_grads(s))
                .collect::<Result<_>>()?
        } else {
            batch.iter().map(|s| self.sample_grads(s)).collect::<Result<_>>()?
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

    pub fn predict(&self, sample: &SceneSample) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&self.params, &mut tape, &[])?;
        let logits = self.logits(&mut tape, &bound, &sample.features, &sample.regions())?;
        Ok(tape.value(logits).argmax_rows())
    }

    /// Predicted panoptic segments of one sample.
    pub fn segments(&self, sample: &SceneSample) -> Result<Vec<Segment>> {
        let pred = self.predict(sample)?;
        let owner = region_owner(&sample.regions(), sample.height(), sample.width());
        Ok(predicted_segments(&pred, &owner, self.spec.stuff.len()))
    }
}

/// Stuff pixels group by class. Thing pixels group by the region owning
/// them and take the region's most frequent predicted thing class; thing
/// pixels outside every region are dropped.
pub fn predicted_segments(pred: &[usize], owner: &[Option<usize>], n_stuff: usize) -> Vec<Segment> {
    let mut stuff: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut things: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (p, &c) in pred.iter().enumerate() {
        if c < n_stuff {
            stuff.entry(c).or_default().push(p);
        } else if let Some(r) = owner[p] {
            things.entry(r).or_default().push(p);
        }
    }
    let mut out: Vec<Segment> = stuff
        .into_iter()
        .map(|(c, px)| Segment::new(c, c as u32, px))
        .collect();
    for (r, px) in things {
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        for &p in &px {
            *votes.entry(pred[p]).or_default() += 1;
        }
        let class = votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&c, _)| c)
            .expect("non-empty group");
        out.push(Segment::new(class, 1000 + r as u32, px));
    }
    out
}

/// Ground-truth segments: one per stuff class present, one per instance.
pub fn ground_truth_segments(sample: &SceneSample, domain: &str, n_stuff: usize) -> Result<Vec<Segment>> {
    let map = sample.label_map(domain)?;
    let mut stuff: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (p, &c) in map.iter().enumerate() {
        if c < n_stuff {
            stuff.entry(c).or_default().push(p);
        }
    }
    let mut out: Vec<Segment> = stuff
        .into_iter()
        .map(|(c, px)| Segment::new(c, c as u32, px))
        .collect();
    for inst in &sample.instances {
        out.push(Segment::new(inst.class, 1000 + inst.id, inst.pixels.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::panoptic_quality;
    use crate::synth::{DatasetSpec, PanopticGenerator, PanopticLayout};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(seed: u64, max: usize) -> SceneSample {
        let g = PanopticGenerator::new(
            &PanopticLayout {
                stuff: vec!["sky".into(), "ground".into()],
                things: vec!["person".into(), "car".into()],
                max_instances: max,
                jitter: 0.05,
                prototype_scale: 1.0,
                prototype_seed: 2,
            },
            5,
        )
        .unwrap();
        let spec = DatasetSpec {
            domain: "panoptic".into(),
            scenes: 1,
            height: 10,
            width: 10,
            channels: 5,
            seed,
            noise: 0.2,
            instance_mode: true,
        };
        g.scene(&spec, 0).unwrap()
    }

    fn spec(scheme: &str) -> PanopticSpec {
        let mut config = ModelConfig {
            dim: 4,
            rounds: 2,
            ..ModelConfig::default()
        };
        config.transfer.scheme = scheme.parse().unwrap();
        PanopticSpec {
            config,
            channels: 5,
            domain: "panoptic".into(),
            stuff: vec!["sky".into(), "ground".into()],
            things: vec!["person".into(), "car".into()],
        }
    }

    #[test]
    fn forward_and_gradients_with_and_without_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = PanopticModel::new(spec("attention"), &mut rng).unwrap();
        for (seed, max) in [(1, 3), (2, 0)] {
            let s = scene(seed, max);
            let (loss, g) = m.sample_grads(&s).unwrap();
            assert!(loss.is_finite());
            assert!(g.contains_key("head.W"));
            assert_eq!(m.predict(&s).unwrap().len(), 100);
        }
    }

    #[test]
    fn fixed_node_schemes_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(PanopticModel::new(spec("learnable"), &mut rng).is_err());
        assert!(PanopticModel::new(spec("handcraft"), &mut rng).is_err());
    }

    #[test]
    fn ground_truth_labels_score_high() {
        let s = (0..)
            .map(|seed| scene(seed, 3))
            .find(|s| !s.instances.is_empty())
            .unwrap();
        let gt = ground_truth_segments(&s, "panoptic", 2).unwrap();
        let owner = region_owner(&s.regions(), 10, 10);
        let pred = predicted_segments(&s.labels["panoptic"], &owner, 2);
        let r = panoptic_quality(&pred, &gt, |c| c >= 2).unwrap();
        assert!(r.pq.unwrap() > 0.5);
    }

    #[test]
    fn segments_group_by_owner_and_vote() {
        let pred = [0, 2, 3, 2, 1, 2];
        let owner = [None, Some(0), Some(0), Some(0), Some(1), None];
        let segs = predicted_segments(&pred, &owner, 2);
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[2], Segment::new(2, 1000, vec![1, 2, 3]));
    }
}

//! Seeded finite-difference checks over every differentiable model path.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::model::{GraphonomyModel, Knowledge, ModelConfig};
use crate::params::Bound;
use crate::projection::{project, reproject, PixelPooling, Projection};
use crate::reasoning::{attention_adjacency, intra_reason, normalize_adjacency};
use crate::taxonomy::{DomainFile, EmbeddingTable, LabelTaxonomy, TaxonomyFile};
use crate::tensor::Tensor;
use crate::transfer::{init_learnable, transfer_into, Scheme, SchemeSet, TransferContext, TransferEdge};

pub const STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradPath {
    Projection,
    Intra,
    TransferFeature,
    TransferLearnable,
    TransferAttention,
    Attention,
    Composite,
}

impl GradPath {
    pub const ALL: [GradPath; 7] = [
        GradPath::Projection,
        GradPath::Intra,
        GradPath::TransferFeature,
        GradPath::TransferLearnable,
        GradPath::TransferAttention,
        GradPath::Attention,
        GradPath::Composite,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GradPath::Projection => "projection",
            GradPath::Intra => "intra",
            GradPath::TransferFeature => "transfer-feature",
            GradPath::TransferLearnable => "transfer-learnable",
            GradPath::TransferAttention => "transfer-attention",
            GradPath::Attention => "attention",
            GradPath::Composite => "composite",
        }
    }
}

impl fmt::Display for GradPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|p| p.as_str()).collect();
                Error::Config(format!("unknown gradcheck path '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// `uᵀ·Y·v` for fixed random `u`, `v`: a scalar touching every entry of `Y`
/// with a distinct weight.
fn weighted_sum(tape: &mut Tape, y: Var, u: &Tensor, v: &Tensor) -> Result<Var> {
    let u = tape.constant(u.clone());
    let v = tape.constant(v.clone());
    let yv = tape.matmul(y, v)?;
    tape.matmul(u, yv)
}

fn probes<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> (Tensor, Tensor) {
    (
        Tensor::uniform(&[1, rows], -1.0, 1.0, rng),
        Tensor::uniform(&[cols, 1], -1.0, 1.0, rng),
    )
}

fn sym<R: Rng>(n: usize, rng: &mut R) -> Tensor {
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(0.5) {
                a.set(i, j, 1.0);
                a.set(j, i, 1.0);
            }
        }
    }
    a
}

fn check_projection<R: Rng>(rng: &mut R, tol: f64) -> Result<GradCheckReport> {
    let (h, w) = (rng.random_range(2..4), rng.random_range(2..4));
    let (c, n, d) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..4));
    let pooling = if rng.random_bool(0.5) {
        PixelPooling::Mean
    } else {
        PixelPooling::Sum
    };
    let inputs = [
        Tensor::uniform(&[h * w, c], -1.0, 1.0, rng),
        Tensor::uniform(&[c, n], -1.0, 1.0, rng),
        Tensor::uniform(&[c, d], -1.0, 1.0, rng),
        Tensor::uniform(&[d, c], -1.0, 1.0, rng),
    ];
    let (u, v) = probes(h * w, c, rng);
    grad_check(
        |tape, x| {
            let proj = Projection {
                p: x[1],
                w1: x[2],
                w_re: x[3],
            };
            let g = project(tape, x[0], &proj, "d", pooling)?;
            let y = reproject(tape, &g, x[0], proj.w_re)?;
            weighted_sum(tape, y, &u, &v)
        },
        &inputs,
        STEP,
        tol,
    )
}

fn check_intra<R: Rng>(rng: &mut R, tol: f64) -> Result<GradCheckReport> {
    let (n, d) = (rng.random_range(2..6), rng.random_range(2..5));
    let adj = normalize_adjacency(&sym(n, rng))?;
    let mut inputs = vec![Tensor::uniform(&[n, d], -1.0, 1.0, rng)];
    for _ in 0..3 {
        inputs.push(Tensor::uniform(&[d, d], -1.0, 1.0, rng));
    }
    let (u, v) = probes(n, d, rng);
    grad_check(
        |tape, x| {
            let a = tape.constant(adj.clone());
            let y = intra_reason(tape, x[0], a, &x[1..], Activation::Relu)?;
            weighted_sum(tape, y, &u, &v)
        },
        &inputs,
        STEP,
        tol,
    )
}

fn check_transfer<R: Rng>(scheme: Scheme, rng: &mut R, tol: f64) -> Result<GradCheckReport> {
    let (nt, ns, d) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..4));
    let mut inputs = vec![
        Tensor::uniform(&[nt, d], -1.0, 1.0, rng),
        Tensor::uniform(&[ns, d], -1.0, 1.0, rng),
        Tensor::uniform(&[d, d], -1.0, 1.0, rng),
    ];
    match scheme {
        Scheme::Learnable => inputs.push(init_learnable(nt, ns, rng)),
        Scheme::Attention => inputs.push(Tensor::uniform(&[2 * d, 1], -1.0, 1.0, rng)),
        _ => {}
    }
    let schemes = SchemeSet::single(scheme);
    let (u, v) = probes(nt, d, rng);
    grad_check(
        |tape, x| {
            let mut ctx = TransferContext {
                attention_slope: Activation::DEFAULT_LEAKY_SLOPE,
                ..TransferContext::default()
            };
            match scheme {
                Scheme::Learnable => ctx.learnable = Some(x[3]),
                Scheme::Attention => ctx.attention = Some(x[3]),
                _ => {}
            }
            let edge = TransferEdge {
                schemes: &schemes,
                ctx,
                w_tr: x[2],
                activation: Activation::Relu,
            };
            let y = transfer_into(tape, x[0], x[1], &edge)?;
            weighted_sum(tape, y, &u, &v)
        },
        &inputs,
        STEP,
        tol,
    )
}

fn check_attention<R: Rng>(rng: &mut R, tol: f64) -> Result<GradCheckReport> {
    let (n, d) = (rng.random_range(2..6), rng.random_range(2..5));
    let mask: Option<Vec<bool>> = rng.random_bool(0.5).then(|| {
        let a = sym(n, rng);
        (0..n * n)
            .map(|k| k / n == k % n || a.data()[k] > 0.0)
            .collect()
    });
    let inputs = [
        Tensor::uniform(&[n, d], -1.0, 1.0, rng),
        Tensor::uniform(&[2 * d, 1], -1.0, 1.0, rng),
    ];
    let (u, v) = probes(n, d, rng);
    grad_check(
        |tape, x| {
            let a = attention_adjacency(tape, x[0], x[1], Activation::DEFAULT_LEAKY_SLOPE, mask.as_deref())?;
            let y = tape.matmul(a, x[0])?;
            weighted_sum(tape, y, &u, &v)
        },
        &inputs,
        STEP,
        tol,
    )
}

/// Two small domains with adjacency, subordination, and embeddings so
/// every scheme has its inputs.
fn composite_knowledge<R: Rng>(rng: &mut R) -> Result<(LabelTaxonomy, EmbeddingTable)> {
    let s = |x: &str| x.to_string();
    let file = TaxonomyFile {
        domains: vec![
            DomainFile {
                name: s("coarse"),
                labels: vec![s("bg"), s("top"), s("bottom")],
            },
            DomainFile {
                name: s("fine"),
                labels: vec![s("bg"), s("head"), s("body"), s("legs")],
            },
        ],
        adjacency: BTreeMap::from([
            (s("coarse"), vec![[s("top"), s("bottom")]]),
            (s("fine"), vec![[s("head"), s("body")], [s("body"), s("legs")]]),
        ]),
        subordinate: vec![
            [s("fine:head"), s("coarse:top")],
            [s("fine:body"), s("coarse:top")],
            [s("fine:legs"), s("coarse:bottom")],
        ],
    };
    let taxonomy = LabelTaxonomy::from_file(file)?;
    let mut table = EmbeddingTable::default();
    for label in ["bg", "top", "bottom", "head", "body", "legs"] {
        table.insert(label, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    }
    Ok((taxonomy, table))
}

fn check_composite<R: Rng>(rng: &mut R, tol: f64) -> Result<GradCheckReport> {
    let (taxonomy, table) = composite_knowledge(rng)?;
    let mut config = ModelConfig {
        dim: 3,
        rounds: 2,
        ..ModelConfig::default()
    };
    config.transfer.scheme = "handcraft+semantic+learnable+feature+attention".parse()?;
    let channels = 3;
    let domains = ["coarse".to_string(), "fine".to_string()];
    let model = GraphonomyModel::new(
        config,
        channels,
        &domains,
        Knowledge {
            taxonomy: &taxonomy,
            embeddings: Some(&table),
        },
        rng,
    )?;
    let active = if rng.random_bool(0.5) { "coarse" } else { "fine" };
    let labels = model.domain(active)?.labels.len();
    let (h, w) = (3, 3);
    let features = Tensor::uniform(&[h, w, channels], -1.0, 1.0, rng);
    let targets: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..labels)).collect();

    let mut names = Vec::new();
    let mut inputs = Vec::new();
    let mut buffers = Vec::new();
    for (name, e) in model.params.iter() {
        if e.trainable() {
            names.push(name.to_string());
            inputs.push(e.value.clone());
        } else {
            buffers.push((name.to_string(), e.value.clone()));
        }
    }
    grad_check(
        |tape, x| {
            let mut vars: BTreeMap<String, Var> = names.iter().cloned().zip(x.iter().copied()).collect();
            for (name, value) in &buffers {
                vars.insert(name.clone(), tape.constant(value.clone()));
            }
            let bound = Bound::from_vars(vars);
            let logits = model.logits(tape, &bound, &features, active)?;
            tape.cross_entropy(logits, &targets)
        },
        &inputs,
        STEP,
        tol,
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct PathReport {
    pub path: GradPath,
    pub instances: usize,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

impl PathReport {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Checks `path` on `instances` random problems drawn from `seed`.
pub fn check_path(path: GradPath, instances: usize, seed: u64, tol: f64) -> Result<PathReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    let mut report = GradCheckReport::empty(tol);
    for _ in 0..instances {
        let r = match path {
            GradPath::Projection => check_projection(&mut rng, tol)?,
            GradPath::Intra => check_intra(&mut rng, tol)?,
            GradPath::TransferFeature => check_transfer(Scheme::Feature, &mut rng, tol)?,
            GradPath::TransferLearnable => check_transfer(Scheme::Learnable, &mut rng, tol)?,
            GradPath::TransferAttention => check_transfer(Scheme::Attention, &mut rng, tol)?,
            GradPath::Attention => check_attention(&mut rng, tol)?,
            GradPath::Composite => check_composite(&mut rng, tol)?,
        };
        report.merge(r);
    }
    Ok(PathReport {
        path,
        instances,
        report,
    })
}

pub fn check_paths(paths: &[GradPath], instances: usize, seed: u64, tol: f64) -> Result<Vec<PathReport>> {
    paths.iter().map(|&p| check_path(p, instances, seed, tol)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_names_round_trip() {
        for p in GradPath::ALL {
            assert_eq!(p.as_str().parse::<GradPath>().unwrap(), p);
        }
        assert!("bogus".parse::<GradPath>().is_err());
    }

    #[test]
    fn every_path_passes_on_a_few_instances() {
        for p in GradPath::ALL {
            let r = check_path(p, 3, 7, DEFAULT_TOL).unwrap();
            assert!(r.passed(), "{p}: {:?}", r.report.failures.first());
            assert!(r.report.checked > 0, "{p}");
        }
    }

    #[test]
    fn impossible_tolerance_fails() {
        let r = check_path(GradPath::Intra, 2, 7, 1e-12).unwrap();
        assert!(!r.passed());
    }
}

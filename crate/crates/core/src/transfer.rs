//! Transfer of node features between the graphs of two label domains:
//! `Z_t ← Z_t + σ(A_tr·Z_s·W_tr)`, with `A_tr` built by one scheme or the
//! mean of several.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::reasoning::pair_attention;
use crate::tensor::Tensor;

/// Zero-norm guard in cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scheme {
    Handcraft,
    Learnable,
    Feature,
    Semantic,
    Attention,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Handcraft => "handcraft",
            Scheme::Learnable => "learnable",
            Scheme::Feature => "feature",
            Scheme::Semantic => "semantic",
            Scheme::Attention => "attention",
        }
    }

    /// Whether the scheme always yields rows summing to one.
    pub fn is_row_stochastic(self) -> bool {
        matches!(self, Scheme::Feature | Scheme::Semantic | Scheme::Attention)
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "handcraft" => Scheme::Handcraft,
            "learnable" => Scheme::Learnable,
            "feature" | "feature_similarity" => Scheme::Feature,
            "semantic" | "semantic_similarity" => Scheme::Semantic,
            "attention" => Scheme::Attention,
            other => return Err(Error::Config(format!("unknown transfer scheme '{other}'"))),
        })
    }
}

/// A transfer-matrix recipe: no scheme (transfer off), one scheme, or the
/// elementwise mean of several. Written as `none`, `feature`,
/// `feature+semantic`, ...
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SchemeSet(Vec<Scheme>);

impl SchemeSet {
    pub fn new(mut schemes: Vec<Scheme>) -> Self {
        schemes.sort();
        schemes.dedup();
        Self(schemes)
    }

    pub fn none() -> Self {
        Self(Vec::new())
    }

    pub fn single(s: Scheme) -> Self {
        Self(vec![s])
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, s: Scheme) -> bool {
        self.0.contains(&s)
    }

    pub fn schemes(&self) -> &[Scheme] {
        &self.0
    }
}

impl FromStr for SchemeSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::none());
        }
        let schemes = s.split('+').map(str::parse).collect::<Result<Vec<_>>>()?;
        Ok(Self::new(schemes))
    }
}

impl fmt::Display for SchemeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.0.iter().map(|s| s.as_str()).collect();
        f.write_str(&names.join("+"))
    }
}

impl Serialize for SchemeSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SchemeSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Initial learnable transfer matrix, uniform in `[0, 2/N_s]`.
pub fn init_learnable<R: Rng + ?Sized>(nt: usize, ns: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[nt, ns], 0.0, 2.0 / ns.max(1) as f64, rng)
}

/// Softmax over source nodes of the cosine similarity between target and
/// source node features. Rows index targets, columns index sources.
pub fn feature_similarity_matrix(tape: &mut Tape, z_t: Var, z_s: Var) -> Result<Var> {
    let dt = tape.value(z_t).cols();
    let ds = tape.value(z_s).cols();
    if dt != ds {
        return Err(Error::shape(
            "feature_similarity",
            tape.value(z_t).shape(),
            tape.value(z_s).shape(),
        ));
    }
    let nt = tape.normalize_rows(z_t, COSINE_EPS)?;
    let ns = tape.normalize_rows(z_s, COSINE_EPS)?;
    let nst = tape.transpose(ns)?;
    let sims = tape.matmul(nt, nst)?;
    tape.softmax_rows(sims)
}

/// What each scheme needs to build its matrix for one direction
/// (source → target).
#[derive(Clone, Debug, Default)]
pub struct TransferContext<'a> {
    pub handcraft: Option<&'a Tensor>,
    pub semantic: Option<&'a Tensor>,
    pub learnable: Option<Var>,
    pub attention: Option<Var>,
    pub attention_slope: f64,
}

fn missing(s: Scheme) -> Error {
    Error::Config(format!(
        "transfer scheme '{}' is missing its inputs",
        s.as_str()
    ))
}

/// Builds the `N_t×N_s` transfer matrix for the current node features.
pub fn build_transfer(
    tape: &mut Tape,
    schemes: &SchemeSet,
    z_t: Var,
    z_s: Var,
    ctx: &TransferContext<'_>,
) -> Result<Var> {
    if schemes.is_empty() {
        return Err(Error::Config("no transfer scheme selected".into()));
    }
    let nt = tape.value(z_t).rows();
    let ns = tape.value(z_s).rows();
    let mut members = Vec::with_capacity(schemes.0.len());
    for &s in schemes.schemes() {
        let m = match s {
            Scheme::Handcraft => tape.constant(ctx.handcraft.ok_or_else(|| missing(s))?.clone()),
            Scheme::Semantic => tape.constant(ctx.semantic.ok_or_else(|| missing(s))?.clone()),
            Scheme::Learnable => ctx.learnable.ok_or_else(|| missing(s))?,
            Scheme::Feature => feature_similarity_matrix(tape, z_t, z_s)?,
            Scheme::Attention => {
                let w = ctx.attention.ok_or_else(|| missing(s))?;
                pair_attention(tape, z_t, z_s, w, ctx.attention_slope, None)?
            }
        };
        let shape = tape.value(m).shape();
        if shape != [nt, ns] {
            return Err(Error::shape("build_transfer", shape, &[nt, ns]));
        }
        members.push(m);
    }
    let mut acc = members[0];
    for &m in &members[1..] {
        acc = tape.add(acc, m)?;
    }
    if members.len() > 1 {
        acc = tape.scale(acc, 1.0 / members.len() as f64);
    }
    Ok(acc)
}

/// `Z_t + σ(A_tr·Z_s·W_tr)`. The source is only read.
pub fn inter_transfer(
    tape: &mut Tape,
    z_t: Var,
    z_s: Var,
    a_tr: Var,
    w_tr: Var,
    activation: Activation,
) -> Result<Var> {
    let az = tape.matmul(a_tr, z_s)?;
    let azw = tape.matmul(az, w_tr)?;
    let msg = tape.activation(azw, activation)?;
    tape.add(z_t, msg)
}

/// One direction of transfer with everything needed to build `A_tr`.
#[derive(Clone, Debug)]
pub struct TransferEdge<'a> {
    pub schemes: &'a SchemeSet,
    pub ctx: TransferContext<'a>,
    pub w_tr: Var,
    pub activation: Activation,
}

pub fn transfer_into(
    tape: &mut Tape,
    target: Var,
    source: Var,
    edge: &TransferEdge<'_>,
) -> Result<Var> {
    let a_tr = build_transfer(tape, edge.schemes, target, source, &edge.ctx)?;
    inter_transfer(tape, target, source, a_tr, edge.w_tr, edge.activation)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    /// Both directions read the pre-step states.
    #[default]
    Synchronous,
    /// `a` updates first and `b` reads the updated `a`.
    Sequential,
}

/// Exchanges messages between two graphs in both directions.
pub fn bidirectional_step(
    tape: &mut Tape,
    a: Var,
    b: Var,
    a_from_b: &TransferEdge<'_>,
    b_from_a: &TransferEdge<'_>,
    order: UpdateOrder,
) -> Result<(Var, Var)> {
    let a_next = transfer_into(tape, a, b, a_from_b)?;
    let a_seen_by_b = match order {
        UpdateOrder::Synchronous => a,
        UpdateOrder::Sequential => a_next,
    };
    let b_next = transfer_into(tape, b, a_seen_by_b, b_from_a)?;
    Ok((a_next, b_next))
}

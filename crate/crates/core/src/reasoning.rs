//! Graph convolution within one domain's graph, and attention-derived
//! adjacency for graphs whose node set is not fixed.

use rand::Rng;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::projection::fan_in_uniform;
use crate::tensor::Tensor;

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` with `D̃` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let (n, m) = a.expect_matrix("normalize_adjacency")?;
    if n != m {
        return Err(Error::shape("normalize_adjacency", a.shape(), &[n, n]));
    }
    for i in 0..n {
        for j in 0..n {
            if a.get(i, j) != a.get(j, i) {
                return Err(Error::Contract(format!(
                    "adjacency is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut with_loops = a.clone();
    for i in 0..n {
        with_loops.set(i, i, a.get(i, i) + 1.0);
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / with_loops.row(i).iter().sum::<f64>().sqrt())
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, inv_sqrt[i] * with_loops.get(i, j) * inv_sqrt[j]);
        }
    }
    Ok(out)
}

/// `T` square `D×D` graph-convolution weights, applied in order.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnStack {
    pub layers: Vec<Tensor>,
    pub activation: Activation,
}

impl GcnStack {
    pub fn init<R: Rng + ?Sized>(dim: usize, layers: usize, rng: &mut R) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("a GCN stack needs at least one layer".into()));
        }
        Ok(Self {
            layers: (0..layers)
                .map(|_| fan_in_uniform(&[dim, dim], rng))
                .collect(),
            activation: Activation::Relu,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.layers.iter().map(|w| tape.param(w.clone())).collect()
    }
}

/// One propagation `σ(Â·Z·W)`.
pub fn gcn_layer(
    tape: &mut Tape,
    z: Var,
    adjacency: Var,
    weight: Var,
    activation: Activation,
) -> Result<Var> {
    let n = tape.value(z).rows();
    let ash = tape.value(adjacency).shape().to_vec();
    if ash != [n, n] {
        return Err(Error::shape("gcn_layer (Â·Z)", &ash, tape.value(z).shape()));
    }
    let az = tape.matmul(adjacency, z)?;
    let azw = tape.matmul(az, weight)?;
    tape.activation(azw, activation)
}

/// Applies every layer of the stack in turn.
pub fn intra_reason(
    tape: &mut Tape,
    z: Var,
    adjacency: Var,
    layers: &[Var],
    activation: Activation,
) -> Result<Var> {
    layers
        .iter()
        .try_fold(z, |z, &w| gcn_layer(tape, z, adjacency, w, activation))
}

/// `2D×1` scorer over concatenated node pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_att: Tensor,
    pub slope: f64,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            w_att: fan_in_uniform(&[2 * dim, 1], rng),
            slope: Activation::DEFAULT_LEAKY_SLOPE,
        }
    }
}

/// Scores `e_ij = δ(Wᵀ[q_i ‖ k_j])` softmaxed over `j` within `mask`.
///
/// The score is evaluated as `q_i·W[..D] + k_j·W[D..]`, which is the same
/// linear form as scoring the explicit concatenation.
pub fn pair_attention(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    w_att: Var,
    slope: f64,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = tape.value(queries).cols();
    let dk = tape.value(keys).cols();
    let wsh = tape.value(w_att).shape().to_vec();
    if d != dk || wsh != [2 * d, 1] {
        return Err(Error::shape("pair_attention", &wsh, &[d + dk, 1]));
    }
    let w_q = tape.slice_rows(w_att, 0, d)?;
    let w_k = tape.slice_rows(w_att, d, 2 * d)?;
    let sq = tape.matmul(queries, w_q)?;
    let sk = tape.matmul(keys, w_k)?;
    let scores = tape.outer_add(sq, sk)?;
    let scores = tape.leaky_relu(scores, slope)?;
    tape.masked_softmax_rows(scores, mask)
}

/// Row-stochastic `N×N` attention over a graph's own nodes.
pub fn attention_adjacency(
    tape: &mut Tape,
    z: Var,
    w_att: Var,
    slope: f64,
    neighborhood: Option<&[bool]>,
) -> Result<Var> {
    pair_attention(tape, z, z, w_att, slope, neighborhood)
}

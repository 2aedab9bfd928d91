//! Pixel features ⇄ semantic graph nodes.
//!
//! [`project`] computes `Z = (X·P)ᵀ·X·W1` for a feature map reshaped to
//! `HW×C`, caching the soft assignment `X1 = X·P` so [`reproject`] can route
//! evolved node features back onto the pixels as `X + X1·(Zᵉ·W_re)`.
//! The instance path pools features over boxes instead of learning an
//! assignment.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Trainable matrices of one domain's projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    /// `C×N` soft pixel-to-node assignment.
    pub p: Tensor,
    /// `C×D` feature transform.
    pub w1: Tensor,
    /// `D×C` re-projection transform.
    pub w_re: Tensor,
}

impl ProjectionParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, nodes: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            p: fan_in_uniform(&[channels, nodes], rng),
            w1: fan_in_uniform(&[channels, dim], rng),
            w_re: fan_in_uniform(&[dim, channels], rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Projection {
        Projection {
            p: tape.param(self.p.clone()),
            w1: tape.param(self.w1.clone()),
            w_re: tape.param(self.w_re.clone()),
        }
    }
}

/// Uniform in `[-1/√fan_in, 1/√fan_in]`, with `fan_in = shape[0]`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let bound = 1.0 / (shape[0].max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Projection matrices as they sit on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub p: Var,
    pub w1: Var,
    pub w_re: Var,
}

#[derive(Clone, Debug)]
pub struct SemanticGraph {
    pub domain: String,
    /// `N×D` node features.
    pub z: Var,
    /// Cached `HW×N` assignment `X1`, present when built by [`project`].
    pub assignment: Option<Var>,
}

/// How the pixel sum inside `X1ᵀ·X` is scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelPooling {
    /// Plain matrix product, a sum over all `HW` pixels.
    Sum,
    /// The sum divided by `HW`, keeping node magnitudes independent of the
    /// map size.
    #[default]
    Mean,
}

/// Flattens `H×W×C` (or an existing `HW×C`) to `HW×C`.
pub fn flatten_pixels(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    match shape.len() {
        2 => Ok(x),
        3 => tape.reshape(x, &[shape[0] * shape[1], shape[2]]),
        _ => Err(Error::Input(format!(
            "feature map must be H×W×C or HW×C, got {shape:?}"
        ))),
    }
}

pub fn project(
    tape: &mut Tape,
    x: Var,
    params: &Projection,
    domain: &str,
    pooling: PixelPooling,
) -> Result<SemanticGraph> {
    let flat = flatten_pixels(tape, x)?;
    let (hw, c) = (tape.value(flat).rows(), tape.value(flat).cols());
    let p_shape = tape.value(params.p).shape().to_vec();
    if p_shape[0] != c {
        return Err(Error::shape("project (X·P)", &[hw, c], &p_shape));
    }
    let x1 = tape.matmul(flat, params.p)?;
    let x1t = tape.transpose(x1)?;
    let mut x2 = tape.matmul(x1t, flat)?;
    if pooling == PixelPooling::Mean && hw > 0 {
        x2 = tape.scale(x2, 1.0 / hw as f64);
    }
    let z = tape.matmul(x2, params.w1)?;
    Ok(SemanticGraph {
        domain: domain.to_string(),
        z,
        assignment: Some(x1),
    })
}

/// `Pᵀ·(Xᵀ·X)·W1` evaluated right-to-left through the `C×C` Gram matrix, an
/// independent route to the value [`project`] computes.
pub fn project_closed_form(
    x: &Tensor,
    p: &Tensor,
    w1: &Tensor,
    pooling: PixelPooling,
) -> Result<Tensor> {
    let shape = x.shape();
    let flat = match shape.len() {
        3 => x.reshape(&[shape[0] * shape[1], shape[2]])?,
        _ => x.clone(),
    };
    let mut gram = flat.transpose()?.matmul(&flat)?;
    if pooling == PixelPooling::Mean && flat.rows() > 0 {
        gram = gram.scale(1.0 / flat.rows() as f64);
    }
    p.transpose()?.matmul(&gram.matmul(w1)?)
}

/// `X + reshape(X1·(Zᵉ·W_re))`, with the output shaped like `x`.
pub fn reproject(tape: &mut Tape, graph: &SemanticGraph, x: Var, w_re: Var) -> Result<Var> {
    let x1 = graph.assignment.ok_or_else(|| {
        Error::Contract(format!(
            "graph for '{}' has no cached assignment to re-project through",
            graph.domain
        ))
    })?;
    let shape = tape.value(x).shape().to_vec();
    let flat = flatten_pixels(tape, x)?;
    let node_feats = tape.matmul(graph.z, w_re)?;
    let xp = tape.matmul(x1, node_feats)?;
    let enhanced = tape.add(flat, xp)?;
    if shape.len() == 3 {
        tape.reshape(enhanced, &shape)
    } else {
        Ok(enhanced)
    }
}

/// Axis-aligned half-open pixel box `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Region {
    pub fn new(y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        Self { y0, x0, y1, x1 }
    }

    pub fn area(&self) -> usize {
        self.y1.saturating_sub(self.y0) * self.x1.saturating_sub(self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.y1 <= self.y0 || self.x1 <= self.x0 || self.y1 > h || self.x1 > w {
            return Err(Error::Input(format!(
                "degenerate or out-of-bounds box {self:?} for a {h}×{w} map"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct InstanceGraph {
    /// `N_ins×D` node features, one row per region.
    pub z: Var,
    pub regions: Vec<Region>,
}

fn map_dims(tape: &Tape, x: Var) -> Result<(usize, usize, usize)> {
    let shape = tape.value(x).shape();
    if shape.len() != 3 {
        return Err(Error::Input(format!(
            "instance projection needs an H×W×C map, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// `z_i = mean over r_i of X, times W`. Mean pooling is written as a constant
/// `N_ins×HW` averaging matrix so the tape differentiates it as a product.
pub fn instance_project(
    tape: &mut Tape,
    x: Var,
    regions: &[Region],
    w: Var,
) -> Result<InstanceGraph> {
    let (h, wd, _) = map_dims(tape, x)?;
    for r in regions {
        r.validate(h, wd)?;
    }
    let mut pool = Tensor::zeros(&[regions.len(), h * wd]);
    for (i, r) in regions.iter().enumerate() {
        let inv = 1.0 / r.area() as f64;
        for y in r.y0..r.y1 {
            for xx in r.x0..r.x1 {
                pool.set(i, y * wd + xx, inv);
            }
        }
    }
    let flat = flatten_pixels(tape, x)?;
    let pool = tape.constant(pool);
    let pooled = tape.matmul(pool, flat)?;
    let z = tape.matmul(pooled, w)?;
    Ok(InstanceGraph {
        z,
        regions: regions.to_vec(),
    })
}

/// For every pixel, the index of the last region covering it.
pub fn region_owner(regions: &[Region], h: usize, w: usize) -> Vec<Option<usize>> {
    let mut owner = vec![None; h * w];
    for (i, r) in regions.iter().enumerate() {
        for y in r.y0..r.y1.min(h) {
            for x in r.x0..r.x1.min(w) {
                owner[y * w + x] = Some(i);
            }
        }
    }
    owner
}

/// `X'(p) = X(p) ⧺ z_i` for pixels owned by region `i` (the highest index
/// wins on overlap) and `X(p) ⧺ 0` elsewhere. Output is `H×W×(C+D)`.
pub fn instance_reproject(tape: &mut Tape, graph: &InstanceGraph, x: Var) -> Result<Var> {
    let (h, w, c) = map_dims(tape, x)?;
    let zshape = tape.value(graph.z).shape().to_vec();
    if zshape[0] != graph.regions.len() {
        return Err(Error::Input(format!(
            "{} node rows for {} regions",
            zshape[0],
            graph.regions.len()
        )));
    }
    let d = zshape[1];
    let mut select = Tensor::zeros(&[h * w, graph.regions.len()]);
    for (p, owner) in region_owner(&graph.regions, h, w).into_iter().enumerate() {
        if let Some(i) = owner {
            select.set(p, i, 1.0);
        }
    }
    let flat = flatten_pixels(tape, x)?;
    let select = tape.constant(select);
    let spread = tape.matmul(select, graph.z)?;
    let joined = tape.concat_channels(flat, spread)?;
    tape.reshape(joined, &[h, w, c + d])
}

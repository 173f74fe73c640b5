//! Spatial-temporal graph convolution: a 1x1 channel map followed by a
//! normalised adjacency product, per-node temporal convolution, and batch
//! normalisation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normal_init, BufferId, Ctx, Mode, ParamId, ParamStore};
use crate::skeleton::AdjacencyMatrix;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// `y = (W x) A` per frame: `x (B, Ci, T, N)`, `weight (Co, Ci)`, `adjacency (N, N)`.
pub fn spatial_graph_conv<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, adjacency: Var) -> Result<Var> {
    let [b, _, t, n] = match *tape.shape(x) {
        [b, c, t, n] => [b, c, t, n],
        ref other => return Err(Error::shape(format!("spatial_graph_conv: expected rank-4 input, got {other:?}"))),
    };
    if tape.shape(adjacency) != [n, n] {
        return Err(Error::shape(format!(
            "spatial_graph_conv: adjacency {:?} does not match {n} nodes",
            tape.shape(adjacency)
        )));
    }
    let updated = tape.channel_map(weight, x)?;
    let co = tape.shape(updated)[1];
    let flat = tape.reshape(updated, &[b * co * t, n])?;
    let aggregated = tape.matmul(flat, adjacency)?;
    tape.reshape(aggregated, &[b, co, t, n])
}

/// Per-node temporal convolution, `weight (Co, Ci, k)` with odd `k`.
pub fn temporal_conv<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, stride: usize) -> Result<Var> {
    tape.temporal_conv(x, weight, stride)
}

/// Moments used by [`batch_normalize`].
pub enum NormStats<'a, T> {
    /// Batch statistics over (batch, frames, nodes).
    Batch,
    /// Saved running mean and variance.
    Running { mean: &'a Tensor<T>, var: &'a Tensor<T> },
}

/// Per-channel `(x - E x) / sqrt(var x + eps) * gamma + beta` over axis 1.
///
/// In batch mode also returns the (biased) batch mean and variance.
pub fn batch_normalize<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: NormStats<'_, T>,
) -> Result<(Var, Option<(Tensor<T>, Tensor<T>)>)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::shape(format!("batch_normalize: expected (batch, channels, ...), got {shape:?}")));
    }
    let c = shape[1];
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(Error::shape(format!("batch_normalize: gamma/beta must have length {c}")));
    }
    if shape[0] == 0 {
        return Err(Error::shape("batch_normalize: zero-size batch"));
    }
    match stats {
        NormStats::Batch => {
            let axes: Vec<usize> = (0..shape.len()).filter(|&d| d != 1).collect();
            let mean = tape.mean(x, &axes)?;
            let neg_mean = tape.scale(mean, -1.0)?;
            let ones = tape.leaf(Tensor::ones(&[c]));
            let centered = tape.channel_affine(x, ones, neg_mean, 1)?;
            let sq = tape.mul(centered, centered)?;
            let var = tape.mean(sq, &axes)?;
            let inv_std = tape.rsqrt(var, BN_EPS)?;
            let scale = tape.mul(inv_std, gamma)?;
            let y = tape.channel_affine(centered, scale, beta, 1)?;
            Ok((y, Some((tape.value(mean).clone(), tape.value(var).clone()))))
        }
        NormStats::Running { mean, var } => {
            if mean.shape() != [c] || var.shape() != [c] {
                return Err(Error::shape("batch_normalize: running moments have the wrong length"));
            }
            let eps = T::lit(BN_EPS);
            let inv = tape.leaf(var.map(|v| T::one() / (v + eps).sqrt()));
            let mean = tape.leaf(mean.clone());
            let scale = tape.mul(gamma, inv)?;
            let offset = tape.mul(scale, mean)?;
            let shift = tape.sub(beta, offset)?;
            Ok((tape.channel_affine(x, scale, shift, 1)?, None))
        }
    }
}

/// Spatial graph convolution layer with a fixed adjacency.
#[derive(Debug, Clone)]
pub struct GraphConv {
    weight: ParamId,
    adjacency: AdjacencyMatrix,
}

impl GraphConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        adjacency: AdjacencyMatrix,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / c_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), normal_init(&[c_out, c_in], std, rng), true);
        GraphConv { weight, adjacency }
    }

    pub fn adjacency(&self) -> &AdjacencyMatrix {
        &self.adjacency
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let a = ctx.constant(self.adjacency.to_tensor());
        let w = ctx.param(self.weight);
        spatial_graph_conv(ctx.tape, x, w, a)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), false),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        match ctx.mode {
            Mode::Train => {
                let count = {
                    let s = ctx.tape.shape(x);
                    s.iter().product::<usize>() / s[1].max(1)
                };
                let (y, moments) = batch_normalize(ctx.tape, x, gamma, beta, NormStats::Batch)?;
                let (mean, var) = moments.expect("batch statistics requested");
                let m = T::lit(BN_MOMENTUM);
                let keep = T::one() - m;
                let unbias = if count > 1 { T::lit(count as f64 / (count - 1) as f64) } else { T::one() };
                let rm = ctx.buffer(self.running_mean);
                let rv = ctx.buffer(self.running_var);
                let new_mean =
                    Tensor::from_fn(rm.shape(), |i| keep * rm.data()[i] + m * mean.data()[i]);
                let new_var =
                    Tensor::from_fn(rv.shape(), |i| keep * rv.data()[i] + m * unbias * var.data()[i]);
                ctx.moment_updates.push((self.running_mean, new_mean));
                ctx.moment_updates.push((self.running_var, new_var));
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.buffer(self.running_mean).clone();
                let var = ctx.buffer(self.running_var).clone();
                let (y, _) =
                    batch_normalize(ctx.tape, x, gamma, beta, NormStats::Running { mean: &mean, var: &var })?;
                Ok(y)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TemporalConv {
    weight: ParamId,
    stride: usize,
}

impl TemporalConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel size {kernel} must be odd")));
        }
        let std = (1.0 / (c_in * kernel) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), normal_init(&[c_out, c_in, kernel], std, rng), true);
        Ok(TemporalConv { weight, stride })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        temporal_conv(ctx.tape, x, w, self.stride)
    }
}

/// `relu(bn(tconv(relu(bn(gconv(x))))) + x)`; the skip is present when the
/// input and output shapes agree.
#[derive(Debug, Clone)]
pub struct GcnBlock {
    gconv: GraphConv,
    bn_spatial: BatchNorm,
    tconv: TemporalConv,
    bn_temporal: BatchNorm,
    skip: bool,
}

impl GcnBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        adjacency: AdjacencyMatrix,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(GcnBlock {
            gconv: GraphConv::new(store, &format!("{name}.gconv"), c_in, c_out, adjacency, rng),
            bn_spatial: BatchNorm::new(store, &format!("{name}.bn1"), c_out),
            tconv: TemporalConv::new(store, &format!("{name}.tconv"), c_out, c_out, kernel, 1, rng)?,
            bn_temporal: BatchNorm::new(store, &format!("{name}.bn2"), c_out),
            skip: c_in == c_out,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.gconv.forward(ctx, x)?;
        let h = self.bn_spatial.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let h = self.tconv.forward(ctx, h)?;
        let h = self.bn_temporal.forward(ctx, h)?;
        let h = if self.skip { ctx.tape.add(h, x)? } else { h };
        ctx.tape.relu(h)
    }
}

//! Region-aware spatial pooling and temporal average pooling.
//!
//! For a feature map `x` of shape `(B, C, T, N)` and a binary assignment
//! `P` (`N x M`), the pooled feature of region `j` at frame `t` is
//!
//! ```text
//! x_sp[t, j] = sum_i x[t, i] * (P[i, j] + R[t, i] * P[i, j])
//! R[t, i]    = sigma( mean_j <phi(x[t, i]), psi(x[t, j])> )
//! ```
//!
//! where `phi`, `psi` are learned `C -> C/r` channel maps. Temporal pooling
//! then averages non-overlapping frame pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal_init, Ctx, ParamId, ParamStore};
use crate::skeleton::AssignmentMatrix;
use crate::tensor::{Scalar, Tape, Var};

/// Normalisation applied to the mean correlation score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Tanh,
    Sigmoid,
    /// Softmax across the nodes of each frame.
    Softmax,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Normalization::Tanh),
            "sigmoid" => Ok(Normalization::Sigmoid),
            "softmax" => Ok(Normalization::Softmax),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }
}

/// Hyperparameters of one pooling site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolingConfig {
    /// Projection width is `channels / reduction`.
    pub reduction: usize,
    pub sigma: Normalization,
    /// Correlation reweighting on; off gives plain structural pooling `x P`.
    pub adaptive: bool,
    /// Keep the bare `x P` path next to the reweighted one.
    pub residual: bool,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig { reduction: 4, sigma: Normalization::Tanh, adaptive: true, residual: true }
    }
}

impl PoolingConfig {
    pub fn projection_width(&self, channels: usize) -> Result<usize> {
        if self.reduction == 0 || channels % self.reduction != 0 {
            return Err(Error::Config(format!(
                "channel count {channels} is not divisible by reduction ratio {}",
                self.reduction
            )));
        }
        Ok(channels / self.reduction)
    }
}

fn expect_rank4(tape: &Tape<impl Scalar>, x: Var, what: &str) -> Result<[usize; 4]> {
    match *tape.shape(x) {
        [b, c, t, n] => Ok([b, c, t, n]),
        ref other => Err(Error::shape(format!("{what}: expected (batch, channels, frames, nodes), got {other:?}"))),
    }
}

/// Correlation field `R` of shape `(B, T, N)`.
///
/// `w_phi` and `w_psi` are `(C/r, C)` channel maps.
pub fn correlation<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w_phi: Var,
    w_psi: Var,
    sigma: Normalization,
) -> Result<Var> {
    let [_, c, _, n] = expect_rank4(tape, x, "correlation")?;
    for w in [w_phi, w_psi] {
        if tape.shape(w).len() != 2 || tape.shape(w)[1] != c {
            return Err(Error::shape(format!(
                "correlation: projection of shape {:?} does not accept {c} channels",
                tape.shape(w)
            )));
        }
    }
    let phi = tape.channel_map(w_phi, x)?;
    let psi = tape.channel_map(w_psi, x)?;
    // mean_j <phi_i, psi_j> = <phi_i, mean_j psi_j>
    let psi_mean = tape.mean(psi, &[3])?;
    let psi_mean = tape.expand(psi_mean, 3, n)?;
    let prod = tape.mul(phi, psi_mean)?;
    let score = tape.sum(prod, &[1])?;
    match sigma {
        Normalization::Tanh => tape.tanh(score),
        Normalization::Sigmoid => tape.sigmoid(score),
        Normalization::Softmax => tape.softmax(score),
    }
}

/// Spatial pooling `x (I + diag R) P` (residual) or `x diag(R) P` (no residual);
/// plain `x P` when `r` is `None`. `assignment` is an `(N, M)` constant.
pub fn spatial_pool<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    r: Option<Var>,
    assignment: Var,
    residual: bool,
) -> Result<Var> {
    let [b, c, t, n] = expect_rank4(tape, x, "spatial_pool")?;
    let m = match *tape.shape(assignment) {
        [rows, m] if rows == n => m,
        ref other => {
            return Err(Error::shape(format!("spatial_pool: assignment {other:?} does not match {n} nodes")))
        }
    };
    let weighted = match r {
        None => x,
        Some(r) => {
            if tape.shape(r) != [b, t, n] {
                return Err(Error::shape(format!(
                    "spatial_pool: correlation {:?} does not match ({b}, {t}, {n})",
                    tape.shape(r)
                )));
            }
            let r_full = tape.expand(r, 1, c)?;
            let xr = tape.mul(x, r_full)?;
            if residual {
                tape.add(x, xr)?
            } else {
                xr
            }
        }
    };
    let flat = tape.reshape(weighted, &[b * c * t, n])?;
    let pooled = tape.matmul(flat, assignment)?;
    tape.reshape(pooled, &[b, c, t, m])
}

/// Mean of frame pairs `(x[0::2] + x[1::2]) / 2`; an odd trailing frame passes through.
pub fn temporal_pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    expect_rank4(tape, x, "temporal_pool")?;
    tape.pair_average(x, 2)
}

/// `temporal_pool(spatial_pool(x, correlation(x)))` as a functional composition.
pub fn st_pool<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weights: Option<(Var, Var)>,
    assignment: Var,
    config: &PoolingConfig,
) -> Result<Var> {
    let r = match weights {
        Some((phi, psi)) if config.adaptive => Some(correlation(tape, x, phi, psi, config.sigma)?),
        _ => None,
    };
    let sp = spatial_pool(tape, x, r, assignment, config.residual)?;
    temporal_pool(tape, sp)
}

/// A pooling site with its own projections and fixed assignment.
#[derive(Debug, Clone)]
pub struct RegionPooling {
    name: String,
    projections: Option<(ParamId, ParamId)>,
    config: PoolingConfig,
    assignment: AssignmentMatrix,
}

impl RegionPooling {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        config: PoolingConfig,
        assignment: AssignmentMatrix,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let projections = if config.adaptive {
            let width = config.projection_width(channels)?;
            let std = (1.0 / channels as f64).sqrt();
            let phi = store.add(format!("{name}.phi"), normal_init(&[width, channels], std, rng), true);
            let psi = store.add(format!("{name}.psi"), normal_init(&[width, channels], std, rng), true);
            Some((phi, psi))
        } else {
            None
        };
        Ok(RegionPooling { name: name.to_string(), projections, config, assignment })
    }

    pub fn assignment(&self) -> &AssignmentMatrix {
        &self.assignment
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let p = ctx.constant(self.assignment.to_tensor());
        let r = match self.projections {
            Some((phi, psi)) => {
                let (phi, psi) = (ctx.param(phi), ctx.param(psi));
                let r = correlation(ctx.tape, x, phi, psi, self.config.sigma)?;
                ctx.record_attention(&self.name, r);
                Some(r)
            }
            None => None,
        };
        let sp = spatial_pool(ctx.tape, x, r, p, self.config.residual)?;
        temporal_pool(ctx.tape, sp)
    }
}

//! Light and heavy network assembly, FLOPs accounting and checkpoints.

mod checkpoint;
mod flops;

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{ClassifierHead, CrossFusion, CrossFusionSpec, FusionMode, InformationSupplement};
use crate::error::{Error, Result};
use crate::gcn::{BatchNorm, GcnBlock, GraphConv};
use crate::nn::{AttentionRecord, Ctx, Mode, ParamStore};
use crate::pooling::{Normalization, PoolingConfig, RegionPooling};
use crate::skeleton::{
    build_assignment, coarsen_adjacency, normalized_adjacency, AdjacencyMatrix, AssignmentMatrix, SkeletonTopology,
    TopologyRef,
};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use flops::{count_flops, FlopsEntry, FlopsReport};

pub const STAGES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Light,
    Heavy,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "light" => Ok(Variant::Light),
            "heavy" => Ok(Variant::Heavy),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected light or heavy)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub topology: TopologyRef,
    /// Output channels of the three stages.
    pub channels: Vec<usize>,
    /// 1-based stages that pool; the others keep the graph and frame count.
    pub pooling_locations: Vec<usize>,
    pub reduction: usize,
    pub sigma: Normalization,
    pub adaptive: bool,
    pub residual: bool,
    pub fusion_weight: f64,
    pub fusion_mode: FusionMode,
    pub temporal_kernel: usize,
    pub classes: usize,
    pub frames: usize,
    pub ism: bool,
    pub ism_width: usize,
    pub ism_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Light,
            topology: TopologyRef::default(),
            channels: vec![64, 128, 256],
            pooling_locations: vec![1, 2, 3],
            reduction: 4,
            sigma: Normalization::Tanh,
            adaptive: true,
            residual: true,
            fusion_weight: 0.5,
            fusion_mode: FusionMode::Sum,
            temporal_kernel: 9,
            classes: 60,
            frames: 64,
            ism: true,
            ism_width: 32,
            ism_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn pooling(&self) -> PoolingConfig {
        PoolingConfig { reduction: self.reduction, sigma: self.sigma, adaptive: self.adaptive, residual: self.residual }
    }

    /// Width of the stem output feeding stage 1.
    pub fn stem_width(&self) -> usize {
        if self.ism {
            2 * self.ism_width
        } else {
            64
        }
    }

    /// Same network with every pooling location removed.
    pub fn no_pooling_control(&self) -> ModelConfig {
        ModelConfig { variant: Variant::Light, pooling_locations: Vec::new(), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channels.len() != STAGES {
            return bad(format!("channel plan needs {STAGES} entries, got {}", self.channels.len()));
        }
        if self.channels.contains(&0) || self.ism_width == 0 {
            return bad("channel counts must be positive".into());
        }
        let mut seen = [false; STAGES];
        for &loc in &self.pooling_locations {
            if !(1..=STAGES).contains(&loc) {
                return bad(format!("pooling location {loc} outside 1..={STAGES}"));
            }
            if std::mem::replace(&mut seen[loc - 1], true) {
                return bad(format!("pooling location {loc} listed twice"));
            }
        }
        if self.variant == Variant::Heavy && self.pooling_locations.is_empty() {
            return bad("the heavy variant fuses pooled and fine branches and needs a pooling location".into());
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return bad(format!("fusion weight {} outside [0, 1]", self.fusion_weight));
        }
        if self.temporal_kernel % 2 == 0 {
            return bad(format!("temporal kernel {} must be odd", self.temporal_kernel));
        }
        if self.classes == 0 || self.frames == 0 {
            return bad("class and frame counts must be positive".into());
        }
        if self.reduction == 0 {
            return bad("reduction ratio must be positive".into());
        }
        Ok(())
    }
}

/// Shapes and graphs of one stage, shared by the builder and the FLOPs counter.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub c_in: usize,
    pub c_out: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    /// Effective assignment when the stage pools (skipped stages composed in).
    pub assignment: Option<AssignmentMatrix>,
    pub adj_in: AdjacencyMatrix,
    pub adj_out: AdjacencyMatrix,
}

pub fn plan_stages(config: &ModelConfig, topology: &SkeletonTopology) -> Result<Vec<StagePlan>> {
    config.validate()?;
    let scheme = &topology.partition.stages;
    let mut adj = normalized_adjacency(topology);
    let mut n = topology.node_count;
    let mut t = config.frames;
    let mut carry = AssignmentMatrix::identity(n);
    let mut c_in = config.stem_width();
    let mut plans = Vec::with_capacity(STAGES);
    for stage in 0..STAGES {
        let c_out = config.channels[stage];
        let pools = config.pooling_locations.contains(&(stage + 1));
        let assignment = match scheme.get(stage) {
            Some(partition) => Some(carry.compose(&build_assignment(partition)?)?),
            None if pools => {
                return Err(Error::Config(format!(
                    "topology `{}` has no partition for pooling stage {}",
                    topology.name,
                    stage + 1
                )))
            }
            None => None,
        };
        if pools {
            let p = assignment.expect("checked above");
            let coarse = coarsen_adjacency(&adj, &p)?;
            let (n_out, t_out) = (p.cols(), t.div_ceil(2));
            plans.push(StagePlan {
                c_in,
                c_out,
                n_in: n,
                n_out,
                t_in: t,
                t_out,
                assignment: Some(p),
                adj_in: adj.clone(),
                adj_out: coarse.clone(),
            });
            adj = coarse;
            n = n_out;
            t = t_out;
            carry = AssignmentMatrix::identity(n);
        } else {
            if let Some(p) = assignment {
                carry = p;
            }
            plans.push(StagePlan {
                c_in,
                c_out,
                n_in: n,
                n_out: n,
                t_in: t,
                t_out: t,
                assignment: None,
                adj_in: adj.clone(),
                adj_out: adj.clone(),
            });
        }
        c_in = c_out;
    }
    Ok(plans)
}

#[derive(Debug, Clone)]
enum Stem {
    Ism(InformationSupplement),
    Plain { bn: BatchNorm, conv: GraphConv },
}

#[derive(Debug, Clone)]
enum Stage {
    Plain(GcnBlock),
    Light { pool: RegionPooling, block: GcnBlock },
    Heavy(CrossFusion),
}

/// Network parameters plus the layer graph that consumes them.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    topology: SkeletonTopology,
    plans: Vec<StagePlan>,
    stem: Stem,
    stages: Vec<Stage>,
    head: ClassifierHead,
    store: ParamStore<T>,
}

/// Builds a model with parameters drawn deterministically from `seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let topology = config.topology.resolve()?;
    let plans = plan_stages(config, &topology)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let fine = normalized_adjacency(&topology);
    let stem = if config.ism {
        Stem::Ism(InformationSupplement::new(
            &mut store,
            "ism",
            &topology,
            &fine,
            config.ism_width,
            config.ism_norm,
            &mut rng,
        )?)
    } else {
        Stem::Plain {
            bn: BatchNorm::new(&mut store, "stem.bn", 3),
            conv: GraphConv::new(&mut store, "stem.gconv", 3, config.stem_width(), fine, &mut rng),
        }
    };
    let k = config.temporal_kernel;
    let mut stages = Vec::with_capacity(STAGES);
    for (i, plan) in plans.iter().enumerate() {
        let name = format!("stage{}", i + 1);
        let stage = match (&plan.assignment, config.variant) {
            (None, _) => Stage::Plain(GcnBlock::new(
                &mut store,
                &format!("{name}.gcn"),
                plan.c_in,
                plan.c_out,
                k,
                plan.adj_in.clone(),
                &mut rng,
            )?),
            (Some(p), Variant::Light) => {
                let pool =
                    RegionPooling::new(&mut store, &format!("{name}.pool"), plan.c_in, config.pooling(), p.clone(), &mut rng)?;
                let block = GcnBlock::new(
                    &mut store,
                    &format!("{name}.gcn"),
                    plan.c_in,
                    plan.c_out,
                    k,
                    plan.adj_out.clone(),
                    &mut rng,
                )?;
                Stage::Light { pool, block }
            }
            (Some(p), Variant::Heavy) => Stage::Heavy(CrossFusion::new(
                &mut store,
                &format!("{name}.cfb"),
                CrossFusionSpec {
                    c_in: plan.c_in,
                    c_out: plan.c_out,
                    kernel: k,
                    pooling: config.pooling(),
                    assignment: p,
                    fine_adjacency: &plan.adj_in,
                    coarse_adjacency: &plan.adj_out,
                    weight: config.fusion_weight,
                    mode: config.fusion_mode,
                },
                &mut rng,
            )?),
        };
        stages.push(stage);
    }
    let head = ClassifierHead::new(&mut store, "head", config.channels[STAGES - 1], config.classes);
    Ok(Model { config: config.clone(), topology, plans, stem, stages, head, store })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topology
    }

    pub fn plans(&self) -> &[StagePlan] {
        &self.plans
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Node count after the stem and after each stage.
    pub fn node_trajectory(&self) -> Vec<usize> {
        std::iter::once(self.topology.node_count).chain(self.plans.iter().map(|p| p.n_out)).collect()
    }

    /// Records the forward pass for `x (B, 3, T, N)` and returns logits `(B, K)`.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let n = self.topology.node_count;
        match *ctx.tape.shape(x) {
            [_, 3, t, nodes] if t == self.config.frames && nodes == n => {}
            ref other => {
                return Err(Error::shape(format!(
                    "model input {other:?} does not match (B, 3, {}, {n})",
                    self.config.frames
                )))
            }
        }
        let mut h = match &self.stem {
            Stem::Ism(ism) => ism.forward(ctx, x)?,
            Stem::Plain { bn, conv } => {
                let normed = bn.forward(ctx, x)?;
                let y = conv.forward(ctx, normed)?;
                ctx.tape.relu(y)?
            }
        };
        let last = self.stages.len() - 1;
        for (i, stage) in self.stages.iter().enumerate() {
            h = match stage {
                Stage::Plain(block) => block.forward(ctx, h)?,
                Stage::Light { pool, block } => {
                    let pooled = pool.forward(ctx, h)?;
                    block.forward(ctx, pooled)?
                }
                Stage::Heavy(cfb) if i == last => {
                    // the final fusion happens on globally pooled features
                    let (coarse, fine) = cfb.branches(ctx, h)?;
                    let gc = ctx.tape.mean(coarse, &[2, 3])?;
                    let gf = ctx.tape.mean(fine, &[2, 3])?;
                    let fused = cfb.fuse(ctx, gc, gf)?;
                    return self.head.forward_pooled(ctx, fused);
                }
                Stage::Heavy(cfb) => cfb.forward(ctx, h)?,
            };
        }
        self.head.forward(ctx, h)
    }

    /// Eval-mode logits for a batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Eval);
        let xv = ctx.constant(x.clone());
        let y = self.forward(&mut ctx, xv)?;
        Ok(ctx.tape.value(y).clone())
    }

    /// Eval-mode logits plus every pooling site's correlation field.
    pub fn attention(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<AttentionRecord<T>>)> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Eval);
        ctx.capture_attention();
        let xv = ctx.constant(x.clone());
        let y = self.forward(&mut ctx, xv)?;
        let records = ctx.take_attention();
        Ok((ctx.tape.value(y).clone(), records))
    }
}

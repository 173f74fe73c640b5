//! Composite modules: cross fusion block, information supplement module,
//! bone and motion features, and the classification head.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::{BatchNorm, GcnBlock, GraphConv};
use crate::nn::{normal_init, Ctx, ParamId, ParamStore};
use crate::pooling::{PoolingConfig, RegionPooling};
use crate::skeleton::{AdjacencyMatrix, AssignmentMatrix, SkeletonTopology};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Sum,
    Concat,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(FusionMode::Sum),
            "concat" => Ok(FusionMode::Concat),
            other => Err(Error::Config(format!("unknown fusion mode `{other}` (expected sum or concat)"))),
        }
    }
}

/// `(N, N)` matrix `D` with `(x D)_i = x_i - x_parent(i)`; the root column is zero.
pub fn bone_matrix(topology: &SkeletonTopology) -> Result<Vec<f64>> {
    let parents = topology
        .parents
        .as_ref()
        .ok_or_else(|| Error::Topology(format!("topology `{}` has no parent map", topology.name)))?;
    let n = topology.node_count;
    let mut d = vec![0.0; n * n];
    for (i, parent) in parents.iter().enumerate() {
        if let Some(p) = *parent {
            d[i * n + i] = 1.0;
            d[p * n + i] = -1.0;
        }
    }
    Ok(d)
}

fn node_matmul<T: Scalar>(tape: &mut Tape<T>, x: Var, matrix: Var, what: &str) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n = *shape.last().ok_or_else(|| Error::shape(format!("{what}: scalar input")))?;
    let m = tape.shape(matrix)[1];
    let flat = tape.reshape(x, &[shape.iter().product::<usize>() / n.max(1), n])?;
    let y = tape.matmul(flat, matrix)?;
    let mut out = shape;
    *out.last_mut().unwrap() = m;
    tape.reshape(y, &out)
}

/// Bone vectors `x_i - x_parent(i)` for `x (B, C, T, N)`; the root gets zero.
pub fn bone_features<T: Scalar>(tape: &mut Tape<T>, x: Var, topology: &SkeletonTopology) -> Result<Var> {
    let n = topology.node_count;
    if tape.shape(x).last() != Some(&n) {
        return Err(Error::shape(format!(
            "bone_features: input {:?} does not have {n} nodes",
            tape.shape(x)
        )));
    }
    let d = Tensor::from_f64(&[n, n], &bone_matrix(topology)?)?;
    let d = tape.leaf(d);
    node_matmul(tape, x, d, "bone_features")
}

/// Frame differences `x[t+1] - x[t]` along axis 2 with the final frame zero.
pub fn motion_features<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let [b, c, t, n] = match *tape.shape(x) {
        [b, c, t, n] => [b, c, t, n],
        ref other => return Err(Error::shape(format!("motion_features: expected rank 4, got {other:?}"))),
    };
    // column s of D picks x[s+1] - x[s]
    let mut d = vec![0.0; t * t];
    for s in 0..t.saturating_sub(1) {
        d[(s + 1) * t + s] = 1.0;
        d[s * t + s] = -1.0;
    }
    let d = tape.leaf(Tensor::from_f64(&[t, t], &d)?);
    let moved = tape.permute(x, &[0, 1, 3, 2])?;
    let flat = tape.reshape(moved, &[b * c * n, t])?;
    let diff = tape.matmul(flat, d)?;
    let diff = tape.reshape(diff, &[b, c, n, t])?;
    tape.permute(diff, &[0, 1, 3, 2])
}

fn eager<T: Scalar>(x: &Tensor<T>, f: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = f(&mut tape, v)?;
    Ok(tape.value(y).clone())
}

/// [`bone_features`] on a plain tensor.
pub fn bones_of<T: Scalar>(x: &Tensor<T>, topology: &SkeletonTopology) -> Result<Tensor<T>> {
    eager(x, |tape, v| bone_features(tape, v, topology))
}

/// [`motion_features`] on a plain tensor.
pub fn motion_of<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    eager(x, motion_features)
}

/// `s * h + (1 - s) * e`.
pub fn weighted_fusion<T: Scalar>(tape: &mut Tape<T>, h: Var, e: Var, s: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Config(format!("fusion weight {s} outside [0, 1]")));
    }
    let hs = tape.scale(h, s)?;
    let es = tape.scale(e, 1.0 - s)?;
    tape.add(hs, es)
}

/// Mean over frames and nodes followed by `v W + b`; `weight (C, K)`, `bias (K)`.
pub fn classifier_head<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let pooled = tape.mean(x, &[2, 3])?;
    linear(tape, pooled, weight, bias)
}

fn linear<T: Scalar>(tape: &mut Tape<T>, v: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(v, weight)?;
    let k = tape.shape(bias)[0];
    let ones = tape.leaf(Tensor::ones(&[k]));
    tape.channel_affine(y, ones, bias, 1)
}

/// Global average pooling plus a fully connected layer, zero-initialised.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    weight: ParamId,
    bias: ParamId,
}

impl ClassifierHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, classes: usize) -> Self {
        ClassifierHead {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[channels, classes]), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[classes]), false),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        classifier_head(ctx.tape, x, w, b)
    }

    /// Head applied to already pooled `(B, C)` features.
    pub fn forward_pooled<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, v: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        linear(ctx.tape, v, w, b)
    }
}

#[derive(Debug, Clone)]
struct Embedding {
    norm: Option<BatchNorm>,
    first: GraphConv,
    second: GraphConv,
}

impl Embedding {
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let x = match &self.norm {
            Some(bn) => bn.forward(ctx, x)?,
            None => x,
        };
        let h = self.first.forward(ctx, x)?;
        let h = ctx.tape.relu(h)?;
        self.second.forward(ctx, h)
    }
}

/// Embeds joint positions and bone vectors separately and concatenates them.
#[derive(Debug, Clone)]
pub struct InformationSupplement {
    bones: Vec<f64>,
    nodes: usize,
    bone_stream: Embedding,
    position_stream: Embedding,
}

impl InformationSupplement {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        topology: &SkeletonTopology,
        adjacency: &AdjacencyMatrix,
        width: usize,
        normalize: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bones = bone_matrix(topology)?;
        let mut stream = |label: &str| Embedding {
            norm: normalize.then(|| BatchNorm::new(store, &format!("{name}.{label}.bn"), 3)),
            first: GraphConv::new(store, &format!("{name}.{label}.gconv1"), 3, width, adjacency.clone(), rng),
            second: GraphConv::new(store, &format!("{name}.{label}.gconv2"), width, width, adjacency.clone(), rng),
        };
        let bone_stream = stream("bone");
        let position_stream = stream("joint");
        Ok(InformationSupplement { bones, nodes: topology.node_count, bone_stream, position_stream })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let n = self.nodes;
        if ctx.tape.shape(x).len() != 4 || ctx.tape.shape(x)[1] != 3 || ctx.tape.shape(x)[3] != n {
            return Err(Error::shape(format!(
                "information_supplement: expected (B, 3, T, {n}), got {:?}",
                ctx.tape.shape(x)
            )));
        }
        let d = ctx.constant(Tensor::from_f64(&[n, n], &self.bones)?);
        let bones = node_matmul(ctx.tape, x, d, "information_supplement")?;
        let vec_stream = self.bone_stream.forward(ctx, bones)?;
        let pos_stream = self.position_stream.forward(ctx, x)?;
        ctx.tape.concat(&[vec_stream, pos_stream], 1)
    }
}

/// Coarse branch `gcn(pool(x))` and fine branch `pool(gcn(x))`, fused.
#[derive(Debug, Clone)]
pub struct CrossFusion {
    pool_in: RegionPooling,
    coarse: GcnBlock,
    fine: GcnBlock,
    pool_out: RegionPooling,
    weight: f64,
    mode: FusionMode,
    projection: Option<ParamId>,
}

pub struct CrossFusionSpec<'a> {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub pooling: PoolingConfig,
    pub assignment: &'a AssignmentMatrix,
    pub fine_adjacency: &'a AdjacencyMatrix,
    pub coarse_adjacency: &'a AdjacencyMatrix,
    pub weight: f64,
    pub mode: FusionMode,
}

impl CrossFusion {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: CrossFusionSpec<'_>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&spec.weight) {
            return Err(Error::Config(format!("fusion weight {} outside [0, 1]", spec.weight)));
        }
        let pool_in =
            RegionPooling::new(store, &format!("{name}.pool_in"), spec.c_in, spec.pooling, spec.assignment.clone(), rng)?;
        let coarse = GcnBlock::new(
            store,
            &format!("{name}.coarse"),
            spec.c_in,
            spec.c_out,
            spec.kernel,
            spec.coarse_adjacency.clone(),
            rng,
        )?;
        let fine = GcnBlock::new(
            store,
            &format!("{name}.fine"),
            spec.c_in,
            spec.c_out,
            spec.kernel,
            spec.fine_adjacency.clone(),
            rng,
        )?;
        let pool_out = RegionPooling::new(
            store,
            &format!("{name}.pool_out"),
            spec.c_out,
            spec.pooling,
            spec.assignment.clone(),
            rng,
        )?;
        let projection = (spec.mode == FusionMode::Concat).then(|| {
            let std = (1.0 / (2 * spec.c_out) as f64).sqrt();
            store.add(format!("{name}.fuse"), normal_init(&[spec.c_out, 2 * spec.c_out], std, rng), true)
        });
        Ok(CrossFusion { pool_in, coarse, fine, pool_out, weight: spec.weight, mode: spec.mode, projection })
    }

    /// Returns `(h, e)` before fusion.
    pub fn branches<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let pooled = self.pool_in.forward(ctx, x)?;
        let h = self.coarse.forward(ctx, pooled)?;
        let refined = self.fine.forward(ctx, x)?;
        let e = self.pool_out.forward(ctx, refined)?;
        Ok((h, e))
    }

    /// Fuses two equally shaped tensors with channels on axis 1.
    pub fn fuse<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, h: Var, e: Var) -> Result<Var> {
        match (self.mode, self.projection) {
            (FusionMode::Concat, Some(w)) => {
                let joined = ctx.tape.concat(&[h, e], 1)?;
                let w = ctx.param(w);
                ctx.tape.channel_map(w, joined)
            }
            _ => weighted_fusion(ctx.tape, h, e, self.weight),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (h, e) = self.branches(ctx, x)?;
        self.fuse(ctx, h, e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::skeleton::{build_assignment, builtin, coarsen_adjacency, load_topology, normalized_adjacency, PartitionRow, TopologyDoc};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        normal_init(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn chain() -> SkeletonTopology {
        load_topology(&TopologyDoc {
            name: "chain2".into(),
            node_count: 2,
            edges: vec![[1, 2]],
            parents: Some(vec![[2, 1]]),
            stages: vec![vec![PartitionRow { members: vec![1, 2], new_id: 1 }]],
            rest_pose: None,
        })
        .unwrap()
    }

    #[test]
    fn bones_of_a_two_joint_chain() {
        // (B, C, T, N) = (1, 3, 1, 2): parent at origin, child at (1, 1, 1)
        let x = Tensor::<f64>::from_f64(&[1, 3, 1, 2], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let b = bones_of(&x, &chain()).unwrap();
        assert_eq!(b.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn bones_ignore_translation_and_zero_the_root() {
        let ntu = builtin("ntu25").unwrap();
        let x = randn(&[2, 3, 4, 25], 1);
        let shifted = Tensor::from_fn(x.shape(), |k| x.data()[k] + [0.3, -1.2, 2.5][(k / 100) % 3]);
        let (a, b) = (bones_of(&x, &ntu).unwrap(), bones_of(&shifted, &ntu).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        let root = ntu.root().unwrap();
        for k in (0..a.len()).filter(|k| k % 25 == root) {
            assert_eq!(a.data()[k], 0.0);
        }
    }

    #[test]
    fn missing_parent_map_is_an_error() {
        let mut topo = chain();
        topo.parents = None;
        assert!(bone_matrix(&topo).is_err());
    }

    #[test]
    fn motion_of_static_and_linear_sequences() {
        let still = Tensor::<f64>::full(&[1, 3, 5, 2], 0.7);
        assert!(motion_of(&still).unwrap().data().iter().all(|&v| v == 0.0));

        let line = Tensor::from_fn(&[1, 1, 5, 2], |k| 0.5 * (k / 2) as f64);
        let m = motion_of(&line).unwrap();
        for t in 0..5 {
            let expected = if t < 4 { 0.5 } else { 0.0 };
            assert_eq!(m.at(&[0, 0, t, 1]), expected);
        }
    }

    #[test]
    fn second_difference_of_a_quadratic_is_constant() {
        let q = Tensor::from_fn(&[1, 1, 7, 1], |t| (t * t) as f64);
        let m2 = motion_of(&motion_of(&q).unwrap()).unwrap();
        // valid slots are those whose first difference had a successor
        for t in 0..5 {
            assert_eq!(m2.at(&[0, 0, t, 0]), 2.0);
        }
    }

    #[test]
    fn head_ignores_frame_and_node_order() {
        let x = randn(&[2, 4, 3, 5], 2);
        let perm = Tensor::from_fn(x.shape(), |k| {
            let (bc, t, n) = (k / 15, (k / 5) % 3, k % 5);
            x.data()[bc * 15 + (2 - t) * 5 + (n + 2) % 5]
        });
        let (w, b) = (randn(&[4, 6], 3), randn(&[6], 4));
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
            let y = classifier_head(&mut tape, xv, wv, bv).unwrap();
            tape.value(y).clone()
        };
        let (p, q) = (run(&x), run(&perm));
        for (u, v) in p.data().iter().zip(q.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn head_on_constant_features() {
        let x = Tensor::<f64>::full(&[1, 3, 2, 4], 2.5);
        let w = Tensor::from_f64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x), tape.leaf(w), tape.leaf(Tensor::zeros(&[3])));
        let y = classifier_head(&mut tape, xv, wv, bv).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, 2.5, 2.5]);
    }

    fn cfb(store: &mut ParamStore<f64>, weight: f64, mode: FusionMode, c_out: usize) -> CrossFusion {
        let ntu = builtin("ntu25").unwrap();
        let fine = normalized_adjacency(&ntu);
        let p = build_assignment(&ntu.partition.stages[0]).unwrap();
        let coarse = coarsen_adjacency(&fine, &p).unwrap();
        let spec = CrossFusionSpec {
            c_in: 8,
            c_out,
            kernel: 3,
            pooling: PoolingConfig::default(),
            assignment: &p,
            fine_adjacency: &fine,
            coarse_adjacency: &coarse,
            weight,
            mode,
        };
        CrossFusion::new(store, "cfb", spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn cross_fusion_shapes_and_endpoints() {
        let x = randn(&[1, 8, 16, 25], 6);
        for mode in [FusionMode::Sum, FusionMode::Concat] {
            let mut store = ParamStore::new();
            let block = cfb(&mut store, 1.0, mode, 12);
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &store, Mode::Train);
            let xv = ctx.constant(x.clone());
            let (h, e) = block.branches(&mut ctx, xv).unwrap();
            let y = block.fuse(&mut ctx, h, e).unwrap();
            assert_eq!(ctx.tape.shape(y), &[1, 12, 8, 10]);
            if mode == FusionMode::Sum {
                assert!(ctx.tape.value(y).bit_eq(ctx.tape.value(h)));
            }
        }
    }

    #[test]
    fn fusion_is_convex_in_sum_mode() {
        let mut store = ParamStore::new();
        let block = cfb(&mut store, 0.3, FusionMode::Sum, 8);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train);
        let xv = ctx.constant(randn(&[2, 8, 6, 25], 7));
        let (h, e) = block.branches(&mut ctx, xv).unwrap();
        let y = block.fuse(&mut ctx, h, e).unwrap();
        let t = &ctx.tape;
        for k in 0..t.value(y).len() {
            let (a, b) = (t.value(h).data()[k], t.value(e).data()[k]);
            let v = t.value(y).data()[k];
            assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
        }
        let same = weighted_fusion(&mut ctx.tape, h, h, 0.37).unwrap();
        for (p, q) in ctx.tape.value(same).data().iter().zip(ctx.tape.value(h).data()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(weighted_fusion(&mut ctx.tape, h, e, 1.5).is_err());
    }

    #[test]
    fn ism_output_has_64_channels() {
        let ntu = builtin("ntu25").unwrap();
        let adj = normalized_adjacency(&ntu);
        for normalize in [true, false] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let ism = InformationSupplement::new(&mut store, "ism", &ntu, &adj, 32, normalize, &mut rng).unwrap();
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &store, Mode::Train);
            let x = ctx.constant(randn(&[2, 3, 4, 25], 9));
            let y = ism.forward(&mut ctx, x).unwrap();
            assert_eq!(ctx.tape.shape(y), &[2, 64, 4, 25]);

            let z = ctx.constant(Tensor::zeros(&[1, 3, 4, 25]));
            let y0 = ism.forward(&mut ctx, z).unwrap();
            assert!(ctx.tape.value(y0).is_finite());
        }
    }
}

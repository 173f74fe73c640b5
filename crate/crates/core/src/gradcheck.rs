//! Central-difference verification of every tape operator and of the
//! composite modules, in 64-bit precision.
//!
//! Each check draws random inputs from a seed, reduces the output to a scalar
//! with a random projection `L = sum(y * c)` and compares the tape gradient of
//! every input with central differences. The per-element error is
//! `|a - n| / max(|a|, |n|, 1e-3)`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    bone_features, classifier_head, motion_features, CrossFusion, CrossFusionSpec, FusionMode, InformationSupplement,
};
use crate::error::Result;
use crate::gcn::{batch_normalize, spatial_graph_conv, NormStats};
use crate::nn::{normal_init, Ctx, Mode, ParamStore};
use crate::pooling::{correlation, spatial_pool, st_pool, Normalization, PoolingConfig};
use crate::skeleton::{build_assignment, builtin, coarsen_adjacency, normalized_adjacency};
use crate::tensor::{finite_difference_gradient, Tape, Tensor, Var};
use crate::train::cross_entropy;

pub const TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-6;
const ERROR_FLOOR: f64 = 1e-3;

type Forward = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Random inputs plus the computation under test.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub forward: Forward,
}

impl Case {
    fn new(inputs: Vec<Tensor<f64>>, forward: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Case { inputs, forward: Box::new(forward) }
    }
}

pub type CaseBuilder = fn(&mut ChaCha8Rng) -> Case;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub elapsed: Duration,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(ERROR_FLOOR))
        .fold(0.0, f64::max)
}

fn projected_loss(case: &Case, tape: &mut Tape<f64>, vars: &[Var], projection: &Tensor<f64>) -> Result<Var> {
    let y = (case.forward)(tape, vars)?;
    let c = tape.leaf(projection.reshape(tape.shape(y))?);
    let yc = tape.mul(y, c)?;
    tape.sum_all(yc)
}

/// Largest relative error over all inputs of one case.
pub fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let y = (case.forward)(&mut tape, &vars)?;
    let projection = normal_init::<f64>(tape.shape(y), 1.0, rng);
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = projected_loss(case, &mut tape, &vars, &projection)?;
    let grads = tape.gradients(loss, &vars)?;
    let mut worst = 0.0f64;
    for (i, input) in case.inputs.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = case
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.leaf(if j == i { probe.clone() } else { x.clone() }))
                    .collect();
                let l = projected_loss(case, &mut t, &vs, &projection)?;
                Ok(t.value(l).item())
            },
            input,
            FD_STEP,
        )?;
        let analytic = grads.get(vars[i]).expect("requested input");
        worst = worst.max(relative_error(analytic, &numeric));
    }
    Ok(worst)
}

pub fn run_check(name: &'static str, builder: CaseBuilder, seeds: usize) -> Result<CheckResult> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = builder(&mut rng);
        worst = worst.max(check_case(&case, &mut rng)?);
    }
    Ok(CheckResult { name, seeds, max_rel_error: worst, elapsed: start.elapsed() })
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    normal_init(shape, 1.0, rng)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.5..2.0))
}

/// One case per tape operator (leaves excluded).
pub fn operator_checks() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("matmul", |r| Case::new(vec![randn(r, &[3, 4]), randn(r, &[4, 5])], |t, v| t.matmul(v[0], v[1]))),
        ("batched_matmul", |r| {
            Case::new(vec![randn(r, &[2, 3, 4]), randn(r, &[2, 4, 2])], |t, v| t.batched_matmul(v[0], v[1]))
        }),
        ("channel_map", |r| {
            Case::new(vec![randn(r, &[3, 2]), randn(r, &[2, 2, 3, 2])], |t, v| t.channel_map(v[0], v[1]))
        }),
        ("add", |r| Case::new(vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |t, v| t.add(v[0], v[1]))),
        ("sub", |r| Case::new(vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |t, v| t.sub(v[0], v[1]))),
        ("mul", |r| Case::new(vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |t, v| t.mul(v[0], v[1]))),
        ("scale", |r| Case::new(vec![randn(r, &[4])], |t, v| t.scale(v[0], -1.7))),
        ("tanh", |r| Case::new(vec![randn(r, &[2, 5])], |t, v| t.tanh(v[0]))),
        ("sigmoid", |r| Case::new(vec![randn(r, &[2, 5])], |t, v| t.sigmoid(v[0]))),
        ("relu", |r| Case::new(vec![randn(r, &[2, 5])], |t, v| t.relu(v[0]))),
        ("rsqrt", |r| Case::new(vec![positive(r, &[6])], |t, v| t.rsqrt(v[0], 1e-5))),
        ("softmax", |r| Case::new(vec![randn(r, &[3, 4])], |t, v| t.softmax(v[0]))),
        ("log_softmax", |r| Case::new(vec![randn(r, &[3, 4])], |t, v| t.log_softmax(v[0]))),
        ("sum", |r| Case::new(vec![randn(r, &[2, 3, 4])], |t, v| t.sum(v[0], &[0, 2]))),
        ("mean", |r| Case::new(vec![randn(r, &[2, 3, 4])], |t, v| t.mean(v[0], &[1]))),
        ("expand", |r| Case::new(vec![randn(r, &[2, 3])], |t, v| t.expand(v[0], 1, 4))),
        ("channel_affine", |r| {
            Case::new(vec![randn(r, &[2, 3, 4]), randn(r, &[3]), randn(r, &[3])], |t, v| {
                t.channel_affine(v[0], v[1], v[2], 1)
            })
        }),
        ("temporal_conv", |r| {
            Case::new(vec![randn(r, &[2, 2, 5, 3]), randn(r, &[3, 2, 3])], |t, v| t.temporal_conv(v[0], v[1], 1))
        }),
        ("temporal_conv_stride2", |r| {
            Case::new(vec![randn(r, &[1, 2, 7, 2]), randn(r, &[2, 2, 5])], |t, v| t.temporal_conv(v[0], v[1], 2))
        }),
        ("pair_average", |r| Case::new(vec![randn(r, &[2, 2, 5, 3])], |t, v| t.pair_average(v[0], 2))),
        ("concat", |r| {
            Case::new(vec![randn(r, &[2, 1, 3]), randn(r, &[2, 2, 3])], |t, v| t.concat(&[v[0], v[1]], 1))
        }),
        ("reshape", |r| Case::new(vec![randn(r, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4]))),
        ("permute", |r| Case::new(vec![randn(r, &[2, 3, 4])], |t, v| t.permute(v[0], &[2, 0, 1]))),
    ]
}

fn store_case<B: 'static>(
    x: Tensor<f64>,
    store: ParamStore<f64>,
    block: B,
    forward: fn(&B, &mut Ctx<'_, f64>, Var) -> Result<Var>,
) -> Case {
    let mut inputs = vec![x];
    inputs.extend(store.values().iter().cloned());
    Case::new(inputs, move |tape, vars| {
        let mut ctx = Ctx::with_params(tape, &store, vars[1..].to_vec(), Mode::Train)?;
        forward(&block, &mut ctx, vars[0])
    })
}

/// Composite modules built from several operators.
pub fn composite_checks() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("correlation", |r| {
            Case::new(vec![randn(r, &[2, 8, 3, 5]), randn(r, &[2, 8]), randn(r, &[2, 8])], |t, v| {
                correlation(t, v[0], v[1], v[2], Normalization::Tanh)
            })
        }),
        ("spatial_pool", |r| {
            let p = build_assignment(&builtin("uwa15").unwrap().partition.stages[0]).unwrap();
            let inputs = vec![randn(r, &[2, 3, 2, 15]), normal_init(&[2, 2, 15], 0.5, r), p.to_tensor()];
            Case::new(inputs, |t, v| spatial_pool(t, v[0], Some(v[1]), v[2], true))
        }),
        ("st_pool", |r| {
            let p = build_assignment(&builtin("uwa15").unwrap().partition.stages[0]).unwrap();
            let inputs = vec![randn(r, &[1, 4, 3, 15]), randn(r, &[1, 4]), randn(r, &[1, 4]), p.to_tensor()];
            Case::new(inputs, |t, v| st_pool(t, v[0], Some((v[1], v[2])), v[3], &PoolingConfig::default()))
        }),
        ("spatial_graph_conv", |r| {
            let a = normalized_adjacency(&builtin("uwa15").unwrap()).to_tensor();
            Case::new(vec![randn(r, &[2, 3, 2, 15]), randn(r, &[4, 3]), a], |t, v| {
                spatial_graph_conv(t, v[0], v[1], v[2])
            })
        }),
        ("batch_normalize", |r| {
            Case::new(vec![randn(r, &[3, 2, 4, 3]), randn(r, &[2]), randn(r, &[2])], |t, v| {
                Ok(batch_normalize(t, v[0], v[1], v[2], NormStats::Batch)?.0)
            })
        }),
        ("bone_features", |r| {
            Case::new(vec![randn(r, &[1, 3, 2, 15])], |t, v| bone_features(t, v[0], &builtin("uwa15")?))
        }),
        ("motion_features", |r| Case::new(vec![randn(r, &[1, 3, 5, 4])], |t, v| motion_features(t, v[0]))),
        ("cross_fusion_block", |r| {
            let topo = builtin("uwa15").unwrap();
            let fine = normalized_adjacency(&topo);
            let p = build_assignment(&topo.partition.stages[0]).unwrap();
            let coarse = coarsen_adjacency(&fine, &p).unwrap();
            let mut store = ParamStore::new();
            let spec = CrossFusionSpec {
                c_in: 4,
                c_out: 4,
                kernel: 3,
                pooling: PoolingConfig::default(),
                assignment: &p,
                fine_adjacency: &fine,
                coarse_adjacency: &coarse,
                weight: 0.5,
                mode: FusionMode::Sum,
            };
            let seed = r.random();
            let block = CrossFusion::new(&mut store, "cfb", spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            store_case(randn(r, &[2, 4, 4, 15]), store, block, CrossFusion::forward)
        }),
        ("information_supplement", |r| {
            let topo = builtin("uwa15").unwrap();
            let adj = normalized_adjacency(&topo);
            let mut store = ParamStore::new();
            let seed = r.random();
            let ism = InformationSupplement::new(&mut store, "ism", &topo, &adj, 3, true, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            store_case(randn(r, &[2, 3, 3, 15]), store, ism, InformationSupplement::forward)
        }),
        ("classifier_head", |r| {
            Case::new(vec![randn(r, &[2, 4, 3, 5]), randn(r, &[4, 6]), randn(r, &[6])], |t, v| {
                classifier_head(t, v[0], v[1], v[2])
            })
        }),
        ("cross_entropy", |r| {
            let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
            Case::new(vec![randn(r, &[4, 5])], move |t, v| cross_entropy(t, v[0], &labels))
        }),
    ]
}

/// Runs every operator and composite check over `seeds` seeds.
pub fn run_suite(seeds: usize) -> Result<Vec<CheckResult>> {
    operator_checks()
        .into_iter()
        .chain(composite_checks())
        .map(|(name, builder)| run_check(name, builder, seeds))
        .collect()
}

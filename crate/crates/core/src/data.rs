//! Dataset files, the synthetic motion generator, frame resampling and
//! multi-stream score fusion.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blocks::{bones_of, motion_of};
use crate::error::{Error, Result};
use crate::skeleton::{SkeletonTopology, TopologyRef};
use crate::tensor::{Scalar, Tensor};
use crate::train::{rotate, rotation_matrix, TrainSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// One skeleton sequence: `frames[t][n] = [x, y, z]` in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub id: String,
    pub label: usize,
    pub frames: Vec<Vec<[f64; 3]>>,
}

impl LabeledSequence {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// `(3, T, N)` channel-first tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let t = self.frames.len();
        let n = self.frames.first().map_or(0, Vec::len);
        Tensor::from_fn(&[3, t, n], |k| {
            let (c, rest) = (k / (t * n), k % (t * n));
            T::lit(self.frames[rest / n][rest % n][c])
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub topology: TopologyRef,
    pub classes: Vec<String>,
    #[serde(default)]
    pub split: Split,
    pub samples: Vec<LabeledSequence>,
}

/// Input transform applied before training a stream-specific model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    #[default]
    Joint,
    Bone,
    Motion,
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Stream::Joint),
            "bone" => Ok(Stream::Bone),
            "motion" => Ok(Stream::Motion),
            other => Err(Error::Config(format!("unknown stream `{other}` (expected joint, bone or motion)"))),
        }
    }
}

impl Dataset {
    /// Checks the invariants and returns the resolved topology.
    pub fn validate(&self) -> Result<SkeletonTopology> {
        let topology = self.topology.resolve()?;
        if self.samples.is_empty() {
            return Err(Error::Data("dataset has no samples".into()));
        }
        let n = topology.node_count;
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id `{}`", s.id)));
            }
            if s.label >= self.classes.len() {
                return Err(Error::Data(format!(
                    "sample `{}` has label {} but only {} classes exist",
                    s.id,
                    s.label,
                    self.classes.len()
                )));
            }
            if s.frames.is_empty() {
                return Err(Error::Data(format!("sample `{}` has no frames", s.id)));
            }
            for (t, frame) in s.frames.iter().enumerate() {
                if frame.len() != n {
                    return Err(Error::Data(format!(
                        "sample `{}` frame {t} has {} joints, topology `{}` has {n}",
                        s.id,
                        frame.len(),
                        topology.name
                    )));
                }
                if frame.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!("sample `{}` frame {t} has a non-finite coordinate", s.id)));
                }
            }
        }
        Ok(topology)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Model inputs for `stream`, resampled to `frames`.
    pub fn to_train_set<T: Scalar>(&self, stream: Stream, frames: usize) -> Result<TrainSet<T>> {
        let topology = self.validate()?;
        let mut inputs = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let x = resample_frames(s, frames).to_tensor::<T>();
            let x = match stream {
                Stream::Joint => x,
                Stream::Bone => bones_of(&x, &topology)?,
                Stream::Motion => {
                    let [c, t, n] = [x.shape()[0], x.shape()[1], x.shape()[2]];
                    motion_of(&x.reshape(&[1, c, t, n])?)?.reshape(&[c, t, n])?
                }
            };
            inputs.push(x);
        }
        Ok(TrainSet { inputs, labels: self.samples.iter().map(|s| s.label).collect() })
    }
}

pub fn dataset_from_json(text: &str) -> Result<Dataset> {
    let ds: Dataset = serde_json::from_str(text)?;
    ds.validate()?;
    Ok(ds)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_json(&fs::read_to_string(path)?)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    fs::write(path, serde_json::to_string(dataset)?)?;
    Ok(())
}

/// Linear interpolation onto `target` evenly spaced frames; endpoints kept.
pub fn resample_frames(seq: &LabeledSequence, target: usize) -> LabeledSequence {
    let t = seq.frames.len();
    if t == target || t == 0 {
        return seq.clone();
    }
    let frames = (0..target)
        .map(|i| {
            let pos = if target == 1 { 0.0 } else { i as f64 * (t - 1) as f64 / (target - 1) as f64 };
            let lo = (pos.floor() as usize).min(t - 1);
            let hi = (lo + 1).min(t - 1);
            let w = pos - lo as f64;
            seq.frames[lo]
                .iter()
                .zip(&seq.frames[hi])
                .map(|(a, b)| [0, 1, 2].map(|c| if w == 0.0 { a[c] } else { a[c] + w * (b[c] - a[c]) }))
                .collect()
        })
        .collect();
    LabeledSequence { id: seq.id.clone(), label: seq.label, frames }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub topology: TopologyRef,
    /// Standard deviation of additive coordinate noise, meters.
    pub noise: f64,
    pub seed: u64,
    pub split: Split,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 8,
            per_class: 16,
            frames: 64,
            topology: TopologyRef::default(),
            noise: 0.01,
            seed: 0,
            split: Split::Train,
        }
    }
}

/// Per-class motion: joints whose local rotation oscillates, plus an optional
/// whole-body vertical bounce.
#[derive(Debug, Clone)]
struct MotionTemplate {
    active: Vec<usize>,
    /// Unit rotation axis, perpendicular to the region's mean bone direction.
    axis: [f64; 3],
    cycles: f64,
    amplitude: f64,
    bounce: f64,
}

/// Rotation by `angle` about the unit vector `k`.
fn axis_angle(k: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = k;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(v: [f64; 3]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Axis perpendicular to the mean bone direction of `active`, leaning towards
/// the preferred basis vector, so the oscillation swings the bones instead of
/// twisting them about themselves.
fn swing_axis(active: &[usize], topology: &SkeletonTopology, preferred: usize) -> [f64; 3] {
    let mut dir = [0.0; 3];
    if let (Some(parents), Some(rest)) = (&topology.parents, &topology.rest_pose) {
        for &j in active {
            if let Some(p) = parents[j] {
                let bone = [0, 1, 2].map(|c| rest[j][c] - rest[p][c]);
                let len = norm(bone);
                if len > 0.0 {
                    (0..3).for_each(|c| dir[c] += bone[c] / len);
                }
            }
        }
    }
    let len = norm(dir);
    let basis = |i: usize| {
        let mut e = [0.0; 3];
        e[i % 3] = 1.0;
        e
    };
    if len < 1e-9 {
        return basis(preferred);
    }
    let dir = dir.map(|v| v / len);
    let mut axis = cross(dir, basis(preferred));
    if norm(axis) < 0.5 {
        axis = cross(dir, basis(preferred + 1));
    }
    let len = norm(axis);
    axis.map(|v| v / len)
}

fn templates(topology: &SkeletonTopology, classes: usize) -> Vec<MotionTemplate> {
    let regions: Vec<Vec<usize>> = match topology.partition.stages.first() {
        Some(stage) => stage.regions.clone(),
        None => (0..topology.node_count).map(|i| vec![i]).collect(),
    };
    let r = regions.len();
    (0..classes)
        .map(|c| {
            // even classes move one region locally, odd classes add a whole-body bounce
            let whole_body = c % 2 == 1;
            let region = if whole_body { (c / 2 + r / 2) % r } else { (c / 2) % r };
            MotionTemplate {
                axis: swing_axis(&regions[region], topology, c % 3),
                active: regions[region].clone(),
                cycles: 1.0 + 0.5 * (c % 4) as f64,
                amplitude: 0.6,
                bounce: if whole_body { 0.15 } else { 0.0 },
            }
        })
        .collect()
}

/// Joints ordered so that every parent precedes its children.
fn kinematic_order(parents: &[Option<usize>]) -> Vec<usize> {
    let depth = |mut i: usize| {
        let mut d = 0;
        while let Some(p) = parents[i] {
            i = p;
            d += 1;
        }
        d
    };
    let mut order: Vec<usize> = (0..parents.len()).collect();
    order.sort_by_key(|&i| (depth(i), i));
    order
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// Forward kinematics of one frame given local joint rotations.
fn pose(
    rest: &[[f64; 3]],
    parents: &[Option<usize>],
    order: &[usize],
    local: &[[[f64; 3]; 3]],
) -> Vec<[f64; 3]> {
    let n = rest.len();
    let mut world = vec![rotation_matrix([0.0; 3]); n];
    let mut pos = vec![[0.0; 3]; n];
    for &i in order {
        match parents[i] {
            None => {
                world[i] = local[i];
                pos[i] = rest[i];
            }
            Some(p) => {
                let offset = [0, 1, 2].map(|c| rest[i][c] - rest[p][c]);
                world[i] = matmul3(&world[p], &local[i]);
                let moved = apply3(&world[i], offset);
                pos[i] = [0, 1, 2].map(|c| pos[p][c] + moved[c]);
            }
        }
    }
    pos
}

/// Generates `classes * per_class` sequences of class-specific periodic motion.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic data needs at least two classes".into()));
    }
    if spec.frames == 0 || spec.per_class == 0 {
        return Err(Error::Config("frames and samples per class must be positive".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!("noise level {} must be finite and nonnegative", spec.noise)));
    }
    let topology = spec.topology.resolve()?;
    let parents = topology
        .parents
        .clone()
        .ok_or_else(|| Error::Topology(format!("topology `{}` needs a parent map to animate", topology.name)))?;
    let rest = topology
        .rest_pose
        .clone()
        .ok_or_else(|| Error::Topology(format!("topology `{}` needs a rest pose to animate", topology.name)))?;
    let order = kinematic_order(&parents);
    let templates = templates(&topology, spec.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid deviation");
    let n = topology.node_count;
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for (label, tpl) in templates.iter().enumerate() {
        for k in 0..spec.per_class {
            let phase = rng.random_range(-0.3..=0.3);
            let gain = rng.random_range(0.9..=1.1);
            let frames = (0..spec.frames)
                .map(|t| {
                    let u = t as f64 / spec.frames as f64;
                    let wave = (2.0 * std::f64::consts::PI * tpl.cycles * u + phase).sin();
                    let turn = axis_angle(tpl.axis, tpl.amplitude * gain * wave);
                    let mut local = vec![rotation_matrix([0.0; 3]); n];
                    for &j in &tpl.active {
                        local[j] = turn;
                    }
                    let lift = tpl.bounce * gain * wave.abs();
                    pose(&rest, &parents, &order, &local)
                        .into_iter()
                        .map(|p| {
                            let mut q = [p[0], p[1] + lift, p[2]];
                            if spec.noise > 0.0 {
                                q.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
                            }
                            q
                        })
                        .collect()
                })
                .collect();
            samples.push(LabeledSequence { id: format!("c{label:02}_s{k:03}"), label, frames });
        }
    }
    Ok(Dataset {
        topology: spec.topology.clone(),
        classes: (0..spec.classes).map(|c| format!("class_{c}")).collect(),
        split: spec.split,
        samples,
    })
}

/// Applies a fixed rotation to every sample (viewpoint change).
pub fn rotate_dataset(dataset: &Dataset, angles: [f64; 3]) -> Result<Dataset> {
    let r = rotation_matrix(angles);
    let mut out = dataset.clone();
    for s in &mut out.samples {
        let rotated = rotate(&s.to_tensor::<f64>(), &r)?;
        let (t, n) = (s.frames.len(), s.frames[0].len());
        for (ti, frame) in s.frames.iter_mut().enumerate() {
            for (ni, p) in frame.iter_mut().enumerate() {
                *p = [0, 1, 2].map(|c| rotated.data()[c * t * n + ti * n + ni]);
            }
        }
    }
    Ok(out)
}

/// Accuracy of the nearest class centroid on flattened coordinates.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> Result<f64> {
    let flat = |s: &LabeledSequence| s.frames.iter().flatten().flatten().copied().collect::<Vec<f64>>();
    let k = train.classes.len();
    let mut centroids: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut counts = vec![0usize; k];
    for s in &train.samples {
        let v = flat(s);
        let c = &mut centroids[s.label];
        if c.is_empty() {
            c.resize(v.len(), 0.0);
        }
        if c.len() != v.len() {
            return Err(Error::Data("sequences differ in length".into()));
        }
        c.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        counts[s.label] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    }
    let correct = test
        .samples
        .iter()
        .filter(|s| {
            let v = flat(s);
            let dist = |c: &Vec<f64>| {
                if c.is_empty() {
                    f64::INFINITY
                } else {
                    c.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                }
            };
            let best = (0..k).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap_or(0);
            best == s.label
        })
        .count();
    Ok(correct as f64 / test.samples.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub label: usize,
    pub scores: Vec<f64>,
}

/// Per-sample class scores of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFile {
    pub classes: usize,
    pub rows: Vec<ScoreRow>,
}

fn first_max(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

impl ScoreFile {
    pub fn new(classes: usize, rows: Vec<ScoreRow>) -> Result<Self> {
        let mut ids = HashSet::new();
        for row in &rows {
            if row.scores.len() != classes {
                return Err(Error::Data(format!("`{}` has {} scores, expected {classes}", row.id, row.scores.len())));
            }
            if !ids.insert(row.id.as_str()) {
                return Err(Error::Data(format!("duplicate score id `{}`", row.id)));
            }
        }
        Ok(ScoreFile { classes, rows })
    }

    /// Fraction of rows whose argmax (lowest index on ties) equals the label.
    pub fn accuracy(&self) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        let correct = self.rows.iter().filter(|r| first_max(&r.scores) == r.label).count();
        correct as f64 / self.rows.len() as f64
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let header: Vec<String> = (0..self.classes).map(|k| format!("score_{k}")).collect();
        writeln!(w, "id,label,{}", header.join(","))?;
        for row in &self.rows {
            let scores: Vec<String> = row.scores.iter().map(f64::to_string).collect();
            writeln!(w, "{},{},{}", row.id, row.label, scores.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Data("score file is empty".into()))??;
        let columns: Vec<&str> = header.trim().split(',').collect();
        if columns.len() < 3 || columns[0] != "id" || columns[1] != "label" {
            return Err(Error::Data(format!("unexpected score header `{header}`")));
        }
        let classes = columns.len() - 2;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != classes + 2 {
                return Err(Error::Data(format!("score row {} has {} fields, expected {}", i + 2, fields.len(), classes + 2)));
            }
            let bad = |what: &str| Error::Data(format!("score row {}: bad {what}", i + 2));
            let label = fields[1].parse().map_err(|_| bad("label"))?;
            let scores =
                fields[2..].iter().map(|f| f.parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad("score"))?;
            rows.push(ScoreRow { id: fields[0].to_string(), label, scores });
        }
        ScoreFile::new(classes, rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(fs::File::open(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Weighted sum of score vectors per sample id, in the first file's row order.
pub fn fuse_scores(files: &[ScoreFile], weights: &[f64]) -> Result<(f64, ScoreFile)> {
    let first = files.first().ok_or_else(|| Error::InvalidArgument("no score files to fuse".into()))?;
    if weights.len() != files.len() {
        return Err(Error::InvalidArgument(format!("{} weights for {} score files", weights.len(), files.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument("fusion weights must be finite and nonnegative".into()));
    }
    let mut index: Vec<HashMap<&str, &ScoreRow>> = Vec::with_capacity(files.len());
    for (i, f) in files.iter().enumerate() {
        if f.classes != first.classes {
            return Err(Error::Data(format!("score file {i} has {} classes, expected {}", f.classes, first.classes)));
        }
        if f.rows.len() != first.rows.len() {
            return Err(Error::Data(format!("score file {i} has {} rows, expected {}", f.rows.len(), first.rows.len())));
        }
        index.push(f.rows.iter().map(|r| (r.id.as_str(), r)).collect());
    }
    let mut rows = Vec::with_capacity(first.rows.len());
    for row in &first.rows {
        let mut fused = vec![0.0; first.classes];
        for (i, (map, &w)) in index.iter().zip(weights).enumerate() {
            let other = map
                .get(row.id.as_str())
                .ok_or_else(|| Error::Data(format!("sample `{}` missing from score file {i}", row.id)))?;
            if other.label != row.label {
                return Err(Error::Data(format!("sample `{}` has conflicting labels", row.id)));
            }
            fused.iter_mut().zip(&other.scores).for_each(|(f, s)| *f += w * s);
        }
        rows.push(ScoreRow { id: row.id.clone(), label: row.label, scores: fused });
    }
    let out = ScoreFile::new(first.classes, rows)?;
    Ok((out.accuracy(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(classes: usize, per_class: usize, noise: f64, seed: u64) -> SynthSpec {
        SynthSpec { classes, per_class, frames: 32, noise, seed, ..SynthSpec::default() }
    }

    #[test]
    fn json_round_trip_is_bitwise() {
        let ds = synth_generate(&spec(3, 2, 0.05, 1)).unwrap();
        let text = serde_json::to_string(&ds).unwrap();
        let back = dataset_from_json(&text).unwrap();
        assert_eq!(back, ds);
        let bits = |d: &Dataset| -> Vec<u64> {
            d.samples.iter().flat_map(|s| s.frames.iter().flatten().flatten().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&ds));
    }

    #[test]
    fn invalid_datasets_are_rejected() {
        let good = synth_generate(&spec(2, 1, 0.0, 0)).unwrap();
        let empty = Dataset { samples: vec![], ..good.clone() };
        assert!(matches!(empty.validate(), Err(Error::Data(m)) if m.contains("no samples")));
        let unknown = Dataset { topology: TopologyRef::Name("kinect99".into()), ..good.clone() };
        assert!(matches!(unknown.validate(), Err(Error::Topology(_))));
        let mut ragged = good.clone();
        ragged.samples[0].frames[3].pop();
        assert!(ragged.validate().is_err());
        let mut bad_label = good.clone();
        bad_label.samples[1].label = 2;
        assert!(bad_label.validate().is_err());
        let mut dup = good;
        dup.samples[1].id = dup.samples[0].id.clone();
        assert!(dup.validate().is_err());
    }

    #[test]
    fn generator_counts_and_determinism() {
        let a = synth_generate(&SynthSpec { classes: 5, per_class: 20, ..SynthSpec::default() }).unwrap();
        assert_eq!(a.samples.len(), 100);
        assert_eq!(a.class_histogram(), vec![20; 5]);
        let s = spec(4, 3, 0.0, 9);
        assert_eq!(synth_generate(&s).unwrap(), synth_generate(&s).unwrap());
        assert!(synth_generate(&spec(1, 3, 0.0, 0)).is_err());
    }

    #[test]
    fn generated_motion_keeps_bone_lengths() {
        let ds = synth_generate(&spec(4, 1, 0.0, 2)).unwrap();
        let topo = ds.topology.resolve().unwrap();
        let parents = topo.parents.clone().unwrap();
        let rest = topo.rest_pose.clone().unwrap();
        let len = |a: [f64; 3], b: [f64; 3]| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt();
        for s in &ds.samples {
            for frame in &s.frames {
                for (i, p) in parents.iter().enumerate() {
                    if let Some(p) = *p {
                        assert!((len(frame[i], frame[p]) - len(rest[i], rest[p])).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn nearest_centroid_separates_classes() {
        for topology in ["ntu25", "uwa15"] {
            for classes in [2, 8] {
                let mk = |seed| SynthSpec {
                    classes,
                    per_class: 10,
                    frames: 64,
                    noise: 0.0,
                    seed,
                    topology: TopologyRef::Name(topology.into()),
                    ..SynthSpec::default()
                };
                let (train, test) = (synth_generate(&mk(1)).unwrap(), synth_generate(&mk(2)).unwrap());
                let acc = nearest_centroid_accuracy(&train, &test).unwrap();
                assert!(acc >= 0.95, "{topology} K={classes}: {acc}");
            }
        }
    }

    #[test]
    fn resampling_edge_cases() {
        let ds = synth_generate(&spec(2, 1, 0.0, 3)).unwrap();
        let s = &ds.samples[0];
        assert_eq!(&resample_frames(s, s.frame_count()), s);
        let r = resample_frames(s, 50);
        assert_eq!(r.frames[0], s.frames[0]);
        assert_eq!(r.frames[49], s.frames[31]);
        let constant = LabeledSequence { id: "c".into(), label: 0, frames: vec![vec![[1.0, 2.0, 3.0]; 2]; 5] };
        assert!(resample_frames(&constant, 9).frames.iter().flatten().all(|p| *p == [1.0, 2.0, 3.0]));
    }

    #[test]
    fn linear_trajectory_stays_linear() {
        let seq = LabeledSequence {
            id: "l".into(),
            label: 0,
            frames: (0..30).map(|t| vec![[0.1 * t as f64, 1.0 - 0.05 * t as f64, 2.0]]).collect(),
        };
        let r = resample_frames(&seq, 64);
        for (i, f) in r.frames.iter().enumerate() {
            let t = i as f64 * 29.0 / 63.0;
            assert!((f[0][0] - 0.1 * t).abs() < 1e-9);
            assert!((f[0][1] - (1.0 - 0.05 * t)).abs() < 1e-9);
        }
    }

    #[test]
    fn streams_have_model_layout() {
        let ds = synth_generate(&spec(2, 2, 0.01, 4)).unwrap();
        for stream in [Stream::Joint, Stream::Bone, Stream::Motion] {
            let set = ds.to_train_set::<f32>(stream, 16).unwrap();
            assert_eq!(set.inputs[0].shape(), &[3, 16, 25]);
            assert_eq!(set.labels, vec![0, 0, 1, 1]);
        }
    }

    fn scores(rows: &[(&str, usize, &[f64])]) -> ScoreFile {
        let rows = rows.iter().map(|(id, l, s)| ScoreRow { id: id.to_string(), label: *l, scores: s.to_vec() }).collect();
        ScoreFile::new(2, rows).unwrap()
    }

    #[test]
    fn fusion_basics() {
        let a = scores(&[("x", 0, &[0.7, 0.3]), ("y", 1, &[0.6, 0.4]), ("z", 1, &[0.5, 0.5])]);
        assert!((a.accuracy() - 1.0 / 3.0).abs() < 1e-12);
        let (acc, _) = fuse_scores(std::slice::from_ref(&a), &[1.0]).unwrap();
        assert_eq!(acc, a.accuracy());
        let (twice, _) = fuse_scores(&[a.clone(), a.clone()], &[1.0, 1.0]).unwrap();
        assert_eq!(twice, a.accuracy());

        let b = scores(&[("y", 1, &[0.1, 0.9]), ("x", 0, &[0.2, 0.8]), ("z", 1, &[0.2, 0.8])]);
        let (fused, file) = fuse_scores(&[a.clone(), b.clone()], &[1.0, 1.0]).unwrap();
        assert_eq!(file.rows[0].id, "x");
        assert!((file.rows[0].scores[1] - 1.1).abs() < 1e-12);
        assert!((fused - 2.0 / 3.0).abs() < 1e-12);

        let missing = scores(&[("x", 0, &[0.7, 0.3]), ("y", 1, &[0.6, 0.4]), ("w", 1, &[0.5, 0.5])]);
        assert!(fuse_scores(&[a.clone(), missing], &[1.0, 1.0]).is_err());
        assert!(fuse_scores(&[a.clone(), b.clone()], &[1.0]).is_err());
        assert!(fuse_scores(&[a, b], &[1.0, -1.0]).is_err());
    }

    #[test]
    fn score_csv_round_trip() {
        let a = scores(&[("x", 0, &[0.1, 0.9]), ("y", 1, &[1.0 / 3.0, 2.0 / 3.0])]);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("id,label,score_0,score_1\n"));
        assert_eq!(ScoreFile::read_csv(buf.as_slice()).unwrap(), a);
        assert!(ScoreFile::read_csv("id,label,score_0\nx,0\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn fused_accuracy_ignores_weight_scale(
            raw in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3), 12),
            w1 in 0.0f64..2.0,
            w2 in 0.0f64..2.0,
            scale in 0.01f64..100.0,
        ) {
            let file = |offset: usize| {
                let rows = (0..6)
                    .map(|i| ScoreRow { id: format!("s{i}"), label: i % 3, scores: raw[offset + i].clone() })
                    .collect();
                ScoreFile::new(3, rows).unwrap()
            };
            let files = [file(0), file(6)];
            let (a, fa) = fuse_scores(&files, &[w1, w2]).unwrap();
            let (b, fb) = fuse_scores(&files, &[w1 * scale, w2 * scale]).unwrap();
            // argmax compared on the fused vectors directly, robust to rounding ties
            for (ra, rb) in fa.rows.iter().zip(&fb.rows) {
                let mut sorted = ra.scores.clone();
                sorted.sort_by(f64::total_cmp);
                if sorted[2] - sorted[1] > 1e-9 * sorted[2].abs().max(1.0) {
                    prop_assert_eq!(first_max(&ra.scores), first_max(&rb.scores));
                }
            }
            if fa.rows.iter().all(|r| {
                let mut s = r.scores.clone();
                s.sort_by(f64::total_cmp);
                s[2] - s[1] > 1e-9 * s[2].abs().max(1.0)
            }) {
                prop_assert_eq!(a, b);
            }
        }
    }
}

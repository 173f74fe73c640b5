//! Skeleton topologies, adjacency normalisation and staged partition schemes.
//!
//! Joint ids are 1-based in topology documents and 0-based everywhere else.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One `(members -> new_id)` row of a partition stage, 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionRow {
    pub members: Vec<usize>,
    pub new_id: usize,
}

/// Serialized topology description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyDoc {
    pub name: String,
    pub node_count: usize,
    pub edges: Vec<[usize; 2]>,
    /// `[child, parent]` pairs; the root has no entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parents: Option<Vec<[usize; 2]>>,
    #[serde(default)]
    pub stages: Vec<Vec<PartitionRow>>,
    /// Optional rest pose (meters), one `[x, y, z]` per joint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rest_pose: Option<Vec<[f64; 3]>>,
}

/// Regions of one pooling stage: `regions[j]` lists the 0-based members of new node `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionStage {
    pub input_nodes: usize,
    pub regions: Vec<Vec<usize>>,
}

impl PartitionStage {
    pub fn output_nodes(&self) -> usize {
        self.regions.len()
    }

    /// Every node is its own region.
    pub fn identity(n: usize) -> Self {
        PartitionStage { input_nodes: n, regions: (0..n).map(|i| vec![i]).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PartitionScheme {
    pub stages: Vec<PartitionStage>,
}

impl PartitionScheme {
    /// Node count before the first stage followed by the count after each stage.
    pub fn node_trajectory(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.stages.len() + 1);
        if let Some(first) = self.stages.first() {
            out.push(first.input_nodes);
        }
        out.extend(self.stages.iter().map(PartitionStage::output_nodes));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    pub name: String,
    pub node_count: usize,
    /// 0-based, `a < b`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// `parents[i]` is the parent of joint `i`; `None` for the root.
    pub parents: Option<Vec<Option<usize>>>,
    pub partition: PartitionScheme,
    pub rest_pose: Option<Vec<[f64; 3]>>,
}

/// Binary assignment from `n` joints to `m` regions, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    n: usize,
    m: usize,
    data: Vec<f64>,
}

/// Raw (binary, zero diagonal) and normalised adjacency of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    n: usize,
    raw: Vec<bool>,
    normalized: Vec<f64>,
}

const NTU25_EDGES: [[usize; 2]; 24] = [
    [1, 2], [2, 21], [3, 21], [4, 3], [5, 21], [6, 5], [7, 6], [8, 7], [9, 21], [10, 9], [11, 10], [12, 11],
    [13, 1], [14, 13], [15, 14], [16, 15], [17, 1], [18, 17], [19, 18], [20, 19], [22, 23], [23, 8], [24, 25],
    [25, 12],
];

const NTU25_REST: [[f64; 3]; 25] = [
    [0.0, 1.0, 0.0],
    [0.0, 1.25, 0.0],
    [0.0, 1.55, 0.0],
    [0.0, 1.7, 0.0],
    [0.18, 1.45, 0.0],
    [0.2, 1.18, 0.0],
    [0.22, 0.95, 0.0],
    [0.22, 0.88, 0.0],
    [-0.18, 1.45, 0.0],
    [-0.2, 1.18, 0.0],
    [-0.22, 0.95, 0.0],
    [-0.22, 0.88, 0.0],
    [0.1, 0.95, 0.0],
    [0.1, 0.52, 0.0],
    [0.1, 0.1, 0.0],
    [0.1, 0.05, 0.1],
    [-0.1, 0.95, 0.0],
    [-0.1, 0.52, 0.0],
    [-0.1, 0.1, 0.0],
    [-0.1, 0.05, 0.1],
    [0.0, 1.45, 0.0],
    [0.22, 0.8, 0.0],
    [0.25, 0.86, 0.03],
    [-0.22, 0.8, 0.0],
    [-0.25, 0.86, 0.03],
];

// head, neck, torso, L shoulder/elbow/hand, R shoulder/elbow/hand,
// L hip/knee/foot, R hip/knee/foot
const UWA15_EDGES: [[usize; 2]; 14] = [
    [1, 2], [2, 3], [4, 2], [5, 4], [6, 5], [7, 2], [8, 7], [9, 8], [10, 3], [11, 10], [12, 11], [13, 3],
    [14, 13], [15, 14],
];

const UWA15_REST: [[f64; 3]; 15] = [
    [0.0, 1.7, 0.0],
    [0.0, 1.5, 0.0],
    [0.0, 1.2, 0.0],
    [0.18, 1.45, 0.0],
    [0.2, 1.18, 0.0],
    [0.22, 0.9, 0.0],
    [-0.18, 1.45, 0.0],
    [-0.2, 1.18, 0.0],
    [-0.22, 0.9, 0.0],
    [0.1, 0.95, 0.0],
    [0.1, 0.52, 0.0],
    [0.1, 0.08, 0.05],
    [-0.1, 0.95, 0.0],
    [-0.1, 0.52, 0.0],
    [-0.1, 0.08, 0.05],
];

fn rows(table: &[&[usize]]) -> Vec<PartitionRow> {
    table.iter().enumerate().map(|(j, m)| PartitionRow { members: m.to_vec(), new_id: j + 1 }).collect()
}

/// Names of the embedded topologies.
pub const BUILTIN_TOPOLOGIES: [&str; 2] = ["ntu25", "uwa15"];

/// Embedded topology documents.
pub fn builtin_doc(name: &str) -> Option<TopologyDoc> {
    match name {
        "ntu25" => Some(TopologyDoc {
            name: "ntu25".into(),
            node_count: 25,
            edges: NTU25_EDGES.to_vec(),
            parents: Some(NTU25_EDGES.to_vec()),
            stages: vec![
                rows(&[
                    &[1, 2, 21],
                    &[3, 4, 21],
                    &[5, 6, 7],
                    &[8, 22, 23],
                    &[9, 10, 11],
                    &[12, 24, 25],
                    &[13, 14],
                    &[15, 16],
                    &[17, 18],
                    &[19, 20],
                ]),
                rows(&[&[1, 2], &[3, 4], &[5, 6], &[7, 8], &[9, 10]]),
                rows(&[&[1, 2, 3], &[4, 5]]),
            ],
            rest_pose: Some(NTU25_REST.to_vec()),
        }),
        "uwa15" => Some(TopologyDoc {
            name: "uwa15".into(),
            node_count: 15,
            edges: UWA15_EDGES.to_vec(),
            parents: Some(UWA15_EDGES.to_vec()),
            stages: vec![
                rows(&[
                    &[1, 2],
                    &[2, 3],
                    &[4, 5],
                    &[5, 6],
                    &[7, 8],
                    &[8, 9],
                    &[10, 11],
                    &[11, 12],
                    &[13, 14],
                    &[14, 15],
                ]),
                rows(&[&[1, 2], &[3, 4], &[5, 6], &[7, 8], &[9, 10]]),
                rows(&[&[1, 2, 3], &[4, 5]]),
            ],
            rest_pose: Some(UWA15_REST.to_vec()),
        }),
        _ => None,
    }
}

pub fn builtin(name: &str) -> Result<SkeletonTopology> {
    let doc = builtin_doc(name).ok_or_else(|| {
        Error::Topology(format!("unknown built-in topology `{name}` (known: {})", BUILTIN_TOPOLOGIES.join(", ")))
    })?;
    load_topology(&doc)
}

/// A topology given by built-in name or as an inline document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologyRef {
    Name(String),
    Inline(TopologyDoc),
}

impl TopologyRef {
    pub fn resolve(&self) -> Result<SkeletonTopology> {
        match self {
            TopologyRef::Name(name) => builtin(name),
            TopologyRef::Inline(doc) => load_topology(doc),
        }
    }

    pub fn label(&self) -> &str {
        match self {
            TopologyRef::Name(name) => name,
            TopologyRef::Inline(doc) => &doc.name,
        }
    }
}

impl Default for TopologyRef {
    fn default() -> Self {
        TopologyRef::Name("ntu25".to_string())
    }
}

fn check_id(id: usize, n: usize, what: &str) -> Result<usize> {
    if id == 0 || id > n {
        return Err(Error::Topology(format!("{what} id {id} outside 1..={n}")));
    }
    Ok(id - 1)
}

/// Validates a topology document and converts it to 0-based form.
pub fn load_topology(doc: &TopologyDoc) -> Result<SkeletonTopology> {
    let n = doc.node_count;
    if n == 0 {
        return Err(Error::Topology("node_count must be positive".into()));
    }
    let mut edges = Vec::with_capacity(doc.edges.len());
    for &[a, b] in &doc.edges {
        let (a, b) = (check_id(a, n, "edge")?, check_id(b, n, "edge")?);
        if a == b {
            return Err(Error::Topology(format!("self-edge on joint {}", a + 1)));
        }
        let e = (a.min(b), a.max(b));
        if edges.contains(&e) {
            return Err(Error::Topology(format!("duplicate edge ({}, {})", e.0 + 1, e.1 + 1)));
        }
        edges.push(e);
    }
    edges.sort_unstable();

    let parents = match &doc.parents {
        None => None,
        Some(pairs) => Some(parent_map(pairs, n)?),
    };

    let mut stages = Vec::with_capacity(doc.stages.len());
    let mut current = n;
    for (s, stage_rows) in doc.stages.iter().enumerate() {
        let stage = partition_stage(stage_rows, current).map_err(|e| match e {
            Error::Partition(msg) => Error::Partition(format!("stage {}: {msg}", s + 1)),
            other => other,
        })?;
        current = stage.output_nodes();
        stages.push(stage);
    }

    if let Some(pose) = &doc.rest_pose {
        if pose.len() != n || pose.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Topology(format!("rest_pose needs {n} finite [x, y, z] entries")));
        }
    }

    Ok(SkeletonTopology {
        name: doc.name.clone(),
        node_count: n,
        edges,
        parents,
        partition: PartitionScheme { stages },
        rest_pose: doc.rest_pose.clone(),
    })
}

fn parent_map(pairs: &[[usize; 2]], n: usize) -> Result<Vec<Option<usize>>> {
    let mut parents = vec![None; n];
    for &[child, parent] in pairs {
        let (c, p) = (check_id(child, n, "parent-map")?, check_id(parent, n, "parent-map")?);
        if c == p {
            return Err(Error::Topology(format!("joint {child} is its own parent")));
        }
        if parents[c].replace(p).is_some() {
            return Err(Error::Topology(format!("joint {child} has two parents")));
        }
    }
    let roots = parents.iter().filter(|p| p.is_none()).count();
    if roots != 1 {
        return Err(Error::Topology(format!("parent map must have exactly one root, found {roots}")));
    }
    for start in 0..n {
        let mut cur = start;
        let mut steps = 0;
        while let Some(p) = parents[cur] {
            cur = p;
            steps += 1;
            if steps > n {
                return Err(Error::Topology(format!("parent map has a cycle through joint {}", start + 1)));
            }
        }
    }
    Ok(parents)
}

fn partition_stage(rows: &[PartitionRow], input_nodes: usize) -> Result<PartitionStage> {
    let m = rows.len();
    let mut regions: Vec<Option<Vec<usize>>> = vec![None; m];
    for row in rows {
        if row.new_id == 0 || row.new_id > m {
            return Err(Error::Partition(format!("new id {} is not contiguous in 1..={m}", row.new_id)));
        }
        if row.members.is_empty() {
            return Err(Error::Partition(format!("region {} is empty", row.new_id)));
        }
        let mut members = Vec::with_capacity(row.members.len());
        for &id in &row.members {
            if id == 0 || id > input_nodes {
                return Err(Error::Partition(format!(
                    "member {id} of region {} outside 1..={input_nodes}",
                    row.new_id
                )));
            }
            if !members.contains(&(id - 1)) {
                members.push(id - 1);
            }
        }
        if regions[row.new_id - 1].replace(members).is_some() {
            return Err(Error::Partition(format!("new id {} appears twice", row.new_id)));
        }
    }
    let regions: Vec<Vec<usize>> = regions.into_iter().map(|r| r.expect("ids are a bijection onto 1..=m")).collect();
    let stage = PartitionStage { input_nodes, regions };
    validate_stage(&stage)?;
    Ok(stage)
}

fn validate_stage(stage: &PartitionStage) -> Result<()> {
    let mut covered = vec![false; stage.input_nodes];
    for (j, region) in stage.regions.iter().enumerate() {
        if region.is_empty() {
            return Err(Error::Partition(format!("region {} is empty", j + 1)));
        }
        for &i in region {
            if i >= stage.input_nodes {
                return Err(Error::Partition(format!("member {} outside the input graph", i + 1)));
            }
            covered[i] = true;
        }
    }
    if let Some(i) = covered.iter().position(|c| !c) {
        return Err(Error::Partition(format!("joint {} is not assigned to any region", i + 1)));
    }
    Ok(())
}

impl SkeletonTopology {
    /// Converts back to the 1-based document form.
    pub fn to_doc(&self) -> TopologyDoc {
        TopologyDoc {
            name: self.name.clone(),
            node_count: self.node_count,
            edges: self.edges.iter().map(|&(a, b)| [a + 1, b + 1]).collect(),
            parents: self.parents.as_ref().map(|ps| {
                ps.iter().enumerate().filter_map(|(c, p)| p.map(|p| [c + 1, p + 1])).collect()
            }),
            stages: self
                .partition
                .stages
                .iter()
                .map(|st| {
                    st.regions
                        .iter()
                        .enumerate()
                        .map(|(j, r)| PartitionRow { members: r.iter().map(|i| i + 1).collect(), new_id: j + 1 })
                        .collect()
                })
                .collect(),
            rest_pose: self.rest_pose.clone(),
        }
    }

    pub fn raw_adjacency(&self) -> Vec<bool> {
        let n = self.node_count;
        let mut raw = vec![false; n * n];
        for &(a, b) in &self.edges {
            raw[a * n + b] = true;
            raw[b * n + a] = true;
        }
        raw
    }

    pub fn root(&self) -> Option<usize> {
        self.parents.as_ref().and_then(|ps| ps.iter().position(Option::is_none))
    }
}

/// `D^-1/2 (A + I) D^-1/2` with `D` the degree matrix of `A + I`.
pub fn normalized_adjacency(topology: &SkeletonTopology) -> AdjacencyMatrix {
    AdjacencyMatrix::from_raw(topology.node_count, topology.raw_adjacency())
}

impl AdjacencyMatrix {
    /// Builds from a symmetric boolean matrix; the diagonal is ignored.
    pub fn from_raw(n: usize, mut raw: Vec<bool>) -> Self {
        assert_eq!(raw.len(), n * n, "raw adjacency must be n x n");
        for i in 0..n {
            raw[i * n + i] = false;
        }
        let degree: Vec<f64> =
            (0..n).map(|i| 1.0 + raw[i * n..(i + 1) * n].iter().filter(|&&e| e).count() as f64).collect();
        let mut normalized = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j || raw[i * n + j] {
                    normalized[i * n + j] = 1.0 / (degree[i] * degree[j]).sqrt();
                }
            }
        }
        AdjacencyMatrix { n, raw, normalized }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.raw[i * self.n + j]
    }

    pub fn raw(&self) -> &[bool] {
        &self.raw
    }

    /// Row-major normalised entries.
    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.normalized[i * self.n + j]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.n, self.n], |k| T::lit(self.normalized[k]))
    }
}

/// `P[i][j] = 1` iff node `i` is a member of region `j`.
pub fn build_assignment(stage: &PartitionStage) -> Result<AssignmentMatrix> {
    validate_stage(stage)?;
    let (n, m) = (stage.input_nodes, stage.output_nodes());
    let mut data = vec![0.0; n * m];
    for (j, region) in stage.regions.iter().enumerate() {
        for &i in region {
            data[i * m + j] = 1.0;
        }
    }
    Ok(AssignmentMatrix { n, m, data })
}

impl AssignmentMatrix {
    pub fn identity(n: usize) -> Self {
        build_assignment(&PartitionStage::identity(n)).expect("identity stage is valid")
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }

    pub fn is_member(&self, i: usize, j: usize) -> bool {
        self.get(i, j) != 0.0
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.n, self.m], |k| T::lit(self.data[k]))
    }

    /// Binary product `self * next`: node `i` belongs to coarse region `k`
    /// when it belongs to some intermediate region that belongs to `k`.
    pub fn compose(&self, next: &AssignmentMatrix) -> Result<AssignmentMatrix> {
        if self.m != next.n {
            return Err(Error::shape(format!(
                "cannot compose {}x{} assignment with {}x{}",
                self.n, self.m, next.n, next.m
            )));
        }
        let mut data = vec![0.0; self.n * next.m];
        for i in 0..self.n {
            for j in 0..self.m {
                if self.is_member(i, j) {
                    for k in 0..next.m {
                        if next.is_member(j, k) {
                            data[i * next.m + k] = 1.0;
                        }
                    }
                }
            }
        }
        Ok(AssignmentMatrix { n: self.n, m: next.m, data })
    }

    /// 0-based members of each region.
    pub fn regions(&self) -> Vec<Vec<usize>> {
        (0..self.m).map(|j| (0..self.n).filter(|&i| self.is_member(i, j)).collect()).collect()
    }
}

/// Adjacency of the pooled graph: distinct regions are connected when they
/// share a member or when a member of one is adjacent to a member of the other.
pub fn coarsen_adjacency(adjacency: &AdjacencyMatrix, assignment: &AssignmentMatrix) -> Result<AdjacencyMatrix> {
    let (n, m) = (assignment.rows(), assignment.cols());
    if adjacency.node_count() != n {
        return Err(Error::shape(format!(
            "adjacency over {} nodes does not match a {}x{} assignment",
            adjacency.node_count(),
            n,
            m
        )));
    }
    let regions = assignment.regions();
    let mut raw = vec![false; m * m];
    for j in 0..m {
        for k in j + 1..m {
            let linked = regions[j].iter().any(|&a| {
                regions[k].iter().any(|&b| a == b || adjacency.is_adjacent(a, b))
            });
            raw[j * m + k] = linked;
            raw[k * m + j] = linked;
        }
    }
    Ok(AdjacencyMatrix::from_raw(m, raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path(n: usize) -> SkeletonTopology {
        let doc = TopologyDoc {
            name: format!("path{n}"),
            node_count: n,
            edges: (1..n).map(|i| [i, i + 1]).collect(),
            parents: None,
            stages: vec![],
            rest_pose: None,
        };
        load_topology(&doc).unwrap()
    }

    #[test]
    fn builtins_have_expected_sizes() {
        let ntu = builtin("ntu25").unwrap();
        assert_eq!(ntu.node_count, 25);
        assert_eq!(ntu.edges.len(), 24);
        assert_eq!(ntu.root(), Some(20));
        assert_eq!(ntu.partition.node_trajectory(), vec![25, 10, 5, 2]);

        let uwa = builtin("uwa15").unwrap();
        assert_eq!(uwa.node_count, 15);
        assert_eq!(uwa.partition.node_trajectory(), vec![15, 10, 5, 2]);
        assert!(builtin("kinect99").is_err());
    }

    #[test]
    fn toy_topology_round_trips_through_json() {
        let doc = TopologyDoc {
            name: "pair".into(),
            node_count: 2,
            edges: vec![[1, 2]],
            parents: Some(vec![[2, 1]]),
            stages: vec![vec![PartitionRow { members: vec![1, 2], new_id: 1 }]],
            rest_pose: None,
        };
        let text = serde_json::to_string(&doc).unwrap();
        let back: TopologyDoc = serde_json::from_str(&text).unwrap();
        assert_eq!(back, doc);
        let topo = load_topology(&back).unwrap();
        assert_eq!(topo.to_doc(), doc);
    }

    #[test]
    fn invalid_documents_are_rejected() {
        let mut doc = builtin_doc("uwa15").unwrap();
        doc.edges.push([2, 1]);
        assert!(matches!(load_topology(&doc), Err(Error::Topology(m)) if m.contains("duplicate")));

        let mut doc = builtin_doc("uwa15").unwrap();
        doc.edges.push([3, 16]);
        assert!(matches!(load_topology(&doc), Err(Error::Topology(_))));

        let mut doc = builtin_doc("uwa15").unwrap();
        // 1 -> 2 -> 3 -> 1
        doc.parents = Some(vec![[1, 2], [2, 3], [3, 1]]);
        assert!(load_topology(&doc).is_err());

        let mut doc = builtin_doc("ntu25").unwrap();
        doc.stages[0].retain(|r| r.new_id != 10);
        assert!(matches!(load_topology(&doc), Err(Error::Partition(m)) if m.contains("not assigned")));

        let mut doc = builtin_doc("ntu25").unwrap();
        doc.stages[1][0].members.clear();
        assert!(matches!(load_topology(&doc), Err(Error::Partition(m)) if m.contains("empty")));
    }

    #[test]
    fn normalized_small_graphs() {
        let one = normalized_adjacency(&path(1));
        assert_eq!(one.normalized(), &[1.0]);

        let two = normalized_adjacency(&path(2));
        assert!(two.normalized().iter().all(|&v| (v - 0.5).abs() < 1e-15));

        // D = diag(2, 3, 2) for A + I of the 3-path
        let three = normalized_adjacency(&path(3));
        let d = [2.0f64, 3.0, 2.0];
        let a_plus_i = [[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                let expected = a_plus_i[i][j] / (d[i].sqrt() * d[j].sqrt());
                assert!((three.get(i, j) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn assignment_for_ntu_stages() {
        let ntu = builtin("ntu25").unwrap();
        let p1 = build_assignment(&ntu.partition.stages[0]).unwrap();
        assert_eq!((p1.rows(), p1.cols()), (25, 10));
        let joint21: Vec<usize> = (0..10).filter(|&j| p1.is_member(20, j)).collect();
        assert_eq!(joint21, vec![0, 1]);

        let p3 = build_assignment(&ntu.partition.stages[2]).unwrap();
        assert_eq!((p3.rows(), p3.cols()), (5, 2));
        for i in 0..5 {
            assert_eq!(p3.is_member(i, 0), i < 3);
            assert_eq!(p3.is_member(i, 1), i >= 3);
        }

        let id = AssignmentMatrix::identity(4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(id.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn coarsening_edge_cases() {
        let ntu = builtin("ntu25").unwrap();
        let a = normalized_adjacency(&ntu);
        assert_eq!(coarsen_adjacency(&a, &AssignmentMatrix::identity(25)).unwrap(), a);

        let all = build_assignment(&PartitionStage { input_nodes: 25, regions: vec![(0..25).collect()] }).unwrap();
        assert_eq!(coarsen_adjacency(&a, &all).unwrap().normalized(), &[1.0]);

        assert!(coarsen_adjacency(&a, &AssignmentMatrix::identity(5)).is_err());
    }

    #[test]
    fn ntu_stage_one_coarse_graph_matches_membership_scan() {
        let ntu = builtin("ntu25").unwrap();
        let a = normalized_adjacency(&ntu);
        let p = build_assignment(&ntu.partition.stages[0]).unwrap();
        let coarse = coarsen_adjacency(&a, &p).unwrap();
        assert!(coarse.is_adjacent(0, 1));
        // brute force over the 25x25 raw adjacency
        let raw = ntu.raw_adjacency();
        for j in 0..10 {
            for k in 0..10 {
                if j == k {
                    continue;
                }
                let mut expected = false;
                for u in 0..25 {
                    for v in 0..25 {
                        if p.is_member(u, j) && p.is_member(v, k) && (u == v || raw[u * 25 + v]) {
                            expected = true;
                        }
                    }
                }
                assert_eq!(coarse.is_adjacent(j, k), expected, "regions {j},{k}");
            }
        }
    }

    proptest! {
        #[test]
        fn coarsening_is_permutation_consistent(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let doc = builtin_doc("ntu25").unwrap();
            let mut perm: Vec<usize> = (1..=25).collect();
            perm.shuffle(&mut rng);
            let relabel = |id: usize| perm[id - 1];
            let mut permuted = doc.clone();
            permuted.edges = doc.edges.iter().map(|&[a, b]| [relabel(a), relabel(b)]).collect();
            permuted.parents = None;
            permuted.rest_pose = None;
            for row in &mut permuted.stages[0] {
                row.members = row.members.iter().map(|&m| relabel(m)).collect();
            }
            let base = load_topology(&doc).unwrap();
            let perm_topo = load_topology(&permuted).unwrap();
            let c0 = coarsen_adjacency(
                &normalized_adjacency(&base),
                &build_assignment(&base.partition.stages[0]).unwrap(),
            ).unwrap();
            let c1 = coarsen_adjacency(
                &normalized_adjacency(&perm_topo),
                &build_assignment(&perm_topo.partition.stages[0]).unwrap(),
            ).unwrap();
            prop_assert_eq!(c0, c1);
        }

        #[test]
        fn coarse_adjacency_symmetric_positive_diagonal(stage in 0usize..3, uwa in any::<bool>()) {
            let topo = builtin(if uwa { "uwa15" } else { "ntu25" }).unwrap();
            let mut a = normalized_adjacency(&topo);
            for st in &topo.partition.stages[..=stage] {
                a = coarsen_adjacency(&a, &build_assignment(st).unwrap()).unwrap();
            }
            let m = a.node_count();
            for i in 0..m {
                prop_assert!(a.get(i, i) > 0.0);
                for j in 0..m {
                    prop_assert_eq!(a.get(i, j), a.get(j, i));
                    prop_assert!((0.0..=1.0).contains(&a.get(i, j)));
                }
            }
        }
    }
}

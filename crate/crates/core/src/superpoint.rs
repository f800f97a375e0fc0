//! Superpoint segmentation of the scene cloud.
//!
//! Builds a k-nearest-neighbor graph over the points (edge weight
//! 1 - max(0, n_u . n_v) when normals exist, Euclidean distance otherwise)
//! and partitions it with the greedy graph-segmentation rule of Felzenszwalb
//! and Huttenlocher: edges are visited in ascending weight order and two
//! components merge when the edge weight does not exceed either component's
//! internal difference plus granularity / size. A final pass folds components
//! smaller than `min_segment_size` into their minimum-weight neighbor. All
//! tie-breaks are pinned (lowest index, lexicographic edge order) so the
//! partition is identical across runs and thread counts.

use std::path::Path;

use rayon::prelude::*;

use crate::scene_io::{BinaryMask3D, SceneIoError, ScenePointCloud};

/// Undirected weighted edge; endpoints stored with `u < v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphEdge {
    pub u: u32,
    pub v: u32,
    pub weight: f64,
}

/// Sparse undirected graph over the cloud's point indices.
#[derive(Debug, Clone)]
pub struct WeightedGraph {
    pub node_count: usize,
    pub edges: Vec<GraphEdge>,
}

/// A disjoint cover of point indices into geometrically coherent segments.
/// Segment ids are dense and assigned by ascending minimum member index.
#[derive(Debug, Clone)]
pub struct SuperpointPartition {
    pub segment_of: Vec<u32>,
    pub members: Vec<BinaryMask3D>,
}

impl SuperpointPartition {
    pub fn segment_count(&self) -> usize {
        self.members.len()
    }
}

// ---------------------------------------------------------------------------
// k-NN graph
// ---------------------------------------------------------------------------

struct KdTree<'a> {
    points: &'a [nalgebra::Point3<f64>],
    /// Point indices arranged so every subtree is a contiguous range with its
    /// node at the range midpoint.
    order: Vec<u32>,
    split_axis: Vec<u8>,
}

fn build_kd_range(points: &[nalgebra::Point3<f64>], order: &mut [u32], axes: &mut [u8]) {
    if order.len() <= 1 {
        return;
    }
    // Split along the widest axis of the range's bounding box.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        let p = &points[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut axis = 0usize;
    for a in 1..3 {
        if hi[a] - lo[a] > hi[axis] - lo[axis] {
            axis = a;
        }
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    axes[mid] = axis as u8;
    let (left, rest) = order.split_at_mut(mid);
    let (laxes, raxes) = axes.split_at_mut(mid);
    build_kd_range(points, left, laxes);
    build_kd_range(points, &mut rest[1..], &mut raxes[1..]);
}

impl<'a> KdTree<'a> {
    fn build(points: &'a [nalgebra::Point3<f64>]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut split_axis = vec![0u8; points.len()];
        build_kd_range(points, &mut order, &mut split_axis);
        KdTree {
            points,
            order,
            split_axis,
        }
    }

    /// k nearest neighbors of `query` excluding itself, ordered by
    /// (distance^2, index); distance ties resolve to the lower index.
    fn knn(&self, query: u32, k: usize) -> Vec<(f64, u32)> {
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.search(&self.order, &self.split_axis, query, k, &mut best);
        best
    }

    fn search(&self, order: &[u32], axes: &[u8], query: u32, k: usize, best: &mut Vec<(f64, u32)>) {
        if order.is_empty() {
            return;
        }
        let mid = order.len() / 2;
        let node = order[mid];
        let qp = &self.points[query as usize];
        if node != query {
            let d2 = (self.points[node as usize] - qp).norm_squared();
            consider(best, k, d2, node);
        }
        if order.len() == 1 {
            return;
        }
        let axis = axes[mid] as usize;
        let diff = qp[axis] - self.points[node as usize][axis];
        let (near, near_axes, far, far_axes) = if diff < 0.0 {
            (
                &order[..mid],
                &axes[..mid],
                &order[mid + 1..],
                &axes[mid + 1..],
            )
        } else {
            (
                &order[mid + 1..],
                &axes[mid + 1..],
                &order[..mid],
                &axes[..mid],
            )
        };
        self.search(near, near_axes, query, k, best);
        // Equal plane distance must still be explored: an equidistant point
        // with a lower index wins ties.
        let worst = if best.len() < k {
            f64::INFINITY
        } else {
            best.last().unwrap().0
        };
        if diff * diff <= worst {
            self.search(far, far_axes, query, k, best);
        }
    }
}

fn consider(best: &mut Vec<(f64, u32)>, k: usize, d2: f64, idx: u32) {
    let key = (d2, idx);
    if best.len() == k {
        let last = *best.last().unwrap();
        if key >= last {
            return;
        }
        best.pop();
    }
    let pos = best.partition_point(|&e| e < key);
    best.insert(pos, key);
}

/// Build the k-NN graph. Each point contributes undirected edges to its k
/// nearest Euclidean neighbors (ties by lower index); duplicates collapse.
/// Edge weight is 1 - max(0, n_u . n_v) when the cloud has normals, else the
/// Euclidean distance between the endpoints.
pub fn build_knn_graph(cloud: &ScenePointCloud, k: usize) -> WeightedGraph {
    assert!(k >= 1, "k must be >= 1");
    let n = cloud.len();
    if n == 1 {
        return WeightedGraph {
            node_count: 1,
            edges: Vec::new(),
        };
    }
    let tree = KdTree::build(&cloud.points);
    let neighbor_lists: Vec<Vec<(f64, u32)>> = (0..n as u32)
        .into_par_iter()
        .map(|i| tree.knn(i, k))
        .collect();

    let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(n * k);
    for (i, neighbors) in neighbor_lists.iter().enumerate() {
        let i = i as u32;
        for &(_, j) in neighbors {
            pairs.push((i.min(j), i.max(j)));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();

    let edges = pairs
        .into_iter()
        .map(|(u, v)| {
            let weight = match &cloud.normals {
                Some(normals) => {
                    1.0 - normals[u as usize].dot(&normals[v as usize]).max(0.0)
                }
                None => (cloud.points[u as usize] - cloud.points[v as usize]).norm(),
            };
            GraphEdge { u, v, weight }
        })
        .collect();
    WeightedGraph {
        node_count: n,
        edges,
    }
}

// ---------------------------------------------------------------------------
// Graph segmentation
// ---------------------------------------------------------------------------

struct DisjointSet {
    parent: Vec<u32>,
    size: Vec<u32>,
    /// Maximum weight of an edge already merged inside the component (root
    /// entry is authoritative).
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        let mut cur = x;
        while self.parent[cur as usize] != root {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32, weight: f64) -> u32 {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        self.internal[big as usize] = self.internal[big as usize]
            .max(self.internal[small as usize])
            .max(weight);
        big
    }
}

fn sorted_edge_order(edges: &[GraphEdge]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by(|&a, &b| {
        edges[a]
            .weight
            .total_cmp(&edges[b].weight)
            .then(edges[a].u.cmp(&edges[b].u))
            .then(edges[a].v.cmp(&edges[b].v))
    });
    order
}

/// Segment the graph. Edges are processed in ascending (weight, u, v) order;
/// components merge when the weight is at most
/// min(Int(C1) + granularity/|C1|, Int(C2) + granularity/|C2|). A second
/// ascending pass then merges any component smaller than `min_segment_size`
/// across its lightest outgoing edge.
pub fn segment_graph(
    graph: &WeightedGraph,
    granularity: f64,
    min_segment_size: usize,
) -> SuperpointPartition {
    assert!(granularity > 0.0);
    let n = graph.node_count;
    let order = sorted_edge_order(&graph.edges);
    let mut dsu = DisjointSet::new(n);

    for &ei in &order {
        let e = &graph.edges[ei];
        let ra = dsu.find(e.u);
        let rb = dsu.find(e.v);
        if ra == rb {
            continue;
        }
        let threshold_a = dsu.internal[ra as usize] + granularity / dsu.size[ra as usize] as f64;
        let threshold_b = dsu.internal[rb as usize] + granularity / dsu.size[rb as usize] as f64;
        if e.weight <= threshold_a.min(threshold_b) {
            dsu.union(ra, rb, e.weight);
        }
    }

    if min_segment_size > 1 {
        for &ei in &order {
            let e = &graph.edges[ei];
            let ra = dsu.find(e.u);
            let rb = dsu.find(e.v);
            if ra == rb {
                continue;
            }
            if (dsu.size[ra as usize] as usize) < min_segment_size
                || (dsu.size[rb as usize] as usize) < min_segment_size
            {
                dsu.union(ra, rb, e.weight);
            }
        }
    }

    partition_from_roots(n, |i| dsu.find(i))
}

/// Canonicalize a root labelling into dense segment ids assigned by
/// ascending minimum member index.
fn partition_from_roots(n: usize, mut root_of: impl FnMut(u32) -> u32) -> SuperpointPartition {
    let mut id_of_root: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
    let mut segment_of = vec![0u32; n];
    let mut members: Vec<Vec<u32>> = Vec::new();
    for i in 0..n as u32 {
        let root = root_of(i);
        let id = *id_of_root.entry(root).or_insert_with(|| {
            members.push(Vec::new());
            (members.len() - 1) as u32
        });
        segment_of[i as usize] = id;
        members[id as usize].push(i);
    }
    SuperpointPartition {
        segment_of,
        members: members.into_iter().map(BinaryMask3D::from_sorted).collect(),
    }
}

// ---------------------------------------------------------------------------
// Cache file
// ---------------------------------------------------------------------------

/// Write the partition as plain text: line i holds the segment id of point i.
pub fn save_partition(partition: &SuperpointPartition, path: &Path) -> Result<(), SceneIoError> {
    let mut out = String::with_capacity(partition.segment_of.len() * 4);
    for &id in &partition.segment_of {
        out.push_str(&id.to_string());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(SceneIoError::Io)
}

/// Load a cached or externally produced partition. Arbitrary segment labels
/// are accepted and remapped to the canonical dense numbering; connectivity
/// is not re-checked for external partitions.
pub fn load_partition(path: &Path, n_points: usize) -> Result<SuperpointPartition, SceneIoError> {
    let text = std::fs::read_to_string(path).map_err(SceneIoError::Io)?;
    let mut labels = Vec::with_capacity(n_points);
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let label: u32 = trimmed.parse().map_err(|_| SceneIoError::MalformedLine {
            line: idx + 1,
            reason: format!("bad segment id '{trimmed}'"),
        })?;
        labels.push(label);
    }
    if labels.len() != n_points {
        return Err(SceneIoError::MalformedFile(format!(
            "superpoint cache has {} entries for {} points",
            labels.len(),
            n_points
        )));
    }
    Ok(partition_from_roots(n_points, |i| labels[i as usize]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Point3, Vector3};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn cloud_of(points: Vec<Point3<f64>>) -> ScenePointCloud {
        ScenePointCloud::new(points, None).unwrap()
    }

    #[test]
    fn two_points_one_edge() {
        let cloud = cloud_of(vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)]);
        let graph = build_knn_graph(&cloud, 1);
        assert_eq!(graph.edges.len(), 1);
        assert_eq!((graph.edges[0].u, graph.edges[0].v), (0, 1));
        assert!((graph.edges[0].weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aligned_normals_give_zero_weight() {
        let points = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)];
        let normals = vec![Vector3::new(0.0, 0.0, 1.0); 2];
        let cloud = ScenePointCloud::new(points, Some(normals)).unwrap();
        let graph = build_knn_graph(&cloud, 1);
        assert_eq!(graph.edges[0].weight, 0.0);
    }

    /// O(N^2) k-NN oracle with the same (distance, index) tie-break.
    fn brute_force_knn(cloud: &ScenePointCloud, k: usize) -> Vec<Vec<(f64, u32)>> {
        (0..cloud.len() as u32)
            .map(|i| {
                let mut all: Vec<(f64, u32)> = (0..cloud.len() as u32)
                    .filter(|&j| j != i)
                    .map(|j| {
                        (
                            (cloud.points[i as usize] - cloud.points[j as usize]).norm_squared(),
                            j,
                        )
                    })
                    .collect();
                all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                all.truncate(k);
                all
            })
            .collect()
    }

    #[test]
    fn knn_graph_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let points: Vec<Point3<f64>> = (0..100)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let cloud = cloud_of(points);
        let graph = build_knn_graph(&cloud, 5);

        let oracle = brute_force_knn(&cloud, 5);
        let mut expected: Vec<(u32, u32)> = Vec::new();
        for (i, neighbors) in oracle.iter().enumerate() {
            for &(_, j) in neighbors {
                expected.push(((i as u32).min(j), (i as u32).max(j)));
            }
        }
        expected.sort_unstable();
        expected.dedup();
        let got: Vec<(u32, u32)> = graph.edges.iter().map(|e| (e.u, e.v)).collect();
        assert_eq!(got, expected);
        for e in &graph.edges {
            let dist = (cloud.points[e.u as usize] - cloud.points[e.v as usize]).norm();
            assert_eq!(e.weight, dist);
        }
    }

    #[test]
    fn knn_with_duplicate_points_ties_by_index() {
        // Four coincident points: each one's nearest neighbor is the lowest
        // other index.
        let cloud = cloud_of(vec![Point3::new(1.0, 1.0, 1.0); 4]);
        let tree = KdTree::build(&cloud.points);
        assert_eq!(tree.knn(0, 2), vec![(0.0, 1), (0.0, 2)]);
        assert_eq!(tree.knn(3, 2), vec![(0.0, 0), (0.0, 1)]);
    }

    #[test]
    fn bridge_edge_keeps_clusters_apart() {
        let edges = vec![
            GraphEdge { u: 0, v: 1, weight: 0.1 },
            GraphEdge { u: 1, v: 2, weight: 0.1 },
            GraphEdge { u: 3, v: 4, weight: 0.1 },
            GraphEdge { u: 4, v: 5, weight: 0.1 },
            GraphEdge { u: 2, v: 3, weight: 10.0 },
        ];
        let graph = WeightedGraph {
            node_count: 6,
            edges,
        };
        let partition = segment_graph(&graph, 1.0, 1);
        assert_eq!(partition.segment_count(), 2);
        assert_eq!(partition.segment_of, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn single_node_is_one_segment() {
        let graph = WeightedGraph {
            node_count: 1,
            edges: Vec::new(),
        };
        let partition = segment_graph(&graph, 0.05, 1);
        assert_eq!(partition.segment_count(), 1);
        assert_eq!(partition.members[0].indices(), &[0]);
    }

    #[test]
    fn min_size_pass_absorbs_fragments() {
        // Node 2 is a singleton connected to the 0-1 pair by a heavy edge;
        // min_segment_size = 2 forces the absorption.
        let edges = vec![
            GraphEdge { u: 0, v: 1, weight: 0.1 },
            GraphEdge { u: 1, v: 2, weight: 5.0 },
        ];
        let graph = WeightedGraph {
            node_count: 3,
            edges,
        };
        assert_eq!(segment_graph(&graph, 1.0, 1).segment_count(), 2);
        assert_eq!(segment_graph(&graph, 1.0, 2).segment_count(), 1);
    }

    #[test]
    fn partition_cache_round_trip() {
        let edges = vec![
            GraphEdge { u: 0, v: 1, weight: 0.1 },
            GraphEdge { u: 2, v: 3, weight: 0.1 },
        ];
        let graph = WeightedGraph {
            node_count: 4,
            edges,
        };
        let partition = segment_graph(&graph, 1.0, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spp.txt");
        save_partition(&partition, &path).unwrap();
        let loaded = load_partition(&path, 4).unwrap();
        assert_eq!(partition.segment_of, loaded.segment_of);
    }

    #[test]
    fn external_labels_are_canonicalized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spp.txt");
        std::fs::write(&path, "7\n7\n3\n3\n").unwrap();
        let loaded = load_partition(&path, 4).unwrap();
        // First-seen label becomes id 0.
        assert_eq!(loaded.segment_of, vec![0, 0, 1, 1]);
    }
}

//! Exact k-nearest-neighbor search over a fixed point set (kd-tree).
//!
//! Results are ordered by (squared distance, index) and never include the
//! query point itself.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

const LEAF: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KnnIndex {
    pub points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    pub build_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    idx: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KnnIndex {
    pub fn build(points: Vec<Vector3<f64>>, build_iter: usize) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build_node(&points, &mut order, 0, points.len(), &mut nodes);
        }
        Self { points, order, nodes, build_iter }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `n` nearest points to point `i`, excluding `i`.
    pub fn query(&self, i: usize, n: usize) -> Vec<usize> {
        self.nearest(&self.points[i], n, Some(i))
    }

    /// The `n` nearest points to an arbitrary location, optionally skipping
    /// one index.
    pub fn nearest(&self, p: &Vector3<f64>, n: usize, exclude: Option<usize>) -> Vec<usize> {
        if n == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(n + 1);
        self.search(0, p, n, exclude, &mut heap);
        let mut out = heap.into_sorted_vec();
        out.truncate(n);
        out.into_iter().map(|c| c.idx).collect()
    }

    fn search(
        &self,
        node: usize,
        p: &Vector3<f64>,
        n: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.order[start..end] {
                    if Some(idx) == exclude {
                        continue;
                    }
                    let c = Candidate { dist2: (self.points[idx] - p).norm_squared(), idx };
                    if heap.len() < n {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let d = p[axis] - value;
                let (near, far) = if d < 0.0 { (left, right) } else { (right, left) };
                self.search(near, p, n, exclude, heap);
                if heap.len() < n || d * d <= heap.peek().unwrap().dist2 {
                    self.search(far, p, n, exclude, heap);
                }
            }
        }
    }
}

fn build_node(
    points: &[Vector3<f64>],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    if end - start <= LEAF {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let slice = &mut order[start..end];
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in slice.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    if hi[axis] - lo[axis] == 0.0 {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    slice.sort_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let mid = slice.len() / 2;
    let value = points[slice[mid]][axis];
    // Everything left of `mid` has coordinate <= value, everything right >= value.
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let left = build_node(points, order, start, start + mid, nodes);
    let right = build_node(points, order, start + mid, end, nodes);
    nodes[id] = Node::Split { axis, value, left, right };
    id
}

/// Neighbor lists for every point, computed once per build.
pub fn all_neighbors(index: &KnnIndex, n: usize) -> Vec<Vec<usize>> {
    (0..index.len()).map(|i| index.query(i, n)).collect()
}

#[cfg(test)]
pub(crate) fn brute_force(points: &[Vector3<f64>], i: usize, n: usize) -> Vec<usize> {
    let mut c: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(j, p)| ((p - points[i]).norm_squared(), j))
        .collect();
    c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    c.into_iter().take(n).map(|(_, j)| j).collect()
}

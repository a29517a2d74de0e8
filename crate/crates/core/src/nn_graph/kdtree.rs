//! Static k-d tree for exact 1-NN queries that reports every tied candidate.

use crate::data::Matrix;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Median-split k-d tree over the rows of a matrix.
#[derive(Debug)]
pub struct KdTree<'a> {
    points: &'a Matrix,
    perm: Vec<usize>,
    nodes: Vec<Node>,
}

/// Squared Euclidean distance, accumulated left to right.
///
/// Both the tree and the brute-force path use this exact function so their
/// tie sets agree bit for bit.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a Matrix) -> Self {
        let mut tree = KdTree {
            points,
            perm: (0..points.rows()).collect(),
            nodes: Vec::with_capacity(2 * points.rows() / LEAF_SIZE + 1),
        };
        if points.rows() > 0 {
            tree.build_node(0, points.rows());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let dim = self.widest_dim(start, end);
        let mid = start + (end - start) / 2;
        let pts = self.points;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts.row(a)[dim].total_cmp(&pts.row(b)[dim])
        });
        let value = pts.row(self.perm[mid])[dim];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    fn widest_dim(&self, start: usize, end: usize) -> usize {
        let d = self.points.cols();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for &i in &self.perm[start..end] {
            for (k, &v) in self.points.row(i).iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        (0..d)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0)
    }

    /// All points other than `exclude` at the minimal squared distance from
    /// `query`, in increasing index order, together with that distance.
    pub fn nearest_excluding(&self, query: &[f64], exclude: usize, cands: &mut Vec<usize>) -> f64 {
        cands.clear();
        let mut best = f64::INFINITY;
        if !self.nodes.is_empty() {
            self.search(0, query, exclude, &mut best, cands);
        }
        cands.sort_unstable();
        best
    }

    fn search(&self, node: usize, q: &[f64], exclude: usize, best: &mut f64, cands: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &j in &self.perm[start..end] {
                    if j == exclude {
                        continue;
                    }
                    let d2 = sq_dist(q, self.points.row(j));
                    if d2 < *best {
                        *best = d2;
                        cands.clear();
                        cands.push(j);
                    } else if d2 == *best {
                        cands.push(j);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, exclude, best, cands);
                // keep equality so tied candidates across the plane are found
                if diff * diff <= *best {
                    self.search(far, q, exclude, best, cands);
                }
            }
        }
    }
}

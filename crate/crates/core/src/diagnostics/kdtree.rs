//! Static 3D kd-tree for k-nearest-neighbour distances.

use crate::Vec3;

const LEAF: usize = 8;

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

pub struct KdTree {
    points: Vec<Vec3>,
    /// Original index of each reordered point.
    index: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build(points, &mut order, 0, &mut nodes);
        }
        let reordered = order.iter().map(|&i| points[i]).collect();
        KdTree {
            points: reordered,
            index: order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distance from point `i` of the input to its `k`-th nearest other point.
    pub fn kth_neighbour_distance(&self, query: Vec3, k: usize, exclude: usize) -> f64 {
        let mut best = Best::new(k);
        self.search(0, query, exclude, &mut best);
        best.worst().sqrt()
    }

    fn search(&self, node: usize, q: Vec3, exclude: usize, best: &mut Best) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for p in start..end {
                    if self.index[p] != exclude {
                        best.offer((self.points[p] - q).norm2());
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let d = q[axis] - value;
                let (near, far) = if d <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, exclude, best);
                if d * d < best.worst() {
                    self.search(far, q, exclude, best);
                }
            }
        }
    }
}

fn build(points: &[Vec3], order: &mut [usize], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if order.len() <= LEAF {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return id;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[order[mid]][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (l, r) = order.split_at_mut(mid);
    let left = build(points, l, offset, nodes);
    let right = build(points, r, offset + mid, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}

/// The `k` smallest squared distances seen so far, ascending.
struct Best {
    k: usize,
    d: Vec<f64>,
}

impl Best {
    fn new(k: usize) -> Self {
        Best {
            k,
            d: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn worst(&self) -> f64 {
        if self.d.len() < self.k {
            f64::INFINITY
        } else {
            self.d[self.k - 1]
        }
    }

    #[inline]
    fn offer(&mut self, x: f64) {
        if x >= self.worst() {
            return;
        }
        let pos = self.d.partition_point(|&y| y <= x);
        self.d.insert(pos, x);
        self.d.truncate(self.k);
    }
}

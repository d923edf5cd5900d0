//! 3D kd-tree for nearest-neighbor correspondence search.
//!
//! The query contract is deliberately strict so correspondence selection is
//! reproducible across machines: [`KdTree::nearest`] returns exactly what a
//! brute-force scan would — the point minimizing squared Euclidean distance,
//! with ties broken toward the lowest point index. Two details make that an
//! identity rather than an approximation:
//!
//! * a candidate replaces the incumbent only on strictly smaller distance or
//!   on equal distance with a smaller index, and
//! * a subtree across the splitting plane is pruned only when the plane
//!   distance is *strictly* greater than the incumbent distance, so
//!   equal-distance points beyond the plane are still visited.
//!
//! Points must have finite coordinates.

use crate::geometry::Point3;

#[derive(Debug, Clone, Copy)]
struct Node {
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

/// Balanced kd-tree over a borrowed point slice.
#[derive(Debug)]
pub struct KdTree<'a> {
    points: &'a [Point3],
    nodes: Vec<Node>,
    root: i32,
}

impl<'a> KdTree<'a> {
    /// Builds in `O(n log n)`; the tree layout is a pure function of the
    /// input order (median splits with index tie-breaks).
    pub fn build(points: &'a [Point3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = build_rec(points, &mut order, 0, &mut nodes);
        KdTree { points, nodes, root }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of and squared distance to the nearest point, or `None` for an
    /// empty tree. Identical to [`nearest_brute_force`] on the same slice.
    pub fn nearest(&self, query: &Point3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(self.root, query, &mut best);
        Some(best)
    }

    fn search(&self, node: i32, query: &Point3, best: &mut (usize, f64)) {
        if node < 0 {
            return;
        }
        let n = self.nodes[node as usize];
        let i = n.point as usize;
        let d2 = (self.points[i] - query).norm_squared();
        if d2 < best.1 || (d2 == best.1 && i < best.0) {
            *best = (i, d2);
        }
        let diff = query[n.axis as usize] - self.points[i][n.axis as usize];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(near, query, best);
        if diff * diff <= best.1 {
            self.search(far, query, best);
        }
    }
}

fn build_rec(points: &[Point3], order: &mut [u32], depth: usize, nodes: &mut Vec<Node>) -> i32 {
    if order.is_empty() {
        return -1;
    }
    let axis = (depth % 3) as u8;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis as usize]
            .total_cmp(&points[b as usize][axis as usize])
            .then(a.cmp(&b))
    });
    let point = order[mid];
    let slot = nodes.len();
    nodes.push(Node { point, axis, left: -1, right: -1 });
    let (left_half, rest) = order.split_at_mut(mid);
    let right_half = &mut rest[1..];
    let left = build_rec(points, left_half, depth + 1, nodes);
    let right = build_rec(points, right_half, depth + 1, nodes);
    nodes[slot].left = left;
    nodes[slot].right = right;
    slot as i32
}

/// Reference linear scan with the same tie-break rule; the oracle the tree
/// is tested against.
pub fn nearest_brute_force(points: &[Point3], query: &Point3) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - query).norm_squared();
        if best.is_none_or(|(_, bd2)| d2 < bd2) {
            best = Some((i, d2));
        }
    }
    best
}

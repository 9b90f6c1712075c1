//! K-nearest-neighbor graphs in the 5D bilateral space
//! `(r, g, b, lambda*x, lambda*y)` built on ground-truth color frames, and
//! the bilateral color-consistency loss evaluated on colorized frames.
//!
//! Spatial coordinates are normalized by `max(H, W)` before weighting, so one
//! `lambda` works across frame sizes. Graph nodes are a seeded pixel sample
//! (full frame when small enough); neighbor search runs on a 5D KD-tree whose
//! results are exact, with distance ties broken toward the lower pixel index.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imagecore::Image;
use crate::{Error, Result};

/// 5D bilateral embedding of one pixel.
pub type BilateralPoint = [f32; 5];

/// Parameters of the KNN graph construction.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnParams {
    /// Neighbors per node.
    pub k: usize,
    /// Spatial weight of the bilateral embedding.
    pub lambda_b: f32,
    /// Pixels sampled as graph nodes per frame.
    pub sample_size: usize,
    /// Pixel sampling seed.
    pub seed: u64,
}

impl Default for KnnParams {
    fn default() -> Self {
        KnnParams {
            k: 5,
            lambda_b: 0.5,
            sample_size: 1024,
            seed: 0,
        }
    }
}

impl KnnParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        if self.lambda_b < 0.0 {
            return Err(Error::InvalidParameter("lambda_b must be >= 0".into()));
        }
        if self.sample_size < self.k + 1 {
            return Err(Error::InvalidParameter(
                "sample_size must be at least k + 1".into(),
            ));
        }
        Ok(())
    }
}

/// Directed KNN graph over sampled pixels of one frame.
#[derive(Debug, Clone)]
pub struct KnnGraph {
    height: usize,
    width: usize,
    k: usize,
    /// Row-major pixel indices of the sampled nodes, ascending.
    nodes: Vec<u32>,
    /// Flat neighbor lists: node i's neighbors (as node indices) are
    /// `neighbors[i*k .. (i+1)*k]`.
    neighbors: Vec<u32>,
}

impl KnnGraph {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[u32] {
        &self.nodes
    }

    /// Neighbor node indices of node `i`.
    pub fn neighbors_of(&self, i: usize) -> &[u32] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Directed edges as (pixel p, pixel q) row-major index pairs, ready for
    /// loss evaluation on a same-sized colorized frame.
    pub fn edge_pixel_pairs(&self) -> Arc<Vec<(u32, u32)>> {
        let mut edges = Vec::with_capacity(self.nodes.len() * self.k);
        for (i, &p) in self.nodes.iter().enumerate() {
            for &j in self.neighbors_of(i) {
                edges.push((p, self.nodes[j as usize]));
            }
        }
        Arc::new(edges)
    }
}

/// Maps a sampled pixel into the bilateral space.
fn embed(img: &Image, pixel: u32, lambda_b: f32) -> BilateralPoint {
    let w = img.width();
    let y = pixel as usize / w;
    let x = pixel as usize % w;
    let norm = img.height().max(w) as f32;
    [
        img.get(y, x, 0),
        img.get(y, x, 1),
        img.get(y, x, 2),
        lambda_b * x as f32 / norm,
        lambda_b * y as f32 / norm,
    ]
}

/// Builds the bilateral KNN graph on a ground-truth color frame.
pub fn build_knn_graph(gt_frame: &Image, params: &KnnParams) -> Result<KnnGraph> {
    params.validate()?;
    if gt_frame.channels() != 3 {
        return Err(Error::InvalidImage("KNN graph needs an RGB frame".into()));
    }
    let total = gt_frame.height() * gt_frame.width();
    let mut nodes: Vec<u32> = if total <= params.sample_size {
        (0..total as u32).collect()
    } else {
        // partial Fisher-Yates for a seeded uniform sample without replacement
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut pool: Vec<u32> = (0..total as u32).collect();
        for i in 0..params.sample_size {
            let j = rng.gen_range(i..total);
            pool.swap(i, j);
        }
        pool.truncate(params.sample_size);
        pool
    };
    nodes.sort_unstable();
    if params.k >= nodes.len() {
        return Err(Error::InvalidParameter(format!(
            "k = {} needs more than {} sampled nodes",
            params.k,
            nodes.len()
        )));
    }

    let points: Vec<BilateralPoint> = nodes
        .iter()
        .map(|&p| embed(gt_frame, p, params.lambda_b))
        .collect();
    let tree = KdTree::build(&points);
    let mut neighbors = Vec::with_capacity(nodes.len() * params.k);
    for (i, point) in points.iter().enumerate() {
        neighbors.extend(tree.knn(point, i as u32, params.k));
    }
    Ok(KnnGraph {
        height: gt_frame.height(),
        width: gt_frame.width(),
        k: params.k,
        nodes,
        neighbors,
    })
}

/// Squared Euclidean distance, accumulated in f64 in fixed dimension order
/// so the KD-tree and the brute-force oracle agree bit-for-bit.
fn dist2(a: &BilateralPoint, b: &BilateralPoint) -> f64 {
    let mut s = 0.0f64;
    for d in 0..5 {
        let diff = (a[d] - b[d]) as f64;
        s += diff * diff;
    }
    s
}

/// Exact O(N^2) neighbor lists with the same tie rule as the KD-tree:
/// ascending (distance, index).
pub fn brute_force_knn(points: &[BilateralPoint], k: usize) -> Result<Vec<Vec<u32>>> {
    if k >= points.len() {
        return Err(Error::InvalidParameter(format!(
            "k = {k} needs more than {} points",
            points.len()
        )));
    }
    let mut out = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let mut cands: Vec<(f64, u32)> = points
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, q)| (dist2(p, q), j as u32))
            .collect();
        cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.push(cands[..k].iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// Bilateral loss value: mean L1 color difference over all graph edges,
/// normalized by edge count times 3 channels. The differentiable counterpart
/// used in training is [`crate::neural::Tape::edge_diff_l1`] over the same
/// edge list.
pub fn bilateral_loss(colorized: &Image, graph: &KnnGraph) -> Result<f64> {
    if colorized.height() != graph.height
        || colorized.width() != graph.width
        || colorized.channels() != 3
    {
        return Err(Error::ShapeMismatch(
            "colorized frame does not match the graph's source dimensions".into(),
        ));
    }
    let edges = graph.edge_pixel_pairs();
    let mut total = 0.0f64;
    for &(p, q) in edges.iter() {
        let (py, px) = (p as usize / graph.width, p as usize % graph.width);
        let (qy, qx) = (q as usize / graph.width, q as usize % graph.width);
        for c in 0..3 {
            total += (colorized.get(py, px, c) - colorized.get(qy, qx, c)).abs() as f64;
        }
    }
    Ok(total / (edges.len() * 3) as f64)
}

struct KdNode {
    point: BilateralPoint,
    id: u32,
    dim: usize,
    left: Option<Box<KdNode>>,
    right: Option<Box<KdNode>>,
}

/// Static 5D KD-tree storing one point per node, split on the dimension of
/// largest spread at each level.
pub struct KdTree {
    root: Option<Box<KdNode>>,
}

impl KdTree {
    pub fn build(points: &[BilateralPoint]) -> Self {
        let mut items: Vec<(BilateralPoint, u32)> = points
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, i as u32))
            .collect();
        KdTree {
            root: Self::build_rec(&mut items),
        }
    }

    fn build_rec(items: &mut [(BilateralPoint, u32)]) -> Option<Box<KdNode>> {
        if items.is_empty() {
            return None;
        }
        let mut dim = 0;
        let mut best_spread = -1.0f32;
        for d in 0..5 {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for (p, _) in items.iter() {
                lo = lo.min(p[d]);
                hi = hi.max(p[d]);
            }
            if hi - lo > best_spread {
                best_spread = hi - lo;
                dim = d;
            }
        }
        items.sort_by(|a, b| {
            a.0[dim]
                .partial_cmp(&b.0[dim])
                .unwrap()
                .then(a.1.cmp(&b.1))
        });
        let mid = items.len() / 2;
        let (point, id) = items[mid];
        let (left_items, rest) = items.split_at_mut(mid);
        let right_items = &mut rest[1..];
        Some(Box::new(KdNode {
            point,
            id,
            dim,
            left: Self::build_rec(left_items),
            right: Self::build_rec(right_items),
        }))
    }

    /// The k nearest points to `query`, excluding `exclude_id`, ordered by
    /// ascending (distance, id).
    pub fn knn(&self, query: &BilateralPoint, exclude_id: u32, k: usize) -> Vec<u32> {
        // best: ascending (dist2, id); worst candidate at the back
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        Self::search(&self.root, query, exclude_id, k, &mut best);
        best.into_iter().map(|(_, id)| id).collect()
    }

    fn search(
        node: &Option<Box<KdNode>>,
        query: &BilateralPoint,
        exclude_id: u32,
        k: usize,
        best: &mut Vec<(f64, u32)>,
    ) {
        let Some(n) = node else { return };
        if n.id != exclude_id {
            let d2 = dist2(query, &n.point);
            let cand = (d2, n.id);
            if best.len() < k || cand < best[best.len() - 1] {
                let pos = best.partition_point(|&b| b < cand);
                best.insert(pos, cand);
                if best.len() > k {
                    best.pop();
                }
            }
        }
        let delta = (query[n.dim] - n.point[n.dim]) as f64;
        let (near, far) = if delta < 0.0 {
            (&n.left, &n.right)
        } else {
            (&n.right, &n.left)
        };
        Self::search(near, query, exclude_id, k, best);
        // the far side may hold equal-distance points with lower ids, so do
        // not prune on exact equality
        if best.len() < k || delta * delta <= best[best.len() - 1].0 {
            Self::search(far, query, exclude_id, k, best);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_points(n: usize, seed: u64) -> Vec<BilateralPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(0.0..1.0f32),
                    rng.gen_range(0.0..1.0f32),
                    rng.gen_range(0.0..1.0f32),
                    rng.gen_range(0.0..0.5f32),
                    rng.gen_range(0.0..0.5f32),
                ]
            })
            .collect()
    }

    #[test]
    fn brute_force_two_points_mutual() {
        let pts = vec![[0.0; 5], [1.0, 0.0, 0.0, 0.0, 0.0]];
        let nn = brute_force_knn(&pts, 1).unwrap();
        assert_eq!(nn, vec![vec![1], vec![0]]);
    }

    #[test]
    fn brute_force_tie_prefers_lower_index() {
        // points 1 and 2 are equidistant from point 0
        let pts = vec![
            [0.0, 0.0, 0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0],
        ];
        let nn = brute_force_knn(&pts, 1).unwrap();
        assert_eq!(nn[0], vec![1]);
    }

    #[test]
    fn brute_force_rejects_k_too_large() {
        let pts = random_points(4, 1);
        assert!(brute_force_knn(&pts, 4).is_err());
    }

    #[test]
    fn kdtree_matches_brute_force_on_random_sets() {
        for seed in 0..20u64 {
            let n = 50 + (seed as usize * 17) % 200;
            let pts = random_points(n, seed);
            let oracle = brute_force_knn(&pts, 5).unwrap();
            let tree = KdTree::build(&pts);
            for (i, p) in pts.iter().enumerate() {
                let got = tree.knn(p, i as u32, 5);
                assert_eq!(got, oracle[i], "seed {seed} query {i}");
            }
        }
    }

    #[test]
    fn kdtree_handles_duplicate_points() {
        let mut pts = random_points(30, 99);
        for i in 0..10 {
            pts[i + 10] = pts[i]; // exact duplicates
        }
        let oracle = brute_force_knn(&pts, 5).unwrap();
        let tree = KdTree::build(&pts);
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(tree.knn(p, i as u32, 5), oracle[i]);
        }
    }

    #[test]
    fn graph_neighbor_from_colors_and_positions() {
        // 3 pixels: red, red, green at x = 0,1,2; with small lambda node 0's
        // neighbor is the other red pixel
        let img = Image::new(
            1,
            3,
            3,
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let params = KnnParams {
            k: 1,
            lambda_b: 0.1,
            sample_size: 3,
            seed: 0,
        };
        let g = build_knn_graph(&img, &params).unwrap();
        assert_eq!(g.neighbors_of(0), &[1]);

        // brute-force confirmation over the same embedding
        let pts: Vec<BilateralPoint> = (0..3).map(|p| embed(&img, p, 0.1)).collect();
        let oracle = brute_force_knn(&pts, 1).unwrap();
        assert_eq!(oracle[0], vec![1]);
    }

    #[test]
    fn exhaustive_k_covers_all_other_nodes() {
        let img = Image::new(
            2,
            2,
            3,
            vec![
                0.1, 0.2, 0.3, 0.9, 0.8, 0.7, 0.4, 0.5, 0.6, 0.2, 0.9, 0.1,
            ],
        )
        .unwrap();
        let params = KnnParams {
            k: 3,
            lambda_b: 0.5,
            sample_size: 4,
            seed: 0,
        };
        let g = build_knn_graph(&img, &params).unwrap();
        for i in 0..4 {
            let mut nb: Vec<u32> = g.neighbors_of(i).to_vec();
            nb.sort_unstable();
            let want: Vec<u32> = (0..4u32).filter(|&j| j != i as u32).collect();
            assert_eq!(nb, want);
        }
    }

    #[test]
    fn huge_lambda_makes_neighbors_spatial() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..4 * 4 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Image::new(4, 4, 3, data).unwrap();
        let params = KnnParams {
            k: 1,
            lambda_b: 1e4,
            sample_size: 16,
            seed: 0,
        };
        let g = build_knn_graph(&img, &params).unwrap();
        let pts: Vec<BilateralPoint> = (0..16).map(|p| embed(&img, p, 1e4)).collect();
        let oracle = brute_force_knn(&pts, 1).unwrap();
        for i in 0..16 {
            assert_eq!(g.neighbors_of(i), &oracle[i][..]);
            // the chosen neighbor is one of the spatially nearest pixels
            let (py, px) = (g.nodes()[i] / 4, g.nodes()[i] % 4);
            let q = g.nodes()[g.neighbors_of(i)[0] as usize];
            let (qy, qx) = (q / 4, q % 4);
            let d = (py as i32 - qy as i32).abs() + (px as i32 - qx as i32).abs();
            assert_eq!(d, 1, "node {i} picked a non-adjacent pixel");
        }
    }

    #[test]
    fn graph_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..16 * 16 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Image::new(16, 16, 3, data).unwrap();
        let params = KnnParams {
            k: 5,
            lambda_b: 0.5,
            sample_size: 64,
            seed: 42,
        };
        let a = build_knn_graph(&img, &params).unwrap();
        let b = build_knn_graph(&img, &params).unwrap();
        assert_eq!(a.nodes, b.nodes);
        assert_eq!(a.neighbors, b.neighbors);
    }

    #[test]
    fn bilateral_loss_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..8 * 8 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Image::new(8, 8, 3, data).unwrap();
        let g = build_knn_graph(&img, &KnnParams { sample_size: 64, ..KnnParams::default() })
            .unwrap();

        // constant frame: zero loss
        let constant = Image::constant(8, 8, 3, 0.4).unwrap();
        assert_eq!(bilateral_loss(&constant, &g).unwrap(), 0.0);

        // positive homogeneity: halving differences halves the loss
        let half: Vec<f32> = img.data().iter().map(|v| v * 0.5).collect();
        let half_img = Image::new(8, 8, 3, half).unwrap();
        let full = bilateral_loss(&img, &g).unwrap();
        let halved = bilateral_loss(&half_img, &g).unwrap();
        assert!((halved - full * 0.5).abs() < 1e-9);
        assert!(full >= 0.0);
    }
}

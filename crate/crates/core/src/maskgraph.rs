//! Proxy graphs from labeled masks.
//!
//! Nodes are object instances placed at their pixel centers of mass. Two
//! nodes are adjacent iff the closed segment between their centers crosses
//! no pixel of any third instance. Pixel `(r, c)` owns the closed cell
//! `[r - 0.5, r + 0.5] x [c - 0.5, c + 0.5]`; the segment is discretized by
//! supercover rasterization, so every cell it touches (corners included)
//! is tested.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::ObjectEmbedder;
use crate::error::{Error, Result};
use crate::image::{ClassLabel, LabeledMask, RgbImage};

pub const DEFAULT_N_MAX: usize = 16;
pub const GRAPH_EXTENSION: &str = "graph.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub class: ClassLabel,
    /// Center of mass as real-valued `(row, col)` in pixels.
    pub com: [f64; 2],
    pub embedding: Vec<f64>,
    #[serde(skip)]
    pub source: Option<u32>,
}

/// Nodes plus a symmetric 0/1 adjacency with zero diagonal.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TissueGraph {
    nodes: Vec<Node>,
    adj: Vec<bool>,
}

impl TissueGraph {
    pub fn new(nodes: Vec<Node>) -> Self {
        let n = nodes.len();
        TissueGraph { nodes, adj: vec![false; n * n] }
    }

    pub fn from_edges(nodes: Vec<Node>, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = TissueGraph::new(nodes);
        for &(i, j) in edges {
            if i == j || i >= g.len() || j >= g.len() {
                return Err(Error::InvalidInput(format!("invalid edge ({i}, {j}) for {} nodes", g.len())));
            }
            g.set_edge(i, j, true);
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node] {
        &mut self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.len() + j]
    }

    pub fn set_edge(&mut self, i: usize, j: usize, on: bool) {
        if i == j {
            return;
        }
        let n = self.len();
        self.adj[i * n + j] = on;
        self.adj[j * n + i] = on;
    }

    /// Edges with `i < j`, lexicographic.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| self.has_edge(i, j))
    }

    /// Adjacency as a dense row-major 0/1 matrix.
    pub fn adjacency(&self) -> Vec<f64> {
        self.adj.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn push_node(&mut self, node: Node) -> usize {
        let n = self.len();
        let mut adj = vec![false; (n + 1) * (n + 1)];
        for i in 0..n {
            for j in 0..n {
                adj[i * (n + 1) + j] = self.adj[i * n + j];
            }
        }
        self.nodes.push(node);
        self.adj = adj;
        n
    }

    /// Subgraph induced by `keep` (in the given order).
    pub fn induced(&self, keep: &[usize]) -> TissueGraph {
        let nodes = keep.iter().map(|&i| self.nodes[i].clone()).collect();
        let mut g = TissueGraph::new(nodes);
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                if a != b && self.has_edge(i, j) {
                    g.adj[a * keep.len() + b] = true;
                }
            }
        }
        g
    }

    /// Number of nodes of each class `1..=num_classes` (index 0 unused).
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes + 1];
        for n in &self.nodes {
            if (n.class as usize) <= num_classes {
                counts[n.class as usize] += 1;
            }
        }
        counts
    }

    /// Sort nodes by (class, COM row, COM col, source id) and permute the
    /// adjacency to match. Ties keep their current relative order.
    pub fn canonicalize(&mut self) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (&self.nodes[a], &self.nodes[b]);
            x.class
                .cmp(&y.class)
                .then(x.com[0].total_cmp(&y.com[0]))
                .then(x.com[1].total_cmp(&y.com[1]))
                .then(x.source.cmp(&y.source))
        });
        *self = self.induced(&order);
    }

    pub fn canonicalized(mut self) -> Self {
        self.canonicalize();
        self
    }

    /// Check symmetry, zero diagonal, class range, capacity and (optionally) COM bounds.
    pub fn validate(&self, num_classes: usize, n_max: usize, bounds: Option<(usize, usize)>) -> Result<()> {
        let n = self.len();
        if n > n_max {
            return Err(Error::Capacity { what: format!("graph has {n} nodes"), limit: n_max });
        }
        if self.adj.len() != n * n {
            return Err(Error::InvalidInput("adjacency size mismatch".into()));
        }
        for i in 0..n {
            if self.adj[i * n + i] {
                return Err(Error::InvalidInput(format!("self-loop at node {i}")));
            }
            for j in 0..n {
                if self.adj[i * n + j] != self.adj[j * n + i] {
                    return Err(Error::InvalidInput(format!("asymmetric adjacency at ({i}, {j})")));
                }
            }
            let node = &self.nodes[i];
            if node.class == 0 || node.class as usize > num_classes {
                return Err(Error::InvalidInput(format!("node {i} has class {} outside 1..={num_classes}", node.class)));
            }
            if !node.com.iter().all(|v| v.is_finite()) || !node.embedding.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!("node {i} has non-finite attributes")));
            }
            if let Some((h, w)) = bounds {
                let [r, c] = node.com;
                if r < 0.0 || c < 0.0 || r > (h - 1) as f64 || c > (w - 1) as f64 {
                    return Err(Error::InvalidInput(format!("node {i} COM ({r}, {c}) outside {h}x{w}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = GraphJson {
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(id, n)| NodeJson { id, class: n.class, com: n.com, embedding: n.embedding.clone() })
                .collect(),
            edges: self.edges().into_iter().map(|(i, j)| [i, j]).collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphJson = serde_json::from_str(text)?;
        let n = doc.nodes.len();
        let mut slots: Vec<Option<Node>> = vec![None; n];
        for nj in doc.nodes {
            if nj.id >= n || slots[nj.id].is_some() {
                return Err(Error::InvalidInput(format!("node ids must be a permutation of 0..{n}, saw {}", nj.id)));
            }
            slots[nj.id] = Some(Node { class: nj.class, com: nj.com, embedding: nj.embedding, source: None });
        }
        let nodes = slots.into_iter().map(|s| s.expect("filled")).collect();
        let edges: Vec<(usize, usize)> = doc.edges.iter().map(|e| (e[0], e[1])).collect();
        TissueGraph::from_edges(nodes, &edges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TissueGraph::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Format { path: path.into(), detail: j.to_string() },
            other => other,
        })
    }
}

/// `{"nodes":[{"id":..,"class":..,"com":[r,c],"embedding":[..]}],"edges":[[i,j],..]}`
#[derive(Serialize, Deserialize)]
struct GraphJson {
    nodes: Vec<NodeJson>,
    edges: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    id: usize,
    class: ClassLabel,
    com: [f64; 2],
    embedding: Vec<f64>,
}

/// Pixel center of mass per instance, as exact means of pixel coordinates.
pub fn compute_coms(mask: &LabeledMask) -> Result<BTreeMap<u32, [f64; 2]>> {
    let mut acc: BTreeMap<u32, (f64, f64, usize)> = mask.classes().keys().map(|&id| (id, (0.0, 0.0, 0))).collect();
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            let id = mask.id_at(r, c);
            if id != 0 {
                let e = acc
                    .get_mut(&id)
                    .ok_or_else(|| Error::InvalidInput(format!("instance {id} has no class")))?;
                e.0 += r as f64;
                e.1 += c as f64;
                e.2 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|(id, (sr, sc, n))| {
            if n == 0 {
                Err(Error::InvalidInput(format!("instance {id} is empty")))
            } else {
                Ok((id, [sr / n as f64, sc / n as f64]))
            }
        })
        .collect()
}

/// Every pixel whose closed cell the closed segment `p0 -> p1` touches,
/// clipped to a `height x width` grid. Row-major order, no duplicates.
pub fn supercover(p0: [f64; 2], p1: [f64; 2], height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let (rmin, rmax) = (p0[0].min(p1[0]), p0[0].max(p1[0]));
    let r_lo = ((rmin - 0.5).ceil() as i64).max(0);
    let r_hi = ((rmax + 0.5).floor() as i64).min(height as i64 - 1);
    for r in r_lo..=r_hi {
        let (ca, cb) = if p0[0] == p1[0] {
            (p0[1], p1[1])
        } else {
            let dr = p1[0] - p0[0];
            let ta = ((r as f64 - 0.5 - p0[0]) / dr).clamp(0.0, 1.0);
            let tb = ((r as f64 + 0.5 - p0[0]) / dr).clamp(0.0, 1.0);
            let at = |t: f64| p0[1] + t * (p1[1] - p0[1]);
            (at(ta), at(tb))
        };
        let (cmin, cmax) = (ca.min(cb), ca.max(cb));
        let c_lo = ((cmin - 0.5).ceil() as i64).max(0);
        let c_hi = ((cmax + 0.5).floor() as i64).min(width as i64 - 1);
        for c in c_lo..=c_hi {
            out.push((r as usize, c as usize));
        }
    }
    out
}

/// Visibility criterion between instances `i` and `j`: no pixel on the
/// segment between their centers belongs to a third instance.
/// Background and the endpoint instances never block.
pub fn visibility_edge(mask: &LabeledMask, i: u32, j: u32, coms: &BTreeMap<u32, [f64; 2]>) -> Result<bool> {
    if i == j {
        return Err(Error::InvalidInput("visibility_edge needs two distinct instances".into()));
    }
    let (ci, cj) = match (coms.get(&i), coms.get(&j)) {
        (Some(a), Some(b)) => (*a, *b),
        _ => return Err(Error::InvalidInput(format!("instance {i} or {j} not in mask"))),
    };
    Ok(supercover(ci, cj, mask.height(), mask.width())
        .into_iter()
        .all(|(r, c)| {
            let k = mask.id_at(r, c);
            k == 0 || k == i || k == j
        }))
}

/// One node per instance in canonical order, with visibility edges.
///
/// Embeddings come from `embedder` when given (it needs the image),
/// otherwise they are zero vectors of `zero_dim` entries.
pub fn build_graph(
    mask: &LabeledMask,
    embedder: Option<(&RgbImage, &dyn ObjectEmbedder)>,
    n_max: usize,
    zero_dim: usize,
) -> Result<TissueGraph> {
    let n = mask.instance_count();
    if n > n_max {
        return Err(Error::Capacity { what: format!("mask has {n} instances, graph capacity N_max"), limit: n_max });
    }
    let coms = compute_coms(mask)?;
    let mut nodes = Vec::with_capacity(n);
    for (&id, &com) in &coms {
        let embedding = match embedder {
            Some((image, e)) => e.embed(image, mask, id)?,
            None => vec![0.0; zero_dim],
        };
        nodes.push(Node { class: mask.class_of(id).expect("validated mask"), com, embedding, source: Some(id) });
    }
    let ids: Vec<u32> = coms.keys().copied().collect();
    let mut g = TissueGraph::new(nodes);
    for a in 0..n {
        for b in a + 1..n {
            if visibility_edge(mask, ids[a], ids[b], &coms)? {
                g.set_edge(a, b, true);
            }
        }
    }
    g.canonicalize();
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> LabeledMask {
        let h = rows.len();
        let w = rows[0].len();
        let mut ids = Vec::new();
        let mut classes = BTreeMap::new();
        for row in rows {
            for ch in row.chars() {
                let id = ch.to_digit(10).unwrap_or(0);
                if id > 0 {
                    classes.insert(id, 1);
                }
                ids.push(id);
            }
        }
        LabeledMask::new(h, w, ids, classes).unwrap()
    }

    #[test]
    fn coms_of_simple_shapes() {
        let mut ids = vec![0; 100];
        ids[4 * 10 + 7] = 1;
        for r in 2..5 {
            for c in 2..5 {
                ids[r * 10 + c] = 2;
            }
        }
        let classes = BTreeMap::from([(1, 1), (2, 2)]);
        let m = LabeledMask::new(10, 10, ids, classes).unwrap();
        let coms = compute_coms(&m).unwrap();
        assert_eq!(coms[&1], [4.0, 7.0]);
        assert_eq!(coms[&2], [3.0, 3.0]);
    }

    #[test]
    fn two_instances_on_background_are_adjacent() {
        let m = mask_from(&["1......2"]);
        let g = build_graph(&m, None, 16, 4).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.edges(), vec![(0, 1)]);
        assert!(g.has_edge(1, 0));
    }

    #[test]
    fn blocker_on_midpoint_removes_edge() {
        let m = mask_from(&["....3...", "1...3..2", "....3..."]);
        let coms = compute_coms(&m).unwrap();
        assert!(!visibility_edge(&m, 1, 2, &coms).unwrap());
        assert!(visibility_edge(&m, 1, 3, &coms).unwrap());
    }

    #[test]
    fn empty_mask_gives_empty_graph() {
        let g = build_graph(&LabeledMask::empty(8, 8), None, 16, 4).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn capacity_is_enforced() {
        let m = mask_from(&["1.2.3.4"]);
        let err = build_graph(&m, None, 3, 0).unwrap_err();
        assert!(matches!(err, Error::Capacity { limit: 3, .. }));
    }

    #[test]
    fn supercover_includes_both_cells_at_corner() {
        // The diagonal through pixel corners at (0.5, 0.5) touches both off-diagonal cells.
        let cells = supercover([0.0, 0.0], [1.0, 1.0], 4, 4);
        assert_eq!(cells, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        let horiz = supercover([2.0, 0.0], [2.0, 3.0], 4, 4);
        assert_eq!(horiz, vec![(2, 0), (2, 1), (2, 2), (2, 3)]);
    }

    #[test]
    fn json_schema_round_trip() {
        let nodes = vec![
            Node { class: 1, com: [1.5, 2.0], embedding: vec![0.25, -1.0], source: None },
            Node { class: 2, com: [3.0, 4.0], embedding: vec![0.0, 1.0], source: None },
        ];
        let g = TissueGraph::from_edges(nodes, &[(1, 0)]).unwrap();
        let text = g.to_json().unwrap();
        assert_eq!(
            text,
            r#"{"nodes":[{"id":0,"class":1,"com":[1.5,2.0],"embedding":[0.25,-1.0]},{"id":1,"class":2,"com":[3.0,4.0],"embedding":[0.0,1.0]}],"edges":[[0,1]]}"#
        );
        assert_eq!(TissueGraph::from_json(&text).unwrap(), g);
    }
}

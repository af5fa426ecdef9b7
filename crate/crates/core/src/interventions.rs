//! Graph-space edits used to build new conditioning graphs.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ClassLabel;
use crate::maskgraph::TissueGraph;
use crate::rng;

/// Consecutive rejected Cut-Paste draws before giving up.
pub const MAX_REJECTIONS: usize = 100;

pub fn remove_node(g: &TissueGraph, v: usize) -> Result<TissueGraph> {
    if v >= g.len() {
        return Err(Error::InvalidInput(format!("node {v} not in graph of {} nodes", g.len())));
    }
    let keep: Vec<usize> = (0..g.len()).filter(|&i| i != v).collect();
    Ok(g.induced(&keep).canonicalized())
}

/// Relabel node `v`. The node keeps its index; call `canonicalize` to
/// restore canonical order.
pub fn change_class(g: &TissueGraph, v: usize, class: ClassLabel, num_classes: usize) -> Result<TissueGraph> {
    if v >= g.len() {
        return Err(Error::InvalidInput(format!("node {v} not in graph of {} nodes", g.len())));
    }
    if class == 0 || class as usize > num_classes {
        return Err(Error::InvalidInput(format!("class {class} outside 1..={num_classes}")));
    }
    let mut out = g.clone();
    out.nodes_mut()[v].class = class;
    Ok(out)
}

/// Connected component labels, numbered in order of first node.
pub fn components(g: &TissueGraph) -> Vec<usize> {
    let n = g.len();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        label[s] = next;
        while let Some(u) = stack.pop() {
            for w in g.neighbors(u) {
                if label[w] == usize::MAX {
                    label[w] = next;
                    stack.push(w);
                }
            }
        }
        next += 1;
    }
    label
}

pub fn is_connected(g: &TissueGraph) -> bool {
    components(g).iter().all(|&c| c == 0)
}

/// Bridges as `(i, j)` with `i < j`, sorted, by lowpoint DFS.
pub fn find_bridges(g: &TissueGraph) -> Vec<(usize, usize)> {
    let n = g.len();
    let adj: Vec<Vec<usize>> = (0..n).map(|i| g.neighbors(i).collect()).collect();
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut time = 0;
    let mut out = Vec::new();
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // (node, parent, next neighbour index)
        let mut stack = vec![(root, usize::MAX, 0usize)];
        disc[root] = time;
        low[root] = time;
        time += 1;
        while let Some(top) = stack.last_mut() {
            let (u, parent, k) = *top;
            if k < adj[u].len() {
                top.2 += 1;
                let w = adj[u][k];
                if disc[w] == usize::MAX {
                    disc[w] = time;
                    low[w] = time;
                    time += 1;
                    stack.push((w, u, 0));
                } else if w != parent {
                    low[u] = low[u].min(disc[w]);
                }
            } else {
                stack.pop();
                if parent != usize::MAX {
                    low[parent] = low[parent].min(low[u]);
                    if low[u] > disc[parent] {
                        out.push((parent.min(u), parent.max(u)));
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// The two sides of bridge `(i, j)`: the components of `i` and of `j` once
/// the edge is removed. For a connected graph they partition the nodes.
pub fn split_on_bridge(g: &TissueGraph, e: (usize, usize)) -> Result<(TissueGraph, TissueGraph)> {
    let (i, j) = e;
    if i >= g.len() || j >= g.len() || !g.has_edge(i, j) {
        return Err(Error::InvalidInput(format!("({i}, {j}) is not an edge")));
    }
    let mut cut = g.clone();
    cut.set_edge(i, j, false);
    let comp = components(&cut);
    if comp[i] == comp[j] {
        return Err(Error::InvalidInput(format!("({i}, {j}) is not a bridge")));
    }
    let side = |c: usize| -> Vec<usize> { (0..g.len()).filter(|&k| comp[k] == c).collect() };
    Ok((cut.induced(&side(comp[i])), cut.induced(&side(comp[j]))))
}

/// Both sides of every bridge of every graph. Graphs without bridges
/// contribute themselves whole.
pub fn subgraph_pool(graphs: &[TissueGraph]) -> Result<Vec<TissueGraph>> {
    let mut pool = Vec::new();
    for g in graphs.iter().filter(|g| !g.is_empty()) {
        let bridges = find_bridges(g);
        if bridges.is_empty() {
            pool.push(g.clone());
        }
        for e in bridges {
            let (a, b) = split_on_bridge(g, e)?;
            pool.push(a);
            pool.push(b);
        }
    }
    Ok(pool)
}

/// Tile `(row, col)` bounds, inclusive, for part `k` of `parts` on an
/// `h x w` extent.
pub fn tile_bounds(k: usize, parts: usize, extent: (usize, usize)) -> ([f64; 2], [f64; 2]) {
    let cols = (parts as f64).sqrt().ceil() as usize;
    let rows = parts.div_ceil(cols);
    let (h, w) = (extent.0 as f64, extent.1 as f64);
    let (th, tw) = (h / rows as f64, w / cols as f64);
    let (r, c) = (k / cols, k % cols);
    let span = |i: usize, n: usize, size: f64, total: f64| {
        let lo = (i as f64 * size).ceil();
        let hi = if i + 1 == n { total - 1.0 } else { ((i + 1) as f64 * size).ceil() - 1.0 };
        [lo, hi]
    };
    (span(r, rows, th, h), span(c, cols, tw, w))
}

fn place(part: &TissueGraph, rows: [f64; 2], cols: [f64; 2]) -> TissueGraph {
    let mut out = part.clone();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for n in part.nodes() {
        for a in 0..2 {
            lo[a] = lo[a].min(n.com[a]);
            hi[a] = hi[a].max(n.com[a]);
        }
    }
    let tiles = [rows, cols];
    for n in out.nodes_mut() {
        for a in 0..2 {
            let (span, room) = (hi[a] - lo[a], tiles[a][1] - tiles[a][0]);
            let scale = if span > room { room / span } else { 1.0 };
            let centre = 0.5 * (tiles[a][0] + tiles[a][1]);
            let v = centre + (n.com[a] - 0.5 * (lo[a] + hi[a])) * scale;
            n.com[a] = v.clamp(tiles[a][0], tiles[a][1]);
        }
    }
    out
}

/// Join `parts` into one graph: part `k` is moved into tile `k` (and shrunk
/// about its centre if its COM box is larger than the tile), then each part
/// is linked to the next by one edge between their closest pair of nodes.
pub fn compose(parts: &[&TissueGraph], extent: (usize, usize)) -> TissueGraph {
    let placed: Vec<TissueGraph> = parts
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let (r, c) = tile_bounds(k, parts.len(), extent);
            place(p, r, c)
        })
        .collect();
    let mut out = TissueGraph::default();
    let mut offsets = Vec::with_capacity(placed.len());
    for p in &placed {
        let off = out.len();
        offsets.push(off);
        for mut n in p.nodes().iter().cloned() {
            n.source = None;
            out.push_node(n);
        }
        for (i, j) in p.edges() {
            out.set_edge(off + i, off + j, true);
        }
    }
    for k in 1..placed.len() {
        let (a, b) = (&placed[k - 1], &placed[k]);
        let mut best = (f64::INFINITY, 0, 0);
        for (i, ni) in a.nodes().iter().enumerate() {
            for (j, nj) in b.nodes().iter().enumerate() {
                let d = (ni.com[0] - nj.com[0]).powi(2) + (ni.com[1] - nj.com[1]).powi(2);
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        if best.0.is_finite() {
            out.set_edge(offsets[k - 1] + best.1, offsets[k] + best.2, true);
        }
    }
    out.canonicalized()
}

/// Draw `k` in `2..=k_max` parts (one part when `k_max == 1`) from `pool`
/// and compose them, redrawing whenever the result exceeds `n_max` nodes.
pub fn cut_paste(pool: &[TissueGraph], k_max: usize, seed: u64, n_max: usize, extent: (usize, usize)) -> Result<TissueGraph> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("cut-paste needs a non-empty subgraph pool".into()));
    }
    if k_max == 0 {
        return Err(Error::Config("cut-paste needs k_max >= 1".into()));
    }
    let mut r = rng::sub_rng(seed, "cut-paste");
    for _ in 0..MAX_REJECTIONS {
        let k = if k_max == 1 { 1 } else { r.random_range(2..=k_max) };
        let parts: Vec<&TissueGraph> = (0..k).map(|_| pool.choose(&mut r).expect("non-empty")).collect();
        if parts.iter().map(|p| p.len()).sum::<usize>() <= n_max {
            return Ok(compose(&parts, extent));
        }
    }
    Err(Error::Capacity {
        what: format!("cut-paste rejected {MAX_REJECTIONS} consecutive draws over N_max"),
        limit: n_max,
    })
}

/// Greedy class-constrained matching by increasing COM distance.
/// Returns `(index in a, index in b)` pairs.
pub fn match_nodes(a: &TissueGraph, b: &TissueGraph) -> Vec<(usize, usize)> {
    let mut cand = Vec::new();
    for (i, na) in a.nodes().iter().enumerate() {
        for (j, nb) in b.nodes().iter().enumerate() {
            if na.class == nb.class {
                let d = (na.com[0] - nb.com[0]).powi(2) + (na.com[1] - nb.com[1]).powi(2);
                cand.push((d, i, j));
            }
        }
    }
    cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut out = Vec::new();
    for (_, i, j) in cand {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Interpolate between two graphs. Matched nodes have COM and embedding
/// blended as `(1 - t) a + t b`; everything else (class, unmatched nodes,
/// adjacency) comes from `a` when `t < 0.5` and from `b` otherwise.
pub fn interpolate(a: &TissueGraph, b: &TissueGraph, t: f64) -> Result<TissueGraph> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("interpolation parameter {t} outside [0, 1]")));
    }
    let pairs = match_nodes(a, b);
    let from_a = t < 0.5;
    let (dom, other) = if from_a { (a, b) } else { (b, a) };
    let mut partner: Vec<Option<usize>> = vec![None; dom.len()];
    for &(i, j) in &pairs {
        let (d, o) = if from_a { (i, j) } else { (j, i) };
        partner[d] = Some(o);
    }
    let mut out = dom.clone();
    for (d, p) in partner.iter().enumerate() {
        let Some(o) = *p else { continue };
        let (na, nb) = if from_a { (dom.node(d), other.node(o)) } else { (other.node(o), dom.node(d)) };
        if na.embedding.len() != nb.embedding.len() {
            return Err(Error::InvalidInput("interpolated graphs have different embedding widths".into()));
        }
        let lerp = |x: f64, y: f64| (1.0 - t) * x + t * y;
        let node = &mut out.nodes_mut()[d];
        node.com = [lerp(na.com[0], nb.com[0]), lerp(na.com[1], nb.com[1])];
        node.embedding = na.embedding.iter().zip(&nb.embedding).map(|(&x, &y)| lerp(x, y)).collect();
    }
    Ok(out.canonicalized())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterventionKind {
    Remove,
    ChangeClass,
    CutPaste,
    CutPasteShort,
    Interpolate,
}

impl InterventionKind {
    pub const ALL: [InterventionKind; 5] = [
        InterventionKind::Remove,
        InterventionKind::ChangeClass,
        InterventionKind::CutPaste,
        InterventionKind::CutPasteShort,
        InterventionKind::Interpolate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InterventionKind::Remove => "remove",
            InterventionKind::ChangeClass => "change-class",
            InterventionKind::CutPaste => "cut-paste",
            InterventionKind::CutPasteShort => "cut-paste-short",
            InterventionKind::Interpolate => "interpolate",
        }
    }
}

/// One intervention with exactly the parameters its kind needs. Graph
/// indices refer to the source set the spec is applied against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InterventionSpec {
    Remove { graph: usize, node: usize },
    ChangeClass { graph: usize, node: usize, to_class: ClassLabel },
    CutPaste { max_parts: usize },
    CutPasteShort,
    Interpolate { a: usize, b: usize, t: f64 },
}

impl InterventionSpec {
    pub fn kind(&self) -> InterventionKind {
        match self {
            InterventionSpec::Remove { .. } => InterventionKind::Remove,
            InterventionSpec::ChangeClass { .. } => InterventionKind::ChangeClass,
            InterventionSpec::CutPaste { .. } => InterventionKind::CutPaste,
            InterventionSpec::CutPasteShort => InterventionKind::CutPasteShort,
            InterventionSpec::Interpolate { .. } => InterventionKind::Interpolate,
        }
    }
}

/// Source graphs plus the derived subgraph pool.
pub struct Intervener<'a> {
    pub graphs: &'a [TissueGraph],
    pub pool: Vec<TissueGraph>,
    pub num_classes: usize,
    pub n_max: usize,
    pub extent: (usize, usize),
}

impl<'a> Intervener<'a> {
    pub fn new(graphs: &'a [TissueGraph], num_classes: usize, n_max: usize, extent: (usize, usize)) -> Result<Self> {
        Ok(Intervener { graphs, pool: subgraph_pool(graphs)?, num_classes, n_max, extent })
    }

    fn source(&self, i: usize) -> Result<&TissueGraph> {
        self.graphs
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("graph {i} not among {} sources", self.graphs.len())))
    }

    pub fn apply(&self, spec: &InterventionSpec, seed: u64) -> Result<TissueGraph> {
        match *spec {
            InterventionSpec::Remove { graph, node } => remove_node(self.source(graph)?, node),
            InterventionSpec::ChangeClass { graph, node, to_class } => {
                Ok(change_class(self.source(graph)?, node, to_class, self.num_classes)?.canonicalized())
            }
            InterventionSpec::CutPaste { max_parts } => cut_paste(&self.pool, max_parts, seed, self.n_max, self.extent),
            InterventionSpec::CutPasteShort => cut_paste(&self.pool, 2, seed, self.n_max, self.extent),
            InterventionSpec::Interpolate { a, b, t } => interpolate(self.source(a)?, self.source(b)?, t),
        }
    }

    /// A spec of the given kind with parameters drawn from `seed`.
    pub fn random_spec(&self, kind: InterventionKind, seed: u64) -> Result<InterventionSpec> {
        let mut r = rng::sub_rng(seed, kind.name());
        let nonempty: Vec<usize> = (0..self.graphs.len()).filter(|&i| !self.graphs[i].is_empty()).collect();
        let pick = |r: &mut rng::Rng| -> Result<usize> {
            nonempty.choose(r).copied().ok_or_else(|| Error::InvalidInput("no non-empty source graphs".into()))
        };
        Ok(match kind {
            InterventionKind::Remove => {
                let graph = pick(&mut r)?;
                InterventionSpec::Remove { graph, node: r.random_range(0..self.graphs[graph].len()) }
            }
            InterventionKind::ChangeClass => {
                let graph = pick(&mut r)?;
                let node = r.random_range(0..self.graphs[graph].len());
                let current = self.graphs[graph].node(node).class;
                let mut to_class = current;
                if self.num_classes > 1 {
                    while to_class == current {
                        to_class = r.random_range(1..=self.num_classes as ClassLabel);
                    }
                }
                InterventionSpec::ChangeClass { graph, node, to_class }
            }
            InterventionKind::CutPaste => InterventionSpec::CutPaste { max_parts: 4 },
            InterventionKind::CutPasteShort => InterventionSpec::CutPasteShort,
            InterventionKind::Interpolate => {
                InterventionSpec::Interpolate { a: pick(&mut r)?, b: pick(&mut r)?, t: r.random_range(0.0..=1.0) }
            }
        })
    }
}

//! Graph representation, edge-list ingestion, degrees, and the modified
//! normalised Laplacian `D^{-1/2} A D^{-1/2}`.
//!
//! Graphs are binary and hollow (no self-loops). Undirected graphs store the
//! symmetric closure of the edge set, so `(i, j)` and `(j, i)` are both
//! present. Storage is an edge set plus per-row neighbour lists; dense
//! matrices are only materialised below a configurable size cap.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Default cap on dense materialisation of A or L.
pub const DENSE_CAP: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Undirected,
    Directed,
    Bipartite,
}

impl std::fmt::Display for GraphKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GraphKind::Undirected => write!(f, "undirected"),
            GraphKind::Directed => write!(f, "directed"),
            GraphKind::Bipartite => write!(f, "bipartite"),
        }
    }
}

impl std::str::FromStr for GraphKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "undirected" => Ok(GraphKind::Undirected),
            "directed" => Ok(GraphKind::Directed),
            "bipartite" => Ok(GraphKind::Bipartite),
            other => Err(Error::Invalid(format!("unknown graph kind `{other}`"))),
        }
    }
}

/// Sparse binary graph. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Graph {
    kind: GraphKind,
    n_rows: usize,
    n_cols: usize,
    /// Sorted, deduplicated (i, j) pairs. Undirected graphs hold both
    /// orientations of every edge.
    edges: Vec<(u32, u32)>,
    row_adj: Vec<Vec<u32>>,
    labels: Option<Vec<String>>,
    labels_right: Option<Vec<String>>,
}

impl Graph {
    /// Build a graph from raw index pairs.
    ///
    /// Self-loops are rejected for square kinds; undirected edge sets are
    /// closed under symmetry; duplicates are collapsed.
    pub fn from_edges(
        kind: GraphKind,
        n_rows: usize,
        n_cols: usize,
        edges: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Graph> {
        if kind != GraphKind::Bipartite && n_rows != n_cols {
            return Err(Error::Shape(format!(
                "{kind} graph requires n_rows == n_cols, got {n_rows}x{n_cols}"
            )));
        }
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::EmptyGraph("graph has no nodes".into()));
        }
        let mut set: Vec<(u32, u32)> = Vec::new();
        for (i, j) in edges {
            if (i as usize) >= n_rows || (j as usize) >= n_cols {
                return Err(Error::Shape(format!(
                    "edge ({i}, {j}) out of range for {n_rows}x{n_cols}"
                )));
            }
            if kind != GraphKind::Bipartite && i == j {
                return Err(Error::Invalid(format!(
                    "self-loop ({i}, {i}) not permitted; adjacency is hollow"
                )));
            }
            set.push((i, j));
            if kind == GraphKind::Undirected {
                set.push((j, i));
            }
        }
        set.sort_unstable();
        set.dedup();
        let mut row_adj = vec![Vec::new(); n_rows];
        for &(i, j) in &set {
            row_adj[i as usize].push(j);
        }
        Ok(Graph {
            kind,
            n_rows,
            n_cols,
            edges: set,
            row_adj,
            labels: None,
            labels_right: None,
        })
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Number of stored (i, j) pairs; for undirected graphs this counts both
    /// orientations of every edge.
    pub fn n_pairs(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.row_adj[i]
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn labels_right(&self) -> Option<&[String]> {
        self.labels_right.as_deref()
    }

    pub fn set_labels(&mut self, left: Option<Vec<String>>, right: Option<Vec<String>>) {
        self.labels = left;
        self.labels_right = right;
    }

    /// Human-readable name of row node `i` (label when known).
    pub fn node_name(&self, i: usize) -> String {
        match &self.labels {
            Some(l) => l[i].clone(),
            None => i.to_string(),
        }
    }

    /// Row degrees: out-degree for directed graphs, plain degree otherwise.
    pub fn degrees(&self) -> Vec<usize> {
        self.row_adj.iter().map(Vec::len).collect()
    }

    /// Dense adjacency (or bi-adjacency), refused above `cap`.
    pub fn dense_adjacency(&self, cap: usize) -> Result<DMatrix<f64>> {
        if self.n_rows.max(self.n_cols) > cap {
            return Err(Error::Shape(format!(
                "dense materialisation of {}x{} exceeds cap {cap}",
                self.n_rows, self.n_cols
            )));
        }
        let mut a = DMatrix::zeros(self.n_rows, self.n_cols);
        for &(i, j) in &self.edges {
            a[(i as usize, j as usize)] = 1.0;
        }
        Ok(a)
    }
}

/// Result of loading an edge list, with ingestion counters.
#[derive(Debug)]
pub struct EdgeListLoad {
    pub graph: Graph,
    pub self_loops_dropped: usize,
    pub duplicates_collapsed: usize,
}

/// Read a whitespace-separated edge list.
///
/// One edge per line, two node tokens, `#` starts a comment line. Nodes are
/// indexed by first appearance; bipartite files index the two columns
/// independently. Self-loops are dropped (counted), undirected input is
/// symmetrised, duplicates are collapsed when `dedupe` is set and rejected
/// otherwise.
pub fn load_edgelist(path: impl AsRef<Path>, kind: GraphKind, dedupe: bool) -> Result<EdgeListLoad> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    parse_edgelist(reader, kind, dedupe, &path.display().to_string())
}

/// Parse an edge list from any reader; `origin` names the source in errors.
pub fn parse_edgelist(
    reader: impl BufRead,
    kind: GraphKind,
    dedupe: bool,
    origin: &str,
) -> Result<EdgeListLoad> {
    let mut left: HashMap<String, u32> = HashMap::new();
    let mut right: HashMap<String, u32> = HashMap::new();
    let mut left_names: Vec<String> = Vec::new();
    let mut right_names: Vec<String> = Vec::new();
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    let mut seen: HashMap<(u32, u32), ()> = HashMap::new();
    let mut self_loops = 0usize;
    let mut dupes = 0usize;

    let bip = kind == GraphKind::Bipartite;
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::Parse {
            path: origin.into(),
            line: lineno,
            msg: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tok = trimmed.split_whitespace();
        let (a, b) = match (tok.next(), tok.next(), tok.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::Parse {
                    path: origin.into(),
                    line: lineno,
                    msg: format!("expected two node tokens, got `{trimmed}`"),
                })
            }
        };
        let i = intern(a, &mut left, &mut left_names);
        let j = if bip {
            intern(b, &mut right, &mut right_names)
        } else {
            intern(b, &mut left, &mut left_names)
        };
        if !bip && i == j {
            self_loops += 1;
            continue;
        }
        let key = if kind == GraphKind::Undirected {
            (i.min(j), i.max(j))
        } else {
            (i, j)
        };
        if seen.insert(key, ()).is_some() {
            if dedupe {
                dupes += 1;
                continue;
            }
            return Err(Error::Parse {
                path: origin.into(),
                line: lineno,
                msg: format!("duplicate edge `{a} {b}`"),
            });
        }
        pairs.push(key);
    }

    let n_rows = left_names.len();
    let n_cols = if bip { right_names.len() } else { n_rows };
    if n_rows == 0 || pairs.is_empty() {
        return Err(Error::EmptyGraph(format!("{origin} contains no edges")));
    }
    let mut graph = Graph::from_edges(kind, n_rows, n_cols, pairs)?;
    graph.set_labels(
        Some(left_names),
        if bip { Some(right_names) } else { None },
    );
    Ok(EdgeListLoad {
        graph,
        self_loops_dropped: self_loops,
        duplicates_collapsed: dupes,
    })
}

fn intern(name: &str, map: &mut HashMap<String, u32>, names: &mut Vec<String>) -> u32 {
    if let Some(&ix) = map.get(name) {
        return ix;
    }
    let ix = names.len() as u32;
    map.insert(name.to_string(), ix);
    names.push(name.to_string());
    ix
}

/// Write the canonical edge list: sorted pairs, `i < j` for undirected,
/// label tokens when the graph carries labels.
pub fn write_edgelist(graph: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let name_left = |i: u32| match graph.labels() {
        Some(l) => l[i as usize].clone(),
        None => i.to_string(),
    };
    let name_right = |j: u32| match (graph.kind(), graph.labels_right(), graph.labels()) {
        (GraphKind::Bipartite, Some(r), _) => r[j as usize].clone(),
        (_, _, Some(l)) => l[j as usize].clone(),
        _ => j.to_string(),
    };
    for &(i, j) in graph.edges() {
        if graph.kind() == GraphKind::Undirected && i > j {
            continue;
        }
        writeln!(w, "{} {}", name_left(i), name_right(j)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsolatedPolicy {
    /// Refuse graphs with zero-degree nodes (D^{-1/2} is undefined there).
    Error,
    /// Drop zero-degree nodes and record the retained index map.
    Drop,
}

/// The modified normalised Laplacian `L = D^{-1/2} A D^{-1/2}` of an
/// undirected graph, kept as a multiply-capable operator.
#[derive(Debug, Clone)]
pub struct Laplacian {
    adj: Vec<Vec<u32>>,
    inv_sqrt_deg: Vec<f64>,
    retained: Vec<u32>,
}

impl Laplacian {
    pub fn dim(&self) -> usize {
        self.adj.len()
    }

    /// Original node indices of the retained rows.
    pub fn retained(&self) -> &[u32] {
        &self.retained
    }

    /// y = L x.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, nbrs) in self.adj.iter().enumerate() {
            let mut acc = 0.0;
            for &j in nbrs {
                acc += self.inv_sqrt_deg[j as usize] * x[j as usize];
            }
            y[i] = self.inv_sqrt_deg[i] * acc;
        }
    }

    pub fn materialize(&self, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.dim();
        if n > cap {
            return Err(Error::Shape(format!(
                "dense materialisation of {n}x{n} exceeds cap {cap}"
            )));
        }
        let mut l = DMatrix::zeros(n, n);
        for (i, nbrs) in self.adj.iter().enumerate() {
            for &j in nbrs {
                l[(i, j as usize)] = self.inv_sqrt_deg[i] * self.inv_sqrt_deg[j as usize];
            }
        }
        Ok(l)
    }
}

/// Build `D^{-1/2} A D^{-1/2}` for an undirected graph.
pub fn laplacian(graph: &Graph, isolated: IsolatedPolicy) -> Result<Laplacian> {
    if graph.kind() != GraphKind::Undirected {
        return Err(Error::Invalid(
            "normalised Laplacian requires an undirected graph".into(),
        ));
    }
    let deg = graph.degrees();
    let retained: Vec<u32> = match isolated {
        IsolatedPolicy::Error => {
            if let Some(i) = deg.iter().position(|&d| d == 0) {
                return Err(Error::IsolatedNode {
                    node: graph.node_name(i),
                });
            }
            (0..graph.n_rows() as u32).collect()
        }
        IsolatedPolicy::Drop => (0..graph.n_rows() as u32)
            .filter(|&i| deg[i as usize] > 0)
            .collect(),
    };
    let mut remap = vec![u32::MAX; graph.n_rows()];
    for (new, &old) in retained.iter().enumerate() {
        remap[old as usize] = new as u32;
    }
    let mut adj = Vec::with_capacity(retained.len());
    let mut inv_sqrt_deg = Vec::with_capacity(retained.len());
    for &old in &retained {
        let nbrs: Vec<u32> = graph
            .neighbors(old as usize)
            .iter()
            .map(|&j| remap[j as usize])
            .collect();
        inv_sqrt_deg.push(1.0 / (deg[old as usize] as f64).sqrt());
        adj.push(nbrs);
    }
    Ok(Laplacian {
        adj,
        inv_sqrt_deg,
        retained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn load_str(text: &str, kind: GraphKind) -> EdgeListLoad {
        parse_edgelist(Cursor::new(text), kind, true, "<test>").unwrap()
    }

    #[test]
    fn undirected_symmetry_closure() {
        let got = load_str("a b\nb a\n", GraphKind::Undirected);
        let g = got.graph;
        assert_eq!(g.n_rows(), 2);
        assert_eq!(g.edges(), &[(0, 1), (1, 0)]);
        assert_eq!(got.duplicates_collapsed, 1);
    }

    #[test]
    fn directed_self_loop_dropped() {
        let got = load_str("a a\na b\n", GraphKind::Directed);
        assert_eq!(got.self_loops_dropped, 1);
        assert_eq!(got.graph.edges(), &[(0, 1)]);
        assert_eq!(got.graph.n_rows(), 2);
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse_edgelist(
            Cursor::new("a b\nxyz\n"),
            GraphKind::Undirected,
            true,
            "<test>",
        )
        .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        let err =
            parse_edgelist(Cursor::new("# nothing\n"), GraphKind::Undirected, true, "<t>")
                .unwrap_err();
        assert!(matches!(err, Error::EmptyGraph(_)));
    }

    #[test]
    fn duplicate_edge_without_dedupe_errors() {
        let err = parse_edgelist(
            Cursor::new("a b\nb a\n"),
            GraphKind::Undirected,
            false,
            "<t>",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn bipartite_sides_index_independently() {
        let got = load_str("u x\nv x\nu y\n", GraphKind::Bipartite);
        let g = got.graph;
        assert_eq!((g.n_rows(), g.n_cols()), (2, 2));
        assert_eq!(g.edges(), &[(0, 0), (0, 1), (1, 0)]);
    }

    #[test]
    fn degrees_path_graph() {
        let got = load_str("0 1\n1 2\n", GraphKind::Undirected);
        assert_eq!(got.graph.degrees(), vec![1, 2, 1]);
    }

    #[test]
    fn degree_single_edge_and_zero_degree() {
        let g = Graph::from_edges(GraphKind::Undirected, 3, 3, [(0u32, 1u32)]).unwrap();
        assert_eq!(g.degrees(), vec![1, 1, 0]);
    }

    #[test]
    fn laplacian_k2_is_adjacency() {
        let g = Graph::from_edges(GraphKind::Undirected, 2, 2, [(0u32, 1u32)]).unwrap();
        let l = laplacian(&g, IsolatedPolicy::Error).unwrap();
        let dense = l.materialize(10).unwrap();
        assert_eq!(dense[(0, 1)], 1.0);
        assert_eq!(dense[(1, 0)], 1.0);
        assert_eq!(dense[(0, 0)], 0.0);
    }

    #[test]
    fn laplacian_path_entry() {
        let g = Graph::from_edges(GraphKind::Undirected, 3, 3, [(0u32, 1u32), (1, 2)]).unwrap();
        let l = laplacian(&g, IsolatedPolicy::Error).unwrap();
        let dense = l.materialize(10).unwrap();
        assert!((dense[(0, 1)] - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!((dense[(0, 1)] - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn laplacian_isolated_error_names_node() {
        let mut g = Graph::from_edges(GraphKind::Undirected, 3, 3, [(0u32, 1u32)]).unwrap();
        g.set_labels(Some(vec!["a".into(), "b".into(), "lonely".into()]), None);
        let err = laplacian(&g, IsolatedPolicy::Error).unwrap_err();
        assert!(err.to_string().contains("lonely"));
    }

    #[test]
    fn laplacian_isolated_drop_shrinks() {
        let g = Graph::from_edges(GraphKind::Undirected, 3, 3, [(0u32, 1u32)]).unwrap();
        let l = laplacian(&g, IsolatedPolicy::Drop).unwrap();
        assert_eq!(l.dim(), 2);
        assert_eq!(l.retained(), &[0, 1]);
    }

    #[test]
    fn writer_roundtrip_canonical() {
        let dir = std::env::temp_dir().join(format!("sbm_graph_rt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("g.txt");
        let got = load_str("c a\na b\nb c\n", GraphKind::Undirected);
        write_edgelist(&got.graph, &p).unwrap();
        let re = load_edgelist(&p, GraphKind::Undirected, true).unwrap();
        assert_eq!(re.graph.n_pairs(), got.graph.n_pairs());
        // canonical index edge sets agree after relabelling by name
        let name_pairs = |g: &Graph| {
            let mut v: Vec<(String, String)> = g
                .edges()
                .iter()
                .filter(|&&(i, j)| i < j)
                .map(|&(i, j)| (g.node_name(i as usize), g.node_name(j as usize)))
                .map(|(a, b)| if a < b { (a, b) } else { (b, a) })
                .collect();
            v.sort();
            v
        };
        assert_eq!(name_pairs(&got.graph), name_pairs(&re.graph));
        std::fs::remove_dir_all(&dir).ok();
    }
}

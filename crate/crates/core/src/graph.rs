//! Graph data model and the plain-text graph format.
//!
//! ```text
//! N F C
//! <N lines of F reals>
//! EDGES M
//! <M lines "u v">
//! LABELS
//! <N lines: label in [0, C) or -1>
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Undirected graph with node features and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: Matrix,
    adjacency: Matrix,
    labels: Vec<Option<usize>>,
    classes: usize,
}

impl Graph {
    /// Validates every invariant: symmetric binary adjacency with zero
    /// diagonal, labels below `classes`, finite features.
    pub fn new(features: Matrix, adjacency: Matrix, labels: Vec<Option<usize>>, classes: usize) -> Result<Self> {
        let n = features.rows();
        if adjacency.shape() != (n, n) {
            return Err(Error::shape(
                "Graph::new",
                format!("{n} nodes but adjacency is {:?}", adjacency.shape()),
            ));
        }
        if labels.len() != n {
            return Err(Error::shape("Graph::new", format!("{n} nodes but {} labels", labels.len())));
        }
        features.ensure_finite("graph features")?;
        for i in 0..n {
            if adjacency[(i, i)] != 0.0 {
                return Err(Error::invalid(format!("self-loop at node {i}")));
            }
            for j in 0..n {
                let a = adjacency[(i, j)];
                if a != 0.0 && a != 1.0 {
                    return Err(Error::invalid(format!("adjacency entry ({i},{j}) = {a} is not binary")));
                }
                if a != adjacency[(j, i)] {
                    return Err(Error::invalid(format!("adjacency not symmetric at ({i},{j})")));
                }
            }
        }
        if let Some((i, l)) = labels
            .iter()
            .enumerate()
            .find_map(|(i, l)| l.filter(|&l| l >= classes).map(|l| (i, l)))
        {
            return Err(Error::invalid(format!("label {l} of node {i} is not below {classes}")));
        }
        Ok(Graph {
            features,
            adjacency,
            labels,
            classes,
        })
    }

    /// Builds a graph from an undirected edge list. Self-loops are dropped.
    pub fn from_edges(
        features: Matrix,
        edges: &[(usize, usize)],
        labels: Vec<Option<usize>>,
        classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        let mut adjacency = Matrix::zeros(n, n);
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::invalid(format!("edge ({u},{v}) out of range for {n} nodes")));
            }
            if u != v {
                adjacency[(u, v)] = 1.0;
                adjacency[(v, u)] = 1.0;
            }
        }
        Graph::new(features, adjacency, labels, classes)
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn f(&self) -> usize {
        self.features.cols()
    }

    pub fn c(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// All labels, or `None` if any node is unlabeled.
    pub fn full_labels(&self) -> Option<Vec<usize>> {
        self.labels.iter().copied().collect()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    /// Undirected edges `(u, v)` with `u < v`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if self.adjacency[(u, v)] != 0.0 {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    /// Nonzero adjacency entries (each undirected edge counts twice).
    pub fn directed_entries(&self) -> usize {
        self.adjacency.as_slice().iter().filter(|&&a| a != 0.0).count()
    }

    /// Same graph with every label removed.
    pub fn unlabeled(&self) -> Graph {
        Graph {
            labels: vec![None; self.n()],
            ..self.clone()
        }
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        Graph {
            features: self.features.permute_rows(perm),
            adjacency: self.adjacency.permute_square(perm),
            labels: {
                let mut l = vec![None; self.labels.len()];
                for (i, &p) in perm.iter().enumerate() {
                    l[p] = self.labels[i];
                }
                l
            },
            classes: self.classes,
        }
    }

    /// Canonical text encoding.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {} {}", self.n(), self.f(), self.c());
        for i in 0..self.n() {
            let row: Vec<String> = self.features.row(i).iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        let edges = self.edges();
        let _ = writeln!(s, "EDGES {}", edges.len());
        for (u, v) in edges {
            let _ = writeln!(s, "{u} {v}");
        }
        s.push_str("LABELS\n");
        for l in &self.labels {
            match l {
                Some(l) => {
                    let _ = writeln!(s, "{l}");
                }
                None => s.push_str("-1\n"),
            }
        }
        s
    }

    /// Parses the text format. `origin` names the source in errors.
    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        Parser::new(text, origin).parse()
    }
}

struct Parser<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    path: PathBuf,
    line: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str, path: &Path) -> Self {
        Parser {
            lines: text.lines().enumerate(),
            path: path.to_path_buf(),
            line: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l.trim_end_matches('\r'))
            }
            None => {
                self.line += 1;
                Err(self.err(format!("unexpected end of file, expected {what}")))
            }
        }
    }

    fn parse_usize(&self, tok: &str, what: &str) -> Result<usize> {
        tok.parse()
            .map_err(|_| self.err(format!("{what}: '{tok}' is not a non-negative integer")))
    }

    fn parse(mut self) -> Result<Graph> {
        let header = self.next("header")?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(self.err(format!("header must be 'N F C', got '{header}'")));
        }
        let n = self.parse_usize(parts[0], "N")?;
        let f = self.parse_usize(parts[1], "F")?;
        let c = self.parse_usize(parts[2], "C")?;

        let mut data = Vec::with_capacity(n * f);
        for i in 0..n {
            let line = self.next("feature row")?;
            if line.starts_with("EDGES") {
                return Err(self.err(format!("expected {n} feature rows, found {i}")));
            }
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| self.err(format!("'{tok}' is not a real number")))?;
                if !v.is_finite() {
                    return Err(self.err("non-finite feature value"));
                }
                data.push(v);
            }
            if data.len() - before != f {
                return Err(self.err(format!("expected {f} features, found {}", data.len() - before)));
            }
        }
        let features = Matrix::from_vec(n, f, data)?;

        let line = self.next("EDGES line")?;
        let m = match line.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["EDGES", m] => self.parse_usize(m, "edge count")?,
            _ if !line.starts_with("EDGES") => {
                return Err(self.err(format!("expected {n} feature rows before 'EDGES M'")))
            }
            _ => return Err(self.err(format!("expected 'EDGES M', got '{line}'"))),
        };
        let mut adjacency = Matrix::zeros(n, n);
        for _ in 0..m {
            let line = self.next("edge")?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 2 {
                return Err(self.err(format!("edge line must be 'u v', got '{line}'")));
            }
            let u = self.parse_usize(toks[0], "edge endpoint")?;
            let v = self.parse_usize(toks[1], "edge endpoint")?;
            if u >= n || v >= n {
                return Err(self.err(format!("edge endpoint out of range: ({u}, {v}) with {n} nodes")));
            }
            if u != v {
                adjacency[(u, v)] = 1.0;
                adjacency[(v, u)] = 1.0;
            }
        }

        let line = self.next("LABELS line")?;
        if line.trim() != "LABELS" {
            return Err(self.err(format!("expected 'LABELS', got '{line}'")));
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let tok = self.next("label")?.trim();
            let l: i64 = tok
                .parse()
                .map_err(|_| self.err(format!("'{tok}' is not an integer label")))?;
            labels.push(match l {
                -1 => None,
                l if l >= 0 && (l as usize) < c => Some(l as usize),
                l => return Err(self.err(format!("label {l} out of range [0, {c}) or -1"))),
            });
        }
        for (i, rest) in self.lines.by_ref() {
            if !rest.trim().is_empty() {
                self.line = i + 1;
                return Err(self.err("trailing content after labels"));
            }
        }
        Graph::new(features, adjacency, labels, c)
    }
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    Graph::from_text(&text, path)
}

pub fn save_graph(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, g.to_text())?;
    Ok(())
}

/// Features concatenated with one-hot labels, plus the adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedGraph {
    pub xt: Matrix,
    pub adjacency: Matrix,
    pub f: usize,
    pub c: usize,
}

impl AugmentedGraph {
    pub fn new(xt: Matrix, adjacency: Matrix, f: usize, c: usize) -> Result<Self> {
        let n = xt.rows();
        if xt.cols() != f + c {
            return Err(Error::shape("AugmentedGraph", format!("width {} != {f}+{c}", xt.cols())));
        }
        if adjacency.shape() != (n, n) {
            return Err(Error::shape("AugmentedGraph", format!("adjacency {:?}", adjacency.shape())));
        }
        Ok(AugmentedGraph { xt, adjacency, f, c })
    }

    pub fn n(&self) -> usize {
        self.xt.rows()
    }

    pub fn width(&self) -> usize {
        self.f + self.c
    }

    pub fn permuted(&self, perm: &[usize]) -> AugmentedGraph {
        AugmentedGraph {
            xt: self.xt.permute_rows(perm),
            adjacency: self.adjacency.permute_square(perm),
            f: self.f,
            c: self.c,
        }
    }
}

pub fn augment(g: &Graph) -> Result<AugmentedGraph> {
    let labels = g
        .full_labels()
        .ok_or_else(|| Error::invalid("augment needs a fully labeled graph"))?;
    let (f, c) = (g.f(), g.c());
    let mut xt = Matrix::zeros(g.n(), f + c);
    for (i, &l) in labels.iter().enumerate() {
        let row = xt.row_mut(i);
        row[..f].copy_from_slice(g.features().row(i));
        row[f + l] = 1.0;
    }
    AugmentedGraph::new(xt, g.adjacency().clone(), f, c)
}

/// Argmax of the last `c` columns of each row; ties go to the lowest index.
pub fn recover_labels(xt: &Matrix, f: usize, c: usize) -> Result<Vec<usize>> {
    if c == 0 {
        return Err(Error::invalid("recover_labels needs at least one class"));
    }
    if xt.cols() != f + c {
        return Err(Error::shape("recover_labels", format!("width {} != {f}+{c}", xt.cols())));
    }
    xt.ensure_finite("label block")?;
    Ok((0..xt.rows())
        .map(|i| {
            let tail = &xt.row(i)[f..];
            let mut best = 0;
            for (k, &v) in tail.iter().enumerate().skip(1) {
                if v > tail[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

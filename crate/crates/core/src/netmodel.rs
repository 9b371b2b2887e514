//! Microgrid graph: nodes, lines, communication edges and the matrices derived
//! from them.
//!
//! Nodes are stored in canonical order (generators, then inverters, then
//! loads) regardless of the order they appear in the configuration file. All
//! block vectors in this crate (`U_G`, `L_I`, ...) index into that ordering.
//! Lines keep their configuration order and orientation; the orientation only
//! affects the sign bookkeeping of edge quantities such as angle differences.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use toml::{Table, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Generator,
    Inverter,
    Load,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Generator => "generator",
            NodeKind::Inverter => "inverter",
            NodeKind::Load => "load",
        }
    }

    fn rank(self) -> u8 {
        match self {
            NodeKind::Generator => 0,
            NodeKind::Inverter => 1,
            NodeKind::Load => 2,
        }
    }
}

/// Synchronous generator with first-order transient voltage dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorParams {
    pub damping: f64,
    pub inertia: f64,
    pub x_d: f64,
    pub x_d_prime: f64,
    /// Open-circuit transient time constant in seconds.
    pub tau_u: f64,
    pub g_self: f64,
    pub b_self: f64,
}

impl GeneratorParams {
    /// `X_d - X'_d`.
    pub fn reactance_gap(&self) -> f64 {
        self.x_d - self.x_d_prime
    }

    /// `(X_d - X'_d) / tau_U`, the voltage dissipation coefficient.
    pub fn voltage_resistance(&self) -> f64 {
        self.reactance_gap() / self.tau_u
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverterParams {
    pub damping: f64,
    /// Virtual inertia provided by the inverter's matching control.
    pub inertia: f64,
    pub g_self: f64,
    pub b_self: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadParams {
    pub damping: f64,
    pub g_self: f64,
    pub b_self: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeParams {
    Generator(GeneratorParams),
    Inverter(InverterParams),
    Load(LoadParams),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub id: u32,
    pub params: NodeParams,
}

impl Node {
    pub fn kind(&self) -> NodeKind {
        match self.params {
            NodeParams::Generator(_) => NodeKind::Generator,
            NodeParams::Inverter(_) => NodeKind::Inverter,
            NodeParams::Load(_) => NodeKind::Load,
        }
    }

    pub fn damping(&self) -> f64 {
        match self.params {
            NodeParams::Generator(p) => p.damping,
            NodeParams::Inverter(p) => p.damping,
            NodeParams::Load(p) => p.damping,
        }
    }

    pub fn g_self(&self) -> f64 {
        match self.params {
            NodeParams::Generator(p) => p.g_self,
            NodeParams::Inverter(p) => p.g_self,
            NodeParams::Load(p) => p.g_self,
        }
    }

    pub fn b_self(&self) -> f64 {
        match self.params {
            NodeParams::Generator(p) => p.b_self,
            NodeParams::Inverter(p) => p.b_self,
            NodeParams::Load(p) => p.b_self,
        }
    }

    /// Physical or virtual inertia; loads have none.
    pub fn inertia(&self) -> Option<f64> {
        match self.params {
            NodeParams::Generator(p) => Some(p.inertia),
            NodeParams::Inverter(p) => Some(p.inertia),
            NodeParams::Load(_) => None,
        }
    }
}

/// A physical line between two nodes, stored with the table sign convention:
/// `b` is the negated line susceptance (positive for inductive lines) and `g`
/// the negated line conductance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    /// Canonical index of the sending node.
    pub from: usize,
    /// Canonical index of the receiving node.
    pub to: usize,
    pub g: f64,
    pub b: f64,
}

/// Neighbor entry of the adjacency list: the neighbor's index, the line
/// index, and `+1`/`-1` depending on whether this node is the line's `from`
/// end. `sign * theta_diff[edge]` is the angle difference `theta_i - theta_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub node: usize,
    pub edge: usize,
    pub sign: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Graph {
    Physical,
    Communication,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    nodes: Vec<Node>,
    lines: Vec<Line>,
    comm_edges: Vec<(usize, usize)>,
    comm_same_as_physical: bool,
    n_gen: usize,
    n_inv: usize,
    adjacency: Vec<Vec<Neighbor>>,
}

/// Communication graph specification used when building a model.
#[derive(Debug, Clone, PartialEq)]
pub enum CommSpec {
    SameAsPhysical,
    /// Edges given as node ids.
    Edges(Vec<(u32, u32)>),
}

/// Raw line description keyed by node ids, as found in a configuration file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSpec {
    pub from: u32,
    pub to: u32,
    pub g: f64,
    pub b: f64,
}

impl NetworkModel {
    /// Builds and validates a model. Nodes may be given in any order; they are
    /// reordered into generator/inverter/load blocks (stable within a block).
    pub fn new(nodes: Vec<Node>, lines: Vec<LineSpec>, comm: CommSpec) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::invariant("network has no nodes"));
        }
        let mut nodes = nodes;
        nodes.sort_by_key(|n| n.kind().rank());
        let mut index = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            validate_node(node)?;
            if index.insert(node.id, i).is_some() {
                return Err(Error::invariant(format!("duplicate node id {}", node.id)));
            }
        }
        let lookup = |id: u32, what: &str| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| Error::invariant(format!("{what} references unknown node {id}")))
        };

        let mut seen = HashSet::new();
        let mut canon_lines = Vec::with_capacity(lines.len());
        for l in &lines {
            let what = format!("line ({},{})", l.from, l.to);
            if l.from == l.to {
                return Err(Error::invariant(format!("{what}: self-loop")));
            }
            let from = lookup(l.from, &what)?;
            let to = lookup(l.to, &what)?;
            if !seen.insert((from.min(to), from.max(to))) {
                return Err(Error::invariant(format!("{what}: duplicate line")));
            }
            if !l.g.is_finite() || !l.b.is_finite() {
                return Err(Error::invariant(format!("{what}: non-finite parameter")));
            }
            canon_lines.push(Line { from, to, g: l.g, b: l.b });
        }

        let (comm_edges, comm_same_as_physical) = match comm {
            CommSpec::SameAsPhysical => (canon_lines.iter().map(|l| (l.from, l.to)).collect(), true),
            CommSpec::Edges(edges) => {
                let mut seen = HashSet::new();
                let mut out = Vec::with_capacity(edges.len());
                for (a, b) in edges {
                    let what = format!("communication edge ({a},{b})");
                    if a == b {
                        return Err(Error::invariant(format!("{what}: self-loop")));
                    }
                    let i = lookup(a, &what)?;
                    let j = lookup(b, &what)?;
                    if !seen.insert((i.min(j), i.max(j))) {
                        return Err(Error::invariant(format!("{what}: duplicate edge")));
                    }
                    out.push((i, j));
                }
                (out, false)
            }
        };

        let n = nodes.len();
        if !connected(n, canon_lines.iter().map(|l| (l.from, l.to))) {
            return Err(Error::invariant("physical graph not connected"));
        }
        if !connected(n, comm_edges.iter().copied()) {
            return Err(Error::invariant("communication graph not connected"));
        }

        let mut adjacency = vec![Vec::new(); n];
        for (e, l) in canon_lines.iter().enumerate() {
            adjacency[l.from].push(Neighbor { node: l.to, edge: e, sign: 1.0 });
            adjacency[l.to].push(Neighbor { node: l.from, edge: e, sign: -1.0 });
        }

        let n_gen = nodes.iter().filter(|n| n.kind() == NodeKind::Generator).count();
        let n_inv = nodes.iter().filter(|n| n.kind() == NodeKind::Inverter).count();
        Ok(Self {
            nodes,
            lines: canon_lines,
            comm_edges,
            comm_same_as_physical,
            n_gen,
            n_inv,
            adjacency,
        })
    }

    /// Copy with every conductance (line and shunt) set to zero.
    pub fn lossless(&self) -> NetworkModel {
        let mut m = self.clone();
        for node in &mut m.nodes {
            match &mut node.params {
                NodeParams::Generator(p) => p.g_self = 0.0,
                NodeParams::Inverter(p) => p.g_self = 0.0,
                NodeParams::Load(p) => p.g_self = 0.0,
            }
        }
        for line in &mut m.lines {
            line.g = 0.0;
        }
        m
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
    pub fn n_gen(&self) -> usize {
        self.n_gen
    }
    pub fn n_inv(&self) -> usize {
        self.n_inv
    }
    pub fn n_load(&self) -> usize {
        self.nodes.len() - self.n_gen - self.n_inv
    }
    /// Generators plus inverters, i.e. the nodes with a controllable `p_g`.
    pub fn n_dispatch(&self) -> usize {
        self.n_gen + self.n_inv
    }
    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }
    pub fn n_comm(&self) -> usize {
        self.comm_edges.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }
    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }
    pub fn lines(&self) -> &[Line] {
        &self.lines
    }
    pub fn comm_edges(&self) -> &[(usize, usize)] {
        &self.comm_edges
    }
    pub fn neighbors(&self, i: usize) -> &[Neighbor] {
        &self.adjacency[i]
    }

    /// Canonical index of the first inverter node.
    pub fn inv_offset(&self) -> usize {
        self.n_gen
    }
    /// Canonical index of the first load node.
    pub fn load_offset(&self) -> usize {
        self.n_gen + self.n_inv
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn generator(&self, k: usize) -> &GeneratorParams {
        match &self.nodes[k].params {
            NodeParams::Generator(p) => p,
            _ => panic!("node {k} is not a generator"),
        }
    }

    /// Inertia of every dispatchable node, generators first.
    pub fn dispatch_inertia(&self) -> Vec<f64> {
        self.nodes[..self.n_dispatch()]
            .iter()
            .map(|n| n.inertia().expect("dispatchable node without inertia"))
            .collect()
    }

    /// Serializes the model back to the configuration format. Loading the
    /// result yields an identical model.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            let _ = writeln!(out, "[node.{}]", node.id);
            let _ = writeln!(out, "kind = \"{}\"", node.kind().as_str());
            let _ = writeln!(out, "A = {:?}", node.damping());
            match node.params {
                NodeParams::Generator(p) => {
                    let _ = writeln!(out, "M = {:?}", p.inertia);
                    let _ = writeln!(out, "X_d = {:?}", p.x_d);
                    let _ = writeln!(out, "X_d_prime = {:?}", p.x_d_prime);
                    let _ = writeln!(out, "tau_U = {:?}", p.tau_u);
                }
                NodeParams::Inverter(p) => {
                    let _ = writeln!(out, "M = {:?}", p.inertia);
                }
                NodeParams::Load(_) => {}
            }
            let _ = writeln!(out, "G_ii = {:?}", node.g_self());
            let _ = writeln!(out, "B_ii = {:?}\n", node.b_self());
        }
        for l in &self.lines {
            let _ = writeln!(out, "[line.{}.{}]", self.nodes[l.from].id, self.nodes[l.to].id);
            let _ = writeln!(out, "G = {:?}", l.g);
            let _ = writeln!(out, "B = {:?}\n", l.b);
        }
        out.push_str("[comm]\n");
        if self.comm_same_as_physical {
            out.push_str("edges = \"same-as-physical\"\n");
        } else {
            let edges: Vec<String> = self
                .comm_edges
                .iter()
                .map(|&(i, j)| format!("[{}, {}]", self.nodes[i].id, self.nodes[j].id))
                .collect();
            let _ = writeln!(out, "edges = [{}]", edges.join(", "));
        }
        out
    }
}

fn validate_node(node: &Node) -> Result<()> {
    let id = node.id;
    let check = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::invariant(format!("node {id}: {what}")))
        }
    };
    let (damping, g_self, b_self) = (node.damping(), node.g_self(), node.b_self());
    check(damping.is_finite() && damping > 0.0, "requires A > 0")?;
    check(g_self.is_finite() && g_self >= 0.0, "requires G_ii >= 0")?;
    check(b_self.is_finite(), "requires finite B_ii")?;
    match node.params {
        NodeParams::Generator(p) => {
            check(p.inertia.is_finite() && p.inertia > 0.0, "requires M > 0")?;
            check(p.reactance_gap() > 0.0, "requires X_d - X_d_prime > 0")?;
            check(p.tau_u.is_finite() && p.tau_u > 0.0, "requires tau_U > 0")?;
            check(b_self < 0.0, "requires B_ii < 0")?;
        }
        NodeParams::Inverter(p) => {
            check(p.inertia.is_finite() && p.inertia > 0.0, "requires M > 0")?;
        }
        NodeParams::Load(_) => {}
    }
    Ok(())
}

fn connected(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> bool {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut components = n;
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            components -= 1;
        }
    }
    components == 1
}

/// Parses a network configuration.
///
/// ```text
/// [node.1]
/// kind = "generator"     # generator | inverter | load
/// A = 1.6
/// M = 26.1               # generators and inverters
/// X_d = 0.15             # generators only
/// X_d_prime = 0.055
/// tau_U = 6.45
/// G_ii = 5.7834
/// B_ii = -6.0567
///
/// [line.1.2]
/// G = -1.9167
/// B = 1.905
///
/// [comm]
/// edges = "same-as-physical"   # or [[1, 2], [2, 3], ...]
/// ```
pub fn load_network(config_text: &str) -> Result<NetworkModel> {
    let doc: Table = config_text.parse().map_err(|e: toml::de::Error| Error::Parse {
        location: e
            .span()
            .map(|s| format!("line {}", line_of(config_text, s.start)))
            .unwrap_or_else(|| "config".into()),
        message: e.message().to_string(),
    })?;

    for key in doc.keys() {
        if !matches!(key.as_str(), "node" | "line" | "comm") {
            return Err(Error::parse(key, "unknown section"));
        }
    }

    let node_table = doc
        .get("node")
        .and_then(Value::as_table)
        .ok_or_else(|| Error::parse("node", "missing [node.<id>] sections"))?;
    let mut nodes = Vec::with_capacity(node_table.len());
    for (key, value) in node_table {
        let loc = format!("node.{key}");
        let id: u32 = key.parse().map_err(|_| Error::parse(&loc, "node id must be a non-negative integer"))?;
        let t = value.as_table().ok_or_else(|| Error::parse(&loc, "expected a table"))?;
        nodes.push(parse_node(id, t, &loc)?);
    }

    let mut lines = Vec::new();
    if let Some(line_table) = doc.get("line") {
        let line_table = line_table.as_table().ok_or_else(|| Error::parse("line", "expected tables"))?;
        for (from_key, inner) in line_table {
            let loc = format!("line.{from_key}");
            let from: u32 = from_key.parse().map_err(|_| Error::parse(&loc, "node id must be an integer"))?;
            let inner = inner.as_table().ok_or_else(|| Error::parse(&loc, "expected [line.<i>.<j>]"))?;
            for (to_key, fields) in inner {
                let loc = format!("line.{from_key}.{to_key}");
                let to: u32 = to_key.parse().map_err(|_| Error::parse(&loc, "node id must be an integer"))?;
                let t = fields.as_table().ok_or_else(|| Error::parse(&loc, "expected a table"))?;
                check_keys(t, &["G", "B"], &loc)?;
                lines.push(LineSpec { from, to, g: num(t, "G", &loc)?, b: num(t, "B", &loc)? });
            }
        }
    }
    // `[line.1.2]` and `[line.2.1]` land in different sub-tables; the
    // duplicate check in `NetworkModel::new` catches both spellings.

    let comm = match doc.get("comm") {
        None => CommSpec::SameAsPhysical,
        Some(v) => {
            let t = v.as_table().ok_or_else(|| Error::parse("comm", "expected a table"))?;
            check_keys(t, &["edges"], "comm")?;
            match t.get("edges") {
                None => CommSpec::SameAsPhysical,
                Some(Value::String(s)) if s == "same-as-physical" => CommSpec::SameAsPhysical,
                Some(Value::Array(items)) => {
                    let mut edges = Vec::with_capacity(items.len());
                    for (k, item) in items.iter().enumerate() {
                        let loc = format!("comm.edges[{k}]");
                        let pair = item.as_array().filter(|a| a.len() == 2).ok_or_else(|| Error::parse(&loc, "expected [i, j]"))?;
                        let id = |v: &Value| -> Result<u32> {
                            v.as_integer()
                                .and_then(|x| u32::try_from(x).ok())
                                .ok_or_else(|| Error::parse(&loc, "node ids must be non-negative integers"))
                        };
                        edges.push((id(&pair[0])?, id(&pair[1])?));
                    }
                    CommSpec::Edges(edges)
                }
                Some(_) => return Err(Error::parse("comm.edges", "expected \"same-as-physical\" or a list of pairs")),
            }
        }
    };

    NetworkModel::new(nodes, lines, comm)
}

fn parse_node(id: u32, t: &Table, loc: &str) -> Result<Node> {
    let kind = t
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::parse(format!("{loc}.kind"), "missing or not a string"))?;
    let params = match kind {
        "generator" => {
            check_keys(t, &["kind", "A", "M", "X_d", "X_d_prime", "tau_U", "G_ii", "B_ii"], loc)?;
            NodeParams::Generator(GeneratorParams {
                damping: num(t, "A", loc)?,
                inertia: num(t, "M", loc)?,
                x_d: num(t, "X_d", loc)?,
                x_d_prime: num(t, "X_d_prime", loc)?,
                tau_u: num(t, "tau_U", loc)?,
                g_self: num(t, "G_ii", loc)?,
                b_self: num(t, "B_ii", loc)?,
            })
        }
        "inverter" => {
            check_keys(t, &["kind", "A", "M", "G_ii", "B_ii"], loc)?;
            NodeParams::Inverter(InverterParams {
                damping: num(t, "A", loc)?,
                inertia: num(t, "M", loc)?,
                g_self: num(t, "G_ii", loc)?,
                b_self: num(t, "B_ii", loc)?,
            })
        }
        "load" => {
            check_keys(t, &["kind", "A", "G_ii", "B_ii"], loc)?;
            NodeParams::Load(LoadParams {
                damping: num(t, "A", loc)?,
                g_self: num(t, "G_ii", loc)?,
                b_self: num(t, "B_ii", loc)?,
            })
        }
        other => return Err(Error::parse(format!("{loc}.kind"), format!("unknown node kind {other:?}"))),
    };
    Ok(Node { id, params })
}

fn check_keys(t: &Table, allowed: &[&str], loc: &str) -> Result<()> {
    for key in t.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::parse(format!("{loc}.{key}"), "unknown field"));
        }
    }
    Ok(())
}

fn num(t: &Table, key: &str, loc: &str) -> Result<f64> {
    match t.get(key) {
        Some(Value::Float(x)) => Ok(*x),
        Some(Value::Integer(x)) => Ok(*x as f64),
        Some(_) => Err(Error::parse(format!("{loc}.{key}"), "expected a number")),
        None => Err(Error::parse(format!("{loc}.{key}"), "missing field")),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Node-by-edge incidence matrix: column `e` has `+1` at the edge's first node
/// and `-1` at its second node.
pub fn incidence_matrix(model: &NetworkModel, which: Graph) -> DMatrix<f64> {
    let edges: Vec<(usize, usize)> = match which {
        Graph::Physical => model.lines.iter().map(|l| (l.from, l.to)).collect(),
        Graph::Communication => model.comm_edges.clone(),
    };
    let mut d = DMatrix::zeros(model.n_nodes(), edges.len());
    for (e, (i, j)) in edges.into_iter().enumerate() {
        d[(i, e)] = 1.0;
        d[(j, e)] = -1.0;
    }
    d
}

/// Block selectors `(I_G, I_I, I_L)` picking the generator, inverter and load
/// rows out of a node vector.
pub fn selectors(model: &NetworkModel) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = model.n_nodes();
    let block = |offset: usize, size: usize| {
        let mut s = DMatrix::zeros(size, n);
        for k in 0..size {
            s[(k, offset + k)] = 1.0;
        }
        s
    };
    (
        block(0, model.n_gen()),
        block(model.inv_offset(), model.n_inv()),
        block(model.load_offset(), model.n_load()),
    )
}

/// Bundled 12-node test network (four generators, four inverters, four loads).
pub const IEEE12_CONFIG: &str = include_str!("../data/ieee12.cfg");

pub fn ieee12() -> NetworkModel {
    load_network(IEEE12_CONFIG).expect("bundled ieee12.cfg is valid")
}

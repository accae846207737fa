//! Hyperrectangle partitions of `[0,1]^d`.
//!
//! Five partition collections are supported, with growth rules keyed to a
//! sample size `n`:
//!
//! * `Udp` — uniform dyadic: every cell of depth `J` is split into `2^d`
//!   equal hypercubes, for all depths with leaf volume `>= 1/n`;
//! * `Rdp` — recursive dyadic: a cell may be split into `2^d` equal
//!   hypercubes while its volume is `>= 2^d/n`;
//! * `Rdsp` — recursive dyadic split: a cell of volume `>= 2/n` may be
//!   halved along any one axis;
//! * `Rsp` — recursive split: a cell of volume `>= 2/n` may be cut along any
//!   axis at a point of the grid `(1/n)Z`, both children keeping volume
//!   `>= 1/n`;
//! * `Hrp` — free hyperrectangle partitions with corners on `(1/n)Z^d` and
//!   cell volume `>= 1/n`; no tree structure, exhaustive enumeration only.
//!
//! Cells use a half-open boundary convention: a cell owns its lower faces,
//! and the global upper boundary belongs to the last cell, so `leaf_of` is a
//! function.

use crate::{Error, Result};

const LN_2: f64 = std::f64::consts::LN_2;

/// Smallest multiple of `ln 2` at or above `x`.
///
/// A 1e-12 slack is subtracted before taking the ceiling so that values that
/// are exact multiples up to float noise do not round up a full step.
pub fn ceil_ln2(x: f64) -> f64 {
    LN_2 * (x / LN_2 - 1e-12).ceil()
}

/// An axis-aligned box `prod_j [lower_j, upper_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperrectangle {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Hyperrectangle {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Domain("bounds must be nonempty and of equal length".into()));
        }
        for (lo, hi) in lower.iter().zip(&upper) {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Domain(format!("invalid cell bounds [{lo}, {hi})")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unit_cube(d: usize) -> Self {
        Self { lower: vec![0.0; d], upper: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| hi - lo).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    /// Half-open membership; faces on `domain_upper` are owned by the cell.
    pub fn contains(&self, x: &[f64], domain_upper: &[f64]) -> bool {
        self.lower.iter().zip(&self.upper).zip(x).zip(domain_upper).all(|(((lo, hi), xi), du)| {
            let upper_ok = if hi == du { xi <= hi } else { xi < hi };
            xi >= lo && upper_ok
        })
    }

    /// Closed membership, used only to validate points against the root cell.
    fn contains_closed(&self, x: &[f64]) -> bool {
        self.lower.iter().zip(&self.upper).zip(x).all(|((lo, hi), xi)| xi >= lo && xi <= hi)
    }

    /// The `2^d` children of a full dyadic split; bit `j` of the child index
    /// selects the upper half along axis `j`.
    fn split_dyadic(&self) -> Vec<Hyperrectangle> {
        let d = self.dim();
        let mids: Vec<f64> = self.center();
        (0..1usize << d)
            .map(|mask| {
                let mut lower = self.lower.clone();
                let mut upper = self.upper.clone();
                for j in 0..d {
                    if mask >> j & 1 == 1 {
                        lower[j] = mids[j];
                    } else {
                        upper[j] = mids[j];
                    }
                }
                Hyperrectangle { lower, upper }
            })
            .collect()
    }

    fn split_at(&self, axis: usize, at: f64) -> (Hyperrectangle, Hyperrectangle) {
        let mut left = self.clone();
        let mut right = self.clone();
        left.upper[axis] = at;
        right.lower[axis] = at;
        (left, right)
    }

    /// Exact byte key, usable as a hash-map key for memoization.
    pub(crate) fn byte_key(&self) -> Vec<u64> {
        self.lower.iter().chain(&self.upper).map(|v| v.to_bits()).collect()
    }
}

/// The five partition collections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartitionKind {
    Udp,
    Rdp,
    Rdsp,
    Rsp,
    Hrp,
}

impl PartitionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PartitionKind::Udp => "udp",
            PartitionKind::Rdp => "rdp",
            PartitionKind::Rdsp => "rdsp",
            PartitionKind::Rsp => "rsp",
            PartitionKind::Hrp => "hrp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "udp" => Ok(PartitionKind::Udp),
            "rdp" => Ok(PartitionKind::Rdp),
            "rdsp" => Ok(PartitionKind::Rdsp),
            "rsp" => Ok(PartitionKind::Rsp),
            "hrp" => Ok(PartitionKind::Hrp),
            other => Err(Error::Contract(format!("unknown partition kind `{other}`"))),
        }
    }

    /// Tree-structured collections admit the dynamic-programming optimizer.
    pub fn is_tree_structured(&self) -> bool {
        !matches!(self, PartitionKind::Hrp)
    }
}

/// Split descriptor stored at internal tree nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum Split {
    /// Full `2^d` dyadic split at the cell midpoints.
    Dyadic,
    /// Binary cut of one axis at an absolute coordinate.
    Axis { axis: usize, at: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Node {
    pub(crate) cell: Hyperrectangle,
    pub(crate) split: Option<(Split, Vec<Node>)>,
    leaf_count: usize,
}

impl Node {
    pub(crate) fn leaf(cell: Hyperrectangle) -> Self {
        Node { cell, split: None, leaf_count: 1 }
    }

    pub(crate) fn internal(cell: Hyperrectangle, split: Split, children: Vec<Node>) -> Self {
        let leaf_count = children.iter().map(|c| c.leaf_count).sum();
        Node { cell, split: Some((split, children)), leaf_count }
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a Hyperrectangle>) {
        match &self.split {
            None => out.push(&self.cell),
            Some((_, children)) => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TreeRepr {
    Tree(Node),
    Flat(Vec<Hyperrectangle>),
}

/// Identifier of a leaf: its index in depth-first order (list order for
/// `Hrp`). Stable across runs for a given structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LeafId(pub usize);

/// A partition of a root hyperrectangle, either tree-structured or a flat
/// list of cells (`Hrp`). Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionTree {
    kind: PartitionKind,
    n: usize,
    repr: TreeRepr,
}

impl PartitionTree {
    /// The trivial one-cell partition of the unit cube.
    pub fn root_only(kind: PartitionKind, n: usize, d: usize) -> Self {
        PartitionTree { kind, n, repr: TreeRepr::Tree(Node::leaf(Hyperrectangle::unit_cube(d))) }
    }

    pub(crate) fn from_node(kind: PartitionKind, n: usize, node: Node) -> Self {
        PartitionTree { kind, n, repr: TreeRepr::Tree(node) }
    }

    pub(crate) fn from_cells(n: usize, cells: Vec<Hyperrectangle>) -> Self {
        PartitionTree { kind: PartitionKind::Hrp, n, repr: TreeRepr::Flat(cells) }
    }

    /// Uniform dyadic partition of depth `depth`.
    pub fn uniform(kind: PartitionKind, n: usize, d: usize, depth: u32) -> Self {
        fn grow(cell: Hyperrectangle, depth: u32) -> Node {
            if depth == 0 {
                Node::leaf(cell)
            } else {
                let children = cell.split_dyadic().into_iter().map(|c| grow(c, depth - 1)).collect();
                Node::internal(cell, Split::Dyadic, children)
            }
        }
        PartitionTree { kind, n, repr: TreeRepr::Tree(grow(Hyperrectangle::unit_cube(d), depth)) }
    }

    /// Builds a tree from explicit recursive splits; validates the growth
    /// rule of `kind` on every internal node.
    pub fn from_splits(kind: PartitionKind, n: usize, d: usize, build: &SplitTree) -> Result<Self> {
        fn grow(kind: PartitionKind, n: usize, cell: Hyperrectangle, shape: CellShape, spec: &SplitTree) -> Result<Node> {
            match spec {
                SplitTree::Leaf => Ok(Node::leaf(cell)),
                SplitTree::Split { split, children } => {
                    let opts = admissible_splits(kind, n, &cell, &shape);
                    let found = opts.into_iter().find(|(s, _)| match (s, split) {
                        (Split::Dyadic, SplitSpec::Dyadic) => true,
                        (Split::Axis { axis, at }, SplitSpec::Axis { axis: a2, at: t2 }) => {
                            axis == a2 && (at - t2).abs() < 1e-12
                        }
                        _ => false,
                    });
                    let (split, cells) = found.ok_or_else(|| {
                        Error::Contract(format!("split not admissible for {} at {:?}", kind.as_str(), cell))
                    })?;
                    if cells.len() != children.len() {
                        return Err(Error::Contract("child count mismatch".into()));
                    }
                    let nodes = cells
                        .into_iter()
                        .zip(children)
                        .map(|((c, sh), spec)| grow(kind, n, c, sh, spec))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Node::internal(cell, split, nodes))
                }
            }
        }
        if !kind.is_tree_structured() {
            return Err(Error::Contract("hrp partitions are not tree structured".into()));
        }
        let root = Hyperrectangle::unit_cube(d);
        let shape = CellShape::root(kind, n, d);
        Ok(PartitionTree { kind, n, repr: TreeRepr::Tree(grow(kind, n, root, shape, build)?) })
    }

    pub fn kind(&self) -> PartitionKind {
        self.kind
    }

    pub fn rule_n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        match &self.repr {
            TreeRepr::Tree(node) => node.cell.dim(),
            TreeRepr::Flat(cells) => cells[0].dim(),
        }
    }

    fn root_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match &self.repr {
            TreeRepr::Tree(node) => (node.cell.lower.clone(), node.cell.upper.clone()),
            TreeRepr::Flat(cells) => {
                let d = cells[0].dim();
                (vec![0.0; d], vec![1.0; d])
            }
        }
    }

    pub fn num_leaves(&self) -> usize {
        match &self.repr {
            TreeRepr::Tree(node) => node.leaf_count,
            TreeRepr::Flat(cells) => cells.len(),
        }
    }

    /// Leaves in depth-first order (list order for `Hrp`).
    pub fn leaves(&self) -> Vec<&Hyperrectangle> {
        match &self.repr {
            TreeRepr::Tree(node) => {
                let mut out = Vec::with_capacity(node.leaf_count);
                node.collect_leaves(&mut out);
                out
            }
            TreeRepr::Flat(cells) => cells.iter().collect(),
        }
    }

    pub fn leaf_cell(&self, id: LeafId) -> &Hyperrectangle {
        match &self.repr {
            TreeRepr::Tree(node) => {
                let mut cur = node;
                let mut remaining = id.0;
                'descend: while let Some((_, children)) = &cur.split {
                    for child in children {
                        if remaining < child.leaf_count {
                            cur = child;
                            continue 'descend;
                        }
                        remaining -= child.leaf_count;
                    }
                    panic!("leaf id {} out of range", id.0);
                }
                &cur.cell
            }
            TreeRepr::Flat(cells) => &cells[id.0],
        }
    }

    /// The unique leaf containing `x` under the half-open convention.
    ///
    /// `O(depth)` for tree kinds, `O(num_leaves)` for `Hrp`.
    pub fn leaf_of(&self, x: &[f64]) -> Result<LeafId> {
        let (lo, hi) = self.root_bounds();
        if x.len() != lo.len() {
            return Err(Error::Domain(format!("point dimension {} != partition dimension {}", x.len(), lo.len())));
        }
        let root = Hyperrectangle { lower: lo, upper: hi };
        if !root.contains_closed(x) {
            return Err(Error::Domain(format!("point {x:?} outside the root cell")));
        }
        match &self.repr {
            TreeRepr::Tree(node) => {
                let mut cur = node;
                let mut offset = 0usize;
                while let Some((split, children)) = &cur.split {
                    let child_idx = match split {
                        Split::Dyadic => {
                            let mids = cur.cell.center();
                            let mut mask = 0usize;
                            for (j, m) in mids.iter().enumerate() {
                                if x[j] >= *m {
                                    mask |= 1 << j;
                                }
                            }
                            mask
                        }
                        Split::Axis { axis, at } => usize::from(x[*axis] >= *at),
                    };
                    offset += children[..child_idx].iter().map(|c| c.leaf_count).sum::<usize>();
                    cur = &children[child_idx];
                }
                Ok(LeafId(offset))
            }
            TreeRepr::Flat(cells) => {
                let upper = &root.upper;
                cells
                    .iter()
                    .position(|c| c.contains(x, upper))
                    .map(LeafId)
                    .ok_or_else(|| Error::Domain(format!("point {x:?} not covered by the flat partition")))
            }
        }
    }

    /// Kraft coding weight `c * (A0 + B0 * num_leaves)`.
    ///
    /// Requires `c >= c0` for the collection, otherwise the Kraft inequality
    /// is no longer guaranteed and a contract error is returned.
    pub fn coding_weight(&self, c: f64) -> Result<f64> {
        let consts = coding_constants(self.kind, self.n, self.dim());
        if c < consts.c0 - 1e-12 {
            return Err(Error::Contract(format!(
                "c = {c} below the collection constant c0 = {}",
                consts.c0
            )));
        }
        Ok(c * (consts.a0 + consts.b0 * self.num_leaves() as f64))
    }

    pub(crate) fn as_node(&self) -> Option<&Node> {
        match &self.repr {
            TreeRepr::Tree(node) => Some(node),
            TreeRepr::Flat(_) => None,
        }
    }

    pub(crate) fn flat_cells(&self) -> Option<&[Hyperrectangle]> {
        match &self.repr {
            TreeRepr::Flat(cells) => Some(cells),
            TreeRepr::Tree(_) => None,
        }
    }

    /// Canonical text encoding, used as a model identifier component.
    pub fn id_string(&self) -> String {
        fn enc(node: &Node, out: &mut String) {
            match &node.split {
                None => out.push('L'),
                Some((split, children)) => {
                    match split {
                        Split::Dyadic => out.push_str("S("),
                        Split::Axis { axis, at } => {
                            out.push_str(&format!("A{axis}@{at:.12}("));
                        }
                    }
                    for (i, c) in children.iter().enumerate() {
                        if i > 0 {
                            out.push(',');
                        }
                        enc(c, out);
                    }
                    out.push(')');
                }
            }
        }
        match &self.repr {
            TreeRepr::Tree(node) => {
                let mut s = String::new();
                enc(node, &mut s);
                s
            }
            TreeRepr::Flat(cells) => {
                let mut parts: Vec<String> = cells
                    .iter()
                    .map(|c| format!("{:?}x{:?}", c.lower, c.upper))
                    .collect();
                parts.sort();
                format!("H[{}]", parts.join(";"))
            }
        }
    }
}

/// Recursive split description used to build trees explicitly (tests, IO).
#[derive(Debug, Clone)]
pub enum SplitTree {
    Leaf,
    Split { split: SplitSpec, children: Vec<SplitTree> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    Dyadic,
    Axis { axis: usize, at: f64 },
}

/// Kraft coding constants for one collection at a given `(n, d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodingConstants {
    pub a0: f64,
    pub b0: f64,
    pub c0: f64,
    pub sigma0: f64,
}

/// The coding-constant table, per collection kind.
pub fn coding_constants(kind: PartitionKind, n: usize, d: usize) -> CodingConstants {
    let nf = n as f64;
    let df = d as f64;
    match kind {
        PartitionKind::Udp => CodingConstants {
            a0: (2f64).max(1.0 + nf.ln() / (df * LN_2)).ln(),
            b0: 0.0,
            c0: 0.0,
            sigma0: 1.0 + nf.ln() / (df * LN_2),
        },
        PartitionKind::Rdp => {
            let pow = (2f64).powi(d as i32);
            CodingConstants { a0: 0.0, b0: LN_2, c0: pow / (pow - 1.0), sigma0: 2.0 }
        }
        PartitionKind::Rdsp => CodingConstants {
            a0: 0.0,
            b0: ceil_ln2((1.0 + df).ln()),
            c0: 2.0,
            sigma0: 2.0 * (1.0 + df),
        },
        PartitionKind::Rsp => CodingConstants {
            a0: 0.0,
            b0: ceil_ln2((1.0 + df).ln()) + ceil_ln2(nf.ln()),
            c0: 2.0,
            sigma0: 4.0 * (1.0 + df) * nf,
        },
        PartitionKind::Hrp => CodingConstants {
            a0: 0.0,
            b0: df * ceil_ln2(nf.ln()),
            c0: 1.0,
            sigma0: (2.0 * nf).powi(d as i32),
        },
    }
}

/// Integer shadow of a cell, carrying exactly the quantities the growth
/// rules test so no float comparisons are needed.
#[derive(Debug, Clone)]
pub(crate) enum CellShape {
    /// Number of binary halvings from the root (a dyadic split counts `d`).
    Halvings(u32),
    /// Per-axis `(lo, hi)` grid coordinates in units of `1/n`.
    Grid(Vec<(u64, u64)>),
}

impl CellShape {
    pub(crate) fn root(kind: PartitionKind, n: usize, d: usize) -> Self {
        match kind {
            PartitionKind::Rsp | PartitionKind::Hrp => CellShape::Grid(vec![(0, n as u64); d]),
            _ => CellShape::Halvings(0),
        }
    }
}

/// Checked `2^e` that saturates instead of overflowing.
fn pow2(e: u32) -> u128 {
    if e >= 127 {
        u128::MAX
    } else {
        1u128 << e
    }
}

/// All admissible one-step refinements of `cell` under the growth rule of
/// `kind`, in canonical order (axis ascending, then cut position ascending).
pub(crate) fn admissible_splits(
    kind: PartitionKind,
    n: usize,
    cell: &Hyperrectangle,
    shape: &CellShape,
) -> Vec<(Split, Vec<(Hyperrectangle, CellShape)>)> {
    let d = cell.dim();
    let n = n as u128;
    match (kind, shape) {
        (PartitionKind::Udp | PartitionKind::Rdp, CellShape::Halvings(s)) => {
            // volume 2^-s >= 2^d / n  <=>  n >= 2^(s+d)
            if n >= pow2(s + d as u32) {
                let children = cell
                    .split_dyadic()
                    .into_iter()
                    .map(|c| (c, CellShape::Halvings(s + d as u32)))
                    .collect();
                vec![(Split::Dyadic, children)]
            } else {
                Vec::new()
            }
        }
        (PartitionKind::Rdsp, CellShape::Halvings(s)) => {
            // volume 2^-s >= 2/n  <=>  n >= 2^(s+1)
            if n >= pow2(s + 1) {
                (0..d)
                    .map(|axis| {
                        let mid = 0.5 * (cell.lower[axis] + cell.upper[axis]);
                        let (l, r) = cell.split_at(axis, mid);
                        (
                            Split::Axis { axis, at: mid },
                            vec![(l, CellShape::Halvings(s + 1)), (r, CellShape::Halvings(s + 1))],
                        )
                    })
                    .collect()
            } else {
                Vec::new()
            }
        }
        (PartitionKind::Rsp, CellShape::Grid(ranges)) => {
            let extent = |rs: &[(u64, u64)]| rs.iter().map(|(lo, hi)| (hi - lo) as u128).product::<u128>();
            let total = extent(ranges);
            let min_units = n.pow(d as u32 - 1); // volume >= 1/n in grid units
            // parent volume >= 2/n
            if total < 2 * min_units {
                return Vec::new();
            }
            let mut out = Vec::new();
            for axis in 0..d {
                let (lo, hi) = ranges[axis];
                let other: u128 = total / (hi - lo) as u128;
                for g in lo + 1..hi {
                    let left_units = (g - lo) as u128 * other;
                    let right_units = (hi - g) as u128 * other;
                    if left_units < min_units || right_units < min_units {
                        continue;
                    }
                    let at = g as f64 / n as f64;
                    let (l, r) = cell.split_at(axis, at);
                    let mut lrange = ranges.clone();
                    let mut rrange = ranges.clone();
                    lrange[axis] = (lo, g);
                    rrange[axis] = (g, hi);
                    out.push((
                        Split::Axis { axis, at },
                        vec![(l, CellShape::Grid(lrange)), (r, CellShape::Grid(rrange))],
                    ));
                }
            }
            out
        }
        _ => Vec::new(),
    }
}

const DEFAULT_ENUM_BUDGET: usize = 1_000_000;

/// Enumerates every partition of the collection with at most `max_leaves`
/// leaves, each exactly once, with a default work budget.
pub fn enumerate_partitions(
    kind: PartitionKind,
    n: usize,
    d: usize,
    max_leaves: usize,
) -> Result<Vec<PartitionTree>> {
    enumerate_partitions_budgeted(kind, n, d, max_leaves, DEFAULT_ENUM_BUDGET)
}

/// As [`enumerate_partitions`], erroring once more than `budget` partitions
/// would be produced.
pub fn enumerate_partitions_budgeted(
    kind: PartitionKind,
    n: usize,
    d: usize,
    max_leaves: usize,
    budget: usize,
) -> Result<Vec<PartitionTree>> {
    if n == 0 || d == 0 || max_leaves == 0 {
        return Err(Error::Contract("n, d and max_leaves must be positive".into()));
    }
    match kind {
        PartitionKind::Udp => {
            let mut out = Vec::new();
            let mut j = 0u32;
            // leaf volume 2^-dj >= 1/n  <=>  2^(dj) <= n
            while pow2(j * d as u32) <= n as u128 {
                if pow2(j * d as u32) <= max_leaves as u128 {
                    out.push(PartitionTree::uniform(kind, n, d, j));
                }
                j += 1;
            }
            Ok(out)
        }
        PartitionKind::Rdp | PartitionKind::Rdsp | PartitionKind::Rsp => {
            let root = Hyperrectangle::unit_cube(d);
            let shape = CellShape::root(kind, n, d);
            let mut counter = 0usize;
            let nodes = enumerate_subtrees(kind, n, root, shape, max_leaves, budget, &mut counter)?;
            let mut out = Vec::with_capacity(nodes.len());
            let may_collide =
                kind == PartitionKind::Rsp || (kind == PartitionKind::Rdsp && d > 1);
            if may_collide {
                // Distinct split orders can tile identically; keep first occurrence.
                let mut seen = std::collections::HashSet::new();
                for node in nodes {
                    let tree = PartitionTree::from_node(kind, n, node);
                    let mut key: Vec<Vec<u64>> = tree.leaves().iter().map(|c| c.byte_key()).collect();
                    key.sort();
                    if seen.insert(key) {
                        out.push(tree);
                    }
                }
            } else {
                out.extend(nodes.into_iter().map(|node| PartitionTree::from_node(kind, n, node)));
            }
            Ok(out)
        }
        PartitionKind::Hrp => enumerate_hrp(n, d, max_leaves, budget),
    }
}

fn enumerate_subtrees(
    kind: PartitionKind,
    n: usize,
    cell: Hyperrectangle,
    shape: CellShape,
    max_leaves: usize,
    budget: usize,
    counter: &mut usize,
) -> Result<Vec<Node>> {
    *counter += 1;
    if *counter > budget.saturating_mul(8) {
        return Err(Error::Resource(format!("enumeration explored more than {} nodes", budget * 8)));
    }
    let mut out = vec![Node::leaf(cell.clone())];
    if max_leaves < 2 {
        return Ok(out);
    }
    for (split, children) in admissible_splits(kind, n, &cell, &shape) {
        let arity = children.len();
        if arity > max_leaves {
            continue;
        }
        let combos = child_combos(kind, n, &children, max_leaves, budget, counter)?;
        for combo in combos {
            if out.len() >= budget {
                return Err(Error::Resource(format!("more than {budget} partitions at a single cell")));
            }
            out.push(Node::internal(cell.clone(), split.clone(), combo));
        }
    }
    Ok(out)
}

/// Cartesian product of child subtrees whose total leaf count stays within
/// `max_leaves`.
fn child_combos(
    kind: PartitionKind,
    n: usize,
    children: &[(Hyperrectangle, CellShape)],
    max_leaves: usize,
    budget: usize,
    counter: &mut usize,
) -> Result<Vec<Vec<Node>>> {
    let (first, rest) = children.split_first().expect("children nonempty");
    // Later children need at least one leaf each.
    let reserve = rest.len();
    if max_leaves <= reserve {
        return Ok(Vec::new());
    }
    let firsts = enumerate_subtrees(kind, n, first.0.clone(), first.1.clone(), max_leaves - reserve, budget, counter)?;
    if rest.is_empty() {
        return Ok(firsts.into_iter().map(|f| vec![f]).collect());
    }
    let mut out = Vec::new();
    for f in firsts {
        let used = f.leaf_count;
        let tails = child_combos(kind, n, rest, max_leaves - used, budget, counter)?;
        for tail in tails {
            if out.len() >= budget {
                return Err(Error::Resource(format!("more than {budget} child combinations")));
            }
            let mut combo = Vec::with_capacity(1 + tail.len());
            combo.push(f.clone());
            combo.extend(tail);
            out.push(combo);
        }
    }
    Ok(out)
}

/// Exhaustive enumeration of grid tilings; only exhaustive search exists for
/// this collection, so it is gated to desk scale.
fn enumerate_hrp(n: usize, d: usize, max_leaves: usize, budget: usize) -> Result<Vec<PartitionTree>> {
    if max_leaves > 4 || n > 8 {
        return Err(Error::Resource(
            "hrp enumeration is gated to max_leaves <= 4 and n <= 8".into(),
        ));
    }
    let min_units: u64 = (n as u64).pow(d as u32 - 1); // cell volume >= 1/n
    let total_units: u64 = (n as u64).pow(d as u32);
    let mut covered = vec![false; total_units as usize];
    let mut cells: Vec<Vec<(u64, u64)>> = Vec::new();
    let mut out = Vec::new();

    fn unit_index(coords: &[u64], n: u64) -> usize {
        coords.iter().fold(0u64, |acc, &c| acc * n + c) as usize
    }

    fn first_uncovered(covered: &[bool]) -> Option<usize> {
        covered.iter().position(|&c| !c)
    }

    fn coords_of(mut idx: u64, n: u64, d: usize) -> Vec<u64> {
        let mut coords = vec![0u64; d];
        for j in (0..d).rev() {
            coords[j] = idx % n;
            idx /= n;
        }
        coords
    }

    fn recurse(
        n: u64,
        d: usize,
        min_units: u64,
        max_leaves: usize,
        budget: usize,
        covered: &mut Vec<bool>,
        cells: &mut Vec<Vec<(u64, u64)>>,
        out: &mut Vec<PartitionTree>,
    ) -> Result<()> {
        let Some(anchor) = first_uncovered(covered) else {
            if out.len() >= budget {
                return Err(Error::Resource(format!("more than {budget} hrp tilings")));
            }
            let rects = cells
                .iter()
                .map(|ranges| {
                    Hyperrectangle::new(
                        ranges.iter().map(|(lo, _)| *lo as f64 / n as f64).collect(),
                        ranges.iter().map(|(_, hi)| *hi as f64 / n as f64).collect(),
                    )
                    .expect("grid cell is valid")
                })
                .collect();
            out.push(PartitionTree::from_cells(n as usize, rects));
            return Ok(());
        };
        if cells.len() == max_leaves {
            return Ok(());
        }
        let lo = coords_of(anchor as u64, n, d);
        // Try every box anchored at the first uncovered unit.
        let mut extents = vec![1u64; d];
        loop {
            let fits = lo.iter().zip(&extents).all(|(l, e)| l + e <= n);
            if fits {
                let units: u64 = extents.iter().product();
                if units >= min_units {
                    let mut touched = Vec::new();
                    let mut free = true;
                    'mark: for unit in 0..units {
                        let mut rem = unit;
                        let mut coords = vec![0u64; d];
                        for j in (0..d).rev() {
                            coords[j] = lo[j] + rem % extents[j];
                            rem /= extents[j];
                        }
                        let idx = unit_index(&coords, n);
                        if covered[idx] {
                            free = false;
                            break 'mark;
                        }
                        touched.push(idx);
                    }
                    if free && touched.len() == units as usize {
                        touched.iter().for_each(|&i| covered[i] = true);
                        cells.push(lo.iter().zip(&extents).map(|(l, e)| (*l, l + e)).collect());
                        recurse(n, d, min_units, max_leaves, budget, covered, cells, out)?;
                        cells.pop();
                        touched.iter().for_each(|&i| covered[i] = false);
                    }
                }
            }
            // Odometer over extents.
            let mut j = d;
            loop {
                if j == 0 {
                    return Ok(());
                }
                j -= 1;
                extents[j] += 1;
                if lo[j] + extents[j] <= n {
                    break;
                }
                extents[j] = 1;
            }
        }
    }

    recurse(n as u64, d, min_units, max_leaves, budget, &mut covered, &mut cells, &mut out)?;
    Ok(out)
}

/// `sum over enumerated partitions of exp(-coding_weight)`; property-test
/// support for the Kraft inequality.
pub fn kraft_sum(kind: PartitionKind, n: usize, d: usize, c: f64, max_leaves: usize) -> Result<f64> {
    let trees = enumerate_partitions(kind, n, d, max_leaves)?;
    let mut sum = 0.0;
    for tree in &trees {
        sum += (-tree.coding_weight(c)?).exp();
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_ln2_rounds_to_multiples() {
        assert!((ceil_ln2(3f64.ln()) - 2.0 * LN_2).abs() < 1e-12);
        assert!((ceil_ln2(16f64.ln()) - 4.0 * LN_2).abs() < 1e-12);
        assert!((ceil_ln2(LN_2) - LN_2).abs() < 1e-12);
        assert_eq!(ceil_ln2(0.0), 0.0);
    }

    #[test]
    fn udp_collection_size() {
        let trees = enumerate_partitions(PartitionKind::Udp, 64, 1, usize::MAX >> 1).unwrap();
        assert_eq!(trees.len(), 7); // depths 0..=6
        let leaf_counts: Vec<usize> = trees.iter().map(|t| t.num_leaves()).collect();
        assert_eq!(leaf_counts, vec![1, 2, 4, 8, 16, 32, 64]);
    }

    #[test]
    fn rdp_enumeration_small() {
        // Binary trees with <= 4 leaves whose split nodes all have volume
        // >= 2/16: 1 + 1 + 2 + 5 shapes.
        let trees = enumerate_partitions(PartitionKind::Rdp, 16, 1, 4).unwrap();
        assert_eq!(trees.len(), 9);
        // Cross-check against an independent count over subtree shapes of
        // the admissible complete tree (split nodes at volume 1, 1/2, 1/4, 1/8).
        fn count(depth: u32, max_leaves: usize) -> usize {
            if depth == 4 || max_leaves < 2 {
                return 1; // leaf only
            }
            let mut total = 1;
            for left in 1..max_leaves {
                let l = count_exact(depth + 1, left);
                if l == 0 {
                    continue;
                }
                for right in 1..=(max_leaves - left) {
                    total += l * count_exact(depth + 1, right);
                }
            }
            total
        }
        fn count_exact(depth: u32, leaves: usize) -> usize {
            if leaves == 1 {
                return 1;
            }
            if depth == 4 {
                return 0;
            }
            let mut total = 0;
            for left in 1..leaves {
                total += count_exact(depth + 1, left) * count_exact(depth + 1, leaves - left);
            }
            total
        }
        assert_eq!(trees.len(), count(0, 4));
    }

    #[test]
    fn max_leaves_one_gives_root() {
        for kind in [PartitionKind::Udp, PartitionKind::Rdp, PartitionKind::Rdsp, PartitionKind::Rsp] {
            let trees = enumerate_partitions(kind, 16, 2, 1).unwrap();
            assert_eq!(trees.len(), 1);
            assert_eq!(trees[0].num_leaves(), 1);
        }
    }

    #[test]
    fn udp_coding_weight_example() {
        let tree = PartitionTree::uniform(PartitionKind::Udp, 64, 1, 3);
        let w = tree.coding_weight(1.0).unwrap();
        assert!((w - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rdp_coding_weight_example() {
        let trees = enumerate_partitions(PartitionKind::Rdp, 16, 1, 4).unwrap();
        let four = trees.iter().find(|t| t.num_leaves() == 4).unwrap();
        assert!((four.coding_weight(2.0).unwrap() - 8.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn rsp_coding_weight_example() {
        let trees = enumerate_partitions(PartitionKind::Rsp, 16, 2, 2).unwrap();
        let two = trees.iter().find(|t| t.num_leaves() == 2).unwrap();
        let expected = 2.0 * 2.0 * (ceil_ln2(3f64.ln()) + ceil_ln2(16f64.ln()));
        assert!((two.coding_weight(2.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 24.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn coding_weight_rejects_small_c() {
        let tree = PartitionTree::root_only(PartitionKind::Rsp, 16, 1);
        assert!(matches!(tree.coding_weight(1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn kraft_udp_is_exactly_one() {
        let sum = kraft_sum(PartitionKind::Udp, 64, 1, 1.0, usize::MAX >> 1).unwrap();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kraft_rdp_truncated() {
        let sum = kraft_sum(PartitionKind::Rdp, 16, 1, 2.0, 8).unwrap();
        assert!(sum <= 1.0 + 1e-12);
    }

    #[test]
    fn kraft_single_partition() {
        let consts = coding_constants(PartitionKind::Rdsp, 16, 1);
        let sum = kraft_sum(PartitionKind::Rdsp, 16, 1, 2.0, 1).unwrap();
        assert!((sum - (-2.0 * (consts.a0 + consts.b0)).exp()).abs() < 1e-12);
        assert!(sum <= 1.0);
    }

    #[test]
    fn leaf_of_quadrant() {
        let tree = PartitionTree::uniform(PartitionKind::Rdp, 16, 2, 1);
        let id = tree.leaf_of(&[0.1, 0.9]).unwrap();
        let cell = tree.leaf_cell(id);
        assert_eq!(cell.lower(), &[0.0, 0.5]);
        assert_eq!(cell.upper(), &[0.5, 1.0]);
    }

    #[test]
    fn leaf_of_lower_corner_and_upper_boundary() {
        let tree = PartitionTree::uniform(PartitionKind::Rdp, 64, 2, 2);
        let id = tree.leaf_of(&[0.0, 0.0]).unwrap();
        let cell = tree.leaf_cell(id);
        assert_eq!(cell.lower(), &[0.0, 0.0]);
        // Global upper corner belongs to the last cell.
        let id = tree.leaf_of(&[1.0, 1.0]).unwrap();
        let cell = tree.leaf_cell(id);
        assert_eq!(cell.upper(), &[1.0, 1.0]);
    }

    #[test]
    fn leaf_of_rsp_half_open() {
        // Single split at 0.3 on axis 0 over [0,1]; 0.3 belongs to the right leaf.
        let n = 10;
        let trees = enumerate_partitions(PartitionKind::Rsp, n, 1, 2).unwrap();
        let tree = trees
            .iter()
            .find(|t| t.num_leaves() == 2 && (t.leaves()[0].upper()[0] - 0.3).abs() < 1e-12)
            .unwrap();
        let id = tree.leaf_of(&[0.3]).unwrap();
        assert_eq!(id, LeafId(1));
        // Cross-check against both cells' membership predicates.
        let leaves = tree.leaves();
        assert!(!leaves[0].contains(&[0.3], &[1.0]));
        assert!(leaves[1].contains(&[0.3], &[1.0]));
    }

    #[test]
    fn leaf_of_outside_domain_errors() {
        let tree = PartitionTree::root_only(PartitionKind::Rdp, 16, 2);
        assert!(matches!(tree.leaf_of(&[1.5, 0.2]), Err(Error::Domain(_))));
    }

    #[test]
    fn hrp_gating_and_enumeration() {
        assert!(matches!(
            enumerate_partitions(PartitionKind::Hrp, 64, 1, 4),
            Err(Error::Resource(_))
        ));
        // Compositions of 4 grid units into at most 4 intervals: 8 of them.
        let trees = enumerate_partitions(PartitionKind::Hrp, 4, 1, 4).unwrap();
        assert_eq!(trees.len(), 8);
        for t in &trees {
            assert!((t.leaves().iter().map(|c| c.volume()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hrp_2d_min_volume_rule() {
        let trees = enumerate_partitions(PartitionKind::Hrp, 4, 2, 4).unwrap();
        for t in &trees {
            for cell in t.leaves() {
                assert!(cell.volume() >= 1.0 / 4.0 - 1e-12);
            }
        }
        assert!(!trees.is_empty());
    }

    #[test]
    fn rsp_yields_each_interval_partition_once() {
        // n = 4, d = 1: the interval partitions on the 1/4 grid are exactly
        // the compositions of 4, i.e. 8 of them, however many split orders
        // reach each one.
        let trees = enumerate_partitions(PartitionKind::Rsp, 4, 1, 4).unwrap();
        assert_eq!(trees.len(), 8);
    }

    #[test]
    fn rdsp_dedupes_identical_tilings() {
        let trees = enumerate_partitions(PartitionKind::Rdsp, 16, 2, 4).unwrap();
        let mut keys: Vec<Vec<Vec<u64>>> = trees
            .iter()
            .map(|t| {
                let mut key: Vec<Vec<u64>> = t.leaves().iter().map(|c| c.byte_key()).collect();
                key.sort();
                key
            })
            .collect();
        let before = keys.len();
        keys.sort();
        keys.dedup();
        assert_eq!(before, keys.len());
    }

    #[test]
    fn enumeration_respects_min_volume() {
        for kind in [PartitionKind::Udp, PartitionKind::Rdp, PartitionKind::Rdsp, PartitionKind::Rsp] {
            for (n, d) in [(16usize, 1usize), (16, 2), (8, 1)] {
                // Grid splits branch ~n-fold per node; cap the leaf count there.
                let max_leaves = if kind == PartitionKind::Rsp && (d == 2 || n == 16) { 4 } else { 8 };
                let trees = enumerate_partitions(kind, n, d, max_leaves).unwrap();
                for t in &trees {
                    for leaf in t.leaves() {
                        assert!(
                            leaf.volume() >= 1.0 / n as f64 - 1e-12,
                            "{kind:?} ({n},{d}) produced leaf of volume {}",
                            leaf.volume()
                        );
                    }
                }
            }
        }
    }
}

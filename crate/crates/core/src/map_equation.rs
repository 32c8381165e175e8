//! Random-walk flow on a [`ClassGraph`] and the two-level map equation.
//!
//! The walker follows row-normalized edge weights. Nodes without out-edges
//! jump uniformly to one of the other nodes. With probability `teleport` the
//! walker instead jumps to a uniformly random node, and those jumps are
//! recorded: a teleport that lands outside the current module counts as an
//! exit. The codelength of a partition is
//!
//! ```text
//! L = q·H(Q) + Σ_i p_i·H(P^i)
//! ```
//!
//! with `q` the total module exit rate, `Q` the normalized exit rates, `p_i`
//! the exit plus visit rate of module `i` and `P^i` its normalized
//! exit-and-visit distribution. Entropies are in bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_builder::{ClassGraph, SquareMatrix};

/// `x·log2(x)` with `0·log 0 = 0`.
pub fn plogp(x: f64) -> f64 {
    if x > 0.0 {
        x * x.log2()
    } else {
        0.0
    }
}

/// Shannon entropy in bits of a distribution given by its weights.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().copied().map(plogp).sum::<f64>()
}

/// Sparse row-stochastic transition matrix.
///
/// Rows of dangling nodes are not stored: they are uniform over the other
/// `n − 1` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
    dangling: Vec<bool>,
}

impl TransitionMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_dangling(&self, node: usize) -> bool {
        self.dangling[node]
    }

    /// Stored `(target, probability)` entries of a non-dangling row.
    pub fn sparse_row(&self, node: usize) -> &[(usize, f64)] {
        &self.rows[node]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.dangling[i] {
            if i == j {
                0.0
            } else {
                1.0 / (self.n - 1) as f64
            }
        } else {
            self.rows[i]
                .iter()
                .find(|&&(t, _)| t == j)
                .map_or(0.0, |&(_, p)| p)
        }
    }

    pub fn to_dense(&self) -> SquareMatrix {
        let mut m = SquareMatrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                m.set(i, j, self.get(i, j));
            }
        }
        m
    }
}

pub fn transition_matrix(graph: &ClassGraph) -> Result<TransitionMatrix> {
    let n = graph.num_nodes();
    if n < 2 {
        return Err(Error::GraphTooSmall(n));
    }
    let mut rows = Vec::with_capacity(n);
    let mut dangling = Vec::with_capacity(n);
    for i in 0..n {
        let edges = graph.out_edges(i);
        let total: f64 = edges.iter().map(|e| e.weight).sum();
        if edges.is_empty() {
            rows.push(Vec::new());
            dangling.push(true);
        } else {
            rows.push(edges.iter().map(|e| (e.target, e.weight / total)).collect());
            dangling.push(false);
        }
    }
    Ok(TransitionMatrix { n, rows, dangling })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    pub teleport: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            teleport: 0.15,
            tol: 1e-12,
            max_iters: 10_000,
        }
    }
}

fn transpose_rows(p: &TransitionMatrix) -> Vec<Vec<(usize, f64)>> {
    let mut cols = vec![Vec::new(); p.n];
    for (i, row) in p.rows.iter().enumerate() {
        for &(j, v) in row {
            cols[j].push((i, v));
        }
    }
    cols
}

/// Stationary visit rates of the teleporting walk, by power iteration from
/// the uniform vector.
pub fn visit_rates(
    p: &TransitionMatrix,
    teleport: f64,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&teleport) {
        return Err(Error::InvalidArgument(format!(
            "teleport must be in [0, 1), got {teleport}"
        )));
    }
    if !(tol > 0.0) || max_iters == 0 {
        return Err(Error::InvalidArgument(
            "tol and max_iters must be positive".into(),
        ));
    }
    let n = p.n;
    let cols = transpose_rows(p);
    let uniform = 1.0 / n as f64;
    let spread = 1.0 / (n - 1) as f64;
    let mut rates = vec![uniform; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let dangling_mass: f64 = (0..n).filter(|&i| p.dangling[i]).map(|i| rates[i]).sum();
        for j in 0..n {
            let own = if p.dangling[j] { rates[j] } else { 0.0 };
            let linked: f64 = cols[j].iter().map(|&(i, v)| rates[i] * v).sum();
            next[j] =
                teleport * uniform + (1.0 - teleport) * (linked + (dangling_mass - own) * spread);
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        residual = rates.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut rates, &mut next);
        if residual < tol {
            return Ok(rates);
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iters,
        residual,
    })
}

/// A transition matrix with its stationary visit rates: everything the map
/// equation needs that does not depend on the partition.
#[derive(Debug, Clone)]
pub struct FlowModel {
    transition: TransitionMatrix,
    visit_rates: Vec<f64>,
    teleport: f64,
    in_rows: Vec<Vec<(usize, f64)>>,
}

impl FlowModel {
    pub fn new(graph: &ClassGraph, params: &FlowParams) -> Result<Self> {
        Self::from_transition(transition_matrix(graph)?, params)
    }

    pub fn from_transition(transition: TransitionMatrix, params: &FlowParams) -> Result<Self> {
        let rates = visit_rates(&transition, params.teleport, params.tol, params.max_iters)?;
        Ok(Self::with_visit_rates(transition, rates, params.teleport))
    }

    /// Assembles a model from precomputed rates. `rates` must be the
    /// stationary distribution for `teleport`.
    pub fn with_visit_rates(transition: TransitionMatrix, rates: Vec<f64>, teleport: f64) -> Self {
        let in_rows = transpose_rows(&transition);
        FlowModel {
            transition,
            visit_rates: rates,
            teleport,
            in_rows,
        }
    }

    pub fn n(&self) -> usize {
        self.transition.n
    }

    pub fn transition(&self) -> &TransitionMatrix {
        &self.transition
    }

    pub fn visit_rates(&self) -> &[f64] {
        &self.visit_rates
    }

    pub fn teleport(&self) -> f64 {
        self.teleport
    }

    /// Stationary link flow `p_a · P_ab` entering `node` from non-dangling
    /// sources, as `(source, flow)` pairs.
    pub(crate) fn in_link_flows(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.in_rows[node]
            .iter()
            .map(move |&(src, prob)| (src, self.visit_rates[src] * prob))
    }

    pub(crate) fn out_link_flows(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let p = self.visit_rates[node];
        self.transition.rows[node]
            .iter()
            .map(move |&(dst, prob)| (dst, p * prob))
    }

    /// Link-step flow entering `node` from every other node, dangling rows
    /// included: `Σ_{β≠α} p_β·P_βα`.
    pub fn link_enter_flow(&self, node: usize) -> f64 {
        let stored: f64 = self.in_link_flows(node).map(|(_, f)| f).sum();
        let dangling: f64 = (0..self.n())
            .filter(|&b| b != node && self.transition.dangling[b])
            .map(|b| self.visit_rates[b])
            .sum();
        stored + dangling * self.dangling_spread()
    }

    fn dangling_spread(&self) -> f64 {
        1.0 / (self.n() - 1) as f64
    }
}

/// Assignment of every node to one of `num_modules` compactly indexed modules.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    assignment: Vec<usize>,
    num_modules: usize,
}

impl Partition {
    /// Validates that module indices are exactly `0..m`.
    pub fn new(assignment: Vec<usize>) -> Result<Self> {
        let num_modules = assignment.iter().map(|&m| m + 1).max().unwrap_or(0);
        let mut seen = vec![false; num_modules];
        for &m in &assignment {
            seen[m] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument(
                "module indices are not compact".into(),
            ));
        }
        Ok(Partition {
            assignment,
            num_modules,
        })
    }

    /// Relabels arbitrary module labels to `0..m` in order of first appearance.
    pub fn compacted(labels: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let assignment = labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Partition {
            assignment,
            num_modules: map.len(),
        }
    }

    pub fn singletons(n: usize) -> Self {
        Partition {
            assignment: (0..n).collect(),
            num_modules: n,
        }
    }

    pub fn one_module(n: usize) -> Self {
        Partition {
            assignment: vec![0; n],
            num_modules: usize::from(n > 0),
        }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn module_of(&self, node: usize) -> usize {
        self.assignment[node]
    }

    pub fn num_modules(&self) -> usize {
        self.num_modules
    }

    pub fn num_nodes(&self) -> usize {
        self.assignment.len()
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_modules];
        for (node, &m) in self.assignment.iter().enumerate() {
            out[m].push(node);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_modules];
        for &m in &self.assignment {
            out[m] += 1;
        }
        out
    }
}

/// Per-module flow quantities for one partition.
#[derive(Debug, Clone)]
pub struct FlowStats<'a> {
    pub model: &'a FlowModel,
    /// Exit rate `q_i` of each module.
    pub module_exit: Vec<f64>,
    /// Total exit rate `q = Σ q_i`.
    pub total_exit: f64,
    /// `q_i + Σ_{α∈i} p_α`.
    pub module_stay: Vec<f64>,
    /// `Σ_{α∈i} p_α`.
    pub module_visit: Vec<f64>,
    pub(crate) modules: ModuleState,
}

/// Additive per-module quantities from which exit rates follow.
#[derive(Debug, Clone)]
pub(crate) struct ModuleState {
    n: usize,
    teleport: f64,
    pub(crate) visit: Vec<f64>,
    pub(crate) size: Vec<usize>,
    dangling: Vec<f64>,
    /// Link flow leaving the module, before the `(1 − teleport)` factor.
    link_exit: Vec<f64>,
}

impl ModuleState {
    pub(crate) fn new(model: &FlowModel, assignment: &[usize], num_modules: usize) -> Self {
        let n = model.n();
        let p = model.transition();
        let rates = model.visit_rates();
        let mut state = ModuleState {
            n,
            teleport: model.teleport(),
            visit: vec![0.0; num_modules],
            size: vec![0; num_modules],
            dangling: vec![0.0; num_modules],
            link_exit: vec![0.0; num_modules],
        };
        for node in 0..n {
            let m = assignment[node];
            state.visit[m] += rates[node];
            state.size[m] += 1;
            if p.is_dangling(node) {
                state.dangling[m] += rates[node];
            } else {
                state.link_exit[m] += model
                    .out_link_flows(node)
                    .filter(|&(dst, _)| assignment[dst] != m)
                    .map(|(_, f)| f)
                    .sum::<f64>();
            }
        }
        for m in 0..num_modules {
            let outside = (n - state.size[m]) as f64;
            state.link_exit[m] += state.dangling[m] * outside * model.dangling_spread();
        }
        state
    }

    pub(crate) fn num_modules(&self) -> usize {
        self.visit.len()
    }

    fn exit_of(&self, link_exit: f64, visit: f64, size: usize) -> f64 {
        let outside = (self.n - size) as f64 / self.n as f64;
        (1.0 - self.teleport) * link_exit + self.teleport * visit * outside
    }

    pub(crate) fn exit(&self, m: usize) -> f64 {
        self.exit_of(self.link_exit[m], self.visit[m], self.size[m])
    }

    pub(crate) fn total_exit(&self) -> f64 {
        (0..self.num_modules()).map(|m| self.exit(m)).sum()
    }

    /// Link flow from `node` into the other members of `module`, and from
    /// those members into `node`. `sparse_out` and `sparse_in` are the
    /// stored-link parts; dangling rows are added here.
    fn flows_with(
        &self,
        model: &FlowModel,
        node: usize,
        node_module: usize,
        module: usize,
        sparse_out: f64,
        sparse_in: f64,
    ) -> (f64, f64) {
        let p = model.visit_rates()[node];
        let node_dangles = model.transition().is_dangling(node);
        let others = self.size[module] - usize::from(node_module == module);
        let out = if node_dangles {
            p * others as f64 * model.dangling_spread()
        } else {
            sparse_out
        };
        let own_dangling = if node_dangles && node_module == module {
            p
        } else {
            0.0
        };
        let inflow =
            sparse_in + (self.dangling[module] - own_dangling).max(0.0) * model.dangling_spread();
        (out, inflow)
    }

    /// Codelength change for moving `node` from `from` to `to`, together with
    /// the new exit rates of both modules.
    pub(crate) fn move_delta(
        &self,
        model: &FlowModel,
        node: usize,
        from: usize,
        to: usize,
        sparse_from: (f64, f64),
        sparse_to: (f64, f64),
        total_exit: f64,
    ) -> f64 {
        let p = model.visit_rates()[node];
        let (out_from, in_from) =
            self.flows_with(model, node, from, from, sparse_from.0, sparse_from.1);
        let (out_to, in_to) = self.flows_with(model, node, from, to, sparse_to.0, sparse_to.1);

        let old_from = self.exit(from);
        let old_to = self.exit(to);
        let new_from = if self.size[from] == 1 {
            0.0
        } else {
            self.exit_of(
                self.link_exit[from] - (p - out_from) + in_from,
                self.visit[from] - p,
                self.size[from] - 1,
            )
        };
        let new_to = self.exit_of(
            self.link_exit[to] + (p - out_to) - in_to,
            self.visit[to] + p,
            self.size[to] + 1,
        );
        let new_total = total_exit - old_from - old_to + new_from + new_to;

        let stay_old = plogp(old_from + self.visit[from]) + plogp(old_to + self.visit[to]);
        let stay_new = plogp(new_from + self.visit[from] - p) + plogp(new_to + self.visit[to] + p);
        plogp(new_total)
            - plogp(total_exit)
            - 2.0 * (plogp(new_from) + plogp(new_to) - plogp(old_from) - plogp(old_to))
            + stay_new
            - stay_old
    }

    pub(crate) fn apply_move(
        &mut self,
        model: &FlowModel,
        node: usize,
        from: usize,
        to: usize,
        sparse_from: (f64, f64),
        sparse_to: (f64, f64),
    ) {
        let p = model.visit_rates()[node];
        let dangles = model.transition().is_dangling(node);
        let (out_from, in_from) =
            self.flows_with(model, node, from, from, sparse_from.0, sparse_from.1);
        let (out_to, in_to) = self.flows_with(model, node, from, to, sparse_to.0, sparse_to.1);

        self.link_exit[from] += -(p - out_from) + in_from;
        self.visit[from] -= p;
        self.size[from] -= 1;
        if dangles {
            self.dangling[from] -= p;
        }
        if self.size[from] == 0 {
            self.link_exit[from] = 0.0;
            self.visit[from] = 0.0;
            self.dangling[from] = 0.0;
        }

        self.link_exit[to] += (p - out_to) - in_to;
        self.visit[to] += p;
        self.size[to] += 1;
        if dangles {
            self.dangling[to] += p;
        }
    }

    /// Codelength given `Σ_α plogp(p_α)` over all nodes.
    pub(crate) fn codelength(&self, node_plogp: f64) -> f64 {
        let mut total_exit = 0.0;
        let mut exit_terms = 0.0;
        let mut stay_terms = 0.0;
        for m in 0..self.num_modules() {
            if self.size[m] == 0 {
                continue;
            }
            let q = self.exit(m);
            total_exit += q;
            exit_terms += plogp(q);
            stay_terms += plogp(q + self.visit[m]);
        }
        plogp(total_exit) - 2.0 * exit_terms - node_plogp + stay_terms
    }
}

/// Sums of stored link flow between `node` and the members of `module`
/// (excluding `node` itself): `(out, in)`.
pub(crate) fn sparse_flows_to_module(
    model: &FlowModel,
    assignment: &[usize],
    node: usize,
    module: usize,
) -> (f64, f64) {
    let out = model
        .out_link_flows(node)
        .filter(|&(dst, _)| dst != node && assignment[dst] == module)
        .map(|(_, f)| f)
        .sum();
    let inflow = model
        .in_link_flows(node)
        .filter(|&(src, _)| src != node && assignment[src] == module)
        .map(|(_, f)| f)
        .sum();
    (out, inflow)
}

pub fn module_flows<'a>(model: &'a FlowModel, partition: &Partition) -> FlowStats<'a> {
    let modules = ModuleState::new(model, partition.assignment(), partition.num_modules());
    let module_exit: Vec<f64> = (0..partition.num_modules())
        .map(|m| modules.exit(m))
        .collect();
    let total_exit = module_exit.iter().sum();
    let module_stay = module_exit
        .iter()
        .zip(&modules.visit)
        .map(|(q, v)| q + v)
        .collect();
    FlowStats {
        model,
        module_visit: modules.visit.clone(),
        module_exit,
        total_exit,
        module_stay,
        modules,
    }
}

/// Map-equation codelength in bits.
pub fn codelength(stats: &FlowStats<'_>, partition: &Partition) -> f64 {
    let rates = stats.model.visit_rates();
    let mut node_terms = vec![0.0; partition.num_modules()];
    for (node, &m) in partition.assignment().iter().enumerate() {
        node_terms[m] += plogp(rates[node]);
    }
    let exit_term = if stats.total_exit > 0.0 {
        stats.total_exit
            * entropy(
                &stats
                    .module_exit
                    .iter()
                    .map(|q| q / stats.total_exit)
                    .collect::<Vec<_>>(),
            )
    } else {
        0.0
    };
    // p_i·H(P^i) = plogp(p_i) − plogp(q_i) − Σ_{α∈i} plogp(p_α)
    let module_terms: f64 = (0..partition.num_modules())
        .map(|m| plogp(stats.module_stay[m]) - plogp(stats.module_exit[m]) - node_terms[m])
        .sum();
    exit_term + module_terms
}

/// `L(after) − L(before)` for moving `node` into `target_module`.
pub fn delta_codelength(
    stats: &FlowStats<'_>,
    partition: &Partition,
    node: usize,
    target_module: usize,
) -> Result<f64> {
    let from = partition.module_of(node);
    if from == target_module {
        return Err(Error::AlreadyInModule {
            node,
            module: target_module,
        });
    }
    if target_module >= partition.num_modules() {
        return Err(Error::InvalidArgument(format!(
            "module {target_module} does not exist"
        )));
    }
    let a = partition.assignment();
    let sparse_from = sparse_flows_to_module(stats.model, a, node, from);
    let sparse_to = sparse_flows_to_module(stats.model, a, node, target_module);
    Ok(stats.modules.move_delta(
        stats.model,
        node,
        from,
        target_module,
        sparse_from,
        sparse_to,
        stats.total_exit,
    ))
}

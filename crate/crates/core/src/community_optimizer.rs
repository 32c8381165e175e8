//! Greedy node-moving minimization of the map equation.
//!
//! Every node starts in its own module. Each pass visits the nodes in a
//! freshly shuffled order and moves each one to whichever module among its
//! neighbors' modules lowers the codelength the most, applying the move
//! immediately. Passes stop once one of them improves the codelength by less
//! than `min_improvement`.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_builder::ClassGraph;
use crate::map_equation::{
    codelength, module_flows, plogp, FlowModel, FlowParams, ModuleState, Partition,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub seed: u64,
    pub max_passes: usize,
    pub min_improvement: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            seed: 0,
            max_passes: 100,
            min_improvement: 1e-10,
        }
    }
}

impl OptimizerConfig {
    /// Config with the seed mixed with a class label, so classes optimized
    /// side by side draw independent visiting orders.
    pub fn for_class(&self, class_label: usize) -> Self {
        OptimizerConfig {
            seed: self.seed ^ class_label as u64,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassLog {
    pub pass: usize,
    pub moves: usize,
    pub codelength: f64,
}

impl fmt::Display for PassLog {
    /// `pass <i> moves <m> codelength <L>`, with L to 12 significant digits.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "pass {} moves {} codelength {}",
            self.pass,
            self.moves,
            significant(self.codelength, 12)
        )
    }
}

fn significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoveRecord {
    pub node: usize,
    pub from: usize,
    pub to: usize,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub partition: Partition,
    pub codelength: f64,
    pub initial_codelength: f64,
    pub passes: Vec<PassLog>,
    /// Every applied move, in order. Module indices are the uncompacted
    /// working labels (initially equal to node ordinals).
    pub moves: Vec<MoveRecord>,
}

/// Builds the flow model for `graph` and optimizes its partition.
pub fn detect_communities(
    graph: &ClassGraph,
    flow: &FlowParams,
    config: &OptimizerConfig,
) -> Result<Detection> {
    let model = FlowModel::new(graph, flow)?;
    optimize_partition(&model, graph, config)
}

/// Per-module link-flow accumulator for one node's neighborhood.
struct Neighborhood {
    out_flow: Vec<f64>,
    in_flow: Vec<f64>,
    seen: Vec<bool>,
    modules: Vec<usize>,
}

impl Neighborhood {
    fn new(n: usize) -> Self {
        Neighborhood {
            out_flow: vec![0.0; n],
            in_flow: vec![0.0; n],
            seen: vec![false; n],
            modules: Vec::new(),
        }
    }

    fn touch(&mut self, m: usize) {
        if !self.seen[m] {
            self.seen[m] = true;
            self.modules.push(m);
        }
    }

    fn gather(&mut self, model: &FlowModel, assignment: &[usize], node: usize) {
        self.touch(assignment[node]);
        for (dst, f) in model.out_link_flows(node) {
            let m = assignment[dst];
            self.touch(m);
            self.out_flow[m] += f;
        }
        for (src, f) in model.in_link_flows(node) {
            let m = assignment[src];
            self.touch(m);
            self.in_flow[m] += f;
        }
        self.modules.sort_unstable();
    }

    fn flows(&self, m: usize) -> (f64, f64) {
        (self.out_flow[m], self.in_flow[m])
    }

    fn clear(&mut self) {
        for &m in &self.modules {
            self.out_flow[m] = 0.0;
            self.in_flow[m] = 0.0;
            self.seen[m] = false;
        }
        self.modules.clear();
    }
}

/// Optimizes the partition of `graph` under a prebuilt flow model.
pub fn optimize_partition(
    model: &FlowModel,
    graph: &ClassGraph,
    config: &OptimizerConfig,
) -> Result<Detection> {
    let n = graph.num_nodes();
    if n < 2 {
        return Err(Error::GraphTooSmall(n));
    }
    if model.n() != n {
        return Err(Error::InvalidArgument(format!(
            "flow model has {} nodes, graph has {n}",
            model.n()
        )));
    }
    if !(config.min_improvement >= 0.0) {
        return Err(Error::InvalidArgument("min_improvement must be ≥ 0".into()));
    }

    let mut assignment: Vec<usize> = (0..n).collect();
    let mut state = ModuleState::new(model, &assignment, n);
    let node_plogp: f64 = model.visit_rates().iter().copied().map(plogp).sum();
    let initial_codelength = state.codelength(node_plogp);
    let mut current = initial_codelength;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut hood = Neighborhood::new(n);
    let mut passes = Vec::new();
    let mut moves = Vec::new();

    for pass in 0..config.max_passes {
        order.shuffle(&mut rng);
        let mut total_exit = state.total_exit();
        let mut improvement = 0.0;
        let mut applied = 0;

        for &node in &order {
            let from = assignment[node];
            hood.gather(model, &assignment, node);
            let mut best = (0.0, from);
            for &m in &hood.modules {
                if m == from {
                    continue;
                }
                let delta = state.move_delta(
                    model,
                    node,
                    from,
                    m,
                    hood.flows(from),
                    hood.flows(m),
                    total_exit,
                );
                if delta < best.0 {
                    best = (delta, m);
                }
            }
            let (delta, to) = best;
            if to != from && -delta >= config.min_improvement {
                let old = state.exit(from) + state.exit(to);
                state.apply_move(model, node, from, to, hood.flows(from), hood.flows(to));
                total_exit += state.exit(from) + state.exit(to) - old;
                assignment[node] = to;
                current += delta;
                improvement -= delta;
                applied += 1;
                moves.push(MoveRecord {
                    node,
                    from,
                    to,
                    delta,
                });
            }
            hood.clear();
        }

        passes.push(PassLog {
            pass,
            moves: applied,
            codelength: current,
        });
        if applied == 0 || improvement < config.min_improvement {
            break;
        }
    }

    let partition = Partition::compacted(&assignment);
    let final_length = codelength(&module_flows(model, &partition), &partition);
    Ok(Detection {
        partition,
        codelength: final_length,
        initial_codelength,
        passes,
        moves,
    })
}

//! Node scoring, per-community quotas and the per-class distillation loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::community_optimizer::{optimize_partition, OptimizerConfig};
use crate::embedding_io::EmbeddingSet;
use crate::error::{Error, Result};
use crate::graph_builder::{build_class_graph, ClassGraph, GraphConfig};
use crate::map_equation::{FlowModel, FlowParams, Partition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    ModularCentrality,
    EnterFlow,
    ExitFlow,
}

impl FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modular" | "modular_centrality" => Ok(SelectionMetric::ModularCentrality),
            "enter" | "enter_flow" => Ok(SelectionMetric::EnterFlow),
            "exit" | "exit_flow" => Ok(SelectionMetric::ExitFlow),
            other => Err(Error::InvalidArgument(format!("unknown metric `{other}`"))),
        }
    }
}

/// How the (intra, inter) weighted-degree pair collapses to one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scalarization {
    #[default]
    L2,
    Sum,
}

/// Incident edge weight (in plus out) of `node` inside and outside its module.
pub fn centrality_components(graph: &ClassGraph, partition: &Partition, node: usize) -> (f64, f64) {
    let own = partition.module_of(node);
    let mut intra = 0.0;
    let mut inter = 0.0;
    let incident = graph
        .out_edges(node)
        .iter()
        .map(|e| (e.target, e.weight))
        .chain(graph.in_edges(node).iter().copied());
    for (other, w) in incident {
        if partition.module_of(other) == own {
            intra += w;
        } else {
            inter += w;
        }
    }
    (intra, inter)
}

pub fn modular_centrality(
    graph: &ClassGraph,
    partition: &Partition,
    node: usize,
    scalarization: Scalarization,
) -> f64 {
    let (intra, inter) = centrality_components(graph, partition, node);
    match scalarization {
        Scalarization::L2 => intra.hypot(inter),
        Scalarization::Sum => intra + inter,
    }
}

/// Enter or exit flow of a node under the teleporting walk, counting only
/// link steps.
pub fn flow_score(model: &FlowModel, node: usize, metric: SelectionMetric) -> Result<f64> {
    let link = 1.0 - model.teleport();
    let p = model.transition();
    let rates = model.visit_rates();
    match metric {
        SelectionMetric::EnterFlow => Ok(model.link_enter_flow(node) * link),
        SelectionMetric::ExitFlow => Ok(rates[node] * (1.0 - p.get(node, node)) * link),
        SelectionMetric::ModularCentrality => Err(Error::InvalidArgument(
            "flow_score takes EnterFlow or ExitFlow".into(),
        )),
    }
}

/// Splits `total` over `weights` in proportion, using largest remainders
/// (ties to the lower index) and never exceeding `caps`. Surplus from capped
/// entries is redistributed the same way among the rest.
pub fn largest_remainder(total: usize, weights: &[usize], caps: &[usize]) -> Vec<usize> {
    let k = weights.len();
    let mut quota = vec![0usize; k];
    let mut open: Vec<bool> = (0..k).map(|i| caps[i] > 0).collect();
    let mut remaining = total;
    while remaining > 0 {
        let active: Vec<usize> = (0..k).filter(|&i| open[i] && weights[i] > 0).collect();
        if active.is_empty() {
            // Only zero-weight entries have room left: fill them in index order.
            for i in 0..k {
                let room = caps[i] - quota[i];
                let take = room.min(remaining);
                quota[i] += take;
                remaining -= take;
            }
            break;
        }
        let w_total: usize = active.iter().map(|&i| weights[i]).sum();
        let mut given = 0;
        let mut remainders = Vec::with_capacity(active.len());
        for &i in &active {
            let share = remaining * weights[i];
            quota[i] += share / w_total;
            given += share / w_total;
            remainders.push((share % w_total, i));
        }
        remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in remainders.iter().take(remaining - given) {
            quota[i] += 1;
        }
        remaining = 0;
        for i in 0..k {
            if quota[i] >= caps[i] {
                remaining += quota[i] - caps[i];
                quota[i] = caps[i];
                open[i] = false;
            }
        }
    }
    quota
}

/// Number of items to take from each module so that the quotas sum to `n`.
///
/// When `n` is at least the number of non-empty modules, every module gets
/// one item first and the rest is split in proportion to module size.
/// Otherwise the whole of `n` is split in proportion to size.
pub fn allocate_quotas(partition: &Partition, n: usize) -> Result<Vec<usize>> {
    let sizes = partition.sizes();
    let nodes: usize = sizes.iter().sum();
    if n > nodes {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n} of {nodes} nodes"
        )));
    }
    let nonempty = sizes.iter().filter(|&&s| s > 0).count();
    if n >= nonempty {
        let base: Vec<usize> = sizes.iter().map(|&s| usize::from(s > 0)).collect();
        let caps: Vec<usize> = sizes.iter().zip(&base).map(|(s, b)| s - b).collect();
        let extra = largest_remainder(n - nonempty, &sizes, &caps);
        Ok(base.iter().zip(extra).map(|(b, e)| b + e).collect())
    } else {
        Ok(largest_remainder(n, &sizes, &sizes))
    }
}

/// Per-node scores under `metric`.
pub fn node_scores(
    graph: &ClassGraph,
    partition: &Partition,
    model: &FlowModel,
    metric: SelectionMetric,
    scalarization: Scalarization,
) -> Result<Vec<f64>> {
    (0..graph.num_nodes())
        .map(|node| match metric {
            SelectionMetric::ModularCentrality => {
                Ok(modular_centrality(graph, partition, node, scalarization))
            }
            _ => flow_score(model, node, metric),
        })
        .collect()
}

/// Picks the top-scoring nodes of each module up to its quota; returns the
/// chosen [`EmbeddingSet`] ids in ascending order.
pub fn select_by_scores(
    graph: &ClassGraph,
    partition: &Partition,
    scores: &[f64],
    n: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let quotas = allocate_quotas(partition, n)?;
    let mut chosen = Vec::with_capacity(n);
    for (module, mut members) in partition.members().into_iter().enumerate() {
        members.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        chosen.extend(
            members
                .iter()
                .take(quotas[module])
                .map(|&v| graph.node_ids()[v]),
        );
    }
    chosen.sort_unstable();
    Ok((chosen, quotas))
}

pub fn select_class(
    graph: &ClassGraph,
    partition: &Partition,
    model: &FlowModel,
    metric: SelectionMetric,
    scalarization: Scalarization,
    n: usize,
) -> Result<Vec<usize>> {
    let scores = node_scores(graph, partition, model, metric, scalarization)?;
    select_by_scores(graph, partition, &scores, n).map(|(ids, _)| ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub graph: GraphConfig,
    pub flow: FlowParams,
    pub optimizer: OptimizerConfig,
    pub metric: SelectionMetric,
    pub scalarization: Scalarization,
    pub per_class: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            graph: GraphConfig::default(),
            flow: FlowParams::default(),
            optimizer: OptimizerConfig::default(),
            metric: SelectionMetric::default(),
            scalarization: Scalarization::default(),
            per_class: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class_label: usize,
    /// Selected item ids, ascending.
    pub selected: Vec<usize>,
    pub quotas: Vec<usize>,
    pub community_sizes: Vec<usize>,
    pub codelength: f64,
    pub edges: usize,
}

/// The distilled subset: `total_per_class` ids for every class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledSelection {
    pub total_per_class: usize,
    pub classes: Vec<ClassSelection>,
}

impl DistilledSelection {
    pub fn per_class(&self) -> BTreeMap<usize, &[usize]> {
        self.classes
            .iter()
            .map(|c| (c.class_label, c.selected.as_slice()))
            .collect()
    }

    /// Every selected id, sorted by class then id.
    pub fn ids(&self) -> Vec<usize> {
        self.classes
            .iter()
            .flat_map(|c| c.selected.iter().copied())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(|c| c.selected.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `class_label<TAB>item_id` lines, sorted by class then id.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for c in &self.classes {
            for id in &c.selected {
                let _ = writeln!(out, "{}\t{}", c.class_label, id);
            }
        }
        out
    }

    pub fn summary_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_summary_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the selection list and its key-value sidecar.
    pub fn write(&self, list: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<()> {
        let (list, sidecar) = (list.as_ref(), sidecar.as_ref());
        fs::write(list, self.to_tsv()).map_err(|e| Error::io(list, e))?;
        fs::write(sidecar, self.summary_toml()?).map_err(|e| Error::io(sidecar, e))
    }
}

/// Parses a selection list into `(class_label, item_id)` pairs.
pub fn parse_selection_tsv(text: &str) -> Result<Vec<(usize, usize)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(record, line)| {
            let mut fields = line.split('\t');
            let parse = |f: Option<&str>| -> Result<usize> {
                f.and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Csv {
                        record,
                        message: format!("bad selection line `{line}`"),
                    })
            };
            Ok((parse(fields.next())?, parse(fields.next())?))
        })
        .collect()
}

fn distill_class(
    set: &EmbeddingSet,
    label: usize,
    config: &DistillConfig,
) -> Result<ClassSelection> {
    let ids = set.class_ids(label);
    if ids.len() < 2 {
        // Nothing to partition: the single item (if wanted) is the selection.
        let selected: Vec<usize> = ids.iter().copied().take(config.per_class).collect();
        return Ok(ClassSelection {
            class_label: label,
            quotas: vec![selected.len()],
            selected,
            community_sizes: vec![ids.len()],
            codelength: 0.0,
            edges: 0,
        });
    }
    let graph = build_class_graph(set, label, &config.graph)?;
    let model = FlowModel::new(&graph, &config.flow)?;
    let detection = optimize_partition(&model, &graph, &config.optimizer.for_class(label))?;
    let scores = node_scores(
        &graph,
        &detection.partition,
        &model,
        config.metric,
        config.scalarization,
    )?;
    let (selected, quotas) =
        select_by_scores(&graph, &detection.partition, &scores, config.per_class)?;
    Ok(ClassSelection {
        class_label: label,
        selected,
        quotas,
        community_sizes: detection.partition.sizes(),
        codelength: detection.codelength,
        edges: graph.num_edges(),
    })
}

/// Runs the per-class selection on every class independently.
pub fn distill(set: &EmbeddingSet, config: &DistillConfig) -> Result<DistilledSelection> {
    set.validate()?;
    if config.per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    set.require_class_sizes(config.per_class)?;
    let classes = (0..set.num_classes)
        .into_par_iter()
        .map(|label| distill_class(set, label, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(DistilledSelection {
        total_per_class: config.per_class,
        classes,
    })
}

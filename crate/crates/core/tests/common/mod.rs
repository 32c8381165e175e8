//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the flow or codelength code of the library.

#![allow(dead_code)]

use infodist::graph_builder::{ClassGraph, Edge};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn graph_from(n: usize, edges: &[(usize, usize, f64)]) -> ClassGraph {
    ClassGraph::new(
        0,
        (0..n).collect(),
        edges
            .iter()
            .map(|&(source, target, weight)| Edge {
                source,
                target,
                weight,
            })
            .collect(),
    )
    .unwrap()
}

/// Row-softmax of raw scores over each node's listed out-edges.
pub fn softmaxed_graph(n: usize, raw: &[(usize, usize, f64)]) -> ClassGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        let row: Vec<_> = raw.iter().filter(|e| e.0 == i).collect();
        let z: f64 = row.iter().map(|e| e.2.exp()).sum();
        edges.extend(row.iter().map(|e| (e.0, e.1, e.2.exp() / z)));
    }
    graph_from(n, &edges)
}

/// Two 4-cliques (weight 1) joined by a bridge 3 ↔ 4 (weight 0.05),
/// softmaxed per row.
pub fn two_cliques() -> ClassGraph {
    let mut raw = Vec::new();
    for block in [0usize, 4] {
        for i in block..block + 4 {
            for j in block..block + 4 {
                if i != j {
                    raw.push((i, j, 1.0));
                }
            }
        }
    }
    raw.push((3, 4, 0.05));
    raw.push((4, 3, 0.05));
    softmaxed_graph(8, &raw)
}

pub fn uniform_complete(n: usize) -> ClassGraph {
    let w = 1.0 / (n - 1) as f64;
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                edges.push((i, j, w));
            }
        }
    }
    graph_from(n, &edges)
}

/// Random directed graph; some nodes may end up with no out-edges.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> ClassGraph {
    let density = rng.random_range(0.2..0.9);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(density) {
                edges.push((i, j, rng.random_range(0.01..=1.0)));
            }
        }
    }
    graph_from(n, &edges)
}

pub fn random_assignment(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let m = rng.random_range(1..=n);
    let raw: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
    compact(&raw)
}

/// Relabels to 0..m in order of first appearance.
pub fn compact(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Dense transition matrix and stationary visit rates.
pub struct DenseFlow {
    pub n: usize,
    pub p: Vec<Vec<f64>>,
    pub visit: Vec<f64>,
    pub teleport: f64,
}

pub fn dense_transition(graph: &ClassGraph) -> Vec<Vec<f64>> {
    let n = graph.num_nodes();
    let mut p = vec![vec![0.0; n]; n];
    for e in graph.edges() {
        p[e.source][e.target] += e.weight;
    }
    for (i, row) in p.iter_mut().enumerate() {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        } else {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j == i { 0.0 } else { 1.0 / (n - 1) as f64 };
            }
        }
    }
    p
}

/// Lazy power iteration (half a step of the teleporting walk per round), so
/// periodic chains converge as well.
pub fn dense_flow(graph: &ClassGraph, teleport: f64) -> DenseFlow {
    let p = dense_transition(graph);
    let n = p.len();
    let mut v = vec![1.0 / n as f64; n];
    for _ in 0..200_000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += v[i] * p[i][j];
            }
        }
        let next: Vec<f64> = next
            .iter()
            .zip(&v)
            .map(|(w, old)| 0.5 * old + 0.5 * (teleport / n as f64 + (1.0 - teleport) * w))
            .collect();
        let change: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        if change < 1e-16 {
            break;
        }
    }
    DenseFlow {
        n,
        p,
        visit: v,
        teleport,
    }
}

fn xlog2(x: f64, of: f64) -> f64 {
    if x > 0.0 {
        x * (x / of).log2()
    } else {
        0.0
    }
}

/// Two-level codelength written straight from its entropy form.
pub fn oracle_codelength(flow: &DenseFlow, assignment: &[usize]) -> f64 {
    let n = flow.n;
    let m = assignment.iter().max().unwrap() + 1;
    let mut exit = vec![0.0; m];
    let mut size = vec![0usize; m];
    let mut visit = vec![0.0; m];
    for a in 0..n {
        size[assignment[a]] += 1;
        visit[assignment[a]] += flow.visit[a];
    }
    for a in 0..n {
        let i = assignment[a];
        let out: f64 = (0..n)
            .filter(|&b| assignment[b] != i)
            .map(|b| flow.p[a][b])
            .sum();
        exit[i] += (1.0 - flow.teleport) * flow.visit[a] * out
            + flow.teleport * flow.visit[a] * (n - size[i]) as f64 / n as f64;
    }
    let total_exit: f64 = exit.iter().sum();
    let mut l = 0.0;
    if total_exit > 0.0 {
        l -= exit.iter().map(|&q| xlog2(q, total_exit)).sum::<f64>();
    }
    for i in 0..m {
        let stay = exit[i] + visit[i];
        if stay <= 0.0 {
            continue;
        }
        let mut h = -xlog2(exit[i], stay);
        for a in (0..n).filter(|&a| assignment[a] == i) {
            h -= xlog2(flow.visit[a], stay);
        }
        l += h;
    }
    l
}

/// All set partitions of `0..n` as restricted growth strings.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, max: usize, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for label in 0..=max + 1 {
            prefix.push(label);
            grow(prefix, max.max(label), n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    let mut prefix = vec![0];
    grow(&mut prefix, 0, n, &mut out);
    out
}

/// Adjusted Rand index from the pair-counting contingency table.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |x: u64| (x * x.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().flatten().map(|&x| pairs(x)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb)
        .map(|j| pairs(table.iter().map(|r| r[j]).sum()))
        .sum();
    let expected = rows * cols / pairs(a.len() as u64);
    let max = 0.5 * (rows + cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Empirical frequencies from a simulated teleporting walker.
pub struct WalkStats {
    pub visits: Vec<f64>,
    /// Link steps that end at the node and start elsewhere.
    pub link_enter: Vec<f64>,
    /// Link steps that start at the node and end elsewhere.
    pub link_exit: Vec<f64>,
    /// Steps (link or teleport) that leave each module, for `assignment`.
    pub module_exit: Vec<f64>,
}

pub fn simulate_walk(
    flow: &DenseFlow,
    assignment: &[usize],
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> WalkStats {
    let n = flow.n;
    let m = assignment.iter().max().unwrap() + 1;
    let mut visits = vec![0.0; n];
    let mut enter = vec![0.0; n];
    let mut exit = vec![0.0; n];
    let mut module_exit = vec![0.0; m];
    let mut at = rng.random_range(0..n);
    for _ in 0..10_000 {
        at = step(flow, at, rng).0;
    }
    for _ in 0..steps {
        visits[at] += 1.0;
        let (next, by_link) = step(flow, at, rng);
        if by_link && next != at {
            exit[at] += 1.0;
            enter[next] += 1.0;
        }
        if assignment[next] != assignment[at] {
            module_exit[assignment[at]] += 1.0;
        }
        at = next;
    }
    let s = steps as f64;
    let scale = |v: Vec<f64>| v.into_iter().map(|x| x / s).collect();
    WalkStats {
        visits: scale(visits),
        link_enter: scale(enter),
        link_exit: scale(exit),
        module_exit: scale(module_exit),
    }
}

fn step(flow: &DenseFlow, at: usize, rng: &mut ChaCha8Rng) -> (usize, bool) {
    if rng.random::<f64>() < flow.teleport {
        return (rng.random_range(0..flow.n), false);
    }
    let mut u: f64 = rng.random();
    for (j, &w) in flow.p[at].iter().enumerate() {
        if u < w {
            return (j, true);
        }
        u -= w;
    }
    let last = flow.p[at].iter().rposition(|&w| w > 0.0).unwrap();
    (last, true)
}

/// Exact binary AUC from mid-ranks, as an integer ratio.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the 1-based mid-rank of each item.
    let mut twice_rank = vec![0u64; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        for &k in &order[start..=end] {
            twice_rank[k] = (start + 1 + end + 1) as u64;
        }
        start = end + 1;
    }
    let p = positive.iter().filter(|&&x| x).count() as u64;
    let q = positive.len() as u64 - p;
    if p == 0 || q == 0 {
        return None;
    }
    let twice_sum: u64 = (0..scores.len())
        .filter(|&k| positive[k])
        .map(|k| twice_rank[k])
        .sum();
    let twice_u = twice_sum - p * (p + 1);
    Some(twice_u as f64 / (2 * p * q) as f64)
}

//! The dynamic graph: directed edges with half-open active intervals,
//! per-step neighbor queries, importance scoring with bottom-decile pruning
//! and the train/eval neighbor selection procedures.

use crate::data::panel::FilledPanel;
use crate::error::{RadflowError, Result};
use rand::Rng;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// A directed edge src -> dst active over [start, end).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeInterval {
    pub src: usize,
    pub dst: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone)]
pub struct DynamicGraph {
    n: usize,
    t_max: usize,
    /// Per destination: (src, start, end) sorted by src then start.
    in_edges: Vec<Vec<(usize, usize, usize)>>,
    /// Per source: (start, end) intervals for out-degree queries.
    out_edges: Vec<Vec<(usize, usize)>>,
}

impl DynamicGraph {
    /// Builds the graph from an edge list. Overlapping or duplicate intervals
    /// of the same (src, dst) pair merge; merely adjacent ones stay separate
    /// so per-step edge snapshots survive a round trip.
    pub fn new(n: usize, t_max: usize, edges: &[EdgeInterval]) -> Result<Self> {
        let mut by_pair: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for e in edges {
            if e.src >= n || e.dst >= n {
                return Err(RadflowError::Data(format!(
                    "edge {} -> {} outside the {n}-node panel",
                    e.src, e.dst
                )));
            }
            if e.src == e.dst {
                return Err(RadflowError::Data(format!("self-loop on node {}", e.src)));
            }
            if e.start >= e.end || e.end > t_max {
                return Err(RadflowError::Data(format!(
                    "bad interval [{}, {}) on edge {} -> {}",
                    e.start, e.end, e.src, e.dst
                )));
            }
            by_pair.entry((e.src, e.dst)).or_default().push((e.start, e.end));
        }

        let mut in_edges = vec![Vec::new(); n];
        let mut out_edges = vec![Vec::new(); n];
        for ((src, dst), mut ivs) in by_pair {
            ivs.sort_unstable();
            let mut merged: Vec<(usize, usize)> = Vec::with_capacity(ivs.len());
            for (s, e) in ivs {
                match merged.last_mut() {
                    // Strict overlap only: [0,3) and [3,5) remain two edges.
                    Some(last) if s < last.1 => last.1 = last.1.max(e),
                    _ => merged.push((s, e)),
                }
            }
            for (s, e) in merged {
                in_edges[dst].push((src, s, e));
                out_edges[src].push((s, e));
            }
        }
        Ok(DynamicGraph {
            n,
            t_max,
            in_edges,
            out_edges,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn edges(&self) -> Vec<EdgeInterval> {
        let mut out = Vec::new();
        for (dst, list) in self.in_edges.iter().enumerate() {
            for &(src, start, end) in list {
                out.push(EdgeInterval {
                    src,
                    dst,
                    start,
                    end,
                });
            }
        }
        out.sort_unstable_by_key(|e| (e.src, e.dst, e.start));
        out
    }

    /// In-neighbors of `node` active at step `t`, ascending by id.
    pub fn neighbors_at(&self, node: usize, t: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.in_edges[node]
            .iter()
            .filter(|&&(_, s, e)| s <= t && t < e)
            .map(|&(src, _, _)| src)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn out_degree(&self, node: usize, t: usize) -> usize {
        self.out_edges[node]
            .iter()
            .filter(|&&(s, e)| s <= t && t < e)
            .count()
    }

    /// Fraction of [0, t_max) steps on which an edge src -> dst is active.
    pub fn presence_fraction(&self, src: usize, dst: usize) -> f64 {
        if self.t_max == 0 {
            return 0.0;
        }
        let active: usize = self.in_edges[dst]
            .iter()
            .filter(|&&(s, _, _)| s == src)
            .map(|&(_, s, e)| e - s)
            .sum();
        active as f64 / self.t_max as f64
    }

    pub fn save_edges(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
            for e in self.edges() {
                writeln!(w, "{} {} {} {}", e.src, e.dst, e.start, e.end)?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_edges(path: &Path, n: usize, t_max: usize) -> Result<Self> {
        let fmt = |line_no: usize, reason: &str| RadflowError::Format {
            path: path.display().to_string(),
            reason: format!("line {line_no}: {reason}"),
        };
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut edges = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<usize> = line
                .split_whitespace()
                .map(|f| f.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| fmt(i + 1, "expected four integers"))?;
            if fields.len() != 4 {
                return Err(fmt(i + 1, "expected four fields: src dst start end"));
            }
            edges.push(EdgeInterval {
                src: fields[0],
                dst: fields[1],
                start: fields[2],
                end: fields[3],
            });
        }
        DynamicGraph::new(n, t_max, &edges)
    }
}

/// Importance of a neighbor at step t: its total raw value divided by its
/// out-degree plus one. Raw scale, not log.
pub fn importance_score(
    graph: &DynamicGraph,
    panel: &FilledPanel,
    neighbor: usize,
    t: usize,
) -> f64 {
    panel.total_at(neighbor, t) / (graph.out_degree(neighbor, t) as f64 + 1.0)
}

/// Drops the bottom tenth of scores: with k = ceil(n / 10), every score
/// strictly below the (k+1)-th smallest is removed. Ten distinct scores lose
/// exactly the lowest one; all-equal scores lose none.
pub fn prune_bottom_decile(scored: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let n = scored.len();
    if n == 0 {
        return Vec::new();
    }
    let k = n.div_ceil(10);
    if k >= n {
        return scored.to_vec();
    }
    let mut sorted: Vec<f64> = scored.iter().map(|&(_, s)| s).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let threshold = sorted[k];
    scored
        .iter()
        .filter(|&&(_, s)| s >= threshold)
        .copied()
        .collect()
}

/// In-neighbors of `node` at step t after importance pruning, ascending id.
pub fn pruned_neighbors_at(
    graph: &DynamicGraph,
    panel: &FilledPanel,
    node: usize,
    t: usize,
) -> Vec<usize> {
    let scored: Vec<(usize, f64)> = graph
        .neighbors_at(node, t)
        .into_iter()
        .map(|i| (i, importance_score(graph, panel, i, t)))
        .collect();
    let mut kept: Vec<usize> = prune_bottom_decile(&scored).into_iter().map(|(i, _)| i).collect();
    kept.sort_unstable();
    kept
}

/// Candidate neighbors for a window: the union over steps of the pruned
/// per-step sets, weighted by how many steps each appears in. Ascending id.
pub fn window_candidates(
    graph: &DynamicGraph,
    panel: &FilledPanel,
    node: usize,
    t0: usize,
    t1: usize,
) -> Vec<(usize, usize)> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for t in t0..t1 {
        for i in pruned_neighbors_at(graph, panel, node, t) {
            *counts.entry(i).or_insert(0) += 1;
        }
    }
    counts.into_iter().collect()
}

/// Weighted sampling without replacement of up to k candidates, weights
/// proportional to presence counts. Returns ascending ids.
pub fn sample_train_neighbors<R: Rng>(
    candidates: &[(usize, usize)],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut pool: Vec<(usize, f64)> = candidates
        .iter()
        .filter(|&&(_, c)| c > 0)
        .map(|&(id, c)| (id, c as f64))
        .collect();
    let mut chosen = Vec::with_capacity(k.min(pool.len()));
    while chosen.len() < k && !pool.is_empty() {
        let total: f64 = pool.iter().map(|&(_, w)| w).sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut idx = pool.len() - 1;
        for (i, &(_, w)) in pool.iter().enumerate() {
            if pick < w {
                idx = i;
                break;
            }
            pick -= w;
        }
        chosen.push(pool.swap_remove(idx).0);
    }
    chosen.sort_unstable();
    chosen
}

/// Evaluation neighbor selection: the top candidates by presence count, ties
/// broken by ascending id. Sixteen at one hop, eight at two.
pub fn top_neighbors_eval(candidates: &[(usize, usize)], hops: usize) -> Vec<usize> {
    let cap = if hops >= 2 { 8 } else { 16 };
    let mut ranked: Vec<(usize, usize)> = candidates.to_vec();
    ranked.sort_by_key(|&(id, count)| (std::cmp::Reverse(count), id));
    let mut out: Vec<usize> = ranked.into_iter().take(cap).map(|(id, _)| id).collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::panel::SeriesPanel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn edge(src: usize, dst: usize, start: usize, end: usize) -> EdgeInterval {
        EdgeInterval { src, dst, start, end }
    }

    fn flat_panel(n: usize, t: usize, values: &[f64]) -> FilledPanel {
        let mut panel = SeriesPanel::new(n, t, 1);
        for node in 0..n {
            for step in 0..t {
                panel.set_value(node, step, 0, values[node]);
            }
        }
        FilledPanel::from_panel(&panel)
    }

    #[test]
    fn intervals_are_half_open() {
        let g = DynamicGraph::new(3, 10, &[edge(1, 0, 2, 5)]).unwrap();
        assert_eq!(g.neighbors_at(0, 1), Vec::<usize>::new());
        assert_eq!(g.neighbors_at(0, 2), vec![1]);
        assert_eq!(g.neighbors_at(0, 4), vec![1]);
        assert_eq!(g.neighbors_at(0, 5), Vec::<usize>::new());
        assert_eq!(g.out_degree(1, 4), 1);
        assert_eq!(g.out_degree(1, 5), 0);
    }

    #[test]
    fn overlapping_intervals_merge_adjacent_do_not() {
        let g = DynamicGraph::new(2, 10, &[edge(0, 1, 0, 4), edge(0, 1, 2, 6)]).unwrap();
        assert_eq!(g.edges(), vec![edge(0, 1, 0, 6)]);

        let g = DynamicGraph::new(2, 10, &[edge(0, 1, 0, 3), edge(0, 1, 3, 5)]).unwrap();
        assert_eq!(g.edges(), vec![edge(0, 1, 0, 3), edge(0, 1, 3, 5)]);
        assert_eq!(g.neighbors_at(1, 2), vec![0]);
        assert_eq!(g.neighbors_at(1, 3), vec![0]);
        assert_eq!(g.presence_fraction(0, 1), 0.5);
    }

    #[test]
    fn invalid_edges_are_rejected() {
        assert!(DynamicGraph::new(2, 10, &[edge(0, 0, 0, 1)]).is_err());
        assert!(DynamicGraph::new(2, 10, &[edge(0, 2, 0, 1)]).is_err());
        assert!(DynamicGraph::new(2, 10, &[edge(0, 1, 5, 5)]).is_err());
        assert!(DynamicGraph::new(2, 10, &[edge(0, 1, 0, 11)]).is_err());
    }

    #[test]
    fn edge_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges.txt");
        let g = DynamicGraph::new(4, 20, &[edge(0, 1, 0, 3), edge(0, 1, 3, 5), edge(2, 3, 1, 20)])
            .unwrap();
        g.save_edges(&path).unwrap();
        let loaded = DynamicGraph::load_edges(&path, 4, 20).unwrap();
        assert_eq!(g.edges(), loaded.edges());

        std::fs::write(&path, "# comment\n0 1 0 3\n\nbad line\n").unwrap();
        assert!(matches!(
            DynamicGraph::load_edges(&path, 4, 20),
            Err(RadflowError::Format { .. })
        ));
    }

    #[test]
    fn importance_divides_by_out_degree_plus_one() {
        // Node 1 totals 10.0 and has out-degree 4 at t=0: score 10/(4+1) = 2.
        let edges: Vec<EdgeInterval> = (2..6).map(|d| edge(1, d, 0, 5)).collect();
        let g = DynamicGraph::new(6, 5, &edges).unwrap();
        let panel = flat_panel(6, 5, &[0.0, 10.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(importance_score(&g, &panel, 1, 0), 2.0);
    }

    #[test]
    fn prune_examples() {
        // Ten distinct scores: exactly the lowest goes.
        let scored: Vec<(usize, f64)> = (0..10).map(|i| (i, i as f64)).collect();
        let kept = prune_bottom_decile(&scored);
        assert_eq!(kept.len(), 9);
        assert!(kept.iter().all(|&(id, _)| id != 0));

        // All-equal scores: nothing is strictly below the threshold.
        let scored: Vec<(usize, f64)> = (0..10).map(|i| (i, 3.0)).collect();
        assert_eq!(prune_bottom_decile(&scored).len(), 10);

        // Fewer than ten: k = 1 but the threshold keeps ties.
        let scored = vec![(0, 1.0), (1, 2.0), (2, 3.0)];
        let kept = prune_bottom_decile(&scored);
        assert_eq!(kept, vec![(1, 2.0), (2, 3.0)]);

        assert!(prune_bottom_decile(&[]).is_empty());
        assert_eq!(prune_bottom_decile(&[(7, 5.0)]), vec![(7, 5.0)]);
    }

    #[test]
    fn window_candidates_count_pruned_presence() {
        // Node 0 has three in-neighbors; neighbor 3 scores lowest and is
        // pruned at every step it appears.
        let g = DynamicGraph::new(
            4,
            6,
            &[edge(1, 0, 0, 6), edge(2, 0, 0, 4), edge(3, 0, 0, 6)],
        )
        .unwrap();
        let panel = flat_panel(4, 6, &[0.0, 10.0, 8.0, 1.0]);
        // Per-step sets have three entries, k = 1, threshold = second
        // smallest; only the strict minimum (node 3) is dropped while node 2
        // is present.
        assert_eq!(pruned_neighbors_at(&g, &panel, 0, 0), vec![1, 2]);
        // After node 2's edge ends only {1, 3} remain; with two entries the
        // threshold keeps both unless one is strictly lower.
        assert_eq!(pruned_neighbors_at(&g, &panel, 0, 4), vec![1]);
        let cands = window_candidates(&g, &panel, 0, 0, 6);
        assert_eq!(cands, vec![(1, 6), (2, 4)]);
    }

    #[test]
    fn sampling_is_reproducible_and_skips_zero_counts() {
        let cands = vec![(0, 5), (1, 0), (2, 3), (3, 8), (4, 1)];
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let s1 = sample_train_neighbors(&cands, 3, &mut a);
        let s2 = sample_train_neighbors(&cands, 3, &mut b);
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 3);
        assert!(s1.windows(2).all(|w| w[0] < w[1]));
        for _ in 0..200 {
            assert!(!sample_train_neighbors(&cands, 4, &mut a).contains(&1));
        }
        // Requesting more than available returns every positive-count id.
        assert_eq!(sample_train_neighbors(&cands, 10, &mut a), vec![0, 2, 3, 4]);
    }

    #[test]
    fn sampling_frequency_tracks_weights() {
        // Two candidates weighted 3:1, draw one: a chi-squared test on 1e5
        // draws against the 0.75/0.25 split, df = 1, critical value 6.635
        // (alpha = 0.01).
        let cands = vec![(0, 3), (1, 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut hits = 0usize;
        for _ in 0..n {
            if sample_train_neighbors(&cands, 1, &mut rng) == vec![0] {
                hits += 1;
            }
        }
        let e0 = 0.75 * n as f64;
        let e1 = 0.25 * n as f64;
        let o0 = hits as f64;
        let o1 = (n - hits) as f64;
        let chi2 = (o0 - e0).powi(2) / e0 + (o1 - e1).powi(2) / e1;
        assert!(chi2 < 6.635, "chi-squared {chi2} too large");
    }

    #[test]
    fn eval_selection_caps_and_breaks_ties_by_id() {
        // Twenty candidates all present equally: the sixteen lowest ids win.
        let cands: Vec<(usize, usize)> = (0..20).map(|i| (i, 7)).collect();
        let top = top_neighbors_eval(&cands, 1);
        assert_eq!(top, (0..16).collect::<Vec<_>>());
        let top2 = top_neighbors_eval(&cands, 2);
        assert_eq!(top2, (0..8).collect::<Vec<_>>());

        // Higher counts beat lower ids.
        let cands = vec![(0, 1), (1, 9), (2, 5)];
        assert_eq!(top_neighbors_eval(&cands, 1), vec![0, 1, 2]);
        let mut many: Vec<(usize, usize)> = (0..17).map(|i| (i, 1)).collect();
        many[16].1 = 9;
        let top = top_neighbors_eval(&many, 1);
        assert!(top.contains(&16));
        assert!(!top.contains(&15));
    }

    #[test]
    fn neighbors_match_brute_force_adjacency() {
        // Random dynamic graph cross-checked against a per-step dense
        // adjacency matrix.
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, t) = (8, 12);
        let mut edges = Vec::new();
        let mut dense = vec![vec![vec![false; n]; n]; t];
        for _ in 0..40 {
            let src = rng.gen_range(0..n);
            let dst = rng.gen_range(0..n);
            if src == dst {
                continue;
            }
            let start = rng.gen_range(0..t);
            let end = rng.gen_range(start + 1..=t);
            edges.push(edge(src, dst, start, end));
            for step in start..end {
                dense[step][src][dst] = true;
            }
        }
        let g = DynamicGraph::new(n, t, &edges).unwrap();
        for step in 0..t {
            for node in 0..n {
                let expect: Vec<usize> =
                    (0..n).filter(|&s| dense[step][s][node]).collect();
                assert_eq!(g.neighbors_at(node, step), expect);
                let out_deg = (0..n).filter(|&d| dense[step][node][d]).count();
                assert_eq!(g.out_degree(node, step), out_deg);
            }
        }
    }
}

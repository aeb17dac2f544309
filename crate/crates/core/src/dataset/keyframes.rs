use std::collections::BTreeMap;

use super::PairLabels;

/// Undirected adjacency over `frame_ids` (sorted), with an edge wherever
/// either frame lists the other as a positive. Unknown ids are ignored.
pub fn positive_graph(frame_ids: &[String], labels: &PairLabels) -> (Vec<String>, Vec<Vec<usize>>) {
    let mut ids = frame_ids.to_vec();
    ids.sort();
    ids.dedup();
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut adj = vec![Vec::new(); ids.len()];
    for (i, id) in ids.iter().enumerate() {
        if let Some(l) = labels.get(id) {
            for p in &l.positives {
                if let Some(&j) = index.get(p.as_str()) {
                    if j != i {
                        adj[i].push(j);
                        adj[j].push(i);
                    }
                }
            }
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    (ids, adj)
}

/// Greedy dominating set: repeatedly take the vertex whose closed
/// neighbourhood covers the most uncovered vertices, lowest index on ties.
pub fn greedy_dominating_set(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut covered = vec![false; n];
    let mut remaining = n;
    let mut chosen = Vec::new();
    while remaining > 0 {
        let gain = |v: usize| (!covered[v]) as usize + adj[v].iter().filter(|&&u| !covered[u]).count();
        let best = (0..n)
            .max_by(|&a, &b| gain(a).cmp(&gain(b)).then(b.cmp(&a)))
            .expect("nonempty graph while vertices remain");
        chosen.push(best);
        for &u in std::iter::once(&best).chain(&adj[best]) {
            if !covered[u] {
                covered[u] = true;
                remaining -= 1;
            }
        }
    }
    chosen.sort_unstable();
    chosen
}

pub fn is_dominating(adj: &[Vec<usize>], set: &[usize]) -> bool {
    let mut covered = vec![false; adj.len()];
    for &v in set {
        covered[v] = true;
        for &u in &adj[v] {
            covered[u] = true;
        }
    }
    covered.into_iter().all(|c| c)
}

/// Keyframes of one scene: a dominating set of the positive graph, as frame ids in sorted order.
pub fn extract_keyframes(frame_ids: &[String], labels: &PairLabels) -> Vec<String> {
    let (ids, adj) = positive_graph(frame_ids, labels);
    greedy_dominating_set(&adj).into_iter().map(|i| ids[i].clone()).collect()
}

//! Frame correspondence graph and long-range propagation over its connected
//! components.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use thiserror::Error;

use crate::pose::PoseEstimator;
use crate::projection::FrameId;
use crate::search::{
    evaluate_all, frame_pair_candidates, CorrespondenceRecord, FrameStore, PairOutcome, Provenance, SearchConfig,
    SearchError, ViewConfig,
};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("records span several videos: {0} and {1}")]
    CrossVideo(String, String),
    #[error("record {index} pairs frame {frame} with itself")]
    SelfLoop { index: usize, frame: FrameId },
    #[error(transparent)]
    Search(#[from] SearchError),
}

/// Unordered frame pair, smaller id first.
pub type FramePair = (FrameId, FrameId);

pub fn frame_pair(a: &FrameId, b: &FrameId) -> FramePair {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

/// Undirected graph whose nodes are frames and whose edges join frames with
/// at least one accepted view pair. Edge weights are the best mean confidence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameGraph {
    nodes: BTreeSet<FrameId>,
    edges: BTreeMap<FramePair, f64>,
}

impl FrameGraph {
    pub fn nodes(&self) -> &BTreeSet<FrameId> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeMap<FramePair, f64> {
        &self.edges
    }

    pub fn neighbors(&self) -> BTreeMap<&FrameId, Vec<&FrameId>> {
        let mut adj: BTreeMap<&FrameId, Vec<&FrameId>> = self.nodes.iter().map(|n| (n, Vec::new())).collect();
        for (a, b) in self.edges.keys() {
            adj.get_mut(a).expect("edge endpoints are nodes").push(b);
            adj.get_mut(b).expect("edge endpoints are nodes").push(a);
        }
        adj
    }
}

pub fn build_graph(records: &[CorrespondenceRecord]) -> Result<FrameGraph, GraphError> {
    let mut g = FrameGraph::default();
    let mut video: Option<&str> = None;
    for (index, r) in records.iter().enumerate() {
        let (a, b) = (&r.pair.a.frame, &r.pair.b.frame);
        for v in [&a.video_id, &b.video_id] {
            match video {
                None => video = Some(v),
                Some(first) if first != v => return Err(GraphError::CrossVideo(first.into(), v.clone())),
                _ => {}
            }
        }
        if a == b {
            return Err(GraphError::SelfLoop {
                index,
                frame: a.clone(),
            });
        }
        g.nodes.insert(a.clone());
        g.nodes.insert(b.clone());
        let best = g.edges.entry(frame_pair(a, b)).or_insert(r.mean_conf);
        *best = best.max(r.mean_conf);
    }
    Ok(g)
}

/// Maximal connected node sets, each sorted, ordered by their smallest frame.
pub fn connected_components(g: &FrameGraph) -> Vec<Vec<FrameId>> {
    let adj = g.neighbors();
    let mut seen: HashSet<&FrameId> = HashSet::new();
    let mut out = Vec::new();
    // nodes iterate in order, so each component is discovered at its smallest frame
    for start in &g.nodes {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = vec![start.clone()];
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            for &m in &adj[n] {
                if seen.insert(m) {
                    comp.push(m.clone());
                    queue.push_back(m);
                }
            }
        }
        comp.sort();
        out.push(comp);
    }
    out
}

/// Hop distances from `start` within the graph.
fn bfs_distances<'a>(adj: &BTreeMap<&'a FrameId, Vec<&'a FrameId>>, start: &'a FrameId) -> BTreeMap<&'a FrameId, usize> {
    let mut dist = BTreeMap::from([(start, 0)]);
    let mut queue = VecDeque::from([start]);
    while let Some(n) = queue.pop_front() {
        let d = dist[n];
        for &m in &adj[n] {
            if !dist.contains_key(m) {
                dist.insert(m, d + 1);
                queue.push_back(m);
            }
        }
    }
    dist
}

/// Graph-distance band used for components larger than `k_max`.
pub const PROPAGATION_BAND: (usize, usize) = (2, 4);

/// Frame pairs of `component` that propagation should evaluate: all
/// unordered pairs not in `evaluated`, or, when the component has more than
/// `k_max` frames, only those at graph distance 2 to 4.
pub fn propagation_pairs(
    g: &FrameGraph,
    component: &[FrameId],
    evaluated: &HashSet<FramePair>,
    k_max: usize,
) -> Vec<FramePair> {
    let mut frames: Vec<&FrameId> = component.iter().collect();
    frames.sort();
    let banded = frames.len() > k_max;
    let adj = if banded { g.neighbors() } else { BTreeMap::new() };
    let mut out = Vec::new();
    for (i, a) in frames.iter().enumerate() {
        let dist = banded.then(|| bfs_distances(&adj, a));
        for b in &frames[i + 1..] {
            let key = ((*a).clone(), (*b).clone());
            if evaluated.contains(&key) {
                continue;
            }
            if let Some(dist) = &dist {
                match dist.get(b) {
                    Some(d) if (PROPAGATION_BAND.0..=PROPAGATION_BAND.1).contains(d) => {}
                    _ => continue,
                }
            }
            out.push(key);
        }
    }
    out
}

/// Result of propagating over one component.
#[derive(Debug)]
pub struct Propagation {
    /// Frame pairs evaluated by this pass.
    pub frame_pairs: Vec<FramePair>,
    pub outcomes: Vec<PairOutcome>,
}

impl Propagation {
    pub fn records(&self) -> impl Iterator<Item = &CorrespondenceRecord> {
        self.outcomes
            .iter()
            .filter_map(|o| o.result.as_ref().ok().and_then(|e| e.record.as_ref()))
    }
}

/// Evaluates every not-yet-evaluated frame pair of `component` with the full
/// search procedure (all 16 cardinal view pairs, threshold, refinement).
/// Accepted records carry `Provenance::Propagated`. Runs on the current
/// rayon pool.
#[allow(clippy::too_many_arguments)]
pub fn propagate<E: PoseEstimator + ?Sized>(
    g: &FrameGraph,
    component: &[FrameId],
    evaluated: &HashSet<FramePair>,
    frames: &FrameStore,
    estimator: &E,
    cfg: &SearchConfig,
    view: &ViewConfig,
    k_max: usize,
) -> Result<Propagation, GraphError> {
    let frame_pairs = propagation_pairs(g, component, evaluated, k_max);
    let mut candidates = Vec::with_capacity(frame_pairs.len() * 16);
    for (a, b) in &frame_pairs {
        candidates.extend(frame_pair_candidates(a, b, view.fov)?);
    }
    let outcomes = evaluate_all(candidates, frames, estimator, cfg, view, Provenance::Propagated);
    Ok(Propagation { frame_pairs, outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{RelativePose, ScaleState};
    use crate::projection::ViewAngles;
    use crate::search::{CandidatePair, ViewRef};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f(t: u64) -> FrameId {
        FrameId::new("v", t)
    }

    fn rec(a: u64, b: u64, conf: f64) -> CorrespondenceRecord {
        let angles = ViewAngles::new(0.0, 0.0, 1.0).unwrap();
        CorrespondenceRecord {
            pair: CandidatePair {
                a: ViewRef { frame: f(a), angles },
                b: ViewRef { frame: f(b), angles },
            },
            pose: RelativePose::identity(ScaleState::Raw),
            mean_conf: conf,
            sigma: 1.0,
            provenance: Provenance::Window,
        }
    }

    #[test]
    fn chain_graph() {
        let g = build_graph(&[rec(0, 1, 5.0), rec(1, 2, 6.0)]).unwrap();
        assert_eq!(g.nodes().len(), 3);
        assert_eq!(g.edges().len(), 2);
        assert!(build_graph(&[]).unwrap().nodes().is_empty());
        assert!(connected_components(&FrameGraph::default()).is_empty());
    }

    #[test]
    fn parallel_records_collapse_to_one_edge() {
        let recs: Vec<_> = (0..16).map(|k| rec(0, 1, 4.0 + k as f64)).collect();
        let g = build_graph(&recs).unwrap();
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.edges()[&(f(0), f(1))], 19.0);
    }

    #[test]
    fn cross_video_and_self_loops_rejected() {
        let mut r = rec(0, 1, 5.0);
        r.pair.b.frame.video_id = "w".into();
        assert!(matches!(build_graph(&[r]), Err(GraphError::CrossVideo(..))));
        assert!(matches!(build_graph(&[rec(3, 3, 5.0)]), Err(GraphError::SelfLoop { .. })));
    }

    #[test]
    fn components_with_isolated_node() {
        let mut g = build_graph(&[rec(0, 1, 5.0), rec(1, 2, 5.0)]).unwrap();
        g.nodes.insert(f(3));
        assert_eq!(connected_components(&g), vec![vec![f(0), f(1), f(2)], vec![f(3)]]);
    }

    fn union_find_components(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            let mut x = x;
            while p[x] != r {
                let next = p[x];
                p[x] = r;
                x = next;
            }
            r
        }
        let mut parent: Vec<usize> = (0..n).collect();
        for &(a, b) in edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for x in 0..n {
            let r = find(&mut parent, x);
            groups.entry(r).or_default().push(x);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        out.sort();
        out
    }

    #[test]
    fn components_match_union_find() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let n = 200;
            let edges: Vec<(usize, usize)> = (0..180)
                .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
                .filter(|(a, b)| a != b)
                .collect();
            let recs: Vec<_> = edges.iter().map(|&(a, b)| rec(a as u64, b as u64, 5.0)).collect();
            let mut g = build_graph(&recs).unwrap();
            for k in 0..n {
                g.nodes.insert(f(k as u64));
            }
            let got: Vec<Vec<usize>> = connected_components(&g)
                .into_iter()
                .map(|c| c.into_iter().map(|id| id.timestamp_ms as usize).collect())
                .collect();
            assert_eq!(got, union_find_components(n, &edges));
        }
    }

    #[test]
    fn propagation_pairs_skip_evaluated() {
        let g = build_graph(&[rec(0, 1, 5.0), rec(1, 2, 5.0), rec(2, 3, 5.0), rec(3, 4, 5.0)]).unwrap();
        let comp = &connected_components(&g)[0];
        let evaluated: HashSet<FramePair> = g.edges().keys().cloned().collect();
        let k = comp.len();
        assert_eq!(propagation_pairs(&g, comp, &evaluated, 50).len(), k * (k - 1) / 2 - (k - 1));
        let all: HashSet<FramePair> = propagation_pairs(&g, comp, &HashSet::new(), 50).into_iter().collect();
        assert_eq!(propagation_pairs(&g, comp, &all, 50).len(), 0);
    }

    #[test]
    fn large_components_use_distance_band() {
        let recs: Vec<_> = (0..10).map(|k| rec(k, k + 1, 5.0)).collect();
        let g = build_graph(&recs).unwrap();
        let comp = &connected_components(&g)[0];
        let pairs = propagation_pairs(&g, comp, &HashSet::new(), 5);
        // a path of 11 nodes has 11 - d pairs at distance d
        assert_eq!(pairs.len(), 9 + 8 + 7);
        assert!(pairs
            .iter()
            .all(|(a, b)| (2..=4).contains(&(b.timestamp_ms - a.timestamp_ms))));
    }
}

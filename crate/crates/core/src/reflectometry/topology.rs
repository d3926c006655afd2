//! Additive-tree reconstruction of the network from a probe dataset.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::correlate::estimate_terminal_distance;
use super::dwt::denoise_dwt;
use super::junction::{classify_junction, joint_feature, JunctionModels};
use super::pulses::{estimate_joint_distances, JointSearch};
use super::ReflectometryError;
use crate::network::{
    build_network, JunctionDesc, JunctionKind, MediumSpec, NetworkDesc, NetworkError, PipeNetwork, SegmentDesc, TerminalDesc,
};
use crate::protocol::ProbeDataset;
use crate::trace::Trace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyOptions {
    pub denoise: bool,
    pub dwt_levels: usize,
    pub wavelet: String,
    pub threshold_mads: f64,
    /// Minimum spacing of detected pulses, s (the probe pulse width).
    pub min_separation: f64,
    /// Junctions closer than this are merged, m (default 5 c/Fs).
    pub merge_tolerance: Option<f64>,
    /// Distance matching tolerance, m (default 2 c/Fs).
    pub match_tolerance: Option<f64>,
    /// Largest tolerated misfit of the tree to the measured distances, m
    /// (default 10 c/Fs).
    pub consistency_tolerance: Option<f64>,
    pub joint_search: JointSearch,
}

impl Default for TopologyOptions {
    fn default() -> Self {
        Self {
            denoise: true,
            dwt_levels: 5,
            wavelet: "sym6".into(),
            threshold_mads: 8.0,
            min_separation: 1e-3,
            merge_tolerance: None,
            match_tolerance: None,
            consistency_tolerance: None,
            joint_search: JointSearch::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEdge {
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JunctionEstimate {
    /// Tree node index.
    pub node: usize,
    pub degree: usize,
    /// Along-tree distance from every terminal's mic, m.
    pub distances: Vec<f64>,
    /// Terminals whose joint echoes confirm this junction.
    pub confirmed_by: Vec<usize>,
    pub class: Option<JunctionKind>,
    pub class_residual: Option<f64>,
    pub energy_ratio: Option<f64>,
    /// Terminal whose echo was used for classification.
    pub classified_from: Option<usize>,
}

/// Reconstructed network. Tree nodes `0..K` are the terminals, the rest are
/// junctions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyEstimate {
    pub terminal_names: Vec<String>,
    /// Symmetrized mic-to-mic distances, m.
    pub distances: Vec<Vec<f64>>,
    /// Raw mic-of-i to speaker-of-j estimates, m.
    pub raw_distances: Vec<Vec<f64>>,
    /// Joint candidates seen by each terminal, m.
    pub joint_distances: Vec<Vec<f64>>,
    pub mic_speaker_distances: Vec<f64>,
    pub node_count: usize,
    pub edges: Vec<TreeEdge>,
    pub junctions: Vec<JunctionEstimate>,
    /// Worst |tree distance - measured distance| over all pairs, m.
    pub max_residual: f64,
}

#[derive(Debug, Clone)]
struct Tree {
    adj: Vec<Vec<(usize, f64)>>,
    terminals: usize,
}

impl Tree {
    fn add_node(&mut self) -> usize {
        self.adj.push(Vec::new());
        self.adj.len() - 1
    }

    fn connect(&mut self, a: usize, b: usize, len: f64) {
        self.adj[a].push((b, len));
        self.adj[b].push((a, len));
    }

    fn disconnect(&mut self, a: usize, b: usize) {
        self.adj[a].retain(|e| e.0 != b);
        self.adj[b].retain(|e| e.0 != a);
    }

    fn is_junction(&self, n: usize) -> bool {
        n >= self.terminals
    }

    /// Node sequence from `a` to `b`.
    fn path(&self, a: usize, b: usize) -> Vec<usize> {
        let mut prev = vec![usize::MAX; self.adj.len()];
        prev[a] = a;
        let mut q = VecDeque::from([a]);
        while let Some(u) = q.pop_front() {
            if u == b {
                break;
            }
            for &(v, _) in &self.adj[u] {
                if prev[v] == usize::MAX {
                    prev[v] = u;
                    q.push_back(v);
                }
            }
        }
        let mut p = vec![b];
        while *p.last().unwrap() != a {
            p.push(prev[*p.last().unwrap()]);
        }
        p.reverse();
        p
    }

    fn edge_len(&self, a: usize, b: usize) -> f64 {
        self.adj[a].iter().find(|e| e.0 == b).map(|e| e.1).expect("adjacent")
    }

    fn distance(&self, a: usize, b: usize) -> f64 {
        self.path(a, b).windows(2).map(|w| self.edge_len(w[0], w[1])).sum()
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, list) in self.adj.iter().enumerate() {
            for &(b, _) in list {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    fn set_len(&mut self, a: usize, b: usize, len: f64) {
        for e in self.adj[a].iter_mut().filter(|e| e.0 == b) {
            e.1 = len;
        }
        for e in self.adj[b].iter_mut().filter(|e| e.0 == a) {
            e.1 = len;
        }
    }
}

fn inconsistent(msg: String) -> ReflectometryError {
    ReflectometryError::InconsistentDistances(msg)
}

/// Builds an additive tree over leaves `0..K` by inserting one leaf at a time
/// at its Gromov-product position along the path from leaf 0.
fn build_tree(d: &[Vec<f64>], merge_tol: f64, consistency_tol: f64) -> Result<Tree, ReflectometryError> {
    let k = d.len();
    let mut tree = Tree {
        adj: vec![Vec::new(); k],
        terminals: k,
    };
    tree.connect(0, 1, d[0][1].max(0.0));
    for leaf in 2..k {
        let (best, g) = (1..leaf)
            .map(|j| (j, (d[0][leaf] + d[0][j] - d[j][leaf]) / 2.0))
            .fold((1, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
        if g < -consistency_tol || g > d[0][best] + consistency_tol {
            return Err(inconsistent(format!("terminal {leaf} attaches outside the 0-{best} path")));
        }
        let g = g.clamp(0.0, d[0][best]);
        let path = tree.path(0, best);
        let mut cum = 0.0;
        let mut attach = None;
        for w in path.windows(2) {
            let (u, v) = (w[0], w[1]);
            let len = tree.edge_len(u, v);
            if tree.is_junction(u) && (g - cum).abs() <= merge_tol {
                attach = Some((u, cum));
                break;
            }
            if g <= cum + len || v == best {
                if tree.is_junction(v) && (cum + len - g).abs() <= merge_tol {
                    attach = Some((v, cum + len));
                } else {
                    let at = (g - cum).clamp(0.0, len);
                    let n = tree.add_node();
                    tree.disconnect(u, v);
                    tree.connect(u, n, at);
                    tree.connect(n, v, len - at);
                    attach = Some((n, cum + at));
                }
                break;
            }
            cum += len;
        }
        let (node, pos) = attach.expect("path is non-empty");
        let pendant = d[0][leaf] - pos;
        if pendant < -consistency_tol {
            return Err(inconsistent(format!("terminal {leaf} has negative pendant length {pendant:.4} m")));
        }
        tree.connect(node, leaf, pendant.max(0.0));
    }
    Ok(tree)
}

/// Least-squares edge lengths for the fixed tree shape.
fn refine_lengths(tree: &mut Tree, d: &[Vec<f64>]) {
    let edges = tree.edges();
    let m = edges.len();
    let index: BTreeMap<(usize, usize), usize> = edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let mut ata = vec![vec![0.0; m]; m];
    let mut atb = vec![0.0; m];
    let k = tree.terminals;
    for i in 0..k {
        for j in i + 1..k {
            let p = tree.path(i, j);
            let cols: Vec<usize> = p.windows(2).map(|w| index[&(w[0].min(w[1]), w[0].max(w[1]))]).collect();
            for &a in &cols {
                atb[a] += d[i][j];
                for &b in &cols {
                    ata[a][b] += 1.0;
                }
            }
        }
    }
    if let Some(x) = solve(ata, atb) {
        for (&(a, b), len) in edges.iter().zip(x) {
            tree.set_len(a, b, len.max(0.0));
        }
    }
}

/// Gaussian elimination with partial pivoting; None if singular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

pub fn reconstruct_topology(
    dataset: &ProbeDataset,
    models: Option<&JunctionModels>,
    opts: &TopologyOptions,
) -> Result<TopologyEstimate, ReflectometryError> {
    let k = dataset.cluster_size;
    if k < 2 || dataset.reflections.len() != k || dataset.transmissions.len() != k * k - k {
        return Err(ReflectometryError::IncompleteDataset(format!(
            "{} reflections and {} transmissions for {k} nodes",
            dataset.reflections.len(),
            dataset.transmissions.len()
        )));
    }
    let c = dataset.speed_of_sound;
    let fs = dataset.fs();
    let step = c / fs;
    let merge_tol = opts.merge_tolerance.unwrap_or(5.0 * step);
    let match_tol = opts.match_tolerance.unwrap_or(2.0 * step);
    let consistency_tol = opts.consistency_tolerance.unwrap_or(10.0 * step);

    let clean = |t: &Trace| -> Result<Trace, ReflectometryError> {
        if opts.denoise {
            denoise_dwt(t, opts.dwt_levels, &opts.wavelet)
        } else {
            Ok(t.clone())
        }
    };
    let reflections = dataset.reflections.iter().map(clean).collect::<Result<Vec<_>, _>>()?;
    let mut raw = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            if i != j {
                let t = clean(&dataset.transmissions[&(i, j)])?;
                raw[i][j] = estimate_terminal_distance(&reflections[i], &t, dataset.mic_speaker_distances[j], c)?;
            }
        }
    }
    let mut dist = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let v = 0.5 * ((raw[i][j] - dataset.mic_speaker_distances[j]) + (raw[j][i] - dataset.mic_speaker_distances[i]));
            dist[i][j] = v;
            dist[j][i] = v;
        }
    }

    let mut tree = build_tree(&dist, merge_tol, consistency_tol)?;
    refine_lengths(&mut tree, &dist);
    let mut max_residual: f64 = 0.0;
    for (i, row) in dist.iter().enumerate() {
        for (j, want) in row.iter().enumerate().skip(i + 1) {
            max_residual = max_residual.max((tree.distance(i, j) - want).abs());
        }
    }
    if max_residual > consistency_tol {
        return Err(inconsistent(format!(
            "tree misfits measured distances by {max_residual:.4} m"
        )));
    }

    let joint_distances: Vec<Vec<f64>> = reflections
        .iter()
        .zip(&dataset.mic_speaker_distances)
        .map(|(r, &d_ii)| {
            let search = JointSearch {
                speaker_distance: Some(d_ii),
                ..opts.joint_search
            };
            estimate_joint_distances(r, c, &search)
        })
        .collect();

    let mut junctions = Vec::new();
    for node in k..tree.adj.len() {
        let distances: Vec<f64> = (0..k).map(|i| tree.distance(i, node)).collect();
        let confirmed_by = (0..k)
            .filter(|&i| joint_distances[i].iter().any(|&cand| (cand - distances[i]).abs() <= match_tol))
            .collect();
        let mut est = JunctionEstimate {
            node,
            degree: tree.adj[node].len(),
            distances,
            confirmed_by,
            class: None,
            class_residual: None,
            energy_ratio: None,
            classified_from: None,
        };
        if let Some(models) = models {
            for &(nb, _) in &tree.adj[node] {
                if nb >= k {
                    continue;
                }
                let Some(f) = joint_feature(
                    &reflections[nb],
                    est.distances[nb],
                    c,
                    opts.min_separation,
                    opts.threshold_mads,
                    match_tol,
                ) else {
                    continue;
                };
                let (kind, res) = classify_junction(f.distance, f.energy_ratio, models)?;
                if est.class_residual.is_none_or(|r| res < r) {
                    est.class = Some(kind);
                    est.class_residual = Some(res);
                    est.energy_ratio = Some(f.energy_ratio);
                    est.classified_from = Some(nb);
                }
            }
        }
        junctions.push(est);
    }

    let mut edges: Vec<TreeEdge> = tree
        .edges()
        .into_iter()
        .map(|(a, b)| TreeEdge {
            a,
            b,
            length: tree.edge_len(a, b),
        })
        .collect();
    edges.sort_by_key(|e| (e.a, e.b));

    Ok(TopologyEstimate {
        terminal_names: dataset.terminals.iter().map(|t| format!("T{}", t.0)).collect(),
        distances: dist,
        raw_distances: raw,
        joint_distances,
        mic_speaker_distances: dataset.mic_speaker_distances.clone(),
        node_count: tree.adj.len(),
        edges,
        junctions,
        max_residual,
    })
}

impl TopologyEstimate {
    fn node_name(&self, n: usize) -> String {
        let k = self.terminal_names.len();
        if n < k {
            self.terminal_names[n].clone()
        } else {
            format!("J{}", n - k)
        }
    }

    /// Along-tree distance between two tree nodes.
    pub fn tree_distance(&self, a: usize, b: usize) -> f64 {
        let mut tree = Tree {
            adj: vec![Vec::new(); self.node_count],
            terminals: self.terminal_names.len(),
        };
        for e in &self.edges {
            tree.connect(e.a, e.b, e.length);
        }
        tree.distance(a, b)
    }

    /// Network description of the discovered tree with uniform pipe bore.
    /// Zero-length edges are stretched to `min_length`.
    pub fn to_network_desc(&self, medium: MediumSpec, diameter: f64, min_length: f64) -> NetworkDesc {
        let k = self.terminal_names.len();
        let segments = self
            .edges
            .iter()
            .enumerate()
            .map(|(i, e)| SegmentDesc {
                id: format!("e{i}"),
                from: self.node_name(e.a),
                to: self.node_name(e.b),
                length_m: e.length.max(min_length),
                diameter_m: diameter,
            })
            .collect();
        let junctions = self
            .junctions
            .iter()
            .map(|j| {
                let by_degree = match j.degree {
                    2 => JunctionKind::LBend1x1,
                    4 => JunctionKind::Cross1x1,
                    _ => JunctionKind::T1x1,
                };
                let kind = j.class.filter(|c| c.port_count() == j.degree).unwrap_or(by_degree);
                JunctionDesc {
                    id: self.node_name(j.node),
                    kind,
                    port_areas_m2: BTreeMap::new(),
                }
            })
            .collect();
        let terminals = (0..k)
            .map(|i| TerminalDesc {
                id: self.terminal_names[i].clone(),
                mic_speaker_distance_m: self.mic_speaker_distances[i],
                termination_reflection: 0.7,
            })
            .collect();
        NetworkDesc {
            medium,
            segments,
            junctions,
            terminals,
            leaks: vec![],
        }
    }

    pub fn to_network(&self, medium: MediumSpec, diameter: f64) -> Result<PipeNetwork, NetworkError> {
        build_network(&self.to_network_desc(medium, diameter, 1e-3))
    }
}

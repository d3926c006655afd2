//! Echo enumeration on the acoustic graph of a network.
//!
//! Every terminal contributes a speaker vertex and a transparent microphone
//! vertex joined by a stub of length `d_ii`; junctions and leaks are
//! scattering vertices. Wave packets are expanded in order of travelled
//! distance, and packets that occupy the same directed edge with the same
//! travelled distance are merged, so multi-path arrivals sum exactly.

use std::collections::BTreeMap;

use super::scatter::port_coefficients;
use super::SimError;
use crate::network::{NodeRef, PipeNetwork, SegmentEnd};

/// Path lengths are tracked in integer micrometres so merging is exact.
const UNITS_PER_METER: f64 = 1e6;
/// Hard cap on expanded packets before giving up.
const MAX_EXPANSIONS: usize = 40_000_000;

#[derive(Debug, Clone)]
enum VertexKind {
    Speaker { reflection: f64 },
    Mic { terminal: usize },
    Scatter { loss_area: f64 },
}

#[derive(Debug, Clone)]
struct Vertex {
    kind: VertexKind,
    /// (edge index, port area)
    ports: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
struct Edge {
    a: usize,
    b: usize,
    len_units: u64,
    len_m: f64,
}

/// One arrival at a microphone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    /// Travelled distance from the source, m.
    pub distance: f64,
    /// Pressure relative to the source amplitude (attenuation included).
    pub amplitude: f64,
}

#[derive(Debug, Clone)]
pub struct AcousticGraph {
    vertices: Vec<Vertex>,
    edges: Vec<Edge>,
    speaker_vertex: Vec<usize>,
    leak_vertex: Vec<usize>,
    terminal_count: usize,
    attenuation: f64,
}

fn units(len: f64) -> u64 {
    ((len * UNITS_PER_METER).round() as u64).max(1)
}

impl AcousticGraph {
    pub fn build(net: &PipeNetwork) -> Self {
        let mut vertices = Vec::new();
        let mut edges: Vec<Edge> = Vec::new();
        let mut add_edge = |vertices: &mut Vec<Vertex>, a: usize, b: usize, len: f64, area_a: f64, area_b: f64| {
            let e = edges.len();
            edges.push(Edge {
                a,
                b,
                len_units: units(len),
                len_m: len,
            });
            vertices[a].ports.push((e, area_a));
            vertices[b].ports.push((e, area_b));
        };

        let mut speaker_vertex = Vec::new();
        let mut mic_vertex = Vec::new();
        for t in &net.terminals {
            let area = net.segment(t.segment).cross_section_area;
            let s = vertices.len();
            vertices.push(Vertex {
                kind: VertexKind::Speaker {
                    reflection: t.termination_reflection,
                },
                ports: Vec::new(),
            });
            let m = vertices.len();
            vertices.push(Vertex {
                kind: VertexKind::Mic { terminal: t.id.0 },
                ports: Vec::new(),
            });
            add_edge(&mut vertices, s, m, t.mic_speaker_distance, area, area);
            speaker_vertex.push(s);
            mic_vertex.push(m);
        }
        let mut junction_vertex = Vec::new();
        for j in &net.junctions {
            junction_vertex.push(vertices.len());
            vertices.push(Vertex {
                kind: VertexKind::Scatter {
                    loss_area: j.loss_area(),
                },
                ports: Vec::new(),
            });
        }
        let mut leak_vertex = vec![0; net.leaks.len()];
        for seg in &net.segments {
            let endpoint = |k: usize| match seg.ends[k] {
                NodeRef::Junction(j) => junction_vertex[j.0],
                NodeRef::Terminal(t) => mic_vertex[t.0],
            };
            let port_area = |k: usize| match seg.ends[k] {
                NodeRef::Junction(j) => {
                    let end = if k == 0 { SegmentEnd::Start } else { SegmentEnd::End };
                    net.junctions[j.0]
                        .ports
                        .iter()
                        .find(|p| p.segment == seg.id && p.end == end)
                        .map(|p| p.area)
                        .unwrap_or(seg.cross_section_area)
                }
                NodeRef::Terminal(_) => seg.cross_section_area,
            };
            let mut leaks: Vec<_> = net.leaks.iter().filter(|l| l.segment == seg.id).collect();
            leaks.sort_by(|a, b| a.arc_position.total_cmp(&b.arc_position).then(a.id.cmp(&b.id)));
            let mut prev = endpoint(0);
            let mut prev_area = port_area(0);
            let mut prev_arc = 0.0;
            for leak in leaks {
                let v = vertices.len();
                vertices.push(Vertex {
                    kind: VertexKind::Scatter {
                        loss_area: leak.effective_hole_area,
                    },
                    ports: Vec::new(),
                });
                let len = leak.arc_position - prev_arc;
                add_edge(&mut vertices, prev, v, len, prev_area, seg.cross_section_area);
                leak_vertex[leak.id.0] = v;
                prev = v;
                prev_area = seg.cross_section_area;
                prev_arc = leak.arc_position;
            }
            add_edge(&mut vertices, prev, endpoint(1), seg.length - prev_arc, prev_area, port_area(1));
        }

        AcousticGraph {
            vertices,
            edges,
            speaker_vertex,
            leak_vertex,
            terminal_count: net.terminals.len(),
            attenuation: net.medium.attenuation_per_meter,
        }
    }

    fn head(&self, directed: usize) -> usize {
        let e = &self.edges[directed / 2];
        if directed % 2 == 0 {
            e.b
        } else {
            e.a
        }
    }

    fn outgoing(&self, vertex: usize, edge: usize) -> usize {
        if self.edges[edge].a == vertex {
            2 * edge
        } else {
            2 * edge + 1
        }
    }

    /// Packets emitted by a speaker into its stub.
    pub fn speaker_emission(&self, terminal: usize) -> Vec<(usize, f64)> {
        let v = self.speaker_vertex[terminal];
        let (edge, _) = self.vertices[v].ports[0];
        vec![(self.outgoing(v, edge), 1.0)]
    }

    /// Packets emitted by a leak into both pipe directions.
    pub fn leak_emission(&self, leak: usize) -> Vec<(usize, f64)> {
        let v = self.leak_vertex[leak];
        self.vertices[v]
            .ports
            .iter()
            .map(|&(edge, _)| (self.outgoing(v, edge), 1.0))
            .collect()
    }

    /// Expands all echo paths from `emission` until packets fall below
    /// `floor` or travel further than `max_distance`. Returns per-terminal
    /// arrivals sorted by distance.
    pub fn arrivals(&self, emission: &[(usize, f64)], max_distance: f64, floor: f64) -> Result<Vec<Vec<Arrival>>, SimError> {
        let max_units = (max_distance * UNITS_PER_METER).max(0.0) as u64;
        let mut queue: BTreeMap<(u64, usize), f64> = BTreeMap::new();
        for &(d, amp) in emission {
            *queue.entry((0, d)).or_insert(0.0) += amp;
        }
        let mut heard: BTreeMap<(usize, u64), f64> = BTreeMap::new();
        let push = |queue: &mut BTreeMap<(u64, usize), f64>, dist: u64, directed: usize, amp: f64| {
            if amp != 0.0 {
                *queue.entry((dist, directed)).or_insert(0.0) += amp;
            }
        };

        let mut expansions = 0usize;
        while let Some(((dist, directed), amp)) = queue.pop_first() {
            if amp.abs() < floor {
                continue;
            }
            expansions += 1;
            if expansions > MAX_EXPANSIONS {
                return Err(SimError::PathExplosion(MAX_EXPANSIONS));
            }
            let edge = &self.edges[directed / 2];
            let arrive = dist + edge.len_units;
            if arrive > max_units {
                continue;
            }
            let amp = amp * (-self.attenuation * edge.len_m).exp();
            let v = self.head(directed);
            let vertex = &self.vertices[v];
            let incoming_edge = directed / 2;
            match vertex.kind {
                VertexKind::Speaker { reflection } => {
                    push(&mut queue, arrive, directed ^ 1, reflection * amp);
                }
                VertexKind::Mic { terminal } => {
                    *heard.entry((terminal, arrive)).or_insert(0.0) += amp;
                    for &(e, _) in &vertex.ports {
                        if e != incoming_edge {
                            push(&mut queue, arrive, self.outgoing(v, e), amp);
                        }
                    }
                }
                VertexKind::Scatter { loss_area } => {
                    let total: f64 = vertex.ports.iter().map(|p| p.1).sum::<f64>() + loss_area;
                    let port_area = vertex
                        .ports
                        .iter()
                        .find(|p| p.0 == incoming_edge)
                        .map(|p| p.1)
                        .expect("incoming edge is a port");
                    let (r, t) = port_coefficients(port_area, total);
                    push(&mut queue, arrive, directed ^ 1, r * amp);
                    for &(e, _) in &vertex.ports {
                        if e != incoming_edge {
                            push(&mut queue, arrive, self.outgoing(v, e), t * amp);
                        }
                    }
                }
            }
        }

        let mut out = vec![Vec::new(); self.terminal_count];
        for ((terminal, dist), amp) in heard {
            if amp != 0.0 {
                out[terminal].push(Arrival {
                    distance: dist as f64 / UNITS_PER_METER,
                    amplitude: amp,
                });
            }
        }
        Ok(out)
    }
}

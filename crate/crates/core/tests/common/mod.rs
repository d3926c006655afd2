#![allow(dead_code)]

use std::collections::BTreeMap;

use pipescope_core::network::*;

pub const INCH: f64 = 0.0254;

pub fn seg(id: &str, from: &str, to: &str, len: f64, dia: f64) -> SegmentDesc {
    SegmentDesc {
        id: id.into(),
        from: from.into(),
        to: to.into(),
        length_m: len,
        diameter_m: dia,
    }
}

pub fn term(id: &str, d_ii: f64, refl: f64) -> TerminalDesc {
    TerminalDesc {
        id: id.into(),
        mic_speaker_distance_m: d_ii,
        termination_reflection: refl,
    }
}

pub fn junction(id: &str, kind: JunctionKind) -> JunctionDesc {
    JunctionDesc {
        id: id.into(),
        kind,
        port_areas_m2: BTreeMap::new(),
    }
}

/// Air with a modest wall loss; keeps reverberation in the closed test
/// networks from swamping the direct arrivals.
pub fn lossy_air() -> MediumSpec {
    MediumSpec {
        attenuation_per_meter: 0.02,
        ..MediumSpec::default()
    }
}

pub fn straight(len: f64, d_ii: f64, refl: f64) -> NetworkDesc {
    NetworkDesc {
        medium: MediumSpec::default(),
        segments: vec![seg("p", "A", "B", len, INCH)],
        junctions: vec![],
        terminals: vec![term("A", d_ii, refl), term("B", d_ii, refl)],
        leaks: vec![],
    }
}

/// Three terminals around one equal-bore tee.
pub fn y_net(b1: f64, b2: f64, b3: f64) -> NetworkDesc {
    NetworkDesc {
        medium: lossy_air(),
        segments: vec![
            seg("b1", "IM1", "J", b1, INCH),
            seg("b2", "IM2", "J", b2, INCH),
            seg("b3", "IM3", "J", b3, INCH),
        ],
        junctions: vec![junction("J", JunctionKind::T1x1)],
        terminals: vec![term("IM1", 0.3, 0.7), term("IM2", 0.3, 0.7), term("IM3", 0.3, 0.7)],
        leaks: vec![],
    }
}

/// Four terminals, two tees joined by a 3 m run.
pub fn double_t() -> NetworkDesc {
    NetworkDesc {
        medium: lossy_air(),
        segments: vec![
            seg("a", "A", "J1", 2.0, INCH),
            seg("b", "B", "J1", 2.5, INCH),
            seg("m", "J1", "J2", 3.0, INCH),
            seg("c", "C", "J2", 2.2, INCH),
            seg("d", "D", "J2", 3.2, INCH),
        ],
        junctions: vec![junction("J1", JunctionKind::T1x1), junction("J2", JunctionKind::T1x1)],
        terminals: ["A", "B", "C", "D"].iter().map(|t| term(t, 0.3, 0.7)).collect(),
        leaks: vec![],
    }
}

pub fn leak(segment: &str, arc: f64, area: f64, level: f64) -> LeakDesc {
    LeakDesc {
        id: "L1".into(),
        segment: segment.into(),
        arc_m: arc,
        hole_area_m2: area,
        source_level_pa: level,
        band_low_hz: 300.0,
        band_high_hz: 8000.0,
    }
}

pub fn argmax_abs(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if v.abs() > x[best].abs() {
            best = i;
        }
    }
    best
}

//! Acceptance run: one line per criterion, then a single pass/fail verdict.
//!
//! The criteria run one after another inside a single test so that the
//! wall-clock limits are measured without other tests competing for the CPU.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use pipescope_cli::pipeline::{layout, run_pipeline, speaker_echoes, LeakReport, RunOptions, Stage};
use pipescope_cli::scenario::{load_scenario, FilterChoice, Scenario};
use pipescope_core::imaging::*;
use pipescope_core::network::*;
use pipescope_core::protocol::*;
use pipescope_core::reflectometry::*;
use pipescope_core::sim::*;
use pipescope_core::trace::Trace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const FS: f64 = 48_000.0;
const C: f64 = 343.0;
const STEP: f64 = C / FS;
const INCH: f64 = 0.0254;
const GAMMA: f64 = 0.02;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gaussian(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

// ---------------------------------------------------------------------------
// Networks.

fn seg(id: &str, from: &str, to: &str, len: f64) -> SegmentDesc {
    SegmentDesc {
        id: id.into(),
        from: from.into(),
        to: to.into(),
        length_m: len,
        diameter_m: INCH,
    }
}

fn term(id: &str) -> TerminalDesc {
    TerminalDesc {
        id: id.into(),
        mic_speaker_distance_m: 0.3,
        termination_reflection: 0.7,
    }
}

fn junction(id: &str, kind: JunctionKind) -> JunctionDesc {
    JunctionDesc {
        id: id.into(),
        kind,
        port_areas_m2: BTreeMap::new(),
    }
}

fn lossy() -> MediumSpec {
    MediumSpec {
        attenuation_per_meter: GAMMA,
        ..MediumSpec::default()
    }
}

/// Terminals on the arms of one junction, arm lengths in order.
fn star(kind: JunctionKind, arms: &[f64]) -> NetworkDesc {
    NetworkDesc {
        medium: lossy(),
        segments: arms
            .iter()
            .enumerate()
            .map(|(i, &l)| seg(&format!("b{}", i + 1), &format!("IM{}", i + 1), "J", l))
            .collect(),
        junctions: vec![junction("J", kind)],
        terminals: (0..arms.len()).map(|i| term(&format!("IM{}", i + 1))).collect(),
        leaks: vec![],
    }
}

fn double_t() -> NetworkDesc {
    NetworkDesc {
        medium: lossy(),
        segments: vec![
            seg("a", "A", "J1", 2.0),
            seg("b", "B", "J1", 2.5),
            seg("m", "J1", "J2", 3.0),
            seg("c", "C", "J2", 2.2),
            seg("d", "D", "J2", 3.2),
        ],
        junctions: vec![junction("J1", JunctionKind::T1x1), junction("J2", JunctionKind::T1x1)],
        terminals: ["A", "B", "C", "D"].iter().map(|t| term(t)).collect(),
        leaks: vec![],
    }
}

/// `k` terminals along a run of tees: one at each end, one per side branch.
fn comb(k: usize, rng: &mut ChaCha8Rng) -> NetworkDesc {
    let mut len = || rng.random_range(0.5..2.5);
    let mut segments = Vec::new();
    let mut junctions = Vec::new();
    if k == 2 {
        segments.push(seg("s", "T0", "T1", len()));
    } else {
        let tees = k - 2;
        segments.push(seg("s0", "T0", "J1", len()));
        for m in 1..=tees {
            segments.push(seg(&format!("b{m}"), &format!("T{m}"), &format!("J{m}"), len()));
            if m < tees {
                segments.push(seg(&format!("r{m}"), &format!("J{m}"), &format!("J{}", m + 1), len()));
            }
            junctions.push(junction(&format!("J{m}"), JunctionKind::T1x1));
        }
        segments.push(seg("s1", &format!("T{}", k - 1), &format!("J{tees}"), len()));
    }
    NetworkDesc {
        medium: lossy(),
        segments,
        junctions,
        terminals: (0..k).map(|i| term(&format!("T{i}"))).collect(),
        leaks: vec![],
    }
}

fn all_nodes(net: &PipeNetwork) -> Vec<TerminalId> {
    (0..net.terminals.len()).map(TerminalId).collect()
}

fn probe_dataset(desc: &NetworkDesc, noise: f64, repeats: usize, seed: u64) -> ProbeDataset {
    let net = build_network(desc).unwrap();
    let cfg = ProbeConfig {
        repeats,
        slot_duration: repeats as f64 * 0.5,
        ..ProbeConfig::default()
    };
    let schedule = make_schedule(net.terminals.len(), cfg.slot_duration, repeats, 0.5).unwrap();
    let sim = SimConfig {
        noise_floor: noise,
        rng_seed: seed,
        ..SimConfig::default()
    };
    run_probe_round(&net, &all_nodes(&net), &schedule, &sim, &cfg).unwrap().dataset
}

// ---------------------------------------------------------------------------
// 1. Scattering physics.

fn peak_between(x: &[f64], lo: usize, hi: usize) -> f64 {
    x[lo..hi].iter().copied().fold(0.0, |m: f64, v| if v.abs() > m.abs() { v } else { m })
}

/// Joint echo over direct arrival at IM1, with the extra wall loss undone.
fn simulated_joint_ratio(kind: JunctionKind, arms: &[f64]) -> f64 {
    let net = build_network(&star(kind, arms)).unwrap();
    let src = [SourceEvent::SpeakerPulse {
        terminal: TerminalId(0),
        start_time: 0.0,
        pulse: PulseSpec::default(),
    }];
    let cfg = SimConfig {
        duration: 0.1,
        ..SimConfig::default()
    };
    let x = &simulate(&net, &src, &cfg).unwrap()[0].samples;
    let at = |d: f64| ((d / C + 0.5e-3) * FS).round() as usize;
    let direct = peak_between(x, at(0.3) - 5, at(0.3) + 5);
    let joint = peak_between(x, at(0.3 + 2.0 * arms[0]) - 5, at(0.3 + 2.0 * arms[0]) + 5);
    joint / direct * (GAMMA * 2.0 * arms[0]).exp()
}

fn criterion_1() -> Check {
    let a = std::f64::consts::PI * 0.0127f64.powi(2);
    let tight = 4.0 * f64::EPSILON;
    let r_t = reflection_coefficient(a, 2.0 * a).unwrap();
    let r_x = reflection_coefficient(a, 3.0 * a).unwrap();
    ensure((r_t + 1.0 / 3.0).abs() <= tight, format!("tee reflection {r_t}"))?;
    ensure((r_x + 0.5).abs() <= tight, format!("cross reflection {r_x}"))?;
    let s_t = scatter(&[1.0, 0.0, 0.0], &[a; 3]).unwrap();
    let s_x = scatter(&[1.0, 0.0, 0.0, 0.0], &[a; 4]).unwrap();
    ensure((s_t[0] + 1.0 / 3.0).abs() <= tight && (s_t[1] - 2.0 / 3.0).abs() <= tight, format!("tee scatter {s_t:?}"))?;
    ensure((s_x[0] + 0.5).abs() <= tight && (s_x[1] - 0.5).abs() <= tight, format!("cross scatter {s_x:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_power = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=5);
        let areas: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
        let inc: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = scatter(&inc, &areas).unwrap();
        let p_in: f64 = areas.iter().zip(&inc).map(|(s, p)| s * p * p).sum();
        let p_out: f64 = areas.iter().zip(&out).map(|(s, p)| s * p * p).sum();
        worst_power = worst_power.max((p_in - p_out).abs() / p_in);
    }
    ensure(worst_power <= 1e-9, format!("power error {worst_power:e}"))?;

    let tee = simulated_joint_ratio(JunctionKind::T1x1, &[2.0, 3.0, 4.0]);
    let cross = simulated_joint_ratio(JunctionKind::Cross1x1, &[2.0, 3.0, 4.0, 5.0]);
    let e_t = (tee / (-1.0 / 3.0) - 1.0).abs();
    let e_x = (cross / -0.5 - 1.0).abs();
    ensure(e_t <= 0.02 && e_x <= 0.02, format!("simulated ratios tee {tee:.5} cross {cross:.5}"))?;
    Ok(format!(
        "r_T {r_t:.17}, r_X {r_x:.17}, power err {worst_power:.1e}, simulated tee {tee:.4} ({:.2}%), cross {cross:.4} ({:.2}%)",
        100.0 * e_t,
        100.0 * e_x
    ))
}

// ---------------------------------------------------------------------------
// 2. Correlation against a double loop.

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=256);
        let m = rng.random_range(1..=256);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = cross_correlate(&Trace::new(x.clone(), FS, 0.0), &Trace::new(y.clone(), FS, 0.0)).unwrap();
        let len = n.max(m);
        let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
        ensure(fast.len() == len, format!("length {} for {n}, {m}", fast.len()))?;
        for (lag, f) in fast.iter().enumerate() {
            let mut slow = 0.0;
            for k in 0..len - lag {
                slow += at(&y, k + lag) * at(&x, k);
            }
            worst = worst.max((f - slow).abs());
        }
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!("100 pairs, max deviation {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 3. Wavelets.

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let n = rng.random_range(32..2048);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Wavelet::by_name(if case % 2 == 0 { "sym6" } else { "haar" }).unwrap();
        let levels = rng.random_range(1..=5);
        let y = waverec(&wavedec(&x, levels, &w).unwrap(), &w);
        for (a, b) in x.iter().zip(&y) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-10, format!("reconstruction error {worst:e}"))?;

    let n = 4096;
    let clean: Vec<f64> = (0..n)
        .map(|i| {
            let k = i as f64 - 1500.0;
            if (0.0..192.0).contains(&k) {
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * k / 192.0).cos())
            } else {
                0.0
            }
        })
        .collect();
    let e_clean: f64 = clean.iter().map(|v| v * v).sum();
    let sigma = (e_clean / n as f64).sqrt();
    let mut gains = Vec::new();
    for seed in 0..10 {
        let noise = gaussian(n, 300 + seed);
        let noisy: Vec<f64> = clean.iter().zip(&noise).map(|(c, v)| c + sigma * v).collect();
        let out = denoise_dwt(&Trace::new(noisy.clone(), FS, 0.0), 5, "sym6").unwrap();
        let err = |y: &[f64]| y.iter().zip(&clean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        gains.push(10.0 * (err(&noisy) / err(&out.samples)).log10());
    }
    let min_gain = gains.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(min_gain >= 6.0, format!("denoising gains {gains:.2?}"))?;
    Ok(format!("reconstruction error {worst:.2e}, min denoising gain {min_gain:.2} dB over 10 draws"))
}

// ---------------------------------------------------------------------------
// 4. Topology.

fn trained_models() -> JunctionModels {
    let distances: Vec<f64> = (1..=7).map(f64::from).collect();
    train_junction_models(&distances, &TrainingRig::default()).unwrap()
}

fn check_topology(desc: &NetworkDesc, models: &JunctionModels, name: &str) -> Result<(f64, f64), String> {
    let net = build_network(desc).unwrap();
    let ds = probe_dataset(desc, 0.002, 4, 40);
    let est = reconstruct_topology(&ds, Some(models), &TopologyOptions::default()).map_err(|e| format!("{name}: {e}"))?;
    let k = net.terminals.len();
    let mut worst_d = 0.0f64;
    for i in 0..k {
        for j in i + 1..k {
            let truth = net.terminal_distance(TerminalId(i), TerminalId(j));
            worst_d = worst_d.max((est.distances[i][j] - truth).abs());
            worst_d = worst_d.max((est.tree_distance(i, j) - truth).abs());
        }
    }
    ensure(worst_d <= 2.0 * STEP, format!("{name}: distance error {worst_d:.4} m"))?;
    ensure(
        est.junctions.len() == net.junctions.len(),
        format!("{name}: {} junctions found, {} expected", est.junctions.len(), net.junctions.len()),
    )?;
    let mut worst_j = 0.0f64;
    for j in &net.junctions {
        let truth: Vec<f64> = (0..k)
            .map(|t| net.path_distance(net.terminal_point(TerminalId(t)), net.junction_point(j.id)).unwrap())
            .collect();
        let err = |e: &JunctionEstimate| e.distances.iter().zip(&truth).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let best = est
            .junctions
            .iter()
            .min_by(|a, b| err(a).total_cmp(&err(b)))
            .expect("junctions present");
        worst_j = worst_j.max(err(best));
        ensure(
            best.class == Some(j.kind),
            format!("{name}: junction {} classified {:?}, truth {}", j.name, best.class, j.kind),
        )?;
    }
    ensure(worst_j <= 5.0 * STEP, format!("{name}: junction error {worst_j:.4} m"))?;
    Ok((worst_d, worst_j))
}

fn criterion_4() -> Check {
    let models = trained_models();
    let scn = load_scenario(&scenario_path("fig3.scenario")).map_err(|e| e.to_string())?;
    let (dy, jy) = check_topology(&scn.network, &models, "Y")?;
    let (dt, jt) = check_topology(&double_t(), &models, "double-T")?;
    Ok(format!(
        "Y: distances {:.2} c/Fs, junction {:.2} c/Fs; double-T: distances {:.2} c/Fs, junctions {:.2} c/Fs; classes correct",
        dy / STEP,
        jy / STEP,
        dt / STEP,
        jt / STEP
    ))
}

// ---------------------------------------------------------------------------
// 5. Junction classifier.

fn criterion_5() -> Check {
    let rig = TrainingRig {
        noise_floor: 0.002,
        repeats: 2,
        seed: 500,
        ..TrainingRig::default()
    };
    let distances: Vec<f64> = (1..=7).map(f64::from).collect();
    let models = train_junction_models(&distances, &rig).map_err(|e| e.to_string())?;
    let queries = [0.8, 1.7, 2.3, 3.1, 3.9, 4.6, 5.4, 6.2, 6.9];
    let mut correct = 0;
    let mut misses = Vec::new();
    for (q, &d) in queries.iter().enumerate() {
        let kind = JunctionKind::ALL[q % JunctionKind::ALL.len()];
        let held_out = TrainingRig {
            seed: 9_000 + q as u64,
            repeats: 1,
            ..rig
        };
        let f = rig_feature(kind, d, &held_out).map_err(|e| e.to_string())?;
        let (got, _) = classify_junction(f.distance, f.energy_ratio, &models).map_err(|e| e.to_string())?;
        if got == kind {
            correct += 1;
        } else {
            misses.push(format!("{kind} at {d} m as {got}"));
        }
    }
    ensure(correct == queries.len(), format!("{correct}/9, misses {misses:?}"))?;
    Ok(format!("{correct}/9 held-out queries from 0.8 to 6.9 m"))
}

// ---------------------------------------------------------------------------
// 6. Localization on the leak scenario.

fn fig7() -> Scenario {
    load_scenario(&scenario_path("fig7.scenario")).expect("bundled scenario loads")
}

fn stages(scn: &Scenario, out: &Path, list: &[Stage]) -> Result<(), String> {
    let opts = RunOptions {
        out: out.to_path_buf(),
        stages: list.to_vec(),
        ground_truth_topology: true,
        dump_traces: false,
    };
    match run_pipeline(scn, &opts) {
        Ok((_, None)) => Ok(()),
        Ok((_, Some(f))) => Err(f.to_string()),
        Err(f) => Err(f.to_string()),
    }
}

fn read_image(out: &Path) -> LinearImage {
    serde_json::from_str(&fs::read_to_string(out.join(layout::IMAGE_JSON)).unwrap()).unwrap()
}

fn criterion_6() -> Check {
    let scn = fig7();
    ensure(
        scn.imaging.realizations == 100
            && scn.imaging.segment_length_s == 0.4
            && scn.imaging.speed_of_sound_mps == C
            && scn.imaging.atten_comp_rate_per_s == 0.0
            && scn.imaging.filter == FilterChoice::Identity,
        "scenario imaging settings differ from M=100, 0.4 s, c=343, K=0, identity",
    )?;
    let dir = tempfile::tempdir().unwrap();
    stages(&scn, dir.path(), &[Stage::Simulate, Stage::Image])?;
    let image = read_image(dir.path());
    let net = scn.build_network().unwrap();
    let peak = image.points[image.peak_index()];
    let im1 = net.terminal_by_name("IM1").unwrap().id;
    let from_im1 = net.path_distance(net.terminal_point(im1), peak.point()).unwrap();
    let on_b1 = net.segment(peak.segment).name == "b1";
    ensure(on_b1 && (from_im1 - 2.6).abs() <= 0.05, format!("peak on {} at {from_im1:.3} m from IM1", net.segment(peak.segment).name))?;
    let means: Vec<(String, f64)> = net
        .segments
        .iter()
        .map(|s| (s.name.clone(), image.segment_mean(s.id).unwrap()))
        .collect();
    let b1 = means.iter().find(|m| m.0 == "b1").unwrap().1;
    ensure(
        means.iter().filter(|m| m.0 != "b1").all(|m| b1 > m.1),
        format!("branch means {means:?}"),
    )?;
    Ok(format!(
        "peak {from_im1:.3} m from IM1 (error {:.1} cm), branch means {}",
        100.0 * (from_im1 - 2.6).abs(),
        means.iter().map(|(n, v)| format!("{n} {v:.3e}")).collect::<Vec<_>>().join(", ")
    ))
}

// ---------------------------------------------------------------------------
// 7. Unbiasedness.

fn criterion_7() -> Check {
    let net = build_network(&star(JunctionKind::T1x1, &[2.0, 3.0, 4.0])).unwrap();
    let nodes = all_nodes(&net);
    let cfg = ImagingConfig {
        segment_length: 0.02,
        realizations: 200,
        pixel_spacing: 0.05,
        ..ImagingConfig::default()
    };
    let sim = SimConfig {
        duration: required_listening(&net, FS, &cfg),
        noise_floor: 0.05,
        rng_seed: 70,
        ..SimConfig::default()
    };
    let records = simulate(&net, &[], &sim).unwrap();
    let points = net.pixelate(cfg.pixel_spacing).unwrap();
    let distances = distance_table(&net, &nodes, &points).unwrap();
    let len = cfg.window_samples(FS);
    let span = len + (net.diameter() / C * FS).ceil() as usize + 2;
    let mut per_pixel = vec![Vec::with_capacity(cfg.realizations); points.len()];
    let mut biased_min = f64::INFINITY;
    for j in 0..cfg.realizations {
        let windows: Vec<Trace> = records.iter().map(|t| t.slice(j * len, span)).collect();
        let img = image_realization(&windows, &points, &distances, &cfg).unwrap();
        for (acc, v) in per_pixel.iter_mut().zip(img) {
            acc.push(v);
        }
        let biased = biased_image(&windows, &points, &distances, &cfg).unwrap();
        biased_min = biased_min.min(biased.iter().copied().fold(f64::INFINITY, f64::min));
    }
    let mut worst_z = 0.0f64;
    for samples in &per_pixel {
        let m = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / m;
        let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        worst_z = worst_z.max(mean.abs() / (sd / m.sqrt()));
    }
    let formed = form_image(&records, &net, &nodes, &cfg).unwrap();
    let direct_mean: Vec<f64> = per_pixel.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect();
    let agree = formed
        .intensities
        .iter()
        .zip(&direct_mean)
        .all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    ensure(agree, "form_image differs from the per-window average")?;
    ensure(worst_z <= 3.0, format!("worst |mean| = {worst_z:.2} standard errors"))?;
    ensure(biased_min > 0.0, format!("biased image minimum {biased_min:e}"))?;
    Ok(format!(
        "{} pixels x 200 realizations, worst |mean| {worst_z:.2} SE, biased minimum {biased_min:.3e} > 0",
        points.len()
    ))
}

// ---------------------------------------------------------------------------
// 8. Echo cancellation.

fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|n| h.iter().enumerate().take(n + 1).map(|(k, hk)| hk * x[n - k]).sum())
        .collect()
}

/// Largest value within `radius` of `arc` on `segment`.
fn value_near(image: &LinearImage, segment: SegmentId, arc: f64, radius: f64) -> f64 {
    image
        .points
        .iter()
        .zip(&image.intensities)
        .filter(|(p, _)| p.segment == segment && (p.arc - arc).abs() <= radius + 1e-9)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn db(a: f64, b: f64) -> f64 {
    10.0 * (a / b).log10()
}

/// Exclusion radius around the main peak when looking for secondary peaks, m.
const MAIN_LOBE: f64 = 0.1;

fn criterion_8() -> Check {
    // Ideal canceler on a synthetic echo.
    let n = 20_000;
    let lag = 84;
    let s = gaussian(n, 81);
    let p: Vec<f64> = (0..n).map(|k| s[k] + if k >= lag { 0.7 * s[k - lag] } else { 0.0 }).collect();
    let y = ideal_echo_filter(&Trace::new(p, FS, 0.0), &[Echo { alpha: 0.7, tau: lag as f64 / FS }]).unwrap();
    let err: f64 = y.samples.iter().zip(&s).map(|(a, b)| (a - b).powi(2)).sum();
    let rel = (err / s.iter().map(|v| v * v).sum::<f64>()).sqrt();
    ensure(rel < 1e-6, format!("ideal filter error {rel:e}"))?;

    // NLMS on a known 64-tap channel at 30 dB SNR.
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let h: Vec<f64> = (0..64).map(|k| rng.random_range(-1.0..1.0) * (-(k as f64) / 16.0).exp()).collect();
    let n = 100_000;
    let x = gaussian(n, 83);
    let clean = convolve(&x, &h);
    let p_signal = clean.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let sigma = (p_signal / 1e3).sqrt();
    let d: Vec<f64> = clean.iter().zip(gaussian(n, 84)).map(|(c, v)| c + sigma * v).collect();
    let est = nlms_train(&Trace::new(x, FS, 0.0), &Trace::new(d, FS, 0.0), 64, 0.5).unwrap();
    let mis = misalignment_db(&est.taps, &h);
    ensure(mis < -20.0, format!("NLMS misalignment {mis:.2} dB"))?;

    // Leak scenario, unfiltered against speaker-echo filtered.
    let raw_scn = fig7();
    let dir = tempfile::tempdir().unwrap();
    let raw_dir = dir.path().join("identity");
    let filtered_dir = dir.path().join("ideal");
    stages(&raw_scn, &raw_dir, &[Stage::Simulate, Stage::Probe, Stage::Image])?;
    for sub in [layout::LISTEN_DIR, layout::PROBE_DIR] {
        copy_dir(&raw_dir.join(sub), &filtered_dir.join(sub));
    }
    let mut filtered_scn = raw_scn.clone();
    filtered_scn.imaging.filter = FilterChoice::IdealEcho;
    stages(&filtered_scn, &filtered_dir, &[Stage::Image])?;
    let raw = read_image(&raw_dir);
    let filtered = read_image(&filtered_dir);
    let net = raw_scn.build_network().unwrap();

    let raw_peak = raw.intensities[raw.peak_index()];
    let main = raw.points[raw.peak_index()].point();
    let secondary = local_maxima(&raw)
        .into_iter()
        .find(|&i| net.path_distance(main, raw.points[i].point()).unwrap() > MAIN_LOBE)
        .ok_or("no secondary peak in the unfiltered image")?;
    let at = raw.points[secondary];
    let before = db(raw.intensities[secondary], raw_peak);
    let after = db(
        value_near(&filtered, at.segment, at.arc, 0.02),
        filtered.intensities[filtered.peak_index()],
    );
    let reduction = before - after;
    let anywhere_raw = secondary_peak_ratio_db(&raw, &net, MAIN_LOBE).unwrap();
    let anywhere_filtered = secondary_peak_ratio_db(&filtered, &net, MAIN_LOBE).unwrap();
    let alphas = probe_echoes(&raw_dir);
    let line = format!(
        "ideal error {rel:.1e}, NLMS {mis:.1} dB; secondary peak at {} {:.2} m: {before:.2} dB -> {after:.2} dB \
         (reduction {reduction:.2} dB); largest secondary anywhere {anywhere_raw:.2} -> {anywhere_filtered:.2} dB; \
         estimated alphas {alphas}",
        net.segment(at.segment).name,
        at.arc
    );
    ensure(reduction >= 3.0, line.clone())?;
    Ok(line)
}

fn probe_echoes(out: &Path) -> String {
    #[derive(serde::Deserialize)]
    struct Index {
        mic_speaker_distances_m: Vec<f64>,
        speed_of_sound_mps: f64,
        transmissions: Vec<Entry>,
    }
    #[derive(serde::Deserialize)]
    struct Entry {
        active: usize,
        recorder: usize,
        file: String,
    }
    let index: Index = serde_json::from_str(&fs::read_to_string(out.join(layout::DATASET)).unwrap()).unwrap();
    let k = index.mic_speaker_distances_m.len();
    let mut transmissions = BTreeMap::new();
    for e in &index.transmissions {
        let (t, _) = pipescope_core::trace::read_trace_dump(&out.join(layout::PROBE_DIR).join(&e.file)).unwrap();
        transmissions.insert((e.active, e.recorder), t);
    }
    let ds = ProbeDataset {
        cluster_size: k,
        terminals: (0..k).map(TerminalId).collect(),
        reflections: vec![],
        transmissions,
        mic_speaker_distances: index.mic_speaker_distances_m,
        speed_of_sound: index.speed_of_sound_mps,
    };
    match speaker_echoes(&ds) {
        Ok(e) => e.iter().map(|v| format!("{:.3}", v[0].alpha)).collect::<Vec<_>>().join("/"),
        Err(e) => e.to_string(),
    }
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            fs::copy(entry.path(), to.join(entry.file_name())).unwrap();
        }
    }
}

// ---------------------------------------------------------------------------
// 9. Protocol.

/// START..STOP intervals per prober, checked pairwise for overlap.
fn overlapping_probers(log: &[LogEntry]) -> Option<String> {
    let mut open: BTreeMap<Addressee, f64> = BTreeMap::new();
    let mut spans = Vec::new();
    for e in log {
        match e.kind.as_str() {
            "START_BEACON" => {
                open.insert(e.sender, e.time);
            }
            "STOP_BEACON" => {
                let start = open.remove(&e.sender)?;
                spans.push((start, e.time, e.sender));
            }
            _ => {}
        }
    }
    if !open.is_empty() {
        return Some(format!("unterminated probes {open:?}"));
    }
    for (a, x) in spans.iter().enumerate() {
        for y in &spans[a + 1..] {
            if x.0 < y.1 && y.0 < x.1 {
                return Some(format!("{} and {} overlap", x.2, y.2));
            }
        }
    }
    None
}

fn bits(t: &Trace) -> Vec<u64> {
    t.samples.iter().map(|v| v.to_bits()).collect()
}

fn criterion_9() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rounds = 0;
    for k in (2..=8).chain([3, 4]) {
        let desc = comb(k, &mut rng);
        let net = build_network(&desc).unwrap();
        let nodes = all_nodes(&net);
        let repeats = rng.random_range(1..=3);
        let period = 0.5;
        let slot = repeats as f64 * period + rng.random_range(0.0..0.5);
        let probe = ProbeConfig {
            repeats,
            slot_duration: slot,
            latency: rng.random_range(0.0..0.005),
            start_delay: 0.01,
            ..ProbeConfig::default()
        };
        let schedule = make_schedule(k, slot, repeats, period).unwrap();
        let sim = SimConfig {
            noise_floor: 0.01,
            rng_seed: rng.random(),
            ..SimConfig::default()
        };
        let a = run_probe_round(&net, &nodes, &schedule, &sim, &probe).map_err(|e| format!("K={k}: {e}"))?;
        let b = run_probe_round(&net, &nodes, &schedule, &sim, &probe).unwrap();
        if let Some(msg) = overlapping_probers(&a.log) {
            return Err(format!("K={k}: {msg}"));
        }
        check_mutual_exclusion(&a.log).map_err(|e| format!("K={k}: {e}"))?;
        let ds = &a.dataset;
        ensure(
            ds.reflections.len() == k && ds.transmissions.len() == k * k - k,
            format!("K={k}: {} reflections, {} transmissions", ds.reflections.len(), ds.transmissions.len()),
        )?;
        ensure(format_log(&a.log) == format_log(&b.log), format!("K={k}: logs differ"))?;
        let same = ds.reflections.iter().zip(&b.dataset.reflections).all(|(x, y)| bits(x) == bits(y))
            && ds
                .transmissions
                .iter()
                .zip(&b.dataset.transmissions)
                .all(|((ka, x), (kb, y))| ka == kb && bits(x) == bits(y));
        ensure(same, format!("K={k}: datasets differ"))?;
        rounds += 1;
    }
    Ok(format!("{rounds} randomized rounds, K = 2..8, exclusive, complete and bit-identical"))
}

// ---------------------------------------------------------------------------
// 10. Command-line determinism.

fn cli_run(out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_pipescope"))
        .args(["run", "--scenario"])
        .arg(scenario_path("fig7.scenario"))
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        status.status.success(),
        format!("exit {:?}: {}", status.status.code(), String::from_utf8_lossy(&status.stderr)),
    )
}

fn criterion_10() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    cli_run(&a)?;
    cli_run(&b)?;
    for f in [layout::IMAGE_CSV, layout::REPORT, layout::LEAKS, layout::TOPOLOGY] {
        let x = fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(x == y, format!("{f} differs between runs"))?;
    }
    let leaks: Vec<LeakReport> = serde_json::from_slice(&fs::read(a.join(layout::LEAKS)).unwrap()).unwrap();
    ensure(leaks.len() == 1, format!("{} leak hypotheses", leaks.len()))?;
    let d = leaks[0].distance_from_node_m["IM1"];
    ensure((d - 2.6).abs() <= 0.05, format!("leak {d:.3} m from IM1"))?;
    Ok(format!("image.csv, report.json, leaks.json, topology.json identical; one hypothesis {d:.3} m from IM1"))
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let criteria: [(u32, f64, fn() -> Check); 10] = [
        (1, 1.0, criterion_1),
        (2, 5.0, criterion_2),
        (3, 5.0, criterion_3),
        (4, 60.0, criterion_4),
        (5, 120.0, criterion_5),
        (6, 120.0, criterion_6),
        (7, 60.0, criterion_7),
        (8, 120.0, criterion_8),
        (9, 30.0, criterion_9),
        (10, 240.0, criterion_10),
    ];
    let mut failed = Vec::new();
    for (n, limit, f) in criteria {
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        let (ok, detail) = match result {
            Ok(d) if secs <= limit => (true, d),
            Ok(d) => (false, format!("{d}; took {secs:.1} s, limit {limit} s")),
            Err(e) => (false, e),
        };
        // Straight to the stream so the line shows even when output is captured.
        writeln!(
            std::io::stderr(),
            "criterion {n}: {} [{secs:.2} s / {limit} s] {detail}",
            if ok { "PASS" } else { "FAIL" }
        )
        .unwrap();
        if !ok {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

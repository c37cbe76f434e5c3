//! Acceptance criteria. Each prints one `PASS`/`FAIL` line; the test fails if any does.
//!
//! Set `ACCEPTANCE_ONLY=2,7` to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use quasispec::analysis::{gap_statistic, FeatureSet, GapParams};
use quasispec::calibration::{build_table, correct_frame, level_integrals, superpixel_rgb, BayerPattern, RawFrame};
use quasispec::continuity::{discontinuousness, GradientField, NeighborGraph};
use quasispec::phantom::{generate_scene, residual_stats, score_reconstruction, Phantom, PhantomSpec, PrototypeParams};
use quasispec::reconstruction::{reconstruct_with_progress, IterationRecord, IterationTrace, ReconstructionParams};
use quasispec::rendering::{chromaticity, planck_radiance, planck_spectrum, render_xyz, ColorMatching};
use quasispec::spectral::{presets, simpson_integrate};
use quasispec::{Plane, SpectralCube, Spectrum, WavelengthGrid};

const BIN: &str = env!("CARGO_BIN_EXE_quasispec");

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn selected(id: u32) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|s| s.trim().parse() == Ok(id)),
        Err(_) => true,
    }
}

fn progress(r: &IterationRecord) {
    eprintln!(
        "    iteration {:>2}: mean cost {:.5} converged {}",
        r.iteration, r.mean_cost, r.pixels_converged
    );
}

fn low_contrast_phantom(size: usize, regions: usize, micro_lenses: usize) -> PhantomSpec {
    PhantomSpec {
        height: size,
        width: size,
        regions,
        prototypes: PrototypeParams {
            level_min: 0.45,
            level_max: 0.6,
            separation: 0.15,
            ..PrototypeParams::default()
        },
        micro_lenses,
        ..PhantomSpec::default()
    }
}

fn reconstruct_phantom(phantom: &Phantom, seed: u64) -> (SpectralCube, IterationTrace) {
    let grid = phantom.truth.grid().clone();
    let light = presets::led_rgb_light(&grid);
    let mut params = ReconstructionParams::default();
    params.cmaes.seed = seed;
    reconstruct_with_progress(&phantom.image, &light, &grid, &params, &progress).unwrap()
}

fn quadrature_exactness() -> Verdict {
    let grids = [(450.0, 775.0), (380.0, 780.0), (0.0, 1.0), (-3.0, 7.5)];
    let polys = [
        [1.0, 0.0, 0.0, 0.0],
        [0.3, -2.0, 0.0, 0.0],
        [1.5, 0.2, -0.7, 0.0],
        [-0.4, 1.1, 0.05, 0.8],
        [2.0, -1.0, 3.0, -0.25],
    ];
    let mut worst: f64 = 0.0;
    for (a, b) in grids {
        let grid = WavelengthGrid::new(a, b, 48).unwrap();
        // Centre and scale so the cubic term matters at every range.
        let (mid, half) = ((a + b) / 2.0, (b - a) / 2.0);
        for c in polys {
            let f = |l: f64| {
                let t = (l - mid) / half;
                c[0] + c[1] * t + c[2] * t * t + c[3] * t * t * t
            };
            let anti = |t: f64| half * (c[0] * t + c[1] * t * t / 2.0 + c[2] * t.powi(3) / 3.0 + c[3] * t.powi(4) / 4.0);
            let exact = anti(1.0) - anti(-1.0);
            let got = simpson_integrate(&grid.sample(f), &grid).unwrap();
            worst = worst.max((got - exact).abs() / exact.abs());
        }
    }
    verdict(worst <= 1e-12, format!("max relative error {worst:.2e} (limit 1e-12)"))
}

fn round_trip() -> Verdict {
    let spec = low_contrast_phantom(64, 5, 0);
    let grid = WavelengthGrid::try_from(spec.grid).unwrap();
    let light = presets::led_rgb_light(&grid);
    let phantom = generate_scene(&spec, &light, 2024).unwrap();
    let start = Instant::now();
    let (cube, trace) = reconstruct_phantom(&phantom, 2024);
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let residuals = residual_stats(&cube, &phantom.image, &light, 1e-2).unwrap();
    let score = score_reconstruction(&phantom.truth, &cube).unwrap();
    let iterations = trace.records.len();
    let pass = trace.converged && iterations <= 40 && residuals.fraction_below >= 0.99 && score.median_cosine >= 0.95;
    verdict(
        pass,
        format!(
            "converged {} after {iterations} iterations (limit 40), residual<1e-2 fraction {:.4} (limit 0.99), \
             median cosine {:.4} (limit 0.95), {} outliers, {minutes:.1} min on {} threads",
            trace.converged,
            residuals.fraction_below,
            score.median_cosine,
            trace.outliers.len(),
            rayon::current_num_threads()
        ),
    )
}

fn micro_lenses() -> Verdict {
    let spec = low_contrast_phantom(32, 5, 12);
    let grid = WavelengthGrid::try_from(spec.grid).unwrap();
    let light = presets::led_rgb_light(&grid);
    let phantom = generate_scene(&spec, &light, 77).unwrap();
    let (cube, _) = reconstruct_phantom(&phantom, 77);
    let m = score_reconstruction(&phantom.truth, &cube).unwrap().mask;
    verdict(
        m.precision >= 0.9 && m.recall >= 0.9,
        format!(
            "precision {:.3}, recall {:.3} (limits 0.9) with {} masked, {} injected, gain {}",
            m.precision, m.recall, m.masked, m.expected, spec.micro_lens_gain
        ),
    )
}

fn truth_table() -> Verdict {
    let blank = |w: usize| GradientField {
        d: Plane::filled(1, w, 0.0),
        edges: Plane::filled(1, w, false),
    };
    let adjacent = NeighborGraph::new(&Plane::filled(1, 3, true), 1.0).unwrap();
    let g_adjacent = discontinuousness(0, 1, &adjacent, &blank(3), 0.9).unwrap();

    let wide = NeighborGraph::new(&Plane::filled(1, 3, true), 2.0).unwrap();
    let mut edge = blank(3);
    edge.edges[(0, 1)] = true;
    edge.d[(0, 1)] = 0.5;
    let g_edge = discontinuousness(0, 2, &wide, &edge, 0.9).unwrap();
    let g_plain = discontinuousness(0, 2, &wide, &blank(3), 0.9).unwrap();

    // 1 − 0.9 is not representable, so the edge case carries one rounding step.
    let pass = g_adjacent == 1.0 && (g_edge - 0.025).abs() <= 1e-16 && g_plain == 0.5;
    verdict(pass, format!("G = {g_adjacent}, {g_edge}, {g_plain} (expected 1, 0.025, 0.5)"))
}

fn clustering_gap() -> Verdict {
    let seeds = [11u64, 12, 13, 14, 15];
    let mut spectral = Vec::new();
    let mut raw = Vec::new();
    for seed in seeds {
        let spec = PhantomSpec {
            height: 24,
            width: 24,
            regions: 10,
            spectral_noise: 0.01,
            sensor_noise: 0.002,
            ..PhantomSpec::default()
        };
        let grid = WavelengthGrid::try_from(spec.grid).unwrap();
        let phantom = generate_scene(&spec, &presets::led_rgb_light(&grid), seed).unwrap();
        let (cube, _) = reconstruct_phantom(&phantom, seed);
        let params = GapParams {
            seed,
            ..GapParams::default()
        };
        let gap = |features: &FeatureSet| {
            let e = gap_statistic(features, &[10], &params).unwrap().remove(0);
            (e.gap.expect("gap defined at k = 10"), e.std)
        };
        spectral.push(gap(&FeatureSet::from_cube(&cube)));
        raw.push(gap(&FeatureSet::from_image(&phantom.image)));
        eprintln!("    seed {seed}: spectral {:?}, raw {:?}", spectral.last().unwrap(), raw.last().unwrap());
    }
    let mean = |v: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let (gs, ss) = (mean(&spectral, |e| e.0), mean(&spectral, |e| e.1));
    let (gr, sr) = (mean(&raw, |e| e.0), mean(&raw, |e| e.1));
    let std = ss.max(sr);
    verdict(
        gs - gr >= std,
        format!("mean gap at k=10: spectral {gs:.4}, raw {gr:.4}, difference {:.4} vs simulation std {std:.4}", gs - gr),
    )
}

fn calibration_homogenization() -> Verdict {
    let pattern = BayerPattern::Rggb;
    let fine = WavelengthGrid::new(380.0, 780.0, 401).unwrap();
    let qe: Vec<Vec<f64>> = presets::rgb_quantum_efficiency(&fine).into_iter().map(|(_, v)| v).collect();
    let led = fine.sample(presets::white_led);
    let scaled = |a: f64| led.iter().map(|v| v * a).collect::<Vec<_>>();
    let levels: Vec<Vec<f64>> = [0.05, 0.2, 0.45, 0.7, 1.0].iter().map(|a| scaled(*a)).collect();
    let integrals = level_integrals(&levels, &qe, &fine).unwrap();

    // Per-pixel affine sensor with spread-out gains and offsets.
    let (h, w) = (32, 32);
    let hash = |y: usize, x: usize, k: u64| {
        let v = (y as u64 * 7919 + x as u64 * 104_729 + k * 1_299_709) % 1000;
        v as f64 / 1000.0
    };
    let gain = Plane::from_fn(h, w, |y, x| 300.0 + 600.0 * hash(y, x, 1));
    let offset = Plane::from_fn(h, w, |y, x| 20.0 + 200.0 * hash(y, x, 2));
    let expose = |s: &[f64]| {
        RawFrame::new(
            pattern,
            Plane::from_fn(h, w, |y, x| gain[(y, x)] * s[pattern.channel_at(y, x)] + offset[(y, x)]),
        )
    };
    let stacks: Vec<Vec<RawFrame>> = integrals.iter().map(|s| vec![expose(s)]).collect();
    let table = build_table(&stacks, &integrals, pattern).unwrap();
    let flat = level_integrals(&[scaled(0.58)], &qe, &fine).unwrap().remove(0);
    let corrected = correct_frame(&expose(&flat), &table).unwrap();
    let rgb = superpixel_rgb(&corrected, pattern).unwrap();
    let mut worst: f64 = 0.0;
    for c in 0..3 {
        let v: Vec<f64> = (0..rgb.pixel_count()).map(|i| rgb.pixel_at(i)[c]).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        worst = worst.max(sd / mean);
    }
    verdict(
        worst < 1e-6 && rgb.valid_count() == rgb.pixel_count(),
        format!("worst channel coefficient of variation {worst:.2e} (limit 1e-6)"),
    )
}

fn rendering_sanity() -> Verdict {
    let grid = WavelengthGrid::default();
    let ones = SpectralCube::filled(1, 1, grid.clone(), &Spectrum::constant(1.0, grid.len())).unwrap();
    let illum = planck_spectrum(5800.0, &grid).unwrap();
    let xyz = render_xyz(&ones, &illum, &ColorMatching::cie1931(&grid)).unwrap()[(0, 0)].unwrap();
    let (x, y) = chromaticity(xyz);

    // Oracle: 1 nm sums of the tabulated matching functions over the cube's span.
    let table = ColorMatching::table();
    let mut acc = [0.0; 3];
    for (i, l) in table.wavelengths.iter().enumerate() {
        if (grid.lambda_min()..=grid.lambda_max()).contains(l) {
            let b = planck_radiance(*l, 5800.0);
            for (c, a) in acc.iter_mut().enumerate() {
                *a += b * table.columns[c].1[i];
            }
        }
    }
    let (ox, oy) = chromaticity(acc);
    let white_err = (x - ox).abs().max((y - oy).abs());

    let mut wien_err: f64 = 0.0;
    for t in [4000.0, 5000.0, 5800.0, 6500.0] {
        let s = planck_spectrum(t, &grid).unwrap();
        let peak = s
            .values()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| grid.samples()[i])
            .unwrap();
        wien_err = wien_err.max((peak - 2.898e6 / t).abs() / grid.step());
    }
    verdict(
        white_err <= 0.01 && wien_err <= 1.0,
        format!(
            "chromaticity ({x:.4}, {y:.4}) vs oracle ({ox:.4}, {oy:.4}), error {white_err:.4} (limit 0.01); \
             worst Wien offset {wien_err:.2} grid steps (limit 1)"
        ),
    )
}

/// Runs the binary; a short schedule may legitimately end unconverged (exit 3).
fn cli(args: &[&str], dir: &Path) -> std::process::Output {
    let out = Command::new(BIN).args(args).current_dir(dir).output().unwrap();
    assert!(
        matches!(out.status.code(), Some(0 | 3)),
        "quasispec {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec {
        height: 16,
        width: 16,
        regions: 3,
        sensor_noise: 0.002,
        ..low_contrast_phantom(16, 3, 1)
    };
    std::fs::write(dir.path().join("scene.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    cli(&["phantom", "--spec", "scene.json", "--seed", "5", "--output", "p"], dir.path());
    let mut cubes = Vec::new();
    for threads in ["1", "4", "8"] {
        let out = format!("t{threads}");
        cli(
            &[
                "reconstruct",
                "--image",
                "p/image.qsri",
                "--it-max",
                "4",
                "--seed",
                "5",
                "--threads",
                threads,
                "--output",
                &out,
            ],
            dir.path(),
        );
        cubes.push(std::fs::read(dir.path().join(&out).join("cube.qscb")).unwrap());
    }
    let same = cubes.windows(2).all(|w| w[0] == w[1]);
    verdict(
        same,
        format!("cube files for 1, 4 and 8 threads identical: {same} ({} bytes)", cubes[0].len()),
    )
}

fn parameter_audit() -> Verdict {
    let out = Command::new(BIN).arg("--print-config").output().unwrap();
    let config: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let checks: [(&str, f64); 7] = [
        ("/reconstruction/neighbor_radius", 1.0),
        ("/reconstruction/edge_bias", 0.9),
        ("/reconstruction/edges/sigma", 0.5),
        ("/grid/w", 48.0),
        ("/analysis/k", 10.0),
        ("/reconstruction/schedule/stop_change", 0.01),
        ("/calibration/bright_percentile", 0.99),
    ];
    let mut wrong = Vec::new();
    for (pointer, expected) in checks {
        let got = config.pointer(pointer).and_then(serde_json::Value::as_f64);
        if got != Some(expected) {
            wrong.push(format!("{pointer} = {got:?}"));
        }
    }
    let pass = out.status.success() && wrong.is_empty();
    let detail = if wrong.is_empty() {
        "all seven defaults printed exactly".to_string()
    } else {
        format!("mismatches: {}", wrong.join(", "))
    };
    verdict(pass, detail)
}

#[test]
fn acceptance_criteria() {
    let criteria: [(u32, &str, fn() -> Verdict); 9] = [
        (1, "quadrature exactness", quadrature_exactness),
        (2, "forward/inverse round trip", round_trip),
        (3, "micro-lens masking", micro_lenses),
        (4, "discontinuousness truth table", truth_table),
        (5, "spectral vs raw clustering gap", clustering_gap),
        (6, "calibration homogenization", calibration_homogenization),
        (7, "rendering sanity", rendering_sanity),
        (8, "thread-count determinism", determinism),
        (9, "default parameter audit", parameter_audit),
    ];
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        if !selected(id) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("{tag} [{id}] {name}: {} [{:.1}s]", v.detail, start.elapsed().as_secs_f64());
        if !v.pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

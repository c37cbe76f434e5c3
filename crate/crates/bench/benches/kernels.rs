use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use quasispec::cmaes::{cma_es_minimize, CmaesConfig};
use quasispec::continuity::{canny_edges, gaussian_smooth, pca_grayscale, DEFAULT_CANNY_HIGH, DEFAULT_CANNY_LOW};
use quasispec::phantom::{generate_scene, PhantomSpec};
use quasispec::reconstruction::{data_cost, pixel_cost, reconstruct, ReconstructionParams};
use quasispec::spectral::{presets, simpson_integrate, ForwardModel};
use quasispec::{Spectrum, WavelengthGrid};

fn quadrature(c: &mut Criterion) {
    let grid = WavelengthGrid::default();
    let values = grid.sample(|l| (l / 100.0).sin());
    c.bench_function("simpson_w48", |b| b.iter(|| simpson_integrate(black_box(&values), &grid).unwrap()));
}

fn objective(c: &mut Criterion) {
    let grid = WavelengthGrid::default();
    let light = presets::led_rgb_light(&grid);
    let model = ForwardModel::new(&light, &grid).unwrap();
    let t = grid.sample(|l| 0.4 + 0.2 * (l / 80.0).cos());
    let intensities = model.predict(&t);
    let neighbour = vec![0.5; grid.len()];
    let neighbours: Vec<(&[f64], f64)> = vec![(&neighbour, 1.0); 4];
    let spectrum = Spectrum::new(t.clone()).unwrap();
    c.bench_function("data_cost", |b| b.iter(|| data_cost(&model, black_box(&t), &intensities)));
    c.bench_function("pixel_cost_4_neighbours", |b| {
        b.iter(|| pixel_cost(black_box(&spectrum), &intensities, &neighbours, &light, &grid).unwrap())
    });
}

fn optimizer(c: &mut Criterion) {
    let target: Vec<f64> = (0..48).map(|i| 0.3 + 0.4 * (i as f64 / 47.0)).collect();
    let sphere = |x: &[f64]| x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let config = CmaesConfig {
        max_evaluations: 1500,
        ..CmaesConfig::default()
    };
    c.bench_function("cmaes_sphere_48d_1500_evals", |b| {
        b.iter(|| cma_es_minimize(sphere, black_box(&[0.5; 48]), &config, 1e-12).unwrap())
    });
}

fn edges(c: &mut Criterion) {
    let grid = WavelengthGrid::default();
    let light = presets::led_rgb_light(&grid);
    let phantom = generate_scene(&PhantomSpec::default(), &light, 1).unwrap();
    let gray = gaussian_smooth(&pca_grayscale(&phantom.image), 0.5);
    c.bench_function("canny_64x64", |b| {
        b.iter(|| canny_edges(black_box(&gray), DEFAULT_CANNY_LOW, DEFAULT_CANNY_HIGH))
    });
}

fn reconstruction(c: &mut Criterion) {
    let grid = WavelengthGrid::default();
    let light = presets::led_rgb_light(&grid);
    let spec = PhantomSpec {
        height: 8,
        width: 8,
        regions: 2,
        ..PhantomSpec::default()
    };
    let phantom = generate_scene(&spec, &light, 3).unwrap();
    let mut params = ReconstructionParams::default();
    params.schedule.it_max = 2;
    let mut group = c.benchmark_group("reconstruct");
    group.sample_size(10);
    group.bench_function("8x8_two_iterations", |b| {
        b.iter(|| reconstruct(black_box(&phantom.image), &light, &grid, &params).unwrap())
    });
    group.finish();
}

criterion_group!(benches, quadrature, objective, optimizer, edges, reconstruction);
criterion_main!(benches);

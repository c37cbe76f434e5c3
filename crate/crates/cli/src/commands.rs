//! Subcommand bodies. Each wraps library calls with file I/O through a [`RunLog`].

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use quasispec::analysis::{
    best_focus, class_mean_spectra, class_means_csv, focus_score, gap_csv, gap_statistic, kmeans_cosine, pca_stain,
    FeatureSet, FeatureSource, GapParams,
};
use quasispec::calibration::{
    build_table, correct_frame, level_integrals, mask_bright_pixels, superpixel_rgb, BayerPattern, CalibrationTable,
    RawFrame,
};
use quasispec::image_io;
use quasispec::phantom::{generate_scene, residual_stats, score_reconstruction, Phantom, PhantomSpec};
use quasispec::reconstruction::{reconstruct_with_progress, IterationRecord, IterationTrace};
use quasispec::rendering::{planck_spectrum, render, ColorMatching, Illuminant};
use quasispec::spectral::CurveTable;
use quasispec::{EffectiveLight, Plane, RasterImage, SpectralCube};

use crate::config::{PipelineConfig, WhiteReference};
use crate::errors::{invalid, invalid_input};
use crate::manifest::RunLog;
use crate::Command;

/// Forward residual below which a pixel counts as reproduced.
const RESIDUAL_THRESHOLD: f64 = 1e-2;

#[derive(Debug, Default)]
pub struct Outcome {
    /// `Some(false)` when a reconstruction stopped at `it_max`.
    pub converged: Option<bool>,
}

/// Files a command reads, checked for existence before any work starts.
pub fn inputs<'a>(command: &'a Command, config: &'a PipelineConfig) -> Vec<&'a Path> {
    let mut files: Vec<&Path> = Vec::new();
    let calibration_files = |files: &mut Vec<&'a Path>| {
        for level in &config.calibration.levels {
            files.extend(level.frames.iter().map(PathBuf::as_path));
            files.push(&level.spectrum_csv);
        }
    };
    match command {
        Command::Calibrate => {
            files.extend(config.light_paths());
            calibration_files(&mut files);
        }
        Command::Correct { table, frames } => {
            files.extend(config.light_paths());
            match table.as_ref().or(config.input.table.as_ref()) {
                Some(t) => files.push(t),
                None => calibration_files(&mut files),
            }
            let frames = if frames.is_empty() { &config.input.frames } else { frames };
            files.extend(frames.iter().map(PathBuf::as_path));
        }
        Command::Reconstruct { image, .. } => {
            files.extend(config.light_paths());
            files.push(image);
        }
        Command::Render { cube, .. } => {
            files.push(cube);
            files.extend(config.analysis.illuminant_csv.as_deref());
        }
        Command::Cluster { cube, image, .. } | Command::Gap { cube, image, .. } => {
            files.extend(cube.as_deref());
            files.extend(image.as_deref());
        }
        Command::Phantom { spec } => {
            files.extend(config.light_paths());
            files.extend(spec.as_deref());
        }
        Command::Focus { paths } => files.extend(paths.iter().map(PathBuf::as_path)),
        Command::Score { truth, estimate, image } => {
            files.extend([truth.as_path(), estimate.as_path()]);
            if let Some(image) = image {
                files.push(image);
                files.extend(config.light_paths());
            }
        }
        Command::Run { .. } => files.extend(config.referenced_files()),
        Command::Replay { manifest } => files.push(manifest),
    }
    files
}

pub fn dispatch(command: &Command, config: &PipelineConfig, log: &mut RunLog) -> anyhow::Result<Outcome> {
    match command {
        Command::Calibrate => {
            let table = log.stage("calibrate", |_| calibrate(config))?;
            log.write("table.qsct", |p| Ok(table.save(p)?))?;
        }
        Command::Correct { table, frames } => {
            let frames = if frames.is_empty() { &config.input.frames } else { frames };
            if frames.is_empty() {
                return Err(invalid("correct needs at least one --frame or input.frames"));
            }
            let table = load_or_build_table(config, table.as_deref().or(config.input.table.as_deref()), log)?;
            let image = log.stage("correct", |log| correct_stack(config, &table, frames, log))?;
            log.write("image.qsri", |p| Ok(image.save(p)?))?;
        }
        Command::Reconstruct { image, .. } => {
            let image = load_image(image)?;
            let (_, trace) = reconstruct_stage(config, &image, log)?;
            return Ok(Outcome {
                converged: Some(trace.converged),
            });
        }
        Command::Render { cube, .. } => {
            let cube = load_cube(cube)?;
            log.stage("render", |log| render_stage(config, &cube, log))?;
        }
        Command::Cluster { cube, image, .. } => {
            let (features, cube) = load_features(cube.as_deref(), image.as_deref())?;
            log.stage("cluster", |log| cluster_stage(config, &features, cube.as_ref(), log))?;
        }
        Command::Gap { cube, image, .. } => {
            let (features, _) = load_features(cube.as_deref(), image.as_deref())?;
            log.stage("gap", |log| gap_stage(config, &features, log))?;
        }
        Command::Phantom { spec } => {
            let spec = match spec {
                Some(path) => PhantomSpec::load(path).map_err(|e| invalid_input("phantom spec", path, e))?,
                None => config.input.phantom.clone().unwrap_or_default(),
            };
            phantom_stage(config, &spec, log)?;
        }
        Command::Focus { paths } => {
            let files = focus_files(paths)?;
            let stack = files.iter().map(|f| load_image(f)).collect::<anyhow::Result<Vec<_>>>()?;
            let report = log.stage("focus", |_| Ok(focus_report(&files, &stack)))?;
            println!("{}", report.best);
            log.write_json("focus.json", &report)?;
        }
        Command::Score { truth, estimate, image } => {
            let truth = load_cube(truth)?;
            let estimate = load_cube(estimate)?;
            let image = image.as_deref().map(load_image).transpose()?;
            score_stage(config, &truth, &estimate, image.as_ref(), log)?;
        }
        Command::Run { .. } => return run_pipeline(config, log),
        Command::Replay { .. } => unreachable!("replay is resolved before dispatch"),
    }
    Ok(Outcome::default())
}

fn load_cube(path: &Path) -> anyhow::Result<SpectralCube> {
    SpectralCube::load(path).map_err(|e| invalid_input("cube", path, e))
}

/// A `.qsri` raster, or an 8-bit RGB PNG scaled to `[0, 1]`.
fn load_image(path: &Path) -> anyhow::Result<RasterImage> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let (h, w, data) = image_io::read_rgb8(path).map_err(|e| invalid_input("image", path, e))?;
        let values = data.into_iter().map(|v| f64::from(v) / 255.0).collect();
        return Ok(RasterImage::unmasked(h, w, 3, values)?);
    }
    RasterImage::load(path).map_err(|e| invalid_input("image", path, e))
}

fn load_features(cube: Option<&Path>, image: Option<&Path>) -> anyhow::Result<(FeatureSet, Option<SpectralCube>)> {
    match (cube, image) {
        (Some(path), None) => {
            let cube = load_cube(path)?;
            Ok((FeatureSet::from_cube(&cube), Some(cube)))
        }
        (None, Some(path)) => Ok((FeatureSet::from_image(&load_image(path)?), None)),
        _ => Err(invalid("give exactly one of --cube and --image")),
    }
}

fn source_name(source: FeatureSource) -> &'static str {
    match source {
        FeatureSource::Raw => "raw",
        FeatureSource::Spectral => "spectral",
    }
}

fn light(config: &PipelineConfig) -> anyhow::Result<EffectiveLight> {
    config.effective_light(&config.grid()?)
}

fn calibrate(config: &PipelineConfig) -> anyhow::Result<CalibrationTable> {
    let cal = &config.calibration;
    if cal.levels.len() < 2 {
        return Err(invalid("calibration needs at least two entries in calibration.levels"));
    }
    let fine = config.fine_grid()?;
    let (_, qe) = config.light_curves(&fine)?;
    if qe.len() != cal.pattern.channel_count() {
        return Err(invalid(format!(
            "{} quantum-efficiency curves for a {}-channel sensor",
            qe.len(),
            cal.pattern.channel_count()
        )));
    }
    let qe: Vec<Vec<f64>> = qe.into_iter().map(|(_, v)| v).collect();
    let mut spectra = Vec::with_capacity(cal.levels.len());
    let mut stacks = Vec::with_capacity(cal.levels.len());
    for level in &cal.levels {
        if level.frames.is_empty() {
            return Err(invalid("every calibration level needs at least one frame"));
        }
        let table = CurveTable::load_csv(&level.spectrum_csv)
            .map_err(|e| invalid_input("level spectrum", &level.spectrum_csv, e))?;
        spectra.push(table.resample(0, &fine));
        let frames = level
            .frames
            .iter()
            .map(|f| RawFrame::load(f, cal.pattern).map_err(|e| invalid_input("raw frame", f, e)))
            .collect::<anyhow::Result<Vec<_>>>()?;
        stacks.push(frames);
    }
    let integrals = level_integrals(&spectra, &qe, &fine)?;
    Ok(build_table(&stacks, &integrals, cal.pattern)?)
}

fn load_or_build_table(config: &PipelineConfig, path: Option<&Path>, log: &mut RunLog) -> anyhow::Result<CalibrationTable> {
    match path {
        Some(path) => CalibrationTable::load(path).map_err(|e| invalid_input("calibration table", path, e)),
        None => {
            let table = log.stage("calibrate", |_| calibrate(config))?;
            log.write("table.qsct", |p| Ok(table.save(p)?))?;
            Ok(table)
        }
    }
}

#[derive(Debug, Serialize)]
struct FocusReport {
    files: Vec<PathBuf>,
    scores: Vec<f64>,
    best: usize,
}

fn focus_report(files: &[PathBuf], stack: &[RasterImage]) -> FocusReport {
    FocusReport {
        files: files.to_vec(),
        scores: stack.iter().map(focus_score).collect(),
        best: best_focus(stack).expect("stack is not empty"),
    }
}

/// A single directory expands to its `.png` and `.qsri` files in name order.
fn focus_files(paths: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let files = match paths {
        [dir] if dir.is_dir() => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .with_context(|| format!("listing {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("qsri"))
                })
                .collect();
            files.sort();
            files
        }
        _ => paths.to_vec(),
    };
    if files.is_empty() {
        return Err(invalid("focus found no images"));
    }
    Ok(files)
}

/// Per-channel divisor mapping corrected values onto the white level.
fn white_levels(config: &PipelineConfig, table: &CalibrationTable, image: &RasterImage) -> anyhow::Result<Vec<f64>> {
    match config.calibration.white_reference {
        WhiteReference::Light => {
            let fine = config.fine_grid()?;
            let (source, qe) = config.light_curves(&fine)?;
            let qe: Vec<Vec<f64>> = qe.into_iter().map(|(_, v)| v).collect();
            let white = level_integrals(&[source], &qe, &fine)?.remove(0);
            // Corrected frames are in units of the table's largest level integral.
            Ok(white.into_iter().map(|w| w / table.max_s()).collect())
        }
        WhiteReference::BrightField => (0..image.channels())
            .map(|c| {
                let max = (0..image.pixel_count())
                    .filter(|i| image.mask().as_slice()[*i])
                    .map(|i| image.pixel_at(i)[c])
                    .fold(0.0, f64::max);
                if max > 0.0 {
                    Ok(max)
                } else {
                    Err(invalid(format!("channel {c} has no positive unmasked value")))
                }
            })
            .collect(),
    }
}

fn correct_stack(
    config: &PipelineConfig,
    table: &CalibrationTable,
    frames: &[PathBuf],
    log: &mut RunLog,
) -> anyhow::Result<RasterImage> {
    let pattern = table.pattern();
    let mut stack = Vec::with_capacity(frames.len());
    for path in frames {
        let raw = RawFrame::load(path, pattern).map_err(|e| invalid_input("raw frame", path, e))?;
        if raw.pattern != pattern {
            return Err(invalid_input("raw frame", path, "Bayer pattern differs from the calibration table"));
        }
        let corrected = correct_frame(&raw, table).map_err(|e| invalid_input("raw frame", path, e))?;
        stack.push(match pattern {
            BayerPattern::Mono => corrected,
            _ => superpixel_rgb(&corrected, pattern)?,
        });
    }
    let report = focus_report(frames, &stack);
    if frames.len() > 1 {
        eprintln!("focus: frame {} of {} is sharpest", report.best, frames.len());
    }
    log.write_json("focus.json", &report)?;
    let masked = mask_bright_pixels(&stack[report.best], config.calibration.bright_percentile)?;
    let white = white_levels(config, table, &masked)?;
    let c = masked.channels();
    let values = masked
        .intensities()
        .iter()
        .enumerate()
        .map(|(i, v)| v / white[i % c])
        .collect();
    Ok(RasterImage::new(
        masked.height(),
        masked.width(),
        c,
        values,
        masked.mask().clone(),
    )?)
}

fn print_progress(r: &IterationRecord) {
    eprintln!(
        "iteration {:>3}: tol {:.4}  mean cost {:.6}  cv {:.3}  converged {}  evaluations {}",
        r.iteration, r.tolerance, r.mean_cost, r.cost_cv, r.pixels_converged, r.evaluations
    );
}

fn reconstruct_stage(
    config: &PipelineConfig,
    image: &RasterImage,
    log: &mut RunLog,
) -> anyhow::Result<(SpectralCube, IterationTrace)> {
    let grid = config.grid()?;
    let light = light(config)?;
    if image.channels() != light.channel_count() {
        return Err(invalid(format!(
            "image has {} channels but the light has {}",
            image.channels(),
            light.channel_count()
        )));
    }
    let (cube, trace) = log.stage("reconstruct", |_| {
        Ok(reconstruct_with_progress(
            image,
            &light,
            &grid,
            &config.reconstruction,
            &print_progress,
        )?)
    })?;
    if !trace.converged {
        eprintln!(
            "warning: mean cost change stayed above {} for {} iterations",
            config.reconstruction.schedule.stop_change,
            trace.records.len()
        );
    }
    log.write("cube.qscb", |p| Ok(cube.save(p)?))?;
    log.write_text("trace.csv", &trace.to_csv())?;
    log.write_json("outliers.json", &trace.outliers)?;
    Ok((cube, trace))
}

fn render_stage(config: &PipelineConfig, cube: &SpectralCube, log: &mut RunLog) -> anyhow::Result<()> {
    let grid = cube.grid();
    let illuminant = match &config.analysis.illuminant_csv {
        Some(path) => Illuminant::from_csv(path, grid).map_err(|e| invalid_input("illuminant", path, e))?,
        None => planck_spectrum(config.analysis.temperature, grid)?,
    };
    let rgb = render(cube, &illuminant, &ColorMatching::cie1931(grid))?;
    log.write("render.png", |p| Ok(rgb.save_png(p)?))?;
    Ok(())
}

fn cluster_stage(
    config: &PipelineConfig,
    features: &FeatureSet,
    cube: Option<&SpectralCube>,
    log: &mut RunLog,
) -> anyhow::Result<()> {
    let name = source_name(features.source);
    let k = config.analysis.k;
    if k >= 255 {
        return Err(invalid("cluster maps hold at most 254 classes"));
    }
    let clusters = kmeans_cosine(features, k, config.seed).map_err(|e| invalid(format!("clustering: {e}")))?;
    log.write(&format!("clusters_{name}.png"), |p| {
        Ok(image_io::write_labels(p, &clusters.label_image)?)
    })?;
    let components = config.analysis.stain_components.min(features.dim);
    let stain = pca_stain(features, components)?;
    log.write(&format!("stain_{name}.png"), |p| Ok(stain.save_png(p)?))?;
    if let Some(cube) = cube {
        let means = class_mean_spectra(cube, &clusters)?;
        log.write_text("class_means.csv", &class_means_csv(cube.grid(), &means))?;
    }
    Ok(())
}

fn gap_stage(config: &PipelineConfig, features: &FeatureSet, log: &mut RunLog) -> anyhow::Result<()> {
    let a = &config.analysis;
    let k_max = a.gap_k_max.min(features.len());
    if k_max < a.gap_k_min {
        return Err(invalid(format!(
            "{} feature rows cannot be split into {} clusters",
            features.len(),
            a.gap_k_min
        )));
    }
    let ks: Vec<usize> = (a.gap_k_min..=k_max).collect();
    let params = GapParams {
        n_refs: a.gap_references,
        max_points: a.gap_max_points,
        seed: config.seed,
    };
    let entries = gap_statistic(features, &ks, &params)?;
    log.write_text(&format!("gap_{}.csv", source_name(features.source)), &gap_csv(&entries))?;
    Ok(())
}

fn phantom_stage(config: &PipelineConfig, spec: &PhantomSpec, log: &mut RunLog) -> anyhow::Result<Phantom> {
    if spec.grid != config.grid {
        return Err(invalid("phantom grid differs from the pipeline grid"));
    }
    let light = light(config)?;
    let phantom = log.stage("phantom", |_| Ok(generate_scene(spec, &light, config.seed)?))?;
    log.write("truth.qscb", |p| Ok(phantom.truth.save(p)?))?;
    log.write("image.qsri", |p| Ok(phantom.image.save(p)?))?;
    log.write_json("scene.json", &phantom.scene)?;
    let labels = Plane::from_vec(
        spec.height,
        spec.width,
        phantom.scene.labels.as_slice().iter().map(|l| Some(*l)).collect(),
    );
    log.write("labels.png", |p| Ok(image_io::write_labels(p, &labels)?))?;
    Ok(phantom)
}

fn score_stage(
    config: &PipelineConfig,
    truth: &SpectralCube,
    estimate: &SpectralCube,
    image: Option<&RasterImage>,
    log: &mut RunLog,
) -> anyhow::Result<()> {
    let mut report = score_reconstruction(truth, estimate).map_err(|e| invalid(format!("score: {e}")))?;
    if let Some(image) = image {
        let light = config.effective_light(estimate.grid())?;
        report.residuals = Some(residual_stats(estimate, image, &light, RESIDUAL_THRESHOLD)?);
    }
    println!("median cosine similarity: {:.6}", report.median_cosine);
    log.write_json("score.json", &report)?;
    Ok(())
}

/// Input, reconstruction, rendering, clustering and gap analysis in one go.
pub fn run_pipeline(config: &PipelineConfig, log: &mut RunLog) -> anyhow::Result<Outcome> {
    let input = &config.input;
    let (image, phantom) = match (&input.phantom, input.frames.is_empty()) {
        (Some(_), false) => return Err(invalid("set either input.phantom or input.frames, not both")),
        (None, true) => return Err(invalid("run needs input.phantom or input.frames")),
        (Some(spec), true) => {
            let phantom = phantom_stage(config, spec, log)?;
            (phantom.image.clone(), Some(phantom))
        }
        (None, false) => {
            if input.table.is_none() && config.calibration.levels.len() < 2 {
                return Err(invalid("raw input needs input.table or calibration.levels"));
            }
            let table = load_or_build_table(config, input.table.as_deref(), log)?;
            let image = log.stage("correct", |log| correct_stack(config, &table, &input.frames, log))?;
            log.write("image.qsri", |p| Ok(image.save(p)?))?;
            (image, None)
        }
    };
    let (cube, trace) = reconstruct_stage(config, &image, log)?;
    log.stage("render", |log| render_stage(config, &cube, log))?;
    let spectral = FeatureSet::from_cube(&cube);
    let raw = FeatureSet::from_image(&image);
    log.stage("cluster", |log| {
        cluster_stage(config, &spectral, Some(&cube), log)?;
        cluster_stage(config, &raw, None, log)
    })?;
    log.stage("gap", |log| {
        gap_stage(config, &spectral, log)?;
        gap_stage(config, &raw, log)
    })?;
    if let Some(phantom) = phantom {
        score_stage(config, &phantom.truth, &cube, Some(&image), log)?;
    }
    Ok(Outcome {
        converged: Some(trace.converged),
    })
}

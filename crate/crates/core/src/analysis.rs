//! Unsupervised comparison of raw and spectral pixel features: spherical
//! k-means, the gap statistic, PCA staining and focus selection.

use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::SpectralCube;
use crate::error::{Error, Result};
use crate::linalg::PrincipalAxes;
use crate::plane::Plane;
use crate::raster::RasterImage;
use crate::rendering::RgbImage;
use crate::spectral::Spectrum;

pub const DEFAULT_CLUSTERS: usize = 10;
pub const DEFAULT_REFERENCES: usize = 10;
pub const DEFAULT_GAP_SUBSAMPLE: usize = 50_000;
pub const MAX_KMEANS_ROUNDS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Raw,
    Spectral,
}

/// One feature row per analysable pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub source: FeatureSource,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Row-major `n × dim`.
    pub features: Vec<f64>,
    /// Flat pixel index of every row.
    pub pixels: Vec<usize>,
}

impl FeatureSet {
    /// Channel intensities of unmasked pixels with non-zero norm.
    pub fn from_image(image: &RasterImage) -> Self {
        Self::collect(
            FeatureSource::Raw,
            image.height(),
            image.width(),
            image.channels(),
            (0..image.pixel_count()).filter(|i| image.mask().as_slice()[*i]).map(|i| (i, image.pixel_at(i))),
        )
    }

    /// Spectra of unmasked pixels with non-zero norm.
    pub fn from_cube(cube: &SpectralCube) -> Self {
        Self::collect(
            FeatureSource::Spectral,
            cube.height(),
            cube.width(),
            cube.samples(),
            (0..cube.pixel_count()).filter(|i| cube.is_valid(*i)).map(|i| (i, cube.spectrum_at(i))),
        )
    }

    /// Free-standing rows laid out as a `1 × n` image.
    pub fn from_rows(source: FeatureSource, dim: usize, features: Vec<f64>) -> Result<Self> {
        if dim == 0 || features.len() % dim != 0 {
            return Err(Error::contract("feature length is not a multiple of the dimension"));
        }
        let n = features.len() / dim;
        Ok(Self {
            source,
            height: 1,
            width: n,
            dim,
            features,
            pixels: (0..n).collect(),
        })
    }

    fn collect<'a>(
        source: FeatureSource,
        height: usize,
        width: usize,
        dim: usize,
        rows: impl Iterator<Item = (usize, &'a [f64])>,
    ) -> Self {
        let mut features = Vec::new();
        let mut pixels = Vec::new();
        for (i, row) in rows {
            if row.iter().any(|v| *v != 0.0) {
                features.extend_from_slice(row);
                pixels.push(i);
            }
        }
        Self {
            source,
            height,
            width,
            dim,
            features,
            pixels,
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.features.chunks_exact(self.dim)
    }

    fn subset(&self, rows: &[usize]) -> Self {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Self {
            source: self.source,
            height: self.height,
            width: self.width,
            dim: self.dim,
            features,
            pixels: rows.iter().map(|r| self.pixels[*r]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub k: usize,
    /// Cluster of each feature row.
    pub labels: Vec<usize>,
    /// Unit-norm centroids.
    pub centroids: Vec<Vec<f64>>,
    /// `Σ (1 − cos)` between rows and their centroids.
    pub inertia: f64,
    pub rounds: usize,
    /// Per-pixel labels; `None` for pixels not in the feature set.
    pub label_image: Plane<Option<usize>>,
}

fn unit_rows(features: &FeatureSet) -> Vec<f64> {
    let mut out = features.features.clone();
    for row in out.chunks_exact_mut(features.dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Spherical k-means with cosine similarity.
///
/// Rows are L2-normalized, assignment goes to the most similar centroid and
/// centroids are re-normalized means. Seeding is k-means++ on the cosine
/// distance. An emptied cluster is re-seeded with the row farthest from its
/// own centroid.
pub fn kmeans_cosine(features: &FeatureSet, k: usize, seed: u64) -> Result<ClusterResult> {
    let n = features.len();
    let dim = features.dim;
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    if n < k {
        return Err(Error::contract(format!("{n} feature rows cannot form {k} clusters")));
    }
    if features.rows().any(|r| r.iter().all(|v| *v == 0.0)) {
        return Err(Error::contract("feature rows must have non-zero norm"));
    }
    let units = unit_rows(features);
    let row = |i: usize| &units[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(row(rng.random_range(0..n)).to_vec());
    let mut nearest: Vec<f64> = (0..n).map(|i| (1.0 - dot(row(i), &centroids[0])).max(0.0)).collect();
    while centroids.len() < k {
        let weights: Vec<f64> = nearest.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min((1.0 - dot(row(i), &c)).max(0.0));
        }
        centroids.push(c);
    }

    let mut labels = vec![usize::MAX; n];
    let mut rounds = 0;
    loop {
        rounds += 1;
        let assigned: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut best = (0, f64::NEG_INFINITY);
                for (c, centroid) in centroids.iter().enumerate() {
                    let s = dot(row(i), centroid);
                    if s > best.1 {
                        best = (c, s);
                    }
                }
                best
            })
            .collect();
        let changed = assigned.iter().zip(&labels).any(|(a, l)| a.0 != *l);
        for (l, a) in labels.iter_mut().zip(&assigned) {
            *l = a.0;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Farthest row from its current centroid, among clusters that can spare one.
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .map(|i| (i, 1.0 - dot(row(i), &centroids[labels[i]])))
                .fold((usize::MAX, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
                .0;
            let old = labels[far];
            counts[old] -= 1;
            for (s, v) in sums[old].iter_mut().zip(row(far)) {
                *s -= v;
            }
            labels[far] = c;
            counts[c] = 1;
            sums[c] = row(far).to_vec();
            reseeded = true;
        }
        for c in 0..k {
            centroids[c] = normalized(sums[c].clone());
        }
        if (!changed && !reseeded) || rounds >= MAX_KMEANS_ROUNDS {
            break;
        }
    }

    let inertia = (0..n).map(|i| (1.0 - dot(row(i), &centroids[labels[i]])).max(0.0)).sum();
    let mut label_image = Plane::filled(features.height, features.width, None);
    for (i, p) in features.pixels.iter().enumerate() {
        label_image.as_mut_slice()[*p] = Some(labels[i]);
    }
    Ok(ClusterResult {
        k,
        labels,
        centroids,
        inertia,
        rounds,
        label_image,
    })
}

/// Pooled within-cluster dispersion `W_k = Σ_r D_r / (2 n_r)`, where `D_r`
/// sums the cosine distance over all ordered pairs of cluster `r`.
///
/// For unit rows `D_r = n_r² − |Σ u|²`, so this runs in linear time.
pub fn within_dispersion(features: &FeatureSet, labels: &[usize], k: usize) -> f64 {
    let units = unit_rows(features);
    let dim = features.dim;
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, l) in labels.iter().enumerate() {
        counts[*l] += 1;
        for (s, v) in sums[*l].iter_mut().zip(&units[i * dim..(i + 1) * dim]) {
            *s += v;
        }
    }
    (0..k)
        .filter(|c| counts[*c] > 0)
        .map(|c| {
            let n = counts[c] as f64;
            ((n * n - dot(&sums[c], &sums[c])) / (2.0 * n)).max(0.0)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub k: usize,
    /// `None` when the data's dispersion vanishes and the log is undefined.
    pub gap: Option<f64>,
    /// Simulation error `sd_k · sqrt(1 + 1/B)`.
    pub std: f64,
    pub log_w: f64,
    pub reference_log_w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapParams {
    pub n_refs: usize,
    /// Rows beyond this are subsampled (without replacement) before clustering.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for GapParams {
    fn default() -> Self {
        Self {
            n_refs: DEFAULT_REFERENCES,
            max_points: DEFAULT_GAP_SUBSAMPLE,
            seed: 0,
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Gap statistic with references drawn uniformly from the data's per-dimension
/// bounding box.
pub fn gap_statistic(features: &FeatureSet, ks: &[usize], params: &GapParams) -> Result<Vec<GapEntry>> {
    if params.n_refs == 0 {
        return Err(Error::contract("gap statistic needs at least one reference set"));
    }
    if params.max_points == 0 {
        return Err(Error::contract("subsample cap must be positive"));
    }
    let data = if features.len() > params.max_points {
        let mut chosen = index::sample(&mut stream(params.seed, 0), features.len(), params.max_points).into_vec();
        chosen.sort_unstable();
        features.subset(&chosen)
    } else {
        features.clone()
    };
    let n = data.len();
    let dim = data.dim;
    if let Some(&k) = ks.iter().find(|k| **k == 0 || **k > n) {
        return Err(Error::contract(format!("cannot evaluate k = {k} on {n} rows")));
    }
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for r in data.rows() {
        for d in 0..dim {
            lo[d] = lo[d].min(r[d]);
            hi[d] = hi[d].max(r[d]);
        }
    }

    let references: Vec<FeatureSet> = (0..params.n_refs)
        .map(|b| {
            let mut rng = stream(params.seed, 1 + b as u64);
            let mut rows = Vec::with_capacity(n * dim);
            while rows.len() < n * dim {
                let row: Vec<f64> = (0..dim)
                    .map(|d| if hi[d] > lo[d] { rng.random_range(lo[d]..hi[d]) } else { lo[d] })
                    .collect();
                // Zero rows have no direction; redraw them.
                if row.iter().any(|v| *v != 0.0) {
                    rows.extend(row);
                }
            }
            FeatureSet::from_rows(data.source, dim, rows).expect("rows are whole")
        })
        .collect();

    ks.iter()
        .map(|&k| {
            let fit = kmeans_cosine(&data, k, params.seed ^ (k as u64) << 32)?;
            let w = within_dispersion(&data, &fit.labels, k);
            let ref_logs: Vec<f64> = references
                .par_iter()
                .enumerate()
                .map(|(b, r)| {
                    let fit = kmeans_cosine(r, k, params.seed ^ ((k as u64) << 32) ^ (b as u64 + 1))?;
                    Ok(within_dispersion(r, &fit.labels, k).ln())
                })
                .collect::<Result<_>>()?;
            let b = ref_logs.len() as f64;
            let mean = ref_logs.iter().sum::<f64>() / b;
            let sd = (ref_logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b).sqrt();
            let log_w = w.ln();
            Ok(GapEntry {
                k,
                // Round-off leaves a tiny positive dispersion on identical rows.
                gap: (w > 1e-12 * n as f64).then(|| mean - log_w),
                std: sd * (1.0 + 1.0 / b).sqrt(),
                log_w,
                reference_log_w: mean,
            })
        })
        .collect()
}

/// `k,gap,std` rows; undefined gaps are written as `nan`.
pub fn gap_csv(entries: &[GapEntry]) -> String {
    let mut out = String::from("k,gap,std\n");
    for e in entries {
        let _ = writeln!(out, "{},{},{}", e.k, e.gap.unwrap_or(f64::NAN), e.std);
    }
    out
}

/// False-colour image from the leading principal components, each mapped
/// affinely onto `0..=255`. Pixels outside the feature set are black.
pub fn pca_stain(features: &FeatureSet, n_components: usize) -> Result<RgbImage> {
    if n_components == 0 || n_components > 3 {
        return Err(Error::contract("staining uses one to three components"));
    }
    if features.dim < n_components {
        return Err(Error::contract("fewer feature dimensions than components"));
    }
    let pca = PrincipalAxes::fit(features.rows(), features.dim)
        .ok_or_else(|| Error::DegenerateData("staining needs at least two rows".into()))?;
    let mut data = vec![0u8; features.height * features.width * 3];
    for c in 0..n_components {
        let proj: Vec<f64> = features.rows().map(|r| pca.project(r, c)).collect();
        let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        // Spread below round-off of the projection counts as constant.
        let tiny = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
        for (p, v) in features.pixels.iter().zip(&proj) {
            let t = if span > tiny { (v - lo) / span } else { 0.0 };
            data[3 * p + c] = (t * 255.0).round() as u8;
        }
    }
    Ok(RgbImage {
        height: features.height,
        width: features.width,
        data,
    })
}

/// Projection onto the first principal axis without rescaling, so that
/// contrast stays comparable across images of a stack.
fn principal_gray(image: &RasterImage) -> Plane<f64> {
    if image.channels() == 1 {
        return image.channel_plane(0);
    }
    let rows = (0..image.pixel_count()).filter(|i| image.mask().as_slice()[*i]).map(|i| image.pixel_at(i));
    match PrincipalAxes::fit(rows, image.channels()) {
        Some(pca) if pca.variances[0] > 0.0 => {
            let axis = &pca.axes[0];
            Plane::from_fn(image.height(), image.width(), |y, x| dot(axis, image.pixel(y, x)))
        }
        _ => image.channel_mean(),
    }
}

/// Mean 3×3 local variance of the principal grayscale over unmasked pixels.
/// Windows are clipped at the border and skip masked neighbours.
pub fn focus_score(image: &RasterImage) -> f64 {
    let gray = principal_gray(image);
    let mask = image.mask();
    let (h, w) = (image.height(), image.width());
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !mask[(y, x)] {
                continue;
            }
            let mut window = [0.0; 9];
            let mut m = 0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    if mask[(yy, xx)] {
                        window[m] = gray[(yy, xx)];
                        m += 1;
                    }
                }
            }
            // Shifted by the first value so a flat window is exactly zero.
            let shifted: Vec<f64> = window[..m].iter().map(|v| v - window[0]).collect();
            let mean = shifted.iter().sum::<f64>() / m as f64;
            total += shifted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Index of the sharpest image of a stack; the first one wins ties.
pub fn best_focus(stack: &[RasterImage]) -> Option<usize> {
    let scores: Vec<f64> = stack.par_iter().map(focus_score).collect();
    scores
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, s)| match best {
            Some((_, b)) if *s <= b => best,
            _ => Some((i, *s)),
        })
        .map(|(i, _)| i)
}

/// Mean spectrum of each cluster over the cube's unmasked pixels.
/// Clusters without such pixels are `None`.
pub fn class_mean_spectra(cube: &SpectralCube, clusters: &ClusterResult) -> Result<Vec<Option<Spectrum>>> {
    if clusters.label_image.height() != cube.height() || clusters.label_image.width() != cube.width() {
        return Err(Error::contract("label image and cube sizes differ"));
    }
    let w = cube.samples();
    let mut sums = vec![vec![0.0; w]; clusters.k];
    let mut counts = vec![0usize; clusters.k];
    for (i, label) in clusters.label_image.as_slice().iter().enumerate() {
        let Some(l) = label else { continue };
        if !cube.is_valid(i) {
            continue;
        }
        counts[*l] += 1;
        for (s, v) in sums[*l].iter_mut().zip(cube.spectrum_at(i)) {
            *s += v;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| Spectrum::clamped(s.into_iter().map(|v| v / n as f64).collect())))
        .collect())
}

/// `wavelength_nm,class_0,...` table of class means; excluded classes are omitted.
pub fn class_means_csv(grid: &crate::spectral::WavelengthGrid, means: &[Option<Spectrum>]) -> String {
    let mut out = String::from("wavelength_nm");
    for (c, m) in means.iter().enumerate() {
        if m.is_some() {
            let _ = write!(out, ",class_{c}");
        }
    }
    out.push('\n');
    for (i, l) in grid.samples().iter().enumerate() {
        let _ = write!(out, "{l}");
        for m in means.iter().flatten() {
            let _ = write!(out, ",{}", m.values()[i]);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuity::gaussian_smooth;
    use crate::spectral::WavelengthGrid;
    use proptest::{prop_assert_eq, proptest};
    use rand_distr::{Distribution, Normal};

    fn bundles(k: usize, per: usize, dim: usize, seed: u64) -> (FeatureSet, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for c in 0..k {
            for _ in 0..per {
                for d in 0..dim {
                    let base = if d == c { 1.0 } else { 0.0 };
                    rows.push(base + rng.random_range(0.0..0.05));
                }
                truth.push(c);
            }
        }
        (FeatureSet::from_rows(FeatureSource::Raw, dim, rows).unwrap(), truth)
    }

    /// Fraction of rows whose label matches the truth under the best relabelling.
    fn agreement(labels: &[usize], truth: &[usize], k: usize) -> f64 {
        let mut table = vec![vec![0usize; k]; k];
        for (l, t) in labels.iter().zip(truth) {
            table[*l][*t] += 1;
        }
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = 0;
        permute(&mut perm, 0, &mut |p| {
            best = best.max((0..k).map(|l| table[l][p[l]]).sum());
        });
        best as f64 / labels.len() as f64
    }

    fn permute(p: &mut Vec<usize>, i: usize, f: &mut impl FnMut(&[usize])) {
        if i == p.len() {
            f(p);
            return;
        }
        for j in i..p.len() {
            p.swap(i, j);
            permute(p, i + 1, f);
            p.swap(i, j);
        }
    }

    #[test]
    fn orthogonal_bundles_are_recovered_exactly() {
        let (f, truth) = bundles(4, 30, 4, 1);
        let r = kmeans_cosine(&f, 4, 3).unwrap();
        assert_eq!(agreement(&r.labels, &truth, 4), 1.0);
        for c in &r.centroids {
            assert!((dot(c, c) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_points_form_one_cluster_without_inertia() {
        let f = FeatureSet::from_rows(FeatureSource::Raw, 3, [0.2, 0.5, 0.1].repeat(20)).unwrap();
        let r = kmeans_cosine(&f, 1, 0).unwrap();
        assert!(r.labels.iter().all(|l| *l == 0));
        assert!(r.inertia.abs() < 1e-12);
    }

    #[test]
    fn too_few_rows_is_a_contract_violation() {
        let f = FeatureSet::from_rows(FeatureSource::Raw, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(kmeans_cosine(&f, 3, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn every_cluster_stays_populated() {
        // Five distinct directions but heavy duplication pushes seeding into ties.
        let mut rows = [1.0, 0.0, 0.0].repeat(50);
        rows.extend([0.0, 1.0, 0.0].repeat(3));
        rows.extend([0.0, 0.0, 1.0, 0.7, 0.7, 0.0, 0.0, 0.7, 0.7]);
        let f = FeatureSet::from_rows(FeatureSource::Raw, 3, rows).unwrap();
        for seed in 0..20 {
            let r = kmeans_cosine(&f, 5, seed).unwrap();
            for c in 0..5 {
                assert!(r.labels.contains(&c), "seed {seed}: cluster {c} empty");
            }
        }
    }

    #[test]
    fn perturbed_prototypes_are_recovered() {
        let grid = WavelengthGrid::default();
        let protos: Vec<Vec<f64>> = vec![
            grid.sample(|l| 0.2 + 0.6 * ((l - 450.0) / 325.0)),
            grid.sample(|l| 0.8 - 0.6 * ((l - 450.0) / 325.0)),
            grid.sample(|l| 0.3 + 0.5 * (-((l - 600.0) / 40.0f64).powi(2)).exp()),
        ];
        let noise = Normal::new(0.0, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..600 {
            let c = i % 3;
            rows.extend(protos[c].iter().map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            truth.push(c);
        }
        let f = FeatureSet::from_rows(FeatureSource::Spectral, 48, rows).unwrap();
        let r = kmeans_cosine(&f, 3, 9).unwrap();
        assert!(agreement(&r.labels, &truth, 3) >= 0.99);
    }

    proptest! {
        #[test]
        fn labels_ignore_positive_row_scaling(
            scales in proptest::collection::vec(0.1f64..10.0, 90),
            seed in 0u64..1000,
        ) {
            let (f, _) = bundles(3, 30, 5, seed);
            let mut scaled = f.clone();
            for (row, s) in scaled.features.chunks_exact_mut(5).zip(&scales) {
                for v in row {
                    *v *= s;
                }
            }
            let a = kmeans_cosine(&f, 3, seed).unwrap();
            let b = kmeans_cosine(&scaled, 3, seed).unwrap();
            prop_assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn dispersion_matches_pairwise_definition() {
        let (f, _) = bundles(2, 7, 3, 2);
        let labels: Vec<usize> = (0..14).map(|i| (i * 5 % 3) % 2).collect();
        let units = unit_rows(&f);
        let u = |i: usize| &units[i * 3..i * 3 + 3];
        let mut oracle = 0.0;
        for c in 0..2 {
            let members: Vec<usize> = (0..14).filter(|i| labels[*i] == c).collect();
            let mut d = 0.0;
            for &i in &members {
                for &j in &members {
                    d += 1.0 - dot(u(i), u(j));
                }
            }
            oracle += d / (2.0 * members.len() as f64);
        }
        assert!((within_dispersion(&f, &labels, 2) - oracle).abs() < 1e-12);
    }

    #[test]
    fn tight_cluster_prefers_one_group() {
        // Monte Carlo oracle at small n: a single tight bundle against a
        // uniform box gains nothing from a second cluster.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<f64> = (0..60)
            .flat_map(|_| {
                let a = rng.random_range(0.0..0.02);
                let b = rng.random_range(0.0..0.02);
                [1.0 + a, 0.5 + b, 0.2]
            })
            .collect();
        let f = FeatureSet::from_rows(FeatureSource::Raw, 3, rows).unwrap();
        let g = gap_statistic(&f, &[1, 2], &GapParams { n_refs: 20, ..GapParams::default() }).unwrap();
        assert!(g[0].gap.unwrap() > g[1].gap.unwrap() - g[1].std);
    }

    #[test]
    fn reference_like_data_has_near_zero_gap() {
        // Data drawn from the reference distribution itself. A single draw
        // differs from the reference mean by about sqrt(2) simulation errors,
        // so average the standardized gap over independent draws.
        let draws = 12;
        let mut z = 0.0;
        for seed in 0..draws {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let rows: Vec<f64> = (0..400 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            let f = FeatureSet::from_rows(FeatureSource::Raw, 3, rows).unwrap();
            let g = gap_statistic(&f, &[3], &GapParams { n_refs: 10, seed, ..GapParams::default() }).unwrap();
            z += g[0].gap.unwrap() / g[0].std;
        }
        let mean_z = z / draws as f64;
        assert!(mean_z.abs() < 2.0 * 2f64.sqrt() / (draws as f64).sqrt(), "{mean_z}");
    }

    #[test]
    fn identical_rows_leave_the_gap_undefined() {
        let f = FeatureSet::from_rows(FeatureSource::Raw, 2, [0.3, 0.4].repeat(10)).unwrap();
        let g = gap_statistic(&f, &[1], &GapParams::default()).unwrap();
        assert_eq!(g[0].gap, None);
    }

    #[test]
    fn gap_subsamples_large_inputs_deterministically() {
        let (f, _) = bundles(3, 40, 3, 5);
        let params = GapParams { n_refs: 3, max_points: 50, seed: 1 };
        let a = gap_statistic(&f, &[3], &params).unwrap();
        let b = gap_statistic(&f, &[3], &params).unwrap();
        assert_eq!(a, b);
        assert!(gap_csv(&a).starts_with("k,gap,std\n3,"));
    }

    fn two_region_image() -> RasterImage {
        RasterImage::from_fn(8, 8, 3, |_, x, c| match (x < 4, c) {
            (true, 0) => 0.8,
            (true, _) => 0.2,
            (false, 1) => 0.8,
            (false, _) => 0.2,
        })
        .unwrap()
    }

    #[test]
    fn rank_one_data_stains_only_the_first_channel() {
        let img = RasterImage::from_fn(4, 4, 3, |y, x, c| (1 + c) as f64 * (y * 4 + x + 1) as f64 / 20.0).unwrap();
        let stain = pca_stain(&FeatureSet::from_image(&img), 3).unwrap();
        let first: Vec<u8> = stain.data.iter().step_by(3).copied().collect();
        assert!(first.contains(&0) && first.contains(&255));
        for c in 1..3 {
            let vals: Vec<u8> = stain.data.iter().skip(c).step_by(3).copied().collect();
            assert!(vals.iter().all(|v| *v == vals[0]));
        }
    }

    #[test]
    fn orthogonal_regions_split_on_the_first_channel() {
        let stain = pca_stain(&FeatureSet::from_image(&two_region_image()), 3).unwrap();
        let left: Vec<u8> = (0..8).map(|y| stain.pixel(y, 1)[0]).collect();
        let right: Vec<u8> = (0..8).map(|y| stain.pixel(y, 6)[0]).collect();
        let (lmax, lmin) = (*left.iter().max().unwrap(), *left.iter().min().unwrap());
        let (rmax, rmin) = (*right.iter().max().unwrap(), *right.iter().min().unwrap());
        assert!(lmax < rmin || rmax < lmin);
    }

    #[test]
    fn isotropic_noise_stain_has_no_spatial_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::<f64>::new(0.5, 0.1).unwrap();
        let img = RasterImage::from_fn(64, 64, 3, |_, _, _| noise.sample(&mut rng).abs()).unwrap();
        let stain = pca_stain(&FeatureSet::from_image(&img), 3).unwrap();
        let ch: Vec<f64> = stain.data.iter().step_by(3).map(|v| *v as f64).collect();
        let mean = ch.iter().sum::<f64>() / ch.len() as f64;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        let lag: f64 = (0..64)
            .flat_map(|y| (0..63).map(move |x| (y, x)))
            .map(|(y, x)| (ch[y * 64 + x] - mean) * (ch[y * 64 + x + 1] - mean))
            .sum();
        assert!((lag / var).abs() < 0.06, "{}", lag / var);
    }

    #[test]
    fn constant_image_is_out_of_focus() {
        let img = RasterImage::unmasked(5, 5, 3, vec![0.4; 75]).unwrap();
        assert_eq!(focus_score(&img), 0.0);
    }

    fn blur(img: &RasterImage, sigma: f64) -> RasterImage {
        let planes: Vec<Plane<f64>> = (0..img.channels()).map(|c| gaussian_smooth(&img.channel_plane(c), sigma)).collect();
        RasterImage::from_fn(img.height(), img.width(), img.channels(), |y, x, c| planes[c][(y, x)]).unwrap()
    }

    #[test]
    fn blurring_lowers_focus_and_stack_argmax_finds_the_sharp_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sharp = RasterImage::from_fn(24, 24, 3, |_, _, _| rng.random_range(0.0..1.0)).unwrap();
        let mut stack = Vec::new();
        let mut current = sharp.clone();
        let mut last = focus_score(&current);
        for _ in 0..4 {
            current = blur(&current, 1.0);
            let s = focus_score(&current);
            assert!(s < last);
            last = s;
            stack.push(current.clone());
        }
        stack.insert(2, sharp);
        assert_eq!(best_focus(&stack), Some(2));
    }

    #[test]
    fn class_means_follow_the_regions() {
        let grid = WavelengthGrid::default();
        let a = Spectrum::constant(0.2, 48);
        let b = Spectrum::new(grid.sample(|l| (l - 450.0) / 325.0)).unwrap();
        let mut cube = SpectralCube::filled(4, 6, grid.clone(), &a).unwrap();
        for y in 0..4 {
            for x in 3..6 {
                cube.set_spectrum(y * 6 + x, &b);
            }
        }
        *cube.mask_mut().get_mut(0, 0) = false;
        let f = FeatureSet::from_cube(&cube);
        assert_eq!(f.len(), 23);
        let r = kmeans_cosine(&f, 2, 1).unwrap();
        let means = class_mean_spectra(&cube, &r).unwrap();
        let mut found: Vec<&Spectrum> = means.iter().flatten().collect();
        found.sort_by(|p, q| p.values()[0].total_cmp(&q.values()[0]));
        for (m, t) in found.iter().zip([&b, &a]) {
            for (u, v) in m.values().iter().zip(t.values()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        assert!(class_means_csv(&grid, &means).starts_with("wavelength_nm,class_0,class_1\n450,"));
    }

    #[test]
    fn class_without_unmasked_pixels_is_excluded() {
        let grid = WavelengthGrid::default();
        let mut cube = SpectralCube::filled(1, 3, grid.clone(), &Spectrum::constant(0.5, 48)).unwrap();
        *cube.mask_mut().get_mut(0, 2) = false;
        let clusters = ClusterResult {
            k: 2,
            labels: vec![0, 0, 1],
            centroids: vec![vec![1.0], vec![1.0]],
            inertia: 0.0,
            rounds: 1,
            label_image: Plane::from_vec(1, 3, vec![Some(0), Some(0), Some(1)]),
        };
        let means = class_mean_spectra(&cube, &clusters).unwrap();
        assert!(means[0].is_some());
        assert!(means[1].is_none());
    }
}

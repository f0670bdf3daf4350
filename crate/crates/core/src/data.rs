//! Dataset types, manifest I/O, preprocessing, canonical instance ordering,
//! mini-batch partitioning and the synthetic two-domain shape dataset.

use crate::error::{Error, Result};
use crate::imageio;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::X => Domain::Y,
            Domain::Y => Domain::X,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::X => write!(f, "X"),
            Domain::Y => write!(f, "Y"),
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "X" | "x" => Ok(Domain::X),
            "Y" | "y" => Ok(Domain::Y),
            other => Err(Error::invalid(format!("unknown domain {other:?}"))),
        }
    }
}

/// Ordered sequence of instance masks over one image grid. Stored values
/// are exactly {0, 1}; `valid` marks real instances vs padding slots.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<Array3<f32>>, // each [1, H, W]
    pub valid: Vec<bool>,
}

impl MaskSet {
    pub fn from_masks(masks: Vec<Array3<f32>>) -> Self {
        let valid = vec![true; masks.len()];
        MaskSet { masks, valid }
    }

    pub fn empty() -> Self {
        MaskSet {
            masks: Vec::new(),
            valid: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_valid() == 0
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Foreground pixel count per slot.
    pub fn areas(&self) -> Vec<usize> {
        self.masks
            .iter()
            .map(|m| m.iter().filter(|&&v| v >= 0.5).count())
            .collect()
    }

    /// Valid masks only, in slot order.
    pub fn valid_masks(&self) -> Vec<&Array3<f32>> {
        self.masks
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(m, _)| m)
            .collect()
    }

    /// Union of valid masks as a `[1, H, W]` {0,1} map.
    pub fn union(&self) -> Option<Array3<f32>> {
        let mut it = self.valid_masks().into_iter();
        let first = it.next()?.clone();
        Some(it.fold(first, |mut acc, m| {
            acc.zip_mut_with(m, |a, &b| *a = a.max(b));
            acc
        }))
    }
}

/// One dataset element: an image, its instance masks and a domain tag.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f32>, // [3, H, W]
    pub masks: MaskSet,
    pub domain: Domain,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub masks: Vec<String>,
    pub domain: Domain,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// `[H, W]` target resolution for every sample of the dataset.
    pub resolution: [usize; 2],
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub source: String,
    /// Directory all entry paths are relative to; set at load time.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

/// Read and validate a dataset manifest: JSON schema plus existence of every
/// referenced image and mask file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&body).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    manifest.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    if manifest.resolution[0] == 0 || manifest.resolution[1] == 0 {
        return Err(Error::Manifest(format!(
            "{}: resolution must be positive",
            path.display()
        )));
    }
    for entry in &manifest.entries {
        let img = manifest.resolve(&entry.image);
        if !img.is_file() {
            return Err(Error::Manifest(format!(
                "missing image file: {}",
                img.display()
            )));
        }
        for m in &entry.masks {
            let mp = manifest.resolve(m);
            if !mp.is_file() {
                return Err(Error::Manifest(format!(
                    "missing mask file: {}",
                    mp.display()
                )));
            }
        }
    }
    Ok(manifest)
}

/// Resize to the target resolution, rescale the image to [-1, 1], binarize
/// masks at 0.5 and drop masks whose area fell below `min_instance_area`.
/// A sample whose mask set empties out is returned with zero masks; the
/// caller decides whether to skip it.
pub fn preprocess(sample: &Sample, resolution: (usize, usize), min_instance_area: usize) -> Sample {
    let (h, w) = resolution;
    let image = imageio::resize_bilinear_chw(&sample.image, h, w).mapv(|v| v * 2.0 - 1.0);
    let mut masks = Vec::new();
    for (m, &valid) in sample.masks.masks.iter().zip(&sample.masks.valid) {
        if !valid {
            continue;
        }
        let plane = m.index_axis(ndarray::Axis(0), 0).to_owned();
        let resized = imageio::resize_bilinear(&plane, h, w)
            .mapv(|v| if v >= 0.5 { 1.0f32 } else { 0.0 });
        let area = resized.iter().filter(|&&v| v >= 0.5).count();
        if area >= min_instance_area {
            masks.push(resized.insert_axis(ndarray::Axis(0)));
        }
    }
    Sample {
        id: sample.id.clone(),
        image,
        masks: MaskSet::from_masks(masks),
        domain: sample.domain,
    }
}

/// Sort masks by strictly decreasing foreground area; equal areas keep their
/// original relative order. Padding slots are not supported here: ordering
/// happens before padding.
pub fn order_instances(masks: &MaskSet) -> MaskSet {
    debug_assert!(masks.valid.iter().all(|&v| v), "order before padding");
    let areas = masks.areas();
    let mut idx: Vec<usize> = (0..masks.len()).collect();
    idx.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(a.cmp(&b)));
    MaskSet::from_masks(idx.into_iter().map(|i| masks.masks[i].clone()).collect())
}

/// Contiguous chunks of `batch_size` masks (last chunk may be smaller).
pub fn partition_minibatches(masks: &MaskSet, batch_size: usize) -> Result<Vec<MaskSet>> {
    if batch_size < 1 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let valid = masks.valid_masks();
    Ok(valid
        .chunks(batch_size)
        .map(|chunk| MaskSet::from_masks(chunk.iter().map(|m| (*m).clone()).collect()))
        .collect())
}

/// Append all-background padding slots (validity false) up to `capacity`.
pub fn pad_mask_set(masks: &MaskSet, capacity: usize) -> Result<MaskSet> {
    if masks.len() > capacity {
        return Err(Error::invalid(format!(
            "mask set of {} exceeds capacity {}",
            masks.len(),
            capacity
        )));
    }
    let mut out = masks.clone();
    if let Some(first) = out.masks.first() {
        let dim = first.dim();
        while out.masks.len() < capacity {
            out.masks.push(Array3::zeros(dim));
            out.valid.push(false);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Triangle,
    Square,
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "circle" => Ok(ShapeKind::Circle),
            "triangle" => Ok(ShapeKind::Triangle),
            "square" => Ok(ShapeKind::Square),
            other => Err(Error::invalid(format!("unknown shape {other:?}"))),
        }
    }
}

/// Specification of the synthetic two-domain shape dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    pub shape_x: ShapeKind,
    pub shape_y: ShapeKind,
    /// Half-extent of instances in pixels.
    pub size_min: usize,
    pub size_max: usize,
    pub resolution: [usize; 2],
    /// Value-noise background: coarse grid cells across the image and the
    /// gray-level range of the noise.
    pub bg_grid: usize,
    pub bg_lo: f32,
    pub bg_hi: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_samples: 200,
            instances_min: 1,
            instances_max: 2,
            shape_x: ShapeKind::Circle,
            shape_y: ShapeKind::Triangle,
            size_min: 9,
            size_max: 14,
            resolution: [64, 64],
            bg_grid: 8,
            bg_lo: 0.25,
            bg_hi: 0.55,
            seed: 7,
        }
    }
}

/// Saturated, never-gray fill colors; instances within one image get
/// distinct entries so mask pixels can be recovered by exact color match.
const PALETTE: [[u8; 3]; 8] = [
    [220, 60, 50],
    [70, 190, 80],
    [60, 100, 220],
    [230, 200, 60],
    [200, 70, 190],
    [70, 200, 200],
    [235, 140, 50],
    [140, 80, 200],
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.resolution;
        if self.num_samples == 0 {
            return Err(Error::invalid("num_samples must be >= 1"));
        }
        if self.instances_min < 1 || self.instances_max < self.instances_min {
            return Err(Error::invalid("instances range must satisfy 1 <= min <= max"));
        }
        if self.instances_max > PALETTE.len() {
            return Err(Error::invalid(format!(
                "at most {} instances per image",
                PALETTE.len()
            )));
        }
        if self.size_min < 3 || self.size_max < self.size_min {
            return Err(Error::invalid("size range must satisfy 3 <= min <= max"));
        }
        if 2 * self.size_max + 4 > h.min(w) {
            return Err(Error::invalid("instances would exceed image bounds"));
        }
        if !(self.bg_lo >= 0.0 && self.bg_hi <= 1.0 && self.bg_lo <= self.bg_hi) {
            return Err(Error::invalid("background range must satisfy 0 <= lo <= hi <= 1"));
        }
        if self.bg_grid < 1 {
            return Err(Error::invalid("bg_grid must be >= 1"));
        }
        Ok(())
    }
}

fn inside_shape(kind: ShapeKind, cx: f32, cy: f32, s: f32, px: usize, py: usize) -> bool {
    let x = px as f32;
    let y = py as f32;
    match kind {
        ShapeKind::Circle => (x - cx).powi(2) + (y - cy).powi(2) <= s * s,
        ShapeKind::Square => (x - cx).abs() <= s && (y - cy).abs() <= s,
        ShapeKind::Triangle => {
            // upward triangle inscribed in the radius-s circle
            let v = [
                (cx, cy - s),
                (cx - 0.866 * s, cy + 0.5 * s),
                (cx + 0.866 * s, cy + 0.5 * s),
            ];
            let sign = |a: (f32, f32), b: (f32, f32)| (x - b.0) * (a.1 - b.1) - (a.0 - b.0) * (y - b.1);
            let d0 = sign(v[0], v[1]);
            let d1 = sign(v[1], v[2]);
            let d2 = sign(v[2], v[0]);
            let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
            let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
            !(has_neg && has_pos)
        }
    }
}

fn value_noise_background(rng: &mut ChaCha8Rng, h: usize, w: usize, spec: &SyntheticSpec) -> Array2<f32> {
    let g = spec.bg_grid;
    let nodes = Array2::from_shape_simple_fn((g + 1, g + 1), || {
        rng.random_range(spec.bg_lo..=spec.bg_hi)
    });
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        let gy = y as f32 / h as f32 * g as f32;
        let y0 = gy.floor() as usize;
        let fy = gy - y0 as f32;
        for x in 0..w {
            let gx = x as f32 / w as f32 * g as f32;
            let x0 = gx.floor() as usize;
            let fx = gx - x0 as f32;
            let top = nodes[[y0, x0]] * (1.0 - fx) + nodes[[y0, x0 + 1]] * fx;
            let bot = nodes[[y0 + 1, x0]] * (1.0 - fx) + nodes[[y0 + 1, x0 + 1]] * fx;
            out[[y, x]] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

struct SynthInstance {
    kind: ShapeKind,
    cx: f32,
    cy: f32,
    s: f32,
    color: [u8; 3],
}

fn render_sample(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    shape: ShapeKind,
) -> (RgbBuffer, Vec<Array2<u8>>) {
    let [h, w] = spec.resolution;
    let min_visible = 16;
    'attempt: for _ in 0..32 {
        let k = rng.random_range(spec.instances_min..=spec.instances_max);
        let mut color_idx: Vec<usize> = (0..PALETTE.len()).collect();
        color_idx.shuffle(rng);
        let instances: Vec<SynthInstance> = (0..k)
            .map(|i| {
                let s = rng.random_range(spec.size_min..=spec.size_max) as f32;
                let margin = s.ceil() as usize + 2;
                let cx = rng.random_range(margin..w - margin) as f32;
                let cy = rng.random_range(margin..h - margin) as f32;
                SynthInstance {
                    kind: shape,
                    cx,
                    cy,
                    s,
                    color: PALETTE[color_idx[i]],
                }
            })
            .collect();

        // ownership map: topmost instance per pixel (-1 = background)
        let mut owner = Array2::<i32>::from_elem((h, w), -1);
        for (i, inst) in instances.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if inside_shape(inst.kind, inst.cx, inst.cy, inst.s, x, y) {
                        owner[[y, x]] = i as i32;
                    }
                }
            }
        }
        let mut visible = vec![0usize; k];
        for &o in owner.iter() {
            if o >= 0 {
                visible[o as usize] += 1;
            }
        }
        if visible.iter().any(|&v| v < min_visible) {
            continue 'attempt;
        }

        let bg = value_noise_background(rng, h, w, spec);
        let mut pixels = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                let rgb = match owner[[y, x]] {
                    -1 => {
                        let v = (bg[[y, x]] * 255.0).round().clamp(0.0, 255.0) as u8;
                        [v, v, v]
                    }
                    o => instances[o as usize].color,
                };
                let base = (y * w + x) * 3;
                pixels[base..base + 3].copy_from_slice(&rgb);
            }
        }
        let masks: Vec<Array2<u8>> = (0..k)
            .map(|i| owner.mapv(|o| if o == i as i32 { 255u8 } else { 0 }))
            .collect();
        return (RgbBuffer { pixels, h, w }, masks);
    }
    panic!("synthetic placement failed after 32 attempts; spec too tight");
}

struct RgbBuffer {
    pixels: Vec<u8>,
    h: usize,
    w: usize,
}

/// Generate the synthetic dataset for both domains under `out_dir` and
/// write `manifest_X.json` / `manifest_Y.json`. Byte-deterministic in the
/// seed.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    out_dir: &Path,
) -> Result<(DatasetManifest, DatasetManifest)> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifests = Vec::new();
    for (di, domain) in [Domain::X, Domain::Y].into_iter().enumerate() {
        let sub = out_dir.join(domain.to_string());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1 + di as u64);
        let shape = if domain == Domain::X { spec.shape_x } else { spec.shape_y };
        let mut entries = Vec::new();
        for i in 0..spec.num_samples {
            let (img, masks) = render_sample(&mut rng, spec, shape);
            let img_rel = format!("{domain}/img_{i:04}.png");
            let img_path = out_dir.join(&img_rel);
            image::RgbImage::from_raw(img.w as u32, img.h as u32, img.pixels)
                .expect("buffer size matches")
                .save(&img_path)
                .map_err(|e| Error::Image {
                    path: img_path.clone(),
                    source: e,
                })?;
            let mut mask_rels = Vec::new();
            for (mi, m) in masks.iter().enumerate() {
                let rel = format!("{domain}/img_{i:04}_mask_{mi:02}.png");
                let mp = out_dir.join(&rel);
                image::GrayImage::from_raw(img.w as u32, img.h as u32, m.iter().copied().collect())
                    .expect("buffer size matches")
                    .save(&mp)
                    .map_err(|e| Error::Image {
                        path: mp.clone(),
                        source: e,
                    })?;
                mask_rels.push(rel);
            }
            entries.push(ManifestEntry {
                image: img_rel,
                masks: mask_rels,
                domain,
            });
        }
        let manifest = DatasetManifest {
            resolution: spec.resolution,
            entries,
            source: format!("synthetic seed={} shapes={:?}/{:?}", spec.seed, spec.shape_x, spec.shape_y),
            base_dir: out_dir.to_path_buf(),
        };
        manifest.save(&out_dir.join(format!("manifest_{domain}.json")))?;
        manifests.push(manifest);
    }
    let y = manifests.pop().unwrap();
    let x = manifests.pop().unwrap();
    Ok((x, y))
}

/// Decode every manifest entry, preprocess to the manifest resolution,
/// canonically order instances and drop samples that end up with no masks.
pub fn load_dataset(manifest: &DatasetManifest, min_instance_area: usize) -> Result<Vec<Sample>> {
    let (h, w) = (manifest.resolution[0], manifest.resolution[1]);
    let mut out = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let img_path = manifest.resolve(&entry.image);
        let image = imageio::load_rgb(&img_path)?;
        let mut masks = Vec::new();
        for rel in &entry.masks {
            let mp = manifest.resolve(rel);
            let m = imageio::load_gray(&mp)?;
            masks.push(m.mapv(|v| if v >= 0.5 { 1.0f32 } else { 0.0 }).insert_axis(ndarray::Axis(0)));
        }
        let id = Path::new(&entry.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| entry.image.clone());
        let raw = Sample {
            id,
            image,
            masks: MaskSet::from_masks(masks),
            domain: entry.domain,
        };
        let pre = preprocess(&raw, (h, w), min_instance_area);
        if pre.masks.is_empty() {
            continue; // zero-instance samples are excluded from training
        }
        let ordered = Sample {
            masks: order_instances(&pre.masks),
            ..pre
        };
        out.push(ordered);
    }
    Ok(out)
}

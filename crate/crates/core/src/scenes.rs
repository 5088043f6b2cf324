//! Procedural aerial scenes whose appearance depends on altitude, viewing
//! angle, and time of day.
//!
//! Objects are filled ellipses. Their pixel height follows the pinhole law
//! `focal_length_px * object_height_m / altitude`; their height:width ratio
//! goes linearly from 3:1 at pitch 0 (side view) to 1:1 at pitch 90 (top-down).
//! Night images are darkened and noisier.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::dataset::{save_dataset, write_json, AnnotatedImage, Annotation, Category, Dataset, Raster};
use crate::domain::{BinRule, DomainSchema, MetadataField, MetadataRecord};
use crate::error::{Error, Result};

pub const MIN_PROJECTED_PX: f64 = 2.0;
pub const NIGHT_BRIGHTNESS: f64 = 0.35;

const DAY_NOISE_SIGMA: f64 = 0.03;
const BACKGROUND_LEVEL: f64 = 0.4;
const BACKGROUND_AMPLITUDE: f64 = 0.12;
const BACKGROUND_GRID: usize = 8;
/// 2021-06-01T00:00:00Z.
const EPOCH_BASE: f64 = 1_622_505_600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    pub focal_length_px: f64,
    pub object_height_m: f64,
    /// Inclusive range.
    pub objects_per_image: (usize, usize),
    pub altitude_range: (f64, f64),
    pub pitch_range: (f64, f64),
    /// Fraction of night images when the layout has no time dimension.
    pub time_mix: f64,
    pub class_count: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 128,
            focal_length_px: 200.0,
            object_height_m: 1.7,
            objects_per_image: (1, 4),
            altitude_range: (5.0, 100.0),
            pitch_range: (0.0, 90.0),
            time_mix: 0.25,
            class_count: 1,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (amin, amax) = self.altitude_range;
        let (pmin, pmax) = self.pitch_range;
        let (omin, omax) = self.objects_per_image;
        if self.image_size < 32 {
            return Err(Error::invalid(format!("image_size {} < 32", self.image_size)));
        }
        if !(self.focal_length_px > 0.0 && self.object_height_m > 0.0) {
            return Err(Error::invalid("focal length and object height must be positive"));
        }
        if !(amin > 0.0 && amin <= amax && amax.is_finite()) {
            return Err(Error::invalid(format!("altitude range {:?} invalid", self.altitude_range)));
        }
        if !(0.0..=90.0).contains(&pmin) || !(0.0..=90.0).contains(&pmax) || pmin > pmax {
            return Err(Error::invalid(format!("pitch range {:?} invalid", self.pitch_range)));
        }
        if omin == 0 || omin > omax {
            return Err(Error::invalid(format!("objects_per_image {:?} invalid", self.objects_per_image)));
        }
        if !(0.0..=1.0).contains(&self.time_mix) {
            return Err(Error::invalid(format!("time_mix {} outside [0, 1]", self.time_mix)));
        }
        if self.class_count == 0 {
            return Err(Error::invalid("class_count must be positive"));
        }
        Ok(())
    }

    /// Projected object height in pixels, clamped to `[2, image_size]`.
    pub fn projected_height(&self, altitude: f64) -> f64 {
        (self.focal_length_px * self.object_height_m / altitude).clamp(MIN_PROJECTED_PX, self.image_size as f64)
    }

    pub fn categories(&self) -> Vec<Category> {
        (0..self.class_count)
            .map(|c| Category {
                id: c as u64 + 1,
                name: if c == 0 { "person".into() } else { format!("class{c}") },
            })
            .collect()
    }
}

/// Height:width ratio of the silhouette at a given pitch.
pub fn aspect_ratio(pitch_deg: f64) -> f64 {
    3.0 - 2.0 * pitch_deg.clamp(0.0, 90.0) / 90.0
}

fn class_intensity(class_id: usize, class_count: usize) -> f64 {
    if class_count == 1 {
        0.9
    } else {
        0.95 - 0.9 * class_id as f64 / (class_count - 1) as f64
    }
}

/// Renders one scene. `id` of the returned image is 0.
pub fn render_scene<R: Rng + ?Sized>(
    spec: &SceneSpec,
    altitude: f64,
    pitch: f64,
    night: bool,
    rng: &mut R,
) -> Result<AnnotatedImage> {
    if !(altitude > 0.0 && altitude.is_finite()) {
        return Err(Error::invalid(format!("altitude {altitude} must be positive")));
    }
    if !(0.0..=90.0).contains(&pitch) {
        return Err(Error::invalid(format!("pitch {pitch} outside [0, 90]")));
    }
    let size = spec.image_size;
    let mut raster = background(size, rng);

    let height = spec.projected_height(altitude);
    let width = (height / aspect_ratio(pitch)).max(1.0);
    let count = rng.random_range(spec.objects_per_image.0..=spec.objects_per_image.1);
    let mut objects: Vec<Annotation> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..50 {
            let cx = rng.random_range(width / 2.0..=size as f64 - width / 2.0);
            let cy = rng.random_range(height / 2.0..=size as f64 - height / 2.0);
            let class_id = rng.random_range(0..spec.class_count);
            let pixels = ellipse_pixels(cx, cy, width, height, size);
            let bbox = tight_box(&pixels);
            let padded = BBox::new(bbox.x - 1.0, bbox.y - 1.0, bbox.w + 2.0, bbox.h + 2.0);
            if objects.iter().any(|o| o.bbox.intersection(&padded) > 0.0) {
                continue;
            }
            let level = class_intensity(class_id, spec.class_count) + rng.random_range(-0.05..0.05);
            for &(x, y) in &pixels {
                raster.pixels_mut()[y * size + x] = level;
            }
            objects.push(Annotation { bbox, class_id });
            break;
        }
    }

    let sigma = if night {
        raster.pixels_mut().iter_mut().for_each(|v| *v *= NIGHT_BRIGHTNESS);
        2.0 * DAY_NOISE_SIGMA
    } else {
        DAY_NOISE_SIGMA
    };
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    for v in raster.pixels_mut() {
        *v += noise.sample(rng);
    }
    raster.quantize();

    let day = rng.random_range(0..30u32);
    let hour = if night {
        (20.0 + rng.random_range(0.0..9.0)) % 24.0
    } else {
        rng.random_range(8.0..18.0)
    };
    let timestamp = (EPOCH_BASE + f64::from(day) * 86_400.0 + hour * 3600.0).floor();

    Ok(AnnotatedImage {
        id: 0,
        image: raster,
        objects,
        metadata: MetadataRecord::new(altitude, pitch).with_timestamp(timestamp).with_night(night),
    })
}

fn background<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Raster {
    let g = BACKGROUND_GRID;
    let coarse: Vec<f64> = (0..(g + 1) * (g + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cell = size as f64 / g as f64;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = (y as f64 + 0.5) / cell;
        let gy = (fy.floor() as usize).min(g - 1);
        let ty = fy - gy as f64;
        for x in 0..size {
            let fx = (x as f64 + 0.5) / cell;
            let gx = (fx.floor() as usize).min(g - 1);
            let tx = fx - gx as f64;
            let at = |i: usize, j: usize| coarse[i * (g + 1) + j];
            let top = at(gy, gx) * (1.0 - tx) + at(gy, gx + 1) * tx;
            let bottom = at(gy + 1, gx) * (1.0 - tx) + at(gy + 1, gx + 1) * tx;
            pixels.push(BACKGROUND_LEVEL + BACKGROUND_AMPLITUDE * (top * (1.0 - ty) + bottom * ty));
        }
    }
    Raster::new(size, size, pixels)
}

/// Pixels whose centers fall inside the ellipse. Every row whose center lies in
/// the vertical extent gets at least the pixel under `cx`, so thin silhouettes
/// keep their full height.
fn ellipse_pixels(cx: f64, cy: f64, w: f64, h: f64, size: usize) -> Vec<(usize, usize)> {
    let (rx, ry) = (w / 2.0, h / 2.0);
    let mut out = Vec::new();
    let col = (cx.floor() as usize).min(size - 1);
    for y in 0..size {
        let dy = (y as f64 + 0.5 - cy) / ry;
        if dy.abs() > 1.0 {
            continue;
        }
        let half = rx * (1.0 - dy * dy).sqrt();
        let x0 = ((cx - half - 0.5).ceil().max(0.0) as usize).min(col);
        let x1 = ((cx + half - 0.5).floor().min(size as f64 - 1.0).max(0.0) as usize).max(col);
        out.extend((x0..=x1).map(|x| (x, y)));
    }
    if out.is_empty() {
        out.push((col, (cy.floor() as usize).min(size - 1)));
    }
    out
}

fn tight_box(pixels: &[(usize, usize)]) -> BBox {
    let x0 = pixels.iter().map(|p| p.0).min().unwrap_or(0);
    let x1 = pixels.iter().map(|p| p.0).max().unwrap_or(0);
    let y0 = pixels.iter().map(|p| p.1).min().unwrap_or(0);
    let y1 = pixels.iter().map(|p| p.1).max().unwrap_or(0);
    BBox::new(x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64)
}

/// How images are spread over the layout's domain cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balance {
    Balanced,
    Imbalanced(Vec<f64>),
}

impl Balance {
    fn weights(&self, cells: usize) -> Result<Vec<f64>> {
        match self {
            Balance::Balanced => Ok(vec![1.0 / cells as f64; cells]),
            Balance::Imbalanced(w) => {
                if w.len() != cells {
                    return Err(Error::invalid(format!("{} weights for {cells} domain cells", w.len())));
                }
                if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::invalid(format!("weights must be nonnegative: {w:?}")));
                }
                let sum: f64 = w.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!("weights sum to {sum}, expected 1")));
                }
                Ok(w.clone())
            }
        }
    }
}

/// Largest-remainder allocation of `n` items over `weights`; ties on the
/// remainder go to the lower index.
pub fn quota_allocation(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Which values of each scene factor a domain cell allows.
#[derive(Debug, Clone)]
struct CellRegion {
    altitude: Vec<(f64, f64)>,
    pitch: Vec<(f64, f64)>,
    night: Option<Vec<bool>>,
}

fn intersect(intervals: &[(f64, f64)], lo: f64, hi: f64) -> Vec<(f64, f64)> {
    intervals
        .iter()
        .map(|&(a, b)| (a.max(lo), b.min(hi)))
        .filter(|(a, b)| a <= b)
        .collect()
}

fn cell_region(spec: &SceneSpec, layout: &DomainSchema, cell: usize) -> Result<CellRegion> {
    let key = layout.key_at(cell);
    let mut region = CellRegion {
        altitude: vec![spec.altitude_range],
        pitch: vec![spec.pitch_range],
        night: None,
    };
    for (dim, label) in layout.dimensions().iter().zip(key.labels()) {
        let label_idx = dim.labels().iter().position(|l| l == label).expect("key from schema");
        let raws = dim.raw_bins_of(label_idx);
        if let BinRule::DayNight { .. } = dim.rule() {
            region.night = Some(raws.iter().map(|&r| r == 1).collect());
            continue;
        }
        let intervals: Vec<(f64, f64)> = raws.iter().filter_map(|&r| dim.rule().raw_interval(r)).collect();
        let slot = match dim.rule().binned_field() {
            MetadataField::Altitude => &mut region.altitude,
            MetadataField::GimbalPitch => &mut region.pitch,
            other => {
                return Err(Error::invalid(format!(
                    "generator cannot control `{}` (dimension `{}`)",
                    other.record_name(),
                    dim.name()
                )))
            }
        };
        let mut next = Vec::new();
        for &(lo, hi) in slot.iter() {
            next.extend(intersect(&intervals, lo, hi));
        }
        if next.is_empty() {
            return Err(Error::invalid(format!(
                "domain cell {key} lies outside the generator's {} range",
                dim.name()
            )));
        }
        *slot = next;
    }
    Ok(region)
}

fn sample_intervals<R: Rng + ?Sized>(intervals: &[(f64, f64)], rng: &mut R) -> f64 {
    let total: f64 = intervals.iter().map(|(a, b)| b - a).sum();
    if total <= 0.0 {
        return intervals[0].0;
    }
    let mut t = rng.random_range(0.0..total);
    for &(a, b) in intervals {
        if t < b - a {
            return a + t;
        }
        t -= b - a;
    }
    intervals[intervals.len() - 1].1
}

/// Train or test portion of a generated dataset. Each split draws from its own
/// rng streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1 << 40,
        }
    }
}

/// Generates one split in memory. Image `i`'s randomness comes from stream
/// `i` of a ChaCha generator seeded with `spec.seed`, so the result does not
/// depend on scheduling.
pub fn generate_split(
    spec: &SceneSpec,
    layout: &DomainSchema,
    n: usize,
    balance: &Balance,
    split: Split,
) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("split size must be positive"));
    }
    let cells = layout.key_count();
    let weights = balance.weights(cells)?;
    let quotas = quota_allocation(&weights, n);
    let regions = (0..cells)
        .map(|c| if quotas[c] > 0 { cell_region(spec, layout, c).map(Some) } else { Ok(None) })
        .collect::<Result<Vec<_>>>()?;

    let mut assignment: Vec<usize> = quotas.iter().enumerate().flat_map(|(c, &q)| std::iter::repeat_n(c, q)).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order_rng.set_stream(split.stream_base() + (1 << 39));
    for i in (1..assignment.len()).rev() {
        let j = order_rng.random_range(0..=i);
        assignment.swap(i, j);
    }

    let images = assignment
        .par_iter()
        .enumerate()
        .map(|(i, &cell)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(split.stream_base() + i as u64);
            let region = regions[cell].as_ref().expect("cell has quota");
            loop {
                let altitude = sample_intervals(&region.altitude, &mut rng);
                let pitch = sample_intervals(&region.pitch, &mut rng);
                let night = match &region.night {
                    Some(options) => options[rng.random_range(0..options.len())],
                    None => rng.random_bool(spec.time_mix),
                };
                let probe = MetadataRecord::new(altitude, pitch).with_night(night);
                // Intervals are half-open but sampling can round onto an edge.
                if altitude <= 0.0 || layout.bin_index(&probe)? != cell {
                    continue;
                }
                let mut img = render_scene(spec, altitude, pitch, night, &mut rng)?;
                img.id = i as u64;
                return Ok(img);
            }
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        categories: spec.categories(),
        images,
    })
}

/// Names accepted by [`preset`].
pub const PRESETS: &[&str] = &["uavdt-like", "altitude-balanced"];

/// A named generation setup: scene spec, layout and balance.
///
/// `uavdt-like` mimics a drone traffic set where most footage is shot from
/// mid altitude: three altitude bins with 15/75/10 percent of the images.
/// `altitude-balanced` uses the same bins with equal shares.
pub fn preset(name: &str) -> Result<(SceneSpec, DomainSchema, Balance)> {
    let spec = SceneSpec::default();
    let layout = DomainSchema::altitude(spec.altitude_range.0, spec.altitude_range.1, 3)?;
    let balance = match name {
        "uavdt-like" => Balance::Imbalanced(vec![0.15, 0.75, 0.10]),
        "altitude-balanced" => Balance::Balanced,
        other => {
            return Err(Error::invalid(format!(
                "unknown preset `{other}`, expected one of {PRESETS:?}"
            )))
        }
    };
    Ok((spec, layout, balance))
}

/// Record of how a dataset directory was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub spec: SceneSpec,
    pub layout: DomainSchema,
    pub balance: Balance,
    pub n_train: usize,
    pub n_test: usize,
    pub train_cell_counts: Vec<usize>,
    pub test_cell_counts: Vec<usize>,
}

pub const GENERATION_FILE: &str = "generation.json";

/// Writes `train/` and `test/` split directories plus `generation.json`.
pub fn generate_dataset(
    spec: &SceneSpec,
    layout: &DomainSchema,
    n_train: usize,
    n_test: usize,
    balance: &Balance,
    out_dir: &Path,
) -> Result<GenerationRecord> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::invalid("n_train and n_test must be positive"));
    }
    let weights = balance.weights(layout.key_count())?;
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        let ds = generate_split(spec, layout, n, balance, split)?;
        save_dataset(&ds, &out_dir.join(split.dir_name()))?;
    }
    let record = GenerationRecord {
        spec: spec.clone(),
        layout: layout.clone(),
        balance: balance.clone(),
        n_train,
        n_test,
        train_cell_counts: quota_allocation(&weights, n_train),
        test_cell_counts: quota_allocation(&weights, n_test),
    };
    write_json(&out_dir.join(GENERATION_FILE), &record)?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_dataset;

    #[test]
    fn pinhole_examples() {
        let spec = SceneSpec::default();
        assert!((spec.projected_height(100.0) - 3.4).abs() < 1e-12);
        assert!((spec.projected_height(5.0) - 68.0).abs() < 1e-12);
        assert_eq!(spec.projected_height(1000.0), 2.0);
        assert_eq!(spec.projected_height(0.5), 128.0);
    }

    #[test]
    fn rendered_heights_follow_pinhole() {
        let spec = SceneSpec {
            objects_per_image: (1, 1),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for altitude in [5.0, 8.0, 12.5, 20.0, 40.0, 60.0, 85.0, 100.0] {
            for pitch in [0.0, 45.0, 90.0] {
                let img = render_scene(&spec, altitude, pitch, false, &mut rng).unwrap();
                let h = img.objects[0].bbox.h;
                let expected = spec.projected_height(altitude);
                assert!((h - expected).abs() <= 1.0, "alt {altitude}: {h} vs {expected}");
            }
        }
    }

    #[test]
    fn aspect_ratio_endpoints() {
        let spec = SceneSpec {
            objects_per_image: (1, 1),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let top = render_scene(&spec, 5.0, 90.0, false, &mut rng).unwrap().objects[0].bbox;
        assert!((top.h / top.w - 1.0).abs() < 0.05, "{top:?}");
        let side = render_scene(&spec, 5.0, 0.0, false, &mut rng).unwrap().objects[0].bbox;
        assert!((side.h / side.w - 3.0).abs() < 0.2, "{side:?}");
    }

    #[test]
    fn night_is_darker() {
        let spec = SceneSpec::default();
        let mean = |night: bool| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let img = render_scene(&spec, 20.0, 30.0, night, &mut rng).unwrap();
            img.image.pixels().iter().sum::<f64>() / img.image.pixels().len() as f64
        };
        let (day, night) = (mean(false), mean(true));
        assert!(night < 0.5 * day, "day {day} night {night}");
    }

    #[test]
    fn render_rejects_bad_altitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(render_scene(&SceneSpec::default(), 0.0, 10.0, false, &mut rng).is_err());
        assert!(render_scene(&SceneSpec::default(), -3.0, 10.0, false, &mut rng).is_err());
    }

    #[test]
    fn boxes_are_valid() {
        let spec = SceneSpec::default();
        let layout = DomainSchema::altitude(5.0, 100.0, 3).unwrap();
        let ds = generate_split(&spec, &layout, 60, &Balance::Balanced, Split::Train).unwrap();
        for img in &ds.images {
            assert!(!img.objects.is_empty());
            for o in &img.objects {
                assert!(o.bbox.is_valid());
                assert!(o.bbox.x >= 0.0 && o.bbox.y >= 0.0);
                assert!(o.bbox.x + o.bbox.w <= 128.0 && o.bbox.y + o.bbox.h <= 128.0);
            }
        }
    }

    #[test]
    fn quotas() {
        assert_eq!(quota_allocation(&[0.7, 0.2, 0.1], 1000), vec![700, 200, 100]);
        assert_eq!(quota_allocation(&[1.0 / 3.0; 3], 600), vec![200, 200, 200]);
        assert_eq!(quota_allocation(&[1.0 / 3.0; 3], 100), vec![34, 33, 33]);
        assert_eq!(quota_allocation(&[0.5, 0.5], 7).iter().sum::<usize>(), 7);
    }

    #[test]
    fn balanced_cells_are_exact() {
        let spec = SceneSpec::default();
        let layout = DomainSchema::altitude(5.0, 100.0, 3).unwrap();
        let ds = generate_split(&spec, &layout, 600, &Balance::Balanced, Split::Train).unwrap();
        let mut counts = [0usize; 3];
        for img in &ds.images {
            counts[layout.bin_index(&img.metadata).unwrap()] += 1;
        }
        assert_eq!(counts, [200, 200, 200]);
    }

    #[test]
    fn imbalanced_cells_follow_quotas() {
        let spec = SceneSpec::default();
        let layout = DomainSchema::altitude(5.0, 100.0, 3).unwrap();
        let ds = generate_split(&spec, &layout, 1000, &Balance::Imbalanced(vec![0.7, 0.2, 0.1]), Split::Train).unwrap();
        let mut counts = [0usize; 3];
        for img in &ds.images {
            counts[layout.bin_index(&img.metadata).unwrap()] += 1;
        }
        assert_eq!(counts, [700, 200, 100]);
        assert!(generate_split(&spec, &layout, 10, &Balance::Imbalanced(vec![0.7, 0.2, 0.2]), Split::Train).is_err());
    }

    #[test]
    fn multi_dimension_layout() {
        let spec = SceneSpec::default();
        let layout = DomainSchema::new(vec![
            crate::domain::DomainDimension::equidistant("altitude", MetadataField::Altitude, 5.0, 100.0, 2).unwrap(),
            crate::domain::DomainDimension::bird_view(60.0).unwrap(),
            crate::domain::DomainDimension::day_night().unwrap(),
        ])
        .unwrap();
        let ds = generate_split(&spec, &layout, 80, &Balance::Balanced, Split::Test).unwrap();
        let mut counts = vec![0usize; 8];
        for img in &ds.images {
            counts[layout.bin_index(&img.metadata).unwrap()] += 1;
        }
        assert_eq!(counts, vec![10; 8]);
    }

    #[test]
    fn out_of_range_cell_is_rejected() {
        let spec = SceneSpec::default();
        let layout = DomainSchema::altitude(200.0, 300.0, 2).unwrap();
        assert!(generate_split(&spec, &layout, 10, &Balance::Balanced, Split::Train).is_err());
    }

    #[test]
    fn deterministic_and_round_trips() {
        let spec = SceneSpec {
            seed: 11,
            ..Default::default()
        };
        let layout = DomainSchema::altitude(5.0, 100.0, 3).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(&spec, &layout, 12, 6, &Balance::Balanced, a.path()).unwrap();
        generate_dataset(&spec, &layout, 12, 6, &Balance::Balanced, b.path()).unwrap();
        for split in ["train", "test"] {
            for f in ["annotations.json", "metadata.json"] {
                let x = std::fs::read(a.path().join(split).join(f)).unwrap();
                let y = std::fs::read(b.path().join(split).join(f)).unwrap();
                assert_eq!(x, y);
            }
            assert_eq!(
                crate::dataset::dataset_digest(&a.path().join(split)).unwrap(),
                crate::dataset::dataset_digest(&b.path().join(split)).unwrap()
            );
        }
        let loaded = load_dataset(&a.path().join("train")).unwrap();
        let memory = generate_split(&spec, &layout, 12, &Balance::Balanced, Split::Train).unwrap();
        assert_eq!(loaded.categories, memory.categories);
        assert_eq!(loaded.len(), memory.len());
        for (a, b) in loaded.images.iter().zip(&memory.images) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.metadata, b.metadata);
            assert_eq!(a.objects, b.objects);
            assert!(a.image == b.image, "pixels of image {} differ", a.id);
        }
    }

    #[test]
    fn uavdt_like_preset_is_dominated_by_one_domain() {
        let (spec, layout, balance) = preset("uavdt-like").unwrap();
        let ds = generate_split(&spec, &layout, 400, &balance, Split::Train).unwrap();
        let mut objects = [0usize; 3];
        for img in &ds.images {
            objects[layout.bin_index(&img.metadata).unwrap()] += img.objects.len();
        }
        let total: usize = objects.iter().sum();
        assert!(objects[1] as f64 > 0.7 * total as f64, "{objects:?}");
        assert!(preset("nope").is_err());
    }
}

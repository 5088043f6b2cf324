//! Dataset directory I/O.
//!
//! A split directory holds `images/{id}.png` (8-bit grayscale), a COCO-style
//! `annotations.json` index, and a `metadata.json` sidecar with one record per
//! image. Pixel values are stored as `k / 255`, so in-memory images produced by
//! the generator survive a save/load cycle exactly.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bbox::BBox;
use crate::domain::MetadataRecord;
use crate::error::{Error, Result};

/// Grayscale image, values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(width * height, pixels.len(), "raster size mismatch");
        Raster { width, height, pixels }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Raster::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Rounds every pixel to the nearest representable 8-bit level.
    pub fn quantize(&mut self) {
        for v in &mut self.pixels {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    fn to_luma8(&self) -> image::GrayImage {
        let bytes = self
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    fn from_luma8(img: &image::GrayImage) -> Self {
        Raster::new(
            img.width() as usize,
            img.height() as usize,
            img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }
}

/// One ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    /// Index into the dataset's category list.
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: u64,
    pub image: Raster,
    pub objects: Vec<Annotation>,
    pub metadata: MetadataRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub categories: Vec<Category>,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.categories.len()
    }

    pub fn object_count(&self) -> usize {
        self.images.iter().map(|i| i.objects.len()).sum()
    }

    pub fn category_id(&self, class_id: usize) -> u64 {
        self.categories[class_id].id
    }

    pub fn class_of_category(&self, category_id: u64) -> Option<usize> {
        self.categories.iter().position(|c| c.id == category_id)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationIndex {
    images: Vec<ImageEntry>,
    annotations: Vec<AnnotationEntry>,
    categories: Vec<Category>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageEntry {
    id: u64,
    file: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    image_id: u64,
    bbox: Vec<f64>,
    category_id: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetadataEntry {
    image_id: u64,
    #[serde(flatten)]
    record: MetadataRecord,
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const METADATA_FILE: &str = "metadata.json";
pub const IMAGES_DIR: &str = "images";

/// Writes a split directory. Existing files with the same names are replaced.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let mut index = AnnotationIndex {
        images: Vec::with_capacity(dataset.len()),
        annotations: Vec::new(),
        categories: dataset.categories.clone(),
    };
    let mut sidecar = Vec::with_capacity(dataset.len());
    let mut next_ann = 1;
    for img in &dataset.images {
        let file = format!("{IMAGES_DIR}/{:06}.png", img.id);
        let path = dir.join(&file);
        img.image
            .to_luma8()
            .save(&path)
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        index.images.push(ImageEntry {
            id: img.id,
            file,
            width: img.image.width(),
            height: img.image.height(),
        });
        for obj in &img.objects {
            index.annotations.push(AnnotationEntry {
                id: Some(next_ann),
                image_id: img.id,
                bbox: obj.bbox.to_array().to_vec(),
                category_id: dataset.category_id(obj.class_id),
            });
            next_ann += 1;
        }
        sidecar.push(MetadataEntry {
            image_id: img.id,
            record: img.metadata.clone(),
        });
    }
    write_json(&dir.join(ANNOTATIONS_FILE), &index)?;
    write_json(&dir.join(METADATA_FILE), &sidecar)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

/// Loads a split directory; images come back in index order.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let meta_path = dir.join(METADATA_FILE);
    if !ann_path.is_file() {
        return Err(Error::parse(
            dir.display().to_string(),
            format!("no {ANNOTATIONS_FILE} in dataset directory"),
        ));
    }
    if !meta_path.is_file() {
        return Err(Error::parse(
            dir.display().to_string(),
            format!("no {METADATA_FILE} in dataset directory"),
        ));
    }
    let index: AnnotationIndex = read_json(&ann_path)?;
    let sidecar: Vec<MetadataEntry> = read_json(&meta_path)?;
    let ctx = ann_path.display().to_string();

    if index.images.is_empty() {
        return Err(Error::parse(ctx, "annotation index lists no images"));
    }

    let mut metadata: HashMap<u64, MetadataRecord> = HashMap::with_capacity(sidecar.len());
    for entry in sidecar {
        entry.record.validate().map_err(|e| {
            Error::parse(meta_path.display().to_string(), format!("image_id {}: {e}", entry.image_id))
        })?;
        if metadata.insert(entry.image_id, entry.record).is_some() {
            return Err(Error::parse(
                meta_path.display().to_string(),
                format!("duplicate metadata for image_id {}", entry.image_id),
            ));
        }
    }

    let mut positions: BTreeMap<u64, usize> = BTreeMap::new();
    let mut images = Vec::with_capacity(index.images.len());
    for (pos, entry) in index.images.iter().enumerate() {
        if positions.insert(entry.id, pos).is_some() {
            return Err(Error::parse(&ctx, format!("duplicate image id {}", entry.id)));
        }
        let meta = metadata.remove(&entry.id).ok_or_else(|| {
            Error::parse(
                meta_path.display().to_string(),
                format!("image id {} ({}) has no metadata record", entry.id, entry.file),
            )
        })?;
        let path = dir.join(&entry.file);
        let img = image::open(&path)
            .map_err(|e| Error::parse(&ctx, format!("image id {}: cannot read {}: {e}", entry.id, path.display())))?
            .into_luma8();
        let raster = Raster::from_luma8(&img);
        if raster.width() != entry.width || raster.height() != entry.height {
            return Err(Error::parse(
                &ctx,
                format!(
                    "image id {}: index says {}x{}, file is {}x{}",
                    entry.id,
                    entry.width,
                    entry.height,
                    raster.width(),
                    raster.height()
                ),
            ));
        }
        images.push(AnnotatedImage {
            id: entry.id,
            image: raster,
            objects: Vec::new(),
            metadata: meta,
        });
    }
    if let Some(orphan) = metadata.keys().min() {
        return Err(Error::parse(
            meta_path.display().to_string(),
            format!("metadata for image_id {orphan} which is not in the annotation index"),
        ));
    }

    for (i, ann) in index.annotations.iter().enumerate() {
        let what = || match ann.id {
            Some(id) => format!("annotation id {id}"),
            None => format!("annotation #{i}"),
        };
        let pos = *positions
            .get(&ann.image_id)
            .ok_or_else(|| Error::parse(&ctx, format!("{} references unknown image_id {}", what(), ann.image_id)))?;
        let class_id = index
            .categories
            .iter()
            .position(|c| c.id == ann.category_id)
            .ok_or_else(|| Error::parse(&ctx, format!("{} has unknown category_id {}", what(), ann.category_id)))?;
        let bbox = match ann.bbox.as_slice() {
            &[x, y, w, h] => BBox::new(x, y, w, h),
            other => {
                return Err(Error::parse(
                    &ctx,
                    format!("{}: bbox must have 4 values, got {}", what(), other.len()),
                ))
            }
        };
        let img = &mut images[pos];
        if !bbox.is_valid()
            || bbox.x < 0.0
            || bbox.y < 0.0
            || bbox.x + bbox.w > img.image.width() as f64
            || bbox.y + bbox.h > img.image.height() as f64
        {
            return Err(Error::parse(&ctx, format!("{}: malformed bbox {:?}", what(), ann.bbox)));
        }
        img.objects.push(Annotation { bbox, class_id });
    }

    Ok(Dataset {
        categories: index.categories,
        images,
    })
}

/// SHA-256 over the index, the sidecar, and every image file in index order.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let index: AnnotationIndex = read_json(&ann_path)?;
    let mut hasher = Sha256::new();
    let mut files: Vec<PathBuf> = vec![ann_path, dir.join(METADATA_FILE)];
    files.extend(index.images.iter().map(|e| dir.join(&e.file)));
    for path in files {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex(&hasher.finalize()))
}

/// SHA-256 over image ids, sizes, pixels, objects and metadata. Unlike
/// [`dataset_digest`] it needs no files, and a saved-then-loaded split
/// hashes the same as the one that was saved.
pub fn content_digest(dataset: &Dataset) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&dataset.categories).expect("categories serialize"));
    for img in &dataset.images {
        hasher.update(img.id.to_le_bytes());
        hasher.update((img.image.width() as u64).to_le_bytes());
        hasher.update((img.image.height() as u64).to_le_bytes());
        for p in img.image.pixels() {
            hasher.update(p.to_le_bytes());
        }
        hasher.update((img.objects.len() as u64).to_le_bytes());
        for obj in &img.objects {
            for v in obj.bbox.to_array() {
                hasher.update(v.to_le_bytes());
            }
            hasher.update((obj.class_id as u64).to_le_bytes());
        }
        hasher.update(serde_json::to_vec(&img.metadata).expect("metadata serializes"));
    }
    hex(&hasher.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

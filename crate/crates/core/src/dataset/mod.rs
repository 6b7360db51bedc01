//! Unpaired makeup dataset: directory index, preprocessing, region masks,
//! landmark heatmaps and seeded batch sampling.
//!
//! Expected layout under the dataset root:
//!
//! ```text
//! images/makeup/*.png|jpg      segs/makeup/<same stem>.png
//! images/non-makeup/*.png|jpg  segs/non-makeup/<same stem>.png
//! landmarks/{makeup,non-makeup}/<stem>.txt   (optional, "x y" per line)
//! ```

mod heatmap;
mod imaging;
mod masks;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use self::heatmap::{landmark_heatmap, parse_landmarks, Heatmap};
pub use self::imaging::{decode_image, preprocess_image, ImageTensor};
pub use self::masks::{derive_region_masks, label, LabelMap, Mask, RegionMasks};
use crate::autograd::Tensor;
use crate::domain::Domain;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset layout violated: missing directory {0}")]
    MissingDirectory(PathBuf),
    #[error("image {0} has no parsing map")]
    OrphanImage(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {what}: {message}")]
    Decode { what: String, message: String },
    #[error("expected an RGB image, got {channels} channel(s)")]
    NonRgbInput { channels: u8 },
    #[error("parsing label {0} is outside the 19-class convention")]
    UnknownLabel(u8),
    #[error("landmark ({x}, {y}) outside {resolution}x{resolution} image")]
    OutOfBoundsLandmark { x: f64, y: f64, resolution: usize },
    #[error("malformed landmark file: {0}")]
    Landmarks(String),
    #[error("domain {0:?} has no images")]
    EmptyDomain(Domain),
    #[error("parsing map is {got}x{got}, image is {want}x{want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("batch size must be at least 1")]
    ZeroBatch,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Paths of every image, keyed by `"<domain dir>/<file name>"`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub resolution: usize,
    pub makeup: Vec<String>,
    pub non_makeup: Vec<String>,
    pub seg_paths: BTreeMap<String, PathBuf>,
    pub landmark_paths: BTreeMap<String, PathBuf>,
}

impl DatasetIndex {
    pub fn ids(&self, domain: Domain) -> &[String] {
        match domain {
            Domain::Makeup => &self.makeup,
            Domain::NonMakeup => &self.non_makeup,
        }
    }

    /// `(makeup, non-makeup)` counts.
    pub fn counts(&self) -> (usize, usize) {
        (self.makeup.len(), self.non_makeup.len())
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(id)
    }
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let io = |source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn has_ext(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| exts.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Index the dataset directory. Parsing maps may share the image's file name
/// or its stem with a `.png` extension.
pub fn load_manifest(root: &Path, resolution: usize) -> Result<DatasetIndex, DatasetError> {
    let mut index = DatasetIndex {
        root: root.to_path_buf(),
        resolution,
        makeup: Vec::new(),
        non_makeup: Vec::new(),
        seg_paths: BTreeMap::new(),
        landmark_paths: BTreeMap::new(),
    };
    for domain in [Domain::Makeup, Domain::NonMakeup] {
        let img_dir = root.join("images").join(domain.dir_name());
        let seg_dir = root.join("segs").join(domain.dir_name());
        for d in [&img_dir, &seg_dir] {
            if !d.is_dir() {
                return Err(DatasetError::MissingDirectory(d.clone()));
            }
        }
        let lm_dir = root.join("landmarks").join(domain.dir_name());
        let mut ids = Vec::new();
        for path in list_dir(&img_dir)? {
            if !has_ext(&path, IMAGE_EXTENSIONS) {
                continue;
            }
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let stem = path.file_stem().and_then(|n| n.to_str()).unwrap_or_default();
            let id = format!("{}/{}", domain.dir_name(), name);
            let seg = [seg_dir.join(name), seg_dir.join(format!("{stem}.png"))]
                .into_iter()
                .find(|p| p.is_file())
                .ok_or_else(|| DatasetError::OrphanImage(id.clone()))?;
            index.seg_paths.insert(id.clone(), seg);
            let lm = lm_dir.join(format!("{stem}.txt"));
            if lm.is_file() {
                index.landmark_paths.insert(id.clone(), lm);
            }
            ids.push(id);
        }
        match domain {
            Domain::Makeup => index.makeup = ids,
            Domain::NonMakeup => index.non_makeup = ids,
        }
    }
    log::info!(
        "indexed {} makeup / {} non-makeup images under {}",
        index.makeup.len(),
        index.non_makeup.len(),
        root.display()
    );
    Ok(index)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, DatasetError> {
    std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_image_file(path: &Path, resolution: usize) -> Result<ImageTensor, DatasetError> {
    let raw = decode_image(&read_bytes(path)?).map_err(|e| match e {
        DatasetError::Decode { message, .. } => DatasetError::Decode {
            what: path.display().to_string(),
            message,
        },
        other => other,
    })?;
    preprocess_image(&raw, resolution)
}

pub fn load_label_map(path: &Path, resolution: usize) -> Result<LabelMap, DatasetError> {
    let raw = decode_image(&read_bytes(path)?)?;
    Ok(LabelMap::from_image(&raw, resolution))
}

/// Read landmarks given in `source_size` pixel coordinates and rescale them
/// to `resolution`.
pub fn load_landmarks(
    path: &Path,
    source_size: (u32, u32),
    resolution: usize,
) -> Result<Vec<(f64, f64)>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let sx = resolution as f64 / source_size.0 as f64;
    let sy = resolution as f64 / source_size.1 as f64;
    Ok(parse_landmarks(&text)?
        .into_iter()
        .map(|(x, y)| (x * sx, y * sy))
        .collect())
}

/// One preprocessed dataset entry.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub domain: Domain,
    pub image: ImageTensor,
    pub masks: RegionMasks,
    pub heatmap: Heatmap,
    pub has_landmarks: bool,
}

/// Everything needed to turn a dataset entry into network inputs.
#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    pub resolution: usize,
    pub eye_ring_px: usize,
    pub heatmap_sigma: f64,
}

pub fn load_sample(
    index: &DatasetIndex,
    id: &str,
    domain: Domain,
    opts: &LoadOptions,
) -> Result<Sample, DatasetError> {
    let res = opts.resolution;
    let path = index.image_path(id);
    let bytes = read_bytes(&path)?;
    let raw = decode_image(&bytes)?;
    let image = preprocess_image(&raw, res)?;
    let seg = index
        .seg_paths
        .get(id)
        .ok_or_else(|| DatasetError::OrphanImage(id.to_string()))?;
    let masks = derive_region_masks(&load_label_map(seg, res)?, opts.eye_ring_px)?;
    let (heatmap, has_landmarks) = match index.landmark_paths.get(id) {
        Some(lm) => {
            let pts = load_landmarks(lm, (raw.width(), raw.height()), res)?;
            (landmark_heatmap(&pts, res, opts.heatmap_sigma)?, true)
        }
        None => (Heatmap::zeros(res), false),
    };
    Ok(Sample {
        id: id.to_string(),
        domain,
        image,
        masks,
        heatmap,
        has_landmarks,
    })
}

/// Identifiers chosen for one training pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairDraw {
    pub source_domain: Domain,
    pub source: usize,
    pub reference: usize,
    /// Second reference from the same domain (diversity term, style mode).
    pub alt_reference: usize,
}

/// Seeded draw of `batch_size` cross-domain pairs, with replacement.
/// Indices refer to the per-domain id lists.
pub fn draw_pairs(
    counts: [usize; 2],
    seed: u64,
    batch_size: usize,
) -> Result<Vec<PairDraw>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::ZeroBatch);
    }
    for d in Domain::ALL {
        if counts[d.index()] == 0 {
            return Err(DatasetError::EmptyDomain(d));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..batch_size)
        .map(|_| {
            let source_domain = if rng.random_bool(0.5) {
                Domain::Makeup
            } else {
                Domain::NonMakeup
            };
            let other = counts[source_domain.opposite().index()];
            PairDraw {
                source_domain,
                source: rng.random_range(0..counts[source_domain.index()]),
                reference: rng.random_range(0..other),
                alt_reference: rng.random_range(0..other),
            }
        })
        .collect())
}

/// Index-level view of [`draw_pairs`]: `(source id, reference id)` per pair.
pub fn sample_identifiers(
    index: &DatasetIndex,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<(String, String)>, DatasetError> {
    let counts = [index.non_makeup.len(), index.makeup.len()];
    Ok(draw_pairs(counts, seed, batch_size)?
        .into_iter()
        .map(|p| {
            let src = &index.ids(p.source_domain)[p.source];
            let rf = &index.ids(p.source_domain.opposite())[p.reference];
            (src.clone(), rf.clone())
        })
        .collect())
}

/// Region masks of a batch as `[N, 1, H, W]` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMasks {
    pub lips: Tensor,
    pub eyes: Tensor,
    pub face: Tensor,
    pub full_face: Tensor,
}

impl BatchMasks {
    pub fn stack(masks: &[&RegionMasks]) -> Self {
        let pick = |f: fn(&RegionMasks) -> &Mask| {
            let parts: Vec<Tensor> = masks
                .iter()
                .map(|m| {
                    let t = f(m).tensor();
                    let s = t.shape();
                    t.clone().reshape(&[1, 1, s[1], s[2]])
                })
                .collect();
            Tensor::stack(&parts)
        };
        Self {
            lips: pick(|m| &m.lips),
            eyes: pick(|m| &m.eyes),
            face: pick(|m| &m.face),
            full_face: pick(|m| &m.full_face),
        }
    }
}

/// A training batch of cross-domain (source, reference) pairs.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub source_ids: Vec<String>,
    pub reference_ids: Vec<String>,
    pub source_images: Tensor,
    pub source_domains: Vec<Domain>,
    pub reference_images: Tensor,
    pub reference_domains: Vec<Domain>,
    pub alt_reference_images: Tensor,
    pub source_masks: BatchMasks,
    pub reference_masks: BatchMasks,
    pub alt_reference_masks: BatchMasks,
    pub source_heatmaps: Tensor,
    /// False where the heatmap is the all-zero fallback.
    pub landmarks_present: Vec<bool>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.source_domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_domains.is_empty()
    }

    pub fn target_domains(&self) -> &[Domain] {
        &self.reference_domains
    }
}

/// Fully preprocessed dataset held in memory.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub resolution: usize,
    /// Indexed by `Domain::index()`, in index order.
    pub samples: [Vec<Sample>; 2],
}

impl LoadedDataset {
    pub fn load(index: &DatasetIndex, opts: &LoadOptions) -> Result<Self, DatasetError> {
        let mut samples: [Vec<Sample>; 2] = [Vec::new(), Vec::new()];
        for d in Domain::ALL {
            for id in index.ids(d) {
                samples[d.index()].push(load_sample(index, id, d, opts)?);
            }
        }
        Ok(Self {
            resolution: opts.resolution,
            samples,
        })
    }

    pub fn from_samples(resolution: usize, all: Vec<Sample>) -> Self {
        let mut samples: [Vec<Sample>; 2] = [Vec::new(), Vec::new()];
        for s in all {
            samples[s.domain.index()].push(s);
        }
        Self {
            resolution,
            samples,
        }
    }

    pub fn counts(&self) -> [usize; 2] {
        [self.samples[0].len(), self.samples[1].len()]
    }

    /// Deterministic batch for `seed`; same draw as [`sample_identifiers`].
    pub fn sample_training_batch(
        &self,
        seed: u64,
        batch_size: usize,
    ) -> Result<TrainingBatch, DatasetError> {
        let draws = draw_pairs(self.counts(), seed, batch_size)?;
        let mut src = Vec::new();
        let mut rf = Vec::new();
        let mut alt = Vec::new();
        for d in &draws {
            let other = d.source_domain.opposite().index();
            src.push(&self.samples[d.source_domain.index()][d.source]);
            rf.push(&self.samples[other][d.reference]);
            alt.push(&self.samples[other][d.alt_reference]);
        }
        let images = |v: &[&Sample]| {
            Tensor::stack(&v.iter().map(|s| s.image.as_batch()).collect::<Vec<_>>())
        };
        let masks = |v: &[&Sample]| BatchMasks::stack(&v.iter().map(|s| &s.masks).collect::<Vec<_>>());
        let res = self.resolution;
        Ok(TrainingBatch {
            source_ids: src.iter().map(|s| s.id.clone()).collect(),
            reference_ids: rf.iter().map(|s| s.id.clone()).collect(),
            source_images: images(&src),
            source_domains: src.iter().map(|s| s.domain).collect(),
            reference_images: images(&rf),
            reference_domains: rf.iter().map(|s| s.domain).collect(),
            alt_reference_images: images(&alt),
            source_masks: masks(&src),
            reference_masks: masks(&rf),
            alt_reference_masks: masks(&alt),
            source_heatmaps: Tensor::stack(
                &src.iter()
                    .map(|s| s.heatmap.tensor().clone().reshape(&[1, 1, res, res]))
                    .collect::<Vec<_>>(),
            ),
            landmarks_present: src.iter().map(|s| s.has_landmarks).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_seeded_and_cross_domain() {
        let a = draw_pairs([3, 5], 11, 8).unwrap();
        let b = draw_pairs([3, 5], 11, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, draw_pairs([3, 5], 12, 8).unwrap());
        for p in &a {
            let n_src = [3, 5][p.source_domain.index()];
            let n_ref = [3, 5][p.source_domain.opposite().index()];
            assert!(p.source < n_src && p.reference < n_ref && p.alt_reference < n_ref);
        }
    }

    #[test]
    fn single_image_domain_samples_with_replacement() {
        let draws = draw_pairs([1, 1], 3, 4).unwrap();
        assert_eq!(draws.len(), 4);
        assert!(draws.iter().all(|p| p.source == 0 && p.reference == 0));
    }

    #[test]
    fn empty_domain_and_zero_batch_fail() {
        assert!(matches!(
            draw_pairs([0, 2], 0, 1),
            Err(DatasetError::EmptyDomain(Domain::NonMakeup))
        ));
        assert!(matches!(draw_pairs([2, 2], 0, 0), Err(DatasetError::ZeroBatch)));
    }

    #[test]
    fn missing_layout_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_manifest(dir.path(), 64),
            Err(DatasetError::MissingDirectory(_))
        ));
    }

    #[test]
    fn empty_layout_indexes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        for sub in ["images/makeup", "images/non-makeup", "segs/makeup", "segs/non-makeup"] {
            std::fs::create_dir_all(dir.path().join(sub)).unwrap();
        }
        let idx = load_manifest(dir.path(), 64).unwrap();
        assert_eq!(idx.counts(), (0, 0));
    }

    #[test]
    fn orphan_image_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        for sub in ["images/makeup", "images/non-makeup", "segs/makeup", "segs/non-makeup"] {
            std::fs::create_dir_all(dir.path().join(sub)).unwrap();
        }
        image::RgbImage::new(4, 4)
            .save(dir.path().join("images/makeup/a.png"))
            .unwrap();
        assert!(matches!(
            load_manifest(dir.path(), 4),
            Err(DatasetError::OrphanImage(id)) if id == "makeup/a.png"
        ));
    }
}

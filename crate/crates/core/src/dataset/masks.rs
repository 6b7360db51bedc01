//! Region masks from 19-class face-parsing label maps.
//!
//! Label ids follow the CelebAMask-HQ ordering emitted by common face-parsing
//! models: 0 background, 1 skin, 2/3 brows, 4/5 eyes, 6 glasses, 7/8 ears,
//! 9 earring, 10 nose, 11 mouth, 12/13 lips, 14 neck, 15 necklace, 16 cloth,
//! 17 hair, 18 hat.

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage};

use super::DatasetError;
use crate::autograd::Tensor;

pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const L_BROW: u8 = 2;
    pub const R_BROW: u8 = 3;
    pub const L_EYE: u8 = 4;
    pub const R_EYE: u8 = 5;
    pub const NOSE: u8 = 10;
    pub const MOUTH: u8 = 11;
    pub const U_LIP: u8 = 12;
    pub const L_LIP: u8 = 13;
    pub const NECK: u8 = 14;
    pub const HAIR: u8 = 17;
    pub const MAX: u8 = 18;
    /// Labels `1..=LAST_FACIAL` are facial components.
    pub const LAST_FACIAL: u8 = 13;
}

/// Per-pixel parsing labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), height * width);
        Self {
            height,
            width,
            labels,
        }
    }

    pub fn filled(size: usize, value: u8) -> Self {
        Self::new(size, size, vec![value; size * size])
    }

    /// Take the first channel of a decoded label image, nearest-resized.
    pub fn from_image(img: &DynamicImage, resolution: usize) -> Self {
        let mut gray: GrayImage = match img {
            DynamicImage::ImageLuma8(g) => g.clone(),
            other => {
                let rgb = other.to_rgb8();
                GrayImage::from_fn(rgb.width(), rgb.height(), |x, y| {
                    image::Luma([rgb.get_pixel(x, y).0[0]])
                })
            }
        };
        let r = resolution as u32;
        if gray.width() != r || gray.height() != r {
            gray = image::imageops::resize(&gray, r, r, FilterType::Nearest);
        }
        Self::new(resolution, resolution, gray.into_raw())
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("label buffer matches dimensions")
    }

    fn select(&self, pred: impl Fn(u8) -> bool) -> Vec<bool> {
        self.labels.iter().map(|&l| pred(l)).collect()
    }
}

/// Binary `[1, H, W]` mask with entries in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(pub Tensor);

impl Mask {
    fn from_bools(h: usize, w: usize, v: &[bool]) -> Self {
        Mask(Tensor::new(
            vec![1, h, w],
            v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        ))
    }

    pub fn ones(size: usize) -> Self {
        Mask(Tensor::ones(&[1, size, size]))
    }

    pub fn zeros(size: usize) -> Self {
        Mask(Tensor::zeros(&[1, size, size]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v > 0.5).count()
    }
}

/// Loss regions plus the union used to blank hair and background.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub lips: Mask,
    pub eyes: Mask,
    pub face: Mask,
    pub full_face: Mask,
}

impl RegionMasks {
    /// Fallback when no parsing map exists: keep every pixel, no loss regions.
    pub fn unmasked(size: usize) -> Self {
        Self {
            lips: Mask::zeros(size),
            eyes: Mask::zeros(size),
            face: Mask::zeros(size),
            full_face: Mask::ones(size),
        }
    }
}

/// Square (Chebyshev) dilation by `radius` pixels, separable.
fn dilate(src: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return src.to_vec();
    }
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            rows[y * w + x] = (lo..=hi).any(|xx| src[y * w + xx]);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    out
}

/// Lips, eye-shadow ring, face skin and full-face masks.
///
/// The eye-shadow ring is the eye region dilated by `dilation_px`, minus the
/// eyes, brows and hair, restricted to facial components. Face skin is skin
/// plus nose with both other regions removed, so the three loss regions are
/// pairwise disjoint.
pub fn derive_region_masks(
    parsing: &LabelMap,
    dilation_px: usize,
) -> Result<RegionMasks, DatasetError> {
    use label::*;
    if let Some(&bad) = parsing.labels.iter().find(|&&l| l > MAX) {
        return Err(DatasetError::UnknownLabel(bad));
    }
    let (h, w) = (parsing.height, parsing.width);
    let full_face = parsing.select(|l| (1..=LAST_FACIAL).contains(&l));
    let lips = parsing.select(|l| l == U_LIP || l == L_LIP);
    let eye = parsing.select(|l| l == L_EYE || l == R_EYE);
    let excluded = parsing.select(|l| matches!(l, L_EYE | R_EYE | L_BROW | R_BROW | HAIR));
    let grown = dilate(&eye, h, w, dilation_px);
    let ring: Vec<bool> = (0..h * w)
        .map(|i| grown[i] && !excluded[i] && full_face[i] && !lips[i])
        .collect();
    let face: Vec<bool> = parsing
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (l == SKIN || l == NOSE) && !lips[i] && !ring[i])
        .collect();
    Ok(RegionMasks {
        lips: Mask::from_bools(h, w, &lips),
        eyes: Mask::from_bools(h, w, &ring),
        face: Mask::from_bools(h, w, &face),
        full_face: Mask::from_bools(h, w, &full_face),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn product_is_zero(a: &Mask, b: &Mask) -> bool {
        a.0.data().iter().zip(b.0.data()).all(|(x, y)| x * y == 0.0)
    }

    #[test]
    fn no_eyes_gives_empty_ring() {
        let map = LabelMap::filled(8, label::SKIN);
        let m = derive_region_masks(&map, 3).unwrap();
        assert_eq!(m.eyes.count(), 0);
        assert_eq!(m.face.count(), 64);
    }

    #[test]
    fn lip_block_counts() {
        let mut labels = vec![label::BACKGROUND; 100];
        for y in 3..7 {
            for x in 2..6 {
                labels[y * 10 + x] = label::U_LIP;
            }
        }
        let m = derive_region_masks(&LabelMap::new(10, 10, labels), 2).unwrap();
        assert_eq!(m.lips.count(), 16);
        assert_eq!(m.face.count(), 0);
        assert_eq!(m.eyes.count(), 0);
        assert_eq!(m.full_face.count(), 16);
    }

    #[test]
    fn zero_dilation_has_no_ring() {
        let mut labels = vec![label::SKIN; 64];
        labels[27] = label::L_EYE;
        labels[28] = label::R_EYE;
        let m = derive_region_masks(&LabelMap::new(8, 8, labels.clone()), 0).unwrap();
        assert_eq!(m.eyes.count(), 0);
        let m = derive_region_masks(&LabelMap::new(8, 8, labels), 1).unwrap();
        // 3x4 block around the two eye pixels, minus the eyes
        assert_eq!(m.eyes.count(), 10);
        assert_eq!(m.face.count(), 64 - 2 - 10);
    }

    #[test]
    fn unknown_label_is_an_error() {
        let map = LabelMap::filled(4, 19);
        assert!(matches!(
            derive_region_masks(&map, 1),
            Err(DatasetError::UnknownLabel(19))
        ));
    }

    proptest! {
        #[test]
        fn regions_disjoint_and_inside_full_face(
            labels in proptest::collection::vec(0u8..=18, 144),
            radius in 0usize..4,
        ) {
            let m = derive_region_masks(&LabelMap::new(12, 12, labels), radius).unwrap();
            prop_assert!(product_is_zero(&m.lips, &m.eyes));
            prop_assert!(product_is_zero(&m.lips, &m.face));
            prop_assert!(product_is_zero(&m.eyes, &m.face));
            for mask in [&m.lips, &m.eyes, &m.face] {
                for (v, f) in mask.0.data().iter().zip(m.full_face.0.data()) {
                    prop_assert!(*v == 0.0 || *v == 1.0);
                    prop_assert!(*v <= *f);
                }
            }
        }
    }
}

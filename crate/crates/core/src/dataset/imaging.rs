use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};

use super::DatasetError;
use crate::autograd::Tensor;

/// A single image as a `[3, H, W]` tensor with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(pub Tensor);

impl ImageTensor {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn resolution(&self) -> usize {
        self.0.shape()[1]
    }

    /// `[1, 3, H, W]` view for single-image network calls.
    pub fn as_batch(&self) -> Tensor {
        let s = self.0.shape();
        self.0.clone().reshape(&[1, s[0], s[1], s[2]])
    }

    /// Take sample `i` of a `[N, 3, H, W]` batch.
    pub fn from_batch(batch: &Tensor, i: usize) -> Self {
        let s = batch.shape();
        Self(batch.batch_item(i).reshape(&[s[1], s[2], s[3]]))
    }

    /// Quantize to 8-bit: `round(clamp((v + 1) * 127.5, 0, 255))`.
    pub fn to_rgb8(&self) -> RgbImage {
        let s = self.0.shape();
        let (h, w) = (s[1], s[2]);
        let d = self.0.data();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| {
                let v = d[(c * h + y as usize) * w + x as usize];
                ((v + 1.0) * 127.5).clamp(0.0, 255.0).round() as u8
            };
            image::Rgb([at(0), at(1), at(2)])
        })
    }

    /// Elementwise product with a `[1, H, W]` mask, broadcast over channels.
    pub fn masked(&self, mask: &Tensor) -> ImageTensor {
        let s = self.0.shape();
        let hw = s[1] * s[2];
        let mut out = self.0.clone();
        for plane in out.data_mut().chunks_mut(hw) {
            for (v, m) in plane.iter_mut().zip(mask.data()) {
                *v *= m;
            }
        }
        ImageTensor(out)
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<DynamicImage, DatasetError> {
    image::load_from_memory(bytes).map_err(|e| DatasetError::Decode {
        what: "in-memory image".into(),
        message: e.to_string(),
    })
}

/// Resize (bilinear) and map 8-bit channel values with `v / 127.5 - 1`.
///
/// Images already at `resolution`² are not resampled, so the mapping is
/// exactly invertible on the 8-bit lattice.
pub fn preprocess_image(raw: &DynamicImage, resolution: usize) -> Result<ImageTensor, DatasetError> {
    let channels = raw.color().channel_count();
    if channels < 3 {
        return Err(DatasetError::NonRgbInput { channels });
    }
    let mut rgb = raw.to_rgb8();
    let r = resolution as u32;
    if rgb.width() != r || rgb.height() != r {
        rgb = image::imageops::resize(&rgb, r, r, FilterType::Triangle);
    }
    let hw = resolution * resolution;
    let mut data = vec![0.0; 3 * hw];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px.0[c] as f64 / 127.5 - 1.0;
        }
    }
    Ok(ImageTensor(Tensor::new(vec![3, resolution, resolution], data)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(v: u8) -> DynamicImage {
        DynamicImage::ImageRgb8(RgbImage::from_pixel(4, 4, image::Rgb([v, v, v])))
    }

    #[test]
    fn range_endpoints() {
        let lo = preprocess_image(&uniform(0), 4).unwrap();
        assert!(lo.0.data().iter().all(|&v| v == -1.0));
        let hi = preprocess_image(&uniform(255), 4).unwrap();
        assert!(hi.0.data().iter().all(|&v| v == 1.0));
        let mid = preprocess_image(&uniform(128), 4).unwrap();
        assert!(mid.0.data().iter().all(|&v| (v - 0.003_921_568_627_451).abs() < 1e-12));
    }

    #[test]
    fn grayscale_is_rejected() {
        let g = DynamicImage::ImageLuma8(image::GrayImage::new(4, 4));
        assert!(matches!(
            preprocess_image(&g, 4),
            Err(DatasetError::NonRgbInput { channels: 1 })
        ));
    }

    #[test]
    fn garbage_bytes_fail_to_decode() {
        assert!(matches!(decode_image(b"not an image"), Err(DatasetError::Decode { .. })));
    }

    #[test]
    fn resize_reaches_resolution() {
        let t = preprocess_image(&uniform(10), 8).unwrap();
        assert_eq!(t.0.shape(), &[3, 8, 8]);
    }

    proptest! {
        #[test]
        fn lattice_round_trip_and_monotone(a in any::<u8>(), b in any::<u8>()) {
            let exact = DynamicImage::ImageRgb8(RgbImage::from_pixel(1, 1, image::Rgb([a, b, a])));
            let t = preprocess_image(&exact, 1).unwrap();
            let back = t.to_rgb8();
            prop_assert_eq!(back.get_pixel(0, 0).0, [a, b, a]);
            let (va, vb) = (t.0.data()[0], t.0.data()[1]);
            prop_assert_eq!(a < b, va < vb);
            prop_assert_eq!(a == b, va == vb);
        }
    }
}

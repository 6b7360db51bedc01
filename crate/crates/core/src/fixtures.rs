//! Synthetic cartoon faces with parsing maps and landmarks, laid out like a
//! real makeup dataset. Used for smoke tests and the bundled fixtures.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::label;
use crate::domain::Domain;

/// Size and seed of a synthetic dataset.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub makeup: usize,
    pub non_makeup: usize,
    pub size: u32,
    pub seed: u64,
    pub landmarks: bool,
}

/// One rendered face: RGB image, parsing labels and landmark points.
pub struct SyntheticFace {
    pub image: RgbImage,
    pub labels: GrayImage,
    pub landmarks: Vec<(f64, f64)>,
}

fn inside_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

/// Render a face. Makeup faces get saturated lips, an eye-shadow ring and
/// blush; bare faces keep lips close to the skin tone.
pub fn synthetic_face(size: u32, domain: Domain, seed: u64) -> SyntheticFace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let skin = [
        rng.random_range(170.0..235.0),
        rng.random_range(120.0..185.0),
        rng.random_range(95.0..160.0),
    ];
    let hair = [
        rng.random_range(20.0..90.0),
        rng.random_range(10.0..60.0),
        rng.random_range(5.0..40.0),
    ];
    let bg = [rng.random_range(60.0..200.0); 3];
    let (lip, shadow, blush) = match domain {
        Domain::Makeup => (
            [
                rng.random_range(150.0..220.0),
                rng.random_range(10.0..50.0),
                rng.random_range(40.0..110.0),
            ],
            Some([
                rng.random_range(60.0..140.0),
                rng.random_range(30.0..80.0),
                rng.random_range(90.0..170.0),
            ]),
            0.25,
        ),
        Domain::NonMakeup => (lerp(skin, [170.0, 90.0, 90.0], 0.35), None, 0.0),
    };
    let cx = s * (0.5 + rng.random_range(-0.03..0.03));
    let cy = s * 0.55;
    let (frx, fry) = (s * 0.30, s * 0.38);
    let eye_y = s * 0.47;
    let eyes = [(cx - s * 0.12, eye_y), (cx + s * 0.12, eye_y)];
    let (erx, ery) = (s * 0.06, s * 0.03);
    let mouth = (cx, s * 0.75);
    let (mrx, mry) = (s * 0.12, s * 0.045);

    let mut image = RgbImage::new(size, size);
    let mut labels = GrayImage::new(size, size);
    for py in 0..size {
        for px in 0..size {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut lab = label::BACKGROUND;
            let mut col = bg;
            if inside_ellipse(x, y, cx, cy - s * 0.12, frx * 1.1, fry * 0.95) {
                lab = label::HAIR;
                col = hair;
            }
            if inside_ellipse(x, y, cx, cy, frx, fry) {
                lab = label::SKIN;
                col = skin;
                let cheek = eyes
                    .iter()
                    .any(|&(ex, _)| inside_ellipse(x, y, ex, s * 0.62, s * 0.07, s * 0.05));
                if cheek && blush > 0.0 {
                    col = lerp(col, lip, blush);
                }
                if (x - cx).abs() < s * 0.03 && y > s * 0.52 && y < s * 0.66 {
                    lab = label::NOSE;
                    col = lerp(skin, [0.0; 3], 0.08);
                }
                for (i, &(ex, ey)) in eyes.iter().enumerate() {
                    if let Some(sh) = shadow {
                        if inside_ellipse(x, y, ex, ey - s * 0.01, erx * 1.8, ery * 2.6) {
                            col = lerp(col, sh, 0.7);
                        }
                    }
                    if (y - (ey - s * 0.075)).abs() < s * 0.012 && (x - ex).abs() < erx * 1.1 {
                        lab = if i == 0 { label::L_BROW } else { label::R_BROW };
                        col = hair;
                    }
                    if inside_ellipse(x, y, ex, ey, erx, ery) {
                        lab = if i == 0 { label::L_EYE } else { label::R_EYE };
                        col = [240.0, 240.0, 240.0];
                        if inside_ellipse(x, y, ex, ey, ery, ery) {
                            col = [40.0, 30.0, 25.0];
                        }
                    }
                }
                if inside_ellipse(x, y, mouth.0, mouth.1, mrx, mry) {
                    lab = if y < mouth.1 { label::U_LIP } else { label::L_LIP };
                    col = lip;
                }
            }
            let noise = rng.random_range(-4.0..4.0);
            let px_col = col.map(|c| (c + noise).round().clamp(0.0, 255.0) as u8);
            image.put_pixel(px, py, Rgb(px_col));
            labels.put_pixel(px, py, Luma([lab]));
        }
    }
    let landmarks = vec![
        eyes[0],
        eyes[1],
        (cx, s * 0.64),
        (mouth.0 - mrx, mouth.1),
        (mouth.0 + mrx, mouth.1),
        (cx, cy + fry * 0.95),
    ];
    SyntheticFace {
        image,
        labels,
        landmarks,
    }
}

/// Write `images/`, `segs/` and optionally `landmarks/` trees under `root`.
pub fn write_synthetic_dataset(root: &Path, spec: &SyntheticSpec) -> std::io::Result<()> {
    for (domain, count) in [(Domain::Makeup, spec.makeup), (Domain::NonMakeup, spec.non_makeup)] {
        let dir = domain.dir_name();
        let img_dir = root.join("images").join(dir);
        let seg_dir = root.join("segs").join(dir);
        let lm_dir = root.join("landmarks").join(dir);
        fs::create_dir_all(&img_dir)?;
        fs::create_dir_all(&seg_dir)?;
        if spec.landmarks {
            fs::create_dir_all(&lm_dir)?;
        }
        for i in 0..count {
            let seed = spec
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add((domain.index() * 10_000 + i) as u64);
            let face = synthetic_face(spec.size, domain, seed);
            let name = format!("{i:03}.png");
            face.image
                .save(img_dir.join(&name))
                .map_err(std::io::Error::other)?;
            face.labels
                .save(seg_dir.join(&name))
                .map_err(std::io::Error::other)?;
            if spec.landmarks {
                let text: String = face
                    .landmarks
                    .iter()
                    .map(|(x, y)| format!("{x:.2} {y:.2}\n"))
                    .collect();
                fs::write(lm_dir.join(format!("{i:03}.txt")), text)?;
            }
        }
    }
    Ok(())
}

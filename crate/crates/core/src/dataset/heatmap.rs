use super::DatasetError;
use crate::autograd::Tensor;

/// Single-channel landmark heatmap `[1, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap(pub Tensor);

impl Heatmap {
    pub fn zeros(resolution: usize) -> Self {
        Heatmap(Tensor::zeros(&[1, resolution, resolution]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Pointwise maximum of unit-peak isotropic Gaussian bumps (std `sigma`),
/// one per landmark, clipped to `[0, 1]`. Coordinates are pixel positions at
/// `resolution`. Coincident landmarks therefore yield the same map as one.
pub fn landmark_heatmap(
    landmarks: &[(f64, f64)],
    resolution: usize,
    sigma: f64,
) -> Result<Heatmap, DatasetError> {
    let limit = resolution as f64;
    for &(x, y) in landmarks {
        if !(x >= 0.0 && x < limit && y >= 0.0 && y < limit) {
            return Err(DatasetError::OutOfBoundsLandmark { x, y, resolution });
        }
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut t = Tensor::zeros(&[1, resolution, resolution]);
    let data = t.data_mut();
    for py in 0..resolution {
        for px in 0..resolution {
            let mut acc = 0.0f64;
            for &(x, y) in landmarks {
                let d2 = (px as f64 - x).powi(2) + (py as f64 - y).powi(2);
                acc = acc.max((-d2 * inv).exp());
            }
            data[py * resolution + px] = acc.clamp(0.0, 1.0);
        }
    }
    Ok(Heatmap(t))
}

/// Parse a landmark file: one `x y` pair per non-empty line.
pub fn parse_landmarks(text: &str) -> Result<Vec<(f64, f64)>, DatasetError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let mut it = line.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y)), None) => Ok((x, y)),
                _ => Err(DatasetError::Landmarks(format!("bad line {line:?}"))),
            }
        })
        .collect()
}

//! Procedural toy datasets: Gaussian rings, checkerboards, two moons and
//! 8x8 shape images.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::denoiser::ImageShape;
use crate::flows::FiniteDataset;
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ToyKind {
    /// `modes` equally spaced Gaussian blobs on a circle.
    GaussianRing {
        modes: usize,
        radius: f64,
        std: f64,
    },
    /// Uniform over the dark cells of a `cells x cells` board spanning
    /// `[-half_width, half_width]^2`.
    Checkerboard {
        cells: usize,
        half_width: f64,
    },
    TwoMoons {
        noise: f64,
    },
    /// 8x8 shapes in `[-1, 1]`; two channels give each shape a colour.
    TinyShapes {
        channels: usize,
    },
}

impl ToyKind {
    /// The canonical 8-ring benchmark: 8 modes, radius 2, std 0.1.
    pub const RING8: ToyKind = ToyKind::GaussianRing {
        modes: 8,
        radius: 2.0,
        std: 0.1,
    };

    pub fn name(&self) -> &'static str {
        match self {
            ToyKind::GaussianRing { .. } => "gaussian-ring",
            ToyKind::Checkerboard { .. } => "checkerboard",
            ToyKind::TwoMoons { .. } => "two-moons",
            ToyKind::TinyShapes { .. } => "tiny-shapes",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ToyKind::TinyShapes { channels } => channels * 64,
            _ => 2,
        }
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        match *self {
            ToyKind::TinyShapes { channels } => Some(ImageShape {
                channels,
                height: 8,
                width: 8,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySpec {
    pub kind: ToyKind,
    pub count: usize,
    pub seed: u64,
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.count > 0
            && match self.kind {
                ToyKind::GaussianRing { modes, radius, std } => modes > 0 && radius.is_finite() && std >= 0.0,
                ToyKind::Checkerboard { cells, half_width } => cells >= 2 && half_width > 0.0,
                ToyKind::TwoMoons { noise } => noise >= 0.0,
                ToyKind::TinyShapes { channels } => channels == 1 || channels == 2,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(alloc::format!("invalid toy spec {self:?}")))
        }
    }
}

/// Generates the dataset; equal seeds give identical data.
pub fn generate(spec: &ToySpec) -> Result<FiniteDataset> {
    generate_labeled(spec).map(|(d, _)| d)
}

/// Like [`generate`], also returning each point's mode, moon or shape class.
pub fn generate_labeled(spec: &ToySpec) -> Result<(FiniteDataset, Vec<u64>)> {
    spec.validate()?;
    let mut r = rng::seeded(spec.seed);
    let mut points = Vec::with_capacity(spec.count * spec.kind.dim());
    let mut labels = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let label = match spec.kind {
            ToyKind::GaussianRing { modes, radius, std } => {
                let m = rng::index(&mut r, modes);
                let a = 2.0 * PI * m as f64 / modes as f64;
                points.push(radius * libm::cos(a) + std * rng::normal(&mut r));
                points.push(radius * libm::sin(a) + std * rng::normal(&mut r));
                m
            }
            ToyKind::Checkerboard { cells, half_width } => {
                let cell = 2.0 * half_width / cells as f64;
                // Dark cells are those with even (row + col).
                let dark: Vec<(usize, usize)> = (0..cells)
                    .flat_map(|i| (0..cells).map(move |j| (i, j)))
                    .filter(|(i, j)| (i + j) % 2 == 0)
                    .collect();
                let k = rng::index(&mut r, dark.len());
                let (i, j) = dark[k];
                points.push(-half_width + cell * (j as f64 + rng::uniform(&mut r, 0.0, 1.0)));
                points.push(-half_width + cell * (i as f64 + rng::uniform(&mut r, 0.0, 1.0)));
                k
            }
            ToyKind::TwoMoons { noise } => {
                let upper = rng::index(&mut r, 2);
                let a = rng::uniform(&mut r, 0.0, PI);
                let (x, y) = if upper == 0 {
                    (libm::cos(a), libm::sin(a))
                } else {
                    (1.0 - libm::cos(a), 0.5 - libm::sin(a))
                };
                points.push(x - 0.5 + noise * rng::normal(&mut r));
                points.push(y - 0.25 + noise * rng::normal(&mut r));
                upper
            }
            ToyKind::TinyShapes { channels } => {
                let (img, class) = shape_image(&mut r, channels);
                points.extend(img);
                class
            }
        };
        labels.push(label as u64);
    }
    Ok((FiniteDataset::new(spec.kind.dim(), points)?, labels))
}

const SHAPE_CLASSES: usize = 4;

/// One 8x8 image: square, disc, bar or cross on a `-1` background.
fn shape_image(r: &mut Rng, channels: usize) -> (Vec<f64>, usize) {
    let class = rng::index(r, SHAPE_CLASSES);
    let size = 3 + rng::index(r, 3); // 3..=5
    let x0 = rng::index(r, 8 - size + 1) as i64;
    let y0 = rng::index(r, 8 - size + 1) as i64;
    let s = size as i64;
    let inside = |x: i64, y: i64| -> bool {
        let (u, v) = (x - x0, y - y0);
        if u < 0 || v < 0 || u >= s || v >= s {
            return false;
        }
        match class {
            0 => true,
            1 => {
                let c = (s - 1) as f64 / 2.0;
                let (du, dv) = (u as f64 - c, v as f64 - c);
                du * du + dv * dv <= (c + 0.5) * (c + 0.5)
            }
            2 => v == s / 2,
            _ => u == s / 2 || v == s / 2,
        }
    };
    let colors: Vec<f64> = match channels {
        1 => alloc::vec![1.0],
        _ => (0..channels).map(|_| rng::uniform(r, -0.5, 1.0)).collect(),
    };
    let mut img = alloc::vec![-1.0; channels * 64];
    for (c, &color) in colors.iter().enumerate() {
        for y in 0..8 {
            for x in 0..8 {
                if inside(x, y) {
                    img[c * 64 + (y * 8 + x) as usize] = color;
                }
            }
        }
    }
    (img, class)
}

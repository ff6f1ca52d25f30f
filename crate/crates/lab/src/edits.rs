//! Editing tasks on tiny-shapes images.

use qac_core::denoiser::ImageShape;
use qac_core::editing::{DegradationKind, DegradationOp};
use qac_core::rng;

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditKind {
    Inpaint,
    SuperResolution,
    Colorize,
}

impl EditKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inpaint" => Ok(EditKind::Inpaint),
            "super-resolution" => Ok(EditKind::SuperResolution),
            "colorize" => Ok(EditKind::Colorize),
            _ => Err(LabError::validation(format!(
                "unknown edit task {s:?} (inpaint, super-resolution, colorize)"
            ))),
        }
    }
}

/// Mask operator synthesizing a random box of 2 to 5 pixels per side in
/// every channel; the box comes from `seed`.
pub fn random_inpaint_op(shape: ImageShape, seed: u64) -> Result<DegradationOp> {
    let mut r = rng::seeded(seed);
    let bh = 2 + rng::index(&mut r, 4.min(shape.height - 1));
    let bw = 2 + rng::index(&mut r, 4.min(shape.width - 1));
    let top = rng::index(&mut r, shape.height - bh.min(shape.height) + 1);
    let left = rng::index(&mut r, shape.width - bw.min(shape.width) + 1);
    let mut omega = vec![0.0; shape.numel()];
    for c in 0..shape.channels {
        for i in top..(top + bh).min(shape.height) {
            for j in left..(left + bw).min(shape.width) {
                omega[(c * shape.height + i) * shape.width + j] = 1.0;
            }
        }
    }
    Ok(DegradationOp::new(DegradationKind::Mask, shape, omega)?)
}

/// The operator of `kind`; super-resolution halves each side.
pub fn edit_op(kind: EditKind, shape: ImageShape, seed: u64) -> Result<DegradationOp> {
    match kind {
        EditKind::Inpaint => random_inpaint_op(shape, seed),
        EditKind::SuperResolution => Ok(DegradationOp::preserve_all(
            DegradationKind::Downsample { factor: 2 },
            shape,
        )?),
        EditKind::Colorize => Ok(DegradationOp::preserve_all(DegradationKind::ChannelAverage, shape)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inpaint_boxes_are_nonempty_and_partial() {
        let shape = ImageShape {
            channels: 2,
            height: 8,
            width: 8,
        };
        for seed in 0..50 {
            let op = random_inpaint_op(shape, seed).unwrap();
            let on = op.omega().iter().filter(|&&w| w == 1.0).count();
            assert!((2 * 4..=2 * 25).contains(&on), "{on}");
            assert_eq!(on % 2, 0);
        }
        assert!(edit_op(EditKind::Colorize, ImageShape { channels: 1, ..shape }, 0).is_err());
        assert!(EditKind::parse("deblur").is_err());
    }
}

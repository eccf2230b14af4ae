use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;

/// One of the four planar rotations, index `k` meaning `k * 90` degrees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RotationLabel(u8);

impl RotationLabel {
    pub const ALL: [RotationLabel; 4] = [
        RotationLabel(0),
        RotationLabel(1),
        RotationLabel(2),
        RotationLabel(3),
    ];

    pub fn new(index: usize) -> Option<Self> {
        (index < 4).then_some(RotationLabel(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn degrees(self) -> u32 {
        self.0 as u32 * 90
    }

    pub fn compose(self, other: RotationLabel) -> RotationLabel {
        RotationLabel((self.0 + other.0) % 4)
    }
}

/// Lossless quarter-turn rotation.
///
/// Label 1 maps pixel `(row r, col c)` of an `H x W` image to
/// `(row c, col H-1-r)` of the `W x H` output, so `(0, 0)` lands on
/// `(0, H-1)`. This is a counter-clockwise turn when rows are counted
/// upwards. Labels 2 and 3 are that map applied two and three times.
pub fn rotate90(image: &Image, label: RotationLabel) -> Image {
    let (h, w) = (image.height, image.width);
    let (oh, ow) = if label.0 % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = Image::filled(image.channels, oh, ow, 0.0);
    for c in 0..image.channels {
        for i in 0..oh {
            for j in 0..ow {
                let (sy, sx) = match label.0 {
                    0 => (i, j),
                    1 => (h - 1 - j, i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (j, w - 1 - i),
                };
                *out.at_mut(c, i, j) = image.at(c, sy, sx);
            }
        }
    }
    out
}

/// Uniform draw over the four rotations.
pub fn sample_rotation<R: Rng + ?Sized>(rng: &mut R) -> RotationLabel {
    RotationLabel(rng.gen_range(0..4u8))
}

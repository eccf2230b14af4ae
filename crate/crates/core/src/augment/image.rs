use serde::{Deserialize, Serialize};

/// A `[C, H, W]` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "image data length");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    *out.at_mut(c, y, x) = self.at(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }

    /// Zero-pads every side by `pad` then cuts a `size x size` window at `(top, left)`
    /// of the padded frame.
    pub fn padded_crop(&self, pad: usize, top: usize, left: usize, size: usize) -> Image {
        let mut out = Image::filled(self.channels, size, size, 0.0);
        for c in 0..self.channels {
            for y in 0..size {
                let sy = (top + y) as isize - pad as isize;
                if sy < 0 || sy as usize >= self.height {
                    continue;
                }
                for x in 0..size {
                    let sx = (left + x) as isize - pad as isize;
                    if sx >= 0 && (sx as usize) < self.width {
                        *out.at_mut(c, y, x) = self.at(c, sy as usize, sx as usize);
                    }
                }
            }
        }
        out
    }

    /// Bilinear resampling of the region `(top, left, h, w)` to `out_h x out_w`
    /// with half-pixel centers.
    pub fn resize_region(&self, region: CropBox, out_h: usize, out_w: usize) -> Image {
        let mut out = Image::filled(self.channels, out_h, out_w, 0.0);
        let sy = region.height as f32 / out_h as f32;
        let sx = region.width as f32 / out_w as f32;
        let ymax = (region.top + region.height - 1) as f32;
        let xmax = (region.left + region.width - 1) as f32;
        for y in 0..out_h {
            let fy =
                ((y as f32 + 0.5) * sy - 0.5 + region.top as f32).clamp(region.top as f32, ymax);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(ymax as usize);
            let wy = fy - y0 as f32;
            for x in 0..out_w {
                let fx = ((x as f32 + 0.5) * sx - 0.5 + region.left as f32)
                    .clamp(region.left as f32, xmax);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(xmax as usize);
                let wx = fx - x0 as f32;
                for c in 0..self.channels {
                    let top = self.at(c, y0, x0) * (1.0 - wx) + self.at(c, y0, x1) * wx;
                    let bot = self.at(c, y1, x0) * (1.0 - wx) + self.at(c, y1, x1) * wx;
                    *out.at_mut(c, y, x) = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        out
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        self.resize_region(
            CropBox {
                top: 0,
                left: 0,
                height: self.height,
                width: self.width,
            },
            out_h,
            out_w,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

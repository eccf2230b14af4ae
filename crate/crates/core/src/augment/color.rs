//! Photometric transforms on RGB images. Every function clamps to `[0, 1]`.

use super::image::Image;

pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn luma(img: &Image, y: usize, x: usize) -> f32 {
    LUMA[0] * img.at(0, y, x) + LUMA[1] * img.at(1, y, x) + LUMA[2] * img.at(2, y, x)
}

/// Replaces every channel by the luma value. Single-channel images are unchanged.
pub fn grayscale(img: &Image) -> Image {
    if img.channels != 3 {
        return img.clone();
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let l = luma(img, y, x).clamp(0.0, 1.0);
            for c in 0..3 {
                *out.at_mut(c, y, x) = l;
            }
        }
    }
    out
}

/// `x * factor`.
pub fn adjust_brightness(img: &Image, factor: f32) -> Image {
    let mut out = img.clone();
    out.data
        .iter_mut()
        .for_each(|v| *v = (*v * factor).clamp(0.0, 1.0));
    out
}

/// Blend towards the mean luma: `factor * x + (1 - factor) * mean`.
pub fn adjust_contrast(img: &Image, factor: f32) -> Image {
    let mean = if img.channels == 3 {
        let mut s = 0.0f64;
        for y in 0..img.height {
            for x in 0..img.width {
                s += luma(img, y, x) as f64;
            }
        }
        (s / (img.height * img.width) as f64) as f32
    } else {
        (img.data.iter().map(|&v| v as f64).sum::<f64>() / img.data.len() as f64) as f32
    };
    let mut out = img.clone();
    out.data
        .iter_mut()
        .for_each(|v| *v = (factor * *v + (1.0 - factor) * mean).clamp(0.0, 1.0));
    out
}

/// Blend towards the per-pixel luma: `factor * x + (1 - factor) * gray`.
pub fn adjust_saturation(img: &Image, factor: f32) -> Image {
    if img.channels != 3 {
        return img.clone();
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let l = luma(img, y, x);
            for c in 0..3 {
                let v = out.at_mut(c, y, x);
                *v = (factor * *v + (1.0 - factor) * l).clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max > 0.0 { delta / max } else { 0.0 };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` turns in HSV space.
pub fn adjust_hue(img: &Image, shift: f32) -> Image {
    if img.channels != 3 || shift == 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (h, s, v) = rgb_to_hsv(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x));
            let (r, g, b) = hsv_to_rgb(h + shift, s, v);
            *out.at_mut(0, y, x) = r.clamp(0.0, 1.0);
            *out.at_mut(1, y, x) = g.clamp(0.0, 1.0);
            *out.at_mut(2, y, x) = b.clamp(0.0, 1.0);
        }
    }
    out
}

/// Normalized 3-tap Gaussian weights.
pub fn gaussian_taps(sigma: f32) -> [f32; 3] {
    let side = (-1.0 / (2.0 * sigma * sigma)).exp();
    let z = 1.0 + 2.0 * side;
    [side / z, 1.0 / z, side / z]
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Separable 3x3 Gaussian blur with reflect padding.
pub fn gaussian_blur3(img: &Image, sigma: f32) -> Image {
    let k = gaussian_taps(sigma);
    let (h, w) = (img.height, img.width);
    let mut tmp = img.clone();
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (t, &kw) in k.iter().enumerate() {
                    s += kw * img.at(c, y, reflect(x as isize + t as isize - 1, w));
                }
                *tmp.at_mut(c, y, x) = s;
            }
        }
    }
    let mut out = tmp.clone();
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (t, &kw) in k.iter().enumerate() {
                    s += kw * tmp.at(c, reflect(y as isize + t as isize - 1, h), x);
                }
                *out.at_mut(c, y, x) = s.clamp(0.0, 1.0);
            }
        }
    }
    out
}

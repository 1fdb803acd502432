//! Image-space style oracles. Each takes a column range so it can score one
//! region of a composed image.

use std::ops::Range;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::StyleKind;
use crate::image::{ToyImage, IMAGE_CHANNELS, IMAGE_SIZE};

pub const FULL: Range<usize> = 0..IMAGE_SIZE;

fn horizontal_spectrum(img: &ToyImage, cols: &Range<usize>) -> (f64, f64) {
    let w = cols.len();
    if w < 4 {
        return (0.0, 0.0);
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(w);
    let half = w / 2;
    let band = (w / 8).max(1);
    let (mut high, mut total) = (0.0, 0.0);
    let mut buf = vec![Complex::new(0.0, 0.0); w];
    for y in 0..IMAGE_SIZE {
        for c in 0..IMAGE_CHANNELS {
            for (i, x) in cols.clone().enumerate() {
                buf[i] = Complex::new(img.get(y, x, c) as f64, 0.0);
            }
            fft.process(&mut buf);
            for (k, v) in buf.iter().enumerate().skip(1) {
                // Parseval: per-pixel power.
                let e = v.norm_sqr() / (w * w) as f64;
                total += e;
                if k.abs_diff(half) <= band {
                    high += e;
                }
            }
        }
    }
    let n = (IMAGE_SIZE * IMAGE_CHANNELS) as f64;
    (high / n, total / n)
}

/// Mean per-pixel power of the horizontal spectrum in the band around the
/// Nyquist frequency (`|k - w/2| <= w/8`), pooled over rows and channels.
/// Alternating-column stripes put nearly all their energy there.
pub fn stripe_band_energy(img: &ToyImage, cols: Range<usize>) -> f64 {
    horizontal_spectrum(img, &cols).0
}

/// Share of the non-DC horizontal spectrum inside the stripe band.
pub fn stripe_band_ratio(img: &ToyImage, cols: Range<usize>) -> f64 {
    let (high, total) = horizontal_spectrum(img, &cols);
    if total <= 1e-12 {
        0.0
    } else {
        high / total
    }
}

fn region_mean(cols: &Range<usize>, mut f: impl FnMut(usize, usize) -> f64) -> f64 {
    let mut sum = 0.0;
    for y in 0..IMAGE_SIZE {
        for x in cols.clone() {
            sum += f(y, x);
        }
    }
    sum / (IMAGE_SIZE * cols.len()) as f64
}

/// Mean-abs pixel distance over a column range.
pub fn region_distance(a: &ToyImage, b: &ToyImage, cols: Range<usize>) -> f64 {
    region_mean(&cols, |y, x| {
        (0..IMAGE_CHANNELS)
            .map(|c| (a.get(y, x, c) - b.get(y, x, c)).abs() as f64)
            .sum::<f64>()
            / IMAGE_CHANNELS as f64
    })
}

/// Hue angle and chroma of an RGB pixel in the opponent-colour plane.
fn hue_chroma(img: &ToyImage, y: usize, x: usize) -> (f64, f64) {
    let [r, g, b] = [0, 1, 2].map(|c| img.get(y, x, c) as f64);
    let (a, bb) = (2.0 * r - g - b, 3f64.sqrt() * (g - b));
    (bb.atan2(a), a.hypot(bb) / 2.0)
}

/// Hue rotation of `out` relative to `content`: the chroma-weighted mean of
/// `-cos` of the per-pixel hue change. Palette inversion rotates hue by half
/// a turn (score 1); unchanged hues score -1. Grey regions score 0.
pub fn inversion_score(out: &ToyImage, content: &ToyImage, cols: Range<usize>) -> f64 {
    let (mut sum, mut weight) = (0.0, 0.0);
    for y in 0..IMAGE_SIZE {
        for x in cols.clone() {
            let (h_out, c_out) = hue_chroma(out, y, x);
            let (h_in, c_in) = hue_chroma(content, y, x);
            let w = c_out.min(c_in);
            sum -= w * (h_out - h_in).cos();
            weight += w;
        }
    }
    if weight > 1e-9 {
        sum / weight
    } else {
        0.0
    }
}

/// Mean per-pixel chroma (max minus min channel).
pub fn mean_chroma(img: &ToyImage, cols: Range<usize>) -> f64 {
    region_mean(&cols, |y, x| {
        let v: Vec<f32> = (0..IMAGE_CHANNELS).map(|c| img.get(y, x, c)).collect();
        let max = v.iter().copied().fold(f32::MIN, f32::max);
        let min = v.iter().copied().fold(f32::MAX, f32::min);
        (max - min) as f64
    })
}

/// How strongly `out` shows `style` relative to the content it came from.
/// The style "fires" when the score is positive; the content itself scores
/// zero (stripe, saturate) or -1 (invert).
pub fn style_score(style: StyleKind, out: &ToyImage, content: &ToyImage, cols: Range<usize>) -> f64 {
    match style {
        StyleKind::Stripe => stripe_band_energy(out, cols.clone()) - stripe_band_energy(content, cols),
        StyleKind::Invert => inversion_score(out, content, cols),
        StyleKind::Saturate => mean_chroma(out, cols.clone()) - mean_chroma(content, cols),
    }
}

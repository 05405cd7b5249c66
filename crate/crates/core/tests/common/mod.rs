#![allow(dead_code)]

use afformer::heatmaps::{sum_normalize, Heatmap};
use afformer::media::{Image, VideoClip};
use rand::{Rng, RngExt};

pub fn random_image<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> Image {
    Image::new(h, w, (0..3 * h * w).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
}

pub fn random_clip<R: Rng + ?Sized>(rng: &mut R, t: usize, h: usize, w: usize) -> VideoClip {
    VideoClip::new((0..t).map(|_| random_image(rng, h, w)).collect()).unwrap()
}

/// A random distribution; roughly `zero_frac` of the cells are exactly zero.
pub fn random_distribution<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, zero_frac: f64) -> Heatmap {
    let mut v: Vec<f64> = (0..h * w)
        .map(|_| if rng.random::<f64>() < zero_frac { 0.0 } else { rng.random::<f64>() })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    sum_normalize(&Heatmap::raw(h, w, v).unwrap()).unwrap()
}

//! Procedural images for desk-scale experiments and tests.
//!
//! Scenes are deterministic in their seed: a smooth colour gradient with a
//! handful of coloured shapes and oriented stripe textures, which gives the
//! feature extractors edges and texture at several scales.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{Image, CHANNELS};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform noise in `[0, 1]`.
pub fn noise(seed: u64, width: usize, height: usize) -> Image {
    let mut r = rng(seed);
    let data = (0..CHANNELS * width * height).map(|_| r.gen::<f64>()).collect();
    Image::from_planar(format!("noise-{seed}"), width, height, data).expect("valid noise")
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Stripes { cx: f64, cy: f64, radius: f64, angle: f64, period: f64 },
}

/// A random scene of `width x height` pixels.
pub fn scene(seed: u64, width: usize, height: usize) -> Image {
    let mut r = rng(seed ^ 0x5ce9_e000);
    let c0: [f64; 3] = [r.gen(), r.gen(), r.gen()];
    let c1: [f64; 3] = [r.gen(), r.gen(), r.gen()];
    let angle: f64 = r.gen_range(0.0..std::f64::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());

    let n_shapes = r.gen_range(4..9);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let colour: [f64; 3] = [r.gen(), r.gen(), r.gen()];
        let shape = match r.gen_range(0..3) {
            0 => Shape::Ellipse {
                cx: r.gen(),
                cy: r.gen(),
                rx: r.gen_range(0.05..0.3),
                ry: r.gen_range(0.05..0.3),
            },
            1 => {
                let (x0, y0): (f64, f64) = (r.gen_range(0.0..0.8), r.gen_range(0.0..0.8));
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + r.gen_range(0.05..0.4),
                    y1: y0 + r.gen_range(0.05..0.4),
                }
            }
            _ => Shape::Stripes {
                cx: r.gen(),
                cy: r.gen(),
                radius: r.gen_range(0.1..0.35),
                angle: r.gen_range(0.0..std::f64::consts::PI),
                period: r.gen_range(0.01..0.06),
            },
        };
        shapes.push((shape, colour));
    }

    let plane = width * height;
    let mut data = vec![0.0; CHANNELS * plane];
    let scale = width.max(height) as f64;
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / scale;
            let v = (y as f64 + 0.5) / scale;
            let t = (0.5 + 0.5 * (ga * (u - 0.5) + gb * (v - 0.5)) * 1.4).clamp(0.0, 1.0);
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
            for (shape, colour) in &shapes {
                let alpha = match *shape {
                    Shape::Ellipse { cx, cy, rx, ry } => {
                        let d = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
                        if d <= 1.0 { 1.0 } else { 0.0 }
                    }
                    Shape::Rect { x0, y0, x1, y1 } => {
                        if u >= x0 && u <= x1 && v >= y0 && v <= y1 { 1.0 } else { 0.0 }
                    }
                    Shape::Stripes { cx, cy, radius, angle, period } => {
                        let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                        if d2 <= radius * radius {
                            let phase = ((u - cx) * angle.cos() + (v - cy) * angle.sin()) / period;
                            0.5 + 0.5 * (phase * std::f64::consts::TAU).sin()
                        } else {
                            0.0
                        }
                    }
                };
                if alpha > 0.0 {
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - alpha) + colour[c] * alpha;
                    }
                }
            }
            for c in 0..3 {
                data[c * plane + y * width + x] = px[c].clamp(0.0, 1.0);
            }
        }
    }
    Image::from_planar(format!("scene-{seed}"), width, height, data).expect("valid scene")
}

/// A fixed flower-like carrier: petals around a centre on a leafy background.
pub fn flower(width: usize, height: usize) -> Image {
    let plane = width * height;
    let mut data = vec![0.0; CHANNELS * plane];
    let scale = width.max(height) as f64;
    let (cx, cy) = (width as f64 / scale / 2.0, height as f64 / scale / 2.0);
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / scale - cx;
            let v = (y as f64 + 0.5) / scale - cy;
            let rad = (u * u + v * v).sqrt();
            let theta = v.atan2(u);
            let petal_edge = 0.28 + 0.1 * (6.0 * theta).cos();
            let leaf = 0.5 + 0.5 * (40.0 * (u + 0.3 * v)).sin() * (23.0 * v).cos();
            let px = if rad < 0.07 {
                [0.95, 0.8, 0.15]
            } else if rad < petal_edge {
                let shade = 0.75 + 0.25 * (1.0 - rad / petal_edge);
                [0.9 * shade, 0.25 * shade + 0.1 * leaf, 0.55 * shade]
            } else {
                [0.1 + 0.15 * leaf, 0.35 + 0.3 * leaf, 0.1 + 0.1 * leaf]
            };
            for c in 0..3 {
                data[c * plane + y * width + x] = px[c];
            }
        }
    }
    Image::from_planar("flower", width, height, data).expect("valid flower")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        assert_eq!(scene(1, 40, 30), scene(1, 40, 30));
        assert_ne!(scene(1, 40, 30).data(), scene(2, 40, 30).data());
        assert_eq!(flower(20, 10).width(), 20);
    }
}

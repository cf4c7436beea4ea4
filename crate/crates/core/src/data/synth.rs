//! Procedural scenes and the style relations between the two domains.

use std::f64::consts::PI;

use rand::Rng;

/// A scene is a smooth two-colour background with a few flat shapes.
struct Shape {
    disk: bool,
    cx: f64,
    cy: f64,
    r: f64,
    color: [f64; 3],
}

/// Per-pixel fill of a scene: the colour and the index of the topmost shape
/// covering the pixel, if any.
pub(super) struct Scene {
    size: usize,
    pub color: Vec<[f64; 3]>,
    pub owner: Vec<Option<usize>>,
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [
        rng.random_range(-0.8..0.8),
        rng.random_range(-0.8..0.8),
        rng.random_range(-0.8..0.8),
    ]
}

pub(super) fn scene<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Scene {
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    let angle: f64 = rng.random_range(0.0..2.0 * PI);
    let (dx, dy) = (angle.cos(), angle.sin());
    let count = rng.random_range(2..=4);
    let shapes: Vec<Shape> = (0..count)
        .map(|_| Shape {
            disk: rng.random_bool(0.5),
            cx: rng.random_range(0.15..0.85),
            cy: rng.random_range(0.15..0.85),
            r: rng.random_range(0.1..0.3),
            color: random_color(rng),
        })
        .collect();
    let mut color = Vec::with_capacity(size * size);
    let mut owner = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (u, v) = ((j as f64 + 0.5) / size as f64, (i as f64 + 0.5) / size as f64);
            let w = (((u - 0.5) * dx + (v - 0.5) * dy) / 1.5 + 0.5).clamp(0.0, 1.0);
            let mut c = [0.0; 3];
            for k in 0..3 {
                c[k] = c0[k] * (1.0 - w) + c1[k] * w;
            }
            let mut who = None;
            for (s_idx, s) in shapes.iter().enumerate() {
                let inside = if s.disk {
                    (u - s.cx).powi(2) + (v - s.cy).powi(2) <= s.r * s.r
                } else {
                    (u - s.cx).abs() <= s.r && (v - s.cy).abs() <= s.r * 0.7
                };
                if inside {
                    c = s.color;
                    who = Some(s_idx);
                }
            }
            color.push(c);
            owner.push(who);
        }
    }
    Scene { size, color, owner }
}

impl Scene {
    /// Writes the scene as a CHW image into `out`.
    pub fn write(&self, out: &mut [f64]) {
        let hw = self.size * self.size;
        for (p, c) in self.color.iter().enumerate() {
            for k in 0..3 {
                out[k * hw + p] = c[k].clamp(-1.0, 1.0);
            }
        }
    }

    /// Rotates every colour about the grey axis.
    pub fn rotate_hue(&mut self, degrees: f64) {
        let (s, c) = degrees.to_radians().sin_cos();
        let k = 1.0 / 3.0f64.sqrt();
        // Rodrigues rotation about the unit vector (k, k, k).
        let t = 1.0 - c;
        let m = [
            [c + k * k * t, k * k * t - k * s, k * k * t + k * s],
            [k * k * t + k * s, c + k * k * t, k * k * t - k * s],
            [k * k * t - k * s, k * k * t + k * s, c + k * k * t],
        ];
        for px in &mut self.color {
            let v = *px;
            for r in 0..3 {
                px[r] = m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2];
            }
        }
    }

    /// Flat posterized colours with dark outlines at region boundaries.
    pub fn cartoonize(&mut self) {
        let n = self.size;
        for px in &mut self.color {
            for v in px.iter_mut() {
                *v = ((*v + 1.0) * 2.0).round() / 2.0 - 1.0;
            }
        }
        let owner = self.owner.clone();
        for i in 0..n {
            for j in 0..n {
                let here = owner[i * n + j];
                let edge = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|&(di, dj)| {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    a >= 0
                        && b >= 0
                        && (a as usize) < n
                        && (b as usize) < n
                        && owner[a as usize * n + b as usize] != here
                });
                if edge {
                    self.color[i * n + j] = [-0.9; 3];
                }
            }
        }
    }

    /// Modulates the brightness inside shapes with stripes or a checkerboard.
    pub fn texture(&mut self, checker: bool) {
        let n = self.size;
        for i in 0..n {
            for j in 0..n {
                if self.owner[i * n + j].is_none() {
                    continue;
                }
                let on = if checker {
                    (i / 2 + j / 2) % 2 == 0
                } else {
                    (i / 2) % 2 == 0
                };
                let delta = if on { 0.35 } else { -0.35 };
                for v in &mut self.color[i * n + j] {
                    *v += delta;
                }
            }
        }
    }
}

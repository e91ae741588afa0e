// Procedural pattern concepts. Each concept renders an intensity map in
// [0, 1] under a random placement drawn from the caller's generator.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;

/// Names of the available pattern concepts, in the order domains consume them.
pub const CONCEPTS: [&str; 16] = [
    "horizontal-stripes",
    "vertical-stripes",
    "diagonal-stripes",
    "anti-diagonal-stripes",
    "checkerboard",
    "horizontal-gradient",
    "vertical-gradient",
    "plus",
    "x-cross",
    "triangle",
    "ring",
    "square-outline",
    "disk",
    "filled-square",
    "dot-grid",
    "concentric-rings",
];

struct Placement {
    cx: f64,
    cy: f64,
    size: f64,
    period: f64,
    phase: f64,
    width: f64,
}

impl Placement {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        Placement {
            cx: rng.random_range(-0.12..0.12),
            cy: rng.random_range(-0.12..0.12),
            size: rng.random_range(0.7..1.0),
            period: rng.random_range(3.0..6.0),
            phase: rng.random_range(0.0..2.0 * PI),
            width: rng.random_range(0.06..0.1),
        }
    }
}

fn wave(t: f64, period: f64, phase: f64) -> f64 {
    0.5 + 0.5 * (2.0 * PI * t / period + phase).sin()
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Renders one `side × side` intensity map for `concept`.
pub(crate) fn render<R: Rng>(concept: usize, side: usize, rng: &mut R) -> Vec<f64> {
    let p = Placement::draw(rng);
    let s = side as f64;
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64, y as f64);
            // centred coordinates in roughly [-0.5, 0.5]
            let u = (px + 0.5) / s - 0.5 - p.cx;
            let v = (py + 0.5) / s - 0.5 - p.cy;
            let r = (u * u + v * v).sqrt();
            let h = 0.32 * p.size;
            let w = p.width;
            let value = match CONCEPTS[concept] {
                "horizontal-stripes" => wave(py, p.period, p.phase),
                "vertical-stripes" => wave(px, p.period, p.phase),
                "diagonal-stripes" => wave((px + py) / SQRT_2, p.period, p.phase),
                "anti-diagonal-stripes" => wave((px - py) / SQRT_2, p.period, p.phase),
                "checkerboard" => {
                    let cell = p.period.round().max(2.0);
                    let ox = (p.phase * 10.0).floor();
                    let a = ((px + ox) / cell).floor() as i64;
                    let b = ((py + ox) / cell).floor() as i64;
                    indicator((a + b).rem_euclid(2) == 0)
                }
                "disk" => indicator(r < h * 0.9),
                "ring" => indicator((r - h).abs() < w),
                "horizontal-gradient" => (0.5 + u * 1.6 * p.size).clamp(0.0, 1.0),
                "vertical-gradient" => (0.5 + v * 1.6 * p.size).clamp(0.0, 1.0),
                "plus" => indicator((u.abs() < w || v.abs() < w) && u.abs() < h && v.abs() < h),
                "x-cross" => indicator(
                    ((u - v).abs() / SQRT_2 < w || (u + v).abs() / SQRT_2 < w) && r < h * 1.2,
                ),
                "square-outline" => {
                    let m = u.abs().max(v.abs());
                    indicator(m <= h && m > h - 1.5 * w)
                }
                "filled-square" => indicator(u.abs().max(v.abs()) < h * 0.85),
                "triangle" => indicator(v > -h && v < h && u.abs() < (v + h) / 2.0),
                "dot-grid" => {
                    let spacing = p.period + 1.0;
                    let off = p.phase / (2.0 * PI) * spacing;
                    let dx = (px + off).rem_euclid(spacing) - spacing / 2.0;
                    let dy = (py + off).rem_euclid(spacing) - spacing / 2.0;
                    indicator(dx * dx + dy * dy < 1.3)
                }
                "concentric-rings" => wave(r * s, p.period, p.phase),
                other => unreachable!("no renderer for {other}"),
            };
            out.push(value);
        }
    }
    out
}

//! Procedural sketch/photo pairs. Each pair shares a layout of 2–4 primitives;
//! the photo fills them over a textured background, the sketch traces their
//! outlines with jittered vertices.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{quantize, ImageEntry, PairedDataset, Raster};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Ellipse,
    Polyline,
}

/// One primitive as a vertex path in unit coordinates (`[0, 1]²`).
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub vertices: Vec<[f64; 2]>,
    pub color: [f64; 3],
}

impl Primitive {
    fn closed(&self) -> bool {
        self.shape != Shape::Polyline
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
}

const ELLIPSE_VERTICES: usize = 20;

/// Samples a layout. Shapes are large so that layouts differ at patch scale.
pub fn synth_layout<R: Rng + ?Sized>(rng: &mut R) -> Layout {
    let count = rng.random_range(2..=4);
    let primitives = (0..count)
        .map(|_| {
            let shape = match rng.random_range(0..3) {
                0 => Shape::Rectangle,
                1 => Shape::Ellipse,
                _ => Shape::Polyline,
            };
            let c = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
            let h = [rng.random_range(0.12..0.3), rng.random_range(0.12..0.3)];
            let angle: f64 = rng.random_range(0.0..PI);
            let (sin, cos) = angle.sin_cos();
            let place = |x: f64, y: f64| [c[0] + x * cos - y * sin, c[1] + x * sin + y * cos];
            let vertices = match shape {
                Shape::Rectangle => [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
                    .iter()
                    .map(|&(x, y)| place(x * h[0], y * h[1]))
                    .collect(),
                Shape::Ellipse => (0..ELLIPSE_VERTICES)
                    .map(|k| {
                        let t = 2.0 * PI * k as f64 / ELLIPSE_VERTICES as f64;
                        place(h[0] * t.cos(), h[1] * t.sin())
                    })
                    .collect(),
                Shape::Polyline => {
                    let n = rng.random_range(3..=5);
                    (0..n)
                        .map(|_| place(rng.random_range(-1.0..1.0) * h[0] * 1.4, rng.random_range(-1.0..1.0) * h[1] * 1.4))
                        .collect()
                }
            };
            let color = [
                rng.random_range(0.3..0.7),
                rng.random_range(0.3..0.7),
                rng.random_range(0.3..0.7),
            ];
            Primitive { shape, vertices, color }
        })
        .collect();
    let background = [
        rng.random_range(0.7..0.97),
        rng.random_range(0.7..0.97),
        rng.random_range(0.7..0.97),
    ];
    Layout {
        primitives,
        background,
    }
}

fn segments(p: &Primitive) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
    let n = p.vertices.len();
    let count = if p.closed() { n } else { n - 1 };
    (0..count).map(move |i| (p.vertices[i], p.vertices[(i + 1) % n]))
}

fn segment_distance(q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((q[0] - a[0]) * dx + (q[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (px, py) = (a[0] + t * dx - q[0], a[1] + t * dy - q[1]);
    (px * px + py * py).sqrt()
}

fn inside(q: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut hit = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + n - 1) % n]);
        if (a[1] > q[1]) != (b[1] > q[1]) && q[0] < (b[0] - a[0]) * (q[1] - a[1]) / (b[1] - a[1]) + a[0] {
            hit = !hit;
        }
    }
    hit
}

fn edge_distance(q: [f64; 2], p: &Primitive) -> f64 {
    segments(p).map(|(a, b)| segment_distance(q, a, b)).fold(f64::INFINITY, f64::min)
}

/// Pixel centre of `(row, col)` in unit coordinates.
fn centre(row: usize, col: usize, size: usize) -> [f64; 2] {
    [(col as f64 + 0.5) / size as f64, (row as f64 + 0.5) / size as f64]
}

/// Renders the photo of a layout. `rng` drives the background texture only.
pub fn render_image<R: Rng + ?Sized>(layout: &Layout, size: usize, rng: &mut R) -> Raster {
    let freq = [rng.random_range(2.0..6.0), rng.random_range(2.0..6.0)];
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let outline = 1.6 / size as f64;
    let stroke = 1.6 / size as f64;
    let mut out = Tensor::zeros(&[size, size, 3]);
    let data = out.data_mut();
    for r in 0..size {
        for c in 0..size {
            let q = centre(r, c, size);
            let wave = 0.05 * (2.0 * PI * (freq[0] * q[0] + freq[1] * q[1]) + phase).sin();
            let noise = rng.random_range(-0.03..0.03);
            let mut px = layout.background.map(|b| b + wave + noise);
            for p in &layout.primitives {
                let d = edge_distance(q, p);
                if p.closed() {
                    if inside(q, &p.vertices) {
                        px = p.color;
                    }
                    if d < outline {
                        px = p.color.map(|v| 0.3 * v);
                    }
                } else if d < stroke {
                    px = p.color;
                }
            }
            let base = (r * size + c) * 3;
            data[base..base + 3].copy_from_slice(&px);
        }
    }
    quantize(&mut out);
    out
}

/// Renders the sketch of a layout: dark outlines on white. `rng` jitters
/// every vertex and the stroke darkness.
pub fn render_sketch<R: Rng + ?Sized>(layout: &Layout, size: usize, rng: &mut R) -> Raster {
    let jitter = 0.6 / size as f64;
    let strokes: Vec<(Primitive, f64)> = layout
        .primitives
        .iter()
        .map(|p| {
            let mut p = p.clone();
            for v in &mut p.vertices {
                v[0] += rng.random_range(-jitter..jitter);
                v[1] += rng.random_range(-jitter..jitter);
            }
            (p, rng.random_range(0.0..0.2))
        })
        .collect();
    let width = 1.3 / size as f64;
    let mut out = Tensor::ones(&[size, size, 3]);
    let data = out.data_mut();
    for r in 0..size {
        for c in 0..size {
            let q = centre(r, c, size);
            for (p, ink) in &strokes {
                if edge_distance(q, p) < width {
                    let base = (r * size + c) * 3;
                    data[base..base + 3].fill(*ink);
                }
            }
        }
    }
    quantize(&mut out);
    out
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of the held-out split that accompanies a training seed. Disjoint
/// streams keep the two sets independent draws of the same family.
pub fn heldout_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_0f_4e1d_0u64
}

/// `count` deterministic image/sketch pairs of `size×size`, all in the train
/// split. Pair `i` is `img_{i:04}` / `skt_{i:04}`.
pub fn synth_dataset(count: usize, size: usize, seed: u64) -> Result<PairedDataset> {
    if count < 2 {
        return Err(Error::Parameter(format!("synthetic dataset needs count ≥ 2, got {count}")));
    }
    if size < 4 {
        return Err(Error::Parameter(format!("synthetic image size must be ≥ 4, got {size}")));
    }
    let mut images = Vec::with_capacity(count);
    let mut sketches = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let layout = synth_layout(&mut stream_rng(seed, 3 * i));
        let image_id = format!("img_{i:04}");
        images.push(ImageEntry {
            id: image_id.clone(),
            raster: render_image(&layout, size, &mut stream_rng(seed, 3 * i + 1)),
        });
        sketches.push((
            format!("skt_{i:04}"),
            image_id,
            render_sketch(&layout, size, &mut stream_rng(seed, 3 * i + 2)),
        ));
    }
    let train = sketches.iter().map(|s| s.0.clone()).collect();
    PairedDataset::new(images, sketches, train, vec![])
}

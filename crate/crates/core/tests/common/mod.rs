//! Test-only oracles and fixtures, kept independent of the library kernels.
#![allow(dead_code)]

use adnet::dataset::{AnnotatedImage, Label, Vertex};
use adnet::tensor::{Fill, Tensor};
use proptest::prelude::*;

/// Direct nested-loop same-size convolution (stride 1, pad (k-1)/2).
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k as isize - 1) / 2;
    let mut out = Tensor::zeros(&[n, co, h, wd]).unwrap();
    for b_ in 0..n {
        for o in 0..co {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = b.data()[o];
                    for ci in 0..c {
                        for di in 0..k {
                            for dj in 0..k {
                                let (yi, xj) = (
                                    i as isize + di as isize - pad,
                                    j as isize + dj as isize - pad,
                                );
                                if yi < 0 || xj < 0 || yi >= h as isize || xj >= wd as isize {
                                    continue;
                                }
                                acc += w.at(&[o, ci, di, dj])
                                    * x.at(&[b_, ci, yi as usize, xj as usize]);
                            }
                        }
                    }
                    out.set(&[b_, o, i, j], acc);
                }
            }
        }
    }
    out
}

pub fn uniform(shape: &[usize], low: f64, high: f64, seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Fill::Uniform { low, high }, seed).unwrap()
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for every i.
pub fn numeric_grad(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)`, with magnitudes below `1e-8` treated as exact zeros.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        return (analytic - numeric).abs();
    }
    (analytic - numeric).abs() / scale
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// `n` 3×32×32 images: faint noise plus a bright 16×16 block in the left half
/// (billboard, odd indices) or the right half (no-billboard, even indices).
/// Left-half minus right-half intensity separates the classes linearly.
pub fn separable_images(n: usize, seed: u64) -> Vec<(Tensor<f32>, Label)> {
    (0..n)
        .map(|i| {
            let positive = i % 2 == 1;
            let mut t = Tensor::<f32>::create(
                &[3, 32, 32],
                Fill::Uniform {
                    low: 0.0,
                    high: 0.2,
                },
                seed.wrapping_mul(1000).wrapping_add(i as u64),
            )
            .unwrap();
            let offset = if positive { 0 } else { 16 };
            for c in 0..3 {
                for h in 8..24 {
                    for w in offset..offset + 16 {
                        let v = t.at(&[c, h, w]);
                        t.set(&[c, h, w], v + 0.7);
                    }
                }
            }
            let label = if positive {
                Label::Billboard
            } else {
                Label::NoBillboard
            };
            (t, label)
        })
        .collect()
}

// Synthetic annotations with closed-form areas.

#[derive(Debug, Clone)]
pub enum Shape {
    Rect { x: f64, y: f64, w: f64, h: f64 },
    Tri([Vertex; 3]),
}

impl Shape {
    pub fn vertices(&self) -> Vec<Vertex> {
        match *self {
            Shape::Rect { x, y, w, h } => vec![(x, y), (x + w, y), (x + w, y + h), (x, y + h)],
            Shape::Tri(v) => v.to_vec(),
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Shape::Rect { .. } => {
                let v = self.vertices();
                (v[1].0 - v[0].0) * (v[2].1 - v[1].1)
            }
            Shape::Tri([a, b, c]) => {
                0.5 * ((b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1)).abs()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub width: u32,
    pub height: u32,
    pub source: usize,
    pub shapes: Vec<Shape>,
}

/// A coordinate as a fraction of the frame, mostly on-screen.
pub fn coord() -> impl Strategy<Value = f64> {
    prop_oneof![4 => 0.0..=1.0f64, 1 => -0.3..1.3f64]
}

pub fn shape(width: u32, height: u32) -> impl Strategy<Value = Shape> {
    let (w, h) = (f64::from(width), f64::from(height));
    prop_oneof![
        (coord(), coord(), 0.0..0.6f64, 0.0..0.6f64).prop_map(move |(x, y, fw, fh)| Shape::Rect {
            x: x * w,
            y: y * h,
            w: fw * w,
            h: fh * h,
        }),
        [(coord(), coord()), (coord(), coord()), (coord(), coord())]
            .prop_map(move |v| Shape::Tri(v.map(|(x, y)| (x * w, y * h)))),
    ]
}

pub fn sample() -> impl Strategy<Value = Sample> {
    (16u32..2000, 16u32..2000, 0usize..3).prop_flat_map(|(width, height, source)| {
        prop_oneof![
            2 => Just(Vec::new()),
            3 => prop::collection::vec(shape(width, height), 1..4),
        ]
        .prop_map(move |shapes| Sample {
            width,
            height,
            source,
            shapes,
        })
    })
}

pub fn to_images(samples: &[Sample]) -> Vec<AnnotatedImage> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            AnnotatedImage::new(
                format!("img{i:05}.png"),
                s.width,
                s.height,
                ["highway", "street", "mall"][s.source],
                s.shapes.iter().map(Shape::vertices).collect(),
            )
            .unwrap()
        })
        .collect()
}

pub fn oracle_fraction(s: &Sample) -> f64 {
    let covered: f64 = s.shapes.iter().map(Shape::area).sum();
    (covered / (f64::from(s.width) * f64::from(s.height))).min(1.0)
}

pub fn oracle_on_screen(s: &Sample) -> bool {
    let (w, h) = (f64::from(s.width), f64::from(s.height));
    s.shapes
        .iter()
        .flat_map(Shape::vertices)
        .all(|(x, y)| (0.0..=w).contains(&x) && (0.0..=h).contains(&y))
}

//! Shared reference oracles for the integration suites. Everything here is
//! derived straight from the operator definitions, independent of the
//! library's forward/backward code paths.

use moe_ffd_core::diffconv::DiffConvKind;
use moe_ffd_core::rng::Stream;
use moe_ffd_core::tensor::Tensor;

/// Zero-padded pixel read.
pub fn read(plane: &[f64], h: usize, w: usize, i: isize, j: isize) -> f64 {
    if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
        0.0
    } else {
        plane[i as usize * w + j as usize]
    }
}

/// Row-major 3×3 slot offset from the center.
fn offset(p: usize) -> (isize, isize) {
    ((p / 3) as isize - 1, (p % 3) as isize - 1)
}

/// Successor on the clockwise outer ring NW→N→NE→E→SE→S→SW→W→NW,
/// in row-major slot numbering.
fn ring_next(p: usize) -> usize {
    match p {
        0 => 1,
        1 => 2,
        2 => 5,
        5 => 8,
        8 => 7,
        7 => 6,
        6 => 3,
        3 => 0,
        _ => panic!("center has no ring successor"),
    }
}

/// The sample each kernel slot multiplies, from the operator definitions:
/// vanilla x_p; CDC x_p − x_c; ADC x_p − x_next; RDC x_p^R − x_p;
/// SOC x_p^R − 2·x_p + x_c. The center slot is the raw pixel everywhere.
pub fn xhat(
    plane: &[f64],
    h: usize,
    w: usize,
    i: usize,
    j: usize,
    p: usize,
    kind: DiffConvKind,
) -> f64 {
    let (ci, cj) = (i as isize, j as isize);
    let x_c = read(plane, h, w, ci, cj);
    if p == 4 {
        return x_c;
    }
    let (di, dj) = offset(p);
    let x_p = read(plane, h, w, ci + di, cj + dj);
    match kind {
        DiffConvKind::Vanilla => x_p,
        DiffConvKind::Cdc => x_p - x_c,
        DiffConvKind::Adc => {
            let (ni, nj) = offset(ring_next(p));
            x_p - read(plane, h, w, ci + ni, cj + nj)
        }
        DiffConvKind::Rdc => read(plane, h, w, ci + 2 * di, cj + 2 * dj) - x_p,
        DiffConvKind::Soc => {
            read(plane, h, w, ci + 2 * di, cj + 2 * dj) - 2.0 * x_p + x_c
        }
    }
}

/// Per-pixel reference for the full difference convolution,
/// x [C_in,H,W] ⋆ w [C_out,C_in,3,3] → [C_out,H,W].
pub fn naive_diff_conv(x: &Tensor<f64>, w: &Tensor<f64>, kind: DiffConvKind) -> Tensor<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = w.shape()[0];
    let mut out = Tensor::zeros(&[cout, h, wd]);
    for co in 0..cout {
        for i in 0..h {
            for j in 0..wd {
                let mut acc = 0.0;
                for ci in 0..cin {
                    let plane = &x.data()[ci * h * wd..(ci + 1) * h * wd];
                    for p in 0..9 {
                        let wv = w.data()[((co * cin + ci) * 3 + p / 3) * 3 + p % 3];
                        acc += wv * xhat(plane, h, wd, i, j, p, kind);
                    }
                }
                out.data_mut()[(co * h + i) * wd + j] = acc;
            }
        }
    }
    out
}

pub fn random_tensor(shape: &[usize], rng: &mut Stream) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform(-1.0, 1.0);
    }
    t
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

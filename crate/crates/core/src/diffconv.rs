//! The five convolution experts: Vanilla, ADC, CDC, RDC, and SOC.
//!
//! Every kind learns a 3×3 kernel per channel pair (a center weight `w_c` and
//! eight surround weights `w_p`); the kind decides which input samples each
//! `w_p` sees:
//!
//! * Vanilla — `x_p` itself.
//! * CDC     — `x_p − x_c` (central difference).
//! * ADC     — `x_p − x_p_next`, the successor in the clockwise ring
//!   NW→N→NE→E→SE→S→SW→W→NW (angular difference).
//! * RDC     — `x_pR − x_p`, where the radial partner `x_pR` sits at twice
//!   the neighbor's offset from the center (radial difference, 5×5 reach).
//! * SOC     — `(x_pR − x_p) + (x_c − x_p)` (second order, 5×5 reach).
//!
//! Stride 1, zero padding, same-size output, no bias. Out-of-image radial
//! partners read as zero, consistent with the padding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which of the five expert convolutions to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffConvKind {
    Vanilla,
    Adc,
    Cdc,
    Rdc,
    Soc,
}

impl DiffConvKind {
    pub const ALL: [DiffConvKind; 5] = [
        DiffConvKind::Vanilla,
        DiffConvKind::Adc,
        DiffConvKind::Cdc,
        DiffConvKind::Rdc,
        DiffConvKind::Soc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DiffConvKind::Vanilla => "vanilla",
            DiffConvKind::Adc => "adc",
            DiffConvKind::Cdc => "cdc",
            DiffConvKind::Rdc => "rdc",
            DiffConvKind::Soc => "soc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(DiffConvKind::Vanilla),
            "adc" => Ok(DiffConvKind::Adc),
            "cdc" => Ok(DiffConvKind::Cdc),
            "rdc" => Ok(DiffConvKind::Rdc),
            "soc" => Ok(DiffConvKind::Soc),
            other => Err(Error::arg(format!("unknown convolution kind `{other}`"))),
        }
    }

    /// Side length of the declared neighborhood Ω.
    pub fn omega_size(self) -> usize {
        match self {
            DiffConvKind::Vanilla | DiffConvKind::Adc | DiffConvKind::Cdc => 3,
            DiffConvKind::Rdc | DiffConvKind::Soc => 5,
        }
    }
}

/// Trainable weights of one expert convolution.
#[derive(Debug, Clone)]
pub struct DiffKernel<T: Scalar> {
    pub kind: DiffConvKind,
    /// [C_out, C_in, 3, 3], always 3×3 regardless of kind.
    pub weights: Tensor<T>,
}

impl<T: Scalar> DiffKernel<T> {
    pub fn new(kind: DiffConvKind, weights: Tensor<T>) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 4 || s[2] != 3 || s[3] != 3 {
            return Err(Error::dim(format!(
                "kernel weights must be [C_out,C_in,3,3], got {:?}",
                s
            )));
        }
        Ok(DiffKernel { kind, weights })
    }
}

pub const CENTER: usize = 4;

/// Row/column offset of kernel slot `p` (row-major over the 3×3 grid).
fn offset(p: usize) -> (isize, isize) {
    ((p / 3) as isize - 1, (p % 3) as isize - 1)
}

/// Successor of slot `p` in the clockwise ring used by ADC.
fn clockwise_next(p: usize) -> usize {
    match p {
        0 => 1,
        1 => 2,
        2 => 5,
        5 => 8,
        8 => 7,
        7 => 6,
        6 => 3,
        3 => 0,
        _ => unreachable!("center has no ring successor"),
    }
}

/// Linear decomposition of the sample each weight slot multiplies:
/// `x̂_p = Σ sign · x[pos + offset]`.
pub fn contributions(kind: DiffConvKind, p: usize) -> Vec<((isize, isize), f64)> {
    assert!(p < 9);
    if p == CENTER {
        return vec![((0, 0), 1.0)];
    }
    let d = offset(p);
    match kind {
        DiffConvKind::Vanilla => vec![(d, 1.0)],
        DiffConvKind::Cdc => vec![(d, 1.0), ((0, 0), -1.0)],
        DiffConvKind::Adc => vec![(d, 1.0), (offset(clockwise_next(p)), -1.0)],
        DiffConvKind::Rdc => vec![((2 * d.0, 2 * d.1), 1.0), (d, -1.0)],
        DiffConvKind::Soc => vec![((2 * d.0, 2 * d.1), 1.0), (d, -2.0), ((0, 0), 1.0)],
    }
}

/// The value `x̂_p` that weight slot `p` multiplies at `position`
/// (channel, row, col). Out-of-image reads are zero.
pub fn sample_xhat<T: Scalar>(
    x: &Tensor<T>,
    position: (usize, usize, usize),
    p: usize,
    kind: DiffConvKind,
) -> Result<T> {
    if p == CENTER {
        return Err(Error::arg(
            "p is the center slot; the center is covered by the w_c·x_c term".to_string(),
        ));
    }
    if p >= 9 {
        return Err(Error::arg(format!("neighbor index {p} out of the 3×3 grid")));
    }
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("feature map must be C×H×W, got {:?}", s)));
    }
    let (c, i, j) = position;
    let (h, w) = (s[1], s[2]);
    if c >= s[0] || i >= h || j >= w {
        return Err(Error::arg(format!(
            "position {:?} out of bounds for {:?}",
            position, s
        )));
    }
    let plane = &x.data()[c * h * w..(c + 1) * h * w];
    let read = |di: isize, dj: isize| -> T {
        let (ri, rj) = (i as isize + di, j as isize + dj);
        if ri < 0 || rj < 0 || ri >= h as isize || rj >= w as isize {
            T::zero()
        } else {
            plane[ri as usize * w + rj as usize]
        }
    };
    let mut acc = T::zero();
    for ((di, dj), sign) in contributions(kind, p) {
        acc = acc + T::from_f64(sign) * read(di, dj);
    }
    Ok(acc)
}

/// out[i][j] += coeff · x[i+dy][j+dx], zero padded.
fn acc_shifted<T: Scalar>(
    out: &mut [T],
    x: &[T],
    coeff: T,
    dy: isize,
    dx: isize,
    h: usize,
    w: usize,
) {
    let i0 = (-dy).max(0) as usize;
    let i1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
    let j0 = (-dx).max(0) as usize;
    let j1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
    if j0 >= j1 {
        return;
    }
    for i in i0..i1 {
        let src_row = (i as isize + dy) as usize;
        let src = &x[src_row * w + ((j0 as isize + dx) as usize)..];
        let dst = &mut out[i * w + j0..i * w + j1];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = *d + coeff * s;
        }
    }
}

/// Σ_ij g[i][j] · x[i+dy][j+dx], zero padded.
fn corr_shifted<T: Scalar>(g: &[T], x: &[T], dy: isize, dx: isize, h: usize, w: usize) -> T {
    let i0 = (-dy).max(0) as usize;
    let i1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
    let j0 = (-dx).max(0) as usize;
    let j1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
    let mut acc = T::zero();
    if j0 >= j1 {
        return acc;
    }
    for i in i0..i1 {
        let src_row = (i as isize + dy) as usize;
        let src = &x[src_row * w + ((j0 as isize + dx) as usize)..];
        let grow = &g[i * w + j0..i * w + j1];
        for (&gv, &xv) in grow.iter().zip(src) {
            acc = acc + gv * xv;
        }
    }
    acc
}

fn check_shapes<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 3 {
        return Err(Error::dim(format!("input must be C×H×W, got {:?}", xs)));
    }
    if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
        return Err(Error::dim(format!(
            "weights must be [C_out,C_in,3,3], got {:?}",
            ws
        )));
    }
    if xs[0] != ws[1] {
        return Err(Error::dim(format!(
            "channel mismatch: input has {} channels, kernel expects {}",
            xs[0], ws[1]
        )));
    }
    Ok((ws[0], xs[0], xs[1], xs[2]))
}

/// Forward pass: x [C_in,H,W] ⋆ w [C_out,C_in,3,3] → [C_out,H,W].
pub fn forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, kind: DiffConvKind) -> Result<Tensor<T>> {
    let (cout, cin, h, wid) = check_shapes(x, w)?;
    let hw = h * wid;
    let mut out = vec![T::zero(); cout * hw];
    for co in 0..cout {
        let out_plane = &mut out[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let x_plane = &x.data()[ci * hw..(ci + 1) * hw];
            let wbase = (co * cin + ci) * 9;
            for p in 0..9 {
                let wv = w.data()[wbase + p];
                for ((dy, dx), sign) in contributions(kind, p) {
                    acc_shifted(out_plane, x_plane, wv * T::from_f64(sign), dy, dx, h, wid);
                }
            }
        }
    }
    Tensor::new(vec![cout, h, wid], out)
}

/// Gradients of the forward pass with respect to input and weights.
pub fn backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    kind: DiffConvKind,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (cout, cin, h, wid) = check_shapes(x, w).expect("shapes checked at forward");
    let hw = h * wid;
    let mut dx = need_dx.then(|| vec![T::zero(); cin * hw]);
    let mut dw = need_dw.then(|| vec![T::zero(); cout * cin * 9]);
    for co in 0..cout {
        let g_plane = &grad_out.data()[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let x_plane = &x.data()[ci * hw..(ci + 1) * hw];
            let wbase = (co * cin + ci) * 9;
            for p in 0..9 {
                for ((dy, dx_off), sign) in contributions(kind, p) {
                    let s = T::from_f64(sign);
                    if let Some(dw) = dw.as_mut() {
                        dw[wbase + p] =
                            dw[wbase + p] + s * corr_shifted(g_plane, x_plane, dy, dx_off, h, wid);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wv = w.data()[wbase + p];
                        // y[i] reads x[i+δ] ⇒ x[i'] receives g[i'−δ]
                        acc_shifted(
                            &mut dx[ci * hw..(ci + 1) * hw],
                            g_plane,
                            wv * s,
                            -dy,
                            -dx_off,
                            h,
                            wid,
                        );
                    }
                }
            }
        }
    }
    (
        dx.map(|d| Tensor::new(vec![cin, h, wid], d).unwrap()),
        dw.map(|d| Tensor::new(vec![cout, cin, 3, 3], d).unwrap()),
    )
}

/// Spec-facing wrapper over [`forward`] taking a [`DiffKernel`].
pub fn diff_conv_forward<T: Scalar>(x: &Tensor<T>, kernel: &DiffKernel<T>) -> Result<Tensor<T>> {
    forward(x, &kernel.weights, kernel.kind)
}

/// Per-pixel channel map: x [C_in,H,W] × w [C_out,C_in] → [C_out,H,W].
pub fn conv1x1<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 3 || ws.len() != 2 {
        return Err(Error::dim(format!("conv1x1: x {:?}, w {:?}", xs, ws)));
    }
    if xs[0] != ws[1] {
        return Err(Error::dim(format!(
            "conv1x1 channel mismatch: input has {} channels, weights expect {}",
            xs[0], ws[1]
        )));
    }
    let hw = xs[1] * xs[2];
    let mut out = vec![T::zero(); ws[0] * hw];
    crate::tensor::matmul_nn_acc(w.data(), x.data(), &mut out, ws[0], ws[1], hw);
    Tensor::new(vec![ws[0], xs[1], xs[2]], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_kernel(cout: usize, cin: usize) -> Tensor<f64> {
        Tensor::full(&[cout, cin, 3, 3], 1.0)
    }

    #[test]
    fn cdc_xhat_vanishes_on_constant_map() {
        let x = Tensor::full(&[1, 4, 4], 3.5f64);
        for p in [0, 1, 2, 3, 5, 6, 7, 8] {
            let v = sample_xhat(&x, (0, 1, 1), p, DiffConvKind::Cdc).unwrap();
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn adc_xhat_vanishes_on_constant_map() {
        let x = Tensor::full(&[1, 5, 5], -2.0f64);
        for p in [0, 1, 2, 3, 5, 6, 7, 8] {
            let v = sample_xhat(&x, (0, 2, 2), p, DiffConvKind::Adc).unwrap();
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn rdc_radial_partner_sits_at_twice_the_offset() {
        // x[i][j] = i; neighbor directly below center (p=7, offset (1,0)):
        // x_pR is two rows below, so x̂ = (i+2) − (i+1) = 1.
        let data: Vec<f64> = (0..7).flat_map(|i| std::iter::repeat(i as f64).take(7)).collect();
        let x = Tensor::new(vec![1, 7, 7], data).unwrap();
        let v = sample_xhat(&x, (0, 3, 3), 7, DiffConvKind::Rdc).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn center_slot_is_rejected() {
        let x = Tensor::full(&[1, 3, 3], 1.0f64);
        assert!(sample_xhat(&x, (0, 1, 1), CENTER, DiffConvKind::Cdc).is_err());
    }

    #[test]
    fn cdc_constant_input_keeps_only_the_center_term() {
        let x = Tensor::full(&[1, 5, 5], 1.0f64);
        let y = forward(&x, &ones_kernel(1, 1), DiffConvKind::Cdc).unwrap();
        // interior: all x̂_p vanish, leaving w_c·x_c = 1
        assert!((y.data()[2 * 5 + 2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vanilla_counts_under_zero_padding() {
        let x = Tensor::full(&[1, 5, 5], 1.0f64);
        let y = forward(&x, &ones_kernel(1, 1), DiffConvKind::Vanilla).unwrap();
        assert_eq!(y.data()[2 * 5 + 2], 9.0); // interior
        assert_eq!(y.data()[0], 4.0); // corner
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let x = Tensor::full(&[2, 4, 4], 1.0f64);
        let w = ones_kernel(1, 3);
        assert!(matches!(
            forward(&x, &w, DiffConvKind::Vanilla),
            Err(crate::error::Error::Dim(_))
        ));
    }

    #[test]
    fn conv1x1_identity_and_zero() {
        let x = Tensor::new(vec![2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(conv1x1(&x, &id).unwrap(), x);
        let z = Tensor::<f64>::zeros(&[2, 2]);
        assert_eq!(conv1x1(&x, &z).unwrap(), Tensor::zeros(&[2, 2, 2]));
    }

    #[test]
    fn omega_sizes_match_kind() {
        assert_eq!(DiffConvKind::Cdc.omega_size(), 3);
        assert_eq!(DiffConvKind::Adc.omega_size(), 3);
        assert_eq!(DiffConvKind::Rdc.omega_size(), 5);
        assert_eq!(DiffConvKind::Soc.omega_size(), 5);
    }

    #[test]
    fn clockwise_ring_closes() {
        let mut p = 0;
        for _ in 0..8 {
            p = clockwise_next(p);
        }
        assert_eq!(p, 0);
    }
}

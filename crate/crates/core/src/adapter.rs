//! Mixture of convolutional bottleneck experts running parallel to the
//! frozen MLP.
//!
//! Each expert is a 1x1 down-projection, a GELU, one 3x3 difference
//! convolution of its kind, another GELU, and a 1x1 up-projection, all
//! without biases. The class token bypasses the spatial path and receives a
//! zero contribution.

use crate::bind::Binding;
use crate::config::RunMode;
use crate::diffconv::DiffConvKind;
use crate::error::{Error, Result};
use crate::gating::{self, GateTrace, GateWeights};
use crate::graph::Var;
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One convolutional expert.
#[derive(Debug, Clone)]
pub struct AdapterExpert<T: Scalar> {
    pub kind: DiffConvKind,
    /// 1x1 weights [d_mid × D].
    pub conv_down: Tensor<T>,
    /// 3x3 weights [d_mid, d_mid, 3, 3].
    pub conv_mid: Tensor<T>,
    /// 1x1 weights [D × d_mid]; starts at zero so the branch vanishes at init.
    pub conv_up: Tensor<T>,
}

impl<T: Scalar> AdapterExpert<T> {
    pub fn init(kind: DiffConvKind, embed_dim: usize, mid: usize, rng: &mut Stream) -> Self {
        AdapterExpert {
            kind,
            conv_down: crate::backbone::trunc_normal_tensor(&[mid, embed_dim], rng),
            conv_mid: crate::backbone::trunc_normal_tensor(&[mid, mid, 3, 3], rng),
            conv_up: Tensor::zeros(&[embed_dim, mid]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv_down.len() + self.conv_mid.len() + self.conv_up.len()
    }
}

/// All adapter experts of one block plus their shared gate.
#[derive(Debug, Clone)]
pub struct MoEAdapterLayer<T: Scalar> {
    pub experts: Vec<AdapterExpert<T>>,
    pub gate: GateWeights<T>,
}

impl<T: Scalar> MoEAdapterLayer<T> {
    pub fn init(
        embed_dim: usize,
        mid: usize,
        kinds: &[DiffConvKind],
        rng: &mut Stream,
    ) -> Self {
        let experts = kinds
            .iter()
            .map(|&k| AdapterExpert::init(k, embed_dim, mid, rng))
            .collect();
        MoEAdapterLayer {
            experts,
            gate: GateWeights::init(embed_dim, kinds.len(), rng),
        }
    }
}

fn grid_side(num_patches: usize) -> Result<usize> {
    let side = (num_patches as f64).sqrt().round() as usize;
    if side * side != num_patches {
        return Err(Error::config(format!(
            "{num_patches} patch tokens do not form a square grid"
        )));
    }
    Ok(side)
}

/// Split the class token off and lay patch tokens on a [D × h × w] grid,
/// token `1 + i·w + j` at grid cell `(i, j)`.
pub fn tokens_to_grid<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.shape().len() != 2 || x.rows() < 2 {
        return Err(Error::dim(format!("token tensor {:?} too small", x.shape())));
    }
    let (nt, d) = (x.rows(), x.cols());
    let side = grid_side(nt - 1)?;
    let class = Tensor::new(vec![1, d], x.row(0).to_vec())?;
    let mut grid = vec![T::zero(); d * (nt - 1)];
    for t in 0..nt - 1 {
        for c in 0..d {
            grid[c * (nt - 1) + t] = x.at2(1 + t, c);
        }
    }
    Ok((class, Tensor::new(vec![d, side, side], grid)?))
}

/// Inverse of [`tokens_to_grid`], bit-exact.
pub fn grid_to_tokens<T: Scalar>(class: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    if grid.shape().len() != 3 {
        return Err(Error::dim(format!("grid {:?} not rank 3", grid.shape())));
    }
    let (d, h, w) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    if class.len() != d {
        return Err(Error::dim(format!(
            "class token width {} vs {d} channels",
            class.len()
        )));
    }
    let np = h * w;
    let mut data = Vec::with_capacity((np + 1) * d);
    data.extend_from_slice(class.data());
    for t in 0..np {
        for c in 0..d {
            data.push(grid.data()[c * np + t]);
        }
    }
    Tensor::new(vec![np + 1, d], data)
}

/// One expert's token-stream contribution: zero class row, convolved patches.
pub fn adapter_expert_forward<T: Scalar>(
    b: &mut Binding<'_, T>,
    prefix: &str,
    expert: &AdapterExpert<T>,
    x: Var,
) -> Result<Var> {
    let g = b.graph;
    let (nt, d) = {
        let xv = g.value(x);
        (xv.rows(), xv.cols())
    };
    let side = grid_side(nt - 1)?;
    let patches = g.slice_rows(x, 1, nt - 1)?;
    let grid = g.reshape(g.transpose(patches)?, vec![d, side, side])?;
    let down = b.trainable(&format!("{prefix}.conv_down"), &expert.conv_down);
    let mid = b.trainable(&format!("{prefix}.conv_mid"), &expert.conv_mid);
    let up = b.trainable(&format!("{prefix}.conv_up"), &expert.conv_up);
    let h1 = g.gelu(g.conv1x1(grid, down)?);
    let h2 = g.gelu(g.diff_conv(h1, mid, expert.kind)?);
    let out_grid = g.conv1x1(h2, up)?;
    let out_tokens = g.transpose(g.reshape(out_grid, vec![d, nt - 1])?)?;
    let zero_class = g.constant(Tensor::zeros(&[1, d]));
    g.concat_rows(&[zero_class, out_tokens])
}

/// Routed adapter delta for one sample; the caller adds it next to the MLP.
pub fn moe_adapter_forward<T: Scalar>(
    b: &mut Binding<'_, T>,
    prefix: &str,
    layer: &MoEAdapterLayer<T>,
    x: Var,
    k: usize,
    mode: RunMode,
    training: bool,
    noise: Option<&mut Stream>,
) -> Result<(Var, Option<GateTrace>)> {
    let weighted = |b: &mut Binding<'_, T>, pairs: &[(usize, Option<Var>)]| -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(e, weight) in pairs {
            let eprefix = format!("{prefix}.expert{e}");
            let mut out = adapter_expert_forward(b, &eprefix, &layer.experts[e], x)?;
            if let Some(w) = weight {
                out = b.graph.scale_by(out, w)?;
            }
            acc = Some(match acc {
                Some(a) => b.graph.add(a, out)?,
                None => out,
            });
        }
        Ok(acc.unwrap())
    };
    match mode {
        RunMode::Moe => {
            let trace = gating::route(
                b,
                &format!("{prefix}.gate"),
                &layer.gate,
                x,
                k,
                training,
                noise,
            )?;
            let pairs: Vec<(usize, Option<Var>)> = trace
                .decision
                .selected
                .iter()
                .zip(&trace.selected_weight_vars)
                .map(|(&e, &w)| (e, Some(w)))
                .collect();
            Ok((weighted(b, &pairs)?, Some(trace)))
        }
        RunMode::MultiExperts => {
            let pairs: Vec<(usize, Option<Var>)> =
                (0..layer.experts.len()).map(|e| (e, None)).collect();
            Ok((weighted(b, &pairs)?, None))
        }
        RunMode::SingleExpert(id) => {
            if id >= layer.experts.len() {
                return Err(Error::arg(format!(
                    "expert {id} out of {}",
                    layer.experts.len()
                )));
            }
            Ok((weighted(b, &[(id, None)])?, None))
        }
        RunMode::BackboneOnly => Err(Error::arg(
            "backbone_only mode has no expert layers".to_string(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn random_tokens(n: usize, d: usize, rng: &mut Stream) -> Tensor<f64> {
        let data: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn grid_round_trip_is_exact() {
        let mut rng = Stream::new(1);
        let x = random_tokens(17, 6, &mut rng);
        let (class, grid) = tokens_to_grid(&x).unwrap();
        assert_eq!(grid.shape(), &[6, 4, 4]);
        assert_eq!(grid_to_tokens(&class, &grid).unwrap(), x);
    }

    #[test]
    fn token_index_maps_to_grid_position() {
        // marker: token 1 + 4i + j carries value 10i + j in channel 0
        let mut x = Tensor::<f64>::zeros(&[17, 3]);
        for i in 0..4 {
            for j in 0..4 {
                x.data_mut()[(1 + 4 * i + j) * 3] = (10 * i + j) as f64;
            }
        }
        let (_, grid) = tokens_to_grid(&x).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(grid.data()[i * 4 + j], (10 * i + j) as f64);
            }
        }
    }

    #[test]
    fn non_square_patch_count_is_rejected() {
        let x = Tensor::<f64>::zeros(&[6, 3]);
        assert!(tokens_to_grid(&x).is_err());
    }

    #[test]
    fn zero_up_conv_gives_zero_output() {
        let mut rng = Stream::new(2);
        let e = AdapterExpert::<f64>::init(DiffConvKind::Cdc, 6, 2, &mut rng);
        let g = Graph::new();
        let mut b = Binding::inference(&g);
        let x = g.constant(random_tokens(10, 6, &mut rng));
        let out = adapter_expert_forward(&mut b, "a", &e, x).unwrap();
        assert_eq!(*g.value(out), Tensor::zeros(&[10, 6]));
    }

    #[test]
    fn class_token_row_is_always_zero() {
        let mut rng = Stream::new(3);
        for kind in DiffConvKind::ALL {
            let mut e = AdapterExpert::<f64>::init(kind, 6, 2, &mut rng);
            e.conv_up = crate::backbone::trunc_normal_tensor(&[6, 2], &mut rng);
            let g = Graph::new();
            let mut b = Binding::inference(&g);
            let x = g.constant(random_tokens(10, 6, &mut rng));
            let out = adapter_expert_forward(&mut b, "a", &e, x).unwrap();
            let v = g.value(out);
            assert_eq!(v.shape(), &[10, 6]);
            assert!(v.row(0).iter().all(|&z| z == 0.0), "{kind:?}");
        }
    }

    #[test]
    fn expert_matches_stage_composition_oracle() {
        let mut rng = Stream::new(4);
        let mut e = AdapterExpert::<f64>::init(DiffConvKind::Vanilla, 4, 2, &mut rng);
        e.conv_up = crate::backbone::trunc_normal_tensor(&[4, 2], &mut rng);
        let x = random_tokens(5, 4, &mut rng);
        let g = Graph::new();
        let mut b = Binding::inference(&g);
        let xv = g.constant(x.clone());
        let out = adapter_expert_forward(&mut b, "a", &e, xv).unwrap();
        // hand-composed: reshape, 1x1, gelu, 3x3, gelu, 1x1, reshape back
        let (_, grid) = tokens_to_grid(&x).unwrap();
        let s1 = crate::diffconv::conv1x1(&grid, &e.conv_down)
            .unwrap()
            .map(crate::graph::gelu_scalar);
        let s2 = crate::diffconv::forward(&s1, &e.conv_mid, e.kind)
            .unwrap()
            .map(crate::graph::gelu_scalar);
        let s3 = crate::diffconv::conv1x1(&s2, &e.conv_up).unwrap();
        let expect = grid_to_tokens(&Tensor::zeros(&[1, 4]), &s3).unwrap();
        for (a, ex) in g.value(out).data().iter().zip(expect.data()) {
            assert!((a - ex).abs() <= 1e-10);
        }
    }

    #[test]
    fn single_expert_mode_matches_direct_expert() {
        let mut rng = Stream::new(5);
        let mut layer = MoEAdapterLayer::<f64>::init(6, 2, &DiffConvKind::ALL, &mut rng);
        for e in &mut layer.experts {
            e.conv_up = crate::backbone::trunc_normal_tensor(&[6, 2], &mut rng);
        }
        let x = random_tokens(10, 6, &mut rng);
        let g = Graph::new();
        let mut b = Binding::inference(&g);
        let xv = g.constant(x.clone());
        let (delta, trace) = moe_adapter_forward(
            &mut b,
            "a",
            &layer,
            xv,
            1,
            RunMode::SingleExpert(3),
            false,
            None,
        )
        .unwrap();
        assert!(trace.is_none());
        let g2 = Graph::new();
        let mut b2 = Binding::inference(&g2);
        let xv2 = g2.constant(x);
        let direct =
            adapter_expert_forward(&mut b2, "a.expert3", &layer.experts[3], xv2).unwrap();
        assert_eq!(*g.value(delta), *g2.value(direct));
    }
}

//! The pre-activation sub-block `f(x) = conv(dropout(relu(norm(x))))` shared
//! by the reversible, residual and weight-tied stacks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernels::{
    dropout_apply, graph_conv, graph_conv_vjp, norm, norm_vjp, relu, relu_vjp, AggSpec, ConvCache,
    ConvKind, ConvParams, DropoutMask, LinearParams, NormCache, NormKind, NormParams, ParamSet,
    Topology,
};
use crate::meter::ByteSize;
use crate::tensor::{Real, Tensor};

/// Structural choices shared by every sub-block of a stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub agg: AggSpec,
    pub conv: ConvKind,
    pub norm: NormKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubBlockParams<T> {
    pub norm: NormParams<T>,
    pub conv: ConvParams<T>,
}

impl<T: Real> ParamSet<T> for SubBlockParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.norm.tensors();
        v.extend(self.conv.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.norm.tensors_mut();
        v.extend(self.conv.tensors_mut());
        v
    }
}

impl<T: Real> SubBlockParams<T> {
    /// Identity norm, Glorot conv (and edge projection when `edge_dim` is set).
    pub fn init(width: usize, conv: ConvKind, edge_dim: Option<usize>, rng: &mut impl Rng) -> Self {
        Self {
            norm: NormParams::identity(width),
            conv: ConvParams {
                lin: LinearParams::glorot(conv.input_width(width), width, rng),
                edge_proj: edge_dim.map(|f| LinearParams::glorot(f, width, rng)),
            },
        }
    }

    pub fn count(width: usize, conv: ConvKind, edge_dim: Option<usize>) -> usize {
        NormParams::<T>::count(width) + ConvParams::<T>::count(width, conv, edge_dim)
    }

    pub fn width(&self) -> usize {
        self.norm.dim()
    }

    /// Zeroes the conv weights and biases so the sub-block outputs zero.
    pub fn zero_conv(&mut self) {
        for t in self.conv.tensors_mut() {
            t.fill(T::zero());
        }
    }
}

/// Everything the sub-block backward needs from its forward.
#[derive(Debug, Clone)]
pub struct SubBlockTape<T> {
    pub norm: NormCache<T>,
    /// Conv input, i.e. the dropped-out activation.
    pub h: Tensor<T>,
    pub conv: ConvCache<T>,
}

impl<T: Real> ByteSize for SubBlockTape<T> {
    fn byte_size(&self) -> usize {
        self.norm.byte_size() + self.h.byte_size() + self.conv.byte_size()
    }
}

pub fn sub_block_forward<T: Real>(
    topo: &Topology<'_, T>,
    x: &Tensor<T>,
    p: &SubBlockParams<T>,
    spec: &BlockSpec,
    mask: Option<&DropoutMask>,
) -> Result<Tensor<T>> {
    Ok(sub_block_forward_taped(topo, x, p, spec, mask)?.0)
}

pub fn sub_block_forward_taped<T: Real>(
    topo: &Topology<'_, T>,
    x: &Tensor<T>,
    p: &SubBlockParams<T>,
    spec: &BlockSpec,
    mask: Option<&DropoutMask>,
) -> Result<(Tensor<T>, SubBlockTape<T>)> {
    let (z, norm_cache) = norm(spec.norm, x, &p.norm)?;
    let a = relu(&z);
    let h = match mask {
        Some(m) => dropout_apply(&a, m)?,
        None => a,
    };
    let (y, conv_cache) = graph_conv(topo, &h, &p.conv, &spec.agg, spec.conv)?;
    Ok((
        y,
        SubBlockTape {
            norm: norm_cache,
            h,
            conv: conv_cache,
        },
    ))
}

/// Returns `(∂x, ∂params)` for upstream `gy`.
pub fn sub_block_vjp<T: Real>(
    topo: &Topology<'_, T>,
    p: &SubBlockParams<T>,
    spec: &BlockSpec,
    mask: Option<&DropoutMask>,
    tape: &SubBlockTape<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, SubBlockParams<T>)> {
    let (gh, gconv) = graph_conv_vjp(topo, &tape.h, &p.conv, &spec.agg, spec.conv, &tape.conv, gy)?;
    let ga = match mask {
        Some(m) => dropout_apply(&gh, m)?,
        None => gh,
    };
    let z = tape.norm.output(&p.norm);
    let gz = relu_vjp(&z, &ga)?;
    let (gx, gnorm) = norm_vjp(spec.norm, &tape.norm, &p.norm, &gz)?;
    Ok((
        gx,
        SubBlockParams {
            norm: gnorm,
            conv: gconv,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{add_self_loops, build_csr};
    use crate::kernels::AggKind;
    use rand::SeedableRng;

    fn spec() -> BlockSpec {
        BlockSpec {
            agg: AggSpec::new(AggKind::Sum),
            conv: ConvKind::Plain,
            norm: NormKind::Layer,
        }
    }

    #[test]
    fn zero_conv_gives_bias_rows() {
        let g = add_self_loops(&build_csr(&[(0, 1), (1, 0)], 2, None).unwrap()).unwrap();
        let topo = Topology::new(&g);
        let mut rng = rand::rngs::mock::StepRng::new(1, 1);
        let mut p = SubBlockParams::<f64>::init(3, ConvKind::Plain, None, &mut rng);
        p.zero_conv();
        p.conv.lin.bias = Tensor::from_rows(&[&[1.0, -2.0, 0.5]]);
        let x = Tensor::from_rows(&[&[1.0, 2.0, 4.0], &[0.0, -1.0, 3.0]]);
        let y = sub_block_forward(&topo, &x, &p, &spec(), None).unwrap();
        assert_eq!(y.row(0), &[1.0, -2.0, 0.5]);
        assert_eq!(y.row(1), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn full_keep_mask_matches_no_dropout() {
        let g = add_self_loops(&build_csr(&[(0, 1), (1, 2), (2, 0)], 3, None).unwrap()).unwrap();
        let topo = Topology::new(&g);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = SubBlockParams::<f64>::init(2, ConvKind::Plain, None, &mut rng);
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[-1.0, 0.5], &[3.0, 3.5]]);
        let a = sub_block_forward(&topo, &x, &p, &spec(), None).unwrap();
        let b = sub_block_forward(&topo, &x, &p, &spec(), Some(&DropoutMask::ones(3, 2))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_node_single_channel_by_hand() {
        // One channel: layer norm maps every row to its shift, whatever the
        // input. With shift 0.75 and scale 2, relu keeps 0.75; dropout keeps
        // node 0 (x2) and drops node 1. Sum over {self, other} of h then
        // w=3, b=0.5: node 0 gets 3·1.5 + 0.5 = 5, node 1 gets the same.
        let g = add_self_loops(&build_csr(&[(0, 1), (1, 0)], 2, None).unwrap()).unwrap();
        let topo = Topology::new(&g);
        let p = SubBlockParams {
            norm: NormParams {
                scale: Tensor::from_rows(&[&[2.0]]),
                shift: Tensor::from_rows(&[&[0.75]]),
                epsilon: 1e-5,
            },
            conv: ConvParams {
                lin: LinearParams {
                    weight: Tensor::from_rows(&[&[3.0]]),
                    bias: Tensor::from_rows(&[&[0.5]]),
                },
                edge_proj: None,
            },
        };
        let m = DropoutMask::from_bits(2, 1, vec![1, 0], 0.5).unwrap();
        let x = Tensor::<f64>::from_rows(&[&[10.0], &[-4.0]]);
        let y = sub_block_forward(&topo, &x, &p, &spec(), Some(&m)).unwrap();
        assert!((y.get(0, 0) - 5.0).abs() < 1e-12);
        assert!((y.get(1, 0) - 5.0).abs() < 1e-12);

        // two channels, no dropout: x=[1,3] normalises to [-1,1] (up to ε)
        let p2 = SubBlockParams {
            norm: NormParams::identity(2),
            conv: ConvParams {
                lin: LinearParams {
                    weight: Tensor::identity(2),
                    bias: Tensor::zeros(1, 2),
                },
                edge_proj: None,
            },
        };
        let x = Tensor::<f64>::from_rows(&[&[1.0, 3.0], &[3.0, 1.0]]);
        let y = sub_block_forward(&topo, &x, &p2, &spec(), None).unwrap();
        // relu: node 0 → [0, s], node 1 → [s, 0] with s = 1/√(1+ε); each node sums both
        let s = 1.0 / (1.0_f64 + 1e-5).sqrt();
        for r in 0..2 {
            assert!((y.get(r, 0) - s).abs() < 1e-12);
            assert!((y.get(r, 1) - s).abs() < 1e-12);
        }
    }
}

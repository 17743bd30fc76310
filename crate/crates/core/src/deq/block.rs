//! The equilibrium cell
//!
//! ```text
//! z1 = conv1(z)
//! z2 = norm1(z1 + x)
//! z3 = conv2(dropout(relu(z2)))
//! f(z; x) = norm2(relu(z3 + z1))
//! ```
//!
//! with `x` the injected input features.

use rand::Rng;

use crate::error::Result;
use crate::kernels::{
    dropout_apply, graph_conv, graph_conv_vjp, norm, norm_vjp, relu, relu_vjp, ConvCache, ConvKind,
    ConvParams, DropoutMask, LinearParams, NormCache, NormParams, ParamSet,
};
use crate::meter::ByteSize;
use crate::rev::BlockEnv;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DeqParams<T> {
    pub conv1: ConvParams<T>,
    pub norm1: NormParams<T>,
    pub conv2: ConvParams<T>,
    pub norm2: NormParams<T>,
    /// Dropout probability inside the cell; not a learnable tensor.
    pub drop: f64,
}

impl<T: Real> ParamSet<T> for DeqParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.conv1.tensors();
        v.extend(self.norm1.tensors());
        v.extend(self.conv2.tensors());
        v.extend(self.norm2.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.conv1.tensors_mut();
        v.extend(self.norm1.tensors_mut());
        v.extend(self.conv2.tensors_mut());
        v.extend(self.norm2.tensors_mut());
        v
    }
}

impl<T: Real> DeqParams<T> {
    pub fn init(width: usize, conv: ConvKind, edge_dim: Option<usize>, drop: f64, rng: &mut impl Rng) -> Self {
        let conv_params = |rng: &mut _| ConvParams {
            lin: LinearParams::glorot(conv.input_width(width), width, rng),
            edge_proj: edge_dim.map(|f| LinearParams::glorot(f, width, rng)),
        };
        let conv1 = conv_params(rng);
        let conv2 = conv_params(rng);
        Self {
            conv1,
            norm1: NormParams::identity(width),
            conv2,
            norm2: NormParams::identity(width),
            drop,
        }
    }

    pub fn count(width: usize, conv: ConvKind, edge_dim: Option<usize>) -> usize {
        2 * (ConvParams::<T>::count(width, conv, edge_dim) + NormParams::<T>::count(width))
    }

    pub fn width(&self) -> usize {
        self.norm1.dim()
    }
}

/// Forward values the cell's vjp needs.
#[derive(Debug, Clone)]
pub struct DeqTape<T> {
    z: Tensor<T>,
    conv1: ConvCache<T>,
    norm1: NormCache<T>,
    h: Tensor<T>,
    conv2: ConvCache<T>,
    pre2: Tensor<T>,
    norm2: NormCache<T>,
}

impl<T: Real> ByteSize for DeqTape<T> {
    fn byte_size(&self) -> usize {
        self.z.byte_size()
            + self.conv1.byte_size()
            + self.norm1.byte_size()
            + self.h.byte_size()
            + self.conv2.byte_size()
            + self.pre2.byte_size()
            + self.norm2.byte_size()
    }
}

pub fn deq_cell<T: Real>(
    z: &Tensor<T>,
    x: &Tensor<T>,
    p: &DeqParams<T>,
    env: BlockEnv<'_, '_, T>,
    mask: Option<&DropoutMask>,
) -> Result<Tensor<T>> {
    Ok(deq_cell_taped(z, x, p, env, mask)?.0)
}

pub fn deq_cell_taped<T: Real>(
    z: &Tensor<T>,
    x: &Tensor<T>,
    p: &DeqParams<T>,
    env: BlockEnv<'_, '_, T>,
    mask: Option<&DropoutMask>,
) -> Result<(Tensor<T>, DeqTape<T>)> {
    let spec = env.spec;
    let (z1, conv1) = graph_conv(env.topo, z, &p.conv1, &spec.agg, spec.conv)?;
    let (z2, norm1) = norm(spec.norm, &z1.add(x)?, &p.norm1)?;
    let a = relu(&z2);
    let h = match mask {
        Some(m) => dropout_apply(&a, m)?,
        None => a,
    };
    let (mut pre2, conv2) = graph_conv(env.topo, &h, &p.conv2, &spec.agg, spec.conv)?;
    pre2.add_assign(&z1)?;
    let (out, norm2) = norm(spec.norm, &relu(&pre2), &p.norm2)?;
    Ok((
        out,
        DeqTape {
            z: z.clone(),
            conv1,
            norm1,
            h,
            conv2,
            pre2,
            norm2,
        },
    ))
}

/// Returns `(∂z, ∂x, ∂params)` for upstream `gy`.
pub fn deq_cell_vjp<T: Real>(
    p: &DeqParams<T>,
    env: BlockEnv<'_, '_, T>,
    mask: Option<&DropoutMask>,
    tape: &DeqTape<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, DeqParams<T>)> {
    let spec = env.spec;
    let (gr, gnorm2) = norm_vjp(spec.norm, &tape.norm2, &p.norm2, gy)?;
    let gpre2 = relu_vjp(&tape.pre2, &gr)?;
    let (gh, gconv2) = graph_conv_vjp(env.topo, &tape.h, &p.conv2, &spec.agg, spec.conv, &tape.conv2, &gpre2)?;
    let ga = match mask {
        Some(m) => dropout_apply(&gh, m)?,
        None => gh,
    };
    let gz2 = relu_vjp(&tape.norm1.output(&p.norm1), &ga)?;
    let (gx, gnorm1) = norm_vjp(spec.norm, &tape.norm1, &p.norm1, &gz2)?;
    let gz1 = gpre2.add(&gx)?;
    let (gz, gconv1) = graph_conv_vjp(env.topo, &tape.z, &p.conv1, &spec.agg, spec.conv, &tape.conv1, &gz1)?;
    Ok((
        gz,
        gx,
        DeqParams {
            conv1: gconv1,
            norm1: gnorm1,
            conv2: gconv2,
            norm2: gnorm2,
            drop: p.drop,
        },
    ))
}

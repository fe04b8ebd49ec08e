//! Parameterised building blocks shared by the backbone, bridge and side network.

use crate::error::Result;
use crate::param::{Init, ParamId, ParamKind, ParamSink, ParamSpec, ParamStore};
use crate::tensor::{Element, Graph, Var};

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn declare(sink: &mut dyn ParamSink, name: &str, dim: usize, trainable: bool) -> Result<Self> {
        Ok(Self {
            gamma: sink.declare(ParamSpec::new(
                format!("{name}.gamma"),
                [dim],
                ParamKind::Norm,
                trainable,
                Init::Ones,
            ))?,
            beta: sink.declare(ParamSpec::new(
                format!("{name}.beta"),
                [dim],
                ParamKind::Norm,
                trainable,
                Init::Zeros,
            ))?,
        })
    }

    pub fn apply<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, eps: f64) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn declare(
        sink: &mut dyn ParamSink,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        trainable: bool,
        std: f64,
    ) -> Result<Self> {
        let weight = sink.declare(ParamSpec::new(
            format!("{name}.weight"),
            [d_out, d_in],
            ParamKind::Weight,
            trainable,
            Init::TruncNormal(std),
        ))?;
        let bias = if bias {
            Some(sink.declare(ParamSpec::new(
                format!("{name}.bias"),
                [d_out],
                ParamKind::Bias,
                trainable,
                Init::Zeros,
            ))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn apply<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Square-kernel convolution with bias. Weights start at the fan-in scaled
/// std `sqrt(2 / (c_in·k²))`.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn declare(
        sink: &mut dyn ParamSink,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: sink.declare(ParamSpec::new(
                format!("{name}.weight"),
                [c_out, c_in, kernel, kernel],
                ParamKind::Weight,
                true,
                Init::TruncNormal(std),
            ))?,
            bias: sink.declare(ParamSpec::new(
                format!("{name}.bias"),
                [c_out],
                ParamKind::Bias,
                true,
                Init::Zeros,
            ))?,
            stride,
            pad,
        })
    }

    pub fn apply<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

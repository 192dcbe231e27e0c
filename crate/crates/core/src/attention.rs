//! Squeeze-and-excitation and convolutional block attention (CBAM) gates.
//!
//! Both rescale a `(N, C, T, F)` feature map and preserve its shape. SE
//! gates channels from globally averaged context. CBAM gates channels from
//! average- and max-pooled context through a shared MLP, then gates
//! time-frequency positions from channel-pooled maps through a small
//! convolution.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{conv2d, ConvGeometry, Conv2d, Linear};
use crate::params::{Bound, ParamStore};
use crate::tensor::Real;

pub const DEFAULT_REDUCTION: usize = 4;
pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

/// Two-layer bottleneck perceptron `C -> C/r -> C` with a ReLU in between.
#[derive(Clone, Copy)]
pub struct Bottleneck<'t, T: Real> {
    pub w1: Var<'t, T>,
    pub b1: Var<'t, T>,
    pub w2: Var<'t, T>,
    pub b2: Var<'t, T>,
}

impl<'t, T: Real> Bottleneck<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = crate::layers::linear(x, self.w1, self.b1)?.relu();
        crate::layers::linear(h, self.w2, self.b2)
    }

    fn channels(&self) -> usize {
        self.w1.shape()[1]
    }
}

fn check_channels<T: Real>(op: &'static str, x: Var<'_, T>, channels: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(op, format!("input {s:?} must be (N, C, T, F)")));
    }
    if s[1] != channels {
        return Err(Error::shape(op, format!("input has {} channels, block expects {channels}", s[1])));
    }
    Ok((s[0], s[1]))
}

/// `x * sigmoid(mlp(mean_{T,F}(x)))`, the gate broadcast over time and
/// frequency.
pub fn se_block<'t, T: Real>(x: Var<'t, T>, mlp: &Bottleneck<'t, T>) -> Result<Var<'t, T>> {
    let (n, c) = check_channels("se_block", x, mlp.channels())?;
    let squeezed = x.mean(&[2, 3], false)?;
    let gate = mlp.forward(squeezed)?.sigmoid().reshape(&[n, c, 1, 1])?;
    x.mul(gate)
}

/// Channel half of CBAM: `x * sigmoid(mlp(avgpool(x)) + mlp(maxpool(x)))`.
pub fn cbam_channel<'t, T: Real>(x: Var<'t, T>, mlp: &Bottleneck<'t, T>) -> Result<Var<'t, T>> {
    let (n, c) = check_channels("cbam_channel", x, mlp.channels())?;
    let avg = mlp.forward(x.mean(&[2, 3], false)?)?;
    let max = mlp.forward(x.max(&[2, 3], false)?)?;
    let gate = avg.add(max)?.sigmoid().reshape(&[n, c, 1, 1])?;
    x.mul(gate)
}

/// Spatial half of CBAM: stacks the channel-wise mean and max into a
/// two-channel map, convolves it to one channel with a `k x k` kernel
/// (`k` odd, same padding) and gates every position.
pub fn cbam_spatial<'t, T: Real>(x: Var<'t, T>, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    let ws = weight.shape();
    if ws.len() != 4 || ws[0] != 1 || ws[1] != 2 || ws[2] % 2 == 0 || ws[3] % 2 == 0 {
        return Err(Error::contract(
            "cbam_spatial",
            format!("spatial kernel must be (1, 2, k, k) with k odd, got {ws:?}"),
        ));
    }
    if x.shape().len() != 4 {
        return Err(Error::shape("cbam_spatial", format!("input {:?} must be (N, C, T, F)", x.shape())));
    }
    let pooled = Var::concat(&[x.mean(&[1], true)?, x.max(&[1], true)?], 1)?;
    let geom = ConvGeometry { stride: (1, 1), padding: ((ws[2] - 1) / 2, (ws[3] - 1) / 2) };
    let gate = conv2d(pooled, weight, Some(bias), geom)?.sigmoid();
    x.mul(gate)
}

/// Channel attention followed by spatial attention.
pub fn cbam<'t, T: Real>(
    x: Var<'t, T>,
    mlp: &Bottleneck<'t, T>,
    weight: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    cbam_spatial(cbam_channel(x, mlp)?, weight, bias)
}

fn reduced(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::Config(format!(
            "{channels} channels not divisible by reduction {reduction}"
        )));
    }
    Ok(channels / reduction)
}

#[derive(Clone, Debug)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, rng),
        }
    }

    fn bind<'t, T: Real>(&self, p: &Bound<'t, T>) -> Bottleneck<'t, T> {
        Bottleneck {
            w1: p.var(self.fc1.weight()),
            b1: p.var(self.fc1.bias()),
            w2: p.var(self.fc2.weight()),
            b2: p.var(self.fc2.bias()),
        }
    }

    fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

#[derive(Clone, Debug)]
pub struct SqueezeExcitation {
    pub channels: usize,
    pub reduction: usize,
    mlp: Mlp,
}

impl SqueezeExcitation {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = reduced(channels, reduction)?;
        Ok(SqueezeExcitation { channels, reduction, mlp: Mlp::new(store, name, channels, hidden, rng) })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        se_block(x, &self.mlp.bind(p))
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }
}

#[derive(Clone, Debug)]
pub struct Cbam {
    pub channels: usize,
    pub reduction: usize,
    pub kernel: usize,
    mlp: Mlp,
    spatial: Conv2d,
}

impl Cbam {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = reduced(channels, reduction)?;
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("CBAM spatial kernel {kernel} must be odd")));
        }
        let mlp = Mlp::new(store, &format!("{name}.channel"), channels, hidden, rng);
        let pad = (kernel - 1) / 2;
        let spatial = Conv2d::new(
            store,
            &format!("{name}.spatial"),
            2,
            1,
            (kernel, kernel),
            ConvGeometry { stride: (1, 1), padding: (pad, pad) },
            rng,
        );
        Ok(Cbam { channels, reduction, kernel, mlp, spatial })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (w, b) = self.spatial_vars(p);
        cbam(x, &self.mlp.bind(p), w, b)
    }

    fn spatial_vars<'t, T: Real>(&self, p: &Bound<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        let names = self.spatial.param_ids();
        (p.var(names.0), p.var(names.1))
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count() + self.spatial.param_count()
    }
}

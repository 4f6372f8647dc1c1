//! Parameterised building blocks.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::param::{join, Module, Param};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::new(shape, (0..numel).map(|_| dist.sample(rng)).collect()).unwrap()
}

/// 2-D convolution with square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Self {
            weight: Param::new(uniform(vec![cout, cin, k, k], bound, rng)),
            bias: bias.then(|| Param::new(uniform(vec![cout], bound, rng))),
            stride,
            pad,
        }
    }

    /// Same-size convolution (odd kernel, stride 1).
    pub fn same(cin: usize, cout: usize, k: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self::new(cin, cout, k, 1, k / 2, bias, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        x.conv2d(w, b, self.stride, self.pad)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Transposed convolution; weight layout `(c_in, c_out, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((cout * k * k) as f64).sqrt();
        Self {
            weight: Param::new(uniform(vec![cin, cout, k, k], bound, rng)),
            bias: bias.then(|| Param::new(uniform(vec![cout], bound, rng))),
            stride,
            pad,
            output_padding,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        x.conv_transpose2d(w, b, self.stride, self.pad, self.output_padding)
    }
}

impl Module for ConvTranspose2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Param::new(uniform(vec![fan_out, fan_in], bound, rng)),
            bias: bias.then(|| Param::new(uniform(vec![fan_out], bound, rng))),
        }
    }

    /// `x`: (n, fan_in) → (n, fan_out).
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let y = x.matmul_t(tape.param(&self.weight), false, true);
        match &self.bias {
            Some(b) => y.add(tape.param(b)),
            None => y,
        }
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Batch normalisation over the channel axis of `(n, c, h, w)` inputs.
///
/// In training mode the batch statistics normalise the input and the updated
/// running estimates are posted to the tape as buffer updates.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(vec![1, c, 1, 1])),
            beta: Param::new(Tensor::zeros(vec![1, c, 1, 1])),
            running_mean: Param::buffer(Tensor::zeros(vec![1, c, 1, 1])),
            running_var: Param::buffer(Tensor::ones(vec![1, c, 1, 1])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, train: bool) -> Var<'t> {
        let xhat = if train {
            let mean = x.mean_axes(&[0, 2, 3]);
            let xc = x.sub(mean);
            let var = xc.square().mean_axes(&[0, 2, 3]);
            let shape = x.shape();
            let count = (shape[0] * shape[2] * shape[3]) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = self.running_mean.value.zip_map(&mean.value(), |r, b| (1.0 - m) * r + m * b);
            let rv = self.running_var.value.zip_map(&var.value(), |r, b| (1.0 - m) * r + m * b * unbiased);
            tape.push_buffer_update(self.running_mean.uid(), rm);
            tape.push_buffer_update(self.running_var.uid(), rv);
            xc.mul(var.add_scalar(self.eps).powf(-0.5))
        } else {
            let mean = tape.param(&self.running_mean);
            let inv = self.running_var.value.map(|v| 1.0 / (v + self.eps).sqrt());
            x.sub(mean).mul(tape.constant(inv))
        };
        xhat.mul(tape.param(&self.gamma)).add(tape.param(&self.beta))
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

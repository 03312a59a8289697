//! Convolution blocks: conv -> batch norm -> clipped ReLU -> dropout.
//!
//! Activations are `[time, frequency, channels]` arrays, one per utterance.
//! 1-D convolutions run on `[time, 1, channels]` and dense layers are 1x1
//! convolutions, so a single im2col kernel covers every layer kind.

use ndarray::{Array2, Array3, ArrayView2};
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{same_out, same_pad_before, Activation, LayerSpec};
use super::params::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvLayer {
    pub spec: LayerSpec,
    kernel: [usize; 2],
    stride: [usize; 2],
    in_freq: usize,
    in_channels: usize,
    out_freq: usize,
    weight: usize,
    bias: Option<usize>,
    /// gamma, beta (params) and running mean, running var (buffers).
    norm: Option<[usize; 4]>,
    bn_epsilon: f64,
}

/// Per-layer state saved by a forward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache<F> {
    inputs: Vec<Array3<F>>,
    /// Normalized conv output (or raw conv output without batch norm).
    xhat: Vec<Array3<F>>,
    /// Input to the activation.
    pre_activation: Vec<Array3<F>>,
    masks: Vec<Vec<F>>,
    inv_std: Vec<F>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub batch_count: usize,
    /// Largest clipped-ReLU output, before dropout scaling.
    pub max_activation: Option<f64>,
}

struct Geometry {
    out_time: usize,
    pad_time: usize,
    pad_freq: usize,
}

impl ConvLayer {
    /// Registers the layer's tensors, initialized from the `init` substream.
    pub fn build<F: Real>(
        spec: &LayerSpec,
        in_freq: usize,
        in_channels: usize,
        bn_epsilon: f64,
        seed: u64,
        params: &mut ParamSet<F>,
        buffers: &mut ParamSet<F>,
    ) -> Self {
        let (kernel, stride) = spec.geometry().expect("spatial layer");
        let out = spec.filters;
        let fan_in = kernel[0] * kernel[1] * in_channels;
        let limit = (6.0 / fan_in as f64).sqrt();
        let name = |suffix: &str| format!("{}.{suffix}", spec.name);

        let mut rng = substream(seed, &format!("init/{}", name("weight")));
        let mut w = Tensor::zeros(name("weight"), vec![kernel[0], kernel[1], in_channels, out]);
        for x in w.data.iter_mut() {
            *x = F::of(rng.random_range(-limit..limit));
        }
        let weight = params.push(w);
        let norm = spec.batch_norm.then(|| {
            [
                params.push(Tensor::filled(name("bn.gamma"), vec![out], F::one())),
                params.push(Tensor::zeros(name("bn.beta"), vec![out])),
                buffers.push(Tensor::zeros(name("bn.running_mean"), vec![out])),
                buffers.push(Tensor::filled(name("bn.running_var"), vec![out], F::one())),
            ]
        });
        // a bias in front of batch norm is cancelled by the mean subtraction
        let bias = (!spec.batch_norm).then(|| params.push(Tensor::zeros(name("bias"), vec![out])));
        Self {
            spec: spec.clone(),
            kernel,
            stride,
            in_freq,
            in_channels,
            out_freq: same_out(in_freq, stride[1]),
            weight,
            bias,
            norm,
            bn_epsilon,
        }
    }

    pub fn out_freq(&self) -> usize {
        self.out_freq
    }

    pub fn out_channels(&self) -> usize {
        self.spec.filters
    }

    fn geometry(&self, in_time: usize) -> Geometry {
        Geometry {
            out_time: same_out(in_time, self.stride[0]),
            pad_time: same_pad_before(in_time, self.kernel[0], self.stride[0]),
            pad_freq: same_pad_before(self.in_freq, self.kernel[1], self.stride[1]),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1] && self.stride == [1, 1]
    }

    fn weight_view<'a, F: Real>(&self, params: &'a ParamSet<F>) -> ArrayView2<'a, F> {
        let k = self.kernel[0] * self.kernel[1] * self.in_channels;
        ArrayView2::from_shape((k, self.spec.filters), &params.tensors[self.weight].data)
            .expect("weight shape")
    }

    fn im2col<F: Real>(&self, x: &Array3<F>) -> Array2<F> {
        let (in_time, in_freq, ci) = x.dim();
        let g = self.geometry(in_time);
        let [kt, kf] = self.kernel;
        let [st, sf] = self.stride;
        let k = kt * kf * ci;
        let xs = x.as_slice().expect("standard layout");
        let mut cols = Array2::zeros((g.out_time * self.out_freq, k));
        let cs = cols.as_slice_mut().expect("standard layout");
        for to in 0..g.out_time {
            for fo in 0..self.out_freq {
                let row = &mut cs[(to * self.out_freq + fo) * k..][..k];
                for dt in 0..kt {
                    let Some(ti) = (to * st + dt).checked_sub(g.pad_time).filter(|&t| t < in_time) else {
                        continue;
                    };
                    for df in 0..kf {
                        let Some(fi) = (fo * sf + df).checked_sub(g.pad_freq).filter(|&f| f < in_freq) else {
                            continue;
                        };
                        row[(dt * kf + df) * ci..][..ci]
                            .copy_from_slice(&xs[(ti * in_freq + fi) * ci..][..ci]);
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: Real>(&self, cols: &Array2<F>, in_time: usize) -> Array3<F> {
        let ci = self.in_channels;
        let g = self.geometry(in_time);
        let [kt, kf] = self.kernel;
        let [st, sf] = self.stride;
        let k = kt * kf * ci;
        let mut x = Array3::zeros((in_time, self.in_freq, ci));
        let xs = x.as_slice_mut().expect("standard layout");
        let cs = cols.as_slice().expect("standard layout");
        for to in 0..g.out_time {
            for fo in 0..self.out_freq {
                let row = &cs[(to * self.out_freq + fo) * k..][..k];
                for dt in 0..kt {
                    let Some(ti) = (to * st + dt).checked_sub(g.pad_time).filter(|&t| t < in_time) else {
                        continue;
                    };
                    for df in 0..kf {
                        let Some(fi) = (fo * sf + df).checked_sub(g.pad_freq).filter(|&f| f < self.in_freq) else {
                            continue;
                        };
                        let dst = &mut xs[(ti * self.in_freq + fi) * ci..][..ci];
                        for (d, &s) in dst.iter_mut().zip(&row[(dt * kf + df) * ci..][..ci]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        x
    }

    fn as_rows<F: Real>(x: &Array3<F>) -> ArrayView2<'_, F> {
        let (t, f, c) = x.dim();
        ArrayView2::from_shape((t * f, c), x.as_slice().expect("standard layout")).expect("rows")
    }

    fn conv<F: Real>(&self, params: &ParamSet<F>, x: &Array3<F>) -> Array3<F> {
        let w = self.weight_view(params);
        let mut out = if self.is_pointwise() {
            Self::as_rows(x).dot(&w)
        } else {
            self.im2col(x).dot(&w)
        };
        if let Some(b) = self.bias {
            let bias = ndarray::ArrayView1::from(&params.tensors[b].data);
            out += &bias;
        }
        let out_time = out.nrows() / self.out_freq;
        out.into_shape_with_order((out_time, self.out_freq, self.spec.filters))
            .expect("conv output shape")
    }

    pub fn forward<F: Real>(
        &self,
        params: &ParamSet<F>,
        buffers: &ParamSet<F>,
        inputs: Vec<Array3<F>>,
        mode: Mode,
        clip: F,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(Vec<Array3<F>>, LayerCache<F>)> {
        for x in &inputs {
            let (t, f, c) = x.dim();
            if t == 0 || f != self.in_freq || c != self.in_channels {
                return Err(Error::Shape {
                    layer: self.spec.name.clone(),
                    detail: format!(
                        "expected [T, {}, {}], got [{t}, {f}, {c}]",
                        self.in_freq, self.in_channels
                    ),
                });
            }
        }
        let channels = self.spec.filters;
        let conv_out: Vec<Array3<F>> = inputs.iter().map(|x| self.conv(params, x)).collect();

        let mut cache = LayerCache {
            inputs,
            xhat: Vec::new(),
            pre_activation: Vec::new(),
            masks: Vec::new(),
            inv_std: Vec::new(),
            batch_mean: Vec::new(),
            batch_var: Vec::new(),
            batch_count: 0,
            max_activation: None,
        };

        let normalized = match self.norm {
            None => conv_out,
            Some([gamma, beta, rmean, rvar]) => {
                let eps = self.bn_epsilon;
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mut sum = vec![0.0f64; channels];
                        let mut sq = vec![0.0f64; channels];
                        let mut n = 0usize;
                        for y in &conv_out {
                            for row in Self::as_rows(y).rows() {
                                for (c, &v) in row.iter().enumerate() {
                                    sum[c] += v.to_f64().unwrap();
                                }
                                n += 1;
                            }
                        }
                        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
                        for y in &conv_out {
                            for row in Self::as_rows(y).rows() {
                                for (c, &v) in row.iter().enumerate() {
                                    sq[c] += (v.to_f64().unwrap() - mean[c]).powi(2);
                                }
                            }
                        }
                        let var: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();
                        cache.batch_count = n;
                        (mean, var)
                    }
                    Mode::Eval => (
                        buffers.tensors[rmean].data.iter().map(|x| x.to_f64().unwrap()).collect(),
                        buffers.tensors[rvar].data.iter().map(|x| x.to_f64().unwrap()).collect(),
                    ),
                };
                let inv_std: Vec<F> = var.iter().map(|v| F::of(1.0 / (v + eps).sqrt())).collect();
                let mean_f: Vec<F> = mean.iter().map(|&m| F::of(m)).collect();
                let g = &params.tensors[gamma].data;
                let b = &params.tensors[beta].data;
                let mut outs = Vec::with_capacity(conv_out.len());
                for mut y in conv_out {
                    let mut xh = y.clone();
                    for (xrow, yrow) in xh
                        .as_slice_mut()
                        .unwrap()
                        .chunks_exact_mut(channels)
                        .zip(y.as_slice_mut().unwrap().chunks_exact_mut(channels))
                    {
                        for c in 0..channels {
                            let v = (xrow[c] - mean_f[c]) * inv_std[c];
                            xrow[c] = v;
                            yrow[c] = g[c] * v + b[c];
                        }
                    }
                    cache.xhat.push(xh);
                    outs.push(y);
                }
                cache.inv_std = inv_std;
                cache.batch_mean = mean;
                cache.batch_var = var;
                outs
            }
        };

        let activated = match self.spec.activation {
            Activation::None => normalized,
            Activation::ClippedRelu => {
                let outs: Vec<Array3<F>> = normalized
                    .iter()
                    .map(|y| y.mapv(|v| v.max(F::zero()).min(clip)))
                    .collect();
                cache.max_activation = Some(
                    outs.iter()
                        .flat_map(|a| a.iter())
                        .fold(0.0f64, |m, v| m.max(v.to_f64().unwrap())),
                );
                cache.pre_activation = normalized;
                outs
            }
        };

        let p = self.spec.dropout;
        let outputs = match (mode, dropout_rng) {
            (Mode::Train, Some(rng)) if p > 0.0 => {
                let scale = F::of(1.0 / (1.0 - p));
                let mut outs = Vec::with_capacity(activated.len());
                for mut a in activated {
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
                    let mask: Vec<F> = (0..a.len())
                        .map(|_| if mask_rng.random::<f64>() < p { F::zero() } else { scale })
                        .collect();
                    a.as_slice_mut()
                        .unwrap()
                        .iter_mut()
                        .zip(&mask)
                        .for_each(|(v, &m)| *v *= m);
                    cache.masks.push(mask);
                    outs.push(a);
                }
                outs
            }
            _ => activated,
        };
        Ok((outputs, cache))
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when `need_input` is set.
    pub fn backward<F: Real>(
        &self,
        params: &ParamSet<F>,
        cache: &LayerCache<F>,
        mut grad_out: Vec<Array3<F>>,
        clip: F,
        grads: &mut ParamSet<F>,
        need_input: bool,
    ) -> Result<Option<Vec<Array3<F>>>> {
        let channels = self.spec.filters;
        if !cache.masks.is_empty() {
            for (g, m) in grad_out.iter_mut().zip(&cache.masks) {
                g.as_slice_mut().unwrap().iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
            }
        }
        if self.spec.activation == Activation::ClippedRelu {
            for (g, pre) in grad_out.iter_mut().zip(&cache.pre_activation) {
                g.zip_mut_with(pre, |v, &y| {
                    if !(y > F::zero() && y < clip) {
                        *v = F::zero();
                    }
                });
            }
        }
        if let Some([gamma, beta, _, _]) = self.norm {
            let n = F::of(cache.batch_count as f64);
            let mut dbeta = vec![F::zero(); channels];
            let mut dgamma = vec![F::zero(); channels];
            for (g, xh) in grad_out.iter().zip(&cache.xhat) {
                for (grow, xrow) in g
                    .as_slice()
                    .unwrap()
                    .chunks_exact(channels)
                    .zip(xh.as_slice().unwrap().chunks_exact(channels))
                {
                    for c in 0..channels {
                        dbeta[c] += grow[c];
                        dgamma[c] += grow[c] * xrow[c];
                    }
                }
            }
            let gam = &params.tensors[gamma].data;
            for (g, xh) in grad_out.iter_mut().zip(&cache.xhat) {
                for (grow, xrow) in g
                    .as_slice_mut()
                    .unwrap()
                    .chunks_exact_mut(channels)
                    .zip(xh.as_slice().unwrap().chunks_exact(channels))
                {
                    for c in 0..channels {
                        let k = gam[c] * cache.inv_std[c] / n;
                        grow[c] = k * (n * grow[c] - dbeta[c] - xrow[c] * dgamma[c]);
                    }
                }
            }
            add_into(&mut grads.tensors[gamma].data, &dgamma);
            add_into(&mut grads.tensors[beta].data, &dbeta);
        }
        if let Some(b) = self.bias {
            let gb = &mut grads.tensors[b].data;
            for g in &grad_out {
                for row in g.as_slice().unwrap().chunks_exact(channels) {
                    add_into(gb, row);
                }
            }
        }

        let w = self.weight_view(params);
        let k = w.nrows();
        let mut grad_w = Array2::<F>::zeros((k, channels));
        let mut grad_in = need_input.then(|| Vec::with_capacity(grad_out.len()));
        for (g, x) in grad_out.iter().zip(&cache.inputs) {
            let g2 = Self::as_rows(g);
            if self.is_pointwise() {
                let xr = Self::as_rows(x);
                ndarray::linalg::general_mat_mul(F::one(), &xr.t(), &g2, F::one(), &mut grad_w);
                if let Some(gi) = grad_in.as_mut() {
                    let dx = g2.dot(&w.t());
                    gi.push(dx.into_shape_with_order(x.raw_dim()).expect("input shape"));
                }
            } else {
                let cols = self.im2col(x);
                ndarray::linalg::general_mat_mul(F::one(), &cols.t(), &g2, F::one(), &mut grad_w);
                if let Some(gi) = grad_in.as_mut() {
                    let dcols = g2.dot(&w.t());
                    gi.push(self.col2im(&dcols, x.dim().0));
                }
            }
        }
        add_into(&mut grads.tensors[self.weight].data, grad_w.as_slice().unwrap());

        let finite = |slot: usize| grads.tensors[slot].data.iter().all(|v| v.is_finite());
        let mut slots = vec![self.weight];
        slots.extend(self.bias);
        if let Some([g, b, _, _]) = self.norm {
            slots.extend([g, b]);
        }
        if !slots.into_iter().all(finite) {
            return Err(Error::NonFiniteGradient {
                layer: self.spec.name.clone(),
            });
        }
        Ok(grad_in)
    }

    /// Exponential moving average of the batch statistics.
    pub fn update_running_stats<F: Real>(&self, cache: &LayerCache<F>, momentum: f64, buffers: &mut ParamSet<F>) {
        let Some([_, _, rmean, rvar]) = self.norm else {
            return;
        };
        if cache.batch_count == 0 {
            return;
        }
        let n = cache.batch_count as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (r, &m) in buffers.tensors[rmean].data.iter_mut().zip(&cache.batch_mean) {
            *r = F::of(momentum * r.to_f64().unwrap() + (1.0 - momentum) * m);
        }
        for (r, &v) in buffers.tensors[rvar].data.iter_mut().zip(&cache.batch_var) {
            *r = F::of(momentum * r.to_f64().unwrap() + (1.0 - momentum) * v * unbias);
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

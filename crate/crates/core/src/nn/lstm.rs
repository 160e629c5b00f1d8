use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::sigmoid_scalar;
use super::{matmul, missing_cache, prefixed, Float, Mode, Module, Param, Tensor};
use crate::error::{Error, Result};

/// Stacked unidirectional LSTM with gate order (i, f, g, o) and two bias
/// vectors per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmSpec {
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl LstmSpec {
    /// `4h(in + h) + 8h` for one layer.
    pub fn layer_param_count(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden) + 8 * hidden
    }

    pub fn param_count(&self) -> usize {
        (0..self.layers)
            .map(|l| Self::layer_param_count(if l == 0 { self.input } else { self.hidden }, self.hidden))
            .sum()
    }
}

/// Hidden and cell state per layer, each `N × H`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Vec<Vec<T>>,
    pub c: Vec<Vec<T>>,
    pub batch: usize,
}

impl<T: Float> LstmState<T> {
    pub fn zeros(spec: &LstmSpec, batch: usize) -> Self {
        let z = vec![T::zero(); batch * spec.hidden];
        Self { h: vec![z.clone(); spec.layers], c: vec![z; spec.layers], batch }
    }
}

pub struct LstmLayer<T: Float> {
    pub input: usize,
    pub hidden: usize,
    pub w_ih: Param<T>,
    pub w_hh: Param<T>,
    pub b_ih: Param<T>,
    pub b_hh: Param<T>,
}

impl<T: Float> Clone for LstmLayer<T> {
    fn clone(&self) -> Self {
        Self {
            input: self.input,
            hidden: self.hidden,
            w_ih: self.w_ih.clone(),
            w_hh: self.w_hh.clone(),
            b_ih: self.b_ih.clone(),
            b_hh: self.b_hh.clone(),
        }
    }
}

struct LayerCache<T> {
    /// `T × N × in`
    x: Vec<T>,
    /// activated gates, `T × N × 4h`
    gates: Vec<T>,
    /// cell states `c_0 .. c_T`, `(T+1) × N × h`
    cs: Vec<T>,
    /// hidden states `h_0 .. h_T`
    hs: Vec<T>,
}

impl<T: Float> LstmLayer<T> {
    fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            input,
            hidden,
            w_ih: Param::new(Tensor::uniform(&[4 * hidden, input], bound, rng)),
            w_hh: Param::new(Tensor::uniform(&[4 * hidden, hidden], bound, rng)),
            b_ih: Param::new(Tensor::uniform(&[4 * hidden], bound, rng)),
            b_hh: Param::new(Tensor::uniform(&[4 * hidden], bound, rng)),
        }
    }

    /// One time step for a batch: updates `h` and `c` in place and writes the
    /// activated gates into `gates_out` (`N × 4h`).
    fn step(&self, x: &[T], h: &mut [T], c: &mut [T], gates_out: &mut [T], batch: usize) {
        let hd = self.hidden;
        let g4 = 4 * hd;
        for row in gates_out.chunks_mut(g4) {
            for ((g, &a), &b) in row.iter_mut().zip(self.b_ih.value.data()).zip(self.b_hh.value.data()) {
                *g = a + b;
            }
        }
        matmul(gates_out, x, self.w_ih.value.data(), batch, self.input, g4, false, true, T::one());
        matmul(gates_out, h, self.w_hh.value.data(), batch, hd, g4, false, true, T::one());
        for n in 0..batch {
            let row = &mut gates_out[n * g4..(n + 1) * g4];
            for j in 0..hd {
                let i = sigmoid_scalar(row[j]);
                let f = sigmoid_scalar(row[hd + j]);
                let g = row[2 * hd + j].tanh();
                let o = sigmoid_scalar(row[3 * hd + j]);
                row[j] = i;
                row[hd + j] = f;
                row[2 * hd + j] = g;
                row[3 * hd + j] = o;
                let cn = f * c[n * hd + j] + i * g;
                c[n * hd + j] = cn;
                h[n * hd + j] = o * cn.tanh();
            }
        }
    }
}

/// Stacked LSTM over `T × N × F` inputs.
pub struct Lstm<T: Float> {
    pub spec: LstmSpec,
    pub layers: Vec<LstmLayer<T>>,
    cache: Option<Vec<LayerCache<T>>>,
}

impl<T: Float> Clone for Lstm<T> {
    fn clone(&self) -> Self {
        Self { spec: self.spec, layers: self.layers.clone(), cache: None }
    }
}

impl<T: Float> Lstm<T> {
    pub fn new<R: Rng + ?Sized>(spec: LstmSpec, rng: &mut R) -> Self {
        let layers = (0..spec.layers)
            .map(|l| LstmLayer::new(if l == 0 { spec.input } else { spec.hidden }, spec.hidden, rng))
            .collect();
        Self { spec, layers, cache: None }
    }

    fn check(&self, x: &Tensor<T>, state: Option<&LstmState<T>>) -> Result<(usize, usize)> {
        x.expect_rank(3, "lstm")?;
        let (t, n, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if f != self.spec.input {
            return Err(Error::validation(format!("lstm expects {} input features, got {f}", self.spec.input)));
        }
        if let Some(s) = state {
            let ok = s.batch == n
                && s.h.len() == self.spec.layers
                && s.c.len() == self.spec.layers
                && s.h.iter().chain(&s.c).all(|v| v.len() == n * self.spec.hidden);
            if !ok {
                return Err(Error::validation("lstm initial state does not match input batch"));
            }
        }
        Ok((t, n))
    }

    fn run(
        &self,
        x: &Tensor<T>,
        state: Option<&LstmState<T>>,
        record: bool,
    ) -> Result<(Tensor<T>, LstmState<T>, Vec<LayerCache<T>>)> {
        let (steps, n) = self.check(x, state)?;
        let hd = self.spec.hidden;
        let mut state = state.cloned().unwrap_or_else(|| LstmState::zeros(&self.spec, n));
        let mut layer_in: Vec<T> = x.data().to_vec();
        let mut caches = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let in_f = layer.input;
            let mut out = vec![T::zero(); steps * n * hd];
            let mut gates = vec![T::zero(); if record { steps * n * 4 * hd } else { n * 4 * hd }];
            let (mut cs, mut hs) = if record {
                let mut cs = Vec::with_capacity((steps + 1) * n * hd);
                let mut hs = Vec::with_capacity((steps + 1) * n * hd);
                cs.extend_from_slice(&state.c[li]);
                hs.extend_from_slice(&state.h[li]);
                (cs, hs)
            } else {
                (Vec::new(), Vec::new())
            };
            let h = &mut state.h[li];
            let c = &mut state.c[li];
            for t in 0..steps {
                let xt = &layer_in[t * n * in_f..(t + 1) * n * in_f];
                let g = if record { &mut gates[t * n * 4 * hd..(t + 1) * n * 4 * hd] } else { &mut gates[..] };
                layer.step(xt, h, c, g, n);
                out[t * n * hd..(t + 1) * n * hd].copy_from_slice(h);
                if record {
                    cs.extend_from_slice(c);
                    hs.extend_from_slice(h);
                }
            }
            if record {
                caches.push(LayerCache { x: std::mem::take(&mut layer_in), gates, cs, hs });
            }
            layer_in = out;
        }
        Ok((Tensor::from_vec(&[steps, n, hd], layer_in)?, state, caches))
    }

    /// Runs the sequence without recording. Returns hidden states of the top
    /// layer (`T × N × H`) and the final state of every layer.
    pub fn infer(&self, x: &Tensor<T>, state: Option<&LstmState<T>>) -> Result<(Tensor<T>, LstmState<T>)> {
        let (out, state, _) = self.run(x, state, false)?;
        Ok((out, state))
    }

    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        state: Option<&LstmState<T>>,
        mode: Mode,
    ) -> Result<(Tensor<T>, LstmState<T>)> {
        let record = mode == Mode::Train;
        let (out, state, caches) = self.run(x, state, record)?;
        self.cache = record.then_some(caches);
        Ok((out, state))
    }

    /// Back-propagation through time from gradients on the top-layer outputs.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let caches = self.cache.take().ok_or_else(|| missing_cache("lstm"))?;
        let hd = self.spec.hidden;
        let (steps, n) = (grad_out.shape()[0], grad_out.shape()[1]);
        if grad_out.shape() != [steps, n, hd] || caches[0].x.len() != steps * n * self.spec.input {
            return Err(Error::validation("lstm backward: gradient shape mismatch"));
        }
        let mut d_layer_out: Vec<T> = grad_out.data().to_vec();
        for (layer, cache) in self.layers.iter_mut().zip(caches).rev() {
            let g4 = 4 * hd;
            let in_f = layer.input;
            let mut dgates = vec![T::zero(); steps * n * g4];
            let mut dh_next = vec![T::zero(); n * hd];
            let mut dc_next = vec![T::zero(); n * hd];
            for t in (0..steps).rev() {
                let gates = &cache.gates[t * n * g4..(t + 1) * n * g4];
                let c_prev = &cache.cs[t * n * hd..(t + 1) * n * hd];
                let c_cur = &cache.cs[(t + 1) * n * hd..(t + 2) * n * hd];
                let dg_t = &mut dgates[t * n * g4..(t + 1) * n * g4];
                for b in 0..n {
                    for j in 0..hd {
                        let k = b * hd + j;
                        let i = gates[b * g4 + j];
                        let f = gates[b * g4 + hd + j];
                        let g = gates[b * g4 + 2 * hd + j];
                        let o = gates[b * g4 + 3 * hd + j];
                        let tc = c_cur[k].tanh();
                        let dh = d_layer_out[t * n * hd + k] + dh_next[k];
                        let d_o = dh * tc;
                        let dc = dh * o * (T::one() - tc * tc) + dc_next[k];
                        let d_i = dc * g;
                        let d_g = dc * i;
                        let d_f = dc * c_prev[k];
                        dc_next[k] = dc * f;
                        dg_t[b * g4 + j] = d_i * i * (T::one() - i);
                        dg_t[b * g4 + hd + j] = d_f * f * (T::one() - f);
                        dg_t[b * g4 + 2 * hd + j] = d_g * (T::one() - g * g);
                        dg_t[b * g4 + 3 * hd + j] = d_o * o * (T::one() - o);
                    }
                }
                // dh_{t-1} = dgates_t · W_hh
                matmul(&mut dh_next, dg_t, layer.w_hh.value.data(), n, g4, hd, false, false, T::zero());
                let h_prev = &cache.hs[t * n * hd..(t + 1) * n * hd];
                matmul(&mut layer.w_hh.grad, dg_t, h_prev, g4, n, hd, true, false, T::one());
            }
            let rows = steps * n;
            matmul(&mut layer.w_ih.grad, &dgates, &cache.x, g4, rows, in_f, true, false, T::one());
            for row in dgates.chunks(g4) {
                for (j, &d) in row.iter().enumerate() {
                    layer.b_ih.grad[j] += d;
                    layer.b_hh.grad[j] += d;
                }
            }
            let mut dx = vec![T::zero(); rows * in_f];
            matmul(&mut dx, &dgates, layer.w_ih.value.data(), rows, g4, in_f, false, false, T::zero());
            d_layer_out = dx;
        }
        Tensor::from_vec(&[steps, n, self.spec.input], d_layer_out)
    }
}

impl<T: Float> Module<T> for Lstm<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            v.extend(prefixed(
                &format!("layers.{i}"),
                vec![
                    ("weight_ih".to_string(), &l.w_ih),
                    ("weight_hh".to_string(), &l.w_hh),
                    ("bias_ih".to_string(), &l.b_ih),
                    ("bias_hh".to_string(), &l.b_hh),
                ],
            ));
        }
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.extend(prefixed(
                &format!("layers.{i}"),
                vec![
                    ("weight_ih".to_string(), &mut l.w_ih),
                    ("weight_hh".to_string(), &mut l.w_hh),
                    ("bias_ih".to_string(), &mut l.b_ih),
                    ("bias_hh".to_string(), &mut l.b_hh),
                ],
            ));
        }
        v
    }
}

//! Small fully connected network: tanh hidden layers, linear output.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Real> {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out x n_in`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    fn glorot(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (n_in + n_out) as f64).sqrt();
        Self {
            n_in,
            n_out,
            weights: (0..n_in * n_out).map(|_| T::lit(rng.random_range(-a..a))).collect(),
            bias: vec![T::zero(); n_out],
        }
    }

    fn row(&self, j: usize) -> &[T] {
        &self.weights[j * self.n_in..(j + 1) * self.n_in]
    }
}

/// Activations of one input row, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RowCache<T: Real> {
    /// `acts[0]` is the standardized input, `acts[i]` the output of layer `i`.
    acts: Vec<Vec<T>>,
}

impl<T: Real> RowCache<T> {
    /// Cache whose output is `row` itself (no layers).
    pub fn passthrough(row: Vec<T>) -> Self {
        Self { acts: vec![row] }
    }

    pub fn output(&self) -> &[T] {
        self.acts.last().expect("network has layers")
    }
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone)]
pub struct MlpGrads<T: Real> {
    pub layers: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> MlpGrads<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![T::zero(); l.weights.len()], vec![T::zero(); l.bias.len()]))
                .collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = *v * s);
        }
    }

    pub fn norm(&self) -> T {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b))
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Real> {
    /// Per-feature standardization applied before the first layer.
    pub input_shift: Vec<T>,
    pub input_scale: Vec<T>,
    pub layers: Vec<Dense<T>>,
}

impl<T: Real> Mlp<T> {
    /// Glorot-initialized network with the given layer widths.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer sizes {sizes:?}")));
        }
        Ok(Self {
            input_shift: vec![T::zero(); sizes[0]],
            input_scale: vec![T::one(); sizes[0]],
            layers: sizes
                .windows(2)
                .map(|w| Dense::glorot(w[0], w[1], rng))
                .collect(),
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].n_in)
            .chain(self.layers.iter().map(|l| l.n_out))
            .collect()
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map(|l| l.n_out).unwrap_or(0)
    }

    pub fn forward_row(&self, input: &[T]) -> RowCache<T> {
        let x: Vec<T> = input
            .iter()
            .zip(self.input_shift.iter().zip(&self.input_scale))
            .map(|(&v, (&m, &s))| (v - m) * s)
            .collect();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = acts.last().expect("input pushed");
            let out: Vec<T> = (0..layer.n_out)
                .map(|j| {
                    let z = dot(layer.row(j), prev) + layer.bias[j];
                    if i < last {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        RowCache { acts }
    }

    /// Backpropagates `out_cot`, adding the cotangent of the raw input row
    /// into `in_cot` and, if given, parameter gradients into `grads`.
    pub fn backward_row(
        &self,
        cache: &RowCache<T>,
        out_cot: &[T],
        in_cot: Option<&mut [T]>,
        mut grads: Option<&mut MlpGrads<T>>,
    ) {
        let last = self.layers.len() - 1;
        let mut cot = out_cot.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i < last {
                // tanh' = 1 - y^2
                for (c, &y) in cot.iter_mut().zip(&cache.acts[i + 1]) {
                    *c = *c * (T::one() - y * y);
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = &mut g.layers[i];
                for (j, &c) in cot.iter().enumerate() {
                    gb[j] = gb[j] + c;
                    axpy(c, &cache.acts[i], &mut gw[j * layer.n_in..(j + 1) * layer.n_in]);
                }
            }
            if i == 0 && in_cot.is_none() {
                return;
            }
            let mut prev = vec![T::zero(); layer.n_in];
            for (j, &c) in cot.iter().enumerate() {
                if !c.is_zero() {
                    axpy(c, layer.row(j), &mut prev);
                }
            }
            cot = prev;
        }
        if let Some(out) = in_cot {
            for ((o, c), &s) in out.iter_mut().zip(&cot).zip(&self.input_scale) {
                *o = *o + *c * s;
            }
        }
    }

    /// Plain gradient-descent step.
    pub fn descend(&mut self, grads: &MlpGrads<T>, lr: T) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            axpy(-lr, gw, &mut layer.weights);
            axpy(-lr, gb, &mut layer.bias);
        }
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        let flat: Vec<U> = self.flat_params().iter().map(|v| U::lit(v.as_f64())).collect();
        Mlp::from_flat(&self.sizes(), &flat).expect("same layout")
    }

    /// All parameters in serialization order.
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.input_shift);
        out.extend_from_slice(&self.input_scale);
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Network of the given widths with parameters read from `flat`.
    pub fn from_flat(sizes: &[usize], flat: &[T]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Format(format!("bad layer sizes {sizes:?}")));
        }
        let expected = 2 * sizes[0] + sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
        if flat.len() != expected {
            return Err(Error::Format(format!(
                "{} parameters for sizes {sizes:?}, expected {expected}",
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        let mut take = |n: usize| -> Vec<T> { it.by_ref().take(n).collect() };
        let input_shift = take(sizes[0]);
        let input_scale = take(sizes[0]);
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                n_in: w[0],
                n_out: w[1],
                weights: take(w[0] * w[1]),
                bias: take(w[1]),
            })
            .collect();
        Ok(Self {
            input_shift,
            input_scale,
            layers,
        })
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense layer, `weights` stored row-major as `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Layer<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    fn apply(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(o, &b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            row.iter().zip(x).fold(b, |acc, (&w, &v)| acc + w * v)
        }));
    }

    pub fn params(&self) -> impl Iterator<Item = &T> {
        self.weights.iter().chain(&self.bias)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// MLP `F → hidden… → |H|` with rectified-linear hidden units and dropout
/// in front of the output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct HeadParameters<T> {
    pub layers: Vec<Layer<T>>,
    pub hidden_sizes: Vec<usize>,
    pub dropout_rate: T,
}

/// Same shape as [`HeadParameters::layers`], holding derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Gradient<T> {
    pub fn zeros_like(params: &HeadParameters<T>) -> Self {
        Gradient {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn norm(&self) -> T {
        self.layers
            .iter()
            .flat_map(Layer::params)
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        self.layers
            .iter_mut()
            .flat_map(Layer::params_mut)
            .for_each(|g| *g *= s);
    }
}

fn shapes(input: usize, hidden: &[usize], output: usize) -> Vec<(usize, usize)> {
    let mut dims = vec![input];
    dims.extend(hidden);
    dims.push(output);
    dims.windows(2).map(|w| (w[0], w[1])).collect()
}

impl<T: Scalar> HeadParameters<T> {
    pub fn zeros(input: usize, hidden_sizes: &[usize], output: usize, dropout_rate: T) -> Self {
        HeadParameters {
            layers: shapes(input, hidden_sizes, output)
                .into_iter()
                .map(|(i, o)| Layer::zeros(i, o))
                .collect(),
            hidden_sizes: hidden_sizes.to_vec(),
            dropout_rate,
        }
    }

    /// He-uniform weights for rectified layers, Glorot-uniform for the
    /// output layer, zero biases.
    pub fn random<R: Rng>(
        input: usize,
        hidden_sizes: &[usize],
        output: usize,
        dropout_rate: T,
        rng: &mut R,
    ) -> Result<Self> {
        if input == 0 || output == 0 || hidden_sizes.contains(&0) {
            return Err(Error::arg("layer widths must be positive"));
        }
        if !(dropout_rate >= T::zero() && dropout_rate < T::one()) {
            return Err(Error::arg("dropout_rate must lie in [0, 1)"));
        }
        let mut params = Self::zeros(input, hidden_sizes, output, dropout_rate);
        let last = params.layers.len() - 1;
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let bound = if l == last {
                (6.0 / (layer.inputs + layer.outputs) as f64).sqrt()
            } else {
                (6.0 / layer.inputs as f64).sqrt()
            };
            for w in &mut layer.weights {
                *w = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(params)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::arg(format!(
                "feature vector has {} values, head expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Inference pass, dropout disabled.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        Ok(self.forward_cached(x, None).output)
    }

    /// Forward pass keeping what backprop needs. `mask` multiplies the input
    /// of the output layer (inverted dropout) when there is a hidden layer.
    pub(crate) fn forward_cached(&self, x: &[T], mask: Option<&[T]>) -> ForwardCache<T> {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut a = x.to_vec();
        let mut z = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.apply(&a, &mut z);
            inputs.push(std::mem::take(&mut a));
            if l < last {
                a = z.iter().map(|&v| v.max(T::zero())).collect();
                if l + 1 == last {
                    if let Some(m) = mask {
                        a.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
                    }
                }
                pre.push(std::mem::take(&mut z));
            }
        }
        ForwardCache {
            inputs,
            pre,
            output: z,
        }
    }

    /// Accumulates `d loss / d params` given `d loss / d output`.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache<T>,
        mut delta: Vec<T>,
        mask: Option<&[T]>,
        grad: &mut Gradient<T>,
    ) {
        let last = self.layers.len() - 1;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = &mut grad.layers[l];
            let a = &cache.inputs[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(a).for_each(|(w, &v)| *w += d * v);
            }
            if l == 0 {
                break;
            }
            let mut back = vec![T::zero(); layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                back.iter_mut().zip(row).for_each(|(b, &w)| *b += d * w);
            }
            if l == last {
                if let Some(m) = mask {
                    back.iter_mut().zip(m).for_each(|(b, &k)| *b *= k);
                }
            }
            for (b, &z) in back.iter_mut().zip(&cache.pre[l - 1]) {
                if z <= T::zero() {
                    *b = T::zero();
                }
            }
            delta = back;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(Layer::params)
            .all(|v| v.is_finite())
    }
}

pub(crate) struct ForwardCache<T> {
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    pub output: Vec<T>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_give_zero_activations() {
        let p = HeadParameters::<f64>::zeros(4, &[8], 5, 0.2);
        assert_eq!(p.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn identity_single_layer_passthrough() {
        let mut p = HeadParameters::<f64>::zeros(3, &[], 5, 0.0);
        for i in 0..3 {
            p.layers[0].weights[i * 3 + i] = 1.0;
        }
        assert_eq!(
            p.forward(&[1.5, -2.0, 0.25]).unwrap(),
            vec![1.5, -2.0, 0.25, 0.0, 0.0]
        );
        let mut p = HeadParameters::<f64>::zeros(5, &[], 2, 0.0);
        p.layers[0].weights[0] = 1.0;
        p.layers[0].weights[5 + 1] = 1.0;
        assert_eq!(p.forward(&[7.0, 8.0, 9.0, 1.0, 2.0]).unwrap(), vec![7.0, 8.0]);
    }

    #[test]
    fn finite_and_dimension_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = HeadParameters::<f64>::random(6, &[16, 8], 7, 0.2, &mut rng).unwrap();
        let out = p.forward(&[1e3, -1e3, 0.0, 5.0, 1.0, 2.0]).unwrap();
        assert_eq!(out.len(), 7);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(matches!(p.forward(&[1.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn f32_forward_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = HeadParameters::<f32>::random(3, &[4], 3, 0.0, &mut rng).unwrap();
        assert_eq!(p.forward(&[0.1, 0.2, 0.3]).unwrap().len(), 3);
    }
}

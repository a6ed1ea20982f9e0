use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::tape::{GradTape, Var};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Linear,
}

/// One affine layer `y = act(x·W + b)` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor2,
    pub bias: Tensor2,
    pub activation: Activation,
}

impl Linear {
    /// Uniform init in `[-s, s]`, `s = sqrt(6 / (in + out))`, zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let s = libm::sqrt(6.0 / (in_dim + out_dim) as f64);
        let data = (0..in_dim * out_dim).map(|_| rng.random_range(-s..=s)).collect();
        Linear {
            weight: Tensor2::new(in_dim, out_dim, data).expect("sized by construction"),
            bias: Tensor2::zeros(1, out_dim),
            activation,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Linear {
            weight: Tensor2::zeros(in_dim, out_dim),
            bias: Tensor2::zeros(1, out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// A stack of [`Linear`] layers; parameter names are `<prefix>.<i>.weight`
/// and `<prefix>.<i>.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub prefix: alloc::string::String,
    pub layers: Vec<Linear>,
}

impl MlpParams {
    /// Builds an MLP with ReLU hidden layers and a linear final layer.
    /// `depth` counts affine layers; `depth == 1` is a single linear map.
    pub fn init<R: Rng + ?Sized>(
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("mlp_depth", "must be at least 1"));
        }
        let mut layers = Vec::with_capacity(depth);
        let mut dim = in_dim;
        for i in 0..depth {
            let last = i + 1 == depth;
            let out = if last { out_dim } else { hidden };
            let act = if last { Activation::Linear } else { Activation::Relu };
            layers.push(Linear::init(dim, out, act, rng));
            dim = out;
        }
        Self::from_layers(prefix, layers)
    }

    pub fn from_layers(prefix: &str, layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Usage("MLP needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "MlpParams::from_layers",
                    format!("layer {} in_dim {}", i + 1, pair[0].out_dim()),
                    format!("in_dim {}", pair[1].in_dim()),
                ));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.out_dim()) {
                return Err(Error::shape(
                    "MlpParams::from_layers",
                    format!("layer {i} bias 1x{}", l.out_dim()),
                    format!("{}x{}", l.bias.rows(), l.bias.cols()),
                ));
            }
        }
        Ok(MlpParams {
            prefix: prefix.into(),
            layers,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Zeroes the final layer so the MLP outputs exactly zero.
    pub fn zero_output(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            last.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Records the forward pass of every layer on `tape`.
    pub fn forward(&self, tape: &mut GradTape, input: Var) -> Result<Var> {
        let cols = tape.value(input).cols();
        if cols != self.in_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!("{} input columns for `{}`", self.in_dim(), self.prefix),
                format!("{cols} columns"),
            ));
        }
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(&format!("{}.{i}.weight", self.prefix), &layer.weight);
            let b = tape.param(&format!("{}.{i}.bias", self.prefix), &layer.bias);
            x = tape.matmul(x, w)?;
            x = tape.add_bias(x, b)?;
            if layer.activation == Activation::Relu {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }
}

impl Parameters for MlpParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor2)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("{}.{i}.weight", self.prefix), &l.weight);
            f(&format!("{}.{i}.bias", self.prefix), &l.bias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("{}.{i}.weight", self.prefix), &mut l.weight);
            f(&format!("{}.{i}.bias", self.prefix), &mut l.bias);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use alloc::vec;

    fn run(mlp: &MlpParams, input: &Tensor2) -> Tensor2 {
        let mut tape = GradTape::new();
        let x = tape.constant(input.clone());
        let y = mlp.forward(&mut tape, x).unwrap();
        tape.value(y).clone()
    }

    /// Plain nested-loop evaluation, independent of the tape and matmul kernel.
    fn straight_line(mlp: &MlpParams, input: &Tensor2) -> Tensor2 {
        let mut rows: Vec<Vec<f64>> = (0..input.rows()).map(|r| input.row(r).to_vec()).collect();
        for l in &mlp.layers {
            for row in rows.iter_mut() {
                let mut next = vec![0.0; l.out_dim()];
                for (o, nv) in next.iter_mut().enumerate() {
                    let mut acc = l.bias.get(0, o);
                    for (i, xv) in row.iter().enumerate() {
                        acc += xv * l.weight.get(i, o);
                    }
                    *nv = if l.activation == Activation::Relu && acc < 0.0 { 0.0 } else { acc };
                }
                *row = next;
            }
        }
        let cols = mlp.out_dim();
        Tensor2::new(rows.len(), cols, rows.concat()).unwrap()
    }

    #[test]
    fn identity_layer() {
        let layer = Linear {
            weight: Tensor2::identity(2),
            bias: Tensor2::zeros(1, 2),
            activation: Activation::Linear,
        };
        let mlp = MlpParams::from_layers("id", vec![layer]).unwrap();
        let x = Tensor2::from_rows(&[&[1.0, 2.0]]).unwrap();
        assert_eq!(run(&mlp, &x), x);
    }

    #[test]
    fn affine_layer_by_hand() {
        let layer = Linear {
            weight: Tensor2::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]]).unwrap(),
            bias: Tensor2::filled(1, 2, 1.0),
            activation: Activation::Linear,
        };
        let mlp = MlpParams::from_layers("a", vec![layer]).unwrap();
        let x = Tensor2::from_rows(&[&[1.0, 1.0]]).unwrap();
        assert_eq!(run(&mlp, &x), Tensor2::from_rows(&[&[3.0, 4.0]]).unwrap());
    }

    #[test]
    fn random_two_layer_matches_straight_line() {
        let mut rng = seed::rng(11);
        for trial in 0..10 {
            let mut mlp = MlpParams::init("m", 5, 7, 3, 2, &mut rng).unwrap();
            for l in mlp.layers.iter_mut() {
                l.bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            }
            let x = Tensor2::new(4, 5, (0..20).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let got = run(&mlp, &x);
            let want = straight_line(&mlp, &x);
            assert!(got.max_abs_diff(&want) < 1e-12, "trial {trial}");
            // bit-identical on replay
            assert_eq!(got, run(&mlp, &x));
        }
    }

    #[test]
    fn dimension_mismatch_names_both_dims() {
        let mut rng = seed::rng(1);
        let mlp = MlpParams::init("m", 3, 4, 1, 2, &mut rng).unwrap();
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor2::zeros(2, 5));
        let err = mlp.forward(&mut tape, x).unwrap_err();
        let msg = alloc::string::ToString::to_string(&err);
        assert!(msg.contains('3') && msg.contains('5'), "{msg}");
    }

    #[test]
    fn chained_dims_are_enforced() {
        let a = Linear::zeros(2, 3, Activation::Relu);
        let b = Linear::zeros(4, 1, Activation::Linear);
        assert!(MlpParams::from_layers("bad", vec![a, b]).is_err());
    }

    #[test]
    fn sum_loss_bias_gradient_is_all_ones() {
        let mut rng = seed::rng(3);
        let mlp = MlpParams::init("m", 2, 2, 2, 1, &mut rng).unwrap();
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor2::from_rows(&[&[0.3, -0.2], &[1.0, 2.0], &[0.0, 1.0]]).unwrap());
        mlp.forward(&mut tape, x).unwrap();
        let grads = tape.backward(&Tensor2::filled(3, 2, 1.0)).unwrap();
        // three rows contribute one each
        assert_eq!(grads.get("m.0.bias").unwrap(), &Tensor2::filled(1, 2, 3.0));
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor2::from_rows(&[&[0.3, -0.2]]).unwrap());
        mlp.forward(&mut tape, x).unwrap();
        let grads = tape.backward(&Tensor2::filled(1, 2, 1.0)).unwrap();
        assert_eq!(grads.get("m.0.bias").unwrap(), &Tensor2::filled(1, 2, 1.0));
    }
}

//! Differentiable feature encoders.
//!
//! [`Encoder`] is the contract the head and losses rely on: a deterministic
//! forward pass that records a tape, and a reverse pass that consumes it.
//! [`Mlp`] is the reference implementation, a tanh multilayer perceptron with
//! a linear output layer.

use rand::Rng;

use crate::error::{ensure_dim, Error, Result};

pub trait Encoder {
    type Tape;

    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn num_params(&self) -> usize;

    fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Self::Tape)>;

    /// Reverse pass for `embedding . grad_embedding`. Returns the parameter
    /// gradient (flattened in [`Encoder::params`] order) and the input gradient.
    fn backward(&self, tape: Self::Tape, grad_embedding: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;

    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    fn embed(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.0)
    }
}

/// Dense layer with row-major `out x in` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn glorot<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Per-layer inputs recorded by a forward pass. Consumed by one backward pass.
#[derive(Debug, Clone)]
pub struct GradientTape {
    /// `layer_inputs[i]` is the input to layer `i` (post-activation of layer `i - 1`).
    layer_inputs: Vec<Vec<f64>>,
    shapes: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `sizes = [d_in, h1, ..., d_out]`.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        check_sizes(sizes)?;
        Ok(Self {
            layers: sizes
                .windows(2)
                .map(|w| Layer::glorot(w[0], w[1], rng))
                .collect(),
        })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        Ok(Self {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("encoder needs at least one layer".into()));
        }
        for l in &layers {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::InvalidArgument("layer parameter shape mismatch".into()));
            }
        }
        for w in layers.windows(2) {
            ensure_dim(w[0].out_dim, w[1].in_dim)?;
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_dim)
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "encoder layer sizes must have at least two positive entries, got {sizes:?}"
        )));
    }
    Ok(())
}

impl Encoder for Mlp {
    type Tape = GradientTape;

    fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, GradientTape)> {
        ensure_dim(self.input_dim(), input.len())?;
        if input.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("encoder input".into()));
        }
        let last = self.layers.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(&x);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            layer_inputs.push(std::mem::replace(&mut x, z));
        }
        let shapes = self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect();
        Ok((x, GradientTape { layer_inputs, shapes }))
    }

    fn backward(&self, tape: GradientTape, grad_embedding: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let shapes: Vec<(usize, usize)> = self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect();
        if tape.shapes != shapes {
            return Err(Error::InvalidArgument("tape does not match encoder shapes".into()));
        }
        ensure_dim(self.output_dim(), grad_embedding.len())?;

        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_embedding.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.layer_inputs[i];
            let mut g = Vec::with_capacity(layer.num_params());
            for d in &delta {
                g.extend(x.iter().map(|v| d * v));
            }
            g.extend_from_slice(&delta);
            grads.push(g);

            let mut dx = vec![0.0; layer.in_dim];
            for (row, d) in layer.weights.chunks_exact(layer.in_dim).zip(&delta) {
                for (acc, w) in dx.iter_mut().zip(row) {
                    *acc += w * d;
                }
            }
            if i > 0 {
                // x = tanh(z) of the previous layer
                for (acc, a) in dx.iter_mut().zip(x) {
                    *acc *= 1.0 - a * a;
                }
            }
            delta = dx;
        }
        grads.reverse();
        Ok((grads.concat(), delta))
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        ensure_dim(self.num_params(), params.len())?;
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            let (b, tail) = tail.split_at(l.bias.len());
            l.weights.copy_from_slice(w);
            l.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar-loop evaluation written independently of `Layer::affine`.
    fn oracle_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let n = mlp.layers().len();
        for (li, l) in mlp.layers().iter().enumerate() {
            let mut out = vec![0.0; l.out_dim];
            for o in 0..l.out_dim {
                let mut s = l.bias[o];
                for i in 0..l.in_dim {
                    s += l.weights[o * l.in_dim + i] * a[i];
                }
                out[o] = if li + 1 < n { s.tanh() } else { s };
            }
            a = out;
        }
        a
    }

    fn random_input(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn zero_params_give_zero_embedding() {
        let mlp = Mlp::zeros(&[4, 5, 3]).unwrap();
        let (e, _) = mlp.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(e, vec![0.0; 3]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut layer = Layer::zeros(3, 3);
        for i in 0..3 {
            layer.weights[i * 3 + i] = 1.0;
        }
        let mlp = Mlp::from_layers(vec![layer]).unwrap();
        let x = [0.25, -1.5, 7.0];
        assert_eq!(mlp.embed(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for sizes in [vec![8, 32, 16], vec![4, 5, 3], vec![6, 7, 5, 2]] {
            let mlp = Mlp::new(&sizes, &mut rng).unwrap();
            let x = random_input(&mut rng, sizes[0]);
            let got = mlp.embed(&x).unwrap();
            let want = oracle_forward(&mlp, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::new(&[8, 32, 16], &mut rng).unwrap();
        let x = random_input(&mut rng, 8);
        let a = mlp.embed(&x).unwrap();
        let b = mlp.embed(&x).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn forward_errors() {
        let mlp = Mlp::zeros(&[3, 2]).unwrap();
        assert!(matches!(mlp.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(mlp.forward(&[1.0, f64::NAN, 0.0]), Err(Error::NonFinite(_))));
        assert!(Mlp::zeros(&[3]).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&[4, 5, 3], &mut rng).unwrap();
        let (_, tape) = mlp.forward(&random_input(&mut rng, 4)).unwrap();
        let (gp, gx) = mlp.backward(tape, &[0.0; 3]).unwrap();
        assert!(gp.iter().chain(&gx).all(|g| *g == 0.0));
    }

    #[test]
    fn linear_layer_row_gradient_is_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::new(&[3, 2], &mut rng).unwrap();
        let x = [0.5, -1.0, 2.0];
        let (_, tape) = mlp.forward(&x).unwrap();
        let (gp, _) = mlp.backward(tape, &[0.0, 1.0]).unwrap();
        // weights row-major: row 1 occupies indices 3..6
        assert_eq!(&gp[3..6], &x);
        assert_eq!(&gp[0..3], &[0.0; 3]);
        assert_eq!(&gp[6..8], &[0.0, 1.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for sizes in [vec![4, 5, 3], vec![8, 32, 16], vec![5, 6, 4, 3]] {
            let mut mlp = Mlp::new(&sizes, &mut rng).unwrap();
            let x = random_input(&mut rng, sizes[0]);
            let cot: Vec<f64> = random_input(&mut rng, *sizes.last().unwrap());
            let objective = |m: &Mlp, x: &[f64]| -> f64 {
                m.embed(x).unwrap().iter().zip(&cot).map(|(a, b)| a * b).sum()
            };
            let (_, tape) = mlp.forward(&x).unwrap();
            let (gp, gx) = mlp.backward(tape, &cot).unwrap();

            let base = mlp.params();
            let mut max_rel: f64 = 0.0;
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] += h;
                mlp.set_params(&p).unwrap();
                let fp = objective(&mlp, &x);
                p[i] -= 2.0 * h;
                mlp.set_params(&p).unwrap();
                let fm = objective(&mlp, &x);
                let num = (fp - fm) / (2.0 * h);
                max_rel = max_rel.max((num - gp[i]).abs() / num.abs().max(gp[i].abs()).max(1e-6));
            }
            mlp.set_params(&base).unwrap();
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let num = (objective(&mlp, &xp) - objective(&mlp, &xm)) / (2.0 * h);
                max_rel = max_rel.max((num - gx[i]).abs() / num.abs().max(gx[i].abs()).max(1e-6));
            }
            assert!(max_rel < 1e-4, "sizes {sizes:?}: max rel err {max_rel}");
        }
    }

    #[test]
    fn mismatched_tape_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Mlp::new(&[3, 4, 2], &mut rng).unwrap();
        let b = Mlp::new(&[3, 5, 2], &mut rng).unwrap();
        let (_, tape) = a.forward(&[0.1, 0.2, 0.3]).unwrap();
        assert!(b.backward(tape, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Mlp::new(&[4, 5, 3], &mut rng).unwrap();
        let mut b = Mlp::zeros(&[4, 5, 3]).unwrap();
        b.set_params(&a.params()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_params(), 4 * 5 + 5 + 5 * 3 + 3);
    }
}

//! Fully connected ReLU networks with hand-written backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::optim::{adam_step, AdamState, OptimError};

/// Affine layer `y = x·W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let (batch, inp) = x.shape();
        let out_dim = self.output_dim();
        let mut out = Matrix::zeros(batch, out_dim);
        for r in 0..batch {
            let dst = out.row_mut(r);
            dst.copy_from_slice(&self.b);
            let xr = x.row(r);
            for k in 0..inp {
                let xv = xr[k];
                if xv == 0.0 {
                    continue;
                }
                for (d, w) in dst.iter_mut().zip(self.w.row(k)) {
                    *d += xv * w;
                }
            }
        }
        out
    }
}

/// Gradients matching the shapes of a [`Dense`] layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Stack of dense layers with ReLU between them and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Values cached by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input to each layer; `inputs[0]` is the network input.
    pub inputs: Vec<Matrix>,
    /// Linear output of the last layer.
    pub output: Matrix,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weights = Matrix::uniform(w[0], w[1], bound, rng);
                let b = (0..w[1]).map(|_| rng.random_range(-bound..bound)).collect();
                Dense { w: weights, b }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                w: Matrix::zeros(w[0], w[1]),
                b: vec![0.0; w[1]],
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Dense::output_dim));
        d
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.is_finite() && l.b.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &Matrix) -> MlpTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&current);
            inputs.push(current);
            if l < last {
                z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            current = z;
        }
        MlpTrace {
            inputs,
            output: current,
        }
    }

    /// Returns parameter gradients and the gradient with respect to the input,
    /// given `grad_out = ∂L/∂output`.
    pub fn backward(&self, trace: &MlpTrace, grad_out: &Matrix) -> (Vec<DenseGrad>, Matrix) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a = &trace.inputs[l];
            let (batch, inp) = a.shape();
            let out_dim = layer.output_dim();
            let mut gw = Matrix::zeros(inp, out_dim);
            let mut gb = vec![0.0; out_dim];
            for r in 0..batch {
                let gr = g.row(r);
                for (b, v) in gb.iter_mut().zip(gr) {
                    *b += v;
                }
                let ar = a.row(r);
                for k in 0..inp {
                    let av = ar[k];
                    if av == 0.0 {
                        continue;
                    }
                    for (d, v) in gw.row_mut(k).iter_mut().zip(gr) {
                        *d += av * v;
                    }
                }
            }
            let mut gin = Matrix::zeros(batch, inp);
            for r in 0..batch {
                let gr = g.row(r);
                let dst = gin.row_mut(r);
                for k in 0..inp {
                    dst[k] = crate::linalg::dot(layer.w.row(k), gr);
                }
                if l > 0 {
                    // `a` is the ReLU output of the previous layer.
                    for (d, &av) in dst.iter_mut().zip(a.row(r)) {
                        if av <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
            }
            grads.push(DenseGrad { w: gw, b: gb });
            g = gin;
        }
        grads.reverse();
        (grads, g)
    }
}

/// Adam moments for every tensor of an [`Mlp`], weights then bias per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpAdam {
    pub states: Vec<AdamState>,
}

impl MlpAdam {
    pub fn new(mlp: &Mlp) -> Self {
        let states = mlp
            .layers
            .iter()
            .flat_map(|l| [AdamState::new(l.w.as_slice().len()), AdamState::new(l.b.len())])
            .collect();
        Self { states }
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &[DenseGrad], lr: f64) -> Result<(), OptimError> {
        for (l, (layer, g)) in mlp.layers.iter_mut().zip(grads).enumerate() {
            adam_step(layer.w.as_mut_slice(), g.w.as_slice(), &mut self.states[2 * l], lr)?;
            adam_step(&mut layer.b, &g.b, &mut self.states[2 * l + 1], lr)?;
        }
        Ok(())
    }
}

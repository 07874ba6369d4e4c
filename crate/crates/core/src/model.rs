//! Small differentiable classifiers: MLPs and a 2-conv + 1-fc net.
//!
//! Models are plain parameter containers; a forward pass builds ops on a
//! caller-supplied tape so inputs, parameters, or both can be tracked.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
}

/// Architecture description; (spec, seed) fully determines the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Fully connected sizes, e.g. [784, 128, 10].
    Mlp { sizes: Vec<usize> },
    /// Two stride-2 convolutions followed by one fully connected layer.
    /// Input is a [height, width, channels] image flattened channels-last.
    ConvNet {
        height: usize,
        width: usize,
        channels: usize,
        filters: [usize; 2],
        kernel: usize,
        classes: usize,
    },
}

impl ModelSpec {
    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::Mlp { sizes } => sizes[0],
            ModelSpec::ConvNet {
                height,
                width,
                channels,
                ..
            } => height * width * channels,
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            ModelSpec::Mlp { sizes } => *sizes.last().unwrap(),
            ModelSpec::ConvNet { classes, .. } => *classes,
        }
    }
}

#[derive(Clone, Debug)]
enum Layer {
    /// weight [in, out], bias [1, out]
    Affine { w: Tensor, b: Tensor },
    /// im2col convolution; weight [c*k*k, f], bias [1, f]
    Conv {
        w: Tensor,
        b: Tensor,
        in_h: usize,
        in_w: usize,
        in_c: usize,
        kernel: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    activation: Activation,
    layers: Vec<Layer>,
}

fn conv_out(n: usize, k: usize, s: usize) -> usize {
    (n - k) / s + 1
}

/// Flat index table mapping im2col patch entries to channels-last pixels.
fn im2col_table(
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    s: usize,
) -> (Rc<Vec<usize>>, usize, usize) {
    let (oh, ow) = (conv_out(h, k, s), conv_out(w, k, s));
    let mut table = Vec::with_capacity(batch * oh * ow * c * k * k);
    for m in 0..batch {
        let base = m * h * w * c;
        for y in 0..oh {
            for x in 0..ow {
                for ky in 0..k {
                    for kx in 0..k {
                        for ch in 0..c {
                            let (py, px) = (y * s + ky, x * s + kx);
                            table.push(base + (py * w + px) * c + ch);
                        }
                    }
                }
            }
        }
    }
    (Rc::new(table), oh, ow)
}

/// Deterministic uniform fan-in initialization.
pub fn init_model(
    spec: ModelSpec,
    activation: Activation,
    seed: u64,
) -> Result<Model, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::matrix(rows, cols, data)
    };
    let layers = match &spec {
        ModelSpec::Mlp { sizes } => {
            if sizes.len() < 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "init_model: need at least input and output sizes".into(),
                    lhs: vec![sizes.len()],
                    rhs: vec![2],
                });
            }
            let mut layers = Vec::new();
            for win in sizes.windows(2) {
                let (i, o) = (win[0], win[1]);
                layers.push(Layer::Affine {
                    w: draw(i, o, i)?,
                    b: draw(1, o, i)?,
                });
            }
            layers
        }
        ModelSpec::ConvNet {
            height,
            width,
            channels,
            filters,
            kernel,
            classes,
        } => {
            let k = *kernel;
            let mut layers = Vec::new();
            let (mut h, mut w, mut c) = (*height, *width, *channels);
            for &f in filters {
                let fan_in = c * k * k;
                layers.push(Layer::Conv {
                    w: draw(fan_in, f, fan_in)?,
                    b: draw(1, f, fan_in)?,
                    in_h: h,
                    in_w: w,
                    in_c: c,
                    kernel: k,
                    stride: 2,
                });
                h = conv_out(h, k, 2);
                w = conv_out(w, k, 2);
                c = f;
            }
            let flat = h * w * c;
            layers.push(Layer::Affine {
                w: draw(flat, *classes, flat)?,
                b: draw(1, *classes, flat)?,
            });
            layers
        }
    };
    Ok(Model {
        spec,
        activation,
        layers,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count()
    }

    /// Same parameter values, every activation replaced.
    pub fn swap_activation(&self, kind: Activation) -> Model {
        let mut m = self.clone();
        m.activation = kind;
        m
    }

    /// Parameter tensors in declaration order (w, b per layer).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Affine { w, b } | Layer::Conv { w, b, .. } => {
                    out.push(w);
                    out.push(b);
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Affine { w, b } | Layer::Conv { w, b, .. } => {
                    out.push(w);
                    out.push(b);
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Replaces parameters from tensors in declaration order.
    pub fn set_params(&mut self, new: &[Tensor]) {
        let mut params = self.params_mut();
        assert_eq!(params.len(), new.len());
        for (p, n) in params.iter_mut().zip(new) {
            assert_eq!(p.shape(), n.shape());
            **p = n.clone();
        }
    }

    /// Forward pass with parameters as tape constants; tracks x only if the
    /// caller made it a tracked leaf.
    pub fn forward_logits(&self, tape: &Tape, x: &Var) -> Result<Var, TensorError> {
        let param_vars: Vec<Var> = self.params().iter().map(|p| tape.constant((*p).clone())).collect();
        self.forward_with(tape, x, &param_vars)
    }

    /// Forward pass through caller-supplied parameter vars (tracked leaves
    /// for training).
    pub fn forward_with(
        &self,
        _tape: &Tape,
        x: &Var,
        params: &[Var],
    ) -> Result<Var, TensorError> {
        let xs = x.value();
        if xs.shape().len() != 2 || xs.shape()[1] != self.input_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "forward_logits".into(),
                lhs: xs.shape().to_vec(),
                rhs: vec![xs.shape().first().copied().unwrap_or(0), self.input_dim()],
            });
        }
        let batch = xs.shape()[0];
        let mut cur = x.clone();
        let mut pi = 0;
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let (w, b) = (&params[pi], &params[pi + 1]);
            pi += 2;
            cur = match layer {
                Layer::Affine { .. } => {
                    let rows = cur.value().shape()[0];
                    cur.matmul(w)?.add(&b.broadcast_rows(rows)?)?
                }
                Layer::Conv {
                    in_h,
                    in_w,
                    in_c,
                    kernel,
                    stride,
                    ..
                } => {
                    let (table, oh, ow) = im2col_table(batch, *in_h, *in_w, *in_c, *kernel, *stride);
                    let rows = batch * oh * ow;
                    let cols = in_c * kernel * kernel;
                    let flat = cur.reshape(vec![batch * in_h * in_w * in_c])?;
                    let patches = flat.gather(table, vec![rows, cols])?;
                    let f = w.value().shape()[1];
                    let conv = patches.matmul(w)?.add(&b.broadcast_rows(rows)?)?;
                    conv.reshape(vec![batch, oh * ow * f])?
                }
            };
            if li != last {
                cur = match self.activation {
                    Activation::Relu => cur.relu()?,
                    Activation::Softplus => cur.softplus()?,
                };
            }
        }
        Ok(cur)
    }

    /// Convenience: logits as a plain value, no gradient tracking.
    pub fn logits_value(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        Ok(self.forward_logits(&tape, &xv)?.value())
    }

    /// Predicted class per row.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>, TensorError> {
        let logits = self.logits_value(x)?;
        let c = self.class_count();
        Ok((0..logits.shape()[0])
            .map(|i| {
                let row = &logits.data()[i * c..(i + 1) * c];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect())
    }
}

use serde::{Deserialize, Serialize};

use super::{Activation, Model};
use crate::data::Target;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `(y - y_hat)^2` on a single output.
    Squared,
    /// Binary cross-entropy on a single sigmoid output.
    Logistic,
    /// Cross-entropy on a softmax output.
    CategoricalXent,
}

impl Loss {
    pub fn check(self, model: &Model) -> Result<()> {
        let out = model.arch.layers.last().expect("validated architecture");
        let ok = match self {
            Loss::Squared => out.units == 1 && out.activation != Activation::Softmax,
            Loss::Logistic => out.units == 1 && out.activation == Activation::Sigmoid,
            Loss::CategoricalXent => out.activation == Activation::Softmax,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!(
                "loss {self:?} does not fit a {}-unit {:?} output",
                out.units, out.activation
            )))
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn activate(act: Activation, z: &mut [f64]) {
    match act {
        Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Sigmoid => z.iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Linear => {}
        Activation::Softmax => {
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            z.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s: f64 = z.iter().sum();
            z.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// Derivative of an elementwise activation, written in terms of its output.
fn act_grad(act: Activation, a: f64) -> f64 {
    match act {
        Activation::Relu => f64::from(u8::from(a > 0.0)),
        Activation::Sigmoid => a * (1.0 - a),
        Activation::Tanh => 1.0 - a * a,
        Activation::Linear => 1.0,
        Activation::Softmax => unreachable!("softmax is handled with its loss"),
    }
}

/// Forward-pass record for one example.
pub(crate) struct Trace {
    /// `inputs[l]` feeds layer `l` (after the previous layer's dropout).
    inputs: Vec<Vec<f64>>,
    /// `outputs[l]` is layer `l`'s activation before dropout.
    outputs: Vec<Vec<f64>>,
    /// Inverted-dropout factors applied after layer `l`, if any.
    dropout: Vec<Option<Vec<f64>>>,
    /// Pre-activation of the output layer.
    z_out: Vec<f64>,
}

pub(crate) fn forward_trace(
    model: &Model,
    x: &[f64],
    mut dropout_rng: Option<&mut RngStream>,
) -> Trace {
    let layers = &model.arch.layers;
    let theta = &model.params.theta;
    let mut inputs = Vec::with_capacity(layers.len());
    let mut outputs = Vec::with_capacity(layers.len());
    let mut dropout = Vec::with_capacity(layers.len());
    let mut z_out = Vec::new();
    let mut input = x.to_vec();
    for (l, (spec, s)) in layers.iter().zip(model.params.layout()).enumerate() {
        let w = &theta[s.weights()];
        let b = &theta[s.biases()];
        let mut z: Vec<f64> = (0..s.units)
            .map(|u| {
                b[u] + w[u * s.fan_in..(u + 1) * s.fan_in]
                    .iter()
                    .zip(&input)
                    .map(|(a, c)| a * c)
                    .sum::<f64>()
            })
            .collect();
        if l + 1 == layers.len() {
            z_out = z.clone();
        }
        activate(spec.activation, &mut z);
        let mut next = z.clone();
        let mask = match dropout_rng.as_deref_mut() {
            Some(rng) if spec.dropout_after > 0.0 => {
                let keep = 1.0 - spec.dropout_after;
                let m: Vec<f64> = (0..s.units)
                    .map(|_| {
                        if rng.uniform() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                next.iter_mut().zip(&m).for_each(|(v, f)| *v *= f);
                Some(m)
            }
            _ => None,
        };
        inputs.push(std::mem::replace(&mut input, next));
        outputs.push(z);
        dropout.push(mask);
    }
    Trace {
        inputs,
        outputs,
        dropout,
        z_out,
    }
}

pub(crate) fn forward(model: &Model, x: &[f64]) -> Vec<f64> {
    let mut t = forward_trace(model, x, None);
    t.outputs.pop().expect("nonempty")
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Loss of a traced example and `dL/dz` at the output layer.
fn output_delta(
    trace: &Trace,
    act: Activation,
    target: Target,
    loss: Loss,
) -> Result<(f64, Vec<f64>)> {
    let out = trace.outputs.last().expect("nonempty");
    match loss {
        Loss::CategoricalXent => {
            let Target::Class(c) = target else {
                return Err(Error::arg("cross-entropy needs class targets"));
            };
            if c >= out.len() {
                return Err(Error::arg(format!("class {c} out of range {}", out.len())));
            }
            // -log p_c from the logits, stable for saturated outputs.
            let m = trace
                .z_out
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = m + trace.z_out.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            let mut delta = out.clone();
            delta[c] -= 1.0;
            Ok((lse - trace.z_out[c], delta))
        }
        Loss::Logistic => {
            let y = target.as_real();
            let z = trace.z_out[0];
            Ok((softplus(z) - y * z, vec![out[0] - y]))
        }
        Loss::Squared => {
            let r = out[0] - target.as_real();
            Ok((r * r, vec![2.0 * r * act_grad(act, out[0])]))
        }
    }
}

/// Backpropagates one traced example into `grad` (overwritten, full length).
/// Frozen layers get zero gradient; backprop stops below the lowest trainable layer.
pub(crate) fn backward(
    model: &Model,
    trace: &Trace,
    target: Target,
    loss: Loss,
    grad: &mut [f64],
) -> Result<f64> {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let layers = &model.arch.layers;
    let layout = model.params.layout();
    let theta = &model.params.theta;
    let last = layers.len() - 1;
    let lowest_trainable = match layout.iter().position(|s| s.trainable) {
        Some(l) => l,
        None => return Ok(output_delta(trace, layers[last].activation, target, loss)?.0),
    };
    let (value, mut delta) = output_delta(trace, layers[last].activation, target, loss)?;
    for l in (lowest_trainable..=last).rev() {
        let s = layout[l];
        let input = &trace.inputs[l];
        if s.trainable {
            let gw = &mut grad[s.weights()];
            for (u, d) in delta.iter().enumerate() {
                if *d != 0.0 {
                    for (g, a) in gw[u * s.fan_in..(u + 1) * s.fan_in].iter_mut().zip(input) {
                        *g = d * a;
                    }
                }
            }
            grad[s.biases()].copy_from_slice(&delta);
        }
        if l == lowest_trainable {
            break;
        }
        let w = &theta[s.weights()];
        let mut d_in = vec![0.0; s.fan_in];
        for (u, d) in delta.iter().enumerate() {
            if *d != 0.0 {
                for (di, wi) in d_in.iter_mut().zip(&w[u * s.fan_in..(u + 1) * s.fan_in]) {
                    *di += d * wi;
                }
            }
        }
        let below = l - 1;
        if let Some(mask) = &trace.dropout[below] {
            d_in.iter_mut().zip(mask).for_each(|(v, f)| *v *= f);
        }
        let act = layers[below].activation;
        for (v, a) in d_in.iter_mut().zip(&trace.outputs[below]) {
            *v *= act_grad(act, *a);
        }
        delta = d_in;
    }
    Ok(value)
}

/// Loss of one example (no dropout).
pub fn example_loss(model: &Model, x: &[f64], target: Target, loss: Loss) -> Result<f64> {
    loss.check(model)?;
    if x.len() != model.arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.arch.input_dim,
            got: x.len(),
        });
    }
    let t = forward_trace(model, x, None);
    Ok(output_delta(
        &t,
        model.arch.layers.last().expect("nonempty").activation,
        target,
        loss,
    )?
    .0)
}

/// One loss gradient per row of `x` (no dropout, no regularization).
pub fn per_example_grads(
    model: &Model,
    x: &Matrix,
    targets: &[Target],
    loss: Loss,
) -> Result<Vec<Vec<f64>>> {
    loss.check(model)?;
    if x.rows() == 0 {
        return Err(Error::arg("empty batch"));
    }
    if x.rows() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            got: targets.len(),
        });
    }
    if x.cols() != model.arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.arch.input_dim,
            got: x.cols(),
        });
    }
    x.iter_rows()
        .zip(targets)
        .map(|(row, &t)| {
            let mut g = vec![0.0; model.params.len()];
            let trace = forward_trace(model, row, None);
            backward(model, &trace, t, loss, &mut g)?;
            Ok(g)
        })
        .collect()
}

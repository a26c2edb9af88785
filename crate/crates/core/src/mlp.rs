//! Fully connected ReLU networks on the tape, the MSE loss, and a central
//! finite-difference oracle.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{GapError, Result};
use crate::tensor::Tensor;

/// One dense layer. `weight` is `out x in`, `bias` has length `out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameters of a multilayer perceptron with ReLU hidden activations and a
/// linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(GapError::Dimension("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.rank() != 2 || layer.bias.rank() != 1 {
                return Err(GapError::Dimension(format!(
                    "layer {i}: weight {:?}, bias {:?}",
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
            if layer.bias.len() != layer.weight.rows() {
                return Err(GapError::Dimension(format!(
                    "layer {i}: bias length {} for {} outputs",
                    layer.bias.len(),
                    layer.weight.rows()
                )));
            }
            if i > 0 && layers[i - 1].weight.rows() != layer.weight.cols() {
                return Err(GapError::Dimension(format!(
                    "layer {} emits {} features, layer {i} expects {}",
                    i - 1,
                    layers[i - 1].weight.rows(),
                    layer.weight.cols()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Uniform `±sqrt(1/fan_in)` initialisation for weights and biases.
    /// `sizes` lists the widths from input to output, e.g. `[1, 40, 40, 1]`.
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(GapError::Dimension(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (1.0 / fan_in as f64).sqrt();
                Layer {
                    weight: Tensor::uniform(&[fan_out, fan_in], -bound, bound, rng),
                    bias: Tensor::uniform(&[fan_out], -bound, bound, rng),
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].weight.cols()];
        sizes.extend(self.layers.iter().map(|l| l.weight.rows()));
        sizes
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn to_tape<'t>(&self, tape: &'t Tape) -> Vec<LayerVars<'t>> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.leaf(l.weight.clone()),
                bias: tape.leaf(l.bias.clone()),
            })
            .collect()
    }

    /// Forward pass without a tape. Uses the same kernels in the same order
    /// as [`forward_mlp`], so the results agree bit for bit.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.layers[0].weight.cols())?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.matmul(&layer.weight.transpose()?)?;
            let z = z.add(&layer.bias.repeat_rows(z.rows())?)?;
            h = if i < last { z.map(|v| if v > 0.0 { v } else { 0.0 }) } else { z };
        }
        Ok(h)
    }
}

fn check_input(x: &Tensor, in_dim: usize) -> Result<()> {
    if x.rank() != 2 || x.cols() != in_dim {
        return Err(GapError::Dimension(format!(
            "input {:?} does not match input width {in_dim}",
            x.shape()
        )));
    }
    Ok(())
}

/// Records a forward pass of the network on the tape: ReLU on hidden
/// layers, identity on the output.
pub fn forward_mlp<'t>(layers: &[LayerVars<'t>], x: Var<'t>) -> Result<Var<'t>> {
    let Some(first) = layers.first() else {
        return Err(GapError::Dimension("network needs at least one layer".into()));
    };
    check_input(&x.value(), first.weight.value().cols())?;
    let batch = x.value().rows();
    let last = layers.len() - 1;
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let z = h.matmul(layer.weight.t()?)?;
        let z = z.add(layer.bias.repeat_rows(batch)?)?;
        h = if i < last { z.relu()? } else { z };
    }
    Ok(h)
}

/// Mean of squared differences, recorded on the tape.
pub fn mse_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(GapError::Dimension(format!(
            "mse of {:?} against {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let d = pred.sub(target)?;
    d.mul(d)?.mean()
}

/// Mean of squared differences without a tape.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let d = pred.sub(target)?;
    let sq = d.mul(&d)?;
    Ok(sq.sum() * (1.0 / sq.len() as f64))
}

/// Central-difference gradient `(f(x + h·e_i) - f(x - h·e_i)) / 2h`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(GapError::Domain(format!("step {h} must be positive")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::relative_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine_batch(rng: &mut ChaCha8Rng, n: usize) -> (Tensor, Tensor) {
        let x = Tensor::uniform(&[n, 1], -5.0, 5.0, rng);
        let y = x.map(|v| 2.0 * (v + 0.5).sin());
        (x, y)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let layers = vec![
            Layer { weight: Tensor::zeros(&[3, 2]), bias: Tensor::zeros(&[3]) },
            Layer { weight: Tensor::zeros(&[1, 3]), bias: Tensor::zeros(&[1]) },
        ];
        let net = MlpParams::new(layers).unwrap();
        let x = Tensor::matrix(2, 2, vec![1.0, -4.0, 3.0, 7.0]).unwrap();
        assert!(net.predict(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layers_pass_input_through() {
        let layers = vec![
            Layer { weight: Tensor::identity(1), bias: Tensor::zeros(&[1]) },
            Layer { weight: Tensor::identity(1), bias: Tensor::zeros(&[1]) },
        ];
        let net = MlpParams::new(layers).unwrap();
        let x = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        assert_eq!(net.predict(&x).unwrap().data(), &[2.0]);
        let tape = Tape::new();
        let vars = net.to_tape(&tape);
        let out = forward_mlp(&vars, tape.leaf(x)).unwrap();
        assert_eq!(out.value().data(), &[2.0]);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let bad = vec![
            Layer { weight: Tensor::zeros(&[3, 2]), bias: Tensor::zeros(&[3]) },
            Layer { weight: Tensor::zeros(&[1, 4]), bias: Tensor::zeros(&[1]) },
        ];
        assert!(matches!(MlpParams::new(bad), Err(GapError::Dimension(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = MlpParams::init(&[1, 4, 1], &mut rng).unwrap();
        assert!(net.predict(&Tensor::zeros(&[2, 3])).is_err());
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 1]));
        let b = tape.leaf(Tensor::zeros(&[3, 1]));
        assert!(mse_loss(a, b).is_err());
    }

    #[test]
    fn seeded_forward_is_deterministic_and_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = MlpParams::init(&[1, 40, 40, 1], &mut rng).unwrap();
        let (x, _) = sine_batch(&mut rng, 5);
        let tape = Tape::new();
        let vars = net.to_tape(&tape);
        let out = forward_mlp(&vars, tape.leaf(x.clone())).unwrap();
        tape.mark_output(out).unwrap();
        assert_eq!(out.shape(), vec![5, 1]);
        assert!(out.value().all_finite());
        assert_eq!(tape.replay().unwrap()[0].data(), out.value().data());
        assert_eq!(net.predict(&x).unwrap().data(), out.value().data());
    }

    #[test]
    fn mse_examples() {
        let a = Tensor::vector(vec![0.0, 0.0]);
        let b = Tensor::vector(vec![1.0, 3.0]);
        assert_eq!(mse(&a, &b).unwrap(), 5.0);
        assert_eq!(mse(&b, &b).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Tensor::standard_normal(&[7, 3], &mut rng);
        let t = Tensor::standard_normal(&[7, 3], &mut rng);
        let mut acc = 0.0;
        for (x, y) in p.data().iter().zip(t.data()) {
            acc += (x - y) * (x - y);
        }
        let brute = acc / 21.0;
        let tape = Tape::new();
        let l = mse_loss(tape.leaf(p.clone()), tape.leaf(t.clone())).unwrap();
        assert!(((l.value().item() - brute) / brute).abs() < 1e-15);
    }

    #[test]
    fn finite_differences_of_simple_functions() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
        let g = finite_diff_grad(|t| Ok(t.item() * t.item()), &Tensor::scalar(1.0), 1e-5).unwrap();
        assert!((g.item() - 2.0).abs() < 1e-9);
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
    }

    fn mlp_loss(net: &MlpParams, x: &Tensor, y: &Tensor) -> f64 {
        mse(&net.predict(x).unwrap(), y).unwrap()
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MlpParams::init(&[1, 40, 40, 1], &mut rng).unwrap();
        let (x, y) = sine_batch(&mut rng, 10);
        let tape = Tape::new();
        let vars = net.to_tape(&tape);
        let pred = forward_mlp(&vars, tape.leaf(x.clone())).unwrap();
        let loss = mse_loss(pred, tape.leaf(y.clone())).unwrap();
        let wrt: Vec<Var> = vars.iter().flat_map(|l| [l.weight, l.bias]).collect();
        let grads = tape.grad_values(loss, &wrt).unwrap();
        for (k, g) in grads.iter().enumerate() {
            let (layer, is_bias) = (k / 2, k % 2 == 1);
            let base = if is_bias { &net.layers[layer].bias } else { &net.layers[layer].weight };
            let fd = finite_diff_grad(
                |t| {
                    let mut n = net.clone();
                    if is_bias {
                        n.layers[layer].bias = t.clone();
                    } else {
                        n.layers[layer].weight = t.clone();
                    }
                    Ok(mlp_loss(&n, &x, &y))
                },
                base,
                1e-5,
            )
            .unwrap();
            let err = relative_error(g.data(), fd.data(), 1e-12);
            assert!(err < 1e-6, "param {k}: rel err {err}");
        }
    }

    #[test]
    fn second_order_through_one_gradient_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = MlpParams::init(&[1, 8, 1], &mut rng).unwrap();
        let (x, y) = sine_batch(&mut rng, 6);
        let alpha = 0.05;
        // L(θ - α∇L(θ)) as a function of the first-layer weight.
        let composed = |w: &Tensor| -> Result<f64> {
            let mut n = net.clone();
            n.layers[0].weight = w.clone();
            let tape = Tape::new();
            let vars = n.to_tape(&tape);
            let xv = tape.leaf(x.clone());
            let yv = tape.leaf(y.clone());
            let loss = mse_loss(forward_mlp(&vars, xv)?, yv)?;
            let wrt: Vec<Var> = vars.iter().flat_map(|l| [l.weight, l.bias]).collect();
            let grads = tape.grad_values(loss, &wrt)?;
            let mut adapted = n.clone();
            for (i, layer) in adapted.layers.iter_mut().enumerate() {
                layer.weight = layer.weight.sub(&grads[2 * i].scale(alpha))?;
                layer.bias = layer.bias.sub(&grads[2 * i + 1].scale(alpha))?;
            }
            mse(&adapted.predict(&x)?, &y)
        };

        let tape = Tape::new();
        let vars = net.to_tape(&tape);
        let xv = tape.leaf(x.clone());
        let yv = tape.leaf(y.clone());
        let inner = mse_loss(forward_mlp(&vars, xv).unwrap(), yv).unwrap();
        let wrt: Vec<Var> = vars.iter().flat_map(|l| [l.weight, l.bias]).collect();
        let grads = tape.grad(inner, &wrt).unwrap();
        let adapted: Vec<LayerVars> = vars
            .iter()
            .enumerate()
            .map(|(i, l)| LayerVars {
                weight: l.weight.sub(grads[2 * i].scale(alpha).unwrap()).unwrap(),
                bias: l.bias.sub(grads[2 * i + 1].scale(alpha).unwrap()).unwrap(),
            })
            .collect();
        let outer = mse_loss(forward_mlp(&adapted, xv).unwrap(), yv).unwrap();
        let analytic = tape.grad_values(outer, &[vars[0].weight]).unwrap();
        let fd = finite_diff_grad(composed, &net.layers[0].weight, 1e-5).unwrap();
        let err = relative_error(analytic[0].data(), fd.data(), 1e-12);
        assert!(err < 1e-5, "rel err {err}");
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{Activation, InputKind, Layer, NetSpec};
use crate::autodiff::{BatchNormMode, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Running-average momentum for batchnorm statistics: `r <- 0.9 r + 0.1 batch`.
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// A parameter or buffer; serialized flat as `{"name", "shape", "data"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "NamedRepr", try_from = "NamedRepr")]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedRepr {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl From<NamedTensor> for NamedRepr {
    fn from(n: NamedTensor) -> Self {
        let shape = n.tensor.shape().to_vec();
        Self {
            name: n.name,
            shape,
            data: n.tensor.into_data(),
        }
    }
}

impl TryFrom<NamedRepr> for NamedTensor {
    type Error = Error;

    fn try_from(r: NamedRepr) -> Result<Self> {
        Ok(Self {
            tensor: Tensor::new(r.shape, r.data)?,
            name: r.name,
        })
    }
}

/// Parameters of one layer as indices into [`Net::params`] / [`Net::buffers`].
#[derive(Clone, Debug, Default, PartialEq)]
struct Slots {
    params: Vec<usize>,
    buffers: Vec<usize>,
}

/// An instantiated network.
#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    spec: NetSpec,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
    slots: Vec<Slots>,
    mode: Mode,
}

/// Result of a forward pass recorded on a graph.
#[derive(Debug)]
pub struct Forward {
    pub output: Var,
    /// Graph leaves holding the parameters, in [`Net::params`] order.
    pub params: Vec<Var>,
    /// Training-mode batchnorm nodes with the index of their running-mean buffer.
    batchnorm: Vec<(usize, Var)>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

/// Expected parameter shapes, layer by layer.
fn layout(spec: &NetSpec) -> Vec<(Vec<(String, Vec<usize>)>, Vec<(String, Vec<usize>)>)> {
    spec.layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let p = |n: &str, s: Vec<usize>| (format!("layer{i}.{n}"), s);
            match *layer {
                Layer::Dense { inputs, out, .. } => {
                    (vec![p("weight", vec![inputs, out]), p("bias", vec![out])], vec![])
                }
                Layer::Conv1d {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => (
                    vec![p("weight", vec![out_ch, in_ch, kernel]), p("bias", vec![out_ch])],
                    vec![],
                ),
                Layer::Batchnorm1d { ch } => (
                    vec![p("gamma", vec![ch]), p("beta", vec![ch])],
                    vec![p("running_mean", vec![ch]), p("running_var", vec![ch])],
                ),
                Layer::ConcatCondition {
                    width,
                    classes: Some(k),
                    ..
                } => (vec![p("embedding", vec![k, width])], vec![]),
                Layer::ConcatCondition { .. } => (vec![], vec![]),
            }
        })
        .collect()
}

fn activate(g: &mut Graph, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Identity => Ok(x),
        Activation::Tanh => g.tanh(x),
        Activation::Relu => g.relu(x),
        Activation::LeakyRelu(slope) => g.leaky_relu(x, slope),
        Activation::Softplus => g.softplus(x),
        Activation::Sigmoid => g.sigmoid(x),
    }
}

impl Net {
    /// Builds a network with Glorot-uniform weights, zero biases and unit batchnorm scales.
    pub fn build(spec: &NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut slots = Vec::new();
        for (layer, (pshapes, bshapes)) in spec.layers.iter().zip(layout(spec)) {
            let mut slot = Slots::default();
            let tensors: Vec<Tensor> = match *layer {
                Layer::Dense { inputs, out, .. } => {
                    let a = (6.0 / (inputs + out) as f64).sqrt();
                    vec![uniform(&mut rng, &[inputs, out], a), Tensor::zeros(&[out])]
                }
                Layer::Conv1d {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    let a = (6.0 / ((in_ch + out_ch) * kernel) as f64).sqrt();
                    vec![uniform(&mut rng, &[out_ch, in_ch, kernel], a), Tensor::zeros(&[out_ch])]
                }
                Layer::Batchnorm1d { ch } => vec![Tensor::full(&[ch], 1.0), Tensor::zeros(&[ch])],
                Layer::ConcatCondition {
                    width,
                    classes: Some(k),
                    ..
                } => {
                    let a = (6.0 / (k + width) as f64).sqrt();
                    vec![uniform(&mut rng, &[k, width], a)]
                }
                Layer::ConcatCondition { .. } => vec![],
            };
            for ((name, _), tensor) in pshapes.into_iter().zip(tensors) {
                slot.params.push(params.len());
                params.push(NamedTensor { name, tensor });
            }
            for (name, shape) in bshapes {
                slot.buffers.push(buffers.len());
                let init = if name.ends_with("running_var") { 1.0 } else { 0.0 };
                buffers.push(NamedTensor {
                    name,
                    tensor: Tensor::full(&shape, init),
                });
            }
            slots.push(slot);
        }
        Ok(Self {
            spec: spec.clone(),
            params,
            buffers,
            slots,
            mode: Mode::Train,
        })
    }

    /// Rebuilds a network from stored tensors, checking names and shapes against the spec.
    pub fn from_parts(spec: &NetSpec, params: Vec<NamedTensor>, buffers: Vec<NamedTensor>) -> Result<Self> {
        let mut net = Self::build(spec, 0)?;
        let check = |expected: &[NamedTensor], got: &[NamedTensor], what: &str| -> Result<()> {
            if expected.len() != got.len() {
                return Err(Error::Checkpoint(format!(
                    "spec expects {} {what}, found {}",
                    expected.len(),
                    got.len()
                )));
            }
            for (e, g) in expected.iter().zip(got) {
                if e.name != g.name || e.tensor.shape() != g.tensor.shape() {
                    return Err(Error::Checkpoint(format!(
                        "expected {what} `{}` {:?}, found `{}` {:?}",
                        e.name,
                        e.tensor.shape(),
                        g.name,
                        g.tensor.shape()
                    )));
                }
            }
            Ok(())
        };
        check(&net.params, &params, "parameters")?;
        check(&net.buffers, &buffers, "buffers")?;
        net.params = params;
        net.buffers = buffers;
        Ok(net)
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor] {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Runs the network on `input` (`[B, F]` or `[B, C, T]`).
    ///
    /// `condition` must be present exactly when the spec has a concat-condition
    /// layer. Parameters enter the graph through [`Graph::param`], so they are
    /// constants while the graph has gradients disabled.
    pub fn forward(&self, g: &mut Graph, input: Var, condition: Option<Var>) -> Result<Forward> {
        let shape = g.value(input).shape().to_vec();
        let ok = match self.spec.input {
            InputKind::Features(f) => shape.len() == 2 && shape[1] == f,
            InputKind::Channels(c) => shape.len() == 3 && shape[1] == c,
        };
        if !ok {
            return Err(Error::shape(
                "forward",
                format!("input {shape:?} does not match {:?}", self.spec.input),
            ));
        }
        let has_condition = self.spec.condition().is_some();
        if has_condition != condition.is_some() {
            return Err(Error::invalid(if has_condition {
                "network expects a condition"
            } else {
                "network takes no condition"
            }));
        }

        let params: Vec<Var> = self.params.iter().map(|p| g.param(p.tensor.clone())).collect();
        let mut batchnorm = Vec::new();
        let mut x = input;
        for (layer, slot) in self.spec.layers.iter().zip(&self.slots) {
            let pv = |k: usize| params[slot.params[k]];
            x = match *layer {
                Layer::Dense { activation, .. } => {
                    let y = g.matmul(x, pv(0))?;
                    let y = g.add(y, pv(1))?;
                    activate(g, y, activation)?
                }
                Layer::Conv1d { activation, .. } => {
                    let y = g.conv1d(x, pv(0), Some(pv(1)))?;
                    activate(g, y, activation)?
                }
                Layer::Batchnorm1d { .. } => {
                    let mode = match self.mode {
                        Mode::Train => BatchNormMode::Train,
                        Mode::Eval => BatchNormMode::Eval {
                            running_mean: self.buffers[slot.buffers[0]].tensor.clone(),
                            running_var: self.buffers[slot.buffers[1]].tensor.clone(),
                        },
                    };
                    let y = g.batchnorm1d(x, pv(0), pv(1), mode)?;
                    if self.mode == Mode::Train {
                        batchnorm.push((slot.buffers[0], y));
                    }
                    y
                }
                Layer::ConcatCondition { width, classes, .. } => {
                    let c = condition.expect("checked above");
                    let cshape = g.value(c).shape().to_vec();
                    let expect_width = classes.unwrap_or(width);
                    let fits = cshape.len() == shape.len()
                        && cshape[0] == shape[0]
                        && cshape[1] == expect_width
                        && (shape.len() == 2 || cshape[2] == shape[2]);
                    if !fits {
                        return Err(Error::shape(
                            "concat_condition",
                            format!("condition {cshape:?} for input {shape:?}, width {expect_width}"),
                        ));
                    }
                    let c = if classes.is_some() { g.matmul(c, pv(0))? } else { c };
                    g.concat(&[x, c], 1)?
                }
            };
        }
        Ok(Forward {
            output: x,
            params,
            batchnorm,
        })
    }

    /// Folds the batch statistics of a training-mode forward pass into the running averages.
    pub fn update_running_stats(&mut self, g: &Graph, fwd: &Forward) {
        for &(mean_idx, node) in &fwd.batchnorm {
            let Some((mean, var)) = g.batch_stats(node) else {
                continue;
            };
            let shape = g.value(node).shape();
            let count = shape[0] * shape.get(2).copied().unwrap_or(1);
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            let m = BATCHNORM_MOMENTUM;
            let rm = &mut self.buffers[mean_idx].tensor;
            for (r, b) in rm.data_mut().iter_mut().zip(mean.data()) {
                *r = m * *r + (1.0 - m) * b;
            }
            let rv = &mut self.buffers[mean_idx + 1].tensor;
            for (r, b) in rv.data_mut().iter_mut().zip(var.data()) {
                *r = m * *r + (1.0 - m) * b * unbias;
            }
        }
    }

    /// Evaluates the network on constant inputs and returns the output value.
    pub fn infer(&self, input: &Tensor, condition: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        g.set_grad_enabled(false);
        let x = g.constant(input.clone());
        let c = condition.map(|c| g.constant(c.clone()));
        let fwd = self.forward(&mut g, x, c)?;
        Ok(g.value(fwd.output).clone())
    }

    /// Whether every parameter and buffer is bitwise equal to `other`'s.
    pub fn bit_eq(&self, other: &Net) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .chain(&self.buffers)
                .zip(other.params.iter().chain(&other.buffers))
                .all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor))
    }
}

#[cfg(test)]
mod tests {
    use super::super::spec::{ConcatMode, Role};
    use super::*;

    fn mlp_2d() -> NetSpec {
        NetSpec::mlp(Role::Encoder, 2, &[64, 64, 64], 1, Activation::Softplus, Activation::Identity)
    }

    #[test]
    fn parameter_count_of_2d_mlp() {
        let net = Net::build(&mlp_2d(), 7).unwrap();
        assert_eq!(net.param_count(), 2 * 64 + 64 + 64 * 64 + 64 + 64 * 64 + 64 + 64 + 1);
        assert_eq!(net.param_count(), 8577);
    }

    #[test]
    fn ecg_encoder_preserves_length() {
        let spec = NetSpec::ecg_encoder(Role::Encoder, 24, 5);
        let net = Net::build(&spec, 1).unwrap();
        let x = Tensor::full(&[1, 24, 2000], 0.1);
        let mut g = Graph::new();
        let xv = g.constant(x);
        // A single sequence still provides 2000 values per channel for batch statistics.
        let y = net.forward(&mut g, xv, None).unwrap();
        assert_eq!(g.value(y.output).shape(), &[1, 5, 2000]);
    }

    #[test]
    fn build_is_deterministic() {
        let spec = NetSpec::ecg_encoder(Role::Encoder, 24, 5);
        assert!(Net::build(&spec, 3).unwrap().bit_eq(&Net::build(&spec, 3).unwrap()));
        assert!(!Net::build(&spec, 3).unwrap().bit_eq(&Net::build(&spec, 4).unwrap()));
    }

    #[test]
    fn inconsistent_spec_names_layer() {
        let mut spec = mlp_2d();
        spec.layers[2] = Layer::Dense {
            inputs: 32,
            out: 64,
            activation: Activation::Tanh,
        };
        match Net::build(&spec, 0) {
            Err(Error::Spec { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("{other:?}"),
        }
        let mut dec = NetSpec::ecg_decoder(5, 3, 24);
        dec.layers.remove(0);
        assert!(matches!(dec.validate(), Err(Error::Spec { .. })));
    }

    #[test]
    fn zero_encoder_gives_zero_code() {
        let spec = NetSpec::mlp(Role::Encoder, 3, &[4], 2, Activation::Tanh, Activation::Tanh);
        let mut net = Net::build(&spec, 0).unwrap();
        for p in net.params_mut() {
            p.tensor = Tensor::zeros(p.tensor.shape());
        }
        let y = net.infer(&Tensor::full(&[5, 3], 0.7), None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_appends_condition_channels() {
        let spec = NetSpec::ecg_decoder(5, 3, 24);
        let net = Net::build(&spec, 0).unwrap();
        let mut g = Graph::new();
        let code = g.constant(Tensor::full(&[2, 5, 40], 0.1));
        let cond = g.constant(Tensor::full(&[2, 3, 40], -0.2));
        let fwd = net.forward(&mut g, code, Some(cond)).unwrap();
        assert_eq!(g.value(fwd.output).shape(), &[2, 24, 40]);
        // The first convolution sees code ++ condition = 8 channels.
        assert_eq!(net.params()[0].tensor.shape(), &[8, 8, 3]);
        assert!(net.forward(&mut g, code, None).is_err());
    }

    #[test]
    fn mlp_matches_matrix_oracle() {
        let spec = NetSpec::mlp(Role::Encoder, 2, &[3], 1, Activation::Tanh, Activation::Identity);
        let net = Net::build(&spec, 11).unwrap();
        let x = [0.3, -1.2];
        let w1 = net.params()[0].tensor.data();
        let b1 = net.params()[1].tensor.data();
        let w2 = net.params()[2].tensor.data();
        let b2 = net.params()[3].tensor.data();
        let mut out = b2[0];
        for j in 0..3 {
            let h = (x[0] * w1[j] + x[1] * w1[3 + j] + b1[j]).tanh();
            out += h * w2[j];
        }
        let y = net.infer(&Tensor::matrix(1, 2, x.to_vec()).unwrap(), None).unwrap();
        assert!((y.data()[0] - out).abs() < 1e-15);
    }

    #[test]
    fn class_embedding_condition() {
        let spec = NetSpec::conditioned_mlp(
            Role::Decoder,
            1,
            4,
            Some(3),
            &[8],
            2,
            Activation::Relu,
            Activation::Identity,
        );
        assert_eq!(spec.condition(), Some((ConcatMode::AppendFeatures, 4, Some(3))));
        let net = Net::build(&spec, 0).unwrap();
        let onehot = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let y = net.infer(&Tensor::zeros(&[2, 1]), Some(&onehot)).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let spec = NetSpec {
            role: Role::Encoder,
            input: InputKind::Features(1),
            layers: vec![Layer::Batchnorm1d { ch: 1 }],
        };
        let mut net = Net::build(&spec, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let fwd = net.forward(&mut g, x, None).unwrap();
        net.update_running_stats(&g, &fwd);
        let rm = net.buffers()[0].tensor.data()[0];
        let rv = net.buffers()[1].tensor.data()[0];
        assert!((rm - 0.25).abs() < 1e-15);
        // Unbiased batch variance of 1..4 is 5/3.
        assert!((rv - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
    }
}

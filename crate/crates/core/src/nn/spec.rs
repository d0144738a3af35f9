use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Encoder,
    Decoder,
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Softplus,
    Sigmoid,
}

/// Shape of a network input: flat feature vectors `[B, F]` or multichannel
/// sequences `[B, C, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Features(usize),
    Channels(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcatMode {
    /// `[B, F] ++ [B, W] -> [B, F + W]`.
    AppendFeatures,
    /// `[B, C, T] ++ [B, W, T] -> [B, C + W, T]`.
    AppendChannels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Dense {
        #[serde(rename = "in")]
        inputs: usize,
        out: usize,
        activation: Activation,
    },
    Conv1d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        activation: Activation,
    },
    Batchnorm1d {
        ch: usize,
    },
    /// Appends the condition to the running activation. With `classes`, the
    /// condition is a one-hot class vector mapped through a learnable
    /// `classes x width` lookup table first.
    ConcatCondition {
        mode: ConcatMode,
        width: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub role: Role,
    pub input: InputKind,
    pub layers: Vec<Layer>,
}

impl NetSpec {
    /// Checks that layer dimensions chain and returns the output width.
    pub fn validate(&self) -> Result<usize> {
        let (sequence, mut width) = match self.input {
            InputKind::Features(f) => (false, f),
            InputKind::Channels(c) => (true, c),
        };
        if width == 0 {
            return Err(Error::Spec {
                layer: 0,
                reason: "input width must be positive".into(),
            });
        }
        let mut concats = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |reason: String| Err(Error::Spec { layer: i, reason });
            match *layer {
                Layer::Dense { inputs, out, .. } => {
                    if sequence {
                        return fail("dense layer applied to a sequence input".into());
                    }
                    if inputs != width {
                        return fail(format!("dense expects {inputs} inputs, previous width is {width}"));
                    }
                    if out == 0 {
                        return fail("dense output width must be positive".into());
                    }
                    width = out;
                }
                Layer::Conv1d {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => {
                    if !sequence {
                        return fail("conv1d applied to a flat input".into());
                    }
                    if in_ch != width {
                        return fail(format!("conv1d expects {in_ch} channels, previous width is {width}"));
                    }
                    if kernel % 2 == 0 {
                        return fail(format!("conv1d kernel {kernel} must be odd"));
                    }
                    if out_ch == 0 {
                        return fail("conv1d output channels must be positive".into());
                    }
                    width = out_ch;
                }
                Layer::Batchnorm1d { ch } => {
                    if ch != width {
                        return fail(format!("batchnorm over {ch} channels, previous width is {width}"));
                    }
                }
                Layer::ConcatCondition {
                    mode,
                    width: w,
                    classes,
                } => {
                    concats += 1;
                    match (mode, sequence) {
                        (ConcatMode::AppendFeatures, true) => {
                            return fail("append-features on a sequence input".into())
                        }
                        (ConcatMode::AppendChannels, false) => {
                            return fail("append-channels on a flat input".into())
                        }
                        _ => {}
                    }
                    if classes.is_some() && mode == ConcatMode::AppendChannels {
                        return fail("class embeddings require append-features".into());
                    }
                    if w == 0 || classes == Some(0) {
                        return fail("condition width must be positive".into());
                    }
                    width += w;
                }
            }
        }
        let allowed = match self.role {
            Role::Encoder => concats == 0,
            Role::Decoder => concats == 1,
            Role::Discriminator => concats <= 1,
        };
        if !allowed {
            return Err(Error::Spec {
                layer: self.layers.len(),
                reason: format!("{:?} has {concats} concat-condition layers", self.role),
            });
        }
        Ok(width)
    }

    pub fn input_width(&self) -> usize {
        match self.input {
            InputKind::Features(n) | InputKind::Channels(n) => n,
        }
    }

    pub fn is_sequence(&self) -> bool {
        matches!(self.input, InputKind::Channels(_))
    }

    /// The concat-condition layer, if any.
    pub fn condition(&self) -> Option<(ConcatMode, usize, Option<usize>)> {
        self.layers.iter().find_map(|l| match *l {
            Layer::ConcatCondition {
                mode,
                width,
                classes,
            } => Some((mode, width, classes)),
            _ => None,
        })
    }

    /// Multilayer perceptron `input -> hidden... -> output` with one activation
    /// on hidden layers and another on the output layer.
    pub fn mlp(role: Role, input: usize, hidden: &[usize], output: usize, act: Activation, out_act: Activation) -> Self {
        let mut layers = Vec::new();
        let mut width = input;
        for &h in hidden {
            layers.push(Layer::Dense {
                inputs: width,
                out: h,
                activation: act,
            });
            width = h;
        }
        layers.push(Layer::Dense {
            inputs: width,
            out: output,
            activation: out_act,
        });
        Self {
            role,
            input: InputKind::Features(input),
            layers,
        }
    }

    /// Like [`NetSpec::mlp`] but appends a condition of `cond_width` features to the input.
    pub fn conditioned_mlp(
        role: Role,
        input: usize,
        cond_width: usize,
        classes: Option<usize>,
        hidden: &[usize],
        output: usize,
        act: Activation,
        out_act: Activation,
    ) -> Self {
        let mut spec = Self::mlp(role, input + cond_width, hidden, output, act, out_act);
        spec.input = InputKind::Features(input);
        spec.layers.insert(
            0,
            Layer::ConcatCondition {
                mode: ConcatMode::AppendFeatures,
                width: cond_width,
                classes,
            },
        );
        spec
    }

    /// Convolutional encoder used for multichannel ECG-like signals:
    /// six tanh convolutions with kernels 3, 5, 3, 11, 13, 3 and two batchnorms.
    pub fn ecg_encoder(role: Role, in_channels: usize, code_channels: usize) -> Self {
        let conv = |i, o, k| Layer::Conv1d {
            in_ch: i,
            out_ch: o,
            kernel: k,
            activation: Activation::Tanh,
        };
        Self {
            role,
            input: InputKind::Channels(in_channels),
            layers: vec![
                conv(in_channels, 8, 3),
                conv(8, 8, 5),
                Layer::Batchnorm1d { ch: 8 },
                conv(8, 8, 3),
                Layer::Batchnorm1d { ch: 8 },
                conv(8, 8, 11),
                conv(8, 8, 13),
                conv(8, code_channels, 3),
            ],
        }
    }

    /// Convolutional decoder over `code ++ condition` channels: five tanh
    /// convolutions with kernels 3, 13, 3, 5, 3.
    pub fn ecg_decoder(code_channels: usize, cond_channels: usize, out_channels: usize) -> Self {
        let conv = |i, o, k| Layer::Conv1d {
            in_ch: i,
            out_ch: o,
            kernel: k,
            activation: Activation::Tanh,
        };
        Self {
            role: Role::Decoder,
            input: InputKind::Channels(code_channels),
            layers: vec![
                Layer::ConcatCondition {
                    mode: ConcatMode::AppendChannels,
                    width: cond_channels,
                    classes: None,
                },
                conv(code_channels + cond_channels, 8, 3),
                conv(8, 8, 13),
                conv(8, 8, 3),
                conv(8, 8, 5),
                conv(8, out_channels, 3),
            ],
        }
    }
}

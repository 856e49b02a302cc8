use serde::{Deserialize, Serialize};

use crate::data::ImageDims;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Relu => x.max(0.0),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "elu" => Ok(Activation::Elu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    /// Unbounded scalar.
    #[default]
    Linear,
    /// `ln(1 + e^x)`, nonnegative.
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Widths of hidden dense layers after global average pooling.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub output: OutputKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Normal with variance `2 / fan_in`, zero biases.
    #[default]
    HeNormal,
    /// Normal with variance `1 / fan_in`, zero biases.
    LecunNormal,
    Zeros,
}

/// Declarative description of one network in the family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub input: ImageDims,
    pub stem: ConvSpec,
    pub blocks: Vec<BlockSpec>,
    pub head: HeadSpec,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 16 weighted layers, ELU.
    Res16e,
    /// 9 weighted layers, ELU.
    Res9e,
    /// Reduced-width 9-layer variant of `Res9e`.
    Res9er,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "res16e" => Ok(Preset::Res16e),
            "res9e" => Ok(Preset::Res9e),
            "res9er" => Ok(Preset::Res9er),
            other => Err(Error::config(format!("unknown preset `{other}`"))),
        }
    }
}

fn block(filters: usize, stride: usize) -> BlockSpec {
    BlockSpec {
        filters,
        kernel: 3,
        stride,
        activation: Activation::Elu,
    }
}

impl ArchConfig {
    /// Preset at the given input size. Layer counts match the published
    /// family; widths are chosen so the parameter counts land within a few
    /// percent of the published totals on 1-channel input.
    pub fn preset(preset: Preset, input: ImageDims, seed: u64) -> Self {
        let (name, stem, blocks, hidden) = match preset {
            Preset::Res9er => (
                "res9er",
                16,
                vec![block(16, 1), block(32, 2), block(40, 2)],
                vec![16],
            ),
            Preset::Res9e => (
                "res9e",
                32,
                vec![block(32, 1), block(64, 2), block(64, 2)],
                vec![32],
            ),
            Preset::Res16e => (
                "res16e",
                32,
                vec![
                    block(32, 1),
                    block(32, 1),
                    block(64, 2),
                    block(64, 1),
                    block(128, 2),
                    block(128, 1),
                    block(128, 1),
                ],
                vec![],
            ),
        };
        ArchConfig {
            name: Some(name.to_string()),
            input,
            stem: ConvSpec {
                filters: stem,
                kernel: 3,
                stride: 2,
            },
            blocks,
            head: HeadSpec {
                hidden,
                activation: Activation::Elu,
                output: OutputKind::Linear,
            },
            init: InitScheme::HeNormal,
            seed,
        }
    }

    /// Parses either a preset name or a JSON architecture document.
    pub fn parse(text: &str, input: ImageDims, seed: u64) -> Result<Self> {
        let trimmed = text.trim();
        if trimmed.starts_with('{') {
            let arch: ArchConfig = serde_json::from_str(trimmed)
                .map_err(|e| Error::config(format!("architecture json: {e}")))?;
            arch.validate()?;
            Ok(arch)
        } else {
            let preset: Preset = trimmed.parse()?;
            Ok(Self::preset(preset, input, seed))
        }
    }

    /// Replaces every activation in the network.
    pub fn with_activation(mut self, act: Activation) -> Self {
        for b in &mut self.blocks {
            b.activation = act;
        }
        self.head.activation = act;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.input.validate().map_err(|e| Error::config(e.to_string()))?;
        if self.blocks.is_empty() {
            return Err(Error::config("architecture needs at least one residual block"));
        }
        let convs = std::iter::once((self.stem.filters, self.stem.kernel, self.stem.stride, "stem".to_string()))
            .chain(
                self.blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| (b.filters, b.kernel, b.stride, format!("block{}", i + 1))),
            );
        let (mut h, mut w) = (self.input.height, self.input.width);
        for (filters, kernel, stride, name) in convs {
            if filters == 0 {
                return Err(Error::config(format!("{name}: filters must be >= 1")));
            }
            if kernel == 0 || kernel % 2 == 0 {
                return Err(Error::config(format!("{name}: kernel must be odd and >= 1")));
            }
            if stride == 0 {
                return Err(Error::config(format!("{name}: stride must be >= 1")));
            }
            h = conv_out(h, kernel, stride);
            w = conv_out(w, kernel, stride);
            if h == 0 || w == 0 {
                return Err(Error::config(format!("{name}: spatial size collapses to zero")));
            }
        }
        if self.head.hidden.contains(&0) {
            return Err(Error::config("dense layer widths must be >= 1"));
        }
        // Guard against absurd sizes before anything allocates.
        let count = self.param_count_checked().ok_or_else(|| Error::config("parameter count overflows"))?;
        if count > 1 << 28 {
            return Err(Error::config(format!("{count} parameters is too many")));
        }
        Ok(())
    }

    /// Closed-form parameter count. Panics only on overflow, which
    /// `validate` rules out.
    pub fn param_count(&self) -> usize {
        self.param_count_checked().expect("parameter count overflows")
    }

    fn param_count_checked(&self) -> Option<usize> {
        let conv = |cin: usize, cout: usize, k: usize| -> Option<usize> {
            k.checked_mul(k)?.checked_mul(cin)?.checked_mul(cout)?.checked_add(cout)
        };
        let dense = |din: usize, dout: usize| -> Option<usize> { din.checked_mul(dout)?.checked_add(dout) };
        let mut total = conv(self.input.channels, self.stem.filters, self.stem.kernel)?;
        let mut c = self.stem.filters;
        for b in &self.blocks {
            total = total
                .checked_add(conv(c, b.filters, b.kernel)?)?
                .checked_add(conv(b.filters, b.filters, b.kernel)?)?;
            if needs_projection(c, b) {
                total = total.checked_add(conv(c, b.filters, 1)?)?;
            }
            c = b.filters;
        }
        for &h in &self.head.hidden {
            total = total.checked_add(dense(c, h)?)?;
            c = h;
        }
        total.checked_add(dense(c, 1)?)
    }

    /// Ids of the convolutional stages, in order.
    pub fn stage_ids(&self) -> Vec<String> {
        std::iter::once("stem".to_string())
            .chain((1..=self.blocks.len()).map(|i| format!("block{i}")))
            .collect()
    }

    /// Ids of the dense layers, in order.
    pub fn dense_ids(&self) -> Vec<String> {
        (1..=self.head.hidden.len())
            .map(|i| format!("dense{i}"))
            .chain(std::iter::once("output".to_string()))
            .collect()
    }
}

pub(crate) fn needs_projection(cin: usize, b: &BlockSpec) -> bool {
    cin != b.filters || b.stride != 1
}

/// Output side of a same-padded convolution.
pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    if size + 2 * pad < kernel {
        0
    } else {
        (size + 2 * pad - kernel) / stride + 1
    }
}

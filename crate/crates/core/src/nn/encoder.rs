use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Buffer, Conv2d, Mode, Module};
use crate::tensor::{self, Element, Parameter, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    PlainConv,
    Residual,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub stage_widths: Vec<usize>,
    pub block_kind: BlockKind,
    pub embedding_dim: usize,
}

impl EncoderConfig {
    /// 3x32x32 inputs, four stages of width 32..256.
    pub fn desk() -> Self {
        Self {
            input_channels: 3,
            input_size: 32,
            stage_widths: vec![32, 64, 128, 256],
            block_kind: BlockKind::PlainConv,
            embedding_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.input_channels == 0 || self.input_size == 0 {
            return Err("encoder: input_channels and input_size must be positive".into());
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err("encoder: stage_widths must be a nonempty list of positive widths".into());
        }
        if self.embedding_dim == 0 {
            return Err("encoder: embedding_dim must be positive".into());
        }
        // The embedding is the globally pooled output of the last stage.
        if self.stage_widths.last() != Some(&self.embedding_dim) {
            return Err(format!(
                "encoder: embedding_dim {} must equal the last stage width {}",
                self.embedding_dim,
                self.stage_widths.last().unwrap()
            ));
        }
        Ok(())
    }
}

/// One stage body: either conv-bn-relu or a two-conv residual block.
#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Block<E: Element> {
    Plain {
        conv: Conv2d<E>,
        bn: BatchNorm<E>,
    },
    Residual {
        conv1: Conv2d<E>,
        bn1: BatchNorm<E>,
        conv2: Conv2d<E>,
        bn2: BatchNorm<E>,
        /// 1x1 projection when the width changes.
        shortcut: Option<(Conv2d<E>, BatchNorm<E>)>,
    },
}

impl<E: Element> Block<E> {
    fn new<R: Rng + ?Sized>(
        name: &str,
        kind: BlockKind,
        cin: usize,
        cout: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        match kind {
            BlockKind::PlainConv => Block::Plain {
                conv: Conv2d::new(&format!("{name}.conv"), cin, cout, 3, 1, 1, trainable, rng),
                bn: BatchNorm::new(&format!("{name}.bn"), cout, trainable),
            },
            BlockKind::Residual => Block::Residual {
                conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, 1, 1, trainable, rng),
                bn1: BatchNorm::new(&format!("{name}.bn1"), cout, trainable),
                conv2: Conv2d::new(
                    &format!("{name}.conv2"),
                    cout,
                    cout,
                    3,
                    1,
                    1,
                    trainable,
                    rng,
                ),
                bn2: BatchNorm::new(&format!("{name}.bn2"), cout, trainable),
                shortcut: (cin != cout).then(|| {
                    (
                        Conv2d::new(
                            &format!("{name}.shortcut.conv"),
                            cin,
                            cout,
                            1,
                            1,
                            0,
                            trainable,
                            rng,
                        ),
                        BatchNorm::new(&format!("{name}.shortcut.bn"), cout, trainable),
                    )
                }),
            },
        }
    }

    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        match self {
            Block::Plain { conv, bn } => Ok(tensor::relu(&bn.forward(&conv.forward(x)?, mode)?)),
            Block::Residual {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                let h = tensor::relu(&bn1.forward(&conv1.forward(x)?, mode)?);
                let h = bn2.forward(&conv2.forward(&h)?, mode)?;
                let skip = match shortcut {
                    Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
                    None => x.clone(),
                };
                Ok(tensor::relu(&tensor::add(&h, &skip)?))
            }
        }
    }
}

impl<E: Element> Module<E> for Block<E> {
    fn parameters(&self) -> Vec<&Parameter<E>> {
        match self {
            Block::Plain { conv, bn } => [conv.parameters(), bn.parameters()].concat(),
            Block::Residual {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                let mut p = [
                    conv1.parameters(),
                    bn1.parameters(),
                    conv2.parameters(),
                    bn2.parameters(),
                ]
                .concat();
                if let Some((c, b)) = shortcut {
                    p.extend(c.parameters());
                    p.extend(b.parameters());
                }
                p
            }
        }
    }

    fn buffers(&self) -> Vec<&Buffer<E>> {
        match self {
            Block::Plain { bn, .. } => bn.buffers(),
            Block::Residual {
                bn1, bn2, shortcut, ..
            } => {
                let mut b = [bn1.buffers(), bn2.buffers()].concat();
                if let Some((_, bn)) = shortcut {
                    b.extend(bn.buffers());
                }
                b
            }
        }
    }
}

/// Convolutional embedding network: per stage a block then 2x2 max pooling
/// (while the feature map is at least 2x2), finished by global average pooling.
#[derive(Debug)]
pub struct Encoder<E: Element> {
    pub config: EncoderConfig,
    pub blocks: Vec<Block<E>>,
}

impl<E: Element> Encoder<E> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        config: &EncoderConfig,
        trainable: bool,
        rng: &mut R,
    ) -> std::result::Result<Self, String> {
        config.validate()?;
        let mut cin = config.input_channels;
        let mut blocks = Vec::with_capacity(config.stage_widths.len());
        for (i, &w) in config.stage_widths.iter().enumerate() {
            blocks.push(Block::new(
                &format!("{name}.stage{i}"),
                config.block_kind,
                cin,
                w,
                trainable,
                rng,
            ));
            cin = w;
        }
        Ok(Self {
            config: config.clone(),
            blocks,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// `[B, C, S, S] -> [B, embedding_dim]`.
    pub fn encode(&self, batch: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        let c = &self.config;
        let expected = [c.input_channels, c.input_size, c.input_size];
        if batch.rank() != 4 || batch.shape()[1..] != expected {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                detail: format!(
                    "batch {:?}, expected [_, {}, {}, {}]",
                    batch.shape(),
                    expected[0],
                    expected[1],
                    expected[2]
                ),
            });
        }
        let mut h = batch.clone();
        for block in &self.blocks {
            h = block.forward(&h, mode)?;
            if h.shape()[2] >= 2 && h.shape()[3] >= 2 {
                h = tensor::max_pool2d(&h, 2, 2)?;
            }
        }
        tensor::global_avg_pool(&h)
    }
}

impl<E: Element> Module<E> for Encoder<E> {
    fn parameters(&self) -> Vec<&Parameter<E>> {
        self.blocks.iter().flat_map(|b| b.parameters()).collect()
    }

    fn buffers(&self) -> Vec<&Buffer<E>> {
        self.blocks.iter().flat_map(|b| b.buffers()).collect()
    }
}

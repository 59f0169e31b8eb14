//! Architecture descriptions: a JSON block list that the FLOPs engine, the
//! trainable network and the CLI all consume.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// conv(k, stride) → BN → ReLU → conv(k) → BN, plus identity or 1×1 shortcut.
    Residual,
    /// 1×1 expand → BN → ReLU6 → depthwise(k, stride) → BN → ReLU6 → 1×1 project → BN.
    InvertedResidual,
    /// Two k×k convolutions without a skip connection.
    PlainConv,
}

/// One block record as written in a description file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub kind: BlockKind,
    pub out_channels: usize,
    pub inner_channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "three")]
    pub kernel: usize,
}

fn one() -> usize {
    1
}
fn three() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemRecord {
    pub channels: usize,
    #[serde(default = "three")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Stride of a max-pool after the stem (1 = none). Affects spatial size only.
    #[serde(default = "one")]
    pub pool_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchDescription {
    pub name: String,
    pub in_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub stem: StemRecord,
    pub blocks: Vec<BlockRecord>,
}

/// Fully resolved block metadata (channel counts and spatial sizes known).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    /// 1-based position.
    pub index: usize,
    pub kind: BlockKind,
    pub c_in: usize,
    pub c_out: usize,
    pub inner: usize,
    pub stride: usize,
    pub kernel: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl BlockSpec {
    pub fn has_projection_shortcut(&self) -> bool {
        self.kind == BlockKind::Residual && (self.stride != 1 || self.c_in != self.c_out)
    }

    pub fn has_identity_add(&self) -> bool {
        match self.kind {
            BlockKind::Residual => !self.has_projection_shortcut(),
            BlockKind::InvertedResidual => self.stride == 1 && self.c_in == self.c_out,
            BlockKind::PlainConv => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub in_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub stem: StemRecord,
    /// Spatial size after the stem (and its pool).
    pub stem_out: usize,
    pub blocks: Vec<BlockSpec>,
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    (size + 2 * (kernel / 2) - kernel) / stride + 1
}

impl ArchDescription {
    pub fn resolve(&self) -> Result<Architecture> {
        let mut problems = Vec::new();
        if self.in_channels == 0 || self.num_classes == 0 || self.input_size == 0 {
            problems.push("in_channels, input_size and num_classes must be >= 1".to_string());
        }
        if self.stem.channels == 0 || self.stem.kernel == 0 || self.stem.kernel.is_multiple_of(2) {
            problems.push("stem needs >= 1 channel and an odd kernel".to_string());
        }
        if self.stem.stride == 0 || self.stem.pool_stride == 0 {
            problems.push("stem strides must be >= 1".to_string());
        }
        if self.blocks.is_empty() {
            problems.push("at least one block is required".to_string());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.inner_channels == 0 || b.out_channels == 0 {
                problems.push(format!("block {}: channel counts must be >= 1", i + 1));
            }
            if !matches!(b.stride, 1 | 2) {
                problems.push(format!("block {}: stride {} not in {{1, 2}}", i + 1, b.stride));
            }
            if b.kernel == 0 || b.kernel % 2 == 0 {
                problems.push(format!("block {}: kernel {} must be odd", i + 1, b.kernel));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }

        let mut size = conv_out(self.input_size, self.stem.kernel, self.stem.stride);
        if self.stem.pool_stride > 1 {
            size = conv_out(size, 3, self.stem.pool_stride);
        }
        let stem_out = size;
        let mut c_in = self.stem.channels;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let out = conv_out(size, b.kernel, b.stride);
            blocks.push(BlockSpec {
                index: i + 1,
                kind: b.kind,
                c_in,
                c_out: b.out_channels,
                inner: b.inner_channels,
                stride: b.stride,
                kernel: b.kernel,
                in_h: size,
                in_w: size,
                out_h: out,
                out_w: out,
            });
            c_in = b.out_channels;
            size = out;
        }
        Ok(Architecture {
            name: self.name.clone(),
            in_channels: self.in_channels,
            input_size: self.input_size,
            num_classes: self.num_classes,
            stem: self.stem.clone(),
            stem_out,
            blocks,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("architecture file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "resnet8" => cifar_resnet("resnet8", 1, [16, 32, 64]),
            "resnet8-tiny" => ArchDescription {
                input_size: 16,
                ..cifar_resnet("resnet8-tiny", 1, [8, 16, 32])
            },
            "resnet20" => cifar_resnet("resnet20", 3, [16, 32, 64]),
            "resnet56" => cifar_resnet("resnet56", 9, [16, 32, 64]),
            "resnet56-lite" => cifar_resnet("resnet56-lite", 9, [8, 16, 32]),
            "resnet18" => imagenet_resnet("resnet18", [2, 2, 2, 2]),
            "resnet34" => imagenet_resnet("resnet34", [3, 4, 6, 3]),
            "mobilenetv2-lite" => mobilenetv2_lite(),
            _ => return None,
        })
    }

    pub const PRESETS: [&'static str; 8] = [
        "resnet8",
        "resnet8-tiny",
        "resnet20",
        "resnet56",
        "resnet56-lite",
        "resnet18",
        "resnet34",
        "mobilenetv2-lite",
    ];
}

fn residual(out: usize, stride: usize) -> BlockRecord {
    BlockRecord {
        kind: BlockKind::Residual,
        out_channels: out,
        inner_channels: out,
        stride,
        kernel: 3,
    }
}

fn cifar_resnet(name: &str, per_stage: usize, widths: [usize; 3]) -> ArchDescription {
    let mut blocks = Vec::new();
    for (s, &w) in widths.iter().enumerate() {
        for i in 0..per_stage {
            blocks.push(residual(w, if s > 0 && i == 0 { 2 } else { 1 }));
        }
    }
    ArchDescription {
        name: name.into(),
        in_channels: 3,
        input_size: 32,
        num_classes: 10,
        stem: StemRecord {
            channels: widths[0],
            kernel: 3,
            stride: 1,
            pool_stride: 1,
        },
        blocks,
    }
}

fn imagenet_resnet(name: &str, layout: [usize; 4]) -> ArchDescription {
    let mut blocks = Vec::new();
    for (s, (&n, w)) in layout.iter().zip([64, 128, 256, 512]).enumerate() {
        for i in 0..n {
            blocks.push(residual(w, if s > 0 && i == 0 { 2 } else { 1 }));
        }
    }
    ArchDescription {
        name: name.into(),
        in_channels: 3,
        input_size: 224,
        num_classes: 1000,
        stem: StemRecord {
            channels: 64,
            kernel: 7,
            stride: 2,
            pool_stride: 2,
        },
        blocks,
    }
}

/// A narrow, shallow inverted-residual network for 32×32 inputs.
fn mobilenetv2_lite() -> ArchDescription {
    // (expansion, out, repeats, first stride)
    let table = [(1, 8, 1, 1), (6, 12, 2, 1), (6, 16, 2, 2), (6, 32, 2, 2), (6, 48, 1, 1)];
    let mut blocks = Vec::new();
    let mut c_in = 16;
    for (t, c, n, s) in table {
        for i in 0..n {
            blocks.push(BlockRecord {
                kind: BlockKind::InvertedResidual,
                out_channels: c,
                inner_channels: c_in * t,
                stride: if i == 0 { s } else { 1 },
                kernel: 3,
            });
            c_in = c;
        }
    }
    ArchDescription {
        name: "mobilenetv2-lite".into(),
        in_channels: 3,
        input_size: 32,
        num_classes: 10,
        stem: StemRecord {
            channels: 16,
            kernel: 3,
            stride: 1,
            pool_stride: 1,
        },
        blocks,
    }
}

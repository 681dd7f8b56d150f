use std::path::Path;

use crate::config::{KvConfig, KvWriter};
use crate::error::{Error, Result};

/// Architecture hyperparameters. Key names in config files match the field
/// names exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub window_length: usize,
    pub num_classes: usize,
    pub cnn_start_filters: usize,
    pub cnn_kernel_length: usize,
    pub num_residual_blocks: usize,
    /// Hidden size per LSTM direction.
    pub lstm_hidden: usize,
    pub attention_hidden: usize,
    pub dropout_rate: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window_length: 50,
            num_classes: 5,
            cnn_start_filters: 32,
            cnn_kernel_length: 8,
            num_residual_blocks: 6,
            lstm_hidden: 64,
            attention_hidden: 64,
            dropout_rate: 0.5,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

/// Shape of one residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub fn needs_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("window_length", self.window_length),
            ("num_classes", self.num_classes),
            ("cnn_start_filters", self.cnn_start_filters),
            ("cnn_kernel_length", self.cnn_kernel_length),
            ("num_residual_blocks", self.num_residual_blocks),
            ("lstm_hidden", self.lstm_hidden),
            ("attention_hidden", self.attention_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config("bn_momentum must lie in (0, 1]"));
        }
        if self.bn_eps <= 0.0 {
            return Err(Error::config("bn_eps must be positive"));
        }
        let min_w = 1usize << self.num_downsampling_blocks();
        if self.window_length < min_w.max(4) {
            return Err(Error::config(format!(
                "window_length {} too short for the downsampling chain (needs >= {})",
                self.window_length,
                min_w.max(4)
            )));
        }
        Ok(())
    }

    /// Blocks 1 and 2 keep full resolution; from block 3 on, every second
    /// block (4, 6, ...) halves the length and doubles the filters.
    pub fn block_layout(&self) -> Vec<BlockSpec> {
        let mut specs = Vec::with_capacity(self.num_residual_blocks);
        let mut channels = 1;
        let mut filters = self.cnn_start_filters;
        for i in 0..self.num_residual_blocks {
            let downsample = i >= 2 && (i - 2) % 2 == 1;
            if downsample {
                filters *= 2;
            }
            specs.push(BlockSpec { in_channels: channels, out_channels: filters, stride: if downsample { 2 } else { 1 } });
            channels = filters;
        }
        specs
    }

    pub fn num_downsampling_blocks(&self) -> usize {
        self.block_layout().iter().filter(|b| b.stride > 1).count()
    }

    /// Same-padding split for the even-or-odd kernel: `((K−1)/2, K/2)`.
    pub fn padding(&self) -> (usize, usize) {
        ((self.cnn_kernel_length - 1) / 2, self.cnn_kernel_length / 2)
    }

    /// Channel count `F` of the beat CNN output.
    pub fn feature_dim(&self) -> usize {
        self.block_layout().last().map_or(1, |b| b.out_channels)
    }

    /// Sequence length `W̄` of the beat CNN output.
    pub fn reduced_length(&self) -> usize {
        let (l, r) = self.padding();
        let k = self.cnn_kernel_length;
        self.block_layout()
            .iter()
            .fold(self.window_length, |len, b| (len + l + r - k) / b.stride + 1)
    }

    /// Width `2H` of a channel encoding.
    pub fn encoding_dim(&self) -> usize {
        2 * self.lstm_hidden
    }

    /// Read every key this config owns from `kv`, keeping defaults for
    /// absent keys.
    pub fn take_from(kv: &mut KvConfig) -> Result<Self> {
        let mut c = Self::default();
        kv.take("window_length", &mut c.window_length)?;
        kv.take("num_classes", &mut c.num_classes)?;
        kv.take("cnn_start_filters", &mut c.cnn_start_filters)?;
        kv.take("cnn_kernel_length", &mut c.cnn_kernel_length)?;
        kv.take("num_residual_blocks", &mut c.num_residual_blocks)?;
        kv.take("lstm_hidden", &mut c.lstm_hidden)?;
        kv.take("attention_hidden", &mut c.attention_hidden)?;
        kv.take("dropout_rate", &mut c.dropout_rate)?;
        kv.take("bn_momentum", &mut c.bn_momentum)?;
        kv.take("bn_eps", &mut c.bn_eps)?;
        c.validate()?;
        Ok(c)
    }

    pub fn write_to(&self, w: &mut KvWriter) {
        w.section("model")
            .kv("window_length", self.window_length)
            .kv("num_classes", self.num_classes)
            .kv("cnn_start_filters", self.cnn_start_filters)
            .kv("cnn_kernel_length", self.cnn_kernel_length)
            .kv("num_residual_blocks", self.num_residual_blocks)
            .kv("lstm_hidden", self.lstm_hidden)
            .kv("attention_hidden", self.attention_hidden)
            .kv("dropout_rate", self.dropout_rate)
            .kv("bn_momentum", self.bn_momentum)
            .kv("bn_eps", self.bn_eps);
    }

    pub fn to_kv_string(&self) -> String {
        let mut w = KvWriter::new();
        self.write_to(&mut w);
        w.finish()
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut kv = KvConfig::parse(text)?;
        let c = Self::take_from(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }
}

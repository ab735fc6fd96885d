use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether the channel codec carries the CSI-token adaptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Hana,
    NoAdaptor,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_tx: usize,
    pub n_rx: usize,
    /// complex symbols per antenna
    pub d: usize,
    /// adaptor token width
    pub d_prime: usize,
    pub n_blocks: usize,
    pub heads: usize,
    /// hidden width of the adaptor MLP as a multiple of `d_prime`
    pub mlp_ratio: usize,
    /// image channels, height, width
    pub image: [usize; 3],
    /// output widths of the downsampling stages; the last is `c'`
    pub stage_channels: Vec<usize>,
    pub snr_hidden: usize,
    pub variant: Variant,
    /// GELU after the per-antenna sub-codec projections
    pub channel_activation: bool,
    /// expected `n_tx·d / (c·h·w)`, checked by `validate`
    pub compression_ratio: Option<f64>,
}

impl Default for ModelConfig {
    /// 16×16 antennas, 32×32 RGB, compression ratio 1/12.
    fn default() -> Self {
        Self {
            n_tx: 16,
            n_rx: 16,
            d: 16,
            d_prime: 64,
            n_blocks: 6,
            heads: 4,
            mlp_ratio: 2,
            image: [3, 32, 32],
            stage_channels: vec![32, 64, 64],
            snr_hidden: 16,
            variant: Variant::Hana,
            channel_activation: true,
            compression_ratio: Some(1.0 / 12.0),
        }
    }
}

impl ModelConfig {
    /// Miniature configuration used for exhaustive finite-difference checks.
    pub fn miniature() -> Self {
        Self {
            n_tx: 4,
            n_rx: 4,
            d: 2,
            d_prime: 8,
            n_blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            image: [3, 8, 8],
            stage_channels: vec![4, 8],
            snr_hidden: 4,
            variant: Variant::Hana,
            channel_activation: true,
            compression_ratio: None,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn semantic_dims(&self) -> [usize; 3] {
        let f = 1usize << self.stage_channels.len();
        [
            *self.stage_channels.last().expect("validated"),
            self.image[1] / f,
            self.image[2] / f,
        ]
    }

    pub fn semantic_len(&self) -> usize {
        self.semantic_dims().iter().product()
    }

    pub fn image_len(&self) -> usize {
        self.image.iter().product()
    }

    pub fn compression_ratio(&self) -> f64 {
        (self.n_tx * self.d) as f64 / self.image_len() as f64
    }

    /// Streams that can carry symbols.
    pub fn active_streams(&self) -> usize {
        self.n_tx.min(self.n_rx)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [
            self.n_tx,
            self.n_rx,
            self.d,
            self.d_prime,
            self.n_blocks.max(1),
            self.heads,
            self.mlp_ratio,
            self.snr_hidden,
        ]
        .contains(&0)
        {
            return bad("model dimensions must be positive".into());
        }
        if self.image.contains(&0) {
            return bad(format!("image dims {:?} must be positive", self.image));
        }
        if !self.d_prime.is_multiple_of(self.heads) {
            return bad(format!(
                "d_prime {} not divisible by heads {}",
                self.d_prime, self.heads
            ));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad("stage_channels must be non-empty and positive".into());
        }
        let f = 1usize << self.stage_channels.len();
        if !self.image[1].is_multiple_of(f) || !self.image[2].is_multiple_of(f) {
            return bad(format!(
                "image {}x{} not divisible by 2^{} downsampling",
                self.image[1],
                self.image[2],
                self.stage_channels.len()
            ));
        }
        if let Some(cr) = self.compression_ratio {
            if (self.compression_ratio() - cr).abs() > 1e-12 {
                return bad(format!(
                    "compression ratio n_tx*d/(c*h*w) = {} does not match target {cr}",
                    self.compression_ratio()
                ));
            }
        }
        Ok(())
    }
}

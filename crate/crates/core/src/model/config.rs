use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Classify from the cls token.
    Cls,
    /// Average over patch tokens (the cls token, if any, is excluded).
    Mean,
}

/// Architectural hyperparameters. Head counts and MLP widths are per layer
/// so that structurally pruned models are described by the same type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub num_heads: Vec<usize>,
    pub mlp_hidden: Vec<usize>,
    pub num_classes: usize,
    pub pooling: Pooling,
    pub use_cls_token: bool,
}

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        image_size: usize,
        channels: usize,
        patch_size: usize,
        embed_dim: usize,
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        mlp_hidden: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            image_size,
            channels,
            patch_size,
            embed_dim,
            head_dim,
            num_heads: vec![num_heads; num_layers],
            mlp_hidden: vec![mlp_hidden; num_layers],
            num_classes,
            pooling: Pooling::Cls,
            use_cls_token: true,
        }
    }

    /// ViT-Base/16 at 224 px with a 1000-way head.
    pub fn vit_base() -> Self {
        Self::uniform(224, 3, 16, 768, 12, 12, 64, 3072, 1000)
    }

    /// Desk-scale model used by the test suite and the default experiment.
    /// Keeps the cls token (attention maps need it) but classifies from the
    /// mean patch token.
    pub fn toy() -> Self {
        Self::uniform(32, 3, 8, 64, 2, 4, 16, 128, 7).with_pooling(Pooling::Mean)
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn with_cls_token(mut self, flag: bool) -> Self {
        self.use_cls_token = flag;
        self
    }

    pub fn num_layers(&self) -> usize {
        self.num_heads.len()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_cls_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Width of the concatenated heads of `layer`.
    pub fn attn_width(&self, layer: usize) -> usize {
        self.num_heads[layer] * self.head_dim
    }

    pub fn total_heads(&self) -> usize {
        self.num_heads.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.patch_size == 0 || self.image_size == 0 {
            return bad("image_size and patch_size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.head_dim == 0 {
            return bad("channels, embed_dim and head_dim must be positive".into());
        }
        if self.num_heads.is_empty() {
            return bad("at least one layer is required".into());
        }
        if self.num_heads.len() != self.mlp_hidden.len() {
            return bad(format!(
                "{} head counts but {} mlp widths",
                self.num_heads.len(),
                self.mlp_hidden.len()
            ));
        }
        if let Some(l) = self.num_heads.iter().position(|&h| h == 0) {
            return bad(format!("layer {l} has zero heads"));
        }
        if let Some(l) = self.mlp_hidden.iter().position(|&m| m == 0) {
            return bad(format!("layer {l} has zero mlp channels"));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.pooling == Pooling::Cls && !self.use_cls_token {
            return bad("cls pooling requires use_cls_token".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_token_count() {
        let c = ModelConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.num_tokens(), 17);
        assert_eq!(c.clone().with_cls_token(false).with_pooling(Pooling::Mean).num_tokens(), 16);
    }

    #[test]
    fn vit_base_geometry() {
        let c = ModelConfig::vit_base();
        c.validate().unwrap();
        assert_eq!(c.num_tokens(), 197);
        assert_eq!(c.total_heads(), 144);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::toy();
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.num_heads[1] = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.num_classes = 0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::toy().with_pooling(Pooling::Cls).with_cls_token(false).validate().is_err());
    }
}

//! Closed-form parameter and multiply-accumulate counts.

use super::ModelConfig;

/// Scalar parameters defined by `config`, including the cls token,
/// positional embeddings, all biases and the classifier head.
pub fn param_count(config: &ModelConfig) -> u64 {
    let d = config.embed_dim as u64;
    let k = config.num_classes as u64;
    let mut total = d * config.patch_dim() as u64 + d;
    total += config.num_tokens() as u64 * d;
    if config.use_cls_token {
        total += d;
    }
    for l in 0..config.num_layers() {
        let a = config.attn_width(l) as u64;
        let m = config.mlp_hidden[l] as u64;
        total += 4 * d; // ln1 + ln2
        total += 3 * a * d + 3 * a;
        total += d * a + d;
        total += m * d + m;
        total += d * m + d;
    }
    total + 2 * d + k * d + k
}

/// Per-image multiply-accumulates of one forward pass: patch embedding,
/// every block's projections and attention products, and the head.
/// Normalization, softmax and activations are not counted.
pub fn macs_count(config: &ModelConfig) -> u64 {
    let d = config.embed_dim as u64;
    let mut total = config.num_patches() as u64 * config.patch_dim() as u64 * d;
    for l in 0..config.num_layers() {
        total += layer_macs(config, l);
    }
    total + d * config.num_classes as u64
}

pub(crate) fn layer_macs(config: &ModelConfig, layer: usize) -> u64 {
    let d = config.embed_dim as u64;
    let n = config.num_tokens() as u64;
    let a = config.attn_width(layer) as u64;
    let m = config.mlp_hidden[layer] as u64;
    n * d * 3 * a // qkv
        + 2 * n * n * a // scores and attention·V
        + n * a * d // output projection
        + 2 * n * d * m // fc1 + fc2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransformerModel;

    #[test]
    fn toy_params_by_component() {
        let c = ModelConfig::toy();
        // patch 64·192+64, pos 17·64, cls 64
        let embed = 64 * 192 + 64 + 17 * 64 + 64;
        // ln 4·64, qkv 192·64+192, out 64·64+64, fc1 128·64+128, fc2 64·128+64
        let block = 4 * 64 + 192 * 64 + 192 + 64 * 64 + 64 + 128 * 64 + 128 + 64 * 128 + 64;
        let tail = 2 * 64 + 7 * 64 + 7;
        assert_eq!(param_count(&c), (embed + 2 * block + tail) as u64);
        let m = TransformerModel::init(c, 0).unwrap();
        assert_eq!(m.num_parameters() as u64, param_count(m.config()));
    }

    #[test]
    fn layer_term_is_linear_in_depth() {
        let c = ModelConfig::toy();
        let mut deep = c.clone();
        deep.num_heads = vec![4; 4];
        deep.mlp_hidden = vec![128; 4];
        let fixed = macs_count(&c) - 2 * layer_macs(&c, 0);
        assert_eq!(macs_count(&deep) - fixed, 2 * (macs_count(&c) - fixed));
    }

    #[test]
    fn vit_base_param_count_exact() {
        assert_eq!(param_count(&ModelConfig::vit_base()), 86_567_656);
    }
}

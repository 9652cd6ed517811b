//! ViT-family encoder: patch embedding, learned positional embeddings,
//! pre-norm attention/MLP blocks and a pooled linear classifier.

mod accounting;
mod checkpoint;
mod config;

pub use accounting::{macs_count, param_count};
pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint};
pub use config::{ModelConfig, Pooling};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::LAYER_NORM_EPS;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    PatchEmbed,
    PosEmbed,
    Cls,
    Ln1,
    Qkv,
    AttnOut,
    Ln2,
    MlpFc1,
    MlpFc2,
    FinalLn,
    Head,
}

impl Component {
    const ALL: [Component; 11] = [
        Component::PatchEmbed,
        Component::PosEmbed,
        Component::Cls,
        Component::Ln1,
        Component::Qkv,
        Component::AttnOut,
        Component::Ln2,
        Component::MlpFc1,
        Component::MlpFc2,
        Component::FinalLn,
        Component::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::PatchEmbed => "patch_embed",
            Component::PosEmbed => "pos_embed",
            Component::Cls => "cls",
            Component::Ln1 => "ln1",
            Component::Qkv => "qkv",
            Component::AttnOut => "attn_out",
            Component::Ln2 => "ln2",
            Component::MlpFc1 => "mlp_fc1",
            Component::MlpFc2 => "mlp_fc2",
            Component::FinalLn => "final_ln",
            Component::Head => "head",
        }
    }

    pub fn is_block(self) -> bool {
        matches!(
            self,
            Component::Ln1
                | Component::Qkv
                | Component::AttnOut
                | Component::Ln2
                | Component::MlpFc1
                | Component::MlpFc2
        )
    }
}

/// Address of one parameter tensor: (layer, component, tensor name).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: Option<usize>,
    pub component: Component,
    pub name: String,
}

impl ParamKey {
    pub fn global(component: Component, name: &str) -> Self {
        Self {
            layer: None,
            component,
            name: name.to_string(),
        }
    }

    pub fn block(layer: usize, component: Component, name: &str) -> Self {
        Self {
            layer: Some(layer),
            component,
            name: name.to_string(),
        }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "blocks.{l}.{}.{}", self.component.as_str(), self.name),
            None => write!(f, "{}.{}", self.component.as_str(), self.name),
        }
    }
}

impl FromStr for ParamKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownParameter(s.to_string());
        let parts: Vec<&str> = s.split('.').collect();
        let (layer, comp, name) = match parts.as_slice() {
            ["blocks", l, c, n] => (Some(l.parse().map_err(|_| unknown())?), *c, *n),
            [c, n] => (None, *c, *n),
            _ => return Err(unknown()),
        };
        let component = Component::ALL
            .into_iter()
            .find(|c| c.as_str() == comp)
            .ok_or_else(unknown)?;
        if component.is_block() != layer.is_some() {
            return Err(unknown());
        }
        Ok(ParamKey {
            layer,
            component,
            name: name.to_string(),
        })
    }
}

impl Serialize for ParamKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParamKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Every parameter the architecture defines, with its shape.
pub fn parameter_schema(config: &ModelConfig) -> BTreeMap<ParamKey, Vec<usize>> {
    use Component::*;
    let d = config.embed_dim;
    let p = config.patch_size;
    let mut s = BTreeMap::new();
    s.insert(
        ParamKey::global(PatchEmbed, "weight"),
        vec![d, config.channels, p, p],
    );
    s.insert(ParamKey::global(PatchEmbed, "bias"), vec![d]);
    s.insert(ParamKey::global(PosEmbed, "weight"), vec![config.num_tokens(), d]);
    if config.use_cls_token {
        s.insert(ParamKey::global(Cls, "token"), vec![1, d]);
    }
    for l in 0..config.num_layers() {
        let a = config.attn_width(l);
        let m = config.mlp_hidden[l];
        for ln in [Ln1, Ln2] {
            s.insert(ParamKey::block(l, ln, "gamma"), vec![d]);
            s.insert(ParamKey::block(l, ln, "beta"), vec![d]);
        }
        s.insert(ParamKey::block(l, Qkv, "weight"), vec![3 * a, d]);
        s.insert(ParamKey::block(l, Qkv, "bias"), vec![3 * a]);
        s.insert(ParamKey::block(l, AttnOut, "weight"), vec![d, a]);
        s.insert(ParamKey::block(l, AttnOut, "bias"), vec![d]);
        s.insert(ParamKey::block(l, MlpFc1, "weight"), vec![m, d]);
        s.insert(ParamKey::block(l, MlpFc1, "bias"), vec![m]);
        s.insert(ParamKey::block(l, MlpFc2, "weight"), vec![d, m]);
        s.insert(ParamKey::block(l, MlpFc2, "bias"), vec![d]);
    }
    s.insert(ParamKey::global(FinalLn, "gamma"), vec![d]);
    s.insert(ParamKey::global(FinalLn, "beta"), vec![d]);
    s.insert(ParamKey::global(Head, "weight"), vec![config.num_classes, d]);
    s.insert(ParamKey::global(Head, "bias"), vec![config.num_classes]);
    s
}

pub type ParamStore = BTreeMap<ParamKey, Tensor>;
pub type ParamVars = BTreeMap<ParamKey, Var>;

/// Post-softmax attention weights, one `[batch, heads, tokens, tokens]`
/// tensor per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Tensor>,
}

impl AttentionRecord {
    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |t| t.shape()[0])
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self, layer: usize) -> usize {
        self.layers[layer].shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.layers.first().map_or(0, |t| t.shape()[2])
    }

    /// Row-major `tokens × tokens` matrix for one image and head.
    pub fn matrix(&self, layer: usize, image: usize, head: usize) -> &[f64] {
        let t = &self.layers[layer];
        let (h, n) = (t.shape()[1], t.shape()[2]);
        let start = (image * h + head) * n * n;
        &t.data()[start..start + n * n]
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub attention: Option<AttentionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    params: ParamStore,
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl TransformerModel {
    /// Fresh model; weights ~ truncated normal (σ = 0.02, cut at 2σ),
    /// biases zero, layer-norm scales one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let h0 = config.num_heads[0];
        let m0 = config.mlp_hidden[0];
        if config.num_heads.iter().any(|&h| h != h0) || config.mlp_hidden.iter().any(|&m| m != m0) {
            return Err(Error::InvalidConfig("widths must be uniform at initialization".into()));
        }
        if h0 * config.head_dim != config.embed_dim {
            return Err(Error::InvalidConfig(format!(
                "heads·head_dim = {} must equal embed_dim {} at initialization",
                h0 * config.head_dim,
                config.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (key, shape) in parameter_schema(&config) {
            let t = match key.name.as_str() {
                "bias" | "beta" => Tensor::zeros(&shape),
                "gamma" => Tensor::ones(&shape),
                _ => Tensor::from_fn(&shape, |_| truncated_normal(&mut rng, 0.02)),
            };
            params.insert(key, t);
        }
        Ok(Self { config, params })
    }

    /// Assembles a model from an explicit store; the store must match the
    /// config's schema exactly.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let schema = parameter_schema(&config);
        for (key, t) in &params {
            match schema.get(key) {
                None => return Err(Error::UnknownParameter(key.to_string())),
                Some(shape) if shape.as_slice() != t.shape() => {
                    return Err(Error::ShapeMismatch {
                        op: "from_parts",
                        lhs: shape.clone(),
                        rhs: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(missing) = schema.keys().find(|k| !params.contains_key(k)) {
            return Err(Error::InvalidConfig(format!("missing parameter {missing}")));
        }
        Ok(Self { config, params })
    }

    #[cfg(test)]
    pub(crate) fn from_parts_unchecked(config: ModelConfig, params: ParamStore) -> Self {
        Self { config, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param(&self, key: &ParamKey) -> Result<&Tensor> {
        self.params
            .get(key)
            .ok_or_else(|| Error::UnknownParameter(key.to_string()))
    }

    pub fn param_mut(&mut self, key: &ParamKey) -> Result<&mut Tensor> {
        self.params
            .get_mut(key)
            .ok_or_else(|| Error::UnknownParameter(key.to_string()))
    }

    /// Number of stored scalars.
    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on `graph`; keys accepted by `trainable`
    /// require grad.
    pub fn bind(&self, graph: &mut Graph, trainable: impl Fn(&ParamKey) -> bool) -> ParamVars {
        self.params
            .iter()
            .map(|(k, t)| {
                let v = if trainable(k) {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect()
    }

    pub fn check_images(&self, images: &Tensor) -> Result<()> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != c.channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![0, c.channels, c.image_size, c.image_size],
                rhs: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Builds the forward computation on `graph`. Returns the logits and,
    /// per layer, the post-softmax attention node.
    pub fn forward_graph(&self, g: &mut Graph, vars: &ParamVars, images: Var) -> Result<(Var, Vec<Var>)> {
        use Component::*;
        let c = &self.config;
        self.check_images(g.value(images))?;
        let v = |key: ParamKey| -> Result<Var> {
            vars.get(&key)
                .copied()
                .ok_or_else(|| Error::UnknownParameter(key.to_string()))
        };
        let b = g.value(images).shape()[0];
        let (p, grid, d, dh) = (c.patch_size, c.grid(), c.embed_dim, c.head_dim);
        let n = c.num_tokens();

        // [B,C,H,W] → [B, grid², C·p·p] in (channel, row, col) patch order
        let x = g.reshape(images, &[b, c.channels, grid, p, grid, p])?;
        let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let x = g.reshape(x, &[b, c.num_patches(), c.patch_dim()])?;
        let w_pe = g.reshape(v(ParamKey::global(PatchEmbed, "weight"))?, &[d, c.patch_dim()])?;
        let mut x = g.linear(x, w_pe, Some(v(ParamKey::global(PatchEmbed, "bias"))?))?;
        if c.use_cls_token {
            let zeros = g.constant(Tensor::zeros(&[b, 1, d]));
            let cls = g.add(zeros, v(ParamKey::global(Cls, "token"))?)?;
            x = g.concat(&[cls, x], 1)?;
        }
        x = g.add(x, v(ParamKey::global(PosEmbed, "weight"))?)?;

        let mut attention = Vec::with_capacity(c.num_layers());
        for l in 0..c.num_layers() {
            let heads = c.num_heads[l];
            let h = layer_norm_affine(g, x, v(ParamKey::block(l, Ln1, "gamma"))?, v(ParamKey::block(l, Ln1, "beta"))?)?;
            let qkv = g.linear(h, v(ParamKey::block(l, Qkv, "weight"))?, Some(v(ParamKey::block(l, Qkv, "bias"))?))?;
            let qkv = g.reshape(qkv, &[b, n, 3, heads, dh])?;
            let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
            let split = |g: &mut Graph, i: usize| -> Result<Var> {
                let t = g.narrow(qkv, 0, i, 1)?;
                g.reshape(t, &[b, heads, n, dh])
            };
            let (q, k, val) = (split(g, 0)?, split(g, 1)?, split(g, 2)?);
            let scores = g.bmm(q, k, true)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let att = g.softmax(scores, 3)?;
            attention.push(att);
            let ctx = g.bmm(att, val, false)?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[b, n, heads * dh])?;
            let o = g.linear(ctx, v(ParamKey::block(l, AttnOut, "weight"))?, Some(v(ParamKey::block(l, AttnOut, "bias"))?))?;
            x = g.add(x, o)?;

            let h = layer_norm_affine(g, x, v(ParamKey::block(l, Ln2, "gamma"))?, v(ParamKey::block(l, Ln2, "beta"))?)?;
            let f = g.linear(h, v(ParamKey::block(l, MlpFc1, "weight"))?, Some(v(ParamKey::block(l, MlpFc1, "bias"))?))?;
            let f = g.gelu(f)?;
            let f = g.linear(f, v(ParamKey::block(l, MlpFc2, "weight"))?, Some(v(ParamKey::block(l, MlpFc2, "bias"))?))?;
            x = g.add(x, f)?;
        }
        let x = layer_norm_affine(g, x, v(ParamKey::global(FinalLn, "gamma"))?, v(ParamKey::global(FinalLn, "beta"))?)?;
        let pooled = match c.pooling {
            Pooling::Cls => {
                let t = g.narrow(x, 1, 0, 1)?;
                g.reshape(t, &[b, d])?
            }
            Pooling::Mean => {
                let first = usize::from(c.use_cls_token);
                let t = g.narrow(x, 1, first, c.num_patches())?;
                g.mean(t, 1)?
            }
        };
        let logits = g.linear(pooled, v(ParamKey::global(Head, "weight"))?, Some(v(ParamKey::global(Head, "bias"))?))?;
        Ok((logits, attention))
    }

    pub fn forward(&self, images: &Tensor, record_attention: bool) -> Result<ForwardOutput> {
        self.check_images(images)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, |_| false);
        let x = g.constant(images.clone());
        let (logits, att) = self.forward_graph(&mut g, &vars, x)?;
        let attention = record_attention.then(|| AttentionRecord {
            layers: att.iter().map(|&a| g.value(a).clone()).collect(),
        });
        Ok(ForwardOutput {
            logits: g.value(logits).clone(),
            attention,
        })
    }

    /// Gradient of the mean cross-entropy over `(images, labels)` for every
    /// parameter accepted by `trainable`. Also returns the loss value.
    pub fn loss_and_grads(
        &self,
        images: &Tensor,
        labels: &[usize],
        trainable: impl Fn(&ParamKey) -> bool,
    ) -> Result<(f64, BTreeMap<ParamKey, Vec<f64>>)> {
        self.forward_backward(images, labels, trainable).map(|(loss, _, grads)| (loss, grads))
    }

    /// [`TransformerModel::loss_and_grads`] that also hands back the logits.
    pub fn forward_backward(
        &self,
        images: &Tensor,
        labels: &[usize],
        trainable: impl Fn(&ParamKey) -> bool,
    ) -> Result<(f64, Tensor, BTreeMap<ParamKey, Vec<f64>>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, &trainable);
        let x = g.constant(images.clone());
        let (logits, _) = self.forward_graph(&mut g, &vars, x)?;
        let loss = g.cross_entropy(logits, labels)?;
        g.backward(loss)?;
        let grads = vars
            .iter()
            .filter(|(k, _)| trainable(k))
            .map(|(k, &v)| (k.clone(), g.grad_or_zeros(v).expect("trainable var requires grad")))
            .collect();
        Ok((g.value(loss).item(), g.value(logits).clone(), grads))
    }
}

fn layer_norm_affine(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let axis = g.value(x).ndim() - 1;
    let h = g.layer_norm(x, axis, LAYER_NORM_EPS)?;
    let h = g.mul(h, gamma)?;
    g.add(h, beta)
}

//! Query/key encoder pair: a small conv stem producing a token grid,
//! pre-norm transformer blocks over the (mixed) tokens, mean pooling, and a
//! projection head for the contrastive loss. The key network mirrors the
//! query network and follows it by momentum updates only.

use crate::error::{Result, SpmixError};
use crate::imaging::ImageTensor;
use crate::tensor::{Graph, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const LN_EPS: f64 = 1e-5;
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub input_size: usize,
    /// Tokens per side; token count is grid^2.
    pub grid: usize,
    pub token_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub proj_dim: usize,
    pub stem_channels: (usize, usize),
    pub mlp_ratio: usize,
    pub use_pos_emb: bool,
}

impl EncoderConfig {
    /// Desk-scale configuration used by the test and experiment suite.
    pub fn desk() -> Self {
        EncoderConfig {
            input_size: 64,
            grid: 8,
            token_dim: 64,
            depth: 2,
            heads: 4,
            proj_dim: 32,
            stem_channels: (8, 16),
            mlp_ratio: 2,
            use_pos_emb: true,
        }
    }

    /// Full-scale configuration (224 input, 768-d tokens). Available but not
    /// the desk-scale test target.
    pub fn paper_scale() -> Self {
        EncoderConfig {
            input_size: 224,
            grid: 14,
            token_dim: 768,
            depth: 12,
            heads: 12,
            proj_dim: 128,
            stem_channels: (32, 64),
            mlp_ratio: 4,
            use_pos_emb: true,
        }
    }

    /// Minimal configuration for finite-difference checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            input_size: 16,
            grid: 2,
            token_dim: 8,
            depth: 1,
            heads: 2,
            proj_dim: 4,
            stem_channels: (4, 6),
            mlp_ratio: 2,
            use_pos_emb: true,
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// Pixels per token side.
    pub fn patch_size(&self) -> usize {
        self.input_size / self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size % self.grid != 0 {
            return Err(SpmixError::config(format!(
                "input size {} not divisible by grid {}",
                self.input_size, self.grid
            )));
        }
        if self.patch_size() % 4 != 0 {
            return Err(SpmixError::config(format!(
                "patch size {} must be divisible by 4 (two stride-2 convs before patchify)",
                self.patch_size()
            )));
        }
        if self.token_dim % self.heads != 0 {
            return Err(SpmixError::config(format!(
                "token dim {} not divisible by heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.depth == 0 && self.use_pos_emb {
            // allowed; pos_emb is still applied before pooling
        }
        Ok(())
    }
}

/// Ordered, name-aligned parameter set. Order defines checkpoint layout and
/// optimizer state alignment.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| SpmixError::contract(format!("missing parameter '{name}'")))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Replaces a parameter's tensor (functional update from the optimizer).
    pub fn replace(&mut self, index: usize, tensor: Tensor) {
        self.entries[index].1 = tensor;
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Copy with fresh buffers and no gradient tracking (key-network init,
    /// frozen evaluation).
    pub fn detached_copy(&self) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| {
                    (
                        n.clone(),
                        Tensor::from_parts(t.shape().to_vec(), t.data().to_vec(), false),
                    )
                })
                .collect(),
        }
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data, false)
}

/// He-scaled conv filters with the per-filter mean removed, so a constant
/// input patch produces zero response at initialization. Shared background
/// level otherwise dominates the token features and starts contrastive
/// training from a collapsed embedding state.
fn dc_free_conv(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let oc = *shape.last().expect("conv kernel rank 4");
    let len: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..len).map(|_| dist.sample(rng)).collect();
    // kernel layout [KH, KW, C, OC]: filter o strides over the last axis
    for o in 0..oc {
        let taps = len / oc;
        let mean: f64 = (0..taps).map(|t| data[t * oc + o]).sum::<f64>() / taps as f64;
        for t in 0..taps {
            data[t * oc + o] -= mean;
        }
    }
    Tensor::from_parts(shape.to_vec(), data, false)
}

/// Builds the trainable encoder parameters for a config. Deterministic for
/// a given seed.
pub fn init_encoder_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let d = cfg.token_dim;
    let (c1, c2) = cfg.stem_channels;
    let patch = cfg.patch_size() / 4;

    let he = |rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize| {
        normal_tensor(rng, shape, (2.0 / fan_in as f64).sqrt()).requires_grad(true)
    };
    let xavier = |rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize| {
        normal_tensor(rng, shape, (1.0 / fan_in as f64).sqrt()).requires_grad(true)
    };
    let zeros = |shape: &[usize]| Tensor::zeros(shape).requires_grad(true);
    let ones = |shape: &[usize]| Tensor::full(shape, 1.0).requires_grad(true);

    p.insert(
        "stem.conv1.w",
        dc_free_conv(&mut rng, &[3, 3, 3, c1], 27).requires_grad(true),
    );
    p.insert("stem.conv1.b", zeros(&[c1]));
    p.insert(
        "stem.conv2.w",
        dc_free_conv(&mut rng, &[3, 3, c1, c2], 9 * c1).requires_grad(true),
    );
    p.insert("stem.conv2.b", zeros(&[c2]));
    p.insert(
        "stem.patch.w",
        dc_free_conv(&mut rng, &[patch, patch, c2, d], patch * patch * c2).requires_grad(true),
    );
    p.insert("stem.patch.b", zeros(&[d]));
    if cfg.use_pos_emb {
        p.insert("pos_emb", zeros(&[cfg.tokens(), d]));
    }
    for i in 0..cfg.depth {
        let pre = format!("block{i}");
        p.insert(format!("{pre}.ln1.g"), ones(&[d]));
        p.insert(format!("{pre}.ln1.b"), zeros(&[d]));
        for name in ["q", "k", "v"] {
            p.insert(format!("{pre}.attn.{name}.w"), xavier(&mut rng, &[d, d], d));
            p.insert(format!("{pre}.attn.{name}.b"), zeros(&[d]));
        }
        p.insert(format!("{pre}.attn.proj.w"), xavier(&mut rng, &[d, d], d));
        p.insert(format!("{pre}.attn.proj.b"), zeros(&[d]));
        p.insert(format!("{pre}.ln2.g"), ones(&[d]));
        p.insert(format!("{pre}.ln2.b"), zeros(&[d]));
        let hidden = d * cfg.mlp_ratio;
        p.insert(format!("{pre}.mlp.fc1.w"), he(&mut rng, &[d, hidden], d));
        p.insert(format!("{pre}.mlp.fc1.b"), zeros(&[hidden]));
        p.insert(format!("{pre}.mlp.fc2.w"), xavier(&mut rng, &[hidden, d], hidden));
        p.insert(format!("{pre}.mlp.fc2.b"), zeros(&[d]));
    }
    p.insert("proj.fc1.w", he(&mut rng, &[d, d], d));
    p.insert("proj.fc1.b", zeros(&[d]));
    p.insert("proj.fc2.w", xavier(&mut rng, &[d, cfg.proj_dim], d));
    p.insert("proj.fc2.b", zeros(&[cfg.proj_dim]));
    Ok(p)
}

/// Packs a batch of images into a `[B, H, W, C]` tensor.
pub fn image_batch(images: &[&ImageTensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| SpmixError::contract("image batch must not be empty"))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.height() != h || img.width() != w || img.channels() != c {
            return Err(SpmixError::contract(
                "image batch members differ in shape".to_string(),
            ));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_parts(vec![images.len(), h, w, c], data, false))
}

fn linear(g: &mut Graph, x: &Tensor, p: &ParamStore, name: &str) -> Result<Tensor> {
    let w = p.expect(&format!("{name}.w"))?;
    let b = p.expect(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(&y, b)
}

/// Conv stem: two stride-2 conv+relu layers, then a patchify conv straight
/// to the token grid. `[B, H, W, 3]` -> `[B, N, D]`.
pub fn stem_forward(
    g: &mut Graph,
    images: &Tensor,
    p: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<Tensor> {
    if images.ndim() != 4 || images.shape()[1] != cfg.input_size || images.shape()[2] != cfg.input_size
    {
        return Err(SpmixError::contract(format!(
            "stem expects [B, {0}, {0}, 3] input, got {1:?}",
            cfg.input_size,
            images.shape()
        )));
    }
    let b = images.shape()[0];
    let patch = cfg.patch_size() / 4;
    let h = g.conv2d(images, p.expect("stem.conv1.w")?, 2, 1)?;
    let h = g.add(&h, p.expect("stem.conv1.b")?)?;
    let h = g.relu(&h)?;
    let h = g.conv2d(&h, p.expect("stem.conv2.w")?, 2, 1)?;
    let h = g.add(&h, p.expect("stem.conv2.b")?)?;
    let h = g.relu(&h)?;
    let h = g.conv2d(&h, p.expect("stem.patch.w")?, patch, 0)?;
    let h = g.add(&h, p.expect("stem.patch.b")?)?;
    g.reshape(&h, &[b, cfg.tokens(), cfg.token_dim])
}

fn attention(
    g: &mut Graph,
    x: &Tensor,
    p: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<Tensor> {
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let heads = cfg.heads;
    let dh = d / heads;
    let flat = g.reshape(x, &[b * n, d])?;
    let q = linear(g, &flat, p, &format!("{prefix}.q"))?;
    let k = linear(g, &flat, p, &format!("{prefix}.k"))?;
    let v = linear(g, &flat, p, &format!("{prefix}.v"))?;
    let q = g.reshape(&q, &[b, n, heads, dh])?;
    let q = g.permute(&q, &[0, 2, 1, 3])?; // [B,H,N,dh]
    let k = g.reshape(&k, &[b, n, heads, dh])?;
    let k = g.permute(&k, &[0, 2, 3, 1])?; // [B,H,dh,N]
    let v = g.reshape(&v, &[b, n, heads, dh])?;
    let v = g.permute(&v, &[0, 2, 1, 3])?; // [B,H,N,dh]
    let scores = g.matmul(&q, &k)?;
    let scores = g.mul_scalar(&scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(&scores)?;
    let ctx = g.matmul(&attn, &v)?; // [B,H,N,dh]
    let ctx = g.permute(&ctx, &[0, 2, 1, 3])?; // [B,N,H,dh]
    let ctx = g.reshape(&ctx, &[b * n, d])?;
    let out = linear(g, &ctx, p, &format!("{prefix}.proj"))?;
    g.reshape(&out, &[b, n, d])
}

fn transformer_block(
    g: &mut Graph,
    x: &Tensor,
    p: &ParamStore,
    index: usize,
    cfg: &EncoderConfig,
) -> Result<Tensor> {
    let pre = format!("block{index}");
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h = g.layer_norm(x, p.expect(&format!("{pre}.ln1.g"))?, p.expect(&format!("{pre}.ln1.b"))?, LN_EPS)?;
    let a = attention(g, &h, p, &format!("{pre}.attn"), cfg)?;
    let x = g.add(x, &a)?;
    let h = g.layer_norm(&x, p.expect(&format!("{pre}.ln2.g"))?, p.expect(&format!("{pre}.ln2.b"))?, LN_EPS)?;
    let flat = g.reshape(&h, &[b * n, d])?;
    let m = linear(g, &flat, p, &format!("{pre}.mlp.fc1"))?;
    let m = g.relu(&m)?;
    let m = linear(g, &m, p, &format!("{pre}.mlp.fc2"))?;
    let m = g.reshape(&m, &[b, n, d])?;
    g.add(&x, &m)
}

/// Positional embedding, pre-norm blocks, then mean pooling over tokens.
/// `[B, N, D]` -> `[B, D]`. A zero-depth config with zero positional
/// embedding reduces to the token mean.
pub fn transformer_forward(
    g: &mut Graph,
    tokens: &Tensor,
    p: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<Tensor> {
    if tokens.ndim() != 3 || tokens.shape()[1] != cfg.tokens() || tokens.shape()[2] != cfg.token_dim
    {
        return Err(SpmixError::contract(format!(
            "transformer expects [B, {}, {}], got {:?}",
            cfg.tokens(),
            cfg.token_dim,
            tokens.shape()
        )));
    }
    let mut x = if cfg.use_pos_emb {
        g.add(tokens, p.expect("pos_emb")?)?
    } else {
        tokens.clone()
    };
    for i in 0..cfg.depth {
        x = transformer_block(g, &x, p, i, cfg)?;
    }
    g.mean_axis(&x, 1, false)
}

/// Projection head: linear -> relu -> linear, then L2 normalization with an
/// epsilon guard so a zero vector stays finite.
pub fn project_normalize(
    g: &mut Graph,
    pooled: &Tensor,
    p: &ParamStore,
    _cfg: &EncoderConfig,
) -> Result<Tensor> {
    let h = linear(g, pooled, p, "proj.fc1")?;
    let h = g.relu(&h)?;
    let z = linear(g, &h, p, "proj.fc2")?;
    let sq = g.mul(&z, &z)?;
    let s = g.sum_axis(&sq, 1, true)?;
    let norm = g.sqrt(&s)?;
    let norm = g.add_scalar(&norm, NORM_EPS)?;
    g.div(&z, &norm)
}

/// Full query-side pipeline for a batch of (tail, head) views with ratio
/// grids: stem both operands, mix tokens, encode, project.
pub fn encode_mixed_batch(
    g: &mut Graph,
    tail_images: &Tensor,
    head_images: &Tensor,
    ratios: &Tensor,
    p: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<Tensor> {
    let tail_tokens = stem_forward(g, tail_images, p, cfg)?;
    let head_tokens = stem_forward(g, head_images, p, cfg)?;
    let mixed = crate::mixup::mix_features(g, &tail_tokens, &head_tokens, ratios)?;
    let pooled = transformer_forward(g, &mixed, p, cfg)?;
    project_normalize(g, &pooled, p, cfg)
}

/// Pooled features without mixing (classification, probing).
pub fn encode_pooled(
    g: &mut Graph,
    images: &Tensor,
    p: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<Tensor> {
    let tokens = stem_forward(g, images, p, cfg)?;
    transformer_forward(g, &tokens, p, cfg)
}

/// Query parameters (trained by gradients) and key parameters (momentum
/// updates only, never on the graph).
pub struct EncoderPair {
    pub query: ParamStore,
    pub key: ParamStore,
    pub momentum: f64,
}

impl EncoderPair {
    /// Key starts as an exact copy of the query network.
    pub fn new(cfg: &EncoderConfig, seed: u64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(SpmixError::config(format!(
                "key momentum must lie in [0, 1), got {momentum}"
            )));
        }
        let query = init_encoder_params(cfg, seed)?;
        let key = query.detached_copy();
        Ok(EncoderPair {
            query,
            key,
            momentum,
        })
    }

    /// theta_k <- m * theta_k + (1 - m) * theta_q, elementwise.
    pub fn momentum_update(&mut self) -> Result<()> {
        momentum_update(&mut self.key, &self.query, self.momentum)
    }
}

/// Shared momentum rule, also used by tests on raw stores.
pub fn momentum_update(key: &mut ParamStore, query: &ParamStore, m: f64) -> Result<()> {
    if key.len() != query.len() {
        return Err(SpmixError::contract(format!(
            "parameter sets differ in length: {} vs {}",
            key.len(),
            query.len()
        )));
    }
    for i in 0..key.len() {
        let (kname, ktensor) = &key.entries()[i];
        let (qname, qtensor) = &query.entries()[i];
        if kname != qname || ktensor.shape() != qtensor.shape() {
            return Err(SpmixError::contract(format!(
                "parameter mismatch at index {i}: {kname} {:?} vs {qname} {:?}",
                ktensor.shape(),
                qtensor.shape()
            )));
        }
        let blended: Vec<f64> = ktensor
            .data()
            .iter()
            .zip(qtensor.data())
            .map(|(&k, &q)| m * k + (1.0 - m) * q)
            .collect();
        let next = Tensor::from_parts(ktensor.shape().to_vec(), blended, false);
        key.replace(i, next);
    }
    Ok(())
}

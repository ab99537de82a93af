//! Vision transformer feature extractor: residual conv stem, overlapped
//! convolutional patch embedding, pre-norm attention blocks with stochastic
//! depth, and average pooling of patch tokens.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{trunc_normal, Bound, Conv2d, LayerNorm, Linear, ParamStore};
use crate::seed::{self, Rng};
use crate::tensor::{Real, Tensor};

/// Parameter-name prefix of every backbone tensor.
pub const PREFIX: &str = "backbone";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StemConfig {
    /// Channel width of all three stem convolutions.
    pub channels: usize,
}

impl Default for StemConfig {
    fn default() -> Self {
        StemConfig { channels: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    /// Patch grid `[H_p, W_p]`; `K = H_p * W_p`.
    pub patch_grid: [usize; 2],
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub drop_path_rate: f64,
    pub stem: StemConfig,
    pub class_token: bool,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_grid: [4, 4],
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
            drop_path_rate: 0.1,
            stem: StemConfig::default(),
            class_token: false,
        }
    }
}

impl ViTConfig {
    pub fn n_patches(&self) -> usize {
        self.patch_grid[0] * self.patch_grid[1]
    }

    fn stem_side(&self) -> usize {
        self.image_size / 4
    }

    /// Patch-embedding stride along each axis.
    fn embed_stride(&self) -> [usize; 2] {
        let side = self.stem_side();
        [side / self.patch_grid[0], side / self.patch_grid[1]]
    }

    fn hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_grid.contains(&0) {
            return err("patch_grid entries must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return err(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return err(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 {
            return err("depth must be at least 1".into());
        }
        if self.mlp_ratio <= 0.0 || !self.mlp_ratio.is_finite() {
            return err(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if self.stem.channels == 0 {
            return err("stem.channels must be positive".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return err(format!("image_size {} must be a positive multiple of 4", self.image_size));
        }
        let side = self.stem_side();
        if self.patch_grid[0] != self.patch_grid[1] {
            return err("patch_grid must be square".into());
        }
        if !side.is_multiple_of(self.patch_grid[0]) {
            return err(format!(
                "stem output side {side} is not divisible by patch grid {}",
                self.patch_grid[0]
            ));
        }
        Ok(())
    }

    fn embed_conv(&self) -> Conv2d {
        let s = self.embed_stride()[0];
        let k = if s == 1 { 3 } else { s + 1 };
        Conv2d::new(format!("{PREFIX}.patch_embed"), self.stem.channels, self.embed_dim, k, s, 1)
    }

    fn stem_convs(&self) -> [Conv2d; 4] {
        let c = self.stem.channels;
        [
            Conv2d::new(format!("{PREFIX}.stem.conv1"), 3, c, 3, 2, 1),
            Conv2d::new(format!("{PREFIX}.stem.conv2"), c, c, 3, 1, 1),
            Conv2d::new(format!("{PREFIX}.stem.conv3"), c, c, 3, 1, 1),
            Conv2d::new(format!("{PREFIX}.stem.shortcut"), 3, c, 1, 2, 0),
        ]
    }

    fn block(&self, i: usize) -> Block {
        let d = self.embed_dim;
        let n = format!("{PREFIX}.blocks.{i}");
        Block {
            norm1: LayerNorm::new(format!("{n}.norm1"), d),
            qkv: Linear::new(format!("{n}.attn.qkv"), d, 3 * d),
            proj: Linear::new(format!("{n}.attn.proj"), d, d),
            norm2: LayerNorm::new(format!("{n}.norm2"), d),
            fc1: Linear::new(format!("{n}.mlp.fc1"), d, self.hidden()),
            fc2: Linear::new(format!("{n}.mlp.fc2"), self.hidden(), d),
        }
    }

    fn final_norm(&self) -> LayerNorm {
        LayerNorm::new(format!("{PREFIX}.norm"), self.embed_dim)
    }

    /// Per-block drop probabilities, linearly ramped to `drop_path_rate`.
    pub fn drop_path_rates(&self) -> Vec<f64> {
        if self.depth == 1 {
            return vec![self.drop_path_rate];
        }
        (0..self.depth)
            .map(|i| self.drop_path_rate * i as f64 / (self.depth - 1) as f64)
            .collect()
    }

    /// Freshly initialized parameters.
    pub fn init_params<F: Real>(&self, rng: &mut Rng) -> ParamStore<F> {
        let mut store = ParamStore::new();
        for conv in self.stem_convs() {
            conv.init(&mut store, rng);
        }
        self.embed_conv().init(&mut store, rng);
        store.insert(
            format!("{PREFIX}.pos_embed"),
            trunc_normal(&[self.n_patches(), self.embed_dim], 0.02, rng),
        );
        if self.class_token {
            store.insert(format!("{PREFIX}.cls_token"), trunc_normal(&[self.embed_dim], 0.02, rng));
        }
        for i in 0..self.depth {
            let b = self.block(i);
            b.norm1.init(&mut store);
            b.qkv.init(&mut store, rng);
            b.proj.init(&mut store, rng);
            b.norm2.init(&mut store);
            b.fc1.init(&mut store, rng);
            b.fc2.init(&mut store, rng);
        }
        self.final_norm().init(&mut store);
        store
    }

    /// Record the forward pass on `images` (`[B, S, S, 3]`, normalized).
    ///
    /// `drop_path` enables train-mode stochastic depth drawn from the given
    /// stream; `None` is eval mode.
    pub fn forward_graph<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        images: Var,
        drop_path: Option<&mut Rng>,
    ) -> TokenVars {
        let batch = g.shape(images)[0];
        let [c1, c2, c3, shortcut] = self.stem_convs();
        let h = c1.forward(g, p, images);
        let h = g.relu(h);
        let h = c2.forward(g, p, h);
        let h = g.relu(h);
        let h = c3.forward(g, p, h);
        let s = shortcut.forward(g, p, images);
        let h = g.add(h, s);
        let h = g.relu(h);
        let h = g.max_pool2(h);
        let h = self.embed_conv().forward(g, p, h);
        let (k, d) = (self.n_patches(), self.embed_dim);
        let mut x = g.reshape(h, &[batch, k, d]);
        x = g.add_broadcast(x, p.get(&format!("{PREFIX}.pos_embed")));
        let offset = usize::from(self.class_token);
        if self.class_token {
            x = g.prepend_token(x, p.get(&format!("{PREFIX}.cls_token")));
        }
        let rates = self.drop_path_rates();
        let mut rng = drop_path;
        for (i, &rate) in rates.iter().enumerate() {
            let b = self.block(i);
            let mut masks = [None, None];
            if let Some(r) = rng.as_deref_mut() {
                if rate > 0.0 {
                    for m in &mut masks {
                        *m = Some(drop_path_scales::<F>(batch, rate, r));
                    }
                }
            }
            let t = b.norm1.forward(g, p, x);
            let t = b.qkv.forward(g, p, t);
            let t = g.attention(t, self.heads);
            let mut t = b.proj.forward(g, p, t);
            if let Some(m) = masks[0].take() {
                t = g.row_scale(t, m);
            }
            x = g.add(x, t);
            let t = b.norm2.forward(g, p, x);
            let t = b.fc1.forward(g, p, t);
            let t = g.gelu(t);
            let mut t = b.fc2.forward(g, p, t);
            if let Some(m) = masks[1].take() {
                t = g.row_scale(t, m);
            }
            x = g.add(x, t);
        }
        x = self.final_norm().forward(g, p, x);
        let (patches, class_token) = if self.class_token {
            let cls = g.slice_tokens(x, 0, 1);
            let cls = g.reshape(cls, &[batch, d]);
            (g.slice_tokens(x, offset, k), Some(cls))
        } else {
            (x, None)
        };
        let global = g.mean_axis1(patches);
        TokenVars {
            patches,
            global,
            class_token,
        }
    }
}

/// Per-sample residual-branch multipliers: 0 when dropped, `1/(1-rate)` when kept.
fn drop_path_scales<F: Real>(batch: usize, rate: f64, rng: &mut Rng) -> Vec<F> {
    let keep = F::from_f64(1.0 / (1.0 - rate));
    (0..batch)
        .map(|_| if rng.random::<f64>() < rate { F::ZERO } else { keep })
        .collect()
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Graph handles produced by [`ViTConfig::forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct TokenVars {
    /// `[B, K, d]`
    pub patches: Var,
    /// `[B, d]`, mean of `patches` over tokens.
    pub global: Var,
    pub class_token: Option<Var>,
}

/// Features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub dim: usize,
    /// `K * dim` values, token-major.
    pub patch_tokens: Vec<f32>,
    pub global_feature: Vec<f32>,
    pub class_token: Option<Vec<f32>>,
}

impl TokenGrid {
    pub fn n_tokens(&self) -> usize {
        self.patch_tokens.len() / self.dim.max(1)
    }

    pub fn token(&self, j: usize) -> &[f32] {
        &self.patch_tokens[j * self.dim..(j + 1) * self.dim]
    }
}

/// Arithmetic mean of `K` token rows of width `dim`.
pub fn global_pool<F: Real>(tokens: &[F], dim: usize) -> Vec<F> {
    let k = tokens.len() / dim.max(1);
    let mut out = vec![F::ZERO; dim];
    for row in tokens.chunks(dim) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = F::ONE / F::from_f64(k.max(1) as f64);
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// A configured backbone with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: ViTConfig,
    pub params: ParamStore<f32>,
}

impl Backbone {
    /// Deterministic construction from `seed`.
    pub fn build(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(seed, &[seed::label::INIT]);
        let params = config.init_params(&mut rng);
        Ok(Backbone { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn check_images(&self, images: &[&Image]) -> Result<()> {
        let s = self.config.image_size;
        match images.iter().find(|i| i.width() != s || i.height() != s) {
            Some(bad) => Err(Error::Input(format!(
                "image is {}x{}, backbone expects {s}x{s}",
                bad.width(),
                bad.height()
            ))),
            None => Ok(()),
        }
    }

    /// Forward a normalized `[B, S, S, 3]` batch without recording gradients.
    pub fn forward_tensor(&self, batch: Tensor<f32>, drop_path: Option<&mut Rng>) -> Result<Vec<TokenGrid>> {
        let s = self.config.image_size;
        let shape = batch.shape();
        if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != 3 {
            return Err(Error::Input(format!("batch shape {shape:?}, expected [B, {s}, {s}, 3]")));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(batch);
        let out = self.config.forward_graph(&mut g, &p, x, drop_path);
        Ok(token_grids(&g, out))
    }

    /// Forward raw `[0, 1]` images, normalizing them first.
    pub fn forward(
        &self,
        images: &[&Image],
        norm: &crate::data::Normalization,
        drop_path: Option<&mut Rng>,
    ) -> Result<Vec<TokenGrid>> {
        self.check_images(images)?;
        self.forward_tensor(norm.batch(images)?, drop_path)
    }

    /// Eval-mode global features `[n, d]` for many images, batched.
    pub fn global_features(
        &self,
        images: &[&Image],
        norm: &crate::data::Normalization,
        batch_size: usize,
    ) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch_size.max(1)) {
            out.extend(self.forward(chunk, norm, None)?.into_iter().map(|t| t.global_feature));
        }
        Ok(out)
    }
}

/// Read per-image features out of a recorded forward pass.
pub fn token_grids<F: Real>(g: &Graph<F>, out: TokenVars) -> Vec<TokenGrid> {
    let patches = g.value(out.patches);
    let (b, k, d) = (patches.shape()[0], patches.shape()[1], patches.shape()[2]);
    let global = g.value(out.global);
    let cls = out.class_token.map(|c| g.value(c));
    let to32 = |s: &[F]| s.iter().map(|v| v.to_f64() as f32).collect::<Vec<f32>>();
    (0..b)
        .map(|i| TokenGrid {
            dim: d,
            patch_tokens: to32(&patches.data()[i * k * d..(i + 1) * k * d]),
            global_feature: to32(global.row(i)),
            class_token: cls.map(|c| to32(c.row(i))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_grid: [2, 2],
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            drop_path_rate: 0.5,
            stem: StemConfig { channels: 4 },
            class_token: false,
        }
    }

    fn random_batch(n: usize, side: usize, seed: u64) -> Tensor<f32> {
        let mut rng = Rng::seed_from_u64(seed);
        let data = (0..n * side * side * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[n, side, side, 3], data)
    }

    #[test]
    fn build_is_deterministic_and_validated() {
        let a = Backbone::build(ViTConfig::default(), 3).unwrap();
        let b = Backbone::build(ViTConfig::default(), 3).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.num_params() > 0);
        let bad = ViTConfig {
            embed_dim: 65,
            ..ViTConfig::default()
        };
        assert!(matches!(Backbone::build(bad, 0), Err(Error::Config(_))));
        let bad = ViTConfig {
            drop_path_rate: 1.0,
            ..ViTConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn default_grid_has_sixteen_tokens() {
        let bb = Backbone::build(ViTConfig::default(), 0).unwrap();
        let out = bb.forward_tensor(random_batch(2, 32, 1), None).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].n_tokens(), 16);
        let pooled = global_pool(&out[1].patch_tokens, 64);
        for (a, b) in pooled.iter().zip(&out[1].global_feature) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_shape_checked() {
        let bb = Backbone::build(tiny(), 1).unwrap();
        let a = bb.forward_tensor(random_batch(3, 8, 2), None).unwrap();
        let b = bb.forward_tensor(random_batch(3, 8, 2), None).unwrap();
        assert_eq!(a, b);
        assert!(matches!(bb.forward_tensor(random_batch(1, 12, 2), None), Err(Error::Input(_))));
    }

    #[test]
    fn train_forward_replays_under_cloned_stream() {
        let bb = Backbone::build(tiny(), 1).unwrap();
        let rng = Rng::seed_from_u64(5);
        let a = bb.forward_tensor(random_batch(6, 8, 2), Some(&mut rng.clone())).unwrap();
        let b = bb.forward_tensor(random_batch(6, 8, 2), Some(&mut rng.clone())).unwrap();
        assert_eq!(a, b);
        let eval = bb.forward_tensor(random_batch(6, 8, 2), None).unwrap();
        assert_ne!(a, eval);
    }

    #[test]
    fn zero_drop_rate_train_equals_eval() {
        let cfg = ViTConfig {
            drop_path_rate: 0.0,
            ..tiny()
        };
        let bb = Backbone::build(cfg, 4).unwrap();
        let mut rng = Rng::seed_from_u64(9);
        let a = bb.forward_tensor(random_batch(2, 8, 3), Some(&mut rng)).unwrap();
        let b = bb.forward_tensor(random_batch(2, 8, 3), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_final_projection_makes_tokens_equal() {
        let mut bb = Backbone::build(tiny(), 2).unwrap();
        let w = bb.params.get_mut("backbone.norm.weight").unwrap();
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let b = bb.params.get_mut("backbone.norm.bias").unwrap();
        b.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.1);
        let zero = Tensor::zeros(&[1, 8, 8, 3]);
        let out = &bb.forward_tensor(zero, None).unwrap()[0];
        for j in 0..out.n_tokens() {
            assert_eq!(out.token(j), out.token(0));
        }
        assert_eq!(out.global_feature.as_slice(), out.token(0));
    }

    #[test]
    fn class_token_is_separate_from_pooling() {
        let cfg = ViTConfig {
            class_token: true,
            ..tiny()
        };
        let bb = Backbone::build(cfg, 2).unwrap();
        let out = &bb.forward_tensor(random_batch(1, 8, 1), None).unwrap()[0];
        assert_eq!(out.n_tokens(), 4);
        assert_eq!(out.class_token.as_ref().map(Vec::len), Some(8));
        let pooled = global_pool(&out.patch_tokens, 8);
        for (a, b) in pooled.iter().zip(&out.global_feature) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn global_pool_examples() {
        assert_eq!(global_pool(&[1.0f64, 0.0, 0.0, 1.0], 2), vec![0.5, 0.5]);
        assert_eq!(global_pool(&[3.0f64, -2.0], 2), vec![3.0, -2.0]);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = ViTConfig {
            drop_path_rate: 0.0,
            ..tiny()
        };
        let params: ParamStore<f64> = cfg.init_params(&mut Rng::seed_from_u64(3));
        let input = random_batch(1, 8, 7).cast::<f64>();
        let readout: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let run = |x: &Tensor<f64>, with_grad: bool| {
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let xv = if with_grad { g.param(x.clone()) } else { g.constant(x.clone()) };
            let out = cfg.forward_graph(&mut g, &p, xv, None);
            let w = g.constant(Tensor::from_vec(&[8, 1], readout.clone()));
            let y = g.matmul(out.global, w);
            let y = g.sum(y);
            let val = g.value(y).item();
            let grad = with_grad.then(|| g.backward(y).get(xv).unwrap().clone());
            (val, grad)
        };
        let analytic = run(&input, true).1.unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for j in (0..input.numel()).step_by(5) {
            let mut plus = input.clone();
            plus.data_mut()[j] += h;
            let mut minus = input.clone();
            minus.data_mut()[j] -= h;
            let fd = (run(&plus, false).0 - run(&minus, false).0) / (2.0 * h);
            let an = analytic.data()[j];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4));
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }
}

//! Prototype classifiers and episodic fine-tuning.
//!
//! Two heads are supported: the plain cosine-prototype classifier and an
//! attention-aligned variant in which one residual self-attention block
//! adapts the prototype set and an auxiliary loss pulls query embeddings
//! toward per-class centers.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{self, Backbone, ViTConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{Image, LoadedSplit};
use crate::error::{Error, Result};
use crate::eval::{sample_episode, Episode};
use crate::nn::optim::Sgd;
use crate::nn::{Bound, LayerNorm, Linear, ParamStore};
use crate::seed::{self, label};
use crate::tensor::{Real, Tensor};

pub const TUNED_KIND: &str = "tuned";
pub const GAMMA: &str = "tune.gamma";

/// Class prototypes with the softmax temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Vec<Vec<f64>>,
    pub temperature: f64,
}

/// Mean feature per class group.
pub fn compute_prototypes(groups: &[Vec<Vec<f64>>], temperature: f64) -> Result<PrototypeSet> {
    let mut prototypes = Vec::with_capacity(groups.len());
    for (k, group) in groups.iter().enumerate() {
        let Some(first) = group.first() else {
            return Err(Error::Episode(format!("class {k} has no support items")));
        };
        let mut mean = vec![0.0; first.len()];
        for f in group {
            if f.len() != mean.len() {
                return Err(Error::Episode(format!("class {k} mixes feature widths")));
            }
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= group.len() as f64);
        prototypes.push(mean);
    }
    Ok(PrototypeSet {
        prototypes,
        temperature,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `softmax_k(γ · cos(feature, w_k))`.
pub fn cosine_classify(feature: &[f64], protos: &PrototypeSet) -> Result<Vec<f64>> {
    let nf = norm(feature);
    if nf == 0.0 {
        return Err(Error::Degenerate("zero-norm query feature".into()));
    }
    let mut logits = Vec::with_capacity(protos.prototypes.len());
    for (k, w) in protos.prototypes.iter().enumerate() {
        if w.len() != feature.len() {
            return Err(Error::Input(format!(
                "prototype {k} has width {}, feature has {}",
                w.len(),
                feature.len()
            )));
        }
        let nw = norm(w);
        if nw == 0.0 {
            return Err(Error::Degenerate(format!("zero-norm prototype {k}")));
        }
        let dot: f64 = feature.iter().zip(w).map(|(a, b)| a * b).sum();
        logits.push(protos.temperature * dot / (nf * nw));
    }
    Ok(softmax(&logits))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// One pre-norm residual single-head self-attention block over a set:
/// `x + proj(attn(qkv(LN(x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatHead {
    pub dim: usize,
    /// `feat.norm.*`, `feat.qkv.*` (`[d, 3d]`, columns q | k | v), `feat.proj.*`.
    pub params: ParamStore<f32>,
}

impl FeatHead {
    fn layers(dim: usize) -> (LayerNorm, Linear, Linear) {
        (
            LayerNorm::new("feat.norm", dim),
            Linear::new("feat.qkv", dim, 3 * dim),
            Linear::new("feat.proj", dim, dim),
        )
    }

    pub fn build(dim: usize, seed: u64) -> Self {
        let mut rng = seed::stream(seed, &[label::HEAD_INIT, 1]);
        let (norm, qkv, proj) = Self::layers(dim);
        let mut params = ParamStore::new();
        norm.init(&mut params);
        qkv.init(&mut params, &mut rng);
        proj.init(&mut params, &mut rng);
        FeatHead { dim, params }
    }

    /// Apply the block to `[B, T, d]` sets.
    pub fn forward_graph<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Var {
        let (norm, qkv, proj) = Self::layers(self.dim);
        let t = norm.forward(g, p, x);
        let t = qkv.forward(g, p, t);
        let t = g.attention(t, 1);
        let t = proj.forward(g, p, t);
        g.add(x, t)
    }

    /// Apply to one set of row vectors.
    pub fn apply(&self, set: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = set.len();
        let mut g = Graph::<f64>::new();
        let p = self.params.cast::<f64>().bind(&mut g, false);
        let x = g.constant(Tensor::from_vec(&[1, n, self.dim], set.iter().flatten().copied().collect()));
        let y = self.forward_graph(&mut g, &p, x);
        g.value(y).data().chunks(self.dim).map(<[f64]>::to_vec).collect()
    }
}

/// Prototypes adapted by the attention block.
pub fn feat_align(protos: &PrototypeSet, head: &FeatHead) -> Result<PrototypeSet> {
    if protos.prototypes.len() < 2 {
        return Err(Error::Episode("alignment needs at least 2 prototypes".into()));
    }
    Ok(PrototypeSet {
        prototypes: head.apply(&protos.prototypes),
        temperature: protos.temperature,
    })
}

/// Row indices of an episode's features arranged for the loss graphs:
/// `feats` holds all support items (class-major) followed by all queries
/// (class-major).
#[derive(Clone, Debug)]
pub struct EpisodeLayout {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
}

impl EpisodeLayout {
    fn support_rows(&self) -> Vec<usize> {
        (0..self.way * self.shot).collect()
    }

    fn query_rows(&self) -> Vec<usize> {
        let s = self.way * self.shot;
        (s..s + self.way * self.queries).collect()
    }

    fn query_labels(&self) -> Vec<usize> {
        (0..self.way).flat_map(|k| std::iter::repeat_n(k, self.queries)).collect()
    }

    /// Per class: its support rows then its query rows.
    fn task_rows(&self) -> Vec<usize> {
        let s = self.way * self.shot;
        (0..self.way)
            .flat_map(|k| {
                (k * self.shot..(k + 1) * self.shot).chain(s + k * self.queries..s + (k + 1) * self.queries)
            })
            .collect()
    }
}

fn onehot<F: Real>(labels: &[usize], n: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(&[labels.len(), n]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * n + y] = F::ONE;
    }
    t
}

/// `[way, d]` class means of the support rows.
fn prototype_graph<F: Real>(g: &mut Graph<F>, feats: Var, layout: &EpisodeLayout) -> Var {
    let d = g.shape(feats)[1];
    let s = g.gather_rows(feats, layout.support_rows());
    let s = g.reshape(s, &[layout.way, layout.shot, d]);
    g.mean_axis1(s)
}

/// `[rows_a, rows_b]` of γ-scaled cosine similarities.
fn cosine_logits<F: Real>(g: &mut Graph<F>, a: Var, b: Var, gamma: Var) -> Var {
    let an = g.l2_normalize_rows(a);
    let bn = g.l2_normalize_rows(b);
    let cos = g.matmul_t(an, bn, false, true);
    g.scale_by(cos, gamma)
}

/// Mean query cross-entropy of the cosine-prototype classifier.
pub fn prototype_loss_graph<F: Real>(g: &mut Graph<F>, feats: Var, layout: &EpisodeLayout, gamma: Var) -> Var {
    let w = prototype_graph(g, feats, layout);
    let q = g.gather_rows(feats, layout.query_rows());
    let logits = cosine_logits(g, q, w, gamma);
    let labels = layout.query_labels();
    let n = labels.len();
    g.soft_cross_entropy(logits, onehot(&labels, layout.way), vec![F::from_f64(1.0 / n as f64); n])
}

/// Aligned-prototype cross-entropy plus the auxiliary center loss, both
/// averaged over queries.
pub fn feat_loss_graph<F: Real>(
    g: &mut Graph<F>,
    feats: Var,
    layout: &EpisodeLayout,
    head: &FeatHead,
    p: &Bound,
    gamma: Var,
) -> Var {
    let d = g.shape(feats)[1];
    let (way, t) = (layout.way, layout.shot + layout.queries);
    let labels = layout.query_labels();
    let n = labels.len();
    let w = prototype_graph(g, feats, layout);
    let w = g.reshape(w, &[1, way, d]);
    let w = head.forward_graph(g, p, w);
    let w = g.reshape(w, &[way, d]);
    let q = g.gather_rows(feats, layout.query_rows());
    let logits = cosine_logits(g, q, w, gamma);
    let inv_n = vec![F::from_f64(1.0 / n as f64); n];
    let main = g.soft_cross_entropy(logits, onehot(&labels, way), inv_n.clone());
    let tasks = g.gather_rows(feats, layout.task_rows());
    let tasks = g.reshape(tasks, &[way, t, d]);
    let aligned = head.forward_graph(g, p, tasks);
    let centers = g.mean_axis1(aligned);
    let aligned = g.reshape(aligned, &[way * t, d]);
    let aligned_q: Vec<usize> = (0..way)
        .flat_map(|k| k * t + layout.shot..(k + 1) * t)
        .collect();
    let aq = g.gather_rows(aligned, aligned_q);
    let aux_logits = g.matmul_t(aq, centers, false, true);
    let aux_logits = g.scale_by(aux_logits, gamma);
    let aux = g.soft_cross_entropy(aux_logits, onehot(&labels, way), inv_n);
    g.add(main, aux)
}

fn layout_of(support: &[Vec<Vec<f64>>], queries: &[Vec<Vec<f64>>]) -> Result<(EpisodeLayout, usize, Vec<f64>)> {
    let way = support.len();
    if way < 2 || queries.len() != way {
        return Err(Error::Episode("episode needs at least 2 classes with queries".into()));
    }
    let shot = support[0].len();
    let nq = queries[0].len();
    if shot == 0 || nq == 0 || support.iter().any(|s| s.len() != shot) || queries.iter().any(|q| q.len() != nq) {
        return Err(Error::Episode("every class needs the same nonzero shot and query count".into()));
    }
    let d = support[0][0].len();
    let data: Vec<f64> = support.iter().chain(queries).flatten().flatten().copied().collect();
    if data.len() != (way * (shot + nq)) * d {
        return Err(Error::Input("feature widths differ".into()));
    }
    Ok((
        EpisodeLayout {
            way,
            shot,
            queries: nq,
        },
        d,
        data,
    ))
}

/// Scalar value of the aligned-head episode loss for grouped features.
pub fn feat_loss(
    support: &[Vec<Vec<f64>>],
    queries: &[Vec<Vec<f64>>],
    head: &FeatHead,
    temperature: f64,
) -> Result<f64> {
    let (layout, d, data) = layout_of(support, queries)?;
    let mut g = Graph::<f64>::new();
    let feats = g.constant(Tensor::from_vec(&[data.len() / d, d], data));
    let p = head.params.cast::<f64>().bind(&mut g, false);
    let gamma = g.constant(Tensor::scalar(temperature));
    let loss = feat_loss_graph(&mut g, feats, &layout, head, &p, gamma);
    Ok(g.value(loss).item())
}

/// Scalar value of the cosine-prototype episode loss.
pub fn prototype_loss(support: &[Vec<Vec<f64>>], queries: &[Vec<Vec<f64>>], temperature: f64) -> Result<f64> {
    let (layout, d, data) = layout_of(support, queries)?;
    let mut g = Graph::<f64>::new();
    let feats = g.constant(Tensor::from_vec(&[data.len() / d, d], data));
    let gamma = g.constant(Tensor::scalar(temperature));
    let loss = prototype_loss_graph(&mut g, feats, &layout, gamma);
    Ok(g.value(loss).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Metabaseline,
    Feat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub head: HeadKind,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma_init: f64,
    /// Freeze the backbone; only the temperature and head train.
    pub head_only: bool,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            head: HeadKind::Metabaseline,
            epochs: 5,
            episodes_per_epoch: 50,
            way: 5,
            shot: 1,
            queries: 15,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            gamma_init: 10.0,
            head_only: false,
            seed: 0,
        }
    }
}

/// A backbone ready for episodic inference.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotModel {
    pub backbone: Backbone,
    pub temperature: f64,
    pub feat: Option<FeatHead>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunedMeta {
    pub backbone: ViTConfig,
    pub head: HeadKind,
}

impl FewShotModel {
    pub fn from_backbone(backbone: Backbone, temperature: f64) -> Self {
        FewShotModel {
            backbone,
            temperature,
            feat: None,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut params = self.backbone.params.clone();
        params.insert(GAMMA, Tensor::scalar(self.temperature as f32));
        if let Some(f) = &self.feat {
            params.extend(f.params.clone());
        }
        let meta = TunedMeta {
            backbone: self.backbone.config.clone(),
            head: if self.feat.is_some() { HeadKind::Feat } else { HeadKind::Metabaseline },
        };
        Checkpoint::new(TUNED_KIND, &meta, params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(TUNED_KIND)?;
        let meta: TunedMeta = ck.config_as()?;
        let gamma = ck
            .params
            .get(GAMMA)
            .ok_or_else(|| Error::Checkpoint("tuned checkpoint lacks a temperature".into()))?
            .item() as f64;
        let feat = (meta.head == HeadKind::Feat).then(|| FeatHead {
            dim: meta.backbone.embed_dim,
            params: ck.params.with_prefix("feat."),
        });
        Ok(FewShotModel {
            backbone: Backbone {
                config: meta.backbone,
                params: ck.params.with_prefix(backbone::PREFIX),
            },
            temperature: gamma,
            feat,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub query_acc: f64,
}

/// Episodic SGD fine-tuning on the base split.
pub fn meta_tune(
    backbone: &Backbone,
    base: &LoadedSplit,
    cfg: &TuneConfig,
) -> Result<(FewShotModel, Vec<TuneMetrics>)> {
    if cfg.way < 2 || cfg.shot == 0 || cfg.queries == 0 {
        return Err(Error::Config("tuning episodes need way >= 2, shot >= 1, queries >= 1".into()));
    }
    let dim = backbone.config.embed_dim;
    let feat = (cfg.head == HeadKind::Feat).then(|| FeatHead::build(dim, cfg.seed));
    let mut params = backbone.params.clone();
    params.insert(GAMMA, Tensor::scalar(cfg.gamma_init as f32));
    if let Some(f) = &feat {
        params.extend(f.params.clone());
    }
    let layout = EpisodeLayout {
        way: cfg.way,
        shot: cfg.shot,
        queries: cfg.queries,
    };
    let mut opt = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for e in 0..cfg.episodes_per_epoch {
            let mut rng = seed::stream(cfg.seed, &[label::EPISODE, epoch as u64, e as u64]);
            let ep = sample_episode(&base.spec, cfg.way, cfg.shot, cfg.queries, &mut rng)?;
            let images: Vec<&Image> = ep.support.iter().chain(&ep.query).map(|&i| &base.images[i]).collect();
            let mut g = Graph::new();
            let p = params.bind_filtered(&mut g, |name| !cfg.head_only || !name.starts_with(backbone::PREFIX));
            let x = g.constant(base.normalization.batch(&images)?);
            let out = backbone.config.forward_graph(&mut g, &p, x, None);
            let gamma = p.get(GAMMA);
            let loss = match &feat {
                Some(f) => feat_loss_graph(&mut g, out.global, &layout, f, &p, gamma),
                None => prototype_loss_graph(&mut g, out.global, &layout, gamma),
            };
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Degenerate(format!("non-finite tuning loss at epoch {epoch}")));
            }
            loss_sum += value;
            acc_sum += episode_accuracy_from_features(g.value(out.global), &ep, &layout, &params, feat.as_ref())?;
            let mut grads = g.backward(loss);
            let grads = p.gradients(&mut grads);
            opt.step(&mut params, &grads, cfg.lr);
        }
        let n = cfg.episodes_per_epoch.max(1) as f64;
        let m = TuneMetrics {
            epoch,
            loss: loss_sum / n,
            query_acc: acc_sum / n,
        };
        log::info!("tune epoch {epoch}: loss {:.4} acc {:.4}", m.loss, m.query_acc);
        metrics.push(m);
    }
    let model = FewShotModel {
        backbone: Backbone {
            config: backbone.config.clone(),
            params: params.with_prefix(backbone::PREFIX),
        },
        temperature: params.get(GAMMA).expect("temperature present").item() as f64,
        feat: feat.map(|_| FeatHead {
            dim,
            params: params.with_prefix("feat."),
        }),
    };
    Ok((model, metrics))
}

fn episode_accuracy_from_features(
    feats: &Tensor<f32>,
    ep: &Episode,
    layout: &EpisodeLayout,
    params: &ParamStore<f32>,
    feat: Option<&FeatHead>,
) -> Result<f64> {
    let rows: Vec<Vec<f64>> = (0..feats.rows()).map(|r| feats.row(r).iter().map(|&v| v as f64).collect()).collect();
    let s = layout.way * layout.shot;
    let groups: Vec<Vec<Vec<f64>>> = (0..layout.way)
        .map(|k| rows[k * layout.shot..(k + 1) * layout.shot].to_vec())
        .collect();
    let head = feat.map(|f| FeatHead {
        dim: f.dim,
        params: params.with_prefix("feat."),
    });
    let protos = classifier_prototypes(&groups, 1.0, head.as_ref())?;
    let mut correct = 0;
    for (i, f) in rows[s..].iter().enumerate() {
        correct += usize::from(predict(f, &protos)? == ep.query_labels[i]);
    }
    Ok(correct as f64 / (rows.len() - s) as f64)
}

/// Prototypes used at inference, aligned when a head is present.
pub fn classifier_prototypes(
    groups: &[Vec<Vec<f64>>],
    temperature: f64,
    feat: Option<&FeatHead>,
) -> Result<PrototypeSet> {
    let protos = compute_prototypes(groups, temperature)?;
    match feat {
        Some(f) => feat_align(&protos, f),
        None => Ok(protos),
    }
}

/// Arg-max class (ties to the lower index).
pub fn predict(feature: &[f64], protos: &PrototypeSet) -> Result<usize> {
    let p = cosine_classify(feature, protos)?;
    Ok((0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::StemConfig;
    use crate::data::SyntheticSpec;

    #[test]
    fn prototype_examples() {
        let p = compute_prototypes(&[vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![3.0, 4.0]]], 10.0).unwrap();
        assert_eq!(p.prototypes, vec![vec![0.5, 0.5], vec![3.0, 4.0]]);
        assert!(matches!(compute_prototypes(&[vec![]], 1.0), Err(Error::Episode(_))));
    }

    #[test]
    fn cosine_examples() {
        let protos = PrototypeSet {
            prototypes: vec![vec![1.0, 0.0], vec![0.0, 2.0]],
            temperature: 1.0,
        };
        let p = cosine_classify(&[3.0, 0.0], &protos).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        let same = PrototypeSet {
            prototypes: vec![vec![1.0, 1.0]; 3],
            temperature: 10.0,
        };
        assert!(cosine_classify(&[0.3, -2.0], &same).unwrap().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!(matches!(cosine_classify(&[0.0, 0.0], &protos), Err(Error::Degenerate(_))));
        let zero = PrototypeSet {
            prototypes: vec![vec![0.0, 0.0], vec![1.0, 0.0]],
            temperature: 1.0,
        };
        assert!(matches!(cosine_classify(&[1.0, 0.0], &zero), Err(Error::Degenerate(_))));
    }

    #[test]
    fn zero_projection_alignment_is_identity() {
        let mut head = FeatHead::build(4, 0);
        for name in ["feat.proj.weight", "feat.proj.bias"] {
            head.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let protos = PrototypeSet {
            prototypes: vec![vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 0.0, 2.0]],
            temperature: 10.0,
        };
        assert_eq!(feat_align(&protos, &head).unwrap(), protos);
    }

    #[test]
    fn symmetric_episode_losses_equal_log_way() {
        let head = FeatHead::build(3, 1);
        let f = vec![0.4, -0.2, 0.9];
        let support = vec![vec![f.clone()]; 3];
        let queries = vec![vec![f.clone()]; 3];
        let l = feat_loss(&support, &queries, &head, 10.0).unwrap();
        assert!((l - 2.0 * 3f64.ln()).abs() < 1e-9);
        let l = prototype_loss(&support, &queries, 10.0).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-9);
    }

    fn tiny_setup() -> (Backbone, LoadedSplit) {
        let vit = ViTConfig {
            image_size: 16,
            patch_grid: [2, 2],
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            drop_path_rate: 0.0,
            stem: StemConfig { channels: 4 },
            class_token: false,
        };
        let spec = SyntheticSpec {
            n_classes: 6,
            n_base: 4,
            images_per_class: 6,
            image_size: 16,
            ..SyntheticSpec::default()
        };
        (Backbone::build(vit, 0).unwrap(), spec.render().unwrap().0)
    }

    #[test]
    fn zero_epochs_is_identity_and_checkpoint_round_trips() {
        let (bb, base) = tiny_setup();
        for head in [HeadKind::Metabaseline, HeadKind::Feat] {
            let cfg = TuneConfig {
                head,
                epochs: 0,
                way: 3,
                queries: 2,
                ..TuneConfig::default()
            };
            let (model, metrics) = meta_tune(&bb, &base, &cfg).unwrap();
            assert!(metrics.is_empty());
            assert_eq!(model.backbone, bb);
            assert_eq!(model.temperature, 10.0);
            let ck = Checkpoint::from_bytes(&model.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
            assert_eq!(FewShotModel::from_checkpoint(&ck).unwrap(), model);
        }
    }

    #[test]
    fn head_only_tuning_keeps_backbone_and_is_deterministic() {
        let (bb, base) = tiny_setup();
        let cfg = TuneConfig {
            head: HeadKind::Feat,
            epochs: 2,
            episodes_per_epoch: 3,
            way: 3,
            queries: 2,
            head_only: true,
            ..TuneConfig::default()
        };
        let (a, ma) = meta_tune(&bb, &base, &cfg).unwrap();
        let (b, mb) = meta_tune(&bb, &base, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(a.backbone, bb);
        assert_ne!(a.temperature, 10.0);
        let full = TuneConfig {
            head_only: false,
            ..cfg
        };
        let (c, _) = meta_tune(&bb, &base, &full).unwrap();
        assert_ne!(c.backbone, bb);
    }
}

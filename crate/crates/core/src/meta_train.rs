//! Dense dual-loss training of the student: global cross-entropy on the
//! pooled feature plus a weighted per-patch cross-entropy against teacher
//! pseudo-labels.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{sca_pair_from_seed, AugmentConfig};
use crate::autograd::{Graph, Var};
use crate::backbone::{self, Backbone, ViTConfig};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::data::{Image, LoadedSplit};
use crate::error::{Error, Result};
use crate::nn::optim::{AdamW, CosineSchedule};
use crate::nn::{Linear, ParamStore};
use crate::par;
use crate::seed::{self, label};
use crate::supervision::{background_filtrate, scores_from_logits, PseudoLabelMap, TeacherModel};
use crate::tensor::{Real, Tensor};

pub const STUDENT_KIND: &str = "student";

/// Global (`c` outputs) and local (`c + 1` outputs) linear heads.
#[derive(Clone, Debug)]
pub struct SunHeads {
    pub global: Linear,
    pub local: Linear,
}

impl SunHeads {
    pub fn new(dim: usize, n_classes: usize) -> Self {
        SunHeads {
            global: Linear::new("head.global", dim, n_classes),
            local: Linear::new("head.local", dim, n_classes + 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the per-patch term; 0 disables it and the teacher.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Percentage of each batch's patches relabelled as background.
    pub bg_percent: f64,
    pub topk: usize,
    /// Every `val_stride`-th image of each class is held out for base-val
    /// accuracy; 0 disables the hold-out.
    pub val_stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            epochs: 30,
            batch_size: 64,
            lr: 5e-4,
            min_lr: 1e-5,
            weight_decay: 0.05,
            warmup_epochs: 3,
            bg_percent: 10.0,
            topk: 5,
            val_stride: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=100.0).contains(&self.bg_percent) {
            return Err(Error::Config(format!("bg_percent {} outside [0, 100]", self.bg_percent)));
        }
        if self.topk == 0 {
            return Err(Error::Config("topk must be at least 1".into()));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One record of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_global: f64,
    pub loss_local: f64,
    pub lr: f64,
    pub base_val_acc: Option<f64>,
}

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut text = String::new();
    for m in metrics {
        text.push_str(&serde_json::to_string(m)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Backbone plus both heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Student {
    pub backbone: Backbone,
    /// `head.global.*` and `head.local.*`.
    pub heads: ParamStore<f32>,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentMeta {
    pub backbone: ViTConfig,
    pub classes: Vec<String>,
}

impl Student {
    pub fn build(vit: &ViTConfig, classes: Vec<String>, seed: u64) -> Result<Self> {
        let backbone = Backbone::build(vit.clone(), seed)?;
        let heads = SunHeads::new(vit.embed_dim, classes.len());
        let mut rng = seed::stream(seed, &[label::HEAD_INIT]);
        let mut store = ParamStore::new();
        heads.global.init(&mut store, &mut rng);
        heads.local.init(&mut store, &mut rng);
        Ok(Student {
            backbone,
            heads: store,
            classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    fn merged(&self) -> ParamStore<f32> {
        let mut all = self.backbone.params.clone();
        all.extend(self.heads.clone());
        all
    }

    fn from_merged(vit: &ViTConfig, all: &ParamStore<f32>, classes: &[String]) -> Self {
        Student {
            backbone: Backbone {
                config: vit.clone(),
                params: all.with_prefix(backbone::PREFIX),
            },
            heads: all.with_prefix("head."),
            classes: classes.to_vec(),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = StudentMeta {
            backbone: self.backbone.config.clone(),
            classes: self.classes.clone(),
        };
        Checkpoint::new(STUDENT_KIND, &meta, self.merged())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(STUDENT_KIND)?;
        let meta: StudentMeta = ck.config_as()?;
        meta.backbone.validate()?;
        Ok(Self::from_merged(&meta.backbone, &ck.params, &meta.classes))
    }

    /// Eval-mode accuracy of the global head on `split`.
    pub fn accuracy(&self, split: &LoadedSplit, batch_size: usize) -> Result<f64> {
        if split.is_empty() {
            return Err(Error::Data("accuracy on an empty split".into()));
        }
        let all = self.merged();
        let heads = SunHeads::new(self.backbone.config.embed_dim, self.n_classes());
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..split.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &split.images[i]).collect();
            let x = split.normalization.batch::<f32>(&imgs)?;
            let mut g = Graph::new();
            let p = all.bind(&mut g, false);
            let xv = g.constant(x);
            let out = self.backbone.config.forward_graph(&mut g, &p, xv, None);
            let logits = heads.global.forward(&mut g, &p, out.global);
            let lv = g.value(logits);
            for (r, &i) in chunk.iter().enumerate() {
                let row = lv.row(r);
                let pred = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                correct += usize::from(pred == split.labels[i]);
            }
        }
        Ok(correct as f64 / split.len() as f64)
    }
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct SunLossVars {
    pub total: Var,
    /// Mean global cross-entropy.
    pub global: Var,
    /// Mean over images of the summed per-patch cross-entropy (before λ).
    pub local: Option<Var>,
}

/// Batch loss from `[B, c]` global logits and optional `[B*K, c+1]` local
/// logits with matching pseudo-label targets.
pub fn sun_loss_graph<F: Real>(
    g: &mut Graph<F>,
    global_logits: Var,
    labels: &[usize],
    local: Option<(Var, Tensor<F>)>,
    lambda: f64,
) -> Result<SunLossVars> {
    let shape = g.shape(global_logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Input(format!(
            "global logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    let mut onehot = Tensor::zeros(&[b, c]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * c + y] = F::ONE;
    }
    let inv_b = F::from_f64(1.0 / b as f64);
    let global = g.soft_cross_entropy(global_logits, onehot, vec![inv_b; b]);
    let Some((local_logits, targets)) = local else {
        return Ok(SunLossVars {
            total: global,
            global,
            local: None,
        });
    };
    let ls = g.shape(local_logits).to_vec();
    if ls.len() != 2 || ls[1] != c + 1 || !ls[0].is_multiple_of(b) || targets.shape() != ls.as_slice() {
        return Err(Error::Input(format!(
            "local logits {ls:?} / targets {:?} inconsistent with {b} images of {c} classes",
            targets.shape()
        )));
    }
    let rows = ls[0];
    let local = g.soft_cross_entropy(local_logits, targets, vec![inv_b; rows]);
    let weighted = g.scale(local, F::from_f64(lambda));
    let total = g.add(global, weighted);
    Ok(SunLossVars {
        total,
        global,
        local: Some(local),
    })
}

/// Loss of one image: `H(global, y) + λ Σ_j H(local_j, s_j)`.
pub fn sun_loss(
    global_logits: &[f64],
    y: usize,
    local_logits: &[f64],
    pseudo: &PseudoLabelMap,
    lambda: f64,
) -> Result<f64> {
    let c = global_logits.len();
    if pseudo.n_classes != c || local_logits.len() != pseudo.labels.len() {
        return Err(Error::Input(format!(
            "logit shapes ({c}, {}) do not match pseudo-labels ({}, {})",
            local_logits.len(),
            pseudo.n_classes,
            pseudo.labels.len()
        )));
    }
    let mut g = Graph::<f64>::new();
    let gl = g.constant(Tensor::from_vec(&[1, c], global_logits.to_vec()));
    let ll = g.constant(Tensor::from_vec(&[pseudo.n_tokens, c + 1], local_logits.to_vec()));
    let targets = Tensor::from_vec(
        &[pseudo.n_tokens, c + 1],
        pseudo.labels.iter().map(|&v| v as f64).collect(),
    );
    let out = sun_loss_graph(&mut g, gl, &[y], Some((ll, targets)), lambda)?;
    Ok(g.value(out.total).item())
}

fn same_architecture(a: &ViTConfig, b: &ViTConfig) -> bool {
    let strip = |c: &ViTConfig| ViTConfig {
        drop_path_rate: 0.0,
        ..c.clone()
    };
    strip(a) == strip(b)
}

/// Pseudo-labels as a `[B*K, c+1]` target tensor.
fn label_tensor(maps: &[PseudoLabelMap]) -> Tensor<f32> {
    let w = maps[0].width();
    let rows: usize = maps.iter().map(|m| m.n_tokens).sum();
    Tensor::from_vec(&[rows, w], maps.iter().flat_map(|m| m.labels.iter().copied()).collect())
}

pub type EpochHook<'a> = dyn FnMut(&EpochMetrics, &Student) -> Result<()> + 'a;

/// Shared training loop. With `lambda > 0` a teacher is required.
pub fn train(
    vit: &ViTConfig,
    data: &LoadedSplit,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    teacher: Option<&TeacherModel>,
    on_epoch: &mut EpochHook<'_>,
) -> Result<(Student, Vec<EpochMetrics>)> {
    cfg.validate()?;
    aug.validate()?;
    vit.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if aug.output_size != vit.image_size {
        return Err(Error::Config(format!(
            "augment.output_size {} differs from backbone image_size {}",
            aug.output_size, vit.image_size
        )));
    }
    let dense = cfg.lambda > 0.0;
    let teacher = if dense {
        let t = teacher.ok_or_else(|| Error::Config("lambda > 0 requires a teacher".into()))?;
        if !same_architecture(&t.backbone.config, vit) {
            return Err(Error::Config(format!(
                "teacher backbone {:?} differs from student backbone {:?}",
                t.backbone.config, vit
            )));
        }
        if t.classes != data.spec.classes {
            return Err(Error::Config("teacher and training split disagree on base classes".into()));
        }
        if cfg.topk > t.n_classes() {
            return Err(Error::Config(format!("topk {} exceeds {} classes", cfg.topk, t.n_classes())));
        }
        Some(t)
    } else {
        None
    };
    let (train_split, val_split) = if cfg.val_stride > 0 {
        let (t, v) = data.hold_out(cfg.val_stride);
        (t, (!v.is_empty()).then_some(v))
    } else {
        (data.clone(), None)
    };
    let classes = data.spec.classes.clone();
    let c = classes.len();
    let student = Student::build(vit, classes.clone(), cfg.seed)?;
    let heads = SunHeads::new(vit.embed_dim, c);
    let mut params = student.merged();
    let n = train_split.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::<f32>::new(cfg.weight_decay);
    let norm = data.normalization;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::stream(cfg.seed, &[label::SHUFFLE, epoch as u64]));
        let (mut sum_global, mut sum_local, mut lr) = (0.0, 0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let pairs = par::map_slice(batch, |&i| {
                let s = seed::derive(cfg.seed, &[label::AUGMENT, epoch as u64, i as u64]);
                sca_pair_from_seed(&train_split.images[i], aug, s)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let x_bar: Vec<&Image> = pairs.iter().map(|p| &p.x_bar).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train_split.labels[i]).collect();
            let targets = match teacher {
                Some(t) => {
                    let x_tilde: Vec<&Image> = pairs.iter().map(|p| &p.x_tilde).collect();
                    let logits = t.token_logits(norm.batch(&x_tilde)?)?;
                    let maps = background_filtrate(&scores_from_logits(&logits), cfg.bg_percent, cfg.topk)?;
                    Some(label_tensor(&maps))
                }
                None => None,
            };
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let x = g.constant(norm.batch(&x_bar)?);
            let mut drop_rng = seed::stream(cfg.seed, &[label::DROP_PATH, epoch as u64, b as u64]);
            let out = vit.forward_graph(&mut g, &p, x, Some(&mut drop_rng));
            let global_logits = heads.global.forward(&mut g, &p, out.global);
            let local = match targets {
                Some(t) => {
                    let ll = heads.local.forward(&mut g, &p, out.patches);
                    let rows = t.shape()[0];
                    Some((g.reshape(ll, &[rows, c + 1]), t))
                }
                None => None,
            };
            let loss = sun_loss_graph(&mut g, global_logits, &labels, local, cfg.lambda)?;
            let lg = g.value(loss.global).item() as f64;
            if !lg.is_finite() {
                return Err(Error::Degenerate(format!("non-finite loss at epoch {epoch}, step {b}")));
            }
            sum_global += lg;
            sum_local += loss.local.map_or(0.0, |l| g.value(l).item() as f64);
            let mut grads = g.backward(loss.total);
            let grads = p.gradients(&mut grads);
            lr = schedule.lr(step);
            opt.step(&mut params, &grads, lr);
            step += 1;
        }
        let snapshot = Student::from_merged(vit, &params, &classes);
        let base_val_acc = match &val_split {
            Some(v) => Some(snapshot.accuracy(v, 128)?),
            None => None,
        };
        let m = EpochMetrics {
            epoch,
            loss_global: sum_global / steps_per_epoch as f64,
            loss_local: sum_local / steps_per_epoch as f64,
            lr,
            base_val_acc,
        };
        log::info!(
            "epoch {epoch}: global {:.4} local {:.4} lr {:.2e} val {:?}",
            m.loss_global,
            m.loss_local,
            m.lr,
            m.base_val_acc
        );
        on_epoch(&m, &snapshot)?;
        metrics.push(m);
    }
    Ok((Student::from_merged(vit, &params, &classes), metrics))
}

/// Dense-supervised training against a frozen teacher.
pub fn meta_train(
    vit: &ViTConfig,
    teacher: &TeacherModel,
    data: &LoadedSplit,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    on_epoch: &mut EpochHook<'_>,
) -> Result<(Student, Vec<EpochMetrics>)> {
    if !same_architecture(&teacher.backbone.config, vit) {
        return Err(Error::Config(format!(
            "teacher backbone {:?} differs from student backbone {:?}",
            teacher.backbone.config, vit
        )));
    }
    train(vit, data, cfg, aug, Some(teacher), on_epoch)
}

/// Global-supervision-only control arm.
pub fn baseline_train(
    vit: &ViTConfig,
    data: &LoadedSplit,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    on_epoch: &mut EpochHook<'_>,
) -> Result<(Student, Vec<EpochMetrics>)> {
    let cfg = TrainConfig {
        lambda: 0.0,
        ..cfg.clone()
    };
    train(vit, data, &cfg, aug, None, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::StemConfig;
    use crate::data::SyntheticSpec;

    fn scalar_ce(logits: &[f64], target: &[f64]) -> f64 {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        logits.iter().zip(target).map(|(l, q)| -q * ((l - m) - z.ln())).sum()
    }

    fn pseudo(rows: &[[f32; 3]]) -> PseudoLabelMap {
        PseudoLabelMap {
            n_tokens: rows.len(),
            n_classes: 2,
            topk: 2,
            labels: rows.iter().flatten().copied().collect(),
            background: rows.iter().map(|r| r[2] == 1.0).collect(),
        }
    }

    #[test]
    fn loss_matches_scalar_oracle_and_is_linear_in_lambda() {
        let gl = [0.3, -1.2];
        let ll = [0.5, 0.1, -0.4, 1.5, -0.2, 0.7];
        let pl = pseudo(&[[0.75, 0.25, 0.0], [0.0, 0.0, 1.0]]);
        let expect = scalar_ce(&gl, &[0.0, 1.0])
            + 0.5 * (scalar_ce(&ll[..3], &[0.75, 0.25, 0.0]) + scalar_ce(&ll[3..], &[0.0, 0.0, 1.0]));
        let got = sun_loss(&gl, 1, &ll, &pl, 0.5).unwrap();
        assert!((got - expect).abs() < 1e-9);
        let l0 = sun_loss(&gl, 1, &ll, &pl, 0.0).unwrap();
        let l1 = sun_loss(&gl, 1, &ll, &pl, 1.0).unwrap();
        assert!((l0 - scalar_ce(&gl, &[0.0, 1.0])).abs() < 1e-12);
        assert!((got - (l0 + 0.5 * (l1 - l0))).abs() < 1e-12);
        let uniform = sun_loss(&[0.0; 2], 0, &ll, &pl, 0.0).unwrap();
        assert!((uniform - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(sun_loss(&gl, 1, &ll[..3], &pl, 0.5), Err(Error::Input(_))));
    }

    fn toy_vit() -> ViTConfig {
        ViTConfig {
            image_size: 16,
            patch_grid: [2, 2],
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            drop_path_rate: 0.1,
            stem: StemConfig { channels: 4 },
            class_token: false,
        }
    }

    fn toy_data() -> LoadedSplit {
        let spec = SyntheticSpec {
            n_classes: 6,
            n_base: 4,
            images_per_class: 12,
            image_size: 16,
            ..SyntheticSpec::default()
        };
        spec.render().unwrap().0
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            warmup_epochs: 1,
            topk: 2,
            val_stride: 4,
            ..TrainConfig::default()
        }
    }

    fn toy_aug() -> AugmentConfig {
        AugmentConfig {
            output_size: 16,
            ..AugmentConfig::default()
        }
    }

    #[test]
    fn zero_lambda_equals_baseline_and_teacher_stays_frozen() {
        let data = toy_data();
        let (vit, cfg, aug) = (toy_vit(), toy_cfg(), toy_aug());
        let teacher = TeacherModel::from_student(&Student::build(&vit, data.spec.classes.clone(), 9).unwrap());
        let before = teacher.clone();
        let zero = TrainConfig { lambda: 0.0, ..cfg.clone() };
        let (s0, m0) = meta_train(&vit, &teacher, &data, &zero, &aug, &mut |_, _| Ok(())).unwrap();
        let (sb, mb) = baseline_train(&vit, &data, &cfg, &aug, &mut |_, _| Ok(())).unwrap();
        assert_eq!(m0, mb);
        assert_eq!(s0, sb);
        let (_, md) = meta_train(&vit, &teacher, &data, &cfg, &aug, &mut |_, _| Ok(())).unwrap();
        assert!(md.iter().all(|m| m.loss_local > 0.0));
        assert_eq!(teacher, before);
    }

    #[test]
    fn mismatched_teacher_is_a_config_error() {
        let data = toy_data();
        let other = ViTConfig {
            patch_grid: [1, 1],
            ..toy_vit()
        };
        let teacher = TeacherModel::from_student(&Student::build(&other, data.spec.classes.clone(), 1).unwrap());
        let r = meta_train(&toy_vit(), &teacher, &data, &toy_cfg(), &toy_aug(), &mut |_, _| Ok(()));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn student_checkpoint_round_trips() {
        let s = Student::build(&toy_vit(), vec!["a".into(), "b".into()], 3).unwrap();
        let back = Student::from_checkpoint(&Checkpoint::from_bytes(&s.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap())
            .unwrap();
        assert_eq!(back, s);
    }
}

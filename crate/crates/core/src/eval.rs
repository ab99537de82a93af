//! Episode sampling and few-shot evaluation with confidence intervals.

use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::data::{Image, LoadedSplit, SplitSpec};
use crate::error::{Error, Result};
use crate::meta_tune::{classifier_prototypes, predict, FewShotModel};
use crate::par;
use crate::seed::{self, label, Rng};

/// One N-way K-shot task. Indices refer to the source split; labels are
/// remapped to `0..way`, and both lists are class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    /// Split-level class id of each episode class.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

pub fn sample_episode(split: &SplitSpec, way: usize, shot: usize, queries: usize, rng: &mut Rng) -> Result<Episode> {
    if way == 0 || shot == 0 || queries == 0 {
        return Err(Error::Parameter("way, shot and queries must be positive".into()));
    }
    if split.n_classes() < way {
        return Err(Error::Data(format!(
            "split `{}` has {} classes, {way}-way episodes need {way}",
            split.name,
            split.n_classes()
        )));
    }
    let classes: Vec<usize> = index::sample(rng, split.n_classes(), way).into_vec();
    let mut ep = Episode {
        way,
        shot,
        queries,
        classes: classes.clone(),
        support: Vec::with_capacity(way * shot),
        support_labels: Vec::with_capacity(way * shot),
        query: Vec::with_capacity(way * queries),
        query_labels: Vec::with_capacity(way * queries),
    };
    for (k, &c) in classes.iter().enumerate() {
        let items = &split.class_items[c];
        if items.len() < shot + queries {
            return Err(Error::Data(format!(
                "class `{}` has {} items, episodes need {}",
                split.classes[c],
                items.len(),
                shot + queries
            )));
        }
        let picked = index::sample(rng, items.len(), shot + queries).into_vec();
        for (n, &i) in picked.iter().enumerate() {
            if n < shot {
                ep.support.push(items[i]);
                ep.support_labels.push(k);
            } else {
                ep.query.push(items[i]);
                ep.query_labels.push(k);
            }
        }
    }
    Ok(ep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub n_tasks: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub per_task: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            way: 5,
            shot: 1,
            queries: 15,
            n_tasks: 2000,
            seed: 0,
            batch_size: 128,
            per_task: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub n_tasks: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub seed: u64,
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_task: Option<Vec<f64>>,
}

/// Mean and `1.96 · s / √n` with the `n − 1` sample deviation; a single
/// value has zero half-width.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Accuracy of one task given cached features of the whole split.
pub fn task_accuracy(features: &[Vec<f64>], ep: &Episode, model: &FewShotModel) -> Result<f64> {
    let groups: Vec<Vec<Vec<f64>>> = (0..ep.way)
        .map(|k| ep.support[k * ep.shot..(k + 1) * ep.shot].iter().map(|&i| features[i].clone()).collect())
        .collect();
    let protos = classifier_prototypes(&groups, model.temperature, model.feat.as_ref())?;
    let mut correct = 0usize;
    for (&i, &y) in ep.query.iter().zip(&ep.query_labels) {
        correct += usize::from(predict(&features[i], &protos)? == y);
    }
    Ok(correct as f64 / ep.query.len() as f64)
}

/// Eval-mode global features of every image in `split`.
pub fn split_features(model: &FewShotModel, split: &LoadedSplit, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let images: Vec<&Image> = split.images.iter().collect();
    let f = model.backbone.global_features(&images, &split.normalization, batch_size)?;
    Ok(f.into_iter().map(|v| v.into_iter().map(f64::from).collect()).collect())
}

/// Evaluate over `cfg.n_tasks` tasks; task `t` draws from its own stream.
pub fn evaluate(model: &FewShotModel, split: &LoadedSplit, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.n_tasks == 0 {
        return Err(Error::Parameter("n_tasks must be positive".into()));
    }
    let features = split_features(model, split, cfg.batch_size)?;
    evaluate_features(&features, &split.spec, model, cfg)
}

pub fn evaluate_features(
    features: &[Vec<f64>],
    spec: &SplitSpec,
    model: &FewShotModel,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let accs = par::map_range(cfg.n_tasks, |t| {
        let mut rng = seed::stream(cfg.seed, &[label::EVAL, t as u64]);
        let ep = sample_episode(spec, cfg.way, cfg.shot, cfg.queries, &mut rng)?;
        task_accuracy(features, &ep, model)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let (mean_acc, ci95) = mean_ci95(&accs);
    Ok(EvalReport {
        way: cfg.way,
        shot: cfg.shot,
        queries: cfg.queries,
        n_tasks: cfg.n_tasks,
        mean_acc,
        ci95,
        seed: cfg.seed,
        checkpoint: None,
        per_task: cfg.per_task.then_some(accs),
    })
}

/// `task_index,accuracy` rows.
pub fn write_per_task_csv(path: &Path, accs: &[f64]) -> Result<()> {
    let mut text = String::from("task_index,accuracy\n");
    for (i, a) in accs.iter().enumerate() {
        text.push_str(&format!("{i},{a}\n"));
    }
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::HashSet;

    fn spec(classes: usize, per: usize) -> SplitSpec {
        let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per)).collect();
        SplitSpec::from_labels("test", (0..classes).map(|c| format!("k{c}")).collect(), &labels)
    }

    #[test]
    fn episodes_are_disjoint_and_deterministic() {
        let s = spec(6, 20);
        let a = sample_episode(&s, 5, 5, 15, &mut Rng::seed_from_u64(3)).unwrap();
        let b = sample_episode(&s, 5, 5, 15, &mut Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let sup: HashSet<_> = a.support.iter().collect();
        assert!(a.query.iter().all(|q| !sup.contains(q)));
        assert_eq!(a.support.len(), 25);
        assert_eq!(a.query.len(), 75);
        let all = sample_episode(&s, 6, 1, 1, &mut Rng::seed_from_u64(0)).unwrap();
        let mut cls = all.classes.clone();
        cls.sort();
        assert_eq!(cls, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn insufficient_data_is_a_data_error() {
        assert!(matches!(
            sample_episode(&spec(4, 20), 5, 1, 15, &mut Rng::seed_from_u64(0)),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            sample_episode(&spec(6, 10), 5, 1, 15, &mut Rng::seed_from_u64(0)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn ci_closed_forms() {
        let (m, ci) = mean_ci95(&[0.8, 0.6, 1.0]);
        assert!((m - 0.8).abs() < 1e-12);
        assert!((ci - 1.96 * 0.2 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_ci95(&[0.4; 10]), (0.4, 0.0));
    }
}

use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

use sunfs::augment::{sca_pair_from_seed, AugmentConfig};
use sunfs::backbone::global_pool;
use sunfs::data::{DatasetManifest, Image, Normalization, SplitSpec};
use sunfs::eval::{mean_ci95, sample_episode};
use sunfs::meta_train::sun_loss;
use sunfs::meta_tune::{cosine_classify, PrototypeSet};
use sunfs::seed::Rng;
use sunfs::supervision::{background_filtrate, topk_sparsify, ScoreGrid};

fn grids(seed: u64, b: usize, k: usize, c: usize) -> Vec<ScoreGrid> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..b)
        .map(|_| {
            let l: Vec<f32> = (0..k * c).map(|_| rng.random_range(-5.0f32..5.0)).collect();
            ScoreGrid::from_logits(k, c, &l)
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn pooling_ignores_patch_order(k in 1usize..12, d in 1usize..8, seed in any::<u64>()) {
        let mut rng = Rng::seed_from_u64(seed);
        let tokens: Vec<f64> = (0..k * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut order: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<f64> = order.iter().flat_map(|&j| tokens[j * d..(j + 1) * d].to_vec()).collect();
        let a = global_pool(&tokens, d);
        let b = global_pool(&shuffled, d);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn filtration_follows_images_when_batch_is_shuffled(
        b in 2usize..6, k in 1usize..10, c in 2usize..6, p in 0u32..=100, seed in any::<u64>()
    ) {
        let batch = grids(seed, b, k, c);
        let mut order: Vec<usize> = (0..b).collect();
        order.rotate_left((seed % b as u64) as usize);
        order.reverse();
        let shuffled: Vec<ScoreGrid> = order.iter().map(|&i| batch[i].clone()).collect();
        let a = background_filtrate(&batch, p as f64, 2.min(c)).unwrap();
        let s = background_filtrate(&shuffled, p as f64, 2.min(c)).unwrap();
        for (slot, &i) in order.iter().enumerate() {
            prop_assert_eq!(&s[slot], &a[i]);
        }
    }

    #[test]
    fn foreground_rows_equal_topk_sparsify(k in 1usize..10, c in 1usize..6, p in 0u32..=100, seed in any::<u64>()) {
        let batch = grids(seed, 3, k, c);
        let topk = 1 + (seed as usize) % c;
        let maps = background_filtrate(&batch, p as f64, topk).unwrap();
        for (g, m) in batch.iter().zip(&maps) {
            let sparse = topk_sparsify(g, topk).unwrap();
            for j in 0..k {
                if !m.background[j] {
                    prop_assert_eq!(&m.row(j)[..c], sparse.row(j));
                }
            }
        }
    }

    #[test]
    fn sun_loss_is_nonnegative_and_linear_in_weight(
        k in 1usize..6, c in 2usize..5, lambda in 0.0f64..3.0, seed in any::<u64>()
    ) {
        let mut rng = Rng::seed_from_u64(seed);
        let map = &background_filtrate(&grids(seed, 1, k, c), 20.0, 1).unwrap()[0];
        let global: Vec<f64> = (0..c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let local: Vec<f64> = (0..k * (c + 1)).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y = rng.random_range(0..c);
        let at = |l: f64| sun_loss(&global, y, &local, map, l).unwrap();
        let (l0, l1, ll) = (at(0.0), at(1.0), at(lambda));
        prop_assert!(l0 >= 0.0 && ll >= 0.0);
        prop_assert!((ll - (l0 + lambda * (l1 - l0))).abs() < 1e-9 * (1.0 + ll.abs()));
    }

    #[test]
    fn cosine_argmax_ignores_prototype_scale(
        protos in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..5),
        q in prop::collection::vec(-3.0f64..3.0, 3),
        which in 0usize..5,
        a in 1e-2f64..1e2,
    ) {
        prop_assume!(protos.iter().all(|w| w.iter().map(|v| v * v).sum::<f64>() > 1e-4));
        prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-4);
        let which = which % protos.len();
        let base = cosine_classify(&q, &PrototypeSet { prototypes: protos.clone(), temperature: 10.0 }).unwrap();
        let mut scaled = protos.clone();
        scaled[which].iter_mut().for_each(|v| *v *= a);
        let moved = cosine_classify(&q, &PrototypeSet { prototypes: scaled, temperature: 10.0 }).unwrap();
        let mut sorted = base.clone();
        sorted.sort_by(|x, y| y.total_cmp(x));
        prop_assume!(sorted[0] - sorted[1] > 1e-9);
        prop_assert_eq!(argmax(&base), argmax(&moved));
    }

    #[test]
    fn normalization_round_trips(
        w in 1usize..6, h in 1usize..6,
        mean in prop::array::uniform3(0.0f32..1.0),
        std in prop::array::uniform3(0.05f32..2.0),
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::seed_from_u64(seed);
        let img = Image::from_vec(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap();
        let n = Normalization { mean, std };
        let back = n.denormalize(&n.normalize(&img));
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn episodes_never_share_items(way in 2usize..6, shot in 1usize..5, queries in 1usize..8, seed in any::<u64>()) {
        let labels: Vec<usize> = (0..8).flat_map(|c| std::iter::repeat_n(c, 12)).collect();
        let spec = SplitSpec::from_labels("s", (0..8).map(|c| format!("k{c}")).collect(), &labels);
        let ep = sample_episode(&spec, way, shot, queries, &mut Rng::seed_from_u64(seed)).unwrap();
        for q in &ep.query {
            prop_assert!(!ep.support.contains(q));
        }
        for (i, &l) in ep.support.iter().zip(&ep.support_labels) {
            prop_assert_eq!(labels[*i], ep.classes[l]);
        }
        for (i, &l) in ep.query.iter().zip(&ep.query_labels) {
            prop_assert_eq!(labels[*i], ep.classes[l]);
        }
    }

    #[test]
    fn ci_matches_two_pass_oracle(values in prop::collection::vec(0.0f64..1.0, 2..300)) {
        let n = values.len() as f64;
        let mut mean = 0.0;
        for v in &values {
            mean += v;
        }
        mean /= n;
        let mut ss = 0.0;
        for v in &values {
            ss += (v - mean) * (v - mean);
        }
        let ci = 1.96 * (ss / (n - 1.0)).sqrt() / n.sqrt();
        let (m, c) = mean_ci95(&values);
        prop_assert!((m - mean).abs() < 1e-9 && (c - ci).abs() < 1e-9);
    }

    #[test]
    fn each_view_gets_only_its_own_stage(w in 8usize..40, h in 8usize..40, seed in any::<u64>()) {
        let mut rng = Rng::seed_from_u64(seed);
        let src = Image::from_vec(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap();
        let pair = sca_pair_from_seed(&src, &AugmentConfig::default(), seed).unwrap();
        prop_assert_eq!(&pair.x_tilde, &pair.params.apply(&src));
        prop_assert_eq!(&pair.x_bar, &pair.record.apply(&pair.x_tilde));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn split_order_ignores_csv_row_order(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_vec(2, 2, vec![0.5; 12]).unwrap();
        let mut rows: Vec<String> = (0..9).map(|i| format!("f{i}.png,c{}", i % 3)).collect();
        for i in 0..9 {
            img.save_png(&dir.path().join(format!("f{i}.png"))).unwrap();
        }
        let load = |rows: &[String]| {
            std::fs::write(dir.path().join("s.csv"), format!("filename,label\n{}\n", rows.join("\n"))).unwrap();
            let splits = [("s".to_string(), "s.csv".into())].into_iter().collect();
            DatasetManifest::new(dir.path(), 2, Normalization::default(), splits).load_split("s").unwrap()
        };
        let a = load(&rows);
        let mut rng = Rng::seed_from_u64(seed);
        for i in (1..rows.len()).rev() {
            rows.swap(i, rng.random_range(0..=i));
        }
        let b = load(&rows);
        prop_assert_eq!(a.items, b.items);
        prop_assert_eq!(a.spec, b.spec);
    }
}

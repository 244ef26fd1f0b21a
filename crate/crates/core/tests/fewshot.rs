use flor_core::backbone::*;
use flor_core::data::*;
use flor_core::fewshot::*;
use flor_core::params::ParamKind;
use flor_core::rng::SeedStream;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_rows(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn nearest_centroid(support: &[Vec<f64>], labels: &[usize], query: &[Vec<f64>], k: usize) -> Vec<usize> {
    let d = support[0].len();
    let mut c = vec![vec![0.0; d]; k];
    let mut n = vec![0.0; k];
    for (r, &l) in support.iter().zip(labels) {
        for j in 0..d {
            c[l][j] += r[j];
        }
        n[l] += 1.0;
    }
    query
        .iter()
        .map(|q| {
            let dist = |ci: &Vec<f64>, nc: f64| (0..d).map(|j| (q[j] - ci[j] / nc).powi(2)).sum::<f64>();
            let mut best = 0;
            for l in 1..k {
                if dist(&c[l], n[l]) < dist(&c[best], n[best]) {
                    best = l;
                }
            }
            best
        })
        .collect()
}

/// Dataset whose images are irrelevant; features are supplied separately.
fn index_dataset(classes: usize, per_class: usize) -> Dataset {
    let mut d = Dataset::new([3, 1, 1], (0..classes).map(|c| c.to_string()).collect(), Split::Novel);
    for c in 0..classes {
        for _ in 0..per_class {
            d.push(&[0.0; 3], c, "x").unwrap();
        }
    }
    d
}

fn tiny_model(mode: NormMode, classes: usize, seed: u64) -> Model<f64> {
    let mut c = BackboneConfig::cnn(&[4, 4], mode);
    c.input = [3, 8, 8];
    build_model(&c, classes, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn tiny_data(classes: usize, per_class: usize, split: Split, seed: u64) -> Dataset {
    let spec = SynthSpec {
        classes,
        per_class,
        image_size: 8,
        class_offset: 0,
        template_seed: 1,
        domain: DomainStyle::source(),
        split,
    };
    generate_synthetic(&spec, &mut SeedStream::new(seed).rng()).unwrap()
}

#[test]
fn zero_distance_query_takes_its_support_class() {
    let s = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 4.0]];
    let p = prototype_classify(&s, &[0, 1, 2], &[s[1].clone()], Calibration::None, Metric::Euclidean).unwrap();
    assert_eq!(p.labels, vec![1]);
    assert_eq!(p.scores[0][1], 0.0);
}

#[test]
fn two_way_geometry_under_both_metrics() {
    let s = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    for metric in [Metric::Euclidean, Metric::Cosine] {
        let p = prototype_classify(&s, &[0, 1], &[vec![0.9, 0.1]], Calibration::None, metric).unwrap();
        assert_eq!(p.labels, vec![0]);
    }
}

#[test]
fn calibration_centers_on_the_right_set() {
    let s = vec![vec![1.0, 1.0], vec![3.0, 1.0]];
    let q = vec![vec![0.0, 5.0]];
    let (cs, cq) = calibrate(&s, &q, Calibration::Inductive);
    assert_eq!(cs, vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
    assert_eq!(cq, vec![vec![-2.0, 4.0]]);
    let (cs, cq) = calibrate(&s, &q, Calibration::Transductive);
    assert_eq!(cs[0], vec![1.0, -4.0]);
    assert_eq!(cq[0], vec![0.0, 0.0]);
}

#[test]
fn classify_errors() {
    let s = vec![vec![1.0], vec![2.0]];
    assert!(matches!(prototypes(&s, &[0, 2]), Err(flor_core::CoreError::EmptyClass(_))));
    assert!(prototype_classify(&s, &[0], &[], Calibration::None, Metric::Cosine).is_err());
    assert!(prototype_classify(&s, &[0, 1], &[vec![1.0, 2.0]], Calibration::None, Metric::Cosine).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_brute_force_nearest_centroid(seed in 0u64..10_000, k in 2usize..=5, n in 1usize..=5, d in 1usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_rows(k * n, d, &mut rng);
        let labels: Vec<usize> = (0..k * n).map(|i| i % k).collect();
        let q = random_rows(20, d, &mut rng);
        let p = prototype_classify(&s, &labels, &q, Calibration::None, Metric::Euclidean).unwrap();
        prop_assert_eq!(p.labels, nearest_centroid(&s, &labels, &q, k));
    }

    #[test]
    fn inductive_calibration_removes_constant_offsets(seed in 0u64..10_000, offset in prop::collection::vec(-5.0f64..5.0, 6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_rows(15, 6, &mut rng);
        let labels: Vec<usize> = (0..15).map(|i| i % 5).collect();
        let q = random_rows(10, 6, &mut rng);
        let shift = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> { rows.iter().map(|r| r.iter().zip(&offset).map(|(a, o)| a - o).collect()).collect() };
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let a = prototype_classify(&s, &labels, &q, Calibration::Inductive, metric).unwrap();
            let b = prototype_classify(&shift(&s), &labels, &shift(&q), Calibration::Inductive, metric).unwrap();
            prop_assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn refinement_stops_on_repeat_or_cap(seed in 0u64..10_000, max_iters in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_rows(6, 3, &mut rng);
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let q = random_rows(12, 3, &mut rng);
        let p = prototypes(&s, &labels).unwrap();
        let r = transductive_refine(&s, &labels, &p, &q, Metric::Euclidean, max_iters, 0.0).unwrap();
        prop_assert!(r.iterations <= max_iters);
        prop_assert!(r.converged || r.iterations == max_iters);
        // the returned labels are the assignment under the returned prototypes
        prop_assert_eq!(&r.labels, &assign(&r.prototypes, &q, Metric::Euclidean).labels);
    }

    #[test]
    fn ci_matches_formula(accs in prop::collection::vec(0.0f64..=1.0, 1..50)) {
        let r = EvalResult::from_accuracies(accs.clone());
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!((r.mean_accuracy - mean).abs() < 1e-12);
        prop_assert!((r.ci95 - 1.96 * sd / n.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn refinement_fixed_point_converges_in_one_round() {
    let s = vec![vec![0.0, 0.0], vec![10.0, 10.0]];
    let q = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![10.0, 10.0]];
    let r = transductive_refine(&s, &[0, 1], &s, &q, Metric::Euclidean, 10, 1e-9).unwrap();
    assert_eq!(r.iterations, 1);
    assert!(r.converged);
    assert_eq!(r.labels, vec![0, 0, 1]);
}

#[test]
fn refinement_reaches_cluster_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let centers = [[-4.0, 0.0], [4.0, 1.0]];
    let mut q = Vec::new();
    for c in &centers {
        for _ in 0..50 {
            q.push(vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
        }
    }
    let s = vec![vec![-3.0, 0.5], vec![3.5, 0.0]];
    let r = transductive_refine(&s, &[0, 1], &s, &q, Metric::Euclidean, 20, 1e-9).unwrap();
    assert!(r.converged);
    // oracle: mean of the support point and its cluster
    for (c, proto) in r.prototypes.iter().enumerate() {
        let members: Vec<&Vec<f64>> = q[c * 50..(c + 1) * 50].iter().chain(std::iter::once(&s[c])).collect();
        for j in 0..2 {
            let want = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
            assert!((proto[j] - want).abs() < 1e-9);
        }
    }
    assert!(r.labels[..50].iter().all(|&l| l == 0) && r.labels[50..].iter().all(|&l| l == 1));
}

#[test]
fn refinement_iteration_cap() {
    let s = vec![vec![-3.0, 0.5], vec![3.5, 0.0]];
    let q = vec![vec![-4.0, 0.0], vec![4.0, 1.0], vec![0.4, 0.0]];
    let r = transductive_refine(&s, &[0, 1], &s, &q, Metric::Euclidean, 1, 0.0).unwrap();
    assert_eq!(r.iterations, 1);
    assert!(transductive_refine(&s, &[0, 1], &s, &q, Metric::Euclidean, 0, 0.0).is_err());
    // an empty pseudo-class keeps its previous prototype
    let far = [vec![100.0, 100.0]];
    let r = transductive_refine(&s[..1], &[0], &[s[0].clone(), far[0].clone()], &q, Metric::Euclidean, 3, 0.0).unwrap();
    assert_eq!(r.prototypes[1], far[0]);
}

#[test]
fn one_hot_features_score_perfectly() {
    let d = index_dataset(6, 20);
    let feats: Vec<Vec<f64>> = d.labels().iter().map(|&l| (0..6).map(|c| if c == l { 1.0 } else { 0.0 }).collect()).collect();
    let p = Protocol { k: 5, n: 1, q: 15, episodes: 50 };
    for method in [Method::Prototype, Method::Transductive { max_iters: 5, tol: 1e-9 }] {
        let r = evaluate_features(&feats, &d, &p, &method, Calibration::None, SeedStream::new(1)).unwrap();
        assert_eq!((r.mean_accuracy, r.ci95), (1.0, 0.0));
    }
}

#[test]
fn random_features_score_chance() {
    let d = index_dataset(10, 20);
    let feats = random_rows(d.len(), 16, &mut ChaCha8Rng::seed_from_u64(5));
    let p = Protocol { k: 5, n: 5, q: 15, episodes: 200 };
    let r = evaluate_features(&feats, &d, &p, &Method::Prototype, Calibration::None, SeedStream::new(2)).unwrap();
    let se = (0.2f64 * 0.8 / (200.0 * 75.0)).sqrt();
    assert!((r.mean_accuracy - 0.2).abs() < 3.0 * se, "{} vs 0.2 ± {}", r.mean_accuracy, 3.0 * se);
    let again = evaluate_features(&feats, &d, &p, &Method::Prototype, Calibration::None, SeedStream::new(2)).unwrap();
    assert_eq!(r, again);
    assert_eq!(r.per_episode.len(), 200);
}

#[test]
fn display_format() {
    let r = EvalResult { mean_accuracy: 0.62614, ci95: 0.0018, per_episode: vec![] };
    assert_eq!(r.display(), "62.61 ±0.18");
}

#[test]
fn finetune_with_zero_steps_only_swaps_the_head() {
    let m = tiny_model(NormMode::Flor, 6, 1);
    let d = tiny_data(4, 6, Split::Novel, 2);
    let ep = sample_episode(&d, 3, 2, 2, &mut SeedStream::new(3).rng()).unwrap();
    let cfg = FinetuneConfig { steps: 0, ..Default::default() };
    let t = finetune(&m, &d, &ep, &cfg).unwrap();
    for (_, p) in m.store.iter().filter(|(_, p)| !p.name.starts_with("head")) {
        let q = t.store.iter().find(|(_, q)| q.name == p.name).unwrap().1;
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    assert_eq!(t.heads[0].classes, 3);
    assert!(matches!(t.heads[0].kind, HeadKind::Cosine { .. }));
    assert_eq!(t.current_deltas(), vec![0.5; m.num_flor_layers()]);
    // the original is untouched
    assert_eq!(m.heads[0].classes, 6);
}

#[test]
fn freezing_every_stage_trains_only_head_and_mix() {
    let m = tiny_model(NormMode::Flor, 6, 1);
    let d = tiny_data(4, 6, Split::Novel, 2);
    let ep = sample_episode(&d, 3, 2, 2, &mut SeedStream::new(3).rng()).unwrap();
    let stages = m.num_stages();
    let cfg = FinetuneConfig { steps: 5, freeze_depth: stages, lr: 0.5, ..Default::default() };
    let before = finetune(&m, &d, &ep, &FinetuneConfig { steps: 0, ..cfg.clone() }).unwrap();
    let after = finetune(&m, &d, &ep, &cfg).unwrap();
    let mut changed = Vec::new();
    for ((_, a), (_, b)) in before.store.iter().zip(after.store.iter()) {
        if a.value != b.value {
            changed.push((a.name.clone(), a.kind));
        }
    }
    assert!(changed.iter().any(|(n, _)| n.starts_with("finetune_head")));
    assert!(changed.iter().all(|(n, k)| n.starts_with("finetune_head") || *k == ParamKind::Mix), "{changed:?}");
    assert!(FinetuneConfig { freeze_depth: stages + 1, ..cfg }.validate(stages).is_err());
}

#[test]
fn learnable_deltas_stay_in_unit_interval() {
    let m = tiny_model(NormMode::Flor, 6, 4);
    let d = tiny_data(4, 6, Split::Novel, 5);
    let ep = sample_episode(&d, 3, 2, 2, &mut SeedStream::new(6).rng()).unwrap();
    for steps in [1, 3, 8] {
        let t = finetune(&m, &d, &ep, &FinetuneConfig { steps, lr: 5.0, ..Default::default() }).unwrap();
        assert!(t.current_deltas().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn finetune_evaluation_is_deterministic() {
    let m = tiny_model(NormMode::Flor, 6, 7);
    let d = tiny_data(4, 6, Split::Novel, 8);
    let p = Protocol { k: 3, n: 1, q: 2, episodes: 3 };
    let method = Method::Finetune(FinetuneConfig { steps: 2, ..Default::default() });
    let a = evaluate(&m, &d, &p, &method, Calibration::None, SeedStream::new(1)).unwrap();
    let b = evaluate(&m, &d, &p, &method, Calibration::None, SeedStream::new(1)).unwrap();
    assert_eq!(a, b);
    assert!(evaluate(&m, &d, &p, &method, Calibration::Inductive, SeedStream::new(1)).is_ok());
}

#[test]
fn zero_lr_training_leaves_parameters() {
    let mut m = tiny_model(NormMode::Flor, 3, 9);
    let d = tiny_data(3, 6, Split::Base, 10);
    let before = m.store.clone();
    let cfg = TrainConfig { epochs: 3, batch_size: 4, lr: 0.0, weight_decay: 0.0, sam: None };
    let logs = train_base(&mut m, &d, &cfg, SeedStream::new(1), |_| {}).unwrap();
    assert_eq!(logs.len(), 3);
    for ((_, a), (_, b)) in before.iter().zip(m.store.iter()) {
        if a.kind != ParamKind::Buffer {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
}

#[test]
fn train_base_preconditions() {
    let mut m = tiny_model(NormMode::Bn, 3, 9);
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
    assert!(train_base(&mut m, &tiny_data(3, 4, Split::Novel, 1), &cfg, SeedStream::new(1), |_| {}).is_err());
    assert!(train_base(&mut m, &tiny_data(4, 4, Split::Base, 1), &cfg, SeedStream::new(1), |_| {}).is_err());
    let cfg = TrainConfig { batch_size: 1, ..cfg };
    assert!(train_base(&mut m, &tiny_data(3, 4, Split::Base, 1), &cfg, SeedStream::new(1), |_| {}).is_err());
    let d = TrainConfig::default();
    assert_eq!((d.lr, d.epochs), (1e-3, 400));
}

/// Left-bright vs right-bright 8×8 images with pixel noise.
fn halves_dataset(per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Dataset::new([3, 8, 8], vec!["left".into(), "right".into()], Split::Base);
    for i in 0..2 * per_class {
        let label = i % 2;
        let mut img = vec![0.0f32; 192];
        for (j, v) in img.iter_mut().enumerate() {
            let x = j % 8;
            let lit = (x < 4) == (label == 0);
            *v = (if lit { 0.7 } else { 0.3 }) + rng.random_range(-0.2f32..0.2);
        }
        d.push(&img, label, "toy").unwrap();
    }
    d
}

#[test]
fn separable_toy_set_is_learned() {
    let d = halves_dataset(32, 11);
    // logistic regression on raw pixels separates the set
    let mut w = vec![0.0f64; 192];
    let mut b = 0.0;
    for _ in 0..200 {
        let mut gw = vec![0.0; 192];
        let mut gb = 0.0;
        for i in 0..d.len() {
            let x = d.image(i);
            let z: f64 = x.iter().zip(&w).map(|(&a, b)| a as f64 * b).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - d.labels()[i] as f64;
            gw.iter_mut().zip(x).for_each(|(g, &a)| *g += err * a as f64);
            gb += err;
        }
        w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= 0.1 * g / d.len() as f64);
        b -= 0.1 * gb / d.len() as f64;
    }
    let lr_acc = (0..d.len())
        .filter(|&i| {
            let z: f64 = d.image(i).iter().zip(&w).map(|(&a, b)| a as f64 * b).sum::<f64>() + b;
            (z > 0.0) == (d.labels()[i] == 1)
        })
        .count();
    assert_eq!(lr_acc, d.len());

    let mut m = tiny_model(NormMode::Bn, 2, 12);
    let cfg = TrainConfig { epochs: 50, batch_size: 16, ..Default::default() };
    let logs = train_base(&mut m, &d, &cfg, SeedStream::new(3), |_| {}).unwrap();
    assert!(logs.last().unwrap().accuracy > 0.95, "{:?}", logs.last());
}

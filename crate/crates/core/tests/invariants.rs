use candle_core::{Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uda_core::curriculum::{self, DifficultyScore, TrainSchedule};
use uda_core::data_domains::WeatherCondition;
use uda_core::eval_report::{EvalResult, Prediction};
use uda_core::losses;
use uda_core::perturbation;

fn softmax_rows(logits: &[Vec<f64>]) -> Tensor {
    let k = logits[0].len();
    let flat: Vec<f64> = logits
        .iter()
        .flat_map(|row| {
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - hi).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / z)
        })
        .collect();
    Tensor::from_vec(flat, (logits.len(), k), &Device::Cpu).unwrap()
}

fn logits_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..8, 1usize..6)
        .prop_flat_map(|(k, b)| prop::collection::vec(prop::collection::vec(-8.0f64..8.0, k), b))
}

fn per_row(t: &Tensor) -> Vec<f64> {
    t.to_vec1::<f64>().unwrap()
}

proptest! {
    #[test]
    fn lambda_is_monotone_and_bounded(lambda0 in 0.0f64..1.0, growth in 0.1f64..5.0, a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let s = TrainSchedule { lambda0, growth, ..TrainSchedule::default() };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(s.lambda(lo) <= s.lambda(hi) + 1e-15);
        prop_assert!(s.lambda(lo) >= lambda0 - 1e-15 && s.lambda(hi) <= 1.0);
    }

    #[test]
    fn mu_is_monotone_in_unit_interval(n in 0u64..5000, m in 0u64..5000) {
        let s = TrainSchedule::default();
        let (lo, hi) = if n <= m { (n, m) } else { (m, n) };
        prop_assert!((0.0..=1.0).contains(&s.mu(lo)));
        prop_assert!(s.mu(lo) <= s.mu(hi));
    }

    #[test]
    fn focal_never_exceeds_ce(logits in logits_strategy(), tau in 0.0f64..5.0, seed in any::<u64>()) {
        let p = softmax_rows(&logits);
        let k = logits[0].len();
        let labels: Vec<usize> = (0..logits.len()).map(|i| (seed as usize + i) % k).collect();
        let focal = per_row(&losses::focal_loss_per_sample(&p, &labels, tau).unwrap());
        let ce = per_row(&losses::cross_entropy_per_sample(&p, &labels).unwrap());
        for (f, c) in focal.iter().zip(&ce) {
            prop_assert!(*f >= 0.0 && *f <= c + 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative(a in logits_strategy(), shift in -2.0f64..2.0) {
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().enumerate().map(|(i, v)| v + shift * i as f64).collect()).collect();
        let kl = per_row(&losses::kl_divergence(&softmax_rows(&a), &softmax_rows(&b)).unwrap());
        prop_assert!(kl.iter().all(|v| *v >= -1e-12));
    }

    #[test]
    fn offset_loss_is_zero_for_identical_branches(a in logits_strategy(), kappa in 0.0f64..1.0, clean in any::<bool>()) {
        let p = softmax_rows(&a);
        let omega = if clean { losses::Omega::Clean } else { losses::Omega::Perturbed };
        let v = losses::offset_refinement_loss_with(&p, &p, kappa, omega).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(v.abs() < 1e-12);
    }

    #[test]
    fn skd_stays_in_bounds(v in prop::collection::vec(-5.0f64..5.0, 18)) {
        let t = |o: usize| Tensor::from_vec(v[o..o + 6].to_vec(), (1, 6), &Device::Cpu).unwrap();
        let s = losses::skd_loss(&t(0), &t(6), &t(12)).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!((-2.0..=2.0).contains(&s));
    }

    #[test]
    fn pairing_is_a_derangement(b in 2usize..40, seed in any::<u64>()) {
        let p = perturbation::pair_within_batch(b, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut sorted = p.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..b).collect::<Vec<_>>());
        prop_assert!(p.iter().enumerate().all(|(i, &j)| i != j));
    }

    #[test]
    fn offset_interpolates(x in prop::collection::vec(-3.0f64..3.0, 8), y in prop::collection::vec(-3.0f64..3.0, 8), g in 0.0f64..1.0) {
        let tx = Tensor::from_vec(x.clone(), (2, 4), &Device::Cpu).unwrap();
        let ty = Tensor::from_vec(y.clone(), (2, 4), &Device::Cpu).unwrap();
        let out = perturbation::offset_tensor(&tx, &ty, g).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..8 {
            prop_assert!((out[i] - ((1.0 - g) * x[i] + g * y[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn blended_scores_stay_in_unit_interval(prior in 0.0f64..=1.0, ce in 0.0f64..=1.0, phi in 0.0f64..=1.0) {
        let s = curriculum::difficulty_score(prior, ce, phi).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn selection_separates_kept_from_dropped(scores in prop::collection::vec(0u8..5, 1..30), e in 0usize..10) {
        let sched = TrainSchedule::default();
        let pool: Vec<DifficultyScore> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| DifficultyScore { sample_id: format!("s{i:03}"), prior: 0.0, dynamic: 0.0, blended: s as f64 })
            .collect();
        let t = sched.epoch_time(e);
        let kept = curriculum::select_subset(&pool, t, &sched).unwrap();
        prop_assert_eq!(kept.len(), curriculum::subset_size(pool.len(), t, &sched));
        let min_kept = pool.iter().filter(|s| kept.contains(&s.sample_id)).map(|s| s.blended).fold(f64::INFINITY, f64::min);
        let max_dropped = pool.iter().filter(|s| !kept.contains(&s.sample_id)).map(|s| s.blended).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_kept >= max_dropped);
    }

    #[test]
    fn prior_scores_stay_in_unit_interval(iqa in 0.0f64..=1.0, w in 0usize..5) {
        let s = curriculum::prior_score(iqa, WeatherCondition::ALL[w]).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn accuracy_matches_counts(pairs in prop::collection::vec((0usize..4, 0usize..4, 0usize..6), 1..60)) {
        let labels: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let preds: Vec<Prediction> = pairs
            .iter()
            .map(|&(y, p, w)| Prediction { label: y, predicted: p, weather: WeatherCondition::ALL.get(w).copied() })
            .collect();
        let r = EvalResult::from_predictions(&labels, &preds).unwrap();
        let correct = pairs.iter().filter(|(y, p, _)| y == p).count();
        prop_assert!((r.overall_acc - correct as f64 / pairs.len() as f64).abs() < 1e-12);
        let total: usize = r.confusion.iter().flatten().sum();
        prop_assert_eq!(total, pairs.len());
        let tagged: usize = r.per_weather.iter().map(|b| b.total).sum();
        prop_assert_eq!(tagged + r.untagged, pairs.len());
    }
}

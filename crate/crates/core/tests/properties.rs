use exagree_core::attribution::{rank_by_magnitude, AttributionVector, Ranking};
use exagree_core::data::{generate_synthetic, split, SyntheticSpec};
use exagree_core::diffsort::{plan_for, soft_sort, spearman_exact, spearman_soft};
use exagree_core::elicitation::{compile_target, parse_preferences, render, Statement};
use exagree_core::metrics::{agreement_suite, pairwise_rank_agreement, topk_count};
use exagree_core::models::{train_logistic, Mask};
use exagree_core::rashomon::{is_in_rashomon, rashomon_bound, sample_masks, RashomonConfig, RashomonContext};
use proptest::prelude::*;
use proptest::sample::subsequence;

fn permutation(p: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..p).collect::<Vec<_>>()).prop_shuffle()
}

fn ranking_pair() -> impl Strategy<Value = (Ranking, Ranking)> {
    (2usize..=24).prop_flat_map(|p| (permutation(p), permutation(p))).prop_map(|(a, b)| {
        (Ranking::from_order(&a).unwrap(), Ranking::from_order(&b).unwrap())
    })
}

fn values(max_p: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 2..=max_p)
}

fn names(p: usize) -> Vec<String> {
    (0..p).map(|i| format!("x{i}")).collect()
}

fn reversed(r: &Ranking) -> Ranking {
    let p = r.len();
    Ranking::from_ranks(r.ranks().iter().map(|k| p + 1 - k).collect()).unwrap()
}

proptest! {
    #[test]
    fn ranking_order_round_trip(order in (1usize..40).prop_flat_map(permutation)) {
        let r = Ranking::from_order(&order).unwrap();
        prop_assert_eq!(r.order(), order.clone());
        prop_assert_eq!(Ranking::from_ranks(r.ranks().to_vec()).unwrap(), r);
    }

    #[test]
    fn spearman_is_bounded_and_symmetric((a, b) in ranking_pair()) {
        let ab = spearman_exact(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, spearman_exact(&b, &a).unwrap());
        prop_assert!((spearman_exact(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((spearman_exact(&a, &reversed(&a)).unwrap() + 1.0).abs() < 1e-12);
        // Reversing one side flips the sign.
        prop_assert!((spearman_exact(&a, &reversed(&b)).unwrap() + ab).abs() < 1e-12);
    }

    #[test]
    fn soft_spearman_matches_exact_on_integer_ranks((a, b) in ranking_pair()) {
        let (rho, grad) = spearman_soft(&a.as_f64(), &b).unwrap();
        prop_assert!((rho - spearman_exact(&a, &b).unwrap()).abs() < 1e-12);
        prop_assert_eq!(grad.len(), a.len());
        // Correlation is shift invariant, so the gradient sums to zero.
        prop_assert!(grad.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn pairwise_agreement_complements_reversal((a, b) in ranking_pair()) {
        let pa = pairwise_rank_agreement(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&pa));
        prop_assert_eq!(pa, pairwise_rank_agreement(&b, &a).unwrap());
        let flipped = pairwise_rank_agreement(&a, &reversed(&b)).unwrap();
        prop_assert!((pa + flipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_permutation_is_doubly_stochastic(v in values(33), beta in 0.1f64..100.0) {
        let p = v.len();
        let plan = plan_for(p).unwrap();
        let sp = soft_sort(&v, &plan, beta).unwrap();
        for i in 0..p {
            let row: f64 = sp.matrix.row(i).sum();
            let col: f64 = sp.matrix.column(i).sum();
            prop_assert!((row - 1.0).abs() < 1e-9, "row {} sums to {}", i, row);
            prop_assert!((col - 1.0).abs() < 1e-9, "column {} sums to {}", i, col);
        }
        prop_assert!(sp.matrix.iter().all(|&w| w >= -1e-12 && w <= 1.0 + 1e-12));
        for r in &sp.soft_ranks {
            prop_assert!(*r >= 1.0 - 1e-9 && *r <= p as f64 + 1e-9, "rank {}", r);
        }
        let total: f64 = sp.soft_ranks.iter().sum();
        prop_assert!((total - (p * (p + 1)) as f64 / 2.0).abs() < 1e-8);
        let vs: f64 = v.iter().sum();
        prop_assert!((sp.sorted_values.iter().sum::<f64>() - vs).abs() < 1e-8);
    }

    #[test]
    fn steep_soft_sort_agrees_with_hard_sort(v in values(20)) {
        let plan = plan_for(v.len()).unwrap();
        let sp = soft_sort(&v, &plan, 1e9).unwrap();
        let hard = plan.hard_sort(&v);
        prop_assert!(hard.windows(2).all(|w| w[0] >= w[1]));
        for (s, h) in sp.sorted_values.iter().zip(&hard) {
            prop_assert!((s - h).abs() < 1e-6, "{} vs {}", s, h);
        }
    }

    #[test]
    fn agreement_metrics_are_nested(
        (e, g) in (2usize..30).prop_flat_map(|p| (
            prop::collection::vec(-5i32..=5, p),
            prop::collection::vec(-5i32..=5, p),
        )),
        k in 0.01f64..=1.0,
    ) {
        let e = AttributionVector::new(e.into_iter().map(f64::from).collect(), "e", "m").unwrap();
        let g = AttributionVector::new(g.into_iter().map(f64::from).collect(), "g", "m").unwrap();
        let a = agreement_suite(&e, &g, k).unwrap();
        for v in [a.fa, a.ra, a.sa, a.sra] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(a.ra <= a.fa && a.sa <= a.fa);
        prop_assert!(a.sra <= a.ra.min(a.sa));
        let own = agreement_suite(&g, &g, k).unwrap();
        prop_assert_eq!((own.fa, own.ra, own.sa, own.sra), (1.0, 1.0, 1.0, 1.0));
        let kk = topk_count(g.len(), k).unwrap();
        prop_assert!(kk >= 1 && kk <= g.len());
    }

    #[test]
    fn magnitude_ranking_ignores_sign(v in values(30)) {
        let flipped: Vec<f64> = v.iter().map(|x| -x).collect();
        prop_assert_eq!(rank_by_magnitude(&v), rank_by_magnitude(&flipped));
        let r = rank_by_magnitude(&v);
        let order = r.order();
        prop_assert!(order.windows(2).all(|w| v[w[0]].abs() >= v[w[1]].abs()));
    }

    #[test]
    fn rendered_programs_parse_back(
        (p, chain, signed) in (3usize..15).prop_flat_map(|p| (
            Just(p),
            permutation(p).prop_flat_map(move |o| subsequence(o, 2..=p)).prop_shuffle(),
            prop::collection::vec(prop::bool::ANY, p),
        )),
    ) {
        let n = names(p);
        let mut text = chain.iter().map(|&f| n[f].clone()).collect::<Vec<_>>().join(" > ");
        for (f, s) in signed.iter().enumerate().take(2) {
            text.push_str(&format!("; sign({}) = {}", n[f], if *s { "+" } else { "-" }));
        }
        let prog = parse_preferences(&text, &n).unwrap();
        let again = parse_preferences(&render(&prog), &n).unwrap();
        prop_assert_eq!(&again.statements, &prog.statements);
        prop_assert_eq!(&prog.statements[0], &Statement::Chain { features: chain.clone() });

        let reference = Ranking::identity(p);
        let target = compile_target(&prog, &reference).unwrap();
        let ranks = target.target_ranking.ranks();
        prop_assert!(chain.windows(2).all(|w| ranks[w[0]] < ranks[w[1]]));
        let signs = target.target_signs.unwrap();
        prop_assert_eq!(signs[0], if signed[0] { 1 } else { -1 });
        prop_assert!(signs[2..].iter().all(|&s| s == 0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn sampled_masks_stay_in_bound(seed in 0u64..1000, eps in 0.01f64..0.3) {
        let ds = generate_synthetic(&SyntheticSpec {
            n: 600,
            weights: vec![1.5, -1.0, 0.7, 0.3],
            noise_std: 0.1,
            seed,
        })
        .unwrap();
        let s = split(&ds, 0.25, seed).unwrap();
        let m = train_logistic(&ds, &s, 0.5, 150, seed).unwrap();
        let cfg = RashomonConfig { epsilon: eps, n_samples: 20, seed, ..Default::default() };
        let sample = sample_masks(&m, &ds, &s, &cfg).unwrap();
        prop_assert!((sample.bound - rashomon_bound(sample.reference_loss, eps).unwrap()).abs() < 1e-15);
        let ctx = RashomonContext::new(&m, &ds, &s, sample.bound);
        let looser = rashomon_bound(sample.reference_loss, eps * 2.0).unwrap();
        for i in 0..sample.len() {
            let mask = sample.mask(i);
            prop_assert!(sample.losses[i] <= sample.bound);
            prop_assert!((ctx.loss(&mask) - sample.losses[i]).abs() < 1e-12);
            let mask = Mask::new(mask).unwrap();
            prop_assert!(mask.within(cfg.mask_max));
            prop_assert!(is_in_rashomon(&mask, &m, &ds, &s, looser));
        }
    }
}

use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;

use dips::datagen::{generate_two_quadrants, inject_symmetric_label_noise, split_lab_unlab_test, stratified_prefix};
use dips::dynamics::DynamicsTrace;
use dips::plabelers::{greedy_select, ups_select, PlabelerConfig};
use dips::seed::{derive, Stream};
use dips::selectors::{dips_select, small_loss_select, AleatoricThreshold, SelectorConfig, Verdict};

fn prob_matrix(n: usize, c: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(prop::collection::vec(0.001f64..1.0, c), n).prop_map(move |rows| {
        Array2::from_shape_fn((n, c), |(i, k)| rows[i][k] / rows[i].iter().sum::<f64>())
    })
}

fn stream(max_e: usize) -> impl Strategy<Value = (usize, usize, Vec<Array2<f64>>)> {
    (1usize..8, 2usize..5, 1..=max_e).prop_flat_map(|(n, c, e)| {
        (Just(n), Just(c), prop::collection::vec(prob_matrix(n, c), e))
    })
}

proptest! {
    #[test]
    fn dynamics_stay_in_range((n, c, probs) in stream(12)) {
        let mut trace = DynamicsTrace::new(n, c);
        for p in &probs {
            trace.update_running_stats(p).unwrap();
        }
        for i in 0..n {
            for k in 0..c {
                let conf = trace.confidence(i, k).unwrap();
                let al = trace.aleatoric(i, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&conf));
                prop_assert!((0.0..=0.25).contains(&al));
                // Jensen: mean of p(1-p) never exceeds conf(1-conf)
                prop_assert!(al <= conf * (1.0 - conf) + 1e-12);
            }
        }
    }

    #[test]
    fn running_equals_batch((n, c, probs) in stream(30)) {
        let mut trace = DynamicsTrace::new(n, c);
        for p in &probs {
            trace.update_running_stats(p).unwrap();
        }
        let e = probs.len() as f64;
        for i in 0..n {
            for k in 0..c {
                let mp = probs.iter().map(|p| p[[i, k]]).sum::<f64>() / e;
                let mpq = probs.iter().map(|p| p[[i, k]] * (1.0 - p[[i, k]])).sum::<f64>() / e;
                prop_assert!((trace.confidence(i, k).unwrap() - mp).abs() < 1e-12);
                prop_assert!((trace.aleatoric(i, k).unwrap() - mpq).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ups_is_subset_of_greedy(
        probs in (1usize..40, 2usize..5).prop_flat_map(|(n, c)| prob_matrix(n, c)),
        spread in 0.0f64..0.5,
        tau in 0.3f64..0.99,
    ) {
        let unc = probs.mapv(|p| (p * 7.3 + spread).fract() * spread);
        let cfg = PlabelerConfig { tau_p: tau, ..PlabelerConfig::default() };
        let greedy: BTreeSet<usize> = greedy_select(probs.view(), &cfg, 1).samples().into_iter().collect();
        let ups = ups_select(probs.view(), unc.view(), &cfg, 1).unwrap();
        prop_assert!(ups.samples().iter().all(|s| greedy.contains(s)));
    }

    #[test]
    fn greedy_is_monotone_in_threshold(
        probs in (1usize..40, 2usize..5).prop_flat_map(|(n, c)| prob_matrix(n, c)),
        lo in 0.0f64..1.0,
        hi in 0.0f64..1.0,
    ) {
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let loose = greedy_select(probs.view(), &PlabelerConfig { tau_p: lo, ..PlabelerConfig::default() }, 1);
        let strict = greedy_select(probs.view(), &PlabelerConfig { tau_p: hi, ..PlabelerConfig::default() }, 1);
        let loose: BTreeSet<usize> = loose.samples().into_iter().collect();
        prop_assert!(strict.samples().iter().all(|s| loose.contains(s)));
    }

    #[test]
    fn trivial_dips_keeps_everything(
        conf in prop::collection::vec(0.0f64..=1.0, 1..50),
        al_seed in prop::collection::vec(0.0f64..=0.25, 50),
    ) {
        let al = &al_seed[..conf.len()];
        let cfg = SelectorConfig { tau_conf: 0.0, tau_al: AleatoricThreshold::Fixed(0.26), ..SelectorConfig::default() };
        let out = dips_select(&conf, al, &cfg).unwrap();
        prop_assert!(out.iter().all(|c| c.verdict == Verdict::Useful));
    }

    #[test]
    fn dips_verdicts_follow_the_rule(
        pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=0.25), 1..50),
        tau_conf in 0.0f64..=1.0,
        tau_al in 0.0f64..=0.3,
    ) {
        let (conf, al): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let cfg = SelectorConfig {
            tau_conf,
            tau_al: AleatoricThreshold::Fixed(tau_al),
            relax_vacuous_al_gate: false,
            ..SelectorConfig::default()
        };
        for c in dips_select(&conf, &al, &cfg).unwrap() {
            let i = c.sample_index;
            let useful = conf[i] >= tau_conf && al[i] < tau_al;
            prop_assert_eq!(c.verdict == Verdict::Useful, useful);
        }
    }

    #[test]
    fn dips_commutes_with_permutation(
        pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=0.25), 2..40),
        rotation in 0usize..40,
    ) {
        let (conf, al): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let n = conf.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rotation) % n).rev().collect();
        let pc: Vec<f64> = perm.iter().map(|&i| conf[i]).collect();
        let pa: Vec<f64> = perm.iter().map(|&i| al[i]).collect();
        let cfg = SelectorConfig::default();
        let base = dips_select(&conf, &al, &cfg).unwrap();
        let permuted = dips_select(&pc, &pa, &cfg).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(permuted[j].verdict, base[i].verdict);
        }
    }

    #[test]
    fn small_loss_keep_count(losses in prop::collection::vec(0.0f64..10.0, 1..100), keep in 0.01f64..=1.0) {
        let mask = small_loss_select(&losses, keep).unwrap();
        let kept = mask.iter().filter(|&&m| m).count();
        prop_assert_eq!(kept, (keep * losses.len() as f64).round() as usize);
        let worst_kept = losses.iter().zip(&mask).filter(|(_, &m)| m).map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
        let best_dropped = losses.iter().zip(&mask).filter(|(_, &m)| !m).map(|(l, _)| *l).fold(f64::INFINITY, f64::min);
        prop_assert!(worst_kept <= best_dropped);
    }

    #[test]
    fn noise_changes_exact_count(
        labels in prop::collection::vec(0usize..4, 1..200),
        p in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let (noisy, report) = inject_symmetric_label_noise(&labels, p, 4, seed).unwrap();
        let changed = labels.iter().zip(&noisy).filter(|(a, b)| a != b).count();
        prop_assert_eq!(changed, (p * labels.len() as f64).round() as usize);
        prop_assert_eq!(report.flipped_indices.len(), changed);
        prop_assert!(noisy.iter().all(|&l| l < 4));
    }

    #[test]
    fn split_parts_are_disjoint(n in 20usize..200, lab in 0.05f64..0.4, unlab in 0.1f64..0.5, seed in any::<u64>()) {
        let data = generate_two_quadrants(n, seed).unwrap();
        let split = split_lab_unlab_test(&data, lab, unlab, seed).unwrap();
        prop_assert_eq!(split.labeled.len() + split.unlabeled.len() + split.test.len(), n);
        let rows = |d: &dips::datagen::Dataset| -> Vec<(u64, u64)> {
            d.features.rows().into_iter().map(|r| (r[0].to_bits(), r[1].to_bits())).collect()
        };
        let mut all: Vec<(u64, u64)> = rows(&split.labeled);
        all.extend(rows(&split.unlabeled));
        all.extend(rows(&split.test));
        let distinct: BTreeSet<_> = all.iter().copied().collect();
        let original: BTreeSet<_> = rows(&data).into_iter().collect();
        prop_assert_eq!(&distinct, &original);
        prop_assert_eq!(distinct.len(), all.len());
    }

    #[test]
    fn stratified_prefixes_are_nested(
        labels in prop::collection::vec(0usize..3, 1..150),
        a in 0.01f64..=1.0,
        b in 0.01f64..=1.0,
        seed in any::<u64>(),
    ) {
        let (small, large) = (a.min(b), a.max(b));
        let s = stratified_prefix(&labels, 3, small, seed).unwrap();
        let l: BTreeSet<usize> = stratified_prefix(&labels, 3, large, seed).unwrap().into_iter().collect();
        prop_assert!(s.iter().all(|i| l.contains(i)));
        let full = stratified_prefix(&labels, 3, 1.0, seed).unwrap();
        prop_assert_eq!(full, (0..labels.len()).collect::<Vec<_>>());
    }

    #[test]
    fn derived_seeds_differ_across_streams(master in any::<u64>(), idx in 0u64..1000) {
        let streams = [Stream::Data, Stream::Noise, Stream::Backbone, Stream::Subsample];
        let seeds: BTreeSet<u64> = streams.iter().map(|&s| derive(master, s, idx)).collect();
        prop_assert_eq!(seeds.len(), streams.len());
        prop_assert_eq!(derive(master, Stream::Data, idx), derive(master, Stream::Data, idx));
    }
}

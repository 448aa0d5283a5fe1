//! Property checks for the sampler, selection, cooperation and ranking pieces.

use std::collections::BTreeMap;

use drc_bilevel::cic::{apply_cooperation, fractional_distance, plan_cooperation, CicConfig, TaskSnapshot};
use drc_bilevel::es::EsState;
use drc_bilevel::problems::{deb_compare, deb_order, Preference};
use drc_bilevel::rng::seeded;
use drc_bilevel::scheduler::roulette_select;
use drc_bilevel::spu::{selection_probabilities, ProbabilityVector, SpuConfig, TaskHistory};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn spd(dim: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_iterator(dim, dim, entries.iter().copied().take(dim * dim));
    &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
}

fn min_eigen(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

fn history(id: usize, fit: Vec<f64>, pt: Vec<f64>) -> TaskHistory {
    TaskHistory {
        task_id: id,
        fit_series: fit,
        pt_series: pt,
    }
}

fn histories_strategy() -> impl Strategy<Value = Vec<TaskHistory>> {
    prop::collection::vec(
        (
            prop::collection::vec(-1e3f64..1e3, 1..6),
            prop::collection::vec(-50.0f64..50.0, 0..5),
        ),
        1..9,
    )
    .prop_map(|tasks| {
        tasks
            .into_iter()
            .enumerate()
            .map(|(i, (fit, mut pt))| {
                pt.truncate(fit.len() - 1);
                while pt.len() < fit.len() - 1 {
                    pt.push(0.0);
                }
                history(i, fit, pt)
            })
            .collect()
    })
}

fn weights_strategy() -> impl Strategy<Value = SpuConfig> {
    (0.0f64..1.0, 0.0f64..1.0, 0.0f64..=1.0, 1.01f64..3.0).prop_map(|(a, b, gamma, epsilon)| {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        SpuConfig {
            w_bs: lo,
            w_pf: hi - lo,
            w_pt: 1.0 - hi,
            gamma,
            epsilon,
            ..SpuConfig::default()
        }
    })
}

fn assert_simplex(p: &ProbabilityVector, n: usize) -> Result<(), TestCaseError> {
    prop_assert_eq!(p.len(), n);
    let total: f64 = p.entries.values().sum();
    prop_assert!((total - 1.0).abs() < 1e-12, "sum {}", total);
    for v in p.entries.values() {
        prop_assert!(v.is_finite() && *v >= 0.0);
    }
    Ok(())
}

proptest! {
    #[test]
    fn marginal_is_principal_block(
        dim in 2usize..7,
        entries in prop::collection::vec(-2.0f64..2.0, 36),
        mean in prop::collection::vec(-5.0f64..5.0, 6),
        mask in 1u32..64,
    ) {
        let cov = spd(dim, &entries);
        let es = EsState::new(dim, &mean[..dim], 0.4, cov.clone(), 6).unwrap();
        let coords: Vec<usize> = (0..dim).filter(|i| mask & (1 << i) != 0).collect();
        prop_assume!(!coords.is_empty());
        let m = es.marginal(&coords).unwrap();
        prop_assert_eq!(m.sigma, 0.4);
        for (i, &ci) in coords.iter().enumerate() {
            prop_assert_eq!(m.mean[i], mean[ci]);
            for (j, &cj) in coords.iter().enumerate() {
                prop_assert!((m.cov[(i, j)] - es.cov()[(ci, cj)]).abs() < 1e-12);
            }
        }
        prop_assert!(min_eigen(&m.cov) > 0.0);
    }

    #[test]
    fn marginal_of_marginal_composes(
        entries in prop::collection::vec(-2.0f64..2.0, 25),
        mean in prop::collection::vec(-5.0f64..5.0, 5),
    ) {
        let es = EsState::new(5, &mean, 1.0, spd(5, &entries), 6).unwrap();
        let outer = es.marginal(&[1, 2, 4]).unwrap();
        let inner_state = EsState::new(3, &outer.mean, outer.sigma, outer.cov.clone(), 6).unwrap();
        let inner = inner_state.marginal(&[0, 2]).unwrap();
        let direct = es.marginal(&[1, 4]).unwrap();
        prop_assert_eq!(inner.mean, direct.mean);
        prop_assert!((inner.cov - direct.cov).abs().max() < 1e-9);
    }

    #[test]
    fn selection_is_a_simplex(hs in histories_strategy(), cfg in weights_strategy()) {
        let refs: Vec<&TaskHistory> = hs.iter().collect();
        let p = selection_probabilities(&refs, &cfg).unwrap();
        assert_simplex(&p, hs.len())?;
        for h in &hs {
            prop_assert!(p.get(h.task_id).unwrap() >= cfg.w_bs / hs.len() as f64 - 1e-12);
        }
    }

    #[test]
    fn selection_ignores_common_fitness_shift(hs in histories_strategy(), shift in -500.0f64..500.0) {
        let cfg = SpuConfig::default();
        let shifted: Vec<TaskHistory> = hs
            .iter()
            .map(|h| history(h.task_id, h.fit_series.iter().map(|f| f + shift).collect(), h.pt_series.clone()))
            .collect();
        let a = selection_probabilities(&hs.iter().collect::<Vec<_>>(), &cfg).unwrap();
        let b = selection_probabilities(&shifted.iter().collect::<Vec<_>>(), &cfg).unwrap();
        for (x, y) in a.entries.values().zip(b.entries.values()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn raising_latest_fitness_never_lowers_share(hs in histories_strategy(), pick in 0usize..8, bump in 0.0f64..100.0) {
        let pick = pick % hs.len();
        let cfg = SpuConfig::default();
        let mut better = hs.clone();
        *better[pick].fit_series.last_mut().unwrap() += bump;
        let before = selection_probabilities(&hs.iter().collect::<Vec<_>>(), &cfg).unwrap();
        let after = selection_probabilities(&better.iter().collect::<Vec<_>>(), &cfg).unwrap();
        prop_assert!(after.get(pick).unwrap() >= before.get(pick).unwrap() - 1e-12);
    }

    #[test]
    fn potential_share_follows_exponential_ratio(
        cp in prop::collection::vec(-20.0f64..20.0, 2..6),
        epsilon in 1.01f64..2.0,
    ) {
        let cfg = SpuConfig { w_bs: 0.0, w_pf: 0.0, w_pt: 1.0, gamma: 0.0, epsilon, ..SpuConfig::default() };
        let hs: Vec<TaskHistory> = cp.iter().enumerate().map(|(i, c)| history(i, vec![0.0, 0.0], vec![*c])).collect();
        let p = selection_probabilities(&hs.iter().collect::<Vec<_>>(), &cfg).unwrap();
        for i in 1..cp.len() {
            let ratio = p.get(i).unwrap() / p.get(0).unwrap();
            let expected = epsilon.powf(cp[i] - cp[0]);
            prop_assert!((ratio / expected - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_discount_uses_latest_only(
        fits in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 1..5), 2..6),
    ) {
        let cfg = SpuConfig { gamma: 0.0, ..SpuConfig::default() };
        let full: Vec<TaskHistory> = fits
            .iter()
            .enumerate()
            .map(|(i, f)| history(i, f.clone(), vec![0.0; f.len() - 1]))
            .collect();
        let last: Vec<TaskHistory> = fits
            .iter()
            .enumerate()
            .map(|(i, f)| history(i, vec![*f.last().unwrap()], vec![]))
            .collect();
        let a = selection_probabilities(&full.iter().collect::<Vec<_>>(), &cfg).unwrap();
        let b = selection_probabilities(&last.iter().collect::<Vec<_>>(), &cfg).unwrap();
        for (x, y) in a.entries.values().zip(b.entries.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn deb_is_transitive_and_antisymmetric(
        pts in prop::collection::vec((-10.0f64..10.0, prop_oneof![Just(0.0), 0.0f64..3.0]), 3),
    ) {
        let (a, b, c) = (pts[0], pts[1], pts[2]);
        let le = |x, y| deb_compare(x, y).unwrap() != Preference::Second;
        if le(a, b) && le(b, c) {
            prop_assert!(le(a, c));
        }
        let flip = |p: Preference| match p {
            Preference::First => Preference::Second,
            Preference::Second => Preference::First,
            Preference::Tie => Preference::Tie,
        };
        prop_assert_eq!(deb_compare(a, b).unwrap(), flip(deb_compare(b, a).unwrap()));
    }

    #[test]
    fn deb_sort_is_consistent_on_pools(
        pool in prop::collection::vec((-10.0f64..10.0, prop_oneof![Just(0.0), 0.0f64..3.0]), 50),
    ) {
        let mut sorted = pool.clone();
        sorted.sort_by(|a, b| deb_order(*a, *b));
        for i in 0..sorted.len() {
            for j in i + 1..sorted.len() {
                prop_assert!(deb_compare(sorted[i], sorted[j]).unwrap() != Preference::Second);
            }
        }
    }

    #[test]
    fn fractional_distance_is_symmetric(
        a in prop::collection::vec(-5.0f64..5.0, 1..6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let b = &b[..a.len()];
        let d = fractional_distance(&a, b).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, fractional_distance(b, &a).unwrap());
        prop_assert_eq!(fractional_distance(&a, &a).unwrap(), 0.0);
        if a.iter().zip(b).any(|(x, y)| x != y) {
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn cooperation_mixes_within_convex_hull(
        dim in 1usize..5,
        k in 2usize..6,
        entries in prop::collection::vec(-2.0f64..2.0, 6 * 25),
        coords in prop::collection::vec(-5.0f64..5.0, 6 * 4),
        spreads in prop::collection::vec(0.01f64..3.0, 6),
    ) {
        let xs: Vec<Vec<f64>> = (0..k).map(|i| vec![i as f64 * 0.5; 2]).collect();
        let hist: Vec<Vec<Vec<f64>>> = spreads.iter().take(k).map(|s| vec![vec![-s], vec![0.0], vec![*s]]).collect();
        let best: Vec<Vec<f64>> = (0..k).map(|i| coords[i * 4..i * 4 + dim].to_vec()).collect();
        let snaps: Vec<TaskSnapshot> = (0..k)
            .map(|i| TaskSnapshot {
                task_id: i,
                x_u: &xs[i],
                exec_count: 3,
                mean_history: &hist[i],
                best_lower: &best[i],
                terminated: false,
            })
            .collect();
        let target = 0;
        let Some(plan) = plan_cooperation(&snaps[target], &snaps, &CicConfig::default()).unwrap() else {
            return Ok(());
        };
        let total = plan.target_weight + plan.sources.iter().map(|s| s.1).sum::<f64>();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(plan.target_weight >= 0.0 && plan.sources.iter().all(|s| s.1 >= 0.0));
        prop_assert!(plan.sources.iter().any(|s| best[s.0] == plan.navi));

        let states: Vec<EsState> = (0..k)
            .map(|i| EsState::new(dim, &coords[i * 4..i * 4 + dim], 0.5, spd(dim, &entries[i * 25..]), 6).unwrap())
            .collect();
        let sources: Vec<&EsState> = plan.sources.iter().map(|(id, _)| &states[*id]).collect();
        let mut mixed = states[target].clone();
        apply_cooperation(&mut mixed, &sources, &plan).unwrap();
        prop_assert!(min_eigen(mixed.cov()) > 0.0);
        let involved: Vec<&EsState> = std::iter::once(&states[target]).chain(sources.iter().copied()).collect();
        for j in 0..dim {
            let lo = involved.iter().map(|s| s.mean()[j]).fold(f64::INFINITY, f64::min);
            let hi = involved.iter().map(|s| s.mean()[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(mixed.mean()[j] >= lo - 1e-12 && mixed.mean()[j] <= hi + 1e-12);
        }
    }
}

#[test]
fn convex_mixtures_of_spd_matrices_stay_spd() {
    use rand::Rng;
    let mut rng = seeded(11);
    for _ in 0..100 {
        let dim = rng.random_range(1..6);
        let k = rng.random_range(1..5);
        let raw: Vec<f64> = (0..k + 1).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let mut mixed = DMatrix::zeros(dim, dim);
        for w in &raw {
            let entries: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            mixed += spd(dim, &entries) * (w / total);
        }
        assert!(min_eigen(&mixed) > 0.0);
    }
}

#[test]
fn roulette_frequencies_match_probabilities() {
    let probs = ProbabilityVector {
        entries: BTreeMap::from([(0, 0.1), (3, 0.2), (5, 0.3), (9, 0.4)]),
    };
    let draws = 40_000;
    let mut rng = seeded(5);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for _ in 0..draws {
        *counts.entry(roulette_select(&probs, &mut rng).unwrap()).or_default() += 1;
    }
    for (id, p) in &probs.entries {
        let expected = p * draws as f64;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        let got = *counts.get(id).unwrap_or(&0) as f64;
        assert!((got - expected).abs() <= 4.0 * sd, "task {id}: {got} vs {expected}");
    }
}

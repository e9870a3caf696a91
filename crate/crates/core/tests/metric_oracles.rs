use flowcon::metrics::{aupr, auroc, fpr_at_tpr, Positive};
use rand::{Rng, SeedableRng};

fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut s = 0.0;
    for &a in id {
        for &b in ood {
            s += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (id.len() * ood.len()) as f64
}

/// Every distinct threshold, in any order; each recall step weighted by the
/// best precision reached at that recall or higher.
fn brute_aupr(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let tp = pos.iter().filter(|&&v| v >= t).count() as f64;
            let fp = neg.iter().filter(|&&v| v >= t).count() as f64;
            (tp / pos.len() as f64, tp / (tp + fp))
        })
        .collect();
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        area += (r - prev) * best;
        prev = r;
    }
    area
}

fn brute_fpr(id: &[f64], ood: &[f64], target: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for &t in id {
        let tpr = id.iter().filter(|&&v| v >= t).count() as f64 / id.len() as f64;
        if tpr >= target && t > best {
            best = t;
        }
    }
    ood.iter().filter(|&&v| v >= best).count() as f64 / ood.len() as f64
}

/// Scores on a coarse grid so ties are common.
fn random_sets(rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let grid = rng.random_bool(0.5);
    let mut draw = |n: usize, shift: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(-2.0..2.0) + shift;
                if grid {
                    (v * 4.0).round() / 4.0
                } else {
                    v
                }
            })
            .collect()
    };
    let n_id = 1 + (draw(1, 0.0)[0].abs() * 12.0) as usize % 50;
    let id = draw(n_id, 0.5);
    let n_ood = 1 + (draw(1, 0.0)[0].abs() * 17.0) as usize % 50;
    let ood = draw(n_ood, 0.0);
    (id, ood)
}

#[test]
fn metrics_equal_brute_force_oracles() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let (id, ood) = random_sets(&mut rng);
        assert!((auroc(&id, &ood).unwrap() - brute_auroc(&id, &ood)).abs() < 1e-12);
        assert!((aupr(&id, &ood, Positive::Id).unwrap() - brute_aupr(&id, &ood)).abs() < 1e-12);
        let neg_id: Vec<f64> = id.iter().map(|v| -v).collect();
        let neg_ood: Vec<f64> = ood.iter().map(|v| -v).collect();
        assert!((aupr(&id, &ood, Positive::Ood).unwrap() - brute_aupr(&neg_ood, &neg_id)).abs() < 1e-12);
        assert!((fpr_at_tpr(&id, &ood, 0.95).unwrap() - brute_fpr(&id, &ood, 0.95)).abs() < 1e-12);
    }
}

#[test]
fn small_aupr_case_matches_sweep() {
    let (id, ood) = ([3.0, 2.0], [1.0, 2.5]);
    assert!((aupr(&id, &ood, Positive::Id).unwrap() - brute_aupr(&id, &ood)).abs() < 1e-12);
}

#[test]
fn monotone_maps_leave_metrics_unchanged() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (id, ood) = random_sets(&mut rng);
        let maps: [fn(f64) -> f64; 2] = [|v| v.exp(), |v| 3.0 * v - 7.0];
        for f in maps {
            let (id2, ood2): (Vec<f64>, Vec<f64>) = (id.iter().map(|&v| f(v)).collect(), ood.iter().map(|&v| f(v)).collect());
            assert!((auroc(&id, &ood).unwrap() - auroc(&id2, &ood2).unwrap()).abs() < 1e-12);
            for p in [Positive::Id, Positive::Ood] {
                assert!((aupr(&id, &ood, p).unwrap() - aupr(&id2, &ood2, p).unwrap()).abs() < 1e-12);
            }
            assert_eq!(fpr_at_tpr(&id, &ood, 0.95).unwrap(), fpr_at_tpr(&id2, &ood2, 0.95).unwrap());
        }
    }
}

#[test]
fn role_swaps() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let id: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..2.0)).collect();
        let ood: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..1.0)).collect();
        // continuous draws: no ties
        assert!((auroc(&id, &ood).unwrap() - (1.0 - auroc(&ood, &id).unwrap())).abs() < 1e-12);
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let s = aupr(&id, &ood, Positive::Id).unwrap();
        let e_swapped = aupr(&neg(&ood), &neg(&id), Positive::Ood).unwrap();
        assert_eq!(s, e_swapped);
    }
}

#[test]
fn all_metrics_in_unit_interval() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (id, ood) = random_sets(&mut rng);
        for v in [
            auroc(&id, &ood).unwrap(),
            aupr(&id, &ood, Positive::Id).unwrap(),
            aupr(&id, &ood, Positive::Ood).unwrap(),
            fpr_at_tpr(&id, &ood, 0.95).unwrap(),
        ] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

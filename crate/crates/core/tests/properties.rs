use proptest::prelude::*;

use ecm_sphere::losses::{loss, sincere_loss, softcse_loss, LabeledBatch, LossConfig, LossKind};
use ecm_sphere::metrics::kmeans::lloyd;
use ecm_sphere::metrics::{cd_r, v_measure};
use ecm_sphere::{EcmConfig, Polarity, PolarityConstants, Tensor};

fn polarity(code: u8) -> Polarity {
    match code % 3 {
        0 => Polarity::Positive,
        1 => Polarity::Neutral,
        _ => Polarity::Negative,
    }
}

/// An ECM with shuffled slots and arbitrary polarities.
fn arb_ecm() -> impl Strategy<Value = EcmConfig> {
    (2usize..16)
        .prop_flat_map(|e| (Just((0..e).collect::<Vec<usize>>()).prop_shuffle(), prop::collection::vec(any::<u8>(), e)))
        .prop_map(|(slots, pols)| {
            let labels = slots
                .into_iter()
                .zip(pols)
                .enumerate()
                .map(|(i, (slot, p))| (format!("l{i}"), slot, polarity(p)))
                .collect();
            EcmConfig::new(labels, PolarityConstants::default()).unwrap()
        })
}

fn unit_rows(raw: &[Vec<f64>]) -> Tensor {
    let rows: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn arb_rows(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(-1.0f64..1.0, d).prop_filter("non-zero row", |r| r.iter().map(|v| v * v).sum::<f64>() > 1e-2),
        n,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ecm_distances_are_symmetric_metrics(ecm in arb_ecm()) {
        let e = ecm.len();
        for i in 0..e {
            prop_assert_eq!(ecm.circumplex_distance(i, i).unwrap(), 0.0);
            prop_assert_eq!(ecm.target_cosine(i, i).unwrap(), 1.0);
            for j in 0..e {
                let cd = ecm.circumplex_distance(i, j).unwrap();
                prop_assert_eq!(cd, ecm.circumplex_distance(j, i).unwrap());
                prop_assert_eq!(ecm.delta_theta(i, j).unwrap(), ecm.delta_theta(j, i).unwrap());
                prop_assert!(ecm.delta_theta(i, j).unwrap() <= std::f64::consts::PI + 1e-12);
                for k in 0..e {
                    prop_assert!(cd <= ecm.circumplex_distance(i, k).unwrap() + ecm.circumplex_distance(k, j).unwrap() + 1e-12);
                    prop_assert!(
                        ecm.delta_theta(i, j).unwrap()
                            <= ecm.delta_theta(i, k).unwrap() + ecm.delta_theta(k, j).unwrap() + 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn losses_ignore_sample_order(
        raw in arb_rows(6..14, 5),
        labels_seed in prop::collection::vec(0usize..4, 14),
        perm_seed in any::<u64>(),
        margin in 0.0f64..0.3,
    ) {
        let b = raw.len();
        let ecm = EcmConfig::default();
        // four labels spread on the ring, each used at least twice
        let mut labels: Vec<usize> = labels_seed[..b].iter().map(|l| l * 3).collect();
        labels[0] = labels[1];
        let x = unit_rows(&raw);
        let mut order: Vec<usize> = (0..b).collect();
        let mut state = perm_seed;
        for i in (1..b).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (state >> 33) as usize % (i + 1));
        }
        let permuted = Tensor::from_rows(&order.iter().map(|&i| x.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let plabels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let cfg = LossConfig::new(0.1, margin).unwrap();
        for kind in LossKind::ALL {
            let a = loss(kind, &LabeledBatch::new(x.clone(), labels.clone()).unwrap(), &cfg, &ecm).unwrap();
            let p = loss(kind, &LabeledBatch::new(permuted.clone(), plabels.clone()).unwrap(), &cfg, &ecm).unwrap();
            prop_assert!((a - p).abs() <= 1e-12 * a.abs().max(1.0), "{kind}: {a} vs {p}");
        }
    }

    #[test]
    fn two_label_softcse_is_sincere(
        raw in arb_rows(4..12, 6),
        pair in (0usize..12, 1usize..12),
        bits in prop::collection::vec(any::<bool>(), 12),
        tau in 0.05f64..1.0,
    ) {
        let ecm = EcmConfig::default();
        let (a, b) = (pair.0, (pair.0 + pair.1) % 12);
        let n = raw.len();
        let mut labels: Vec<usize> = bits[..n].iter().map(|&t| if t { a } else { b }).collect();
        labels[0] = a;
        labels[1] = a;
        labels[2] = b;
        let batch = LabeledBatch::new(unit_rows(&raw), labels).unwrap();
        let cfg = LossConfig::new(tau, 0.0).unwrap();
        let soft = softcse_loss(&batch, &cfg, &ecm).unwrap();
        let sincere = sincere_loss(&batch, &cfg).unwrap();
        prop_assert!((soft - sincere).abs() <= 1e-12 * sincere.abs().max(1.0));
    }

    #[test]
    fn v_measure_ignores_cluster_names(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..40),
        shift in 1usize..7,
    ) {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let base = v_measure(&truth, &pred).unwrap();
        let renamed: Vec<usize> = pred.iter().map(|p| (p * 3 + shift) % 5 + 10).collect();
        let r = v_measure(&truth, &renamed).unwrap();
        prop_assert!((base.v - r.v).abs() < 1e-12);
        prop_assert!((base.homogeneity - r.homogeneity).abs() < 1e-12);
        let swapped = v_measure(&pred, &truth).unwrap();
        prop_assert!((base.homogeneity - swapped.completeness).abs() < 1e-12);
        prop_assert!((base.completeness - swapped.homogeneity).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base.v));
    }

    #[test]
    fn cd_r_is_affine_invariant(
        upper in prop::collection::vec(-1.0f64..1.0, 66),
        scale in 0.01f64..10.0,
        offset in -5.0f64..5.0,
    ) {
        let ecm = EcmConfig::default();
        let mut m = Tensor::filled(12, 12, 1.0);
        let mut k = 0;
        for i in 0..12 {
            for j in i + 1..12 {
                m.set(i, j, upper[k]);
                m.set(j, i, upper[k]);
                k += 1;
            }
        }
        let base = cd_r(&m, &ecm);
        prop_assume!(base.is_ok());
        let moved = cd_r(&m.map(|v| v * scale + offset), &ecm).unwrap();
        prop_assert!((base.unwrap() - moved).abs() < 1e-9);
    }

    #[test]
    fn lloyd_never_increases_inertia(raw in arb_rows(3..30, 4), init in arb_rows(2..4, 4)) {
        prop_assume!(init.len() <= raw.len());
        let x = unit_rows(&raw);
        let (result, history) = lloyd(&x, unit_rows(&init), 100);
        for w in history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{history:?}");
        }
        prop_assert!((history.last().unwrap() - result.inertia).abs() < 1e-12);
    }
}

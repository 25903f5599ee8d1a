mod common;

use acdr::geometry::{Point, Polygon};
use acdr::losses::{balloon_loss, curvature_loss, mse, seg_loss, total_loss, LossWeights};
use acdr::renderer::Mask;
use acdr::tensor::{Graph, Tensor};
use common::*;
use proptest::prelude::*;

fn vertices() -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((-40.0f64..40.0, -40.0f64..40.0).prop_map(|(x, y)| [x, y]), 3..20)
}

fn poly(v: &[[f64; 2]]) -> Polygon {
    Polygon::new(points(v)).unwrap()
}

fn mask(values: &[f64], h: usize, w: usize) -> Mask {
    Mask { h, w, values: to_f32(values) }
}

fn unit_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn curvature_matches_reference(v in vertices()) {
        let want = curvature(&v);
        prop_assert!((curvature_loss(&poly(&v)) - want).abs() <= 1e-9 * (1.0 + want));
    }

    #[test]
    fn curvature_ignores_labels_and_position(v in vertices(), shift in 0usize..20, dx in -9.0f64..9.0, dy in -9.0f64..9.0) {
        let base = curvature_loss(&poly(&v));
        let mut rolled = v.clone();
        rolled.rotate_left(shift % v.len());
        prop_assert!((curvature_loss(&poly(&rolled)) - base).abs() <= 1e-9 * (1.0 + base));
        let moved: Vec<[f64; 2]> = v.iter().map(|p| [p[0] + dx, p[1] + dy]).collect();
        prop_assert!((curvature_loss(&poly(&moved)) - base).abs() <= 1e-9 * (1.0 + base));
    }

    #[test]
    fn curvature_is_homogeneous(v in vertices(), s in 0.1f64..5.0) {
        let base = curvature_loss(&poly(&v));
        let scaled: Vec<[f64; 2]> = v.iter().map(|p| [s * p[0], s * p[1]]).collect();
        prop_assert!((curvature_loss(&poly(&scaled)) - s * base).abs() <= 1e-9 * (1.0 + s * base));
    }

    #[test]
    fn balloon_falls_when_coverage_rises(m in unit_values(30), i in 0usize..30, bump in 0.01f64..1.0) {
        let before = balloon_loss(&mask(&m, 5, 6));
        prop_assert!((before - balloon(&m)).abs() < 1e-6);
        let mut more = m.clone();
        more[i] = (more[i] + bump).min(1.0);
        let after = balloon_loss(&mask(&more, 5, 6));
        if more[i] > m[i] {
            prop_assert!(after < before);
        }
    }

    #[test]
    fn total_is_the_weighted_sum(
        m in prop::collection::vec(unit_values(20), 1..4),
        gt in prop::collection::vec(prop::bool::ANY, 20),
        v in vertices(), l1 in 0.0f64..2.0, l2 in 0.0f64..2.0, scale in 0.01f64..1.0,
    ) {
        let gt: Vec<f64> = gt.into_iter().map(|b| b as u8 as f64).collect();
        let gt_mask = mask(&gt, 4, 5);
        let masks: Vec<Mask> = m.iter().map(|x| mask(x, 4, 5)).collect();
        let polys: Vec<Polygon> = (0..masks.len()).map(|t| {
            poly(&v.iter().map(|p| [p[0] + t as f64, p[1] * (1.0 + t as f64 * 0.1)]).collect::<Vec<_>>())
        }).collect();
        let w = LossWeights { lambda1: l1, lambda2: l2, curvature_scale: scale };
        let got = total_loss(&masks, &gt_mask, &polys, w).unwrap();
        let m32: Vec<Vec<f64>> = masks.iter().map(|x| to_f64(&x.values)).collect();
        let want: f64 = m32.iter().zip(&polys).map(|(x, p)| {
            common::mse(x, &gt) + l1 * balloon(x) + l2 * scale * curvature(&pairs(p.vertices()))
        }).sum();
        prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want));
        let seg_only = LossWeights { lambda1: 0.0, lambda2: 0.0, ..w };
        prop_assert_eq!(total_loss(&masks, &gt_mask, &polys, seg_only).unwrap(), seg_loss(&masks, &gt_mask).unwrap());
    }

    #[test]
    fn graph_losses_agree_with_evaluators(
        m in prop::collection::vec(unit_values(12), 1..4),
        gt in prop::collection::vec(prop::bool::ANY, 12),
        v in prop::collection::vec((0.0f64..30.0, 0.0f64..30.0).prop_map(|(x, y)| [x, y]), 3..10),
        l1 in 0.0f64..1.0, l2 in 0.0f64..1.0,
    ) {
        let gt: Vec<f64> = gt.into_iter().map(|b| b as u8 as f64).collect();
        let w = LossWeights { lambda1: l1, lambda2: l2, curvature_scale: 1.0 };
        let masks: Vec<Mask> = m.iter().map(|x| mask(x, 3, 4)).collect();
        let polys: Vec<Polygon> = (0..masks.len()).map(|_| poly(&v)).collect();
        let want = total_loss(&masks, &mask(&gt, 3, 4), &polys, w).unwrap();
        let mut g = Graph::new(0);
        let mv: Vec<_> = masks.iter().map(|x| g.constant(x.to_tensor())).collect();
        let gv = g.constant(mask(&gt, 3, 4).to_tensor());
        let pv: Vec<_> = polys.iter().map(|p| g.constant(p.to_tensor())).collect();
        let terms = g.total_loss(&mv, gv, &pv, w).unwrap();
        let got = g.value(terms.total).data()[0] as f64;
        prop_assert!((got - want).abs() <= 1e-4 * (1.0 + want), "{} vs {}", got, want);
    }
}

#[test]
fn closed_forms() {
    let square = poly(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]);
    assert!((curvature_loss(&square) - 2.0).abs() < 1e-12);
    for k in [5usize, 8, 13] {
        let r = 3.5;
        let v: Vec<Point> = (0..k)
            .map(|j| {
                let a = std::f64::consts::TAU * j as f64 / k as f64;
                Point::new(r * a.cos(), r * a.sin())
            })
            .collect();
        let want = 2.0 * r * (1.0 - (std::f64::consts::TAU / k as f64).cos());
        assert!((curvature_loss(&Polygon::new(v).unwrap()) - want).abs() < 1e-9);
    }
    let gt = mask(&[1.0, 0.0, 1.0, 0.0], 2, 2);
    let flipped = mask(&[0.0, 1.0, 0.0, 1.0], 2, 2);
    assert_eq!(seg_loss(&[flipped], &gt).unwrap(), 1.0);
    assert_eq!(seg_loss(&[gt.clone(), gt.clone()], &gt).unwrap(), 0.0);
    let a = mask(&[0.5, 0.0, 1.0, 0.25], 2, 2);
    let b = mask(&[1.0, 0.0, 0.5, 0.0], 2, 2);
    let want = (0.25 + 0.0 + 0.0 + 0.0625) / 4.0 + (0.0 + 0.0 + 0.25 + 0.0) / 4.0;
    assert!((seg_loss(&[a, b], &gt).unwrap() - want).abs() < 1e-12);
    assert_eq!(balloon_loss(&mask(&[1.0; 4], 2, 2)), 0.0);
    assert_eq!(balloon_loss(&mask(&[0.0; 4], 2, 2)), 1.0);
    assert_eq!(balloon_loss(&gt), 0.5);
    let ones = mask(&[1.0; 4], 2, 2);
    let t = 3;
    let w = LossWeights { lambda1: 0.7, lambda2: 0.5, curvature_scale: 1.0 };
    let total = total_loss(&vec![ones.clone(); t], &ones, &vec![square; t], w).unwrap();
    assert!((total - t as f64 * 0.5 * 2.0).abs() < 1e-12);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let a = mask(&[0.0; 4], 2, 2);
    let b = mask(&[0.0; 6], 2, 3);
    assert!(mse(&a, &b).is_err());
    assert!(seg_loss(&[a.clone()], &b).is_err());
    let p = poly(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
    assert!(total_loss(&[a.clone(), a.clone()], &a, &[p], LossWeights::default()).is_err());
    let bad = LossWeights { lambda1: -1.0, ..LossWeights::default() };
    assert!(bad.validate().is_err());
    let mut g = Graph::new(0);
    let two = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.curvature_loss(two, 1.0).is_err());
}

#[test]
fn zero_weight_removes_the_gradient_of_its_term() {
    let v = [[2.0, 3.0], [9.0, 1.5], [7.5, 8.0], [1.0, 6.0]];
    let m = mask(&[0.2, 0.9, 0.4, 0.6], 2, 2);
    let gt = mask(&[1.0, 1.0, 0.0, 0.0], 2, 2);
    let grads = |w: LossWeights| {
        let mut g = Graph::new(0);
        let mv = g.leaf(m.to_tensor(), true);
        let pv = g.leaf(poly(&v).to_tensor(), true);
        let gv = g.constant(gt.to_tensor());
        let terms = g.total_loss(&[mv], gv, &[pv], w).unwrap();
        g.backward(terms.total).unwrap();
        (
            g.grad(mv).map(|t| to_f64(t.data())).unwrap_or_default(),
            g.grad(pv).map(|t| to_f64(t.data())).unwrap_or_default(),
        )
    };
    let full = LossWeights { lambda1: 0.3, lambda2: 0.4, curvature_scale: 1.0 };
    let (_, dp) = grads(LossWeights { lambda2: 0.0, ..full });
    assert!(dp.iter().all(|&x| x == 0.0));
    let (dm_seg, _) = grads(LossWeights { lambda1: 0.0, lambda2: 0.0, ..full });
    let (dm_b, _) = grads(LossWeights { lambda2: 0.0, ..full });
    // The balloon term adds -λ₁/(h·w) to every pixel.
    for (a, b) in dm_seg.iter().zip(&dm_b) {
        assert!((b - a + 0.3 / 4.0).abs() < 1e-6);
    }
    let (_, dp_full) = grads(full);
    assert!(dp_full.iter().any(|&x| x != 0.0));
}

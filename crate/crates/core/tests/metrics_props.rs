use acdr::metrics::{boundf, f1_iou, wcov, MetricReport};
use acdr::renderer::Mask;
use proptest::prelude::*;

const N: usize = 12;

fn binary(bits: &[bool]) -> Mask {
    Mask::from_fn(N, N, |y, x| bits[y * N + x] as u8 as f32)
}

fn bits() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(prop::bool::weighted(0.4), N * N)
}

/// Brute-force boundary F1 straight from the definition: 4-neighbor
/// erosion difference, Euclidean matching, mean over thresholds 1..5.
fn boundf_reference(a: &[bool], b: &[bool]) -> f64 {
    let edge = |m: &[bool]| -> Vec<(f64, f64)> {
        let on = |y: i64, x: i64| y >= 0 && x >= 0 && y < N as i64 && x < N as i64 && m[(y as usize) * N + x as usize];
        let mut out = Vec::new();
        for y in 0..N as i64 {
            for x in 0..N as i64 {
                let inner = on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1);
                if on(y, x) && !inner {
                    out.push((y as f64, x as f64));
                }
            }
        }
        out
    };
    let (ea, eb) = (edge(a), edge(b));
    if ea.is_empty() && eb.is_empty() {
        return 1.0;
    }
    if ea.is_empty() || eb.is_empty() {
        return 0.0;
    }
    let matched = |from: &[(f64, f64)], to: &[(f64, f64)], t: f64| {
        from.iter()
            .filter(|p| to.iter().any(|q| (p.0 - q.0).hypot(p.1 - q.1) <= t))
            .count() as f64
            / from.len() as f64
    };
    (1..=5)
        .map(|t| {
            let (p, r) = (matched(&ea, &eb, t as f64), matched(&eb, &ea, t as f64));
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .sum::<f64>()
        / 5.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn region_scores_match_counting(a in bits(), b in bits()) {
        let (f1, iou) = f1_iou(&binary(&a), &binary(&b)).unwrap();
        let tp = a.iter().zip(&b).filter(|(x, y)| **x && **y).count() as f64;
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count() as f64;
        let want = if union == 0.0 { 1.0 } else { tp / union };
        prop_assert!((iou - want).abs() < 1e-12);
        prop_assert!((f1 - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
        prop_assert!(f1 >= iou && (0.0..=1.0).contains(&f1) && (0.0..=1.0).contains(&iou));
        prop_assert_eq!(f1_iou(&binary(&b), &binary(&a)).unwrap(), (f1, iou));
    }

    #[test]
    fn boundary_score_matches_brute_force(a in bits(), b in bits()) {
        let got = boundf(&binary(&a), &binary(&b)).unwrap();
        prop_assert!((got - boundf_reference(&a, &b)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
        prop_assert_eq!(got, boundf(&binary(&b), &binary(&a)).unwrap());
    }

    #[test]
    fn adding_a_correct_pixel_never_lowers_iou(a in bits(), b in bits(), i in 0usize..N * N) {
        let (_, before) = f1_iou(&binary(&a), &binary(&b)).unwrap();
        let (mut a2, mut b2) = (a.clone(), b.clone());
        a2[i] = true;
        b2[i] = true;
        let (_, after) = f1_iou(&binary(&a2), &binary(&b2)).unwrap();
        prop_assert!(after >= before);
    }

    #[test]
    fn report_lies_in_the_unit_interval(pairs in prop::collection::vec((bits(), bits()), 1..5)) {
        let preds: Vec<Mask> = pairs.iter().map(|(a, _)| binary(a)).collect();
        let gts: Vec<Mask> = pairs.iter().map(|(_, b)| binary(b)).collect();
        let (r, per) = MetricReport::evaluate(&preds, &gts).unwrap();
        prop_assert_eq!(per.len(), pairs.len());
        for v in [r.f1, r.miou, r.wcov, r.boundf] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(r.f1 >= r.miou);
        let back = MetricReport::from_csv_row(&r.csv_row()).unwrap();
        prop_assert!((back.miou - r.miou).abs() < 1e-6);
    }
}

fn rect(y0: usize, y1: usize, x0: usize, x1: usize) -> Mask {
    Mask::from_fn(N, N, |y, x| ((y0..y1).contains(&y) && (x0..x1).contains(&x)) as u8 as f32)
}

#[test]
fn region_examples() {
    let gt = rect(2, 8, 2, 8);
    assert_eq!(f1_iou(&gt, &gt).unwrap(), (1.0, 1.0));
    assert_eq!(f1_iou(&rect(0, 2, 0, 2), &rect(9, 11, 9, 11)).unwrap(), (0.0, 0.0));
    let (f1, iou) = f1_iou(&rect(2, 5, 2, 8), &gt).unwrap();
    assert!((iou - 0.5).abs() < 1e-12 && (f1 - 2.0 / 3.0).abs() < 1e-12);
    let empty = Mask::zeros(N, N);
    assert_eq!(f1_iou(&empty, &empty).unwrap(), (1.0, 1.0));
    assert!(f1_iou(&Mask::from_fn(N, N, |_, _| 0.5), &gt).is_err());
    assert!(f1_iou(&Mask::zeros(3, 3), &gt).is_err());
}

#[test]
fn coverage_examples() {
    let gt = rect(0, 4, 0, 4);
    assert_eq!(wcov(&[gt.clone(), gt.clone()], &[gt.clone(), gt.clone()]).unwrap(), 1.0);
    // Equal areas: IoU 0.5 and 1.0.
    let half = rect(0, 2, 0, 4);
    assert!((wcov(&[half, gt.clone()], &[gt.clone(), gt.clone()]).unwrap() - 0.75).abs() < 1e-12);
    // Areas 100 and 300 with IoU 1.0 and 0.5.
    let block = |rows: usize, cols: usize| Mask::from_fn(20, 20, move |y, x| (y < rows && x < cols) as u8 as f32);
    let got = wcov(&[block(10, 10), block(15, 10)], &[block(10, 10), block(15, 20)]).unwrap();
    assert!((got - 0.625).abs() < 1e-12);
    assert!(wcov(&[], &[]).is_err());
}

#[test]
fn boundary_examples() {
    let gt = rect(3, 9, 3, 9);
    assert_eq!(boundf(&gt, &gt).unwrap(), 1.0);
    let dilated = Mask::from_fn(N, N, |y, x| {
        let on = |y: i64, x: i64| (3..9).contains(&y) && (3..9).contains(&x);
        let (y, x) = (y as i64, x as i64);
        (on(y, x) || on(y - 1, x) || on(y + 1, x) || on(y, x - 1) || on(y, x + 1)) as u8 as f32
    });
    assert_eq!(boundf(&dilated, &gt).unwrap(), 1.0);
    let thin = rect(0, 12, 0, 1);
    let far = rect(0, 12, 6, 7);
    assert_eq!(boundf(&thin, &far).unwrap(), 0.0);
    assert_eq!(boundf(&Mask::zeros(N, N), &Mask::zeros(N, N)).unwrap(), 1.0);
    assert_eq!(boundf(&Mask::zeros(N, N), &gt).unwrap(), 0.0);
}

use proptest::prelude::*;
use roughman::lift::{concat_classical, restrict, signature, SampledPath};
use roughman::tensor::TruncatedTensor;

fn walk(d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 2..12).prop_map(|steps| {
        let mut p = vec![0.0; steps[0].len()];
        let mut pts = vec![p.clone()];
        for s in steps {
            p.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            pts.push(p.clone());
        }
        pts
    })
}

fn lie_element(d: usize, level: usize) -> impl Strategy<Value = TruncatedTensor> {
    prop::collection::vec(-0.5f64..0.5, (1..=level).map(|g| d.pow(g as u32)).sum::<usize>()).prop_map(move |c| {
        let mut grades = vec![vec![0.0]];
        let mut at = 0;
        for g in 1..=level {
            let n = d.pow(g as u32);
            grades.push(c[at..at + n].to_vec());
            at += n;
        }
        TruncatedTensor::from_grades(d, grades).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn log_inverts_exp(x in lie_element(2, 3)) {
        let back = x.exp().unwrap().log().unwrap();
        prop_assert!(back.sub(&x).max_norm() < 1e-12);
    }

    #[test]
    fn group_inverse_is_two_sided(x in lie_element(3, 3)) {
        let g = x.exp().unwrap();
        let one = TruncatedTensor::one(3, 3).unwrap();
        prop_assert!(g.product(&g.inverse()).sub(&one).max_norm() < 1e-12);
        prop_assert!(g.inverse().product(&g).sub(&one).max_norm() < 1e-12);
    }

    #[test]
    fn signature_is_multiplicative(pts in walk(2), cut in 0.05f64..0.95) {
        let x = signature(&SampledPath::from_points(pts).unwrap(), 3).unwrap();
        let t = x.t0() + cut * (x.t1() - x.t0());
        let joined = concat_classical(&restrict(&x, x.t0(), t).unwrap(), &restrict(&x, t, x.t1()).unwrap()).unwrap();
        let scale = 1.0 + x.total().max_norm();
        prop_assert!(joined.total().sub(&x.total()).max_norm() < 1e-12 * scale);
    }

    #[test]
    fn level_one_is_the_increment(pts in walk(3)) {
        let x = signature(&SampledPath::from_points(pts.clone()).unwrap(), 2).unwrap();
        let last = pts.last().unwrap();
        for (i, v) in x.total().grade(1).iter().enumerate() {
            prop_assert!((v - (last[i] - pts[0][i])).abs() < 1e-12);
        }
    }
}

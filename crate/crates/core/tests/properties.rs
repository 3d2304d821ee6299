use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hcflab::algebra::{self, gram, CurvatureOperator};
use hcflab::cones::{self, ConeSpec, MarginOptions};
use hcflab::grid::{Backend, Differentiator, Dir, TorusChart};
use hcflab::linalg::{self, CMat};
use hcflab::random;
use hcflab::tensor::{Slot, TensorField};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel_err(a: &CMat, b: &CMat) -> f64 {
    linalg::max_abs(&(a - b)) / linalg::max_abs(b).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn square_routes_agree_for_any_metric(seed: u64, n in 1usize..=3) {
        let mut r = rng(seed);
        let g = random::random_metric(&mut r, n);
        let omega = random::random_operator(&mut r, n).with_metric(g.clone()).unwrap();
        let a = algebra::square_coord(&omega, &g).unwrap();
        let b = algebra::square_spectral(&omega, &g).unwrap();
        prop_assert!(rel_err(a.matrix(), b.matrix()) <= 1e-10);
    }

    #[test]
    fn square_and_gram_are_positive(seed: u64, n in 1usize..=3, k in 0usize..4) {
        let mut r = rng(seed);
        let omega = random::random_operator(&mut r, n);
        let sq = algebra::square_spectral(&omega, omega.metric()).unwrap();
        prop_assert!(linalg::min_eigenvalue(sq.matrix()).unwrap() >= -1e-10 * sq.norm().max(1.0));
        let a: Vec<_> = (0..k).map(|_| random::random_endo(&mut r, n)).collect();
        let gr = gram(n, &a);
        prop_assert!(linalg::min_eigenvalue(gr.matrix()).unwrap() >= -1e-10 * gr.norm().max(1.0));
    }

    #[test]
    fn sharp_is_symmetric_and_polarizes(seed: u64, n in 1usize..=3) {
        let mut r = rng(seed);
        let p = random::random_operator(&mut r, n);
        let q = random::random_operator(&mut r, n);
        let pq = algebra::sharp(&p, &q).unwrap();
        let qp = algebra::sharp(&q, &p).unwrap();
        prop_assert!(rel_err(pq.matrix(), qp.matrix()) <= 1e-12);
        let half = algebra::sharp(&p, &p).unwrap().scale(0.5);
        let sq = algebra::sharp_square(&p).unwrap();
        prop_assert!(rel_err(sq.matrix(), half.matrix()) <= 1e-12);
    }

    #[test]
    fn sharp_square_is_unitarily_equivariant(seed: u64, n in 2usize..=3) {
        let mut r = rng(seed);
        let omega = random::random_operator(&mut r, n);
        let u = random::random_unitary(&mut r, n);
        let a = algebra::sharp_square(&omega.ad_conjugate(&u).unwrap()).unwrap();
        let b = algebra::sharp_square(&omega).unwrap().ad_conjugate(&u).unwrap();
        prop_assert!(rel_err(a.matrix(), b.matrix()) <= 1e-11);
    }

    #[test]
    fn ad_action_is_hermitian_and_traceless_against_identity(seed: u64, n in 1usize..=3) {
        let mut r = rng(seed);
        let omega = random::random_operator(&mut r, n);
        let v = random::random_endo(&mut r, n);
        let ad = algebra::ad_action(&v, &omega).unwrap();
        prop_assert!(ad.hermitian_defect() <= 1e-12 * ad.norm().max(1.0));
        // [v, Id] = 0, so the identity direction sees no ad contribution
        let id = hcflab::Endo::identity(n);
        prop_assert!(algebra::evaluate(&ad, &id).unwrap().abs() <= 1e-11 * ad.norm().max(1.0));
    }

    #[test]
    fn margins_are_nested(seed: u64) {
        let mut r = rng(seed);
        let omega = random::random_operator(&mut r, 2);
        let opts = MarginOptions { restarts: 8, ..MarginOptions::default() };
        let dn = cones::margin(&omega, &ConeSpec::dual_nakano(), &opts).unwrap().margin;
        let m2 = cones::margin(&omega, &ConeSpec::dual_m(2), &opts).unwrap().margin;
        let gr = cones::margin(&omega, &ConeSpec::griffiths(), &opts).unwrap().margin;
        let ob = cones::margin(&omega, &ConeSpec::orthogonal_bisectional(), &opts).unwrap().margin;
        prop_assert!(dn <= m2 + 1e-9);
        prop_assert!(m2 <= gr + 1e-9);
        prop_assert!(gr <= ob + 1e-9);
    }

    #[test]
    fn margins_scale_linearly(seed: u64, s in 0.1f64..10.0) {
        let mut r = rng(seed);
        let omega: CurvatureOperator = random::random_operator(&mut r, 2);
        let opts = MarginOptions::default();
        let a = cones::margin(&omega, &ConeSpec::griffiths(), &opts).unwrap().margin;
        let b = cones::margin(&omega.scale(s), &ConeSpec::griffiths(), &opts).unwrap().margin;
        prop_assert!((b - s * a).abs() <= 1e-7 * s.max(1.0));
    }

    #[test]
    fn permute_round_trips(seed: u64) {
        let mut r = rng(seed);
        let comps: Vec<_> = (0..8).map(|_| vec![random::gaussian_c64(&mut r); 3]).collect();
        let x = TensorField::new(2, vec![Slot::Upper, Slot::Lower, Slot::LowerBar], comps).unwrap();
        let y = x.permute(&[2, 0, 1]).unwrap();
        prop_assert_eq!(y.sig(), &[Slot::LowerBar, Slot::Upper, Slot::Lower][..]);
        let z = y.permute(&[1, 2, 0]).unwrap();
        prop_assert_eq!(z.sig(), x.sig());
        prop_assert_eq!(z.sub(&x).unwrap().max_abs(), 0.0);
        prop_assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn derivatives_are_linear_and_conjugation_symmetric(seed: u64, dir in 0usize..2) {
        let mut r = rng(seed);
        let chart = TorusChart::uniform(1, 1.0, 8).unwrap();
        let d = Differentiator::new(&chart, Backend::Spectral);
        let f: Vec<_> = (0..chart.len()).map(|_| random::gaussian_c64(&mut r)).collect();
        let h: Vec<_> = (0..chart.len()).map(|_| random::gaussian_c64(&mut r)).collect();
        let s = random::gaussian_c64(&mut r);
        let comb: Vec<_> = f.iter().zip(&h).map(|(a, b)| a * s + b).collect();
        let (df, dh, dc) = (
            d.derivative(&f, Dir::Holo(0)).unwrap(),
            d.derivative(&h, Dir::Holo(0)).unwrap(),
            d.derivative(&comb, Dir::Holo(0)).unwrap(),
        );
        for p in 0..chart.len() {
            prop_assert!((dc[p] - df[p] * s - dh[p]).norm() <= 1e-11);
        }
        // conj(d f) = dbar conj(f)
        let dir = if dir == 0 { Dir::Holo(0) } else { Dir::Anti(0) };
        let a = d.derivative(&f, dir).unwrap();
        let fc: Vec<_> = f.iter().map(|z| z.conj()).collect();
        let b = d.derivative(&fc, dir.conj()).unwrap();
        for p in 0..chart.len() {
            prop_assert!((a[p].conj() - b[p]).norm() <= 1e-11);
        }
    }
}

use std::sync::Arc;

use proptest::prelude::*;
use warpflow_core::audit::audit_state;
use warpflow_core::flow::step;
use warpflow_core::{
    AmbientVector, BaseGrid, BaseManifold, Chart, FlowConfig, FlowState, FlowType, Perturbation, SliceFunctional,
    WarpFamily, WarpFunction, WarpedSpace,
};

fn family() -> impl Strategy<Value = WarpFamily> {
    prop_oneof![
        Just(WarpFamily::Sinh),
        Just(WarpFamily::Cosh),
        (0.5..2.0f64, 0.0..0.9f64).prop_map(|(alpha, b)| WarpFamily::Combination { alpha, beta: b * alpha }),
        (0.1..1.0f64).prop_map(|shift| WarpFamily::Affine { shift }),
        (0.2..1.0f64, 0.0..1.0f64, 0.0..0.5f64).prop_map(|(c0, c1, c2)| WarpFamily::Polynomial {
            coeffs: vec![c0, c1, c2]
        }),
    ]
}

fn base() -> impl Strategy<Value = BaseManifold> {
    prop_oneof![Just(BaseManifold::RoundSphere), Just(BaseManifold::FlatTorus)]
}

fn vector() -> impl Strategy<Value = AmbientVector> {
    (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(r, x, y)| AmbientVector { radial: r, base: vec![x, y] })
}

fn space(fam: WarpFamily, base: BaseManifold) -> WarpedSpace {
    WarpedSpace::surface(WarpFunction::new(fam, 0.1, 3.0).unwrap(), base)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn summation_by_parts_on_torus(seed_f in 0u64..1000, seed_g in 0u64..1000, n in prop::sample::select(vec![16usize, 24, 32])) {
        let grid = BaseGrid::new(Chart::Torus2d, n).unwrap();
        let (p, q) = (Perturbation::new(Chart::Torus2d, seed_f), Perturbation::new(Chart::Torus2d, seed_g));
        let f = grid.field(|y| p.eval(y) + (y[0] + 2.0 * y[1]).sin().exp());
        let g = grid.field(|y| q.eval(y) * y[1].cos().exp());
        let (pf, pg) = (grid.partials(&f), grid.partials(&g));
        for (df, dg) in [(&pf.d1, &pg.d1), (&pf.d2, &pg.d2)] {
            let lhs: Vec<f64> = f.values().iter().zip(dg).map(|(a, b)| a * b).collect();
            let rhs: Vec<f64> = g.values().iter().zip(df).map(|(a, b)| a * b).collect();
            let (l, r) = (grid.integrate_values(&lhs), grid.integrate_values(&rhs));
            prop_assert!((l + r).abs() < 1e-10 * (1.0 + l.abs()), "{} vs {}", l, -r);
        }
    }

    #[test]
    fn ricci_is_symmetric_and_bilinear(fam in family(), b in base(), r in 0.2..2.9f64,
                                       x in vector(), y in vector(), z in vector(), c in -3.0..3.0f64) {
        let sp = space(fam, b);
        let rc = |p: &AmbientVector, q: &AmbientVector| sp.ricci(r, p, q).unwrap();
        prop_assert!((rc(&x, &y) - rc(&y, &x)).abs() <= 1e-12 * (1.0 + rc(&x, &y).abs()));
        let xz = AmbientVector {
            radial: x.radial + c * z.radial,
            base: x.base.iter().zip(&z.base).map(|(p, q)| p + c * q).collect(),
        };
        let lin = rc(&x, &y) + c * rc(&z, &y);
        prop_assert!((rc(&xz, &y) - lin).abs() <= 1e-10 * (1.0 + lin.abs()));
    }

    #[test]
    fn hyperbolic_space_is_einstein(r in 0.05..3.9f64, x in vector(), y in vector()) {
        let sp = WarpedSpace::surface(WarpFunction::new(WarpFamily::Sinh, 0.0, 4.0).unwrap(), BaseManifold::RoundSphere);
        let rc = sp.ricci(r, &x, &y).unwrap();
        let g = sp.metric(r, &x, &y).unwrap();
        prop_assert!((rc + 2.0 * g).abs() <= 1e-10 * (1.0 + g.abs()));
    }

    #[test]
    fn warp_derivatives_match_differences(fam in family(), r in 0.3..2.7f64) {
        let w = WarpFunction::new(fam, 0.1, 3.0).unwrap();
        let h = 1e-4;
        let j = w.jet(r);
        let (p, m) = (w.jet(r + h), w.jet(r - h));
        for (exact, fd) in [
            (j.d1, (p.value - m.value) / (2.0 * h)),
            (j.d2, (p.d1 - m.d1) / (2.0 * h)),
            (j.d3, (p.d2 - m.d2) / (2.0 * h)),
        ] {
            prop_assert!((exact - fd).abs() < 1e-6 * (1.0 + exact.abs()), "{} vs {}", exact, fd);
        }
        let prim = (w.theta_primitive(r + h).unwrap() - w.theta_primitive(r - h).unwrap()) / (2.0 * h);
        prop_assert!((prim - j.value).abs() < 1e-6 * (1.0 + j.value.abs()));
    }

    #[test]
    fn slice_functionals_round_trip(r in 0.3..2.5f64) {
        for b in [BaseManifold::RoundSphere, BaseManifold::FlatTorus] {
            let sp = space(WarpFamily::Cosh, b);
            let s = sp.slice_functionals(r).unwrap();
            prop_assert!((sp.slice_radius_for_area(s.area).unwrap() - r).abs() < 1e-9);
            prop_assert!((sp.slice_radius_for_volume(s.volume).unwrap() - r).abs() < 1e-9);
            let phi = sp.phi_of_area(s.area, SliceFunctional::W2).unwrap();
            prop_assert!((phi - s.w2).abs() < 1e-9 * s.w2.abs().max(1.0));
            let psi = sp.psi_of_volume(s.volume).unwrap();
            prop_assert!((psi - s.w2).abs() < 1e-9 * s.w2.abs().max(1.0));
        }
    }

    #[test]
    fn slices_are_umbilic_with_slice_curvature(fam in family(), b in base(), r in 0.3..2.7f64) {
        let sp = space(fam, b);
        let chart = if b == BaseManifold::FlatTorus { Chart::Torus2d } else { Chart::AxisymSphere };
        let s = FlowState::init_slice(&sp, Arc::new(BaseGrid::new(chart, 16).unwrap()), r).unwrap();
        let j = sp.warp().jet(r);
        let k = j.d1 / j.value;
        let geo = s.geometry();
        for i in 0..geo.k1.len() {
            prop_assert!((geo.k1[i] - k).abs() <= 1e-12 * (1.0 + k.abs()));
            prop_assert!((geo.k2[i] - k).abs() <= 1e-12 * (1.0 + k.abs()));
        }
        let a = audit_state(&sp, &s);
        prop_assert!(a.mink1_residual.abs() <= 1e-12 * (1.0 + a.residual_scale.abs()));
    }

    #[test]
    fn perturbation_is_normalised(seed in any::<u64>()) {
        for (chart, n) in [(Chart::Torus2d, 32usize), (Chart::AxisymSphere, 256)] {
            let grid = BaseGrid::new(chart, n).unwrap();
            let p = Perturbation::new(chart, seed).sample(&grid);
            let sup = p.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            prop_assert!(sup <= 1.0 + 1e-12 && sup > 0.8);
            prop_assert!(grid.integrate_values(&p).abs() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn steps_respect_barriers_and_volume(seed in 0u64..10_000) {
        let sp = WarpedSpace::surface(WarpFunction::new(WarpFamily::Cosh, 0.1, 4.0).unwrap(), BaseManifold::FlatTorus);
        let grid = Arc::new(BaseGrid::new(Chart::Torus2d, 16).unwrap());
        let s0 = FlowState::init_random(&sp, grid, 1.0, 0.1, seed).unwrap();
        let lcf = FlowConfig::new(FlowType::LocallyConstrained);
        let gl = FlowConfig::new(FlowType::GuanLi);
        let (mut a, mut b) = (s0.clone(), s0.clone());
        let v0 = s0.functionals(&sp).volume;
        // the discrete volume changes at the rate of the first Minkowski residual
        let mut budget = 0.0;
        for _ in 0..20 {
            let (na, ra) = step(&a, &lcf, &sp).unwrap();
            prop_assert!(na.u().min() >= a.u().min() - 1e-10);
            prop_assert!(na.u().max() <= a.u().max() + 1e-10);
            prop_assert!(ra.kappa_min > 0.0);
            a = na;
            let (nb, rb) = step(&b, &gl, &sp).unwrap();
            budget += rb.dt * rb.mink1_residual.abs().max(b.record(&sp, FlowType::GuanLi, 0.0).unwrap().mink1_residual.abs());
            prop_assert!((rb.volume - v0).abs() <= 2.0 * budget + 1e-12 * v0, "{} > {}", (rb.volume - v0).abs(), budget);
            b = nb;
        }
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use tomoalign::align::{com_prealign, compute_align_weights, line_search_update, line_search_with, prox_box, StepOptions};
use tomoalign::projector::ProjectionJacobian;
use tomoalign::*;

fn random_volume(shape: GridShape, seed: u64) -> Volume<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_fn(shape, |_, _, _| rng.gen_range(0.0..1.0))
}

/// Affine image model `b + Σ_j a_j D_j` with random `b`, `D`.
fn linear_model(seed: u64, m: usize) -> (Vec<f64>, [Vec<f64>; N_PARAMS]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let d = std::array::from_fn(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect());
    (b, d)
}

fn eval_model(b: &[f64], d: &[Vec<f64>; N_PARAMS], a: &AlignParams<f64>) -> Vec<f64> {
    let v = a.to_array();
    (0..b.len())
        .map(|k| b[k] + (0..N_PARAMS).map(|j| v[j] * d[j][k]).sum::<f64>())
        .collect()
}

#[test]
fn line_search_hits_the_parabola_minimum_on_a_linear_model() {
    for seed in 0..20u64 {
        let m = 50;
        let (b, d) = linear_model(seed, m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let p: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = AlignParams::from_array(std::array::from_fn(|_| rng.gen_range(-0.5..0.5)));
        let jac = ProjectionJacobian {
            image: eval_model(&b, &d, &a),
            derivs: d.clone(),
        };
        let mut fit = [true; N_PARAMS];
        fit[Param::ShiftZ.index()] = false;
        let cases = [
            (StepRule::Preconditioned, AlignWeights::from_rotational(3.0, 5.0, 7.0)),
            (StepRule::Weighted, AlignWeights::unit()),
        ];
        for (rule, weights) in cases {
            let opts = StepOptions { weights, rule, fit, max_halvings: 30 };
            let out = line_search_with(&a, &jac, &p, &opts, None, |c| eval_model(&b, &d, c));

            // closed form along the chosen direction s: min ½‖r − γGs‖² = ½‖r‖² − ⟨Gᵀr, s⟩² / (2‖Gs‖²)
            let r: Vec<f64> = jac.image.iter().zip(&p).map(|(w, q)| w - q).collect();
            let g = jac.apply_transpose(&r);
            let g: [f64; N_PARAMS] = std::array::from_fn(|j| if fit[j] { g[j] } else { 0.0 });
            let s: [f64; N_PARAMS] = match rule {
                StepRule::Weighted => g,
                StepRule::Preconditioned => std::array::from_fn(|j| g[j] / (weights.w[j] * weights.w[j])),
            };
            let gs = jac.apply(&s);
            let gts: f64 = g.iter().zip(&s).map(|(x, y)| x * y).sum();
            let expected = 0.5 * r.iter().map(|v| v * v).sum::<f64>() - gts * gts / (2.0 * gs.iter().map(|v| v * v).sum::<f64>());
            assert_eq!(out.n_halvings, 0);
            assert!((out.objective_after - expected).abs() <= 1e-10 * expected.abs().max(1.0), "{rule:?}: {} vs {expected}", out.objective_after);
        }
    }
}

#[test]
fn line_search_never_increases_the_residual() {
    let shape = GridShape::cube(12);
    let angles = vec![0.2, 1.1, 2.5];
    let proj = Projector::new(shape, angles.clone(), InterpScheme::BICUBIC, None).unwrap();
    let sim = proj.with_scheme(InterpScheme::TRILINEAR);
    let opts = StepOptions { weights: AlignWeights::for_grid(shape), ..StepOptions::default() };
    for seed in 0..12u64 {
        let u = random_volume(shape, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth = AlignStack::zeros(angles.clone());
        for p in &mut truth.params {
            *p = AlignParams::from_array(std::array::from_fn(|_| rng.gen_range(-0.8..0.8)));
        }
        let p = sim.project(&u, &truth);
        for i in 0..angles.len() {
            let out = line_search_update(&proj, i, &AlignParams::zero(), &u, p.image(i), &opts, None);
            assert!(out.objective_after <= out.objective_before);
            assert!(out.stalled || out.params != AlignParams::zero() || out.gamma == 0.0);
        }
    }
}

#[test]
fn box_prox_matches_brute_force_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let lo_v: f64 = rng.gen_range(-2.0..0.5);
        let hi_v: f64 = lo_v + rng.gen_range(0.0..2.0);
        let x: f64 = rng.gen_range(-4.0..4.0);
        let grid = 20_000;
        let brute = (0..=grid)
            .map(|k| lo_v + (hi_v - lo_v) * k as f64 / grid as f64)
            .min_by(|a, b| (a - x).abs().total_cmp(&(b - x).abs()))
            .unwrap();
        let mut a = AlignStack::zeros(vec![0.0]);
        a.params[0].shift[0] = x;
        let mut lo = AlignParams::from_array([-10.0; N_PARAMS]);
        let mut hi = AlignParams::from_array([10.0; N_PARAMS]);
        lo.shift[0] = lo_v;
        hi.shift[0] = hi_v;
        let out = prox_box(&a, &lo, &hi, 0.3).unwrap();
        assert!((out.params[0].shift[0] - brute).abs() <= (hi_v - lo_v) / grid as f64);
    }
}

#[test]
fn center_of_mass_is_shift_equivariant() {
    let (w, h) = (20, 16);
    let angles = vec![0.0, 0.5, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let images: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let mut img = vec![0.0; w * h];
            for y in 4..12 {
                for x in 5..14 {
                    img[x + w * y] = rng.gen_range(0.1..1.0);
                }
            }
            img
        })
        .collect();
    let (dx, dy) = (3usize, 2usize);
    let shifted: Vec<Vec<f64>> = images
        .iter()
        .map(|img| {
            let mut out = vec![0.0; w * h];
            for y in 0..h - dy {
                for x in 0..w - dx {
                    out[(x + dx) + w * (y + dy)] = img[x + w * y];
                }
            }
            out
        })
        .collect();
    let p = ProjectionStack::from_images(images, w, h, angles.clone(), None);
    let q = ProjectionStack::from_images(shifted, w, h, angles, None);
    let a = com_prealign(&p, [w, h]).unwrap();
    let b = com_prealign(&q, [w, h]).unwrap();
    for (pa, pb) in a.params.iter().zip(&b.params) {
        assert!((pb.shift[0] - pa.shift[0] - dx as f64).abs() <= 1e-10);
        assert!((pb.shift[1] - pa.shift[1] - dy as f64).abs() <= 1e-10);
        assert_eq!(pb.theta_xy, 0.0);
    }
}

#[test]
fn weights_scale_with_the_grid() {
    let small = compute_align_weights(&Volume::<f64>::filled(GridShape::cube(16), 1.0)).unwrap();
    let large = compute_align_weights(&Volume::<f64>::filled(GridShape::cube(32), 1.0)).unwrap();
    for j in 3..N_PARAMS {
        let ratio = large.w[j] / small.w[j];
        assert!((ratio - 2.0).abs() <= 0.02, "ratio {ratio}");
    }
    let cyl = Support::Cylinder.mask::<f64>(GridShape::cube(24));
    let w = compute_align_weights(&cyl).unwrap();
    assert!(w.w.iter().all(|&v| v > 0.0));
    assert!(w.w[3] > 1.0 && w.w[3] < 24.0 * PI);
}

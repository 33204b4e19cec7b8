use std::f64::consts::PI;
use tomoalign::phantom::{make_misalignment, make_phantom, simulate_data, MisalignSpec, PhantomSpec};
use tomoalign::*;

#[test]
fn noise_energy_matches_sigma() {
    let u: Volume<f64> = make_phantom(&PhantomSpec { n: 48, ..PhantomSpec::default() });
    let angles = AlignStack::uniform_angles(48, 0.0, PI, false);
    let a = make_misalignment(&angles, &MisalignSpec::default()).unwrap();
    let sigma = 0.05;
    let clean = simulate_data(&u, &a, InterpScheme::TRILINEAR, 0.0, None, 3);
    let noisy = simulate_data(&u, &a, InterpScheme::TRILINEAR, sigma, None, 3);
    let m = clean.images.len();
    assert!(m >= 100_000);
    let energy = noisy.sub(&clean).norm().powi(2) / m as f64;
    assert!((energy / (sigma * sigma) - 1.0).abs() <= 0.05, "{energy}");
    let again = simulate_data(&u, &a, InterpScheme::TRILINEAR, sigma, None, 3);
    assert_eq!(again, noisy);
}

#[test]
fn central_half_window_halves_the_image() {
    let u: Volume<f64> = make_phantom(&PhantomSpec { n: 32, n_ellipsoids: 4, ..PhantomSpec::default() });
    let angles = AlignStack::uniform_angles(4, 0.0, PI, false);
    let a = AlignStack::zeros(angles);
    let roi = Roi::centered([32, 32], [16, 16]);
    let p = simulate_data(&u, &a, InterpScheme::TRILINEAR, 0.0, Some(roi), 0);
    assert_eq!((p.width, p.height), (16, 16));
    assert_eq!(p.images.len(), 4 * 256);
}

//! Analytic objective gradients against central finite differences.

use cfens_core::detect::{DetectorState, ZScoreDetector};
use cfens_core::gradcheck::{check_gradient, kink_distance, random_instance, DetectorChoice};
use cfens_core::Method;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
/// Points this close to an `|.|` kink are excluded: closer than 1e-6, or
/// close enough that the difference stencil straddles the kink.
const KINK_MARGIN: f64 = if 2.0 * STEP > 1e-6 { 2.0 * STEP } else { 1e-6 };
const INSTANCES: usize = 20;

fn worst_error(method: Method, choice: DetectorChoice, d: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < INSTANCES {
        let inst = random_instance(&mut rng, method, choice, 10, d).unwrap();
        let z = match &inst.detector {
            DetectorState::Zscore(z) => Some(z.clone()),
            _ => None,
        };
        let kink = kink_distance(method, &inst.window, &inst.params, &inst.hp, z.as_ref()).unwrap();
        if kink < KINK_MARGIN {
            continue;
        }
        let c = check_gradient(method, &inst.window, &inst.params, &inst.hp, &inst.detector, STEP).unwrap();
        assert!(c.analytic_norm > 0.0);
        worst = worst.max(c.rel_error);
        checked += 1;
    }
    worst
}

#[test]
fn all_objectives_match_finite_differences() {
    let methods = [Method::Ice, Method::Dpe, Method::SparseIce, Method::SparseDpe];
    let mut seed = 0;
    for method in methods {
        for choice in [DetectorChoice::Zscore, DetectorChoice::Recon] {
            for d in [1, 4] {
                seed += 1;
                let err = worst_error(method, choice, d, seed);
                assert!(err < TOLERANCE, "{method} {choice:?} D={d}: relative error {err:e}");
            }
        }
    }
}

#[test]
fn zscore_kinks_are_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut inst = random_instance(&mut rng, Method::Ice, DetectorChoice::Zscore, 10, 1).unwrap();
    let mean = inst.window.context.column(0).mean().unwrap();
    inst.params[3] = mean;
    let det = ZScoreDetector::default();
    let k = kink_distance(Method::Ice, &inst.window, &inst.params, &inst.hp, Some(&det)).unwrap();
    assert!(k < 1e-12);
}

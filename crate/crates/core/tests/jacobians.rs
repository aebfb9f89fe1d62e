mod common;

use std::sync::OnceLock;

use common::{jacobian_error_with, Term};
use proptest::prelude::*;
use rigidflow::energy::{EnergyConfig, EnergyWeights, InstanceProblem, Interpolation};
use rigidflow::synth::Rendered;
use rigidflow::Twist;

fn scenes() -> &'static Vec<Rendered> {
    static SCENES: OnceLock<Vec<Rendered>> = OnceLock::new();
    SCENES.get_or_init(|| (0..3).map(common::clean_scene).collect())
}

fn check(scene: usize, id: u32, delta: [f64; 6], interpolation: Interpolation) -> Result<(), TestCaseError> {
    let r = &scenes()[scene];
    let gt = r.motion_map()[&id];
    let m = Twist::from_slice(&delta).exp().unwrap().compose(&gt);
    let cfg = EnergyConfig {
        interpolation,
        ..Default::default()
    };
    let prob = InstanceProblem::new(&r.frame, id, EnergyWeights::foreground(), cfg).unwrap();
    for (term, tol) in [(Term::Photometric, 1e-4), (Term::Rigid, 1e-5), (Term::Flow, 1e-5)] {
        let skip_kinks = interpolation == Interpolation::Bilinear && term == Term::Photometric;
        if let Some(e) = jacobian_error_with(term, &prob, &m, 1e-6, skip_kinks) {
            prop_assert!(e < tol, "{term:?} scene {scene} id {id}: {e:e}");
        }
    }
    Ok(())
}

fn delta() -> impl Strategy<Value = [f64; 6]> {
    (
        prop::array::uniform3(-0.2f64..0.2),
        prop::array::uniform3(-0.02f64..0.02),
    )
        .prop_map(|(v, w)| [v[0], v[1], v[2], w[0], w[1], w[2]])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analytic_jacobians_match_central_differences(scene in 0usize..3, id in 0u32..4, d in delta()) {
        check(scene, id, d, Interpolation::Bicubic)?;
    }

    #[test]
    fn bilinear_jacobians_match_central_differences(scene in 0usize..3, id in 0u32..4, d in delta()) {
        check(scene, id, d, Interpolation::Bilinear)?;
    }
}

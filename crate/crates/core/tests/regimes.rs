use ceboost_core::models::{excess_kurtosis, spekf, SpekfParams, SPEKF_UR};
use ceboost_core::{integrate, RegimeSchedule, SimulationConfig};

fn kurtosis_of_ur(params: SpekfParams, duration: f64, seed: u64) -> f64 {
    let cfg = SimulationConfig {
        dt: 0.001,
        duration,
        seed,
        initial_state: vec![0.0; 6],
        burn_in: 20.0,
    };
    let traj = integrate(&RegimeSchedule::single(spekf(&params)), &cfg).unwrap();
    let ur: Vec<f64> = traj.values().column(SPEKF_UR).iter().copied().collect();
    excess_kurtosis(&ur)
}

#[test]
fn damping_noise_gives_fat_tails_in_first_two_spekf_regimes() {
    let p = SpekfParams::default();
    for seed in 1..=3 {
        let r1 = kurtosis_of_ur(p, 2000.0, seed);
        let r2 = kurtosis_of_ur(
            SpekfParams {
                omega_active: false,
                ..p
            },
            2000.0,
            seed,
        );
        assert!(r1 > 1.0 && r2 > 1.0, "seed {seed}: {r1} {r2}");
    }
}

#[test]
fn third_spekf_regime_is_close_to_gaussian() {
    // Phase noise alone leaves a small positive excess (about 0.25), so the
    // estimate is averaged over independent long runs.
    let p = SpekfParams {
        gamma_active: false,
        ..SpekfParams::default()
    };
    let mean = (1..=3).map(|seed| kurtosis_of_ur(p, 8000.0, seed)).sum::<f64>() / 3.0;
    assert!(mean < 0.3, "{mean}");
}

use cresp::spectral::{
    cf_targets, cf_targets_sum, combined_loss, discounted_inner, scs_loss, wse_loss, CfTargets, OmegaBatch,
};
use cresp::tabular::{exact_cf, RandomSpec, TabularPOMDP};
use cresp_tensor::{finite_diff_check, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss_value(
    f: impl Fn(&mut Tape, cresp_tensor::Var, cresp_tensor::Var, &CfTargets) -> cresp::Result<cresp_tensor::Var>,
    pc: &[f64],
    ps: &[f64],
    t: &CfTargets,
) -> f64 {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::new(vec![t.batch, t.kappa], pc.to_vec()).unwrap());
    let s = tape.constant(Tensor::new(vec![t.batch, t.kappa], ps.to_vec()).unwrap());
    let l = f(&mut tape, c, s, t).unwrap();
    tape.scalar(l)
}

fn random_targets(seed: u64, batch: usize, kappa: usize, horizon: usize) -> CfTargets {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omegas = OmegaBatch::sample(kappa, horizon, &mut rng).unwrap();
    let rewards: Vec<f64> = (0..batch * horizon).map(|_| rng.random_range(-1.0..1.0)).collect();
    cf_targets(&omegas, &rewards, horizon, 0.99).unwrap()
}

#[test]
fn omega_draws_are_centered() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let o = OmegaBatch::sample(100_000, 3, &mut rng).unwrap();
    for d in 0..3 {
        let mean = (0..o.kappa).map(|k| o.row(k)[d]).sum::<f64>() / o.kappa as f64;
        assert!(mean.abs() < 0.02);
    }
}

#[test]
fn spectral_losses_pass_gradient_checks() {
    let t = random_targets(1, 6, 5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let init = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..30).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let pc = store
        .add("pc", Tensor::new(vec![6, 5], init(&mut rng)).unwrap())
        .unwrap();
    let ps = store
        .add("ps", Tensor::new(vec![6, 5], init(&mut rng)).unwrap())
        .unwrap();
    type LossFn = fn(&mut Tape, cresp_tensor::Var, cresp_tensor::Var, &CfTargets) -> cresp::Result<cresp_tensor::Var>;
    let losses: [(&str, LossFn); 3] = [
        ("wse", |t, c, s, y| wse_loss(t, c, s, y)),
        ("scs", |t, c, s, y| scs_loss(t, c, s, y)),
        ("combined", |t, c, s, y| combined_loss(t, c, s, y, 0.5)),
    ];
    for (name, f) in losses {
        let report = finite_diff_check(&mut [&mut store], 1e-5, 60, &mut rng, |tape, bound| {
            let c = bound[0].var(pc);
            let s = bound[0].var(ps);
            f(tape, c, s, &t).map_err(|e| cresp_tensor::TensorError::Format(e.to_string()))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{name}: {}", report.max_rel_error);
    }
}

#[test]
fn scs_of_orthogonal_pair_is_zero() {
    // Single ω with phase θ: target (cos θ, sin θ); predict (-sin θ, cos θ).
    let o = OmegaBatch::new(1, 1, vec![1.3]).unwrap();
    let t = cf_targets(&o, &[0.7], 1, 0.9).unwrap();
    let loss = loss_value(scs_loss, &[-t.sin[0]], &[t.cos[0]], &t);
    assert!(loss.abs() < 1e-15);
}

#[test]
fn single_sequence_targets_agree_with_scalar_path() {
    let o = OmegaBatch::new(1, 3, vec![0.2, -1.0, 0.5]).unwrap();
    let r = [1.0, 0.5, -0.25];
    let t = cf_targets(&o, &r, 3, 0.8).unwrap();
    let phase = discounted_inner(o.row(0), &r, 0.8).unwrap();
    assert_eq!(t.cos[0], phase.cos());
    assert_eq!(t.sin[0], phase.sin());
}

#[test]
fn sum_targets_match_sequence_targets_at_horizon_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let o = OmegaBatch::sample(16, 1, &mut rng).unwrap();
    let r: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = cf_targets(&o, &r, 1, 0.99).unwrap();
    let b = cf_targets_sum(&o, &r, 1, 0.99).unwrap();
    for (x, y) in a.cos.iter().chain(&a.sin).zip(b.cos.iter().chain(&b.sin)) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn expected_wse_upper_bounds_cf_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = TabularPOMDP::random(
        &RandomSpec {
            n_states: 4,
            n_actions: 2,
            n_rewards: 3,
            gamma: 0.9,
            n_profiles: 2,
            stochastic_rewards: true,
        },
        &mut rng,
    )
    .unwrap();
    let aseq = [1, 0];
    let n_omega = 200;
    let n_rew = 2000;
    let omegas = OmegaBatch::sample(n_omega, 2, &mut rng).unwrap();
    // A fixed predictor that is a smooth function of ω.
    let pred: Vec<(f64, f64)> = (0..n_omega)
        .map(|k| {
            let w = omegas.row(k);
            (0.6 * (0.3 * w[0]).cos(), 0.4 * (0.5 * w[1]).sin())
        })
        .collect();
    let mut cf_err = Vec::new();
    let mut wse = Vec::new();
    for k in 0..n_omega {
        let phi = exact_cf(&m, 0, &aseq, omegas.row(k)).unwrap();
        cf_err.push((pred[k].0 - phi.re).powi(2) + (pred[k].1 - phi.im).powi(2));
    }
    for _ in 0..n_rew {
        let mut s = 0;
        let r: Vec<f64> = aseq
            .iter()
            .map(|&a| {
                let v = m.sample_reward(s, a, &mut rng);
                s = m.sample_next(s, a, &mut rng);
                v
            })
            .collect();
        let t = cf_targets(&omegas, &r, 2, m.gamma).unwrap();
        let pc: Vec<f64> = pred.iter().map(|p| p.0).collect();
        let ps: Vec<f64> = pred.iter().map(|p| p.1).collect();
        wse.push(loss_value(wse_loss, &pc, &ps, &t));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let se = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 / v.len() as f64).sqrt()
    };
    let (w, c) = (mean(&wse), mean(&cf_err));
    assert!(w >= c - 3.0 * se(&wse), "wse {w} cf err {c}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wse_is_nonnegative_and_zero_only_at_targets(seed in 0u64..10_000, noise in 0.0f64..1.0) {
        let t = random_targets(seed, 3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let pc: Vec<f64> = t.cos.iter().map(|c| c + noise * rng.random_range(-1.0..1.0)).collect();
        let ps: Vec<f64> = t.sin.iter().map(|s| s + noise * rng.random_range(-1.0..1.0)).collect();
        let l = loss_value(wse_loss, &pc, &ps, &t);
        prop_assert!(l >= 0.0);
        let exact = loss_value(wse_loss, &t.cos, &t.sin, &t);
        prop_assert!(exact.abs() < 1e-12);
    }

    #[test]
    fn scs_is_scale_invariant_and_bounded(seed in 0u64..10_000, scale in 0.1f64..10.0) {
        let t = random_targets(seed, 3, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let pc: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ps: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = loss_value(scs_loss, &pc, &ps, &t);
        let pcs: Vec<f64> = pc.iter().map(|v| v * scale).collect();
        let pss: Vec<f64> = ps.iter().map(|v| v * scale).collect();
        let scaled = loss_value(scs_loss, &pcs, &pss, &t);
        prop_assert!((base - scaled).abs() < 1e-6);
        // Unit-modulus targets bound the cosine similarity.
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
    }
}

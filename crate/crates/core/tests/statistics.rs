use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use resynth_core::bridge::{
    ddpm_backward, ddpm_backward_traced, sample_xt, sb_loss, Denoiser, NoiseSchedule, OracleDenoiser, NFE_SWEEP,
};
use resynth_core::corpus::Waveform;
use resynth_core::metrics::estoi;
use resynth_core::nnet::{lr_at, TimeEmbedding};

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Gaussian bridge pinned at `x0` (time 0) and `x1` (time 1), written from
/// the raw β sums rather than the schedule's cached tables.
fn bridge_oracle(beta: &[f64], k: usize, x0: f64, x1: f64) -> (f64, f64) {
    let t = beta.len() as f64;
    let s2: f64 = beta[..k].iter().map(|b| b / t).sum();
    let sb2: f64 = beta[k..].iter().map(|b| b / t).sum();
    ((sb2 * x0 + s2 * x1) / (s2 + sb2), s2 * sb2 / (s2 + sb2))
}

#[test]
fn marginal_draws_match_the_bridge_moments() {
    let sched = NoiseSchedule::symmetric(1000, 0.3, 1e-4).unwrap();
    let draws = 20_000;
    let x0 = Array2::from_elem((1, draws), 0.7);
    let x1 = Array2::from_elem((1, draws), -1.9);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in [1, 130, 500, 871, 999] {
        let xt = sample_xt(&x0, &x1, k, &sched, &mut rng).unwrap();
        let (mean, var) = moments(xt.as_slice().unwrap());
        let (want_mean, want_var) = bridge_oracle(sched.beta(), k, 0.7, -1.9);
        let se = (want_var / draws as f64).sqrt();
        assert!((mean - want_mean).abs() < 4.0 * se, "k={k}: mean {mean} vs {want_mean}");
        // sample variance of a Gaussian has relative sd sqrt(2/(n-1)) ≈ 1%
        assert!((var / want_var - 1.0).abs() < 0.05, "k={k}: var {var} vs {want_var}");
    }
}

#[test]
fn marginal_is_pinned_at_the_ends() {
    let sched = NoiseSchedule::symmetric(100, 0.3, 1e-4).unwrap();
    let x0 = Array2::from_shape_fn((3, 4), |(i, j)| i as f64 - 0.5 * j as f64);
    let x1 = x0.mapv(|v| 2.0 - v);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(sample_xt(&x0, &x1, 0, &sched, &mut rng).unwrap(), x0);
    assert_eq!(sample_xt(&x0, &x1, 100, &sched, &mut rng).unwrap(), x1);
    assert!(sample_xt(&x0, &x1, 101, &sched, &mut rng).is_err());
}

struct Constant(f64);

impl Denoiser for Constant {
    fn predict(
        &self,
        x: &Array2<f64>,
        _x1: &Array2<f64>,
        _k: usize,
    ) -> resynth_core::Result<Array2<f64>> {
        Ok(Array2::from_elem(x.raw_dim(), self.0))
    }
}

/// With `x0 = x1` the target at grid index `k` is Gaussian with variance
/// `σ̄²(k)/σ²(1)`, so a constant output `c` scores that plus `c²` on average
/// over `k` uniform on `1..=T`.
#[test]
fn degenerate_pair_loss_matches_closed_form() {
    let sched = NoiseSchedule::symmetric(1000, 0.3, 1e-4).unwrap();
    let total = sched.total_variance();
    let target_var = (1..=1000).map(|k| sched.sigma2_bar(k) / total).sum::<f64>() / 1000.0;
    let x = Array2::from_shape_fn((4, 16), |(i, j)| (i * 16 + j) as f64 * 0.01 - 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for c in [0.0, 0.5, -1.25] {
        let losses: Vec<f64> = (0..20_000)
            .map(|_| sb_loss(&Constant(c), &x, &x, &sched, &mut rng).unwrap())
            .collect();
        let (mean, var) = moments(&losses);
        let se = (var / losses.len() as f64).sqrt();
        let want = target_var + c * c;
        assert!((mean - want).abs() < 4.0 * se, "c={c}: {mean} vs {want} (se {se})");
    }
    // the symmetric schedule splits the variance evenly on average
    assert!((target_var - 0.5).abs() < 1e-3);
}

#[test]
fn oracle_denoiser_collapses_to_x0_at_every_nfe() {
    let sched = NoiseSchedule::symmetric(1000, 0.3, 1e-4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = Array2::from_shape_fn((6, 8), |_| rng.sample::<f64, _>(StandardNormal));
    let x1 = Array2::from_shape_fn((6, 8), |_| rng.sample::<f64, _>(StandardNormal));
    let oracle = OracleDenoiser {
        x0: x0.clone(),
        schedule: &sched,
    };
    for nfe in NFE_SWEEP.into_iter().chain([2, 1000]) {
        let out = ddpm_backward(&oracle, &x1, nfe, &sched, &mut rng).unwrap();
        let err = (&out - &x0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-6, "nfe={nfe}: {err}");
    }
}

/// With an exact denoiser each backward step samples the bridge posterior, so
/// the intermediate states follow the forward marginal.
#[test]
fn backward_states_follow_the_forward_marginal() {
    let sched = NoiseSchedule::symmetric(1000, 0.3, 1e-4).unwrap();
    let n = 10_000;
    let x0 = Array2::from_elem((1, n), 1.5);
    let x1 = Array2::from_elem((1, n), -0.5);
    let oracle = OracleDenoiser {
        x0: x0.clone(),
        schedule: &sched,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut seen = Vec::new();
    ddpm_backward_traced(&oracle, &x1, 8, &sched, &mut rng, |k, x| {
        if k == 375 || k == 625 {
            seen.push((k, x.clone()));
        }
    })
    .unwrap();
    assert_eq!(seen.len(), 2);
    for (k, x) in seen {
        let (mean, var) = moments(x.as_slice().unwrap());
        let (want_mean, want_var) = bridge_oracle(sched.beta(), k, 1.5, -0.5);
        assert!((mean - want_mean).abs() < 4.0 * (want_var / n as f64).sqrt(), "k={k}: {mean}");
        assert!((var / want_var - 1.0).abs() < 0.06, "k={k}: {var} vs {want_var}");
    }
}

#[test]
fn estoi_of_unrelated_noise_is_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut noise = |n: usize| {
        Waveform::new(
            (0..n).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect(),
            8000,
        )
        .unwrap()
    };
    for _ in 0..5 {
        let (a, b) = (noise(24_000), noise(24_000));
        let s = estoi(&a, &b).unwrap();
        assert!(s.abs() < 0.1, "{s}");
        assert!((estoi(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn time_embedding_matches_sinusoid_formula() {
    let emb = TimeEmbedding::new(8).unwrap();
    for t in [0.0, 0.001, 0.25, 0.9] {
        let v = emb.embed(t);
        let p = 1000.0 * t;
        for k in 0..4 {
            let w = 10_000f64.powf(-(k as f64) / 4.0);
            assert!((v[k] - (p * w).sin()).abs() < 1e-12);
            assert!((v[4 + k] - (p * w).cos()).abs() < 1e-12);
        }
    }
}

#[test]
fn learning_rate_ramps_up_then_down() {
    assert_eq!(lr_at(0, 1e-3, 100, 1100), 0.0);
    assert!((lr_at(50, 1e-3, 100, 1100) - 5e-4).abs() < 1e-15);
    assert!((lr_at(100, 1e-3, 100, 1100) - 1e-3).abs() < 1e-15);
    assert!((lr_at(600, 1e-3, 100, 1100) - 5e-4).abs() < 1e-15);
    assert_eq!(lr_at(1100, 1e-3, 100, 1100), 0.0);
}

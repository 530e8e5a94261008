//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. `ACCEPTANCE_ONLY=1,5,9` restricts the run
//! to the listed criteria (the others print SKIP).
//!
//! Criteria 8-10 share one end-to-end run of the default configuration
//! through the `resynth` binary; criterion 12 runs a reduced configuration
//! twice.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use resynth_cli::commands::{ReportInfo, ResynthInfo};
use resynth_cli::RunConfig;
use resynth_core::bridge::{ddpm_backward, ddpm_backward_traced, sample_xt, NoiseSchedule, OracleDenoiser, NFE_SWEEP};
use resynth_core::corpus::{synth_utterance, CorpusSpec, Waveform};
use resynth_core::metrics::{estoi, si_snr};
use resynth_core::nnet::{Activation, Mlp, NetSpec, ParamBuilder};
use resynth_core::resynth::Method;
use resynth_core::rvq::{bitrate, bitrate_for, quantize_values, Codebook, RvqModel};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed <= limit, || format!("took {elapsed:.2?}, limit {limit:.2?}"))
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

// ---------------------------------------------------------------- 1

fn bitrate_identity() -> Check {
    let t = Instant::now();
    let direct = bitrate_for(8, 1024, 75.0);
    let elapsed = t.elapsed();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let books = (1..=8)
        .map(|i| Codebook::new(gaussian(&mut rng, 1024, 2), i).unwrap())
        .collect();
    let model = RvqModel::new(books).unwrap();
    let from_model = bitrate(&model, 75.0);
    ensure(direct == 6000.0 && from_model == 6000.0, || {
        format!("got {direct} and {from_model} bit/s")
    })?;
    within(elapsed, Duration::from_millis(1))?;
    Ok(format!("{from_model} bit/s"))
}

// ---------------------------------------------------------------- 2

/// Greedy per-layer scan over every code, keeping the first strict minimum.
fn oracle_quantize(books: &[Array2<f64>], x: &Array2<f64>) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for row in x.outer_iter() {
        let mut r: Vec<f64> = row.to_vec();
        let mut picks = Vec::new();
        for b in books {
            let mut best = (f64::INFINITY, 0);
            for (k, c) in b.outer_iter().enumerate() {
                let d: f64 = r.iter().zip(c.iter()).map(|(a, q)| (a - q) * (a - q)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            for (ri, ci) in r.iter_mut().zip(b.row(best.1).iter()) {
                *ri -= ci;
            }
            picks.push(best.1);
        }
        out.push(picks);
    }
    out
}

fn rvq_matches_oracle() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut frames = 0;
    let mut ties = 0;
    for inst in 0..100 {
        let d = rng.random_range(2..=8);
        let v = rng.random_range(4..=16);
        let n = rng.random_range(2..=4);
        let lattice = inst % 2 == 1;
        let draw = |rng: &mut ChaCha8Rng, rows: usize| -> Array2<f64> {
            if lattice {
                // small integers make exact distance ties common
                Array2::from_shape_fn((rows, d), |_| rng.random_range(-2i32..=2) as f64)
            } else {
                gaussian(rng, rows, d)
            }
        };
        let books: Vec<Array2<f64>> = (0..n)
            .map(|_| {
                let mut b = draw(&mut rng, v);
                // a duplicated row must never win over its earlier twin
                let (src, dst) = (rng.random_range(0..v - 1), v - 1);
                let copy = b.row(src).to_owned();
                b.row_mut(dst).assign(&copy);
                b
            })
            .collect();
        let model = RvqModel::new(
            books
                .iter()
                .enumerate()
                .map(|(i, b)| Codebook::new(b.clone(), i + 1).unwrap())
                .collect(),
        )
        .unwrap();
        let x = draw(&mut rng, 40);
        let got = quantize_values(&model, &x).map_err(|e| e.to_string())?;
        let want = oracle_quantize(&books, &x);
        for (j, w) in want.iter().enumerate() {
            let g: Vec<usize> = got.codes.indices().row(j).to_vec();
            ensure(&g == w, || format!("instance {inst} frame {j}: got {g:?}, oracle {w:?}"))?;
        }
        frames += x.nrows();
        if lattice {
            ties += count_first_layer_ties(&books[0], &x);
        }
    }
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("100 instances, {frames} frames, {ties} first-layer ties"))
}

fn count_first_layer_ties(book: &Array2<f64>, x: &Array2<f64>) -> usize {
    x.outer_iter()
        .filter(|row| {
            let d: Vec<f64> = book
                .outer_iter()
                .map(|c| row.iter().zip(c.iter()).map(|(a, q)| (a - q) * (a - q)).sum())
                .collect();
            let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
            d.iter().filter(|&&v| v == m).count() > 1
        })
        .count()
}

// ---------------------------------------------------------------- 3

fn schedule_identities() -> Check {
    let t = Instant::now();
    let s = NoiseSchedule::symmetric(1000, 0.3, 1e-4).map_err(|e| e.to_string())?;
    let total = s.total_variance();
    ensure(s.sigma2(0) == 0.0 && s.sigma2_bar(1000) == 0.0, || "endpoint variances not zero".into())?;
    let mut worst: f64 = 0.0;
    for k in 0..=1000 {
        let sum_err = (s.sigma2(k) + s.sigma2_bar(k) - total).abs() / total;
        let sym_err = (s.sigma2(k) - s.sigma2_bar(1000 - k)).abs() / total;
        worst = worst.max(sum_err).max(sym_err);
    }
    ensure(worst <= 1e-12, || format!("worst relative error {worst:e}"))?;
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("sigma2(1) = {total:.6}, worst relative error {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn marginal_monte_carlo() -> Check {
    let t = Instant::now();
    let s = NoiseSchedule::symmetric(1000, 0.3, 0.3).map_err(|e| e.to_string())?;
    let k = 500;
    let x0 = ndarray::array![[1.0, -2.0, 0.5, 3.0]];
    let x1 = ndarray::array![[-1.0, 0.0, 2.5, 3.0]];
    let draws = 10_000;
    let x0s = x0.broadcast((draws, 4)).unwrap().to_owned();
    let x1s = x1.broadcast((draws, 4)).unwrap().to_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xt = sample_xt(&x0s, &x1s, k, &s, &mut rng).map_err(|e| e.to_string())?;
    let target_var = 0.075;
    let sd = f64::sqrt(target_var);
    let mut report = Vec::new();
    for c in 0..4 {
        let col = xt.column(c);
        let mean = col.mean().unwrap();
        let var = col.var(1.0);
        let want = 0.5 * (x0[[0, c]] + x1[[0, c]]);
        ensure((mean - want).abs() <= 3.0 * sd / 100.0, || {
            format!("coord {c}: mean {mean} vs {want}")
        })?;
        ensure((var - target_var).abs() <= 0.05 * target_var, || {
            format!("coord {c}: variance {var} vs {target_var}")
        })?;
        report.push(format!("{var:.4}"));
    }
    within(t.elapsed(), Duration::from_secs(5))?;
    Ok(format!("variances [{}] vs 0.075", report.join(", ")))
}

// ---------------------------------------------------------------- 5

fn oracle_collapse() -> Check {
    let t = Instant::now();
    let s = NoiseSchedule::symmetric(1000, 0.3, 1e-4).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = gaussian(&mut rng, 64, 16);
    let x1 = &x0 + &(gaussian(&mut rng, 64, 16) * 0.5);
    let oracle = OracleDenoiser { x0: x0.clone(), schedule: &s };
    let mut worst: f64 = 0.0;
    for nfe in NFE_SWEEP {
        let out = ddpm_backward(&oracle, &x1, nfe, &s, &mut rng).map_err(|e| e.to_string())?;
        let err = (&out - &x0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ensure(err < 1e-6, || format!("NFE {nfe}: max error {err:e}"))?;
        worst = worst.max(err);
    }
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("NFE {NFE_SWEEP:?}, worst max error {worst:.1e}"))
}

// ---------------------------------------------------------------- 6

fn bridge_composition() -> Check {
    let t = Instant::now();
    let s = NoiseSchedule::symmetric(1000, 0.3, 1e-4).map_err(|e| e.to_string())?;
    let runs = 10_000;
    let x0 = ndarray::array![[0.5, -1.0, 2.0]];
    let x1 = ndarray::array![[1.5, 1.0, -2.0]];
    let x0s = x0.broadcast((runs, 3)).unwrap().to_owned();
    let x1s = x1.broadcast((runs, 3)).unwrap().to_owned();
    let oracle = OracleDenoiser { x0: x0s.clone(), schedule: &s };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut summary = Vec::new();
    for (nfe, probe) in [(4usize, 500usize), (16, 250), (16, 750)] {
        let mut seen = None;
        ddpm_backward_traced(&oracle, &x1s, nfe, &s, &mut rng, |k, x| {
            if k == probe {
                seen = Some(x.clone());
            }
        })
        .map_err(|e| e.to_string())?;
        let xs = seen.ok_or_else(|| format!("grid never visited k = {probe}"))?;
        let (w0, w1, var) = s.marginal(probe);
        for c in 0..3 {
            let col = xs.column(c);
            let mean = col.mean().unwrap();
            let v = col.var(1.0);
            let want = w0 * x0[[0, c]] + w1 * x1[[0, c]];
            ensure((v - var).abs() <= 0.05 * var, || {
                format!("NFE {nfe}, k {probe}, coord {c}: variance {v} vs {var}")
            })?;
            ensure((mean - want).abs() <= 3.0 * (var / runs as f64).sqrt(), || {
                format!("NFE {nfe}, k {probe}, coord {c}: mean {mean} vs {want}")
            })?;
        }
        summary.push(format!("NFE {nfe} @ k={probe}"));
    }
    within(t.elapsed(), Duration::from_secs(30))?;
    Ok(summary.join(", "))
}

// ---------------------------------------------------------------- 7

fn gradient_check() -> Check {
    let t = Instant::now();
    let mut total = 0;
    let mut bad = 0;
    let mut worst_net = 0.0f64;
    for net in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + net);
        let spec = NetSpec {
            input_dim: rng.random_range(2..=5),
            aux_dim: if net % 3 == 0 { 0 } else { rng.random_range(1..=3) },
            hidden_dims: (0..rng.random_range(1..=3)).map(|_| rng.random_range(3..=6)).collect(),
            output_dim: rng.random_range(1..=3),
            cond_dim: if net % 4 == 3 { 0 } else { rng.random_range(1..=4) },
            activation: [Activation::Gelu, Activation::Tanh][net as usize % 2],
            layer_norm: true,
        };
        let mut prng = ChaCha8Rng::seed_from_u64(net);
        let mut builder = ParamBuilder::new(&mut prng);
        let mlp = Mlp::build(spec.clone(), &mut builder, "n").map_err(|e| e.to_string())?;
        let mut params = builder.finish();
        // move every parameter, the conditioning projections included, off its initial value
        for v in params.values_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
        let rows = 4;
        let x = gaussian(&mut rng, rows, spec.input_dim);
        let aux = (spec.aux_dim > 0).then(|| gaussian(&mut rng, rows, spec.aux_dim));
        let cond = (spec.cond_dim > 0).then(|| gaussian(&mut rng, rows, spec.cond_dim));
        let weights = gaussian(&mut rng, rows, spec.output_dim);
        let loss = |p: &resynth_core::nnet::ParameterSet| -> f64 {
            let y = mlp
                .forward(p, x.view(), aux.as_ref().map(|a| a.view()), cond.as_ref().map(|c| c.view()))
                .unwrap();
            (&y * &weights).sum() + 0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, trace) = mlp
            .forward_traced(&params, x.view(), aux.as_ref().map(|a| a.view()), cond.as_ref().map(|c| c.view()))
            .map_err(|e| e.to_string())?;
        let d_out = &weights + &y;
        let mut grads = params.zeros_like();
        mlp.backward(&params, &trace, d_out.view(), &mut grads).map_err(|e| e.to_string())?;
        let h = 1e-4;
        let mut net_bad = 0;
        for i in 0..params.len() {
            let orig = params.values()[i];
            params.values_mut()[i] = orig + h;
            let up = loss(&params);
            params.values_mut()[i] = orig - h;
            let down = loss(&params);
            params.values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[i];
            let scale = a.abs().max(numeric.abs());
            let rel = if scale == 0.0 { 0.0 } else { (a - numeric).abs() / scale };
            if rel >= 1e-4 {
                net_bad += 1;
            }
        }
        total += params.len();
        bad += net_bad;
        worst_net = worst_net.max(net_bad as f64 / params.len() as f64);
    }
    let ok_frac = 1.0 - bad as f64 / total as f64;
    ensure(ok_frac >= 0.99, || format!("{bad} of {total} parameters off"))?;
    within(t.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "{total} parameters, {:.2}% within 1e-4 (worst net {:.2}% off)",
        100.0 * ok_frac,
        100.0 * worst_net
    ))
}

// ---------------------------------------------------------------- 11

fn metric_properties() -> Check {
    let t = Instant::now();
    let s = synth_utterance(&CorpusSpec::default(), 0).map_err(|e| e.to_string())?;
    let self_snr = si_snr(&s, &s).map_err(|e| e.to_string())?;
    ensure(self_snr == 100.0, || format!("si_snr(s, s) = {self_snr}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noisy = Waveform::new(
        s.samples().iter().map(|v| v + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect(),
        8000,
    )
    .unwrap();
    let base = si_snr(&noisy, &s).map_err(|e| e.to_string())?;
    let mut worst_scale: f64 = 0.0;
    for alpha in [0.001, 0.37, 2.5, 1000.0, -0.8] {
        let scaled = Waveform::new(noisy.samples().iter().map(|v| v * alpha).collect(), 8000).unwrap();
        let v = si_snr(&scaled, &s).map_err(|e| e.to_string())?;
        worst_scale = worst_scale.max((v - base).abs());
    }
    ensure(worst_scale <= 1e-9, || format!("scale drift {worst_scale:e} dB"))?;
    let self_estoi = estoi(&s, &s).map_err(|e| e.to_string())?;
    ensure((self_estoi - 1.0).abs() <= 1e-6, || format!("estoi(s, s) = {self_estoi}"))?;
    let mut worst_noise: f64 = 0.0;
    for trial in 0..20 {
        let mut a = ChaCha8Rng::seed_from_u64(1000 + trial);
        let mut b = ChaCha8Rng::seed_from_u64(2000 + trial);
        let wa = Waveform::new((0..24_000).map(|_| a.sample::<f64, _>(StandardNormal)).collect(), 8000).unwrap();
        let wb = Waveform::new((0..24_000).map(|_| b.sample::<f64, _>(StandardNormal)).collect(), 8000).unwrap();
        let score = estoi(&wa, &wb).map_err(|e| e.to_string())?;
        worst_noise = worst_noise.max(score.abs());
    }
    ensure(worst_noise < 0.1, || format!("independent-noise ESTOI reached {worst_noise}"))?;
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "cap {self_snr} dB, scale drift {worst_scale:.1e} dB, self ESTOI {self_estoi:.9}, noise |ESTOI| <= {worst_noise:.4}"
    ))
}

// ---------------------------------------------------------------- pipeline

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_resynth"))
}

fn invoke(config: &Path, args: &[&str], threads: Option<&str>) -> Result<Duration, String> {
    let mut cmd = binary();
    cmd.arg("--config").arg(config).args(args);
    match threads {
        Some(n) => cmd.env("RESYNTH_THREADS", n),
        None => cmd.env_remove("RESYNTH_THREADS"),
    };
    let t = Instant::now();
    let out = cmd.output().map_err(|e| format!("spawning resynth: {e}"))?;
    let elapsed = t.elapsed();
    if !out.status.success() {
        return Err(format!(
            "resynth {} failed ({}): {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(elapsed)
}

/// Outputs of one default-configuration pipeline run.
struct DefaultRun {
    cfg: RunConfig,
    report: ReportInfo,
    train_time: Vec<(Method, Duration)>,
    resynth: Vec<(Option<usize>, ResynthInfo)>,
    csv: (Vec<u8>, Vec<u8>),
    elapsed: Duration,
}

/// gen-corpus, train-codec, train ×3, resynth, eval on the default config.
fn default_run(root: &Path, name: &str, threads: Option<&str>) -> Result<DefaultRun, String> {
    let t = Instant::now();
    let dir = root.join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let config = dir.join("resynth.toml");
    let mut cfg = RunConfig::default();
    cfg.out_dir = dir.join("run");
    cfg.save(&config).map_err(|e| e.to_string())?;
    let c = &config;
    invoke(c, &["gen-corpus"], threads)?;
    invoke(c, &["train-codec"], threads)?;
    let mut train_time = Vec::new();
    for m in Method::TRAINABLE {
        let took = invoke(c, &["train", "--method", m.as_str()], threads)?;
        eprintln!("  trained {m} in {took:.1?}");
        train_time.push((m, took));
    }
    let mut resynth = Vec::new();
    let mut requests: Vec<(Method, Option<usize>)> = vec![(Method::Onestep, None), (Method::C2f, None)];
    requests.extend(cfg.eval.nfe_list.iter().map(|&n| (Method::Bridge, Some(n))));
    for (m, nfe) in requests {
        let mut args = vec!["resynth".to_string(), "--method".into(), m.to_string(), "--seed".into(), "9".into()];
        if let Some(n) = nfe {
            args.extend(["--nfe".to_string(), n.to_string()]);
        }
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        invoke(c, &refs, threads)?;
        let label = match nfe {
            Some(n) => format!("bridge_nfe{n}"),
            None => m.to_string(),
        };
        let meta = cfg.out_dir.join("resynth").join(label).join("metadata.json");
        let text = std::fs::read_to_string(&meta).map_err(|e| format!("{}: {e}", meta.display()))?;
        resynth.push((nfe, serde_json::from_str(&text).map_err(|e| e.to_string())?));
    }
    invoke(c, &["eval"], threads)?;
    let read = |name: &str| std::fs::read(cfg.out_dir.join("report").join(name)).map_err(|e| e.to_string());
    let csv = (read("report.csv")?, read("layer_sweep.csv")?);
    let text = std::fs::read_to_string(cfg.out_dir.join("report/report.json")).map_err(|e| e.to_string())?;
    let report: ReportInfo = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok(DefaultRun {
        cfg,
        report,
        train_time,
        resynth,
        csv,
        elapsed: t.elapsed(),
    })
}

// ---------------------------------------------------------------- 8

fn layer_sweep_trend(run: &DefaultRun) -> Check {
    let sweep = &run.report.report.layer_sweep;
    let n = run.cfg.codec.num_layers;
    ensure(sweep.len() == n + 1, || format!("{} sweep rows", sweep.len()))?;
    let snr: Vec<f64> = sweep[..n].iter().map(|r| r.si_snr_mean).collect();
    let worst_drop = snr.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    ensure(worst_drop <= 0.1, || format!("SI-SNR dropped by {worst_drop:.3} dB between layers: {snr:?}"))?;
    let z = &sweep[n];
    ensure(z.layers == "z", || format!("last sweep row is {:?}", z.layers))?;
    ensure(z.si_snr_mean > snr[n - 1], || "decode(z) does not beat all layers".into())?;
    ensure(z.si_snr_mean == 100.0, || format!("decode(z) SI-SNR {}", z.si_snr_mean))?;
    ensure((z.estoi_mean - 1.0).abs() <= 1e-6, || format!("decode(z) ESTOI {}", z.estoi_mean))?;
    let fmt: Vec<String> = snr.iter().map(|v| format!("{v:.2}")).collect();
    Ok(format!("SI-SNR by layers [{}] dB, z = {} dB", fmt.join(", "), z.si_snr_mean))
}

// ---------------------------------------------------------------- 9

fn beats_baseline(run: &DefaultRun) -> Check {
    let rows = &run.report.report.rows;
    let base = rows
        .iter()
        .find(|r| r.method == "baseline")
        .ok_or("no baseline row")?;
    let mut lines = vec![format!("baseline {:.3} dB / {:.4}", base.si_snr_mean, base.estoi_mean)];
    let mut failures = Vec::new();
    for m in Method::TRAINABLE {
        let mt = run.cfg.method_train(m).map_err(|e| e.to_string())?;
        ensure(mt.steps <= 50_000, || format!("{m} trains for {} steps", mt.steps))?;
        let took = run.train_time.iter().find(|(x, _)| *x == m).map(|(_, d)| *d).unwrap();
        if took > Duration::from_secs(30 * 60) {
            failures.push(format!("{m} training took {took:.0?}"));
        }
        let method_rows: Vec<_> = rows.iter().filter(|r| r.method == m.as_str()).collect();
        ensure(!method_rows.is_empty(), || format!("no {m} rows"))?;
        for r in method_rows {
            lines.push(format!("{}@{} {:.3} dB / {:.4}", r.method, r.nfe, r.si_snr_mean, r.estoi_mean));
            if !(r.si_snr_mean > base.si_snr_mean && r.estoi_mean > base.estoi_mean) {
                failures.push(format!("{}@{} does not beat the baseline", r.method, r.nfe));
            }
        }
    }
    let summary = lines.join(", ");
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failures.join("; ")))
    }
}

// ---------------------------------------------------------------- 10

fn nfe_accounting(run: &DefaultRun) -> Check {
    let n = run.cfg.codec.num_layers;
    let mut checked = 0;
    for (requested, info) in &run.resynth {
        let want = match info.method {
            Method::Onestep => 1,
            Method::C2f => n - 1,
            Method::Bridge => requested.ok_or("bridge run without NFE")?,
            Method::Baseline => 0,
        };
        ensure(!info.files.is_empty(), || format!("{} wrote no files", info.method))?;
        for f in &info.files {
            ensure(f.nfe == want, || format!("{} on {}: NFE {} != {want}", info.method, f.input, f.nfe))?;
            checked += 1;
        }
    }
    for r in &run.report.report.rows {
        let want = match r.method.as_str() {
            "onestep" => 1,
            "c2f" => n - 1,
            "bridge" => {
                ensure(run.cfg.eval.nfe_list.contains(&r.nfe), || format!("unexpected bridge NFE {}", r.nfe))?;
                r.nfe
            }
            _ => 0,
        };
        ensure(r.nfe == want, || format!("report row {} has NFE {}", r.method, r.nfe))?;
    }
    let bridge_rows: Vec<usize> = run
        .report
        .report
        .rows
        .iter()
        .filter(|r| r.method == "bridge")
        .map(|r| r.nfe)
        .collect();
    ensure(bridge_rows == run.cfg.eval.nfe_list, || format!("bridge rows {bridge_rows:?}"))?;
    Ok(format!("{checked} resynthesized files and every report row audited (c2f = {})", n - 1))
}

// ---------------------------------------------------------------- 12

/// Repeats the default pipeline with a different worker count and compares
/// the report CSVs byte for byte.
fn determinism(root: &Path, first: &DefaultRun) -> Check {
    let limit = Duration::from_secs(45 * 60);
    within(first.elapsed, limit)?;
    let second = default_run(root, "default_repeat", Some("2"))?;
    within(second.elapsed, limit)?;
    ensure(first.csv.0 == second.csv.0, || "report.csv differs between runs".into())?;
    ensure(first.csv.1 == second.csv.1, || "layer_sweep.csv differs between runs".into())?;
    Ok(format!(
        "two full default runs ({:.0?}, {:.0?}), {} + {} identical CSV bytes",
        first.elapsed,
        second.elapsed,
        first.csv.0.len(),
        first.csv.1.len()
    ))
}

// ---------------------------------------------------------------- driver

fn selected() -> Option<BTreeSet<u32>> {
    let v = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() {
    let only = selected();
    let wanted = |n: u32| only.as_ref().is_none_or(|s| s.contains(&n));
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut results: Vec<(u32, &str, Option<Check>)> = Vec::new();
    let mut run_check = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Check| {
        let outcome = if wanted(n) {
            let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
            Some(r)
        } else {
            None
        };
        match &outcome {
            Some(Ok(d)) => println!("criterion {n:>2} {name}: PASS ({d})"),
            Some(Err(d)) => println!("criterion {n:>2} {name}: FAIL ({d})"),
            None => println!("criterion {n:>2} {name}: SKIP"),
        }
        results.push((n, name, outcome));
    };

    run_check(1, "bitrate identity", &mut bitrate_identity);
    run_check(2, "rvq matches exhaustive oracle", &mut rvq_matches_oracle);
    run_check(3, "schedule identities", &mut schedule_identities);
    run_check(4, "bridge marginal monte carlo", &mut marginal_monte_carlo);
    run_check(5, "oracle collapse", &mut oracle_collapse);
    run_check(6, "bridge composition", &mut bridge_composition);
    run_check(7, "gradient check", &mut gradient_check);

    let pipeline = if [8, 9, 10, 12].into_iter().any(wanted) {
        let r = catch_unwind(AssertUnwindSafe(|| default_run(&root, "default", None)))
            .unwrap_or_else(|_| Err("pipeline panicked".into()));
        if let Ok(run) = &r {
            eprintln!("default pipeline finished in {:.1?}", run.elapsed);
        }
        Some(r)
    } else {
        None
    };
    let with_run = |f: &dyn Fn(&DefaultRun) -> Check| -> Check {
        match pipeline.as_ref().expect("pipeline requested") {
            Ok(run) => f(run),
            Err(e) => Err(format!("default pipeline failed: {e}")),
        }
    };
    run_check(8, "layer sweep trend", &mut || with_run(&layer_sweep_trend));
    run_check(9, "all methods beat the baseline", &mut || with_run(&beats_baseline));
    run_check(10, "nfe accounting", &mut || with_run(&nfe_accounting));
    run_check(11, "metric properties", &mut metric_properties);
    run_check(12, "pipeline determinism", &mut || with_run(&|run| determinism(&root, run)));

    let failed: Vec<u32> = results
        .iter()
        .filter(|(_, _, r)| matches!(r, Some(Err(_))))
        .map(|(n, _, _)| *n)
        .collect();
    let ran = results.iter().filter(|(_, _, r)| r.is_some()).count();
    println!("acceptance: {} of {ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

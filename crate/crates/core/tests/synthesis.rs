use stapbench::linalg::{self, CMatrix, C64};
use stapbench::rng::{stream, Purpose};
use stapbench::scene::{default_scene, phase_centers, place_target};
use stapbench::steering::Steering;
use stapbench::synth::{build_covariance, calibrate_amplitude, draw_clutter, draw_noise, draw_signal, Whitener};

/// Kolmogorov–Smirnov distance of `xs` from U[lo, hi].
fn ks_uniform(mut xs: Vec<f64>, lo: f64, hi: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x - lo) / (hi - lo);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn placement_is_uniform_over_the_region() {
    let cfg = default_scene();
    let n = 4000;
    let mut az = Vec::with_capacity(n);
    let mut vel = Vec::with_capacity(n);
    let mut bins = vec![0usize; cfg.num_range_bins];
    for trial in 0..n {
        let mut rng = stream(11, Purpose::Placement, None, trial);
        let t = place_target(&cfg, &mut rng, |_, _| Ok(1.0)).unwrap();
        assert!((cfg.azimuth_min_deg..=cfg.azimuth_max_deg).contains(&t.azimuth_deg));
        assert!((cfg.velocity_min_mps..=cfg.velocity_max_mps).contains(&t.velocity_mps));
        assert!((-cfg.rcs_spread / 2.0..=cfg.rcs_spread / 2.0).contains(&t.rcs_db));
        az.push(t.azimuth_deg);
        vel.push(t.velocity_mps);
        bins[t.range_bin] += 1;
    }
    // 1% critical value of the one-sample KS statistic.
    let critical = 1.63 / (n as f64).sqrt();
    assert!(ks_uniform(az, cfg.azimuth_min_deg, cfg.azimuth_max_deg) < critical);
    assert!(ks_uniform(vel, cfg.velocity_min_mps, cfg.velocity_max_mps) < critical);
    let expected = n as f64 / bins.len() as f64;
    let chi2: f64 = bins.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 4 degrees of freedom, 1% level.
    assert!(chi2 < 13.28, "range-bin chi² = {chi2}");
}

#[test]
fn whitened_interference_has_identity_covariance() {
    let cfg = default_scene();
    let st = Steering::new(&cfg, &phase_centers(&cfg).unwrap());
    let model = build_covariance(&cfg, &st).unwrap();
    let total = &model.clutter_cov + &model.noise_cov;
    let w = Whitener::new(&total).unwrap();
    let n = cfg.dimension();
    let mut rng = stream(3, Purpose::Auxiliary, None, 0);
    let mut acc = CMatrix::zeros(n, n);
    let chunks = 20;
    let per_chunk = 5000;
    for _ in 0..chunks {
        let c = draw_clutter(&model, per_chunk, &mut rng).unwrap().values;
        let v = draw_noise(&model, per_chunk, &mut rng).unwrap().values;
        acc += linalg::gram_outer(&w.apply(&(c + v)));
    }
    let sample = acc / C64::new((chunks * per_chunk) as f64, 0.0);
    let err = linalg::frobenius_rel_error(&sample, &CMatrix::identity(n, n));
    assert!(err < 0.05, "relative Frobenius error {err}");
}

#[test]
fn clutter_to_noise_ratio_holds_in_sample() {
    let cfg = default_scene();
    let st = Steering::new(&cfg, &phase_centers(&cfg).unwrap());
    let model = build_covariance(&cfg, &st).unwrap();
    let mut rng = stream(4, Purpose::Auxiliary, None, 0);
    let k = 20_000;
    let c = linalg::frobenius_sqr(&draw_clutter(&model, k, &mut rng).unwrap().values);
    let v = linalg::frobenius_sqr(&draw_noise(&model, k, &mut rng).unwrap().values);
    let cnr_db = 10.0 * (c / v).log10();
    assert!((cnr_db - cfg.cnr_db).abs() < 0.1, "sample CNR {cnr_db} dB");
}

#[test]
fn calibrated_targets_average_the_requested_scnr_in_db() {
    let mut cfg = default_scene();
    cfg.target_scnr_db = 7.0;
    let st = Steering::new(&cfg, &phase_centers(&cfg).unwrap());
    let model = build_covariance(&cfg, &st).unwrap();
    let n = 2000;
    let mut total_db = 0.0;
    for trial in 0..n {
        let mut rng = stream(5, Purpose::Placement, None, trial);
        let truth = place_target(&cfg, &mut rng, |az, v| {
            calibrate_amplitude(&cfg, &model, &st.space_time(az, cfg.elevation_rad, v))
        })
        .unwrap();
        let signal = draw_signal(truth.amplitude(), cfg.snapshots, &mut rng);
        let a = st.space_time(truth.azimuth_rad(), cfg.elevation_rad, truth.velocity_mps);
        let gain = linalg::quad_form_re(&a.values, model.total_inverse(), &a.values);
        let scnr = signal.snapshot_power() * gain;
        total_db += 10.0 * scnr.log10();
    }
    // The RCS offset is uniform over ±5 dB: standard error 10/√(12n).
    let mean_db = total_db / n as f64;
    let se = cfg.rcs_spread / (12.0 * n as f64).sqrt();
    assert!((mean_db - cfg.target_scnr_db).abs() < 4.0 * se, "mean SCNR {mean_db} dB");
}

#[test]
fn signal_snapshots_have_constant_modulus_and_uniform_phase() {
    let mut rng = stream(6, Purpose::Auxiliary, None, 0);
    let amp = 1.7;
    let s = draw_signal(amp, 5000, &mut rng);
    assert!(s.values.iter().all(|x| (x.norm() - amp).abs() < 1e-12));
    let phases: Vec<f64> = s.values.iter().map(|x| x.arg()).collect();
    let pi = std::f64::consts::PI;
    assert!(ks_uniform(phases, -pi, pi) < 1.63 / 5000f64.sqrt());
    // |S̄|² of random-phase snapshots is about amp²/K.
    assert!(s.mean_power() < 10.0 * amp * amp / 5000.0);
}

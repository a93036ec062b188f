//! Clutter, noise and target return synthesis, sample covariance estimation
//! and whitening.
//!
//! Clutter is a zero-Doppler azimuth ridge (stationary platform): `Q` equal
//! power patches over [−90°, 90°], each contributing `a(θ_q, 0, 0)a^H`. Noise is
//! white with unit power. The clutter covariance is diagonally loaded by
//! `1e-6·trace/ΛL` and then scaled so that `trace(Σ_c)/trace(Σ_n)` equals the
//! configured CNR.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, CVector, C64};
use crate::rng::complex_normal;
use crate::scene::{SceneConfig, TargetTruth};
use crate::steering::{SpaceTimeVector, Steering};

const RIDGE_LOADING: f64 = 1e-6;
const SAMPLE_LOADING: f64 = 1e-6;
const NOISE_POWER: f64 = 1.0;

#[derive(Debug, Clone)]
enum Factor {
    Scaled(f64),
    Dense(CMatrix),
}

impl Factor {
    fn of(cov: &CMatrix) -> Factor {
        let n = cov.nrows();
        let s = cov[(0, 0)].re;
        let is_scaled_identity = (0..n).all(|i| {
            (0..n).all(|j| {
                let expect = if i == j { s } else { 0.0 };
                (cov[(i, j)] - C64::new(expect, 0.0)).norm() == 0.0
            })
        });
        if is_scaled_identity {
            Factor::Scaled(s.max(0.0).sqrt())
        } else {
            Factor::Dense(linalg::psd_sqrt(cov))
        }
    }

    fn color(&self, white: CMatrix) -> CMatrix {
        match self {
            Factor::Scaled(s) => white * C64::new(*s, 0.0),
            Factor::Dense(root) => linalg::mul(root, &white),
        }
    }
}

/// True interference covariances of the synthetic scene.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    pub clutter_cov: CMatrix,
    pub noise_cov: CMatrix,
    pub cnr_db: f64,
    clutter_root: Factor,
    noise_root: Factor,
    total_inv: CMatrix,
}

impl CovarianceModel {
    pub fn from_parts(clutter_cov: CMatrix, noise_cov: CMatrix, cnr_db: f64) -> Result<Self> {
        if clutter_cov.shape() != noise_cov.shape() || !clutter_cov.is_square() {
            return Err(Error::dims(
                format!("{:?}", noise_cov.shape()),
                format!("{:?}", clutter_cov.shape()),
            ));
        }
        let total_inv = linalg::hpd_inverse(&(&clutter_cov + &noise_cov))?;
        Ok(CovarianceModel {
            clutter_root: Factor::of(&clutter_cov),
            noise_root: Factor::of(&noise_cov),
            clutter_cov,
            noise_cov,
            cnr_db,
            total_inv,
        })
    }

    pub fn dimension(&self) -> usize {
        self.noise_cov.nrows()
    }

    /// `R = Σ_c + Σ_n`.
    pub fn total(&self) -> CMatrix {
        &self.clutter_cov + &self.noise_cov
    }

    /// `R^{-1}`.
    pub fn total_inverse(&self) -> &CMatrix {
        &self.total_inv
    }
}

/// Unloaded, unit-gain clutter ridge `Σ_q a(θ_q,0,0) a(θ_q,0,0)^H`.
pub fn clutter_ridge(steering: &Steering, patches: usize) -> CMatrix {
    let n = steering.dimension();
    let mut a = CMatrix::zeros(n, patches);
    for q in 0..patches {
        let theta_deg = if patches == 1 {
            0.0
        } else {
            -90.0 + 180.0 * q as f64 / (patches - 1) as f64
        };
        a.set_column(q, &steering.space_time(theta_deg.to_radians(), 0.0, 0.0).values);
    }
    linalg::gram_outer(&a)
}

pub fn build_covariance(cfg: &SceneConfig, steering: &Steering) -> Result<CovarianceModel> {
    let n = cfg.dimension();
    let noise = CMatrix::identity(n, n) * C64::new(NOISE_POWER, 0.0);
    let target_trace = 10f64.powf(cfg.cnr_db / 10.0) * linalg::trace_re(&noise);
    let clutter = if target_trace > 0.0 {
        let mut ridge = clutter_ridge(steering, cfg.clutter_patches);
        let load = RIDGE_LOADING * linalg::trace_re(&ridge) / n as f64;
        for i in 0..n {
            ridge[(i, i)] += load;
        }
        let scale = target_trace / linalg::trace_re(&ridge);
        ridge * C64::new(scale, 0.0)
    } else {
        CMatrix::zeros(n, n)
    };
    CovarianceModel::from_parts(clutter, noise, cfg.cnr_db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Y,
    Z,
    Clutter,
    Noise,
    WhitenedY,
}

/// A `(Λ·L) × K` block of snapshots for one range bin.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    pub values: CMatrix,
    pub role: Role,
    pub range_bin: usize,
}

impl SnapshotMatrix {
    pub fn snapshots(&self) -> usize {
        self.values.ncols()
    }
}

fn white(n: usize, k: usize, rng: &mut (impl Rng + ?Sized)) -> CMatrix {
    CMatrix::from_fn(n, k, |_, _| complex_normal(rng))
}

fn check_snapshots(k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::InvalidConfig("at least one snapshot is required".into()));
    }
    Ok(())
}

/// `K` i.i.d. draws from CN(0, Σ_c).
pub fn draw_clutter(model: &CovarianceModel, k: usize, rng: &mut (impl Rng + ?Sized)) -> Result<SnapshotMatrix> {
    check_snapshots(k)?;
    Ok(SnapshotMatrix {
        values: model.clutter_root.color(white(model.dimension(), k, rng)),
        role: Role::Clutter,
        range_bin: 0,
    })
}

/// `K` i.i.d. draws from CN(0, Σ_n).
pub fn draw_noise(model: &CovarianceModel, k: usize, rng: &mut (impl Rng + ?Sized)) -> Result<SnapshotMatrix> {
    check_snapshots(k)?;
    Ok(SnapshotMatrix {
        values: model.noise_root.color(white(model.dimension(), k, rng)),
        role: Role::Noise,
        range_bin: 0,
    })
}

/// Per-snapshot complex target amplitudes `S_ρ` and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRow {
    pub values: Vec<C64>,
    pub mean: C64,
}

impl SignalRow {
    pub fn new(values: Vec<C64>) -> Self {
        let mean = values.iter().sum::<C64>() / values.len() as f64;
        SignalRow { values, mean }
    }

    /// `mean_j |S_j|²`.
    pub fn snapshot_power(&self) -> f64 {
        self.values.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.values.len() as f64
    }

    /// `|S̄|²`.
    pub fn mean_power(&self) -> f64 {
        self.mean.norm_sqr()
    }
}

/// Constant-modulus signal with i.i.d. uniform phases.
pub fn draw_signal(amplitude: f64, k: usize, rng: &mut (impl Rng + ?Sized)) -> SignalRow {
    let values = (0..k)
        .map(|_| {
            let u: f64 = rng.random();
            C64::from_polar(amplitude, 2.0 * std::f64::consts::PI * u)
        })
        .collect();
    SignalRow::new(values)
}

/// Mean modulus μ for which `μ²·a^H R^{-1} a` equals the configured output SCNR.
pub fn calibrate_amplitude(cfg: &SceneConfig, model: &CovarianceModel, a: &SpaceTimeVector) -> Result<f64> {
    let q = linalg::quad_form_re(&a.values, model.total_inverse(), &a.values);
    if !(q > 0.0) || !q.is_finite() {
        return Err(Error::NotPositiveDefinite(format!("a^H R^-1 a = {q}")));
    }
    Ok((10f64.powf(cfg.target_scnr_db / 10.0) / q).sqrt())
}

/// Output SCNR `σ²·a^H R^{-1} a` for a given modulus.
pub fn output_scnr(model: &CovarianceModel, a: &SpaceTimeVector, amplitude: f64) -> f64 {
    amplitude * amplitude * linalg::quad_form_re(&a.values, model.total_inverse(), &a.values)
}

/// Everything synthesized for one target placement.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub truth: TargetTruth,
    /// Returns `Y_ρ` for every range bin, mean-centred.
    pub y: Vec<SnapshotMatrix>,
    /// Secondary clutter-plus-noise data `Z_ρ` for every bin, mean-centred.
    pub z: Vec<SnapshotMatrix>,
    pub signal: SignalRow,
}

/// Synthesizes `Y_ρ = a S + C + N` in the target bin, `C + N` elsewhere, and a
/// fresh `Z_ρ = C̄ + N̄` for every bin. Draw order per bin: Y clutter, Y noise,
/// Z clutter, Z noise.
pub fn synthesize_trial(
    cfg: &SceneConfig,
    model: &CovarianceModel,
    steering: &Steering,
    truth: &TargetTruth,
    signal: &SignalRow,
    rng: &mut (impl Rng + ?Sized),
) -> Result<TrialData> {
    let k = signal.values.len();
    if k < 2 {
        return Err(Error::InvalidConfig(
            "snapshots must be at least 2: mean-centering a single snapshot erases it".into(),
        ));
    }
    if truth.range_bin >= cfg.num_range_bins {
        return Err(Error::InvalidConfig(format!("target range bin {} out of range", truth.range_bin)));
    }
    let a = steering.space_time(truth.azimuth_rad(), cfg.elevation_rad, truth.velocity_mps);
    let mut ys = Vec::with_capacity(cfg.num_range_bins);
    let mut zs = Vec::with_capacity(cfg.num_range_bins);
    for bin in 0..cfg.num_range_bins {
        let mut y = draw_clutter(model, k, rng)?.values + draw_noise(model, k, rng)?.values;
        if bin == truth.range_bin {
            for (j, s) in signal.values.iter().enumerate() {
                let mut col = y.column_mut(j);
                col.axpy(*s, &a.values, C64::new(1.0, 0.0));
            }
        }
        let mut z = draw_clutter(model, k, rng)?.values + draw_noise(model, k, rng)?.values;
        linalg::mean_center(&mut y);
        linalg::mean_center(&mut z);
        ys.push(SnapshotMatrix { values: y, role: Role::Y, range_bin: bin });
        zs.push(SnapshotMatrix { values: z, role: Role::Z, range_bin: bin });
    }
    Ok(TrialData {
        truth: *truth,
        y: ys,
        z: zs,
        signal: signal.clone(),
    })
}

/// `Σ̂ = Z Z^H / K`, plus the diagonal loading that was added.
#[derive(Debug, Clone)]
pub struct SampleCovariance {
    pub matrix: CMatrix,
    pub loading: f64,
}

/// Sample covariance. When `K < Λ·L` the estimate is rank deficient and is
/// loaded with `1e-6·trace/ΛL`.
pub fn estimate_covariance(z: &CMatrix) -> SampleCovariance {
    let (n, k) = z.shape();
    let mut matrix = linalg::gram_outer(z) / C64::new(k as f64, 0.0);
    let loading = if k < n { SAMPLE_LOADING * linalg::trace_re(&matrix) / n as f64 } else { 0.0 };
    for i in 0..n {
        matrix[(i, i)] += loading;
    }
    SampleCovariance { matrix, loading }
}

/// Applies `Σ̂^{-1/2}` (inverse principal square root).
#[derive(Debug, Clone)]
pub struct Whitener {
    inv_sqrt: CMatrix,
}

impl Whitener {
    pub fn new(cov: &CMatrix) -> Result<Self> {
        Ok(Whitener { inv_sqrt: linalg::inv_sqrt(cov)? })
    }

    pub fn identity(n: usize) -> Self {
        Whitener { inv_sqrt: CMatrix::identity(n, n) }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.inv_sqrt
    }

    pub fn apply(&self, m: &CMatrix) -> CMatrix {
        linalg::mul(&self.inv_sqrt, m)
    }

    pub fn apply_vector(&self, v: &CVector) -> CVector {
        &self.inv_sqrt * v
    }
}

/// `Σ̂^{-1/2} M`.
pub fn whiten(cov: &CMatrix, m: &CMatrix) -> Result<CMatrix> {
    Ok(Whitener::new(cov)?.apply(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use crate::scene::{default_scene, phase_centers};

    fn setup() -> (SceneConfig, Steering, CovarianceModel) {
        let cfg = default_scene();
        let st = Steering::new(&cfg, &phase_centers(&cfg).unwrap());
        let model = build_covariance(&cfg, &st).unwrap();
        (cfg, st, model)
    }

    #[test]
    fn covariance_meets_cnr_and_is_hermitian_psd() {
        let (_, _, model) = setup();
        let ratio = linalg::trace_re(&model.clutter_cov) / linalg::trace_re(&model.noise_cov);
        assert!((ratio / 100.0 - 1.0).abs() < 1e-6);
        let c = &model.clutter_cov;
        assert!((c - c.adjoint()).iter().all(|x| x.norm() < 1e-12));
        let (values, _) = linalg::hermitian_eigen(c);
        assert!(values.iter().all(|&l| l >= -1e-10));
        let (values, _) = linalg::hermitian_eigen(&model.total());
        assert!(values.iter().all(|&l| l >= NOISE_POWER * (1.0 - 1e-9)));
    }

    #[test]
    fn single_patch_ridge_is_rank_one() {
        let (_, st, _) = setup();
        let ridge = clutter_ridge(&st, 1);
        let (mut values, _) = linalg::hermitian_eigen(&ridge);
        values.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((values[0] - 64.0).abs() < 1e-9);
        assert!(values[1..].iter().all(|l| l.abs() < 1e-9));
    }

    #[test]
    fn zero_cnr_removes_clutter() {
        let cfg = SceneConfig { cnr_db: f64::NEG_INFINITY, ..default_scene() };
        let st = Steering::new(&cfg, &phase_centers(&cfg).unwrap());
        let model = build_covariance(&cfg, &st).unwrap();
        let mut rng = stream(1, Purpose::Auxiliary, None, 0);
        let c = draw_clutter(&model, 10, &mut rng).unwrap();
        assert!(c.values.iter().all(|x| *x == C64::new(0.0, 0.0)));
        assert!(draw_noise(&model, 0, &mut rng).is_err());
    }

    #[test]
    fn draws_are_reproducible() {
        let (_, _, model) = setup();
        let a = draw_clutter(&model, 30, &mut stream(4, Purpose::Interference, Some(1), 2)).unwrap();
        let b = draw_clutter(&model, 30, &mut stream(4, Purpose::Interference, Some(1), 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn calibration_closed_form_with_identity_covariance() {
        let cfg = SceneConfig { target_scnr_db: 0.0, ..default_scene() };
        let n = cfg.dimension();
        let model =
            CovarianceModel::from_parts(CMatrix::zeros(n, n), CMatrix::identity(n, n), f64::NEG_INFINITY).unwrap();
        let st = Steering::new(&cfg, &phase_centers(&cfg).unwrap());
        let a = st.space_time(0.4, 0.0, 180.0);
        let mu = calibrate_amplitude(&cfg, &model, &a).unwrap();
        assert!((mu - 0.125).abs() < 1e-14);

        let hi = SceneConfig { target_scnr_db: 20.0, ..cfg.clone() };
        let lo = SceneConfig { target_scnr_db: -20.0, ..cfg.clone() };
        let ratio = calibrate_amplitude(&hi, &model, &a).unwrap() / calibrate_amplitude(&lo, &model, &a).unwrap();
        assert!((ratio - 100.0).abs() < 1e-10);
        let gain = 10.0 * (output_scnr(&model, &a, 2.0 * mu) / output_scnr(&model, &a, mu)).log10();
        assert!((gain - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn trial_matrices_are_centred_and_shaped() {
        let (cfg, st, model) = setup();
        let truth = TargetTruth { range_bin: 2, azimuth_deg: 24.0, velocity_mps: 180.0, rcs_db: 0.0 };
        let mut rng = stream(2, Purpose::Placement, None, 0);
        let signal = draw_signal(1.0, cfg.snapshots, &mut rng);
        let trial = synthesize_trial(&cfg, &model, &st, &truth, &signal, &mut rng).unwrap();
        assert_eq!(trial.y.len(), 5);
        for m in trial.y.iter().chain(trial.z.iter()) {
            assert_eq!(m.values.shape(), (64, 300));
            assert!(linalg::mean_column(&m.values).norm() < 1e-10);
        }
    }

    #[test]
    fn single_snapshot_is_rejected() {
        let (cfg, st, model) = setup();
        let truth = TargetTruth { range_bin: 0, azimuth_deg: 24.0, velocity_mps: 180.0, rcs_db: 0.0 };
        let mut rng = stream(2, Purpose::Placement, None, 0);
        let signal = draw_signal(1.0, 1, &mut rng);
        assert!(matches!(
            synthesize_trial(&cfg, &model, &st, &truth, &signal, &mut rng),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn sample_covariance_edge_cases() {
        // √K-scaled orthonormal columns give the identity.
        let k = 8;
        let z = CMatrix::identity(8, k) * C64::new((k as f64).sqrt(), 0.0);
        let s = estimate_covariance(&z);
        assert_eq!(s.loading, 0.0);
        assert!(linalg::frobenius_rel_error(&s.matrix, &CMatrix::identity(8, 8)) < 1e-15);

        let mut rng = stream(9, Purpose::Auxiliary, None, 0);
        let z = white(64, 64, &mut rng);
        let s = estimate_covariance(&z);
        let (values, _) = linalg::hermitian_eigen(&s.matrix);
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0 && s.loading == 0.0);

        let z = white(64, 10, &mut rng);
        let s = estimate_covariance(&z);
        assert!(s.loading > 0.0);
        assert!(Whitener::new(&s.matrix).is_ok());
    }

    #[test]
    fn whitening_scalar_covariances() {
        let mut rng = stream(9, Purpose::Auxiliary, None, 1);
        let m = white(4, 3, &mut rng);
        let eye = CMatrix::identity(4, 4);
        assert!(linalg::frobenius_rel_error(&whiten(&eye, &m).unwrap(), &m) < 1e-15);
        let four = eye * C64::new(4.0, 0.0);
        let half = &m * C64::new(0.5, 0.0);
        assert!(linalg::frobenius_rel_error(&whiten(&four, &m).unwrap(), &half) < 1e-15);
        assert!(whiten(&CMatrix::zeros(4, 4), &m).is_err());
    }

    #[test]
    fn signal_row_statistics() {
        let s = SignalRow::new(vec![C64::new(1.0, 0.0), C64::new(0.0, 1.0), C64::new(-1.0, 0.0)]);
        assert!((s.mean - C64::new(0.0, 1.0 / 3.0)).norm() < 1e-15);
        assert!((s.snapshot_power() - 1.0).abs() < 1e-15);
        let d = draw_signal(2.5, 50, &mut stream(1, Purpose::Placement, None, 0));
        assert!(d.values.iter().all(|x| (x.norm() - 2.5).abs() < 1e-12));
    }
}

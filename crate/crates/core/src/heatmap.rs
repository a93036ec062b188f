//! NAMF test statistic and the range × azimuth × velocity heatmap tensor.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, CVector};
use crate::scene::{SceneConfig, TargetTruth};
use crate::steering::Steering;
use crate::synth::{estimate_covariance, Whitener};

/// NAMF statistic for whitened steering vector `a` and whitened data `y`:
///
/// `‖a^H Y‖² / ((a^H a) · ‖diag(Y^H Y)‖₂)`
pub fn namf(a: &CVector, y: &CMatrix) -> Result<f64> {
    if a.len() != y.nrows() {
        return Err(Error::dims(y.nrows(), a.len()));
    }
    let projections = y.adjoint() * a;
    let numerator = linalg::norm_sqr(&projections);
    let column_energy_norm = column_energy_norm(y);
    let denominator = linalg::norm_sqr(a) * column_energy_norm;
    if !(denominator > 0.0) {
        return Err(Error::Degenerate("NAMF denominator is zero".into()));
    }
    Ok(numerator / denominator)
}

/// `‖diag(Y^H Y)‖₂`: Euclidean norm of the vector of column energies.
pub fn column_energy_norm(y: &CMatrix) -> f64 {
    y.column_iter()
        .map(|c| {
            let e: f64 = c.iter().map(|x| x.norm_sqr()).sum();
            e * e
        })
        .sum::<f64>()
        .sqrt()
}

/// Per-bin quantities shared by every grid cell: the whitening transform, the
/// whitened data, its Gram matrix `Ỹ Ỹ^H` and the column-energy norm.
#[derive(Debug, Clone)]
pub struct WhitenedBin {
    pub whitener: Whitener,
    pub data: CMatrix,
    pub gram: CMatrix,
    pub column_energy_norm: f64,
    pub loading: f64,
}

impl WhitenedBin {
    /// Whitens `y` with the sample covariance of `z`.
    pub fn prepare(y: &CMatrix, z: &CMatrix) -> Result<Self> {
        let cov = estimate_covariance(z);
        Self::with_whitener(y, Whitener::new(&cov.matrix)?, cov.loading)
    }

    pub fn with_whitener(y: &CMatrix, whitener: Whitener, loading: f64) -> Result<Self> {
        let data = whitener.apply(y);
        let gram = linalg::gram_outer(&data);
        let column_energy_norm = column_energy_norm(&data);
        Ok(WhitenedBin { whitener, data, gram, column_energy_norm, loading })
    }

    /// NAMF for an unwhitened steering vector.
    pub fn cell(&self, a: &CVector) -> Result<f64> {
        let aw = self.whitener.apply_vector(a);
        let numerator = linalg::quad_form_re(&aw, &self.gram, &aw);
        let denominator = linalg::norm_sqr(&aw) * self.column_energy_norm;
        if !(denominator > 0.0) {
            return Err(Error::Degenerate("NAMF denominator is zero".into()));
        }
        Ok(numerator.max(0.0) / denominator)
    }

    /// NAMF for every column of `grid`.
    fn cells(&self, grid: &CMatrix) -> std::result::Result<Vec<f64>, (usize, Error)> {
        let aw = self.whitener.apply(grid);
        let gaw = linalg::mul(&self.gram, &aw);
        aw.column_iter()
            .zip(gaw.column_iter())
            .enumerate()
            .map(|(col, (a, ga))| {
                let numerator: f64 = a.iter().zip(ga.iter()).map(|(x, y)| (x.conj() * y).re).sum();
                let energy: f64 = a.iter().map(|x| x.norm_sqr()).sum();
                let denominator = energy * self.column_energy_norm;
                if denominator > 0.0 {
                    Ok(numerator.max(0.0) / denominator)
                } else {
                    Err((col, Error::Degenerate("NAMF denominator is zero".into())))
                }
            })
            .collect()
    }
}

/// Real `κ × n_az × n_vel` tensor of NAMF statistics; `(ρ, j, l)` is stored at
/// `(ρ·n_az + j)·n_vel + l` and corresponds to `(azimuth_deg[j], velocity_mps[l])`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTensor {
    pub values: Vec<f64>,
    pub bins: usize,
    pub n_az: usize,
    pub n_vel: usize,
    pub azimuth_deg: Vec<f64>,
    pub velocity_mps: Vec<f64>,
    pub truth: Option<TargetTruth>,
}

impl HeatmapTensor {
    pub fn zeros(cfg: &SceneConfig) -> Self {
        let az = cfg.azimuth_grid();
        let vel = cfg.velocity_grid();
        HeatmapTensor {
            values: vec![0.0; cfg.num_range_bins * az.count * vel.count],
            bins: cfg.num_range_bins,
            n_az: az.count,
            n_vel: vel.count,
            azimuth_deg: az.values(),
            velocity_mps: vel.values(),
            truth: None,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.bins, self.n_az, self.n_vel)
    }

    pub fn index(&self, bin: usize, az: usize, vel: usize) -> usize {
        (bin * self.n_az + az) * self.n_vel + vel
    }

    pub fn get(&self, bin: usize, az: usize, vel: usize) -> f64 {
        self.values[self.index(bin, az, vel)]
    }

    pub fn set(&mut self, bin: usize, az: usize, vel: usize, value: f64) {
        let i = self.index(bin, az, vel);
        self.values[i] = value;
    }

    /// `(bin, az, vel)` of a flat index.
    pub fn coordinates(&self, flat: usize) -> (usize, usize, usize) {
        let plane = self.n_az * self.n_vel;
        (flat / plane, (flat % plane) / self.n_vel, flat % self.n_vel)
    }
}

/// Grid steering vectors, built once per scene and reused across trials.
#[derive(Debug, Clone)]
pub struct GridSteering {
    pub matrix: CMatrix,
}

impl GridSteering {
    pub fn new(cfg: &SceneConfig, steering: &Steering) -> Self {
        GridSteering { matrix: steering.grid_matrix(cfg) }
    }
}

/// Assembles the tensor from prepared bins.
pub fn heatmap_from_bins(cfg: &SceneConfig, grid: &GridSteering, bins: &[WhitenedBin]) -> Result<HeatmapTensor> {
    let mut tensor = HeatmapTensor::zeros(cfg);
    if bins.len() != tensor.bins {
        return Err(Error::dims(tensor.bins, bins.len()));
    }
    let plane = tensor.n_az * tensor.n_vel;
    if grid.matrix.ncols() != plane {
        return Err(Error::dims(plane, grid.matrix.ncols()));
    }
    let planes: Vec<_> = bins.par_iter().map(|b| b.cells(&grid.matrix)).collect();
    for (bin, result) in planes.into_iter().enumerate() {
        match result {
            Ok(values) => tensor.values[bin * plane..(bin + 1) * plane].copy_from_slice(&values),
            Err((col, source)) => {
                return Err(Error::Cell {
                    bin,
                    azimuth: col / tensor.n_vel,
                    velocity: col % tensor.n_vel,
                    source: Box::new(source),
                })
            }
        }
    }
    Ok(tensor)
}

/// Whitens each bin's returns with that bin's own sample covariance and
/// evaluates the NAMF over the azimuth/velocity grid.
pub fn build_heatmap(
    cfg: &SceneConfig,
    steering: &Steering,
    covariances: &[CMatrix],
    returns: &[CMatrix],
) -> Result<HeatmapTensor> {
    if covariances.len() != returns.len() {
        return Err(Error::dims(covariances.len(), returns.len()));
    }
    let bins = covariances
        .iter()
        .zip(returns)
        .map(|(cov, y)| WhitenedBin::with_whitener(y, Whitener::new(cov)?, 0.0))
        .collect::<Result<Vec<_>>>()?;
    heatmap_from_bins(cfg, &GridSteering::new(cfg, steering), &bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::C64;
    use crate::rng::{complex_normal, stream, Purpose};
    use crate::scene::{default_scene, phase_centers};

    fn random(n: usize, k: usize, seed: u64) -> CMatrix {
        let mut rng = stream(seed, Purpose::Auxiliary, None, 0);
        CMatrix::from_fn(n, k, |_, _| complex_normal(&mut rng))
    }

    #[test]
    fn single_aligned_column_gives_one() {
        let a = random(64, 1, 1).column(0).into_owned();
        let y = CMatrix::from_column_slice(64, 1, a.as_slice());
        assert!((namf(&a, &y).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn orthogonal_data_gives_zero() {
        let mut a = CVector::zeros(4);
        a[0] = C64::new(1.0, 0.0);
        let mut y = CMatrix::zeros(4, 3);
        y[(1, 0)] = C64::new(2.0, 1.0);
        y[(3, 2)] = C64::new(-1.0, 0.5);
        assert_eq!(namf(&a, &y).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_inputs_error() {
        let y = random(4, 3, 2);
        assert!(matches!(namf(&CVector::zeros(4), &y), Err(Error::Degenerate(_))));
        assert!(matches!(namf(&random(4, 1, 3).column(0).into_owned(), &CMatrix::zeros(4, 3)), Err(Error::Degenerate(_))));
        assert!(namf(&CVector::zeros(5), &y).is_err());
    }

    #[test]
    fn shape_matches_grid() {
        let cfg = default_scene();
        let st = Steering::new(&cfg, &phase_centers(&cfg).unwrap());
        let covs = vec![CMatrix::identity(64, 64); 5];
        let ys: Vec<_> = (0..5).map(|i| random(64, 80, 10 + i)).collect();
        let t = build_heatmap(&cfg, &st, &covs, &ys).unwrap();
        assert_eq!(t.shape(), (5, 26, 21));
        assert!(t.values.iter().all(|&g| g >= 0.0));
        // Single cell in isolation equals the tensor entry.
        let bin = WhitenedBin::with_whitener(&ys[3], Whitener::identity(64), 0.0).unwrap();
        let a = st.space_time(t.azimuth_deg[7].to_radians(), 0.0, t.velocity_mps[4]).values;
        assert!((bin.cell(&a).unwrap() - t.get(3, 7, 4)).abs() < 1e-13);
    }

    #[test]
    fn coordinates_invert_index() {
        let t = HeatmapTensor::zeros(&default_scene());
        for flat in [0, 1, 20, 21, 545, 546, 2729] {
            let (b, j, l) = t.coordinates(flat);
            assert_eq!(t.index(b, j, l), flat);
        }
    }
}

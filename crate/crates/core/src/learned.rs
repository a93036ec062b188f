//! A small convolutional regressor from heatmap tensors to (θ̂, v̂).
//!
//! Layout: two stages of 3×3 same-padded convolution, ReLU and 2×2 max-pool
//! (range bins are the input channels), then a ReLU dense layer and a linear
//! layer with two outputs. Outputs are the azimuth and velocity normalized to
//! [0, 1] over the processing region. Everything is f64.
//!
//! Parameters live in one flat vector, tensor by tensor in declaration order:
//! `conv1.weight [c1, c0, 3, 3]`, `conv1.bias [c1]`, `conv2.weight`,
//! `conv2.bias`, `fc1.weight [hidden, flat]`, `fc1.bias`, `fc2.weight
//! [outputs, hidden]`, `fc2.bias`, each row-major.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector, DVectorView};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{Estimate, Method};
use crate::heatmap::HeatmapTensor;
use crate::scene::{SceneConfig, TargetTruth};
use crate::stats::pairwise_sum;

pub use crate::stats::{bias_variance_decomposition, ErrorSplit};

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;
/// Examples per gradient partial sum. Fixed so that the summation order, and
/// therefore every parameter update, is independent of the thread count.
const GRADIENT_CHUNK: usize = 8;
const CHECKPOINT_MAGIC: &[u8; 4] = b"STCN";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArch {
    /// `[channels, height, width]` = `[κ, n_az, n_vel]`.
    pub input: [usize; 3],
    pub conv_channels: [usize; 2],
    pub hidden: usize,
    pub outputs: usize,
}

impl CnnArch {
    pub fn for_scene(cfg: &SceneConfig) -> Self {
        CnnArch {
            input: [cfg.num_range_bins, cfg.azimuth_grid().count, cfg.velocity_grid().count],
            conv_channels: [16, 32],
            hidden: 64,
            outputs: 2,
        }
    }

    fn spatial(&self) -> [(usize, usize); 3] {
        let [_, h, w] = self.input;
        [(h, w), (h / 2, w / 2), (h / 4, w / 4)]
    }

    pub fn flat_features(&self) -> usize {
        let (h, w) = self.spatial()[2];
        self.conv_channels[1] * h * w
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input;
        if c == 0 || h < 4 || w < 4 {
            return Err(Error::InvalidConfig(format!(
                "input {c}x{h}x{w} is too small for two 2x2 pooling stages"
            )));
        }
        if self.conv_channels.contains(&0) || self.hidden == 0 || self.outputs == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Shapes of the parameter tensors in declaration order.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let [c0, _, _] = self.input;
        let [c1, c2] = self.conv_channels;
        vec![
            vec![c1, c0, KERNEL, KERNEL],
            vec![c1],
            vec![c2, c1, KERNEL, KERNEL],
            vec![c2],
            vec![self.hidden, self.flat_features()],
            vec![self.hidden],
            vec![self.outputs, self.hidden],
            vec![self.outputs],
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    fn offsets(&self) -> [usize; 9] {
        let mut out = [0; 9];
        for (i, s) in self.tensor_shapes().iter().enumerate() {
            out[i + 1] = out[i] + s.iter().product::<usize>();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputScaling {
    /// Divide each tensor by its largest entry.
    #[default]
    MaxNormalize,
    Raw,
}

/// Input scaling and the region box used to map targets to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input: InputScaling,
    pub azimuth_deg: (f64, f64),
    pub velocity_mps: (f64, f64),
}

impl Normalization {
    pub fn for_scene(cfg: &SceneConfig, input: InputScaling) -> Self {
        Normalization {
            input,
            azimuth_deg: (cfg.azimuth_min_deg, cfg.azimuth_max_deg),
            velocity_mps: (cfg.velocity_min_mps, cfg.velocity_max_mps),
        }
    }

    pub fn input_values(&self, t: &HeatmapTensor) -> Result<Vec<f64>> {
        match self.input {
            InputScaling::Raw => Ok(t.values.clone()),
            InputScaling::MaxNormalize => {
                let max = t.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if !(max > 0.0 && max.is_finite()) {
                    return Err(Error::Degenerate("tensor has no positive finite maximum".into()));
                }
                Ok(t.values.iter().map(|x| x / max).collect())
            }
        }
    }

    pub fn target(&self, truth: &TargetTruth) -> [f64; 2] {
        [
            unit(truth.azimuth_deg, self.azimuth_deg),
            unit(truth.velocity_mps, self.velocity_mps),
        ]
    }

    /// Maps normalized outputs back to the region, clamping to its box.
    pub fn denormalize(&self, out: [f64; 2]) -> (f64, f64) {
        let back = |u: f64, (lo, hi): (f64, f64)| (lo + u * (hi - lo)).clamp(lo, hi);
        (back(out[0], self.azimuth_deg), back(out[1], self.velocity_mps))
    }
}

fn unit(x: f64, (lo, hi): (f64, f64)) -> f64 {
    (x - lo) / (hi - lo)
}

/// One training example: scaled input tensor and normalized target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub arch: CnnArch,
    pub params: Vec<f64>,
    pub norm: Normalization,
}

/// Activations kept from the forward pass for back-propagation. Feature maps
/// are `positions × channels`, so their column-major storage is the
/// channel-major flattening.
struct Trace {
    patches1: DMatrix<f64>,
    act1: DMatrix<f64>,
    arg1: Vec<usize>,
    patches2: DMatrix<f64>,
    act2: DMatrix<f64>,
    arg2: Vec<usize>,
    pooled2: DMatrix<f64>,
    hidden: DVector<f64>,
    out: DVector<f64>,
}

impl CnnModel {
    pub fn zeros(arch: CnnArch, norm: Normalization) -> Result<Self> {
        arch.validate()?;
        Ok(CnnModel { arch, params: vec![0.0; arch.parameter_count()], norm })
    }

    /// He-normal weights (variance 2 / fan-in), zero biases.
    pub fn init(arch: CnnArch, norm: Normalization, rng: &mut (impl Rng + ?Sized)) -> Result<Self> {
        let mut model = Self::zeros(arch, norm)?;
        let offsets = arch.offsets();
        for (i, shape) in arch.tensor_shapes().iter().enumerate() {
            if shape.len() == 1 {
                continue;
            }
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            for p in &mut model.params[offsets[i]..offsets[i + 1]] {
                let z: f64 = StandardNormal.sample(rng);
                *p = std * z;
            }
        }
        Ok(model)
    }

    fn tensor(&self, i: usize) -> &[f64] {
        let o = self.arch.offsets();
        &self.params[o[i]..o[i + 1]]
    }

    /// A row-major `[rows, cols]` weight tensor viewed as its column-major
    /// transpose `cols × rows`.
    fn weight_t(&self, i: usize, rows: usize, cols: usize) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(self.tensor(i), cols, rows)
    }

    fn input_len(&self) -> usize {
        self.arch.input.iter().product()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_len() {
            return Err(Error::dims(
                format!("{:?} ({} values)", self.arch.input, self.input_len()),
                input.len(),
            ));
        }
        Ok(())
    }

    fn run(&self, input: &[f64]) -> Trace {
        let [c0, _, _] = self.arch.input;
        let [c1, c2] = self.arch.conv_channels;
        let [s0, s1, _] = self.arch.spatial();

        let x = DMatrixView::from_slice(input, s0.0 * s0.1, c0);
        let patches1 = im2col(&x, s0);
        let act1 = relu_bias(&patches1 * self.weight_t(0, c1, c0 * TAPS), self.tensor(1));
        let (pool1, arg1) = max_pool(&act1, s0);

        let patches2 = im2col(&pool1.as_view(), s1);
        let act2 = relu_bias(&patches2 * self.weight_t(2, c2, c1 * TAPS), self.tensor(3));
        let (pooled2, arg2) = max_pool(&act2, s1);

        let flat = DVectorView::from_slice(pooled2.as_slice(), pooled2.len());
        let fc1 = self.weight_t(4, self.arch.hidden, flat.len());
        let hidden = (fc1.tr_mul(&flat) + DVectorView::from_slice(self.tensor(5), self.arch.hidden)).map(|z| z.max(0.0));
        let fc2 = self.weight_t(6, self.arch.outputs, self.arch.hidden);
        let out = fc2.tr_mul(&hidden) + DVectorView::from_slice(self.tensor(7), self.arch.outputs);
        Trace { patches1, act1, arg1, patches2, act2, arg2, pooled2, hidden, out }
    }

    /// Raw network outputs for an already-scaled input.
    pub fn forward_values(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        Ok(self.run(input).out.as_slice().to_vec())
    }

    /// Normalized `(θ̂, v̂)` for a heatmap tensor.
    pub fn forward(&self, t: &HeatmapTensor) -> Result<[f64; 2]> {
        if self.arch.outputs != 2 {
            return Err(Error::dims(2, self.arch.outputs));
        }
        let shape = t.shape();
        if [shape.0, shape.1, shape.2] != self.arch.input {
            return Err(Error::dims(format!("{:?}", self.arch.input), format!("{shape:?}")));
        }
        let out = self.forward_values(&self.norm.input_values(t)?)?;
        Ok([out[0], out[1]])
    }

    pub fn predict(&self, t: &HeatmapTensor) -> Result<Estimate> {
        let (azimuth_deg, velocity_mps) = self.norm.denormalize(self.forward(t)?);
        Ok(Estimate {
            azimuth_deg,
            velocity_mps,
            method: Method::Network,
            iterations_used: 0,
            final_loss: None,
        })
    }

    /// `½‖f(x) − target‖²` and its gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, input: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate_gradient(input, target, &mut grad)?;
        Ok((loss, grad))
    }

    /// Adds this example's gradient into `grad` and returns its loss.
    fn accumulate_gradient(&self, input: &[f64], target: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.check_input(input)?;
        if target.len() != self.arch.outputs {
            return Err(Error::dims(self.arch.outputs, target.len()));
        }
        let tr = self.run(input);
        let d_out = &tr.out - DVectorView::from_slice(target, target.len());
        self.backward(&tr, &d_out, grad);
        Ok(0.5 * d_out.norm_squared())
    }

    fn backward(&self, tr: &Trace, d_out: &DVector<f64>, grad: &mut [f64]) {
        let [c0, _, _] = self.arch.input;
        let [c1, c2] = self.arch.conv_channels;
        let [s0, s1, _] = self.arch.spatial();
        let (hidden, outputs) = (self.arch.hidden, self.arch.outputs);
        let o = self.arch.offsets();
        let (g_conv1, rest) = grad.split_at_mut(o[1]);
        let (g_b1, rest) = rest.split_at_mut(o[2] - o[1]);
        let (g_conv2, rest) = rest.split_at_mut(o[3] - o[2]);
        let (g_b2, rest) = rest.split_at_mut(o[4] - o[3]);
        let (g_fc1, rest) = rest.split_at_mut(o[5] - o[4]);
        let (g_fc1b, rest) = rest.split_at_mut(o[6] - o[5]);
        let (g_fc2, g_fc2b) = rest.split_at_mut(o[7] - o[6]);

        // fc2: the transposed gradient is hidden ⊗ d_out.
        DMatrixViewMut::from_slice(g_fc2, hidden, outputs).ger(1.0, &tr.hidden, d_out, 1.0);
        add_into(g_fc2b, d_out.as_slice());
        let mut d_hidden = self.weight_t(6, outputs, hidden) * d_out;
        d_hidden.zip_apply(&tr.hidden, |d, h| {
            if h <= 0.0 {
                *d = 0.0
            }
        });

        // fc1
        let flat = DVectorView::from_slice(tr.pooled2.as_slice(), tr.pooled2.len());
        DMatrixViewMut::from_slice(g_fc1, flat.len(), hidden).ger(1.0, &flat, &d_hidden, 1.0);
        add_into(g_fc1b, d_hidden.as_slice());
        let d_flat = self.weight_t(4, hidden, flat.len()) * &d_hidden;
        let d_pooled2 = DMatrixView::from_slice(d_flat.as_slice(), tr.pooled2.nrows(), c2);

        // conv2
        let d_z2 = relu_mask(unpool(&d_pooled2, &tr.arg2, s1.0 * s1.1), &tr.act2);
        DMatrixViewMut::from_slice(g_conv2, c1 * TAPS, c2).gemm_tr(1.0, &tr.patches2, &d_z2, 1.0);
        add_column_sums(g_b2, &d_z2);
        let d_patches2 = &d_z2 * self.weight_t(2, c2, c1 * TAPS).transpose();
        let d_pool1 = col2im(&d_patches2, c1, s1);

        // conv1
        let d_z1 = relu_mask(unpool(&d_pool1.as_view(), &tr.arg1, s0.0 * s0.1), &tr.act1);
        DMatrixViewMut::from_slice(g_conv1, c0 * TAPS, c1).gemm_tr(1.0, &tr.patches1, &d_z1, 1.0);
        add_column_sums(g_b1, &d_z1);
    }

    /// Mean of `½‖f(x) − t‖²` over samples.
    pub fn mean_loss(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty("samples"));
        }
        let losses = samples
            .par_iter()
            .map(|s| {
                self.check_input(&s.input)?;
                let out = self.run(&s.input).out;
                Ok(0.5 * out.iter().zip(&s.target).map(|(o, t)| (o - t) * (o - t)).sum::<f64>())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(pairwise_sum(&losses) / samples.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Little-endian checkpoint: magic, version, architecture, normalization,
    /// the rank and dims of every tensor, then all parameters as f64.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let a = &self.arch;
        for d in a.input.iter().chain(a.conv_channels.iter()).chain([a.hidden, a.outputs].iter()) {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let scaling: u8 = match self.norm.input {
            InputScaling::MaxNormalize => 0,
            InputScaling::Raw => 1,
        };
        w.write_all(&[scaling])?;
        for x in [self.norm.azimuth_deg.0, self.norm.azimuth_deg.1, self.norm.velocity_mps.0, self.norm.velocity_mps.1] {
            w.write_all(&x.to_le_bytes())?;
        }
        let shapes = a.tensor_shapes();
        w.write_all(&(shapes.len() as u32).to_le_bytes())?;
        for s in &shapes {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            for d in s {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a network checkpoint".into()));
        }
        let version = u16::from_le_bytes(read_array(r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = u32::from_le_bytes(read_array(r)?) as usize;
        }
        let arch = CnnArch {
            input: [dims[0], dims[1], dims[2]],
            conv_channels: [dims[3], dims[4]],
            hidden: dims[5],
            outputs: dims[6],
        };
        arch.validate()?;
        let [scaling] = read_array::<1>(r)?;
        let input = match scaling {
            0 => InputScaling::MaxNormalize,
            1 => InputScaling::Raw,
            other => return Err(Error::Format(format!("unknown input scaling tag {other}"))),
        };
        let mut bounds = [0.0; 4];
        for b in &mut bounds {
            *b = f64::from_le_bytes(read_array(r)?);
        }
        let count = u32::from_le_bytes(read_array(r)?) as usize;
        let mut shapes = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let rank = u32::from_le_bytes(read_array(r)?) as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor rank {rank}")));
            }
            let mut s = Vec::with_capacity(rank);
            for _ in 0..rank {
                s.push(u32::from_le_bytes(read_array(r)?) as usize);
            }
            shapes.push(s);
        }
        if shapes != arch.tensor_shapes() {
            return Err(Error::Format("tensor shapes do not match the architecture header".into()));
        }
        let mut params = vec![0.0; arch.parameter_count()];
        for p in &mut params {
            *p = f64::from_le_bytes(read_array(r)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        Ok(CnnModel {
            arch,
            params,
            norm: Normalization {
                input,
                azimuth_deg: (bounds[0], bounds[1]),
                velocity_mps: (bounds[2], bounds[3]),
            },
        })
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

/// `(h · w) × (channels · 9)` patch matrix for a 3×3 kernel with zero
/// padding; `x` is `(h · w) × channels`.
fn im2col(x: &DMatrixView<'_, f64>, (h, w): (usize, usize)) -> DMatrix<f64> {
    let channels = x.ncols();
    let mut patches = DMatrix::zeros(h * w, channels * TAPS);
    for c in 0..channels {
        let src = x.column(c);
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let mut dst = patches.column_mut(c * TAPS + ky * KERNEL + kx);
                for y in valid(h, ky) {
                    let sy = y + ky - 1;
                    for xx in valid(w, kx) {
                        dst[y * w + xx] = src[sy * w + xx + kx - 1];
                    }
                }
            }
        }
    }
    patches
}

/// Output rows/columns whose kernel tap `k` lands inside an axis of length `n`.
fn valid(n: usize, k: usize) -> std::ops::Range<usize> {
    match k {
        0 => 1..n,
        1 => 0..n,
        _ => 0..n - 1,
    }
}

/// Adjoint of [`im2col`].
fn col2im(patches: &DMatrix<f64>, channels: usize, (h, w): (usize, usize)) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(h * w, channels);
    for c in 0..channels {
        let mut dst = x.column_mut(c);
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let src = patches.column(c * TAPS + ky * KERNEL + kx);
                for y in valid(h, ky) {
                    let sy = y + ky - 1;
                    for xx in valid(w, kx) {
                        dst[sy * w + xx + kx - 1] += src[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

fn relu_bias(mut z: DMatrix<f64>, bias: &[f64]) -> DMatrix<f64> {
    for (mut col, b) in z.column_iter_mut().zip(bias) {
        col.apply(|v| *v = (*v + b).max(0.0));
    }
    z
}

fn relu_mask(mut d: DMatrix<f64>, act: &DMatrix<f64>) -> DMatrix<f64> {
    d.zip_apply(act, |g, a| {
        if a <= 0.0 {
            *g = 0.0
        }
    });
    d
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn add_column_sums(dst: &mut [f64], m: &DMatrix<f64>) {
    for (a, col) in dst.iter_mut().zip(m.column_iter()) {
        *a += col.sum();
    }
}

/// 2×2, stride-2 max pooling (trailing odd row/column dropped) of a
/// `(h · w) × channels` map. Returns the pooled map and, per output entry,
/// the input position of its maximum (first in scan order on ties).
fn max_pool(x: &DMatrix<f64>, (h, w): (usize, usize)) -> (DMatrix<f64>, Vec<usize>) {
    let (ph, pw) = (h / 2, w / 2);
    let channels = x.ncols();
    let mut out = DMatrix::zeros(ph * pw, channels);
    let mut arg = vec![0; channels * ph * pw];
    for c in 0..channels {
        let col = x.column(c);
        for oy in 0..ph {
            for ox in 0..pw {
                let mut best = (2 * oy) * w + 2 * ox;
                for p in [best + 1, best + w, best + w + 1] {
                    if col[p] > col[best] {
                        best = p;
                    }
                }
                out[(oy * pw + ox, c)] = col[best];
                arg[c * ph * pw + oy * pw + ox] = best;
            }
        }
    }
    (out, arg)
}

fn unpool(d: &DMatrixView<'_, f64>, arg: &[usize], positions: usize) -> DMatrix<f64> {
    let (pooled, channels) = d.shape();
    let mut x = DMatrix::zeros(positions, channels);
    for c in 0..channels {
        for q in 0..pooled {
            x[(arg[c * pooled + q], c)] += d[(q, c)];
        }
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub input_scaling: InputScaling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            validation_fraction: 0.1,
            patience: 10,
            seed: 0,
            input_scaling: InputScaling::MaxNormalize,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::InvalidConfig("batch_size and epochs must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidConfig("validation_fraction must lie in (0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Mean loss and mean gradient over a batch.
fn batch_gradient(model: &CnnModel, batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
    let partials = batch
        .par_chunks(GRADIENT_CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut grad = vec![0.0; model.params.len()];
            for s in chunk {
                loss += model.accumulate_gradient(&s.input, &s.target, &mut grad)?;
            }
            Ok((loss, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params.len()];
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Splits off a validation subset by a seeded permutation.
fn split_validation(n: usize, fraction: f64, rng: &mut (impl Rng + ?Sized)) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 {
        return (order.clone(), order);
    }
    let val = order.split_off(n - n_val);
    (order, val)
}

/// Mini-batch Adam on `½‖f(x) − t‖²`, keeping the parameters with the lowest
/// validation loss. `rng` drives initialization, the validation split and
/// per-epoch shuffling.
pub fn train(
    samples: &[Sample],
    arch: CnnArch,
    norm: Normalization,
    cfg: &TrainConfig,
    rng: &mut (impl Rng + ?Sized),
) -> Result<(CnnModel, TrainingLog)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut model = CnnModel::init(arch, norm, rng)?;
    for s in samples {
        model.check_input(&s.input)?;
    }
    let (mut train_idx, val_idx) = split_validation(samples.len(), cfg.validation_fraction, rng);
    let val: Vec<Sample> = val_idx.iter().map(|&i| samples[i].clone()).collect();

    let mut adam = Adam::new(model.params.len());
    let mut best = (f64::INFINITY, model.params.clone());
    let mut log = TrainingLog::default();
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(rng);
        let mut losses = Vec::new();
        for (b, idx) in train_idx.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let (loss, grad) = batch_gradient(&model, &batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch, batch: b });
            }
            losses.push(loss * batch.len() as f64);
            adam.step(&mut model.params, &grad, cfg);
            log.steps += 1;
        }
        let train_loss = pairwise_sum(&losses) / train_idx.len() as f64;
        let val_loss = model.mean_loss(&val)?;
        if !val_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, batch: train_idx.len().div_ceil(cfg.batch_size) });
        }
        log::debug!("epoch {epoch}: train {train_loss:.6e}, validation {val_loss:.6e}");
        log.epochs.push(EpochRecord { epoch, train_loss, val_loss });
        if val_loss < best.0 {
            best = (val_loss, model.params.clone());
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.params = best.1;
    Ok((model, log))
}

/// Builds samples from tensors and their truths with the given scaling.
pub fn samples_from_tensors(tensors: &[HeatmapTensor], truths: &[TargetTruth], norm: &Normalization) -> Result<Vec<Sample>> {
    if tensors.len() != truths.len() {
        return Err(Error::dims(truths.len(), tensors.len()));
    }
    tensors
        .iter()
        .zip(truths)
        .map(|(t, truth)| Ok(Sample { input: norm.input_values(t)?, target: norm.target(truth) }))
        .collect()
}

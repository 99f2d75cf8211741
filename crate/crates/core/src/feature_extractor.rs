//! Seven-layer convolutional feature extractor.
//!
//! Layer `i` (1-based) is conv → [batch norm] → ReLU → [2×2 max pool]. Layers
//! 1, 2, 4 and 6 pool; layers 3, 5 and 7 batch-normalize. Four halvings give
//! a feature grid 1/16 the size of the input in each direction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{BnMode, BnStats, Scalar, Tape, Tensor, Var};
use crate::params::{Bound, Init, ParamSpec};

pub const LAYERS: usize = 7;
pub const POOL_AFTER: [usize; 4] = [1, 2, 4, 6];
pub const BN_AFTER: [usize; 3] = [3, 5, 7];
/// Total downsampling factor of the extractor.
pub const STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    pub channels: [usize; LAYERS],
    pub kernel: usize,
    pub dropout_p: f64,
}

impl CnnConfig {
    pub fn full() -> Self {
        Self {
            channels: [32, 64, 64, 128, 128, 256, 256],
            kernel: 3,
            dropout_p: 0.5,
        }
    }

    pub fn desk() -> Self {
        Self {
            channels: [8, 16, 16, 32, 32, 64, 64],
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("cnn channel counts must be positive".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("cnn kernel must be odd, got {}", self.kernel)));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout probability {} outside [0,1]", self.dropout_p)));
        }
        Ok(())
    }

    /// Feature depth `D` of the output grid.
    pub fn out_channels(&self) -> usize {
        self.channels[LAYERS - 1]
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let k = self.kernel;
        let mut specs = Vec::new();
        let mut c_in = 1;
        for (i, &f) in self.channels.iter().enumerate() {
            let layer = i + 1;
            specs.push(ParamSpec::new(
                format!("cnn.conv{layer}.weight"),
                &[f, c_in, k, k],
                Init::Glorot { fan_in: c_in * k * k, fan_out: f * k * k },
            ));
            specs.push(ParamSpec::zeros(format!("cnn.conv{layer}.bias"), &[f]));
            if BN_AFTER.contains(&layer) {
                specs.push(ParamSpec::new(format!("cnn.bn{layer}.gamma"), &[f], Init::Ones));
                specs.push(ParamSpec::zeros(format!("cnn.bn{layer}.beta"), &[f]));
            }
            c_in = f;
        }
        specs
    }

    /// Fresh running statistics, one entry per batch-norm layer.
    pub fn bn_stats<T: Scalar>(&self) -> Vec<BnStats<T>> {
        BN_AFTER.iter().map(|&l| BnStats::new(self.channels[l - 1])).collect()
    }
}

/// Grid extents `(h/16, w/16)` produced for an `h × w` input.
pub fn output_shape(h: usize, w: usize) -> Result<(usize, usize)> {
    if h == 0 || w == 0 || h % STRIDE != 0 || w % STRIDE != 0 {
        return Err(shape_err(
            "output_shape",
            format!("input {h}x{w} must be a positive multiple of {STRIDE} in both extents"),
        ));
    }
    Ok((h / STRIDE, w / STRIDE))
}

/// Train mode uses batch statistics, updates the running ones, and applies
/// inverted dropout; infer mode is deterministic.
pub enum Mode<'a, T> {
    Train { stats: &'a mut [BnStats<T>], seed: Option<u64> },
    Infer { stats: &'a [BnStats<T>] },
}

/// CNN output `[N, D, H', W']` with each batch element's source width in
/// pixels before padding.
pub struct FeatureGrid<'t, T: Scalar = f32> {
    pub values: Var<'t, T>,
    pub source_widths: Vec<usize>,
}

impl<T: Scalar> FeatureGrid<'_, T> {
    /// `(N, D, H', W')`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// Runs the extractor on `images` of shape `[N, 1, H, W]`.
pub fn extract_features<'t, T: Scalar>(
    tape: &'t Tape<T>,
    images: Var<'t, T>,
    source_widths: &[usize],
    params: &Bound<'t, T>,
    config: &CnnConfig,
    mode: Mode<'_, T>,
) -> Result<FeatureGrid<'t, T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(shape_err("extract_features", format!("images must be [N,1,H,W], got {s:?}")));
    }
    output_shape(s[2], s[3])?;
    if source_widths.len() != s[0] {
        return Err(shape_err(
            "extract_features",
            format!("{} source widths for batch of {}", source_widths.len(), s[0]),
        ));
    }
    let (mut stats_mut, stats_ro, seed) = match mode {
        Mode::Train { stats, seed } => {
            let seed = seed.ok_or_else(|| Error::Config("train-mode feature extraction needs an rng seed".into()))?;
            (Some(stats), None, Some(seed))
        }
        Mode::Infer { stats } => (None, Some(stats), None),
    };
    let pad = (config.kernel - 1) / 2;
    let mut x = images;
    let mut bn_index = 0;
    for layer in 1..=LAYERS {
        let w = params.get(&format!("cnn.conv{layer}.weight"))?;
        let b = params.get(&format!("cnn.conv{layer}.bias"))?;
        x = tape.conv2d(x, w, b, 1, pad)?;
        if BN_AFTER.contains(&layer) {
            let gamma = params.get(&format!("cnn.bn{layer}.gamma"))?;
            let beta = params.get(&format!("cnn.bn{layer}.beta"))?;
            let bn_mode = match (&mut stats_mut, stats_ro) {
                (Some(st), _) => BnMode::Train(&mut st[bn_index]),
                (None, Some(st)) => BnMode::Infer(&st[bn_index]),
                (None, None) => unreachable!(),
            };
            x = tape.batch_norm(x, gamma, beta, bn_mode)?;
            bn_index += 1;
        }
        x = x.relu()?;
        if POOL_AFTER.contains(&layer) {
            x = x.maxpool2x2()?;
        }
    }
    if let Some(seed) = seed {
        x = dropout(tape, x, config.dropout_p, seed)?;
    }
    Ok(FeatureGrid {
        values: x,
        source_widths: source_widths.to_vec(),
    })
}

/// Inverted dropout: kept units are scaled by 1/(1−p).
pub fn dropout<'t, T: Scalar>(tape: &'t Tape<T>, x: Var<'t, T>, p: f64, seed: u64) -> Result<Var<'t, T>> {
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if keep > 0.0 { T::lit(1.0 / keep) } else { T::zero() };
    let mask = Tensor::from_fn(x.shape(), |_| if rng.random::<f64>() < keep { scale } else { T::zero() });
    x.mul(tape.constant(mask))
}

//! The convolutional detector: optional spatial filtering across channels,
//! `K` temporal blocks (conv, batch norm, ReLU, max-pool) and two
//! full-extent heads that emit per-default offsets and class probabilities.
//!
//! Activations inside the temporal blocks are laid out as `(maps, B·C·len)`
//! so each convolution is one GEMM over the whole batch.

mod backward;
mod checkpoint;
mod forward;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::Gradients;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointHeader,
    ManifestEntry, CHECKPOINT_MAGIC,
};
pub use forward::{BatchOutput, ForwardCache, Mode, NetworkOutput};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Floating point type the network can run in.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn real<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub channels: usize,
    /// Input time steps `T`.
    pub window_samples: usize,
    /// Number of temporal blocks `K`.
    pub blocks: usize,
    /// Event labels, excluding background.
    pub labels: usize,
    /// Default events per window.
    pub defaults: usize,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.channels == 0 {
            return bad("channels must be >= 1".into());
        }
        if self.blocks == 0 || self.blocks > 20 {
            return bad(format!("blocks must be in 1..=20, got {}", self.blocks));
        }
        if self.labels == 0 || self.defaults == 0 {
            return bad("labels and defaults must be >= 1".into());
        }
        let div = 1usize << self.blocks;
        if self.window_samples == 0 || self.window_samples % div != 0 {
            return bad(format!(
                "window samples {} not divisible by 2^{} = {div}",
                self.window_samples, self.blocks
            ));
        }
        Ok(())
    }

    /// Output maps of block `k` (1-based).
    pub fn maps(&self, k: usize) -> usize {
        4 << k
    }

    /// Input maps of block `k` (1-based).
    pub fn in_maps(&self, k: usize) -> usize {
        if k == 1 {
            1
        } else {
            self.maps(k - 1)
        }
    }

    /// Time steps entering block `k` (1-based).
    pub fn block_len(&self, k: usize) -> usize {
        self.window_samples >> (k - 1)
    }

    pub fn feature_maps(&self) -> usize {
        self.maps(self.blocks)
    }

    pub fn reduced_len(&self) -> usize {
        self.window_samples >> self.blocks
    }

    /// Shape `(F, C, T̃)` of the final feature map of one sample.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        (self.feature_maps(), self.channels, self.reduced_len())
    }

    /// Flattened length of one sample's feature map.
    pub fn feature_len(&self) -> usize {
        self.feature_maps() * self.channels * self.reduced_len()
    }

    pub fn classes(&self) -> usize {
        self.labels + 1
    }
}

/// Dense affine map `y = W x + b`, also used for convolutions unrolled to a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            weight: Array2::zeros((rows, cols)),
            bias: Array1::zeros(rows),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    /// `(out maps, in maps · 3)`; tap `j` of input map `i` sits at column `3i + j`.
    pub conv: Linear<F>,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

/// Learnable tensors. Gradients share this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub spatial: Option<Linear<F>>,
    pub blocks: Vec<BlockParams<F>>,
    pub loc_head: Linear<F>,
    pub cls_head: Linear<F>,
}

impl<F: Real> Params<F> {
    pub fn zeros(cfg: &NetConfig) -> Self {
        let spatial = (cfg.channels > 1).then(|| Linear::zeros(cfg.channels, cfg.channels));
        let blocks = (1..=cfg.blocks)
            .map(|k| BlockParams {
                conv: Linear::zeros(cfg.maps(k), cfg.in_maps(k) * 3),
                gamma: Array1::zeros(cfg.maps(k)),
                beta: Array1::zeros(cfg.maps(k)),
            })
            .collect();
        Self {
            spatial,
            blocks,
            loc_head: Linear::zeros(2 * cfg.defaults, cfg.feature_len()),
            cls_head: Linear::zeros(cfg.classes() * cfg.defaults, cfg.feature_len()),
        }
    }

    /// Tensors in manifest order as `(name, stored shape, values)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let mut out = Vec::new();
        if let Some(s) = &self.spatial {
            let c = s.bias.len();
            out.push((
                "spatial.weight".into(),
                vec![c, c],
                s.weight.as_slice().unwrap(),
            ));
            out.push(("spatial.bias".into(), vec![c], s.bias.as_slice().unwrap()));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            let (o, i3) = b.conv.weight.dim();
            let name = |p: &str| format!("block{}.{p}", k + 1);
            out.push((
                name("conv.weight"),
                vec![o, i3 / 3, 1, 3],
                b.conv.weight.as_slice().unwrap(),
            ));
            out.push((name("conv.bias"), vec![o], b.conv.bias.as_slice().unwrap()));
            out.push((name("bn.gamma"), vec![o], b.gamma.as_slice().unwrap()));
            out.push((name("bn.beta"), vec![o], b.beta.as_slice().unwrap()));
        }
        for (name, head) in [("loc_head", &self.loc_head), ("cls_head", &self.cls_head)] {
            let (o, d) = head.weight.dim();
            out.push((
                format!("{name}.weight"),
                vec![o, d],
                head.weight.as_slice().unwrap(),
            ));
            out.push((
                format!("{name}.bias"),
                vec![o],
                head.bias.as_slice().unwrap(),
            ));
        }
        out
    }

    /// Mutable counterpart of [`Params::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        if let Some(s) = &mut self.spatial {
            out.push(s.weight.as_slice_mut().unwrap());
            out.push(s.bias.as_slice_mut().unwrap());
        }
        for b in &mut self.blocks {
            out.push(b.conv.weight.as_slice_mut().unwrap());
            out.push(b.conv.bias.as_slice_mut().unwrap());
            out.push(b.gamma.as_slice_mut().unwrap());
            out.push(b.beta.as_slice_mut().unwrap());
        }
        for head in [&mut self.loc_head, &mut self.cls_head] {
            out.push(head.weight.as_slice_mut().unwrap());
            out.push(head.bias.as_slice_mut().unwrap());
        }
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }
}

/// Batch-norm statistics used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Array1<F>,
    pub var: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel<F> {
    pub config: NetConfig,
    pub params: Params<F>,
    pub running: Vec<RunningStats<F>>,
    /// Bumped on every parameter update so stale forward caches can be detected.
    pub(crate) generation: u64,
}

impl<F: Real> DetectorModel<F> {
    /// He-initialised conv and head weights, zero biases, identity batch norm
    /// and a near-identity spatial filter.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::<F>::zeros(&config);
        let mut he = |w: &mut Array2<F>, fan_in: usize| {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            w.mapv_inplace(|_| real(dist.sample(&mut rng)));
        };
        for b in &mut params.blocks {
            let fan_in = b.conv.weight.ncols();
            he(&mut b.conv.weight, fan_in);
            b.gamma.fill(F::one());
        }
        let d = config.feature_len();
        he(&mut params.loc_head.weight, d);
        he(&mut params.cls_head.weight, d);
        if let Some(s) = &mut params.spatial {
            let noise = Normal::new(0.0, 0.01).unwrap();
            for ((r, c), w) in s.weight.indexed_iter_mut() {
                let id = if r == c { 1.0 } else { 0.0 };
                *w = real(id + noise.sample(&mut rng));
            }
        }
        let running = (1..=config.blocks)
            .map(|k| RunningStats {
                mean: Array1::zeros(config.maps(k)),
                var: Array1::ones(config.maps(k)),
            })
            .collect();
        Ok(Self {
            config,
            params,
            running,
            generation: 0,
        })
    }

    /// Marks the parameters as changed; caches taken before are rejected by backward.
    pub fn touch(&mut self) {
        self.generation = self.generation.wrapping_add(1);
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Folds the batch statistics of a train-mode forward pass into the running estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<F>) {
        let m = real::<F>(BN_MOMENTUM);
        for (stats, block) in self.running.iter_mut().zip(cache.blocks()) {
            if let Some((mean, var)) = block.batch_stats() {
                let n = block.width() as f64;
                let unbias = real::<F>(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
                stats
                    .mean
                    .zip_mut_with(mean, |r, &b| *r = (F::one() - m) * *r + m * b);
                stats
                    .var
                    .zip_mut_with(var, |r, &b| *r = (F::one() - m) * *r + m * b * unbias);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .tensors()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
            && self
                .running
                .iter()
                .all(|r| r.mean.iter().chain(r.var.iter()).all(|x| x.is_finite()))
    }

    /// Converts every tensor to another float type.
    pub fn cast<G: Real>(&self) -> DetectorModel<G> {
        let conv = |a: &Array2<F>| a.mapv(|v| real::<G>(v.to_f64().unwrap()));
        let conv1 = |a: &Array1<F>| a.mapv(|v| real::<G>(v.to_f64().unwrap()));
        let lin = |l: &Linear<F>| Linear {
            weight: conv(&l.weight),
            bias: conv1(&l.bias),
        };
        DetectorModel {
            config: self.config,
            params: Params {
                spatial: self.params.spatial.as_ref().map(lin),
                blocks: self
                    .params
                    .blocks
                    .iter()
                    .map(|b| BlockParams {
                        conv: lin(&b.conv),
                        gamma: conv1(&b.gamma),
                        beta: conv1(&b.beta),
                    })
                    .collect(),
                loc_head: lin(&self.params.loc_head),
                cls_head: lin(&self.params.cls_head),
            },
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: conv1(&r.mean),
                    var: conv1(&r.var),
                })
                .collect(),
            generation: 0,
        }
    }
}

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};

use super::{real, DetectorModel, NetConfig, Real, BN_EPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Head outputs for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput<F> {
    /// `(defaults, 2)`: encoded center and duration offsets.
    pub loc: Array2<F>,
    /// `(defaults, labels + 1)`: class probabilities, background first.
    pub probs: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput<F> {
    /// `(batch, defaults, 2)`.
    pub loc: Array3<F>,
    /// `(batch, defaults, labels + 1)`.
    pub probs: Array3<F>,
}

impl<F: Real> BatchOutput<F> {
    pub fn batch(&self) -> usize {
        self.loc.dim().0
    }

    pub fn sample(&self, b: usize) -> NetworkOutput<F> {
        NetworkOutput {
            loc: self.loc.index_axis(Axis(0), b).to_owned(),
            probs: self.probs.index_axis(Axis(0), b).to_owned(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache<F> {
    /// Unrolled conv input, `(in maps · 3, width)`.
    pub col: Array2<F>,
    /// Normalised conv output.
    pub xhat: Array2<F>,
    /// Batch-norm output before ReLU.
    pub pre_relu: Array2<F>,
    pub inv_std: Array1<F>,
    /// Which element of each pooled pair won (`true` for the second).
    pub pool_second: Vec<bool>,
    /// Batch mean and biased variance, train mode only.
    pub stats: Option<(Array1<F>, Array1<F>)>,
    /// Time steps per `(sample, channel)` row entering the block.
    pub len: usize,
}

impl<F> BlockCache<F> {
    pub fn batch_stats(&self) -> Option<(&Array1<F>, &Array1<F>)> {
        self.stats.as_ref().map(|(m, v)| (m, v))
    }

    /// Number of positions each batch-norm statistic is computed over.
    pub fn width(&self) -> usize {
        self.pre_relu.ncols()
    }
}

/// Intermediate values kept from a forward pass for [`DetectorModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    pub(crate) generation: u64,
    pub(crate) mode: Mode,
    pub(crate) input: Array3<F>,
    pub(crate) blocks: Vec<BlockCache<F>>,
    /// `(batch, feature_len)`.
    pub(crate) features: Array2<F>,
    pub(crate) probs: Array3<F>,
}

impl<F> ForwardCache<F> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub(crate) fn blocks(&self) -> &[BlockCache<F>] {
        &self.blocks
    }
}

/// Copies `a` (maps, width) into the `(maps·3, width)` matrix of shifted
/// taps, zero-padding at the edges of every `len`-long row.
pub(crate) fn im2col<F: Real>(a: &Array2<F>, len: usize) -> Array2<F> {
    let (maps, width) = a.dim();
    let mut col = Array2::<F>::zeros((maps * 3, width));
    for i in 0..maps {
        let src = a.row(i);
        let src = src.as_slice().expect("contiguous");
        for j in 0..3 {
            let mut dst = col.row_mut(3 * i + j);
            let dst = dst.as_slice_mut().expect("contiguous");
            for r in (0..width).step_by(len) {
                let s = &src[r..r + len];
                let d = &mut dst[r..r + len];
                match j {
                    0 => d[1..].copy_from_slice(&s[..len - 1]),
                    1 => d.copy_from_slice(s),
                    _ => d[..len - 1].copy_from_slice(&s[1..]),
                }
            }
        }
    }
    col
}

fn softmax_groups<F: Real>(logits: &mut Array3<F>) {
    for mut row in logits.lanes_mut(Axis(2)) {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: F = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl<F: Real> DetectorModel<F> {
    fn check_input(&self, input: &ArrayView3<F>) -> Result<()> {
        let cfg = &self.config;
        let (b, c, t) = input.dim();
        if b == 0 || c != cfg.channels || t != cfg.window_samples {
            return Err(Error::ShapeMismatch {
                expected: vec![b.max(1), cfg.channels, cfg.window_samples],
                actual: vec![b, c, t],
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation("input"));
        }
        Ok(())
    }

    /// Spatial filtering; returns the single input map of block 1, `(1, B·C·T)`.
    fn spatial_forward(&self, input: &ArrayView3<F>) -> Array2<F> {
        let (b, c, t) = input.dim();
        match &self.params.spatial {
            None => input
                .to_owned()
                .into_shape_with_order((1, b * c * t))
                .expect("contiguous"),
            Some(lin) => {
                let mut out = Array3::<F>::zeros((b, c, t));
                for (x, mut y) in input.outer_iter().zip(out.outer_iter_mut()) {
                    general_mat_mul(F::one(), &lin.weight, &x, F::zero(), &mut y);
                    for (mut row, &bias) in y.outer_iter_mut().zip(lin.bias.iter()) {
                        row.mapv_inplace(|v| v + bias);
                    }
                }
                out.into_shape_with_order((1, b * c * t))
                    .expect("contiguous")
            }
        }
    }

    fn block_forward(
        &self,
        k: usize,
        input: &Array2<F>,
        len: usize,
        mode: Mode,
    ) -> (Array2<F>, BlockCache<F>) {
        let p = &self.params.blocks[k];
        let col = im2col(input, len);
        let width = col.ncols();
        let maps = p.conv.weight.nrows();
        let mut z = Array2::<F>::zeros((maps, width));
        general_mat_mul(F::one(), &p.conv.weight, &col, F::zero(), &mut z);

        let eps = real::<F>(BN_EPS);
        let n = real::<F>(width as f64);
        let (mean, var, stats) = match mode {
            Mode::Train => {
                let mut mean = Array1::<F>::zeros(maps);
                let mut var = Array1::<F>::zeros(maps);
                for (o, row) in z.outer_iter().enumerate() {
                    // conv bias enters z before normalisation
                    let bias = p.conv.bias[o];
                    let m = row.iter().map(|&v| v + bias).sum::<F>() / n;
                    let v = row
                        .iter()
                        .map(|&x| {
                            let d = x + bias - m;
                            d * d
                        })
                        .sum::<F>()
                        / n;
                    mean[o] = m;
                    var[o] = v;
                }
                (mean.clone(), var.clone(), Some((mean, var)))
            }
            Mode::Eval => (
                self.running[k].mean.clone(),
                self.running[k].var.clone(),
                None,
            ),
        };
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());

        let mut xhat = z;
        let mut pre_relu = Array2::<F>::zeros((maps, width));
        for o in 0..maps {
            let shift = p.conv.bias[o] - mean[o];
            let (is, g, b) = (inv_std[o], p.gamma[o], p.beta[o]);
            let mut xr = xhat.row_mut(o);
            let mut yr = pre_relu.row_mut(o);
            for (x, y) in xr.iter_mut().zip(yr.iter_mut()) {
                *x = (*x + shift) * is;
                *y = g * *x + b;
            }
        }

        let half = width / 2;
        let mut pooled = Array2::<F>::zeros((maps, half));
        let mut pool_second = vec![false; maps * half];
        for o in 0..maps {
            let y = pre_relu.row(o);
            let y = y.as_slice().expect("contiguous");
            let mut out = pooled.row_mut(o);
            let out = out.as_slice_mut().expect("contiguous");
            let flags = &mut pool_second[o * half..(o + 1) * half];
            for m in 0..half {
                // ReLU before the max; the first element wins ties.
                let a = y[2 * m].max(F::zero());
                let b = y[2 * m + 1].max(F::zero());
                if b > a {
                    out[m] = b;
                    flags[m] = true;
                } else {
                    out[m] = a;
                }
            }
        }
        (
            pooled,
            BlockCache {
                col,
                xhat,
                pre_relu,
                inv_std,
                pool_second,
                stats,
                len,
            },
        )
    }

    fn temporal_forward(
        &self,
        input: &ArrayView3<F>,
        mode: Mode,
        keep: bool,
    ) -> (Array2<F>, Vec<BlockCache<F>>) {
        let mut act = self.spatial_forward(input);
        let mut caches = Vec::new();
        for k in 0..self.config.blocks {
            let (next, cache) = self.block_forward(k, &act, self.config.block_len(k + 1), mode);
            act = next;
            if keep {
                caches.push(cache);
            }
        }
        (act, caches)
    }

    /// `(F, B·C·T̃)` map to `(B, F·C·T̃)` rows, one per sample.
    fn gather_features(cfg: &NetConfig, batch: usize, act: &Array2<F>) -> Array2<F> {
        let per = cfg.channels * cfg.reduced_len();
        let maps = act.nrows();
        let mut z = Array2::<F>::zeros((batch, maps * per));
        for b in 0..batch {
            for f in 0..maps {
                z.slice_mut(s![b, f * per..(f + 1) * per])
                    .assign(&act.slice(s![f, b * per..(b + 1) * per]));
            }
        }
        z
    }

    fn heads(&self, z: &ArrayView2<F>) -> (Array3<F>, Array3<F>) {
        let cfg = &self.config;
        let b = z.nrows();
        let mut loc = z.dot(&self.params.loc_head.weight.t());
        loc += &self.params.loc_head.bias;
        let mut cls = z.dot(&self.params.cls_head.weight.t());
        cls += &self.params.cls_head.bias;
        let loc = loc
            .into_shape_with_order((b, cfg.defaults, 2))
            .expect("contiguous");
        let mut probs = cls
            .into_shape_with_order((b, cfg.defaults, cfg.classes()))
            .expect("contiguous");
        softmax_groups(&mut probs);
        (loc, probs)
    }

    fn run(
        &self,
        input: ArrayView3<F>,
        mode: Mode,
        keep: bool,
    ) -> Result<(BatchOutput<F>, Option<ForwardCache<F>>)> {
        self.check_input(&input)?;
        let batch = input.dim().0;
        let (act, blocks) = self.temporal_forward(&input, mode, keep);
        let features = Self::gather_features(&self.config, batch, &act);
        let (loc, probs) = self.heads(&features.view());
        if loc.iter().chain(probs.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation("heads"));
        }
        let cache = keep.then(|| ForwardCache {
            generation: self.generation,
            mode,
            input: input.to_owned(),
            blocks,
            features,
            probs: probs.clone(),
        });
        Ok((BatchOutput { loc, probs }, cache))
    }

    /// Forward pass over a `(batch, channels, samples)` input, keeping what
    /// the backward pass needs.
    pub fn forward(
        &self,
        input: ArrayView3<F>,
        mode: Mode,
    ) -> Result<(BatchOutput<F>, ForwardCache<F>)> {
        let (out, cache) = self.run(input, mode, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    /// Eval-mode forward pass without a cache.
    pub fn infer(&self, input: ArrayView3<F>) -> Result<BatchOutput<F>> {
        Ok(self.run(input, Mode::Eval, false)?.0)
    }

    /// Output of the temporal blocks as `(batch, F, C, T̃)`.
    pub fn feature_map(&self, input: ArrayView3<F>, mode: Mode) -> Result<Array4<F>> {
        self.check_input(&input)?;
        let batch = input.dim().0;
        let (act, _) = self.temporal_forward(&input, mode, false);
        let (f, c, t) = self.config.feature_shape();
        let z = Self::gather_features(&self.config, batch, &act);
        Ok(z.into_shape_with_order((batch, f, c, t))
            .expect("contiguous"))
    }
}

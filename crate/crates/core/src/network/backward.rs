use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};

use super::forward::BlockCache;
use super::{real, BlockParams, DetectorModel, ForwardCache, Linear, Mode, Params, Real};
use crate::error::{Error, Result};

/// Gradients of a scalar loss with respect to every learnable tensor and,
/// on request, the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub params: Params<F>,
    pub input: Option<Array3<F>>,
}

/// Inverse of `im2col`: accumulates shifted taps back onto their source positions.
fn col2im<F: Real>(dcol: &Array2<F>, len: usize) -> Array2<F> {
    let maps = dcol.nrows() / 3;
    let width = dcol.ncols();
    let mut out = Array2::<F>::zeros((maps, width));
    for i in 0..maps {
        let mut dst = out.row_mut(i);
        let dst = dst.as_slice_mut().expect("contiguous");
        let left = dcol.row(3 * i);
        let mid = dcol.row(3 * i + 1);
        let right = dcol.row(3 * i + 2);
        let (left, mid, right) = (
            left.as_slice().expect("contiguous"),
            mid.as_slice().expect("contiguous"),
            right.as_slice().expect("contiguous"),
        );
        for r in (0..width).step_by(len) {
            for t in 0..len {
                let mut g = mid[r + t];
                if t + 1 < len {
                    g = g + left[r + t + 1];
                }
                if t > 0 {
                    g = g + right[r + t - 1];
                }
                dst[r + t] = g;
            }
        }
    }
    out
}

fn linear_grad<F: Real>(upstream: &Array2<F>, inputs: &Array2<F>) -> Linear<F> {
    Linear {
        weight: upstream.t().dot(inputs),
        bias: upstream.sum_axis(Axis(0)),
    }
}

impl<F: Real> DetectorModel<F> {
    /// Backpropagates gradients given with respect to the localisation
    /// outputs `(B, defaults, 2)` and the class probabilities `(B, defaults, L+1)`.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        grad_loc: ArrayView3<F>,
        grad_probs: ArrayView3<F>,
        want_input: bool,
    ) -> Result<Gradients<F>> {
        if grad_probs.dim() != cache.probs.dim() {
            return Err(Error::ShapeMismatch {
                expected: cache.probs.shape().to_vec(),
                actual: grad_probs.shape().to_vec(),
            });
        }
        // softmax Jacobian-vector product
        let mut grad_logits = Array3::<F>::zeros(cache.probs.dim());
        for ((p, g), mut out) in cache
            .probs
            .lanes(Axis(2))
            .into_iter()
            .zip(grad_probs.lanes(Axis(2)))
            .zip(grad_logits.lanes_mut(Axis(2)))
        {
            let dot: F = p.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
            for ((o, &pi), &gi) in out.iter_mut().zip(p.iter()).zip(g.iter()) {
                *o = pi * (gi - dot);
            }
        }
        self.backward_logits(cache, grad_loc, grad_logits.view(), want_input)
    }

    /// Same as [`DetectorModel::backward`] but with the class gradient taken
    /// with respect to the pre-softmax scores.
    pub fn backward_logits(
        &self,
        cache: &ForwardCache<F>,
        grad_loc: ArrayView3<F>,
        grad_logits: ArrayView3<F>,
        want_input: bool,
    ) -> Result<Gradients<F>> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache);
        }
        let cfg = &self.config;
        let batch = cache.input.dim().0;
        let expected_loc = (batch, cfg.defaults, 2);
        let expected_cls = (batch, cfg.defaults, cfg.classes());
        if grad_loc.dim() != expected_loc || grad_logits.dim() != expected_cls {
            return Err(Error::ShapeMismatch {
                expected: vec![batch, cfg.defaults, 2 + cfg.classes()],
                actual: vec![
                    grad_loc.dim().0,
                    grad_loc.dim().1,
                    grad_loc.dim().2 + grad_logits.dim().2,
                ],
            });
        }
        let g_loc = grad_loc
            .to_owned()
            .into_shape_with_order((batch, 2 * cfg.defaults))
            .expect("contiguous");
        let g_cls = grad_logits
            .to_owned()
            .into_shape_with_order((batch, cfg.classes() * cfg.defaults))
            .expect("contiguous");

        let loc_head = linear_grad(&g_loc, &cache.features);
        let cls_head = linear_grad(&g_cls, &cache.features);
        let mut dz = g_loc.dot(&self.params.loc_head.weight);
        general_mat_mul(
            F::one(),
            &g_cls,
            &self.params.cls_head.weight,
            F::one(),
            &mut dz,
        );

        // (B, F·C·T̃) rows back to the (F, B·C·T̃) block layout
        let per = cfg.channels * cfg.reduced_len();
        let maps = cfg.feature_maps();
        let mut dact = Array2::<F>::zeros((maps, batch * per));
        for b in 0..batch {
            for f in 0..maps {
                dact.slice_mut(s![f, b * per..(b + 1) * per])
                    .assign(&dz.slice(s![b, f * per..(f + 1) * per]));
            }
        }

        let need_first_input = want_input || self.params.spatial.is_some();
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for k in (0..cfg.blocks).rev() {
            let need = k > 0 || need_first_input;
            let (grads, dinput) = self.block_backward(k, &cache.blocks[k], &dact, cache.mode, need);
            blocks.push(grads);
            if let Some(d) = dinput {
                dact = d;
            }
        }
        blocks.reverse();

        let (b, c, t) = cache.input.dim();
        let mut spatial = None;
        let mut input = None;
        if need_first_input {
            let dfiltered = dact.into_shape_with_order((b, c, t)).expect("contiguous");
            match &self.params.spatial {
                None => input = Some(dfiltered),
                Some(lin) => {
                    let mut grad = Linear {
                        weight: Array2::<F>::zeros((c, c)),
                        bias: Array1::<F>::zeros(c),
                    };
                    let mut dx = Array3::<F>::zeros((b, c, t));
                    for ((x, dy), mut dxb) in cache
                        .input
                        .outer_iter()
                        .zip(dfiltered.outer_iter())
                        .zip(dx.outer_iter_mut())
                    {
                        general_mat_mul(F::one(), &dy, &x.t(), F::one(), &mut grad.weight);
                        grad.bias += &dy.sum_axis(Axis(1));
                        if want_input {
                            general_mat_mul(F::one(), &lin.weight.t(), &dy, F::zero(), &mut dxb);
                        }
                    }
                    spatial = Some(grad);
                    if want_input {
                        input = Some(dx);
                    }
                }
            }
        }

        Ok(Gradients {
            params: Params {
                spatial,
                blocks,
                loc_head,
                cls_head,
            },
            input,
        })
    }

    fn block_backward(
        &self,
        k: usize,
        cache: &BlockCache<F>,
        dpooled: &Array2<F>,
        mode: Mode,
        need_input: bool,
    ) -> (BlockParams<F>, Option<Array2<F>>) {
        let p = &self.params.blocks[k];
        let (maps, width) = cache.pre_relu.dim();
        let half = width / 2;

        // max-pool then ReLU: only the winning, positive element receives gradient
        let mut dy = Array2::<F>::zeros((maps, width));
        for o in 0..maps {
            let pre = cache.pre_relu.row(o);
            let up = dpooled.row(o);
            let mut row = dy.row_mut(o);
            for m in 0..half {
                let idx = 2 * m + cache.pool_second[o * half + m] as usize;
                if pre[idx] > F::zero() {
                    row[idx] = up[m];
                }
            }
        }

        let n = real::<F>(width as f64);
        let mut dgamma = Array1::<F>::zeros(maps);
        let mut dbeta = Array1::<F>::zeros(maps);
        let mut dz = dy;
        for o in 0..maps {
            let xhat = cache.xhat.row(o);
            let mut row = dz.row_mut(o);
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for (&g, &x) in row.iter().zip(xhat.iter()) {
                sum_dy = sum_dy + g;
                sum_dy_xhat = sum_dy_xhat + g * x;
            }
            dgamma[o] = sum_dy_xhat;
            dbeta[o] = sum_dy;
            let scale = p.gamma[o] * cache.inv_std[o];
            match mode {
                Mode::Train => {
                    let mean_dy = sum_dy / n;
                    let mean_dy_xhat = sum_dy_xhat / n;
                    for (g, &x) in row.iter_mut().zip(xhat.iter()) {
                        *g = scale * (*g - mean_dy - x * mean_dy_xhat);
                    }
                }
                Mode::Eval => row.mapv_inplace(|g| g * scale),
            }
        }

        let dweight = dz.dot(&cache.col.t());
        let dbias = dz.sum_axis(Axis(1));
        let dinput = need_input.then(|| {
            let dcol = p.conv.weight.t().dot(&dz);
            col2im(&dcol, cache.len)
        });
        (
            BlockParams {
                conv: Linear {
                    weight: dweight,
                    bias: dbias,
                },
                gamma: dgamma,
                beta: dbeta,
            },
            dinput,
        )
    }
}

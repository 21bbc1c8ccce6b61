//! Differentiable operations, defined as methods on [`Graph`].
//!
//! Convolution is im2col + GEMM. Batch norm follows the usual two-mode
//! contract: batch statistics (and queued running-stat updates) in training
//! mode, frozen running statistics in evaluation mode. Bilinear resampling
//! uses half-pixel-centered sampling so results agree with the image-space
//! resizer in [`crate::dataset`].

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView3, ArrayViewMut3, Axis, Zip};

use crate::error::{Error, Result};
use crate::nn::graph::{BackwardResult, Graph, Var};
use crate::nn::Scalar;

/// Batch-norm epsilon added to the variance before the square root.
pub const BN_EPS: f64 = 1e-5;
/// Fraction of the batch statistic blended into the running statistic.
pub const BN_MOMENTUM: f64 = 0.1;

/// Output extent of a convolution along one axis, or an error when the
/// (padded) input is smaller than the dilated kernel.
pub fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<usize> {
    let effective = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < effective {
        return Err(Error::validation(format!(
            "convolution kernel (effective extent {effective}) exceeds padded input {padded}"
        )));
    }
    Ok((padded - effective) / stride + 1)
}

/// Unfold one image (C×H×W) into a (C·kh·kw) × (ho·wo) patch matrix.
fn im2col<S: Scalar>(
    x: ArrayView3<S>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    ho: usize,
    wo: usize,
) -> Array2<S> {
    let (cin, h, w) = x.dim();
    let mut col = Array2::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let sy = (oy * stride + ky * dilation) as isize - padding as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let sx = (ox * stride + kx * dilation) as isize - padding as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x[[c, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Transpose of [`im2col`]: scatter-add patch-matrix gradients back onto the
/// image gradient.
fn col2im_add<S: Scalar>(
    col: &Array2<S>,
    mut dx: ArrayViewMut3<S>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    ho: usize,
    wo: usize,
) {
    let (cin, h, w) = dx.dim();
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let sy = (oy * stride + ky * dilation) as isize - padding as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let sx = (ox * stride + kx * dilation) as isize - padding as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dx[[c, sy as usize, sx as usize]] =
                            dx[[c, sy as usize, sx as usize]] + col[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}

/// Per-axis bilinear sampling plan: for each output index, the two source
/// indices and the interpolation weight of the second one.
fn bilinear_axis_plan<S: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, S)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let f = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = f.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, S::from_f64(f - i0 as f64))
        })
        .collect()
}

impl<S: Scalar> Graph<'_, S> {
    /// 2-D convolution with square hyperparameters shared by both axes.
    /// `weight_name` must refer to a (Cout, Cin, Kh, Kw) parameter; the
    /// optional bias is a (Cout,) parameter.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight_name: &str,
        bias_name: Option<&str>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let weight = self.param(weight_name)?;
        let wd = weight.shape();
        if wd.len() != 4 {
            return Err(Error::validation(format!(
                "parameter {weight_name} has rank {}, expected a 4-D convolution weight",
                wd.len()
            )));
        }
        let (cout, cin, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        let bias = match bias_name {
            Some(name) => Some(self.param(name)?),
            None => None,
        };
        let xv = self.rc_value(x);
        let (b, xc, h, w) = xv.dim();
        if xc != cin {
            return Err(Error::validation(format!(
                "conv {weight_name}: input has {xc} channels, weight expects {cin}"
            )));
        }
        let ho = conv_out_extent(h, kh, stride, padding, dilation)?;
        let wo = conv_out_extent(w, kw, stride, padding, dilation)?;

        let w2 = weight
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("weights are stored contiguously");
        let mut out = Array4::<S>::zeros((b, cout, ho, wo));
        for bi in 0..b {
            let col = im2col(xv.index_axis(Axis(0), bi), kh, kw, stride, padding, dilation, ho, wo);
            let mut o2 = out
                .index_axis_mut(Axis(0), bi)
                .into_shape_with_order((cout, ho * wo))
                .expect("fresh output is contiguous");
            general_mat_mul(S::one(), &w2, &col, S::zero(), &mut o2);
        }
        if let Some(bias) = &bias {
            for c in 0..cout {
                let bc = bias[[c]];
                out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bc);
            }
        }

        let weight_name = weight_name.to_owned();
        let bias_name = bias_name.map(str::to_owned);
        let weight_bw = Rc::clone(&weight);
        let backward = move |grad: &Array4<S>, parents: &[Rc<Array4<S>>]| {
            let xv = &parents[0];
            let (b, _, h, w) = xv.dim();
            let w2 = weight_bw
                .view()
                .into_shape_with_order((cout, cin * kh * kw))
                .expect("weights are stored contiguously");
            let mut dw2 = Array2::<S>::zeros((cout, cin * kh * kw));
            let mut dx = Array4::<S>::zeros(xv.dim());
            for bi in 0..b {
                let col =
                    im2col(xv.index_axis(Axis(0), bi), kh, kw, stride, padding, dilation, ho, wo);
                let g2 = grad
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((cout, ho * wo))
                    .expect("gradient is contiguous");
                general_mat_mul(S::one(), &g2, &col.t(), S::one(), &mut dw2);
                let mut dcol = Array2::<S>::zeros((cin * kh * kw, ho * wo));
                general_mat_mul(S::one(), &w2.t(), &g2, S::zero(), &mut dcol);
                col2im_add(
                    &dcol,
                    dx.index_axis_mut(Axis(0), bi),
                    kh,
                    kw,
                    stride,
                    padding,
                    dilation,
                    ho,
                    wo,
                );
            }
            let _ = (h, w);
            let mut param_grads = vec![(
                weight_name.clone(),
                dw2.into_shape_with_order((cout, cin, kh, kw))
                    .expect("weight gradient is contiguous")
                    .into_dyn(),
            )];
            if let Some(bias_name) = &bias_name {
                let db = grad.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                param_grads.push((bias_name.clone(), db.into_dyn()));
            }
            BackwardResult {
                parent_grads: vec![dx],
                param_grads,
            }
        };
        Ok(self.push(out, vec![x.0], Some(Box::new(backward))))
    }

    /// Batch normalization over (batch, height, width) per channel, using
    /// `{prefix}.gamma` / `{prefix}.beta` parameters and
    /// `{prefix}.running_mean` / `{prefix}.running_var` buffers.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let xv = self.rc_value(x);
        let (b, c, h, w) = xv.dim();
        if gamma.len() != c {
            return Err(Error::validation(format!(
                "batch norm {prefix}: input has {c} channels, parameters have {}",
                gamma.len()
            )));
        }
        let eps = S::from_f64(BN_EPS);
        let as_bcast = |v: &ndarray::ArrayD<S>| {
            v.view()
                .into_shape_with_order((1, c, 1, 1))
                .expect("per-channel tensors are contiguous")
                .to_owned()
        };

        if !self.training() {
            let rm = as_bcast(self.buffer(&format!("{prefix}.running_mean"))?);
            let rv = self.buffer(&format!("{prefix}.running_var"))?;
            let inv_std = as_bcast(&rv.mapv(|v| S::one() / (v + eps).sqrt()));
            let y = (&*xv - &rm) * &inv_std * &as_bcast(&gamma) + &as_bcast(&beta);
            return Ok(self.push(y, vec![x.0], None));
        }

        let n = S::from_f64((b * h * w) as f64);
        let mean: Array1<S> =
            xv.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)) / n;
        let mean4 = mean
            .view()
            .into_shape_with_order((1, c, 1, 1))
            .expect("contiguous")
            .to_owned();
        let centered = &*xv - &mean4;
        let var: Array1<S> = centered
            .mapv(|v| v * v)
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .sum_axis(Axis(0))
            / n;
        let inv_std = var.mapv(|v| S::one() / (v + eps).sqrt());
        let inv_std4 = inv_std
            .view()
            .into_shape_with_order((1, c, 1, 1))
            .expect("contiguous")
            .to_owned();
        let xhat = &centered * &inv_std4;
        let y = &xhat * &as_bcast(&gamma) + &as_bcast(&beta);

        // Blend batch statistics into the running estimates; the trainer
        // applies these once the step commits.
        let mom = S::from_f64(BN_MOMENTUM);
        let keep = S::one() - mom;
        let rm = self.buffer(&format!("{prefix}.running_mean"))?;
        let rv = self.buffer(&format!("{prefix}.running_var"))?;
        let new_rm = rm.mapv(|v| v * keep) + mean.view().into_dyn().mapv(|v| v * mom);
        let new_rv = rv.mapv(|v| v * keep) + var.view().into_dyn().mapv(|v| v * mom);
        self.queue_buffer_update(format!("{prefix}.running_mean"), new_rm);
        self.queue_buffer_update(format!("{prefix}.running_var"), new_rv);

        let prefix = prefix.to_owned();
        let gamma_bw = Rc::clone(&gamma);
        let backward = move |grad: &Array4<S>, parents: &[Rc<Array4<S>>]| {
            let xv = &parents[0];
            let (b, c, h, w) = xv.dim();
            let n = S::from_f64((b * h * w) as f64);
            let reduce =
                |a: &Array4<S>| -> Array1<S> { a.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)) };
            let bcast = |v: &Array1<S>| {
                v.view()
                    .into_shape_with_order((1, c, 1, 1))
                    .expect("contiguous")
                    .to_owned()
            };
            let mean4 = bcast(&mean);
            let inv_std4 = bcast(&inv_std);
            let centered = &**xv - &mean4;
            let xhat = &centered * &inv_std4;

            let dbeta = reduce(grad);
            let dgamma = reduce(&(&xhat * grad));

            let gamma1 = gamma_bw
                .view()
                .into_shape_with_order(c)
                .expect("contiguous")
                .to_owned();
            let dxhat = grad * &bcast(&gamma1);
            let half = S::from_f64(0.5);
            let two = S::from_f64(2.0);
            let dvar = reduce(&(&dxhat * &centered))
                .iter()
                .zip(inv_std.iter())
                .map(|(&s, &is)| -half * s * is * is * is)
                .collect::<Array1<S>>();
            let sum_dxhat = reduce(&dxhat);
            let sum_centered = reduce(&centered);
            let dmean = sum_dxhat
                .iter()
                .zip(inv_std.iter())
                .zip(dvar.iter().zip(sum_centered.iter()))
                .map(|((&sd, &is), (&dv, &sc))| -sd * is - dv * two * sc / n)
                .collect::<Array1<S>>();
            let dx = &dxhat * &inv_std4
                + &centered * &bcast(&dvar.mapv(|v| v * two / n))
                + &bcast(&dmean.mapv(|v| v / n));

            BackwardResult {
                parent_grads: vec![dx],
                param_grads: vec![
                    (format!("{prefix}.gamma"), dgamma.into_dyn()),
                    (format!("{prefix}.beta"), dbeta.into_dyn()),
                ],
            }
        };
        Ok(self.push(y, vec![x.0], Some(Box::new(backward))))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(S::zero()));
        let backward = move |grad: &Array4<S>, parents: &[Rc<Array4<S>>]| {
            let mut dx = grad.clone();
            Zip::from(&mut dx).and(&*parents[0]).for_each(|g, &v| {
                if v <= S::zero() {
                    *g = S::zero();
                }
            });
            BackwardResult {
                parent_grads: vec![dx],
                param_grads: vec![],
            }
        };
        self.push(y, vec![x.0], Some(Box::new(backward)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).dim() != self.value(b).dim() {
            return Err(Error::validation(format!(
                "add: shape mismatch {:?} vs {:?}",
                self.value(a).dim(),
                self.value(b).dim()
            )));
        }
        let y = self.value(a) + self.value(b);
        let backward = move |grad: &Array4<S>, _: &[Rc<Array4<S>>]| BackwardResult {
            parent_grads: vec![grad.clone(), grad.clone()],
            param_grads: vec![],
        };
        Ok(self.push(y, vec![a.0, b.0], Some(Box::new(backward))))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::validation("concat of zero inputs"));
        }
        let views: Vec<_> = inputs.iter().map(|&v| self.value(v).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::validation(format!("concat: {e}")))?;
        let channels: Vec<usize> = inputs.iter().map(|&v| self.value(v).dim().1).collect();
        let backward = move |grad: &Array4<S>, _: &[Rc<Array4<S>>]| {
            let mut parent_grads = Vec::with_capacity(channels.len());
            let mut offset = 0;
            for &c in &channels {
                parent_grads.push(
                    grad.slice(ndarray::s![.., offset..offset + c, .., ..])
                        .to_owned(),
                );
                offset += c;
            }
            BackwardResult {
                parent_grads,
                param_grads: vec![],
            }
        };
        Ok(self.push(y, inputs.iter().map(|v| v.0).collect(), Some(Box::new(backward))))
    }

    /// Bilinear resize to `oh`×`ow` (half-pixel centers, clamped borders).
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dim();
        let ys = bilinear_axis_plan::<S>(h, oh);
        let xs = bilinear_axis_plan::<S>(w, ow);
        let mut y = Array4::<S>::zeros((b, c, oh, ow));
        for bi in 0..b {
            for ci in 0..c {
                for (oy, &(y0, y1, dy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, dx)) in xs.iter().enumerate() {
                        let one = S::one();
                        y[[bi, ci, oy, ox]] = xv[[bi, ci, y0, x0]] * (one - dy) * (one - dx)
                            + xv[[bi, ci, y0, x1]] * (one - dy) * dx
                            + xv[[bi, ci, y1, x0]] * dy * (one - dx)
                            + xv[[bi, ci, y1, x1]] * dy * dx;
                    }
                }
            }
        }
        let backward = move |grad: &Array4<S>, parents: &[Rc<Array4<S>>]| {
            let (b, c, _, _) = parents[0].dim();
            let mut dx = Array4::<S>::zeros(parents[0].dim());
            for bi in 0..b {
                for ci in 0..c {
                    for (oy, &(y0, y1, dy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, dxw)) in xs.iter().enumerate() {
                            let g = grad[[bi, ci, oy, ox]];
                            let one = S::one();
                            dx[[bi, ci, y0, x0]] =
                                dx[[bi, ci, y0, x0]] + g * (one - dy) * (one - dxw);
                            dx[[bi, ci, y0, x1]] = dx[[bi, ci, y0, x1]] + g * (one - dy) * dxw;
                            dx[[bi, ci, y1, x0]] = dx[[bi, ci, y1, x0]] + g * dy * (one - dxw);
                            dx[[bi, ci, y1, x1]] = dx[[bi, ci, y1, x1]] + g * dy * dxw;
                        }
                    }
                }
            }
            BackwardResult {
                parent_grads: vec![dx],
                param_grads: vec![],
            }
        };
        self.push(y, vec![x.0], Some(Box::new(backward)))
    }

    /// Mean over the spatial extent, producing B×C×1×1.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dim();
        let n = S::from_f64((h * w) as f64);
        let mut y = Array4::<S>::zeros((b, c, 1, 1));
        for bi in 0..b {
            for ci in 0..c {
                let mut acc = S::zero();
                for yy in 0..h {
                    for xx in 0..w {
                        acc = acc + xv[[bi, ci, yy, xx]];
                    }
                }
                y[[bi, ci, 0, 0]] = acc / n;
            }
        }
        let backward = move |grad: &Array4<S>, parents: &[Rc<Array4<S>>]| {
            let dim = parents[0].dim();
            let (b, c, h, w) = dim;
            let n = S::from_f64((h * w) as f64);
            let mut dx = Array4::<S>::zeros(dim);
            for bi in 0..b {
                for ci in 0..c {
                    let g = grad[[bi, ci, 0, 0]] / n;
                    for yy in 0..h {
                        for xx in 0..w {
                            dx[[bi, ci, yy, xx]] = g;
                        }
                    }
                }
            }
            BackwardResult {
                parent_grads: vec![dx],
                param_grads: vec![],
            }
        };
        self.push(y, vec![x.0], Some(Box::new(backward)))
    }
}

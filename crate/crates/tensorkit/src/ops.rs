//! Elementwise, reduction and normalization operations.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, RunningStatUpdate, Var};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::shape::{Shape, SCALAR};

/// Running statistics consulted (eval) or updated (train) by a batch-norm.
#[derive(Clone, Copy, Debug)]
pub struct BnRunning<'a, T> {
    pub mean: &'a [T],
    pub var: &'a [T],
    pub mean_id: ParamId,
    pub var_id: ParamId,
}

pub const BN_EPS: f64 = 1e-8;

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(TensorError::Shape { op, detail: format!("{a:?} vs {b:?}") });
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    /// Per-channel normalization over the batch and both spatial axes,
    /// followed by the affine map `gamma * xhat + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: BnRunning<'_, T>) -> Result<Var> {
        let shape = self.shape(x);
        let c = shape[3];
        for p in [gamma, beta] {
            if self.shape(p) != [1, 1, 1, c] {
                return Err(TensorError::Shape {
                    op: "batch_norm",
                    detail: format!("affine parameter {:?} does not match {c} channels", self.shape(p)),
                });
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(TensorError::Shape { op: "batch_norm", detail: "running statistics length".into() });
        }
        let xv = self.value(x);
        let m = xv.len() / c;
        let eps = T::of(BN_EPS);
        let train = self.mode() == crate::graph::Mode::Train;
        let (mean, var) = if train {
            if m < 2 {
                return Err(TensorError::Shape {
                    op: "batch_norm",
                    detail: "train mode needs at least two positions per channel".into(),
                });
            }
            let mut mean = vec![T::zero(); c];
            for row in xv.chunks_exact(c) {
                for (a, &v) in mean.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let inv_m = T::one() / T::of(m as f64);
            mean.iter_mut().for_each(|v| *v *= inv_m);
            let mut var = vec![T::zero(); c];
            for row in xv.chunks_exact(c) {
                for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                    *a += (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_m);
            (mean, var)
        } else {
            (running.mean.to_vec(), running.var.to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ((xr, hr), or) in xv.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)) {
            for k in 0..c {
                let h = (xr[k] - mean[k]) * inv_std[k];
                hr[k] = h;
                or[k] = g[k] * h + b[k];
            }
        }
        if train {
            let unbias = T::of(m as f64 / (m as f64 - 1.0));
            self.stat_updates.push(RunningStatUpdate {
                mean_id: running.mean_id,
                var_id: running.var_id,
                batch_mean: mean,
                batch_var: var.iter().map(|&v| v * unbias).collect(),
            });
        }
        let (xhat, inv_std) = if self.is_recording() { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push_op(out, shape, &[x, gamma, beta], Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn batch_norm_backward(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        train: bool,
        gout: &[T],
    ) {
        let c = inv_std.len();
        let m = gout.len() / c;
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gh = vec![T::zero(); c];
        for (gr, hr) in gout.chunks_exact(c).zip(xhat.chunks_exact(c)) {
            for k in 0..c {
                sum_g[k] += gr[k];
                sum_gh[k] += gr[k] * hr[k];
            }
        }
        if self.requires_grad(x) {
            let g = self.value(gamma);
            let mut gx = vec![T::zero(); gout.len()];
            if train {
                let inv_m = T::one() / T::of(m as f64);
                for ((dr, gr), hr) in gx.chunks_exact_mut(c).zip(gout.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                    for k in 0..c {
                        dr[k] = g[k] * inv_std[k] * (gr[k] - inv_m * (sum_g[k] + hr[k] * sum_gh[k]));
                    }
                }
            } else {
                for (dr, gr) in gx.chunks_exact_mut(c).zip(gout.chunks_exact(c)) {
                    for k in 0..c {
                        dr[k] = g[k] * inv_std[k] * gr[k];
                    }
                }
            }
            self.accumulate(x, gx);
        }
        if self.requires_grad(gamma) {
            self.accumulate(gamma, sum_gh);
        }
        if self.requires_grad(beta) {
            self.accumulate(beta, sum_g);
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        if self.track_kinks {
            // FNV-1a over the sign pattern.
            let mut h = self.kink_signature ^ 0xcbf2_9ce4_8422_2325;
            for &v in xv {
                h ^= (v > T::zero()) as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            self.kink_signature = h;
        }
        let out = xv.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = self.shape(x);
        self.push_op(out, shape, &[x], Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a);
        Ok(self.push_op(out, shape, &[a, b], Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a);
        Ok(self.push_op(out, shape, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x);
        self.push_op(out, shape, &[x], Op::Scale { x, factor })
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push_op(vec![s], SCALAR, &[x], Op::Sum { x })
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Usage("concat of zero tensors".into()));
        };
        let [n, h, w, _] = self.shape(first);
        let mut c_total = 0;
        for &p in parts {
            let [pn, ph, pw, pc] = self.shape(p);
            if (pn, ph, pw) != (n, h, w) {
                return Err(TensorError::Shape {
                    op: "concat",
                    detail: format!("{:?} vs {:?}", self.shape(first), self.shape(p)),
                });
            }
            c_total += pc;
        }
        let positions = n * h * w;
        let mut out = vec![T::zero(); positions * c_total];
        let mut ofs = 0;
        for &p in parts {
            let pc = self.shape(p)[3];
            let pv = self.value(p);
            for pos in 0..positions {
                out[pos * c_total + ofs..][..pc].copy_from_slice(&pv[pos * pc..][..pc]);
            }
            ofs += pc;
        }
        Ok(self.push_op(out, [n, h, w, c_total], parts, Op::Concat { parts: parts.to_vec() }))
    }

    pub(crate) fn concat_backward(&mut self, node: usize, parts: &[Var], gout: &[T]) {
        let [n, h, w, c_total] = self.nodes[node].shape;
        let positions = n * h * w;
        let mut ofs = 0;
        for &p in parts {
            let pc = self.shape(p)[3];
            if self.requires_grad(p) {
                let mut gp = vec![T::zero(); positions * pc];
                for pos in 0..positions {
                    gp[pos * pc..][..pc].copy_from_slice(&gout[pos * c_total + ofs..][..pc]);
                }
                self.accumulate(p, gp);
            }
            ofs += pc;
        }
    }

    /// Row lookup into a `[K, 1, 1, C]` table. The output has shape
    /// `out_shape`, whose leading three axes must hold `indices.len()`
    /// positions and whose channel count must equal `C`.
    pub fn gather(&mut self, table: Var, indices: &[u32], out_shape: Shape) -> Result<Var> {
        let [k, one_a, one_b, c] = self.shape(table);
        if one_a != 1 || one_b != 1 || out_shape[3] != c || out_shape[0] * out_shape[1] * out_shape[2] != indices.len()
        {
            return Err(TensorError::Shape {
                op: "gather",
                detail: format!("table {:?}, {} indices, output {out_shape:?}", self.shape(table), indices.len()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= k) {
            return Err(TensorError::Shape { op: "gather", detail: format!("index {bad} outside table of {k} rows") });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&tv[i as usize * c..][..c]);
        }
        Ok(self.push_op(out, out_shape, &[table], Op::Gather { table, indices: indices.to_vec() }))
    }

    /// Weighted mean binary cross-entropy in nats, computed from logits.
    /// Elements with zero weight are ignored. Logits are clipped to
    /// `[-clip, clip]`; the gradient is zero outside that range.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T], weights: &[T], clip: T) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n || weights.len() != n {
            return Err(TensorError::Shape {
                op: "bce_with_logits",
                detail: format!("{n} logits, {} targets, {} weights", targets.len(), weights.len()),
            });
        }
        let mut total_weight: T = weights.iter().copied().sum();
        if total_weight <= T::zero() {
            total_weight = T::one();
        }
        let lv = self.value(logits);
        let mut acc = T::zero();
        for ((&l, &t), &w) in lv.iter().zip(targets).zip(weights) {
            if w == T::zero() {
                continue;
            }
            let l = l.max(-clip).min(clip);
            let loss = l.max(T::zero()) - l * t + (-l.abs()).exp().ln_1p();
            acc += w * loss;
        }
        let value = vec![acc / total_weight];
        Ok(self.push_op(
            value,
            SCALAR,
            &[logits],
            Op::Bce { logits, targets: targets.to_vec(), weights: weights.to_vec(), total_weight, clip },
        ))
    }
}

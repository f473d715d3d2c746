use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Batch statistics produced by a train-mode pass: per-channel mean and
/// unbiased variance, ready to be folded into running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

struct BnTrainOp<F> {
    mean: Vec<F>,
    invstd: Vec<F>,
    channels: usize,
    spatial: usize,
}

impl<F: Float> Backward<F> for BnTrainOp<F> {
    fn name(&self) -> &'static str {
        "batchnorm3d(train)"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> {
        let x = ctx.inputs[0].data();
        let gamma = ctx.inputs[1].data();
        let g = ctx.grad;
        let (c, sp) = (self.channels, self.spatial);
        let batch = x.len() / (c * sp);
        let m = F::of((batch * sp) as f64);
        let mut sum_g = vec![F::zero(); c];
        let mut sum_gx = vec![F::zero(); c];
        for n in 0..batch {
            for ch in 0..c {
                let off = (n * c + ch) * sp;
                let (mu, inv) = (self.mean[ch], self.invstd[ch]);
                let (mut sg, mut sgx) = (F::zero(), F::zero());
                for i in off..off + sp {
                    sg += g[i];
                    sgx += g[i] * (x[i] - mu) * inv;
                }
                sum_g[ch] += sg;
                sum_gx[ch] += sgx;
            }
        }
        let gx = ctx.needs[0].then(|| {
            let mut gx = vec![F::zero(); x.len()];
            for n in 0..batch {
                for ch in 0..c {
                    let off = (n * c + ch) * sp;
                    let (mu, inv) = (self.mean[ch], self.invstd[ch]);
                    let k = gamma[ch] * inv / m;
                    for i in off..off + sp {
                        let xhat = (x[i] - mu) * inv;
                        gx[i] = k * (m * g[i] - sum_g[ch] - xhat * sum_gx[ch]);
                    }
                }
            }
            gx
        });
        vec![gx, ctx.needs[1].then_some(sum_gx), ctx.needs[2].then_some(sum_g)]
    }
}

struct BnEvalOp<F> {
    mean: Vec<F>,
    invstd: Vec<F>,
    channels: usize,
    spatial: usize,
}

impl<F: Float> Backward<F> for BnEvalOp<F> {
    fn name(&self) -> &'static str {
        "batchnorm3d(eval)"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> {
        let x = ctx.inputs[0].data();
        let gamma = ctx.inputs[1].data();
        let g = ctx.grad;
        let (c, sp) = (self.channels, self.spatial);
        let batch = x.len() / (c * sp);
        let mut gx = ctx.needs[0].then(|| vec![F::zero(); x.len()]);
        let mut gg = vec![F::zero(); c];
        let mut gb = vec![F::zero(); c];
        for n in 0..batch {
            for ch in 0..c {
                let off = (n * c + ch) * sp;
                let (mu, inv) = (self.mean[ch], self.invstd[ch]);
                let k = gamma[ch] * inv;
                for i in off..off + sp {
                    gb[ch] += g[i];
                    gg[ch] += g[i] * (x[i] - mu) * inv;
                    if let Some(gx) = gx.as_mut() {
                        gx[i] = g[i] * k;
                    }
                }
            }
        }
        vec![gx, ctx.needs[1].then_some(gg), ctx.needs[2].then_some(gb)]
    }
}

fn check<F: Float>(tape: &Tape<F>, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
    let s = tape.shape(x);
    if s.len() < 2 {
        return Err(Error::invalid("batchnorm3d", format!("need (N, C, ...), got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let sp: usize = s[2..].iter().product();
    for p in [gamma, beta] {
        if tape.shape(p) != [c] {
            return Err(Error::shape("batchnorm3d affine", &[c], tape.shape(p)));
        }
    }
    Ok((n, c, sp))
}

impl<F: Float> Tape<F> {
    /// Normalize with per-channel batch statistics. Returns the output and the
    /// statistics needed to update running estimates.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<F>)> {
        let (n, c, sp) = check(self, x, gamma, beta)?;
        let count = n * sp;
        if count < 2 {
            return Err(Error::invalid(
                "batchnorm3d",
                format!("train mode needs at least 2 values per channel, got {count}"),
            ));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        let mut m2 = vec![0.0f64; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * sp;
                mean[ch] += xv[off..off + sp].iter().map(|v| v.f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * sp;
                let mu = mean[ch];
                m2[ch] += xv[off..off + sp]
                    .iter()
                    .map(|v| {
                        let d = v.f64() - mu;
                        d * d
                    })
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = m2.iter().map(|s| s / count as f64).collect();
        let invstd: Vec<F> = biased.iter().map(|v| F::of(1.0 / (v + eps).sqrt())).collect();
        let mean_f: Vec<F> = mean.iter().map(|&m| F::of(m)).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![F::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * sp;
                let (mu, inv, ga, be) = (mean_f[ch], invstd[ch], gv[ch], bv[ch]);
                for i in off..off + sp {
                    out[i] = (xv[i] - mu) * inv * ga + be;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let stats = BatchStats {
            mean: mean_f.clone(),
            var: m2.iter().map(|s| F::of(s / (count - 1) as f64)).collect(),
        };
        let out = Tensor::from_vec(&shape, out)?;
        let op = BnTrainOp {
            mean: mean_f,
            invstd,
            channels: c,
            spatial: sp,
        };
        Ok((self.push(out, &[x, gamma, beta], Box::new(op)), stats))
    }

    /// Normalize with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, sp) = check(self, x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batchnorm3d running stats", &[c], &[running_mean.len()]));
        }
        let invstd: Vec<F> = running_var
            .iter()
            .map(|v| F::of(1.0 / (v.f64() + eps).sqrt()))
            .collect();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![F::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * sp;
                let (mu, inv, ga, be) = (running_mean[ch], invstd[ch], gv[ch], bv[ch]);
                for i in off..off + sp {
                    out[i] = (xv[i] - mu) * inv * ga + be;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let out = Tensor::from_vec(&shape, out)?;
        let op = BnEvalOp {
            mean: running_mean.to_vec(),
            invstd,
            channels: c,
            spatial: sp,
        };
        Ok(self.push(out, &[x, gamma, beta], Box::new(op)))
    }
}

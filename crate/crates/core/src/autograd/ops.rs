//! Elementwise, activation, reduction and dense primitives.

use super::tape::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Mul,
}

/// `b` either matches `a` or has a leading batch axis of 1 that is repeated.
fn broadcast_check(op: &'static str, a: &[usize], b: &[usize]) -> Result<bool> {
    if a == b {
        return Ok(false);
    }
    if a.len() == b.len() && !a.is_empty() && b[0] == 1 && a[1..] == b[1..] {
        return Ok(true);
    }
    Err(Error::shape(op, a, b))
}

/// Sum a batch-repeated gradient back onto a batch-1 operand.
fn reduce_batch<F: Float>(g: Vec<F>, per: usize) -> Vec<F> {
    if per == g.len() {
        return g;
    }
    let mut out = vec![F::zero(); per];
    for chunk in g.chunks(per) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += *v);
    }
    out
}

struct BinaryOp {
    kind: BinaryKind,
}

impl<F: Float> Backward<F> for BinaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let per = b.len();
        let g = ctx.grad;
        match self.kind {
            BinaryKind::Add => vec![
                ctx.needs[0].then(|| g.to_vec()),
                ctx.needs[1].then(|| reduce_batch(g.to_vec(), per)),
            ],
            BinaryKind::Mul => vec![
                ctx.needs[0].then(|| g.iter().enumerate().map(|(i, &gv)| gv * b[i % per]).collect()),
                ctx.needs[1].then(|| {
                    let full: Vec<F> = g.iter().zip(a).map(|(&gv, &av)| gv * av).collect();
                    reduce_batch(full, per)
                }),
            ],
        }
    }
}

/// `(1 + mask) * trunk`.
struct ResidualGateOp;

impl<F: Float> Backward<F> for ResidualGateOp {
    fn name(&self) -> &'static str {
        "residual_gate"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> {
        let (m, t) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.grad;
        vec![
            ctx.needs[0].then(|| g.iter().zip(t).map(|(&gv, &tv)| gv * tv).collect()),
            ctx.needs[1].then(|| g.iter().zip(m).map(|(&gv, &mv)| gv * (F::one() + mv)).collect()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

struct ActivationOp(Activation);

impl<F: Float> Backward<F> for ActivationOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> {
        let g = ctx.grad;
        let out = ctx.output.data();
        let gx = match self.0 {
            Activation::Relu => g
                .iter()
                .zip(out)
                .map(|(&gv, &y)| if y > F::zero() { gv } else { F::zero() })
                .collect(),
            Activation::Sigmoid => g.iter().zip(out).map(|(&gv, &y)| gv * y * (F::one() - y)).collect(),
        };
        vec![Some(gx)]
    }
}

pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

struct ConcatOp {
    channels: Vec<usize>,
}

impl<F: Float> Backward<F> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> {
        let shape = ctx.output.shape();
        let batch = shape[0];
        let spatial: usize = shape[2..].iter().product();
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for (i, &c) in self.channels.iter().enumerate() {
            if ctx.needs[i] {
                let mut g = Vec::with_capacity(batch * c * spatial);
                for n in 0..batch {
                    let start = (n * total + offset) * spatial;
                    g.extend_from_slice(&ctx.grad[start..start + c * spatial]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

struct GapOp {
    spatial: usize,
}

impl<F: Float> Backward<F> for GapOp {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> {
        let scale = F::one() / F::of(self.spatial as f64);
        let mut g = Vec::with_capacity(ctx.grad.len() * self.spatial);
        for &gv in ctx.grad {
            let v = gv * scale;
            g.extend(std::iter::repeat_n(v, self.spatial));
        }
        vec![Some(g)]
    }
}

struct LinearOp {
    batch: usize,
    inp: usize,
    out: usize,
}

impl<F: Float> Backward<F> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> {
        let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.grad;
        let (n, i, o) = (self.batch, self.inp, self.out);
        let gx = ctx.needs[0].then(|| {
            let mut gx = vec![F::zero(); n * i];
            matmul(n, o, i, g, false, w, false, F::zero(), &mut gx);
            gx
        });
        let gw = ctx.needs[1].then(|| {
            let mut gw = vec![F::zero(); o * i];
            matmul(o, n, i, g, true, x, false, F::zero(), &mut gw);
            gw
        });
        let mut res = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            res.push(ctx.needs[2].then(|| {
                let mut gb = vec![F::zero(); o];
                for row in g.chunks(o) {
                    gb.iter_mut().zip(row).for_each(|(b, v)| *b += *v);
                }
                gb
            }));
        }
        res
    }
}

struct SumOp {
    scale: f64,
}

impl<F: Float> Backward<F> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> {
        let v = ctx.grad[0] * F::of(self.scale);
        vec![Some(vec![v; ctx.inputs[0].numel()])]
    }
}

/// Mean binary cross-entropy of logits against fixed labels.
struct BceLogitsOp {
    labels: Vec<f64>,
}

impl<F: Float> Backward<F> for BceLogitsOp {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> {
        let n = F::of(self.labels.len() as f64);
        let g = ctx.grad[0];
        let gz = ctx.inputs[0]
            .data()
            .iter()
            .zip(&self.labels)
            .map(|(&z, &y)| (sigmoid(z) - F::of(y)) / n * g)
            .collect();
        vec![Some(gz)]
    }
}

/// Numerically stable `max(z,0) - z*y + ln(1 + e^-|z|)`.
pub fn bce_logit_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl<F: Float> Tape<F> {
    pub fn elementwise(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let op = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Mul => "mul",
        };
        broadcast_check(op, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let per = bv.numel();
        let bd = bv.data();
        let data: Vec<F> = match kind {
            BinaryKind::Add => av.data().iter().enumerate().map(|(i, &x)| x + bd[i % per]).collect(),
            BinaryKind::Mul => av.data().iter().enumerate().map(|(i, &x)| x * bd[i % per]).collect(),
        };
        let out = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(out, &[a, b], Box::new(BinaryOp { kind })))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Mul, a, b)
    }

    /// `(1 + mask) * trunk`; shapes must match exactly.
    pub fn residual_gate(&mut self, mask: Var, trunk: Var) -> Result<Var> {
        if self.shape(mask) != self.shape(trunk) {
            return Err(Error::shape("residual_gate", self.shape(mask), self.shape(trunk)));
        }
        let (m, t) = (self.value(mask), self.value(trunk));
        let data = m
            .data()
            .iter()
            .zip(t.data())
            .map(|(&mv, &tv)| (F::one() + mv) * tv)
            .collect();
        let out = Tensor::from_vec(t.shape(), data)?;
        Ok(self.push(out, &[mask, trunk], Box::new(ResidualGateOp)))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let out = match kind {
            Activation::Relu => self.value(x).map(|v| v.max(F::zero())),
            Activation::Sigmoid => self.value(x).map(sigmoid),
        };
        self.push(out, &[x], Box::new(ActivationOp(kind)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    /// Concatenate along axis 1. All other extents must agree.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "empty input list"))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(Error::invalid("concat_channels", "inputs need a channel axis"));
        }
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::shape("concat_channels", &base, s));
            }
            channels.push(s[1]);
        }
        let batch = base[0];
        let spatial: usize = base[2..].iter().product();
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(batch * total * spatial);
        for n in 0..batch {
            for (&x, &c) in xs.iter().zip(&channels) {
                let src = self.value(x).data();
                data.extend_from_slice(&src[n * c * spatial..(n + 1) * c * spatial]);
            }
        }
        let mut shape = base;
        shape[1] = total;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, xs, Box::new(ConcatOp { channels })))
    }

    /// Mean over all axes after the channel axis: `(N, C, ...) -> (N, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::invalid(
                "global_avg_pool",
                format!("need spatial axes, got {s:?}"),
            ));
        }
        let spatial: usize = s[2..].iter().product();
        if spatial == 0 {
            return Err(Error::invalid("global_avg_pool", "empty spatial extent"));
        }
        let scale = F::one() / F::of(spatial as f64);
        let data = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|c| c.iter().copied().sum::<F>() * scale)
            .collect();
        let out = Tensor::from_vec(&s[..2], data)?;
        Ok(self.push(out, &[x], Box::new(GapOp { spatial })))
    }

    /// `x · wᵀ + b` with `x: (N, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut data = vec![F::zero(); n * o];
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [o] {
                return Err(Error::shape("linear bias", &[o], bs));
            }
            let bias = self.value(b).data();
            for row in data.chunks_mut(o) {
                row.copy_from_slice(bias);
            }
        }
        matmul(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            F::one(),
            &mut data,
        );
        let out = Tensor::from_vec(&[n, o], data)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            out,
            &parents,
            Box::new(LinearOp {
                batch: n,
                inp: i,
                out: o,
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[x], Box::new(SumOp { scale: 1.0 }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s: F = self.value(x).data().iter().copied().sum::<F>() / F::of(n);
        self.push(Tensor::scalar(s), &[x], Box::new(SumOp { scale: 1.0 / n }))
    }

    /// Mean BCE of `logits` (one per batch element) against binary `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != labels.len() || labels.is_empty() {
            return Err(Error::shape("bce_with_logits", z.shape(), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Data(format!("label {bad} is not in {{0, 1}}")));
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(labels)
            .map(|(&zv, &y)| bce_logit_term(zv.f64(), y))
            .sum();
        let loss = Tensor::scalar(F::of(total / labels.len() as f64));
        Ok(self.push(
            loss,
            &[logits],
            Box::new(BceLogitsOp {
                labels: labels.to_vec(),
            }),
        ))
    }
}

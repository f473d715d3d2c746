use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// One output sample along an axis: blend `lo` and `hi` with weight `frac` on `hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Linear interpolation taps mapping `input` samples onto `output` samples with
/// the half-pixel (align-corners-false) convention.
pub fn linear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Resample `planes` contiguous 3-D grids with separable trilinear taps.
pub(crate) fn trilinear<F: Float>(src: &[F], planes: usize, input: [usize; 3], taps: &[Vec<Tap>; 3]) -> Vec<F> {
    let [_, h, w] = input;
    let out_dims = [taps[0].len(), taps[1].len(), taps[2].len()];
    let in_len: usize = input.iter().product();
    let out_len: usize = out_dims.iter().product();
    let mut out = Vec::with_capacity(planes * out_len);
    for p in 0..planes {
        let base = &src[p * in_len..(p + 1) * in_len];
        for tz in &taps[0] {
            let (z0, z1, fz) = (tz.lo, tz.hi, F::of(tz.frac));
            for ty in &taps[1] {
                let (y0, y1, fy) = (ty.lo, ty.hi, F::of(ty.frac));
                for tx in &taps[2] {
                    let (x0, x1, fx) = (tx.lo, tx.hi, F::of(tx.frac));
                    let at = |z: usize, y: usize, x: usize| base[(z * h + y) * w + x];
                    let lerp = |a: F, b: F, t: F| a + (b - a) * t;
                    let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                    let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                    let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                    let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                    out.push(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz));
                }
            }
        }
    }
    out
}

struct UpsampleOp {
    planes: usize,
    input: [usize; 3],
    taps: [Vec<Tap>; 3],
}

impl<F: Float> Backward<F> for UpsampleOp {
    fn name(&self) -> &'static str {
        "trilinear_upsample"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> {
        let [_, h, w] = self.input;
        let in_len: usize = self.input.iter().product();
        let out_len = self.taps.iter().map(Vec::len).product::<usize>();
        let mut gx = vec![F::zero(); self.planes * in_len];
        for p in 0..self.planes {
            let g = &ctx.grad[p * out_len..(p + 1) * out_len];
            let dst = &mut gx[p * in_len..(p + 1) * in_len];
            let mut i = 0;
            for tz in &self.taps[0] {
                for ty in &self.taps[1] {
                    for tx in &self.taps[2] {
                        let gv = g[i];
                        i += 1;
                        for (z, wz) in [(tz.lo, 1.0 - tz.frac), (tz.hi, tz.frac)] {
                            for (y, wy) in [(ty.lo, 1.0 - ty.frac), (ty.hi, ty.frac)] {
                                for (x, wx) in [(tx.lo, 1.0 - tx.frac), (tx.hi, tx.frac)] {
                                    let wgt = wz * wy * wx;
                                    if wgt != 0.0 {
                                        dst[(z * h + y) * w + x] += gv * F::of(wgt);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

impl<F: Float> Tape<F> {
    /// Trilinear resize of `(N, C, D, H, W)` to `target` spatial extents (never smaller).
    pub fn trilinear_upsample(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5("trilinear_upsample")?;
        let input = [d, h, w];
        if target.iter().zip(&input).any(|(t, i)| t < i) {
            return Err(Error::invalid(
                "trilinear_upsample",
                format!("target {target:?} shrinks input {input:?}"),
            ));
        }
        if target == input {
            let out = self.value(x).clone();
            let taps = [linear_taps(d, d), linear_taps(h, h), linear_taps(w, w)];
            return Ok(self.push(
                out,
                &[x],
                Box::new(UpsampleOp {
                    planes: n * c,
                    input,
                    taps,
                }),
            ));
        }
        let taps = [
            linear_taps(d, target[0]),
            linear_taps(h, target[1]),
            linear_taps(w, target[2]),
        ];
        let data = trilinear(self.value(x).data(), n * c, input, &taps);
        let out = Tensor::from_vec(&[n, c, target[0], target[1], target[2]], data)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(UpsampleOp {
                planes: n * c,
                input,
                taps,
            }),
        ))
    }
}

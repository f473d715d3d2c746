use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            padding: 0,
        }
    }

    pub fn padded(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_spatial(&self, op: &'static str, input: [usize; 3]) -> Result<[usize; 3]> {
        // padding beyond half a window could yield windows with no real voxel
        if self.kernel == 0 || self.stride == 0 || 2 * self.padding > self.kernel {
            return Err(Error::Config(format!("{op}: invalid pooling geometry {self:?}")));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            if input[a] + 2 * self.padding < self.kernel || input[a] < 1 {
                return Err(Error::invalid(
                    op,
                    format!("spatial extent {input:?} smaller than kernel {}", self.kernel),
                ));
            }
            out[a] = (input[a] + 2 * self.padding - self.kernel) / self.stride + 1;
        }
        Ok(out)
    }
}

fn dims(tape: &Tape<impl Float>, x: Var, op: &'static str) -> Result<([usize; 2], [usize; 3])> {
    let [n, c, d, h, w] = tape.value(x).dims5(op)?;
    Ok(([n, c], [d, h, w]))
}

struct MaxPoolOp {
    argmax: Vec<u32>,
}

impl<F: Float> Backward<F> for MaxPoolOp {
    fn name(&self) -> &'static str {
        "maxpool3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> {
        let mut gx = vec![F::zero(); ctx.inputs[0].numel()];
        for (&src, &g) in self.argmax.iter().zip(ctx.grad) {
            gx[src as usize] += g;
        }
        vec![Some(gx)]
    }
}

struct AvgPoolOp {
    spec: PoolSpec,
    planes: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl<F: Float> Backward<F> for AvgPoolOp {
    fn name(&self) -> &'static str {
        "avgpool3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> {
        let [d, h, w] = self.input;
        let [od, oh, ow] = self.output;
        let (k, s) = (self.spec.kernel, self.spec.stride);
        let scale = F::one() / F::of((k * k * k) as f64);
        let mut gx = vec![F::zero(); ctx.inputs[0].numel()];
        for p in 0..self.planes {
            let ib = p * d * h * w;
            let ob = p * od * oh * ow;
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let g = ctx.grad[ob + (z * oh + y) * ow + x] * scale;
                        for kz in 0..k {
                            for ky in 0..k {
                                let row = ib + ((z * s + kz) * h + y * s + ky) * w + x * s;
                                gx[row..row + k].iter_mut().for_each(|v| *v += g);
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
    /// Windowed maximum. Padding never wins; ties go to the lowest linear index.
    pub fn maxpool3d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let ([n, c], input) = dims(self, x, "maxpool3d")?;
        let output = spec.output_spatial("maxpool3d", input)?;
        let [d, h, w] = input;
        let [od, oh, ow] = output;
        let (k, s, p) = (spec.kernel as isize, spec.stride as isize, spec.padding as isize);
        let xv = self.value(x).data();
        let total = n * c * od * oh * ow;
        let mut out = Vec::with_capacity(total);
        let mut argmax = Vec::with_capacity(total);
        for plane in 0..n * c {
            let ib = plane * d * h * w;
            for z in 0..od as isize {
                let (z0, z1) = ((z * s - p).max(0), (z * s - p + k).min(d as isize));
                for y in 0..oh as isize {
                    let (y0, y1) = ((y * s - p).max(0), (y * s - p + k).min(h as isize));
                    for xx in 0..ow as isize {
                        let (x0, x1) = ((xx * s - p).max(0), (xx * s - p + k).min(w as isize));
                        let mut best = F::neg_infinity();
                        let mut at = usize::MAX;
                        for iz in z0..z1 {
                            for iy in y0..y1 {
                                let row = ib + ((iz as usize) * h + iy as usize) * w;
                                for ix in x0..x1 {
                                    let v = xv[row + ix as usize];
                                    if v > best || at == usize::MAX {
                                        best = v;
                                        at = row + ix as usize;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(at as u32);
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, od, oh, ow], out)?;
        Ok(self.push(out, &[x], Box::new(MaxPoolOp { argmax })))
    }

    /// Windowed mean without padding.
    pub fn avgpool3d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        if spec.padding != 0 {
            return Err(Error::Config("avgpool3d does not support padding".into()));
        }
        let ([n, c], input) = dims(self, x, "avgpool3d")?;
        let output = spec.output_spatial("avgpool3d", input)?;
        let [_, h, w] = input;
        let [od, oh, ow] = output;
        let (k, s) = (spec.kernel, spec.stride);
        let scale = F::one() / F::of((k * k * k) as f64);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * od * oh * ow);
        let plane_len = input.iter().product::<usize>();
        for plane in 0..n * c {
            let ib = plane * plane_len;
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = F::zero();
                        for kz in 0..k {
                            for ky in 0..k {
                                let row = ib + ((z * s + kz) * h + y * s + ky) * w + xx * s;
                                acc += xv[row..row + k].iter().copied().sum::<F>();
                            }
                        }
                        out.push(acc * scale);
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, od, oh, ow], out)?;
        let op = AvgPoolOp {
            spec,
            planes: n * c,
            input,
            output,
        };
        Ok(self.push(out, &[x], Box::new(op)))
    }
}

use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub bias: bool,
}

impl Conv3dSpec {
    /// Cubic kernel with uniform stride and padding.
    pub fn cube(in_channels: usize, out_channels: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [pad; 3],
            bias: false,
        }
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels, kd, kh, kw]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.fan_in() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels >= 1
            && self.out_channels >= 1
            && self.kernel.iter().all(|&k| k >= 1)
            && self.stride.iter().all(|&s| s >= 1);
        if !ok {
            return Err(Error::Config(format!("conv3d extents must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Output spatial extents, or an error when any would be < 1.
    pub fn output_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::invalid(
                    "conv3d",
                    format!("input extent {input:?} too small for kernel {:?}", self.kernel),
                ));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }
}

/// Geometry shared by the im2col / col2im traversals.
#[derive(Clone, Copy)]
struct Geometry {
    spec: Conv3dSpec,
    input: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn rows(&self) -> usize {
        self.spec.fan_in()
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    /// Valid output range along one axis for kernel offset `k`.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, n, o) = (
            self.spec.stride[axis] as isize,
            self.spec.padding[axis] as isize,
            self.input[axis] as isize,
            self.output[axis] as isize,
        );
        let k = k as isize;
        // need 0 <= o*s + k - p < n
        let lo = ((p - k).max(0) + s - 1) / s;
        let hi = if n - 1 + p - k < 0 { -1 } else { (n - 1 + p - k) / s };
        let hi = hi.min(o - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    /// Visit every (column-row, input-offset) pair; `f(row, col_index, in_index)`
    /// receives contiguous runs along the innermost axis.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [kd, kh, kw] = self.spec.kernel;
        let [sd, sh, sw] = self.spec.stride;
        let [pd, ph, pw] = self.spec.padding;
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let in_sp: usize = self.input.iter().product();
        for c in 0..self.spec.in_channels {
            for z in 0..kd {
                let (z0, z1) = self.valid(0, z);
                for y in 0..kh {
                    let (y0, y1) = self.valid(1, y);
                    for x in 0..kw {
                        let (x0, x1) = self.valid(2, x);
                        let row = ((c * kd + z) * kh + y) * kw + x;
                        if x1 <= x0 {
                            continue;
                        }
                        for od in z0..z1 {
                            let id = od * sd + z - pd;
                            for oy in y0..y1 {
                                let iy = oy * sh + y - ph;
                                let col = (od * oh + oy) * ow + x0;
                                let ix = x0 * sw + x - pw;
                                let inp = c * in_sp + (id * ih + iy) * iw + ix;
                                f(row, col, inp, x1 - x0, sw);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<F: Float>(&self, x: &[F], col: &mut [F]) {
        col.iter_mut().for_each(|v| *v = F::zero());
        let cols = self.cols();
        self.for_each_run(|row, c0, i0, len, step| {
            let dst = &mut col[row * cols + c0..row * cols + c0 + len];
            if step == 1 {
                dst.copy_from_slice(&x[i0..i0 + len]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = x[i0 + j * step];
                }
            }
        });
    }

    fn col2im<F: Float>(&self, col: &[F], gx: &mut [F]) {
        let cols = self.cols();
        self.for_each_run(|row, c0, i0, len, step| {
            let src = &col[row * cols + c0..row * cols + c0 + len];
            for (j, &v) in src.iter().enumerate() {
                gx[i0 + j * step] += v;
            }
        });
    }
}

struct Conv3dOp {
    geom: Geometry,
    batch: usize,
}

impl<F: Float> Backward<F> for Conv3dOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Vec<Option<Vec<F>>> {
        let g = &self.geom;
        let spec = g.spec;
        let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let (k, p, co) = (g.rows(), g.cols(), spec.out_channels);
        let in_per = spec.in_channels * g.input.iter().product::<usize>();
        let out_per = co * p;
        let pointwise = spec.is_pointwise();

        let mut gx = ctx.needs[0].then(|| vec![F::zero(); x.len()]);
        let mut gw = ctx.needs[1].then(|| vec![F::zero(); w.len()]);
        let mut col = if pointwise { Vec::new() } else { vec![F::zero(); k * p] };

        for n in 0..self.batch {
            let gout = &ctx.grad[n * out_per..(n + 1) * out_per];
            let xn = &x[n * in_per..(n + 1) * in_per];
            if let Some(gw) = gw.as_mut() {
                let cols: &[F] = if pointwise {
                    xn
                } else {
                    g.im2col(xn, &mut col);
                    &col
                };
                matmul(co, p, k, gout, false, cols, true, F::one(), gw);
            }
            if let Some(gx) = gx.as_mut() {
                let gxn = &mut gx[n * in_per..(n + 1) * in_per];
                if pointwise {
                    matmul(k, co, p, w, true, gout, false, F::zero(), gxn);
                } else {
                    matmul(k, co, p, w, true, gout, false, F::zero(), &mut col);
                    g.col2im(&col, gxn);
                }
            }
        }
        let mut res = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            res.push(ctx.needs[2].then(|| {
                let mut gb = vec![F::zero(); co];
                for n in 0..self.batch {
                    for (c, b) in gb.iter_mut().enumerate() {
                        let off = n * out_per + c * p;
                        *b += ctx.grad[off..off + p].iter().copied().sum::<F>();
                    }
                }
                gb
            }));
        }
        res
    }
}

impl<F: Float> Tape<F> {
    /// 3-D cross-correlation of `x: (N, Cin, D, H, W)` with `w: (Cout, Cin, kd, kh, kw)`.
    pub fn conv3d(&mut self, x: Var, spec: &Conv3dSpec, w: Var, b: Option<Var>) -> Result<Var> {
        spec.validate()?;
        let [n, c, d, h, wd] = self.value(x).dims5("conv3d")?;
        if c != spec.in_channels {
            return Err(Error::invalid(
                "conv3d",
                format!("input has {c} channels, spec expects {}", spec.in_channels),
            ));
        }
        if self.shape(w) != spec.weight_shape() {
            return Err(Error::shape("conv3d weight", &spec.weight_shape(), self.shape(w)));
        }
        if b.is_some() != spec.bias {
            return Err(Error::invalid("conv3d", "bias presence disagrees with spec"));
        }
        if let Some(b) = b {
            if self.shape(b) != [spec.out_channels] {
                return Err(Error::shape("conv3d bias", &[spec.out_channels], self.shape(b)));
            }
        }
        let output = spec.output_spatial([d, h, wd])?;
        let geom = Geometry {
            spec: *spec,
            input: [d, h, wd],
            output,
        };
        let (k, p, co) = (geom.rows(), geom.cols(), spec.out_channels);
        let in_per = c * d * h * wd;
        let mut out = vec![F::zero(); n * co * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            let pointwise = spec.is_pointwise();
            let mut col = if pointwise { Vec::new() } else { vec![F::zero(); k * p] };
            for i in 0..n {
                let xn = &xv[i * in_per..(i + 1) * in_per];
                let on = &mut out[i * co * p..(i + 1) * co * p];
                let beta = if let Some(bias) = bias {
                    for (ch, &bv) in bias.iter().enumerate() {
                        on[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v = bv);
                    }
                    F::one()
                } else {
                    F::zero()
                };
                let cols: &[F] = if pointwise {
                    xn
                } else {
                    geom.im2col(xn, &mut col);
                    &col
                };
                matmul(co, k, p, wv, false, cols, false, beta, on);
            }
        }
        let shape = [n, co, output[0], output[1], output[2]];
        let out = Tensor::from_vec(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(out, &parents, Box::new(Conv3dOp { geom, batch: n })))
    }
}

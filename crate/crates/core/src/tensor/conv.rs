use super::gemm::{gemm, Layout};
use super::graph::{Grads, Op};
use super::{shape_err, Graph, Tensor, TensorError, Var};

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1×1, stride-1, unpadded kernel reads the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) struct ConvSaved {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geo: Geometry,
    /// Unfolded input patches for every sample, empty when the weight needs no
    /// gradient or the kernel is pointwise.
    cols: Vec<f32>,
}

/// Unfolds one sample `c × h × w` into a `patch × positions` matrix.
fn im2col(geo: &Geometry, x: &[f32], cols: &mut [f32]) {
    let Geometry { c, h, w, kh, kw, stride, pad, ho, wo, .. } = *geo;
    let pos = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * pos;
                let dst = &mut cols[row..row + pos];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input plane.
fn col2im(geo: &Geometry, cols: &[f32], dx: &mut [f32]) {
    let Geometry { c, h, w, kh, kw, stride, pad, ho, wo, .. } = *geo;
    let pos = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * pos;
                let src = &cols[row..row + pos];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// 2-d cross-correlation (no kernel flip) over an NCHW batch.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(input).dims4("conv2d")?;
        let [o, wc, kh, kw] = self.value(weight).dims4("conv2d")?;
        if wc != c {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels but weight expects {wc}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {:?} does not match {o} output channels", self.shape(b)),
                ));
            }
        }
        if stride == 0 {
            return Err(TensorError::Config { op: "conv2d", msg: "stride must be positive".into() });
        }
        let (hp, wp) = (h + 2 * padding, w + 2 * padding);
        if hp < kh || wp < kw {
            return Err(TensorError::Config {
                op: "conv2d",
                msg: format!(
                    "{kh}x{kw} kernel does not fit a {h}x{w} input with padding {padding}"
                ),
            });
        }
        let geo = Geometry {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
        };
        let save_cols = self.any_requires_grad(&[weight]) && !geo.is_pointwise();
        let (patch, pos) = (geo.patch(), geo.positions());
        let mut out = vec![0.0f32; n * o * pos];
        let mut cols = if save_cols { vec![0.0f32; n * patch * pos] } else { Vec::new() };
        let mut scratch = if save_cols || geo.is_pointwise() { Vec::new() } else { vec![0.0f32; patch * pos] };
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            for s in 0..n {
                let xs = &x[s * c * h * w..(s + 1) * c * h * w];
                let ys = &mut out[s * o * pos..(s + 1) * o * pos];
                let mat: &[f32] = if geo.is_pointwise() {
                    xs
                } else if save_cols {
                    let dst = &mut cols[s * patch * pos..(s + 1) * patch * pos];
                    im2col(&geo, xs, dst);
                    dst
                } else {
                    im2col(&geo, xs, &mut scratch);
                    &scratch
                };
                gemm(o, patch, pos, wt, Layout::Normal, mat, Layout::Normal, 0.0, ys);
            }
            if let Some(b) = bias {
                let bd = self.value(b).data();
                for plane in out.chunks_mut(pos).enumerate() {
                    let bias_val = bd[plane.0 % o];
                    plane.1.iter_mut().for_each(|v| *v += bias_val);
                }
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let value = Tensor::new(&[n, o, geo.ho, geo.wo], out)?;
        let saved = ConvSaved { input, weight, bias, geo, cols };
        Ok(self.push(value, Op::Conv(saved), &inputs))
    }
}

pub(super) fn conv2d_backward(graph: &Graph, s: &ConvSaved, g: &[f32], grads: &mut Grads<'_>) {
    let geo = s.geo;
    let Geometry { n, c, h, w, o, .. } = geo;
    let (patch, pos) = (geo.patch(), geo.positions());
    if let Some(b) = s.bias {
        if grads.wants(b) {
            let slot = grads.slot(b);
            for (i, plane) in g.chunks(pos).enumerate() {
                let acc: f64 = plane.iter().map(|&v| v as f64).sum();
                slot[i % o] += acc as f32;
            }
        }
    }
    if grads.wants(s.weight) {
        let x = graph.value(s.input).data();
        let dw = grads.slot(s.weight);
        for smp in 0..n {
            let gs = &g[smp * o * pos..(smp + 1) * o * pos];
            let mat = if geo.is_pointwise() {
                &x[smp * c * h * w..(smp + 1) * c * h * w]
            } else {
                &s.cols[smp * patch * pos..(smp + 1) * patch * pos]
            };
            // dW[o, patch] += g[o, pos] · colsᵀ[pos, patch]
            gemm(o, pos, patch, gs, Layout::Normal, mat, Layout::Transposed, 1.0, dw);
        }
    }
    if grads.wants(s.input) {
        let wt = graph.value(s.weight).data();
        let mut dcols = if geo.is_pointwise() { Vec::new() } else { vec![0.0f32; patch * pos] };
        let dx = grads.slot(s.input);
        for smp in 0..n {
            let gs = &g[smp * o * pos..(smp + 1) * o * pos];
            let dxs = &mut dx[smp * c * h * w..(smp + 1) * c * h * w];
            if geo.is_pointwise() {
                gemm(patch, o, pos, wt, Layout::Transposed, gs, Layout::Normal, 1.0, dxs);
            } else {
                gemm(patch, o, pos, wt, Layout::Transposed, gs, Layout::Normal, 0.0, &mut dcols);
                col2im(&geo, &dcols, dxs);
            }
        }
    }
}

use super::graph::{Grads, Op};
use super::{Graph, Tensor, TensorError, Var};

pub(crate) struct MaxPoolSaved {
    input: Var,
    /// Flat input index of the winning element for every output element.
    argmax: Vec<u32>,
}

pub(crate) struct ConcatPoolSaved {
    input: Var,
    argmax: Vec<u32>,
}

impl Graph {
    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool2d(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(x).dims4("max_pool2d")?;
        if kernel == 0 || stride == 0 || padding >= kernel || h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(TensorError::Config {
                op: "max_pool2d",
                msg: format!("kernel {kernel}, stride {stride}, padding {padding} invalid for {h}x{w} input"),
            });
        }
        let ho = (h + 2 * padding - kernel) / stride + 1;
        let wo = (w + 2 * padding - kernel) / stride + 1;
        let data = self.value(x).data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let src = &data[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut at = 0usize;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if src[idx] > best {
                                best = src[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = (plane * h * w + at) as u32;
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool(MaxPoolSaved { input: x, argmax }), &[x]))
    }

    /// Global average over the spatial dimensions: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let area = h * w;
        let out = self
            .value(x)
            .data()
            .chunks(area)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / area as f64) as f32)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Concatenated global average and global max pooling:
    /// `N×C×H×W → N×2C`, averages first. Works for any spatial size.
    pub fn adaptive_concat_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(x).dims4("adaptive_concat_pool")?;
        let area = h * w;
        let data = self.value(x).data();
        let mut out = vec![0.0f32; n * 2 * c];
        let mut argmax = vec![0u32; n * c];
        for s in 0..n {
            for ch in 0..c {
                let plane = s * c + ch;
                let p = &data[plane * area..(plane + 1) * area];
                let mean = p.iter().map(|&v| v as f64).sum::<f64>() / area as f64;
                let (mut best, mut at) = (p[0], 0usize);
                for (i, &v) in p.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        at = i;
                    }
                }
                out[s * 2 * c + ch] = mean as f32;
                out[s * 2 * c + c + ch] = best;
                argmax[plane] = (plane * area + at) as u32;
            }
        }
        let value = Tensor::new(&[n, 2 * c], out)?;
        Ok(self.push(value, Op::ConcatPool(ConcatPoolSaved { input: x, argmax }), &[x]))
    }
}

pub(super) fn max_pool_backward(s: &MaxPoolSaved, g: &[f32], grads: &mut Grads<'_>) {
    if grads.wants(s.input) {
        let dx = grads.slot(s.input);
        for (d, &at) in g.iter().zip(&s.argmax) {
            dx[at as usize] += d;
        }
    }
}

pub(super) fn global_avg_pool_backward(graph: &Graph, x: Var, g: &[f32], grads: &mut Grads<'_>) {
    if grads.wants(x) {
        let shape = graph.shape(x);
        let area = shape[2] * shape[3];
        let dx = grads.slot(x);
        for (plane, d) in dx.chunks_mut(area).zip(g) {
            let share = d / area as f32;
            plane.iter_mut().for_each(|v| *v += share);
        }
    }
}

pub(super) fn concat_pool_backward(graph: &Graph, s: &ConcatPoolSaved, g: &[f32], grads: &mut Grads<'_>) {
    if !grads.wants(s.input) {
        return;
    }
    let shape = graph.shape(s.input);
    let (n, c, area) = (shape[0], shape[1], shape[2] * shape[3]);
    let dx = grads.slot(s.input);
    for smp in 0..n {
        for ch in 0..c {
            let plane = smp * c + ch;
            let share = g[smp * 2 * c + ch] / area as f32;
            dx[plane * area..(plane + 1) * area].iter_mut().for_each(|v| *v += share);
            dx[s.argmax[plane] as usize] += g[smp * 2 * c + c + ch];
        }
    }
}

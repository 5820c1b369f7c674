//! Naive `f64` loop implementations of every differentiable op, used as
//! independent oracles for the graph kernels.

pub fn conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [o, _, kh, kw] = ws;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((s * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [n, o, ho, wo])
}

/// `(N, C, spatial)` view of an `N×C` or NCHW shape.
fn ncs(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

pub fn batch_norm_train(x: &[f64], shape: &[usize], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let (n, c, sp) = ncs(shape);
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let idx: Vec<usize> = (0..n).flat_map(|s| (0..sp).map(move |i| (s * c + ch) * sp + i)).collect();
        let m = idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64;
        let v = idx.iter().map(|&i| (x[i] - m).powi(2)).sum::<f64>() / idx.len() as f64;
        for &i in &idx {
            out[i] = gamma[ch] * (x[i] - m) / (v + eps).sqrt() + beta[ch];
        }
    }
    out
}

pub fn batch_norm_eval(
    x: &[f64],
    shape: &[usize],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let (n, c, sp) = ncs(shape);
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            for i in 0..sp {
                let k = (s * c + ch) * sp + i;
                out[k] = gamma[ch] * (x[k] - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn max_pool2d(x: &[f64], xs: [usize; 4], k: usize, stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![f64::NEG_INFINITY; n * c * ho * wo];
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            let v = x[(p * h + iy as usize) * w + ix as usize];
                            let o = &mut out[(p * ho + oy) * wo + ox];
                            *o = o.max(v);
                        }
                    }
                }
            }
        }
    }
    (out, [n, c, ho, wo])
}

pub fn concat_pool(x: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let mut out = vec![0.0; n * 2 * c];
    for s in 0..n {
        for ch in 0..c {
            let mut sum = 0.0;
            let mut max = f64::NEG_INFINITY;
            for y in 0..h {
                for xx in 0..w {
                    let v = x[((s * c + ch) * h + y) * w + xx];
                    sum += v;
                    max = max.max(v);
                }
            }
            out[s * 2 * c + ch] = sum / (h * w) as f64;
            out[s * 2 * c + c + ch] = max;
        }
    }
    out
}

pub fn global_avg_pool(x: &[f64], xs: [usize; 4]) -> Vec<f64> {
    concat_pool(x, xs)
        .chunks(2 * xs[1])
        .flat_map(|r| r[..xs[1]].to_vec())
        .collect()
}

pub fn linear(x: &[f64], n: usize, inp: usize, w: &[f64], out: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut y = vec![0.0; n * out];
    for i in 0..n {
        for o in 0..out {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for j in 0..inp {
                acc += x[i * inp + j] * w[o * inp + j];
            }
            y[i * out + o] = acc;
        }
    }
    y
}

/// Two-pass log-sum-exp cross entropy, mean over rows.
pub fn cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / labels.len() as f64
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

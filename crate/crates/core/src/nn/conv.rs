//! Two stride-1 valid convolutions followed by a dense layer.

use ndarray::Array2;

use super::{GradBuffer, Params};

#[derive(Clone, Debug)]
pub(crate) struct ConvEncoder {
    pub c1w: usize,
    pub c1b: usize,
    pub c2w: usize,
    pub c2b: usize,
    pub fcw: usize,
    pub fcb: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub k1: usize,
    pub k2: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvCache {
    inputs: Vec<usize>,
    pre1: Vec<Vec<f64>>,
    pre2: Vec<Vec<f64>>,
    flat: Array2<f64>,
}

struct Dims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
}

impl Dims {
    fn out_h(&self) -> usize {
        self.h + 1 - self.k
    }

    fn out_w(&self) -> usize {
        self.w + 1 - self.k
    }
}

fn conv_forward(x: &[f64], kernel: &[f64], bias: &[f64], d: &Dims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![0.0; d.cout * oh * ow];
    for f in 0..d.cout {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = bias[f];
                for c in 0..d.cin {
                    for a in 0..d.k {
                        for b in 0..d.k {
                            acc += kernel[((f * d.cin + c) * d.k + a) * d.k + b] * x[(c * d.h + i + a) * d.w + j + b];
                        }
                    }
                }
                out[(f * oh + i) * ow + j] = acc;
            }
        }
    }
    out
}

/// Accumulates kernel/bias gradients and returns ∂/∂x.
fn conv_backward(
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    d: &Dims,
    dkernel: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut dx = vec![0.0; x.len()];
    for f in 0..d.cout {
        for i in 0..oh {
            for j in 0..ow {
                let g = dout[(f * oh + i) * ow + j];
                if g == 0.0 {
                    continue;
                }
                dbias[f] += g;
                for c in 0..d.cin {
                    for a in 0..d.k {
                        for b in 0..d.k {
                            let ki = ((f * d.cin + c) * d.k + a) * d.k + b;
                            let xi = (c * d.h + i + a) * d.w + j + b;
                            dkernel[ki] += g * x[xi];
                            dx[xi] += g * kernel[ki];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl ConvEncoder {
    fn dims1(&self) -> Dims {
        Dims { cin: self.channels, h: self.height, w: self.width, cout: self.filters, k: self.k1 }
    }

    fn dims2(&self) -> Dims {
        let d1 = self.dims1();
        Dims { cin: self.filters, h: d1.out_h(), w: d1.out_w(), cout: self.filters, k: self.k2 }
    }

    /// Returns the pre-activation of the dense layer.
    pub fn forward(&self, params: &Params, obs: &Array2<f64>, inputs: &[usize]) -> (Array2<f64>, ConvCache) {
        let (d1, d2) = (self.dims1(), self.dims2());
        let flat_len = self.filters * d2.out_h() * d2.out_w();
        let mut flat = Array2::zeros((inputs.len(), flat_len));
        let mut pre1 = Vec::with_capacity(inputs.len());
        let mut pre2 = Vec::with_capacity(inputs.len());
        for (n, &s) in inputs.iter().enumerate() {
            let x = obs.row(s);
            let x = x.as_slice().expect("contiguous observations");
            let p1 = conv_forward(x, &params.blocks[self.c1w].data, &params.blocks[self.c1b].data, &d1);
            let a1: Vec<f64> = p1.iter().map(|v| v.max(0.0)).collect();
            let p2 = conv_forward(&a1, &params.blocks[self.c2w].data, &params.blocks[self.c2b].data, &d2);
            for (dst, v) in flat.row_mut(n).iter_mut().zip(&p2) {
                *dst = v.max(0.0);
            }
            pre1.push(p1);
            pre2.push(p2);
        }
        let w = params.view(self.fcw);
        let mut pre = flat.dot(&w.t());
        pre += &params.view(self.fcb);
        debug_assert_eq!(pre.ncols(), self.hidden);
        (pre, ConvCache { inputs: inputs.to_vec(), pre1, pre2, flat })
    }

    /// `dpre` is ∂loss/∂(dense pre-activation).
    pub fn backward(&self, params: &Params, obs: &Array2<f64>, cache: &ConvCache, dpre: &Array2<f64>, buf: &mut GradBuffer) {
        let (d1, d2) = (self.dims1(), self.dims2());
        buf.add_matrix(self.fcw, &dpre.t().dot(&cache.flat));
        for (g, v) in buf.blocks[self.fcb].iter_mut().zip(dpre.sum_axis(ndarray::Axis(0)).iter()) {
            *g += v;
        }
        let dflat = dpre.dot(&params.view(self.fcw));
        let inputs = cache.pre1.len();
        for n in 0..inputs {
            let dp2: Vec<f64> = dflat
                .row(n)
                .iter()
                .zip(&cache.pre2[n])
                .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
                .collect();
            let a1: Vec<f64> = cache.pre1[n].iter().map(|v| v.max(0.0)).collect();
            let (mut dk2, mut db2) = (std::mem::take(&mut buf.blocks[self.c2w]), std::mem::take(&mut buf.blocks[self.c2b]));
            let da1 = conv_backward(&a1, &params.blocks[self.c2w].data, &dp2, &d2, &mut dk2, &mut db2);
            buf.blocks[self.c2w] = dk2;
            buf.blocks[self.c2b] = db2;
            let dp1: Vec<f64> =
                da1.iter().zip(&cache.pre1[n]).map(|(g, p)| if *p > 0.0 { *g } else { 0.0 }).collect();
            let row = obs.row(cache.inputs[n]);
            let x = row.as_slice().expect("contiguous observations");
            let (mut dk1, mut db1) = (std::mem::take(&mut buf.blocks[self.c1w]), std::mem::take(&mut buf.blocks[self.c1b]));
            conv_backward(x, &params.blocks[self.c1w].data, &dp1, &d1, &mut dk1, &mut db1);
            buf.blocks[self.c1w] = dk1;
            buf.blocks[self.c1b] = db1;
        }
    }
}

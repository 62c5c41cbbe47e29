//! Layer internals: stride-2 3x3 convolutions via im2col + GEMM, ReLU,
//! global average pooling and a linear head. All math in f64 so gradient
//! checks against central differences are tight.

use ndarray::{Array1, Array2, Array3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub(crate) struct Conv2d {
    /// (out_ch, in_ch * k * k)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) struct Linear {
    /// (out, in)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let ksize = 3;
        let fan_in = (in_ch * ksize * ksize) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let w = Array2::from_shape_fn((out_ch, in_ch * ksize * ksize), |_| dist.sample(rng));
        Conv2d {
            w,
            b: Array1::zeros(out_ch),
            out_ch,
            ksize,
            stride: 2,
            pad: 1,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.ksize) / self.stride + 1,
            (w + 2 * self.pad - self.ksize) / self.stride + 1,
        )
    }
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, (1.0 / in_dim as f64).sqrt()).expect("finite std");
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| dist.sample(rng));
        Linear {
            w,
            b: Array1::zeros(out_dim),
        }
    }
}

/// Unfold (C, H, W) into (C*k*k, OH*OW) columns.
fn im2col(x: &Array3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<f64>::zeros((c_in * k * k, oh * ow));
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold column gradients back onto the input image (transpose of im2col).
fn col2im(
    dcols: &Array2<f64>,
    (c_in, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array3::<f64>::zeros((c_in, h, w));
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[c, iy as usize, ix as usize]] += dcols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    dx
}

pub(crate) struct Net {
    pub convs: Vec<Conv2d>,
    pub head: Linear,
}

pub(crate) struct LayerCache {
    cols: Array2<f64>,
    /// pre-activation (out_ch, OH*OW); the ReLU mask for backward
    pre: Array2<f64>,
    in_shape: (usize, usize, usize),
}

pub(crate) struct ForwardCache {
    layers: Vec<LayerCache>,
    /// post-ReLU output of the last conv, (C, OH, OW)
    last_act: Array3<f64>,
    pub features: Array1<f64>,
    pub logits: Array1<f64>,
}

/// Parameter gradients in the same structure as the network; flattened into
/// a single vector in enumeration order (convs then head, weights then bias).
pub(crate) struct NetGrads {
    pub convs: Vec<(Array2<f64>, Array1<f64>)>,
    pub head: (Array2<f64>, Array1<f64>),
}

impl NetGrads {
    pub fn zeros_like(net: &Net) -> Self {
        NetGrads {
            convs: net
                .convs
                .iter()
                .map(|c| (Array2::zeros(c.w.dim()), Array1::zeros(c.b.len())))
                .collect(),
            head: (
                Array2::zeros(net.head.w.dim()),
                Array1::zeros(net.head.b.len()),
            ),
        }
    }

    pub fn add(&mut self, other: &NetGrads) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            a.0 += &b.0;
            a.1 += &b.1;
        }
        self.head.0 += &other.head.0;
        self.head.1 += &other.head.1;
    }

    pub fn into_flat(self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.convs {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out.extend(self.head.0.iter());
        out.extend(self.head.1.iter());
        out
    }
}

impl Net {
    pub fn feature_dim(&self) -> usize {
        self.head.w.dim().1
    }

    pub fn param_count(&self) -> usize {
        let conv: usize = self.convs.iter().map(|c| c.w.len() + c.b.len()).sum();
        conv + self.head.w.len() + self.head.b.len()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for c in &self.convs {
            out.extend(c.w.iter());
            out.extend(c.b.iter());
        }
        out.extend(self.head.w.iter());
        out.extend(self.head.b.iter());
        out
    }

    pub fn set_params_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.param_count(), "parameter vector length");
        let mut i = 0;
        for c in &mut self.convs {
            for x in c.w.iter_mut() {
                *x = v[i];
                i += 1;
            }
            for x in c.b.iter_mut() {
                *x = v[i];
                i += 1;
            }
        }
        for x in self.head.w.iter_mut() {
            *x = v[i];
            i += 1;
        }
        for x in self.head.b.iter_mut() {
            *x = v[i];
            i += 1;
        }
    }

    pub fn add_scaled_flat(&mut self, dir: &[f64], scale: f64) {
        assert_eq!(dir.len(), self.param_count());
        let mut i = 0;
        for c in &mut self.convs {
            for x in c.w.iter_mut() {
                *x += scale * dir[i];
                i += 1;
            }
            for x in c.b.iter_mut() {
                *x += scale * dir[i];
                i += 1;
            }
        }
        for x in self.head.w.iter_mut() {
            *x += scale * dir[i];
            i += 1;
        }
        for x in self.head.b.iter_mut() {
            *x += scale * dir[i];
            i += 1;
        }
    }

    /// Full forward pass over a normalized (C, H, W) input, caching what the
    /// backward pass needs.
    pub fn forward(&self, x_norm: &Array3<f64>) -> ForwardCache {
        let mut layers = Vec::with_capacity(self.convs.len());
        let mut act = x_norm.clone();
        for conv in &self.convs {
            let in_shape = act.dim();
            let cols = im2col(&act, conv.ksize, conv.stride, conv.pad);
            let mut pre = conv.w.dot(&cols);
            for (mut row, &b) in pre.outer_iter_mut().zip(conv.b.iter()) {
                row += b;
            }
            let (oh, ow) = conv.out_hw(in_shape.1, in_shape.2);
            let mut next = Array3::<f64>::zeros((conv.out_ch, oh, ow));
            for c in 0..conv.out_ch {
                for i in 0..oh * ow {
                    next[[c, i / ow, i % ow]] = pre[[c, i]].max(0.0);
                }
            }
            layers.push(LayerCache {
                cols,
                pre,
                in_shape,
            });
            act = next;
        }
        let (cf, oh, ow) = act.dim();
        let spatial = (oh * ow) as f64;
        let mut features = Array1::<f64>::zeros(cf);
        for c in 0..cf {
            let mut s = 0.0;
            for y in 0..oh {
                for x in 0..ow {
                    s += act[[c, y, x]];
                }
            }
            features[c] = s / spatial;
        }
        let logits = self.head.w.dot(&features) + &self.head.b;
        ForwardCache {
            layers,
            last_act: act,
            features,
            logits,
        }
    }

    /// Backward from a logits cotangent. Accumulates parameter gradients into
    /// `grads` when provided; returns the input gradient (normalized space)
    /// when `want_input_grad`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &Array1<f64>,
        grads: Option<&mut NetGrads>,
        want_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let mut dfeat = self.head.w.t().dot(dlogits);
        if let Some(g) = grads {
            for (mut row, &dl) in g.head.0.outer_iter_mut().zip(dlogits.iter()) {
                row.scaled_add(dl, &cache.features);
            }
            g.head.1 += dlogits;
            return self.backward_from_features_inner(cache, &mut dfeat, Some(g), want_input_grad);
        }
        self.backward_from_features_inner(cache, &mut dfeat, None, want_input_grad)
    }

    /// Backward from a feature cotangent (the head is skipped).
    pub fn backward_from_features(
        &self,
        cache: &ForwardCache,
        dfeat: &Array1<f64>,
        grads: Option<&mut NetGrads>,
        want_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let mut d = dfeat.clone();
        self.backward_from_features_inner(cache, &mut d, grads, want_input_grad)
    }

    fn backward_from_features_inner(
        &self,
        cache: &ForwardCache,
        dfeat: &mut Array1<f64>,
        mut grads: Option<&mut NetGrads>,
        want_input_grad: bool,
    ) -> Option<Array3<f64>> {
        // GAP backward: spread feature gradient uniformly over spatial cells
        let (cf, oh, ow) = cache.last_act.dim();
        let spatial = (oh * ow) as f64;
        let mut dact = Array2::<f64>::zeros((cf, oh * ow));
        for c in 0..cf {
            let v = dfeat[c] / spatial;
            for i in 0..oh * ow {
                dact[[c, i]] = v;
            }
        }

        for (li, conv) in self.convs.iter().enumerate().rev() {
            let lc = &cache.layers[li];
            // ReLU gate
            let mut dpre = dact;
            for (d, p) in dpre.iter_mut().zip(lc.pre.iter()) {
                if *p <= 0.0 {
                    *d = 0.0;
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                g.convs[li].0 += &dpre.dot(&lc.cols.t());
                for (s, row) in g.convs[li].1.iter_mut().zip(dpre.outer_iter()) {
                    *s += row.sum();
                }
            }
            let need_below = li > 0 || want_input_grad;
            if !need_below {
                return None;
            }
            let dcols = conv.w.t().dot(&dpre);
            let dx = col2im(&dcols, lc.in_shape, conv.ksize, conv.stride, conv.pad);
            if li == 0 {
                return Some(dx);
            }
            let (c_in, h, w) = lc.in_shape;
            let mut flat = Array2::<f64>::zeros((c_in, h * w));
            for c in 0..c_in {
                for y in 0..h {
                    for x in 0..w {
                        flat[[c, y * w + x]] = dx[[c, y, x]];
                    }
                }
            }
            dact = flat;
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array3::from_shape_fn((2, 6, 6), |_| rng.gen_range(-1.0..1.0));
        let cols = im2col(&x, 3, 2, 1);
        let y = Array2::from_shape_fn(cols.dim(), |_| rng.gen_range(-1.0..1.0));
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let back = col2im(&y, x.dim(), 3, 2, 1);
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv2d::new(3, 8, &mut rng);
        assert_eq!(c.out_hw(16, 16), (8, 8));
        assert_eq!(c.w.dim(), (8, 27));
    }
}

//! U-Net building blocks with hand-written backward passes.
//!
//! Every layer processes the batch one sample at a time, so a sample's
//! output never depends on the rest of the batch. Parameter gradients are
//! accumulated over samples in batch order.

use crate::error::{Error, Result};
use crate::nn::tensor::{matmul, Real, Tensor};

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

/// Unfolds one C×H×W sample into a (C·k·k)×(H·W) matrix with zero padding
/// `k / 2` on every side.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, o) in out.iter_mut().enumerate() {
                        let sx = xo as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `dx`.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, &v) in row[y * w..(y + 1) * w].iter().enumerate() {
                        let sx = xo as isize + dxo;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] = dst[sx as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

fn check_conv<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<usize> {
    let [co, ci, kh, kw] = weight.shape();
    if kh != kw || kh % 2 == 0 {
        return Err(shape_err(format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    if ci != x.channels() {
        return Err(shape_err(format!(
            "conv expects {ci} input channels, got {}",
            x.channels()
        )));
    }
    if bias.len() != co {
        return Err(shape_err(format!("bias has {} entries for {co} outputs", bias.len())));
    }
    Ok(kh)
}

/// Same-padding cross-correlation. `weight` is (C_out, C_in, k, k), `bias`
/// holds C_out values (any 4-d shape).
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let k = check_conv(x, weight, bias)?;
    let [n, ci, h, w] = x.shape();
    let co = weight.shape()[0];
    let hw = h * w;
    let mut y = Tensor::zeros([n, co, h, w]);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ci * k * k * hw] };
    for s in 0..n {
        let out = y.sample_mut(s);
        for (o, &b) in out.chunks_exact_mut(hw).zip(bias.data()) {
            o.fill(b);
        }
        let xs = x.sample(s);
        let cols: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, ci, h, w, k, &mut col);
            &col
        };
        matmul(co, ci * k * k, hw, weight.data(), false, cols, false, T::one(), out);
    }
    Ok(y)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Tensor<T>,
    pub dbias: Tensor<T>,
}

/// Backward of [`conv2d`]. The input gradient is skipped unless `need_dx`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let k = check_conv(x, weight, bias)?;
    let [n, ci, h, w] = x.shape();
    let co = weight.shape()[0];
    if dy.shape() != [n, co, h, w] {
        return Err(shape_err(format!("conv output grad {:?} vs {:?}", dy.shape(), [n, co, h, w])));
    }
    let hw = h * w;
    let kk = ci * k * k;
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = Tensor::zeros(bias.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut dcol = if need_dx && k != 1 { vec![T::zero(); kk * hw] } else { Vec::new() };
    for s in 0..n {
        let g = dy.sample(s);
        for (db, row) in dbias.data_mut().iter_mut().zip(g.chunks_exact(hw)) {
            *db = *db + row.iter().copied().sum::<T>();
        }
        let xs = x.sample(s);
        let cols: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, ci, h, w, k, &mut col);
            &col
        };
        // dW (co × kk) += dY (co × hw) · colsᵀ
        matmul(co, hw, kk, g, false, cols, true, T::one(), dweight.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dxs = dx.sample_mut(s);
            if k == 1 {
                matmul(kk, co, hw, weight.data(), true, g, false, T::zero(), dxs);
            } else {
                matmul(kk, co, hw, weight.data(), true, g, false, T::zero(), &mut dcol);
                col2im(&dcol, ci, h, w, k, dxs);
            }
        }
    }
    Ok(ConvGrads { dx, dweight, dbias })
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Backward of ReLU given its output `y`: passes `dy` where `y > 0`.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let mut dx = dy.clone();
    relu_backward_inplace(y, &mut dx)?;
    Ok(dx)
}

pub fn relu_backward_inplace<T: Real>(y: &Tensor<T>, dy: &mut Tensor<T>) -> Result<()> {
    if y.shape() != dy.shape() {
        return Err(shape_err(format!("relu grad {:?} vs {:?}", dy.shape(), y.shape())));
    }
    for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if !(v > T::zero()) {
            *g = T::zero();
        }
    }
    Ok(())
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, per output
/// value, the flat index of the winning input within its sample.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!("maxpool needs even H and W, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    for s in 0..n {
        let xs = x.sample(s);
        let ys = y.sample_mut(s);
        let base = s * c * oh * ow;
        for ch in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    let mut best = (ch * h + 2 * r) * w + 2 * col;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (ch * h + 2 * r + dr) * w + 2 * col + dc;
                        if xs[i] > xs[best] {
                            best = i;
                        }
                    }
                    let o = (ch * oh + r) * ow + col;
                    ys[o] = xs[best];
                    arg[base + o] = best as u32;
                }
            }
        }
    }
    Ok((y, arg))
}

/// Routes each output gradient to the input position that won the max.
pub fn maxpool2_backward<T: Real>(
    input_shape: [usize; 4],
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape;
    if dy.shape() != [n, c, h / 2, w / 2] || argmax.len() != dy.len() {
        return Err(shape_err(format!("maxpool grad {:?} for input {input_shape:?}", dy.shape())));
    }
    let mut dx = Tensor::zeros(input_shape);
    let per = dy.len() / n.max(1);
    for s in 0..n {
        let g = dy.sample(s);
        let dxs = dx.sample_mut(s);
        for (o, &gv) in g.iter().enumerate() {
            let i = argmax[s * per + o] as usize;
            dxs[i] = dxs[i] + gv;
        }
    }
    Ok(dx)
}

fn check_upconv<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<usize> {
    let [ci, co, kh, kw] = weight.shape();
    if (kh, kw) != (2, 2) || ci != x.channels() || bias.len() != co {
        return Err(shape_err(format!(
            "upconv weight {:?} / bias {} incompatible with input {:?}",
            weight.shape(),
            bias.len(),
            x.shape()
        )));
    }
    Ok(co)
}

/// 2×2 stride-2 transposed convolution. `weight` is (C_in, C_out, 2, 2):
/// `y[o, 2i+a, 2j+b] = bias[o] + Σ_c weight[c, o, a, b] · x[c, i, j]`.
pub fn upconv2<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let co = check_upconv(x, weight, bias)?;
    let [n, ci, h, w] = x.shape();
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Tensor::zeros([n, co, oh, ow]);
    let mut y4 = vec![T::zero(); co * 4 * hw];
    for s in 0..n {
        // y4 ((co·4) × hw) = weightᵀ ((co·4) × ci) · x (ci × hw)
        matmul(co * 4, ci, hw, weight.data(), true, x.sample(s), false, T::zero(), &mut y4);
        let ys = y.sample_mut(s);
        for o in 0..co {
            let b = bias.data()[o];
            for ab in 0..4 {
                let (a, bb) = (ab / 2, ab % 2);
                let src = &y4[(o * 4 + ab) * hw..][..hw];
                for i in 0..h {
                    for j in 0..w {
                        ys[(o * oh + 2 * i + a) * ow + 2 * j + bb] = src[i * w + j] + b;
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn upconv2_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let co = check_upconv(x, weight, bias)?;
    let [n, ci, h, w] = x.shape();
    if dy.shape() != [n, co, 2 * h, 2 * w] {
        return Err(shape_err(format!("upconv grad {:?}", dy.shape())));
    }
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = Tensor::zeros(bias.shape());
    let mut dx = Tensor::zeros(x.shape());
    let mut dy4 = vec![T::zero(); co * 4 * hw];
    for s in 0..n {
        let g = dy.sample(s);
        for o in 0..co {
            let mut acc = T::zero();
            for ab in 0..4 {
                let (a, bb) = (ab / 2, ab % 2);
                let dst = &mut dy4[(o * 4 + ab) * hw..][..hw];
                for i in 0..h {
                    for j in 0..w {
                        let v = g[(o * oh + 2 * i + a) * ow + 2 * j + bb];
                        dst[i * w + j] = v;
                        acc = acc + v;
                    }
                }
            }
            dbias.data_mut()[o] = dbias.data()[o] + acc;
        }
        // dW (ci × co·4) += x (ci × hw) · dy4ᵀ
        matmul(ci, hw, co * 4, x.sample(s), false, &dy4, true, T::one(), dweight.data_mut());
        // dx (ci × hw) = W (ci × co·4) · dy4
        matmul(ci, co * 4, hw, weight.data(), false, &dy4, false, T::zero(), dx.sample_mut(s));
    }
    Ok(ConvGrads {
        dx: Some(dx),
        dweight,
        dbias,
    })
}

/// Channel concatenation `[a, b]`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err(format!("concat {:?} with {:?}", a.shape(), b.shape())));
    }
    let mut y = Tensor::zeros([n, ca + cb, h, w]);
    for s in 0..n {
        let ys = y.sample_mut(s);
        let split = ca * h * w;
        ys[..split].copy_from_slice(a.sample(s));
        ys[split..].copy_from_slice(b.sample(s));
    }
    Ok(y)
}

/// Splits a concatenated gradient back into its `a` and `b` parts.
pub fn concat_backward<T: Real>(dy: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = dy.shape();
    if ca > c {
        return Err(shape_err(format!("cannot split {ca} channels from {c}")));
    }
    let mut da = Tensor::zeros([n, ca, h, w]);
    let mut db = Tensor::zeros([n, c - ca, h, w]);
    for s in 0..n {
        let g = dy.sample(s);
        let split = ca * h * w;
        da.sample_mut(s).copy_from_slice(&g[..split]);
        db.sample_mut(s).copy_from_slice(&g[split..]);
    }
    Ok((da, db))
}

/// Mean squared error over all elements and its gradient `2(p − t) / len`.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(shape_err(format!("loss on {:?} vs {:?}", pred.shape(), target.shape())));
    }
    if !target.is_finite() {
        return Err(Error::InvalidValue("loss target contains non-finite values".into()));
    }
    let n = T::from_f64(pred.len() as f64);
    let two = T::from_f64(2.0);
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = T::zero();
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        sum = sum + d * d;
        *g = two * d / n;
    }
    Ok((sum / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = t([2, 2, 3, 4], (0..48).map(|i| i as f64 * 0.1).collect());
        let mut w = Tensor::zeros([2, 2, 3, 3]);
        w.data_mut()[4] = 1.0; // out 0 <- in 0 centre
        w.data_mut()[18 + 9 + 4] = 1.0; // out 1 <- in 1 centre
        let b = Tensor::zeros([1, 1, 1, 2]);
        assert_eq!(conv2d(&x, &w, &b).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = t([1, 1, 4, 4], vec![1.0; 16]);
        let w = t([1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d(&x, &w, &Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
        assert_eq!(y.data()[5], 9.0);
        assert_eq!(y.data()[15], 4.0);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros([1, 3, 3, 3]), &Tensor::zeros([1, 1, 1, 1])).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 2, 2]), &Tensor::zeros([1, 1, 1, 1])).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 3, 3]), &Tensor::zeros([1, 1, 1, 2])).is_err());
    }

    #[test]
    fn relu_values() {
        let x = t([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]);
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&y, &t([1, 1, 1, 3], vec![5.0, 5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn maxpool_routes_to_argmax() {
        let x = t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let dx = maxpool2_backward(x.shape(), &arg, &t([1, 1, 1, 1], vec![7.0])).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 7.0]);
        assert!(maxpool2(&Tensor::<f64>::zeros([1, 1, 3, 2])).is_err());
    }

    #[test]
    fn upconv_places_kernel_taps() {
        let x = t([1, 1, 1, 2], vec![1.0, 2.0]);
        let w = t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = upconv2(&x, &w, &t([1, 1, 1, 1], vec![0.5])).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 4]);
        assert_eq!(y.data(), &[1.5, 2.5, 2.5, 4.5, 3.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn concat_and_split() {
        let a = t([2, 1, 1, 2], vec![1., 2., 3., 4.]);
        let b = t([2, 2, 1, 2], vec![5., 6., 7., 8., 9., 10., 11., 12.]);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.sample(1), &[3., 4., 9., 10., 11., 12.]);
        let (da, db) = concat_backward(&c, 1).unwrap();
        assert_eq!((da, db), (a, b));
        assert!(concat_channels(&Tensor::<f64>::zeros([1, 1, 2, 2]), &Tensor::zeros([1, 1, 2, 3])).is_err());
    }

    #[test]
    fn mse_values() {
        let p = t([1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]);
        let (l, g) = mse_loss(&p, &p).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        let q = p.map(|v| v + 0.1);
        let (l, g) = mse_loss(&q, &p).unwrap();
        assert!((l - 0.01).abs() < 1e-12);
        assert!((g.data()[0] - 0.05).abs() < 1e-12);
        assert!(mse_loss(&p, &Tensor::zeros([1, 1, 1, 4])).is_err());
    }
}

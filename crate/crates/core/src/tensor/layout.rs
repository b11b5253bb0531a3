use super::Tensor;
use crate::error::{config_err, dim_err, Result};
use crate::scalar::Scalar;

/// (outer, axis extent, inner) factorization of `shape` around `axis`.
fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Concatenates tensors along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return dim_err("concat of an empty list");
    };
    if axis >= first.order() {
        return dim_err(format!("concat axis {axis} out of range for {:?}", first.shape()));
    }
    for p in parts {
        let ok = p.order() == first.order()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return dim_err(format!("concat: {:?} incompatible with {:?} on axis {axis}", p.shape(), first.shape()));
        }
    }
    let (outer, _, inner) = split_dims(first.shape(), axis);
    let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &e) in parts.iter().zip(&extents) {
            out.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_op("concat", shape, out, parts, move |g, needs| {
        let mut grads: Vec<Option<Vec<T>>> =
            needs.iter().zip(&extents).map(|(&n, &e)| n.then(|| Vec::with_capacity(outer * e * inner))).collect();
        for o in 0..outer {
            let mut off = o * total * inner;
            for (gp, &e) in grads.iter_mut().zip(&extents) {
                if let Some(gp) = gp {
                    gp.extend_from_slice(&g[off..off + e * inner]);
                }
                off += e * inner;
            }
        }
        grads
    }))
}

/// Splits along `axis` into consecutive pieces of the given extents.
pub fn split<T: Scalar>(x: &Tensor<T>, sizes: &[usize], axis: usize) -> Result<Vec<Tensor<T>>> {
    if axis >= x.order() {
        return dim_err(format!("split axis {axis} out of range for {:?}", x.shape()));
    }
    if sizes.iter().sum::<usize>() != x.shape()[axis] {
        return dim_err(format!("split sizes {sizes:?} do not sum to extent {}", x.shape()[axis]));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let part = x.narrow(axis, start, len);
            start += len;
            part
        })
        .collect()
}

impl<T: Scalar> Tensor<T> {
    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.order() || start + len > self.shape()[axis] {
            return dim_err(format!("narrow({axis}, {start}, {len}) out of range for {:?}", self.shape()));
        }
        let (outer, extent, inner) = split_dims(self.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op("narrow", shape, out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); n];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() || shape.len() > super::MAX_ORDER {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape()));
        }
        Ok(Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), &[self], |g, _| vec![Some(g.to_vec())]))
    }

    /// `(B, C r^2, H, W) -> (B, C, rH, rW)`; channel `c r^2 + i r + j` lands at offset `(i, j)`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<T>> {
        let [b, c, h, w] = self.dims4()?;
        if r == 0 || c % (r * r) != 0 {
            return config_err(format!("pixel_shuffle: {c} channels not divisible by {r}^2"));
        }
        let co = c / (r * r);
        let map = shuffle_map(b, co, h, w, r);
        let src = self.data();
        let out: Vec<T> = map.iter().map(|&i| src[i]).collect();
        let n = self.numel();
        Ok(Tensor::from_op("pixel_shuffle", vec![b, co, h * r, w * r], out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); n];
            for (o, &i) in map.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Inverse of [`Tensor::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<T>> {
        let [b, c, h, w] = self.dims4()?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return config_err(format!("pixel_unshuffle: {h}x{w} not divisible by {r}"));
        }
        let (hs, ws) = (h / r, w / r);
        // map[o] = input index that pixel_shuffle writes to output o; invert it
        let map = shuffle_map(b, c, hs, ws, r);
        let src = self.data();
        let mut out = vec![T::zero(); self.numel()];
        for (o, &i) in map.iter().enumerate() {
            out[i] = src[o];
        }
        Ok(Tensor::from_op("pixel_unshuffle", vec![b, c * r * r, hs, ws], out, &[self], move |g, _| {
            vec![Some(map.iter().map(|&i| g[i]).collect())]
        }))
    }

    /// Mean over the spatial axes: `(B, C, H, W) -> (B, C, 1, 1)`.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let [b, c, h, w] = self.dims4()?;
        let plane = h * w;
        let inv = T::lit(1.0 / plane as f64);
        let out: Vec<T> = self
            .data()
            .chunks(plane)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        Ok(Tensor::from_op("global_avg_pool", vec![b, c, 1, 1], out, &[self], move |g, _| {
            vec![Some(g.iter().flat_map(|&v| std::iter::repeat(v * inv).take(plane)).collect())]
        }))
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.order() {
            return dim_err(format!("softmax axis {axis} out of range for {:?}", self.shape()));
        }
        let (outer, extent, inner) = split_dims(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * extent + k) * inner + i;
                let max = (0..extent).map(|k| x[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..extent {
                    out[idx(k)] = (x[idx(k)] - max).exp();
                    z = z + out[idx(k)];
                }
                for k in 0..extent {
                    out[idx(k)] = out[idx(k)] / z;
                }
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op("softmax", self.shape().to_vec(), out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * extent + k) * inner + i;
                    let dot = (0..extent).fold(T::zero(), |a, k| a + g[idx(k)] * y[idx(k)]);
                    for k in 0..extent {
                        gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

/// For each output element of a shuffle to `(b, c, h*r, w*r)`, the source index.
fn shuffle_map(b: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (ho, wo) = (h * r, w * r);
    let mut map = Vec::with_capacity(b * c * ho * wo);
    for n in 0..b {
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let (i, j) = (y % r, x % r);
                    let src_c = ch * r * r + i * r + j;
                    map.push(((n * c * r * r + src_c) * h + y / r) * w + x / r);
                }
            }
        }
    }
    map
}

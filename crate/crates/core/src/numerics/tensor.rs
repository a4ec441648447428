use crate::error::{MsdemError, Result};

/// Dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(MsdemError::invalid(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(MsdemError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Build from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MsdemError::invalid("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    /// Crate-internal constructor for results of validated arithmetic.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of the trailing axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(MsdemError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(MsdemError::NonFinite(op))
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.as_2d("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    pub(crate) fn as_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(MsdemError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(values: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in values.iter().enumerate() {
            if v > values[best] {
                best = i;
            }
        }
        best
    }
}

/// `a [m×k] · b [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_2d("matmul")?;
    let (k2, n) = b.as_2d("matmul")?;
    if k != k2 {
        return Err(MsdemError::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(false, false, m, k, n, &a.data, &b.data, &mut out, 0.0);
    let t = Tensor::from_parts(vec![m, n], out);
    t.check_finite("matmul")?;
    Ok(t)
}

/// `c = op(a)·op(b) + beta·c` on row-major slices, where `op` optionally
/// transposes. `m×k` and `k×n` are the logical (post-transpose) shapes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Softmax along `axis` with max-subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(MsdemError::invalid(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data.clone();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = x.data[base + k * inner];
            }
            softmax_in_place(&mut buf);
            for (k, v) in buf.iter().enumerate() {
                out[base + k * inner] = *v;
            }
        }
    }
    let t = Tensor::from_parts(shape.to_vec(), out);
    t.check_finite("softmax")?;
    Ok(t)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[c]` for a one-hot `label`.
pub fn cross_entropy(logits: &Tensor, label: &[f64]) -> Result<f64> {
    let class = one_hot_class(label, logits.numel())?;
    logits.check_finite("cross_entropy")?;
    let row = logits.data();
    Ok(log_sum_exp(row) - row[class])
}

/// Gradient of [`cross_entropy`] with respect to the logits.
pub fn cross_entropy_grad(logits: &Tensor, label: &[f64]) -> Result<Tensor> {
    let class = one_hot_class(label, logits.numel())?;
    let mut p = logits.data().to_vec();
    softmax_in_place(&mut p);
    p[class] -= 1.0;
    Ok(Tensor::from_parts(logits.shape().to_vec(), p))
}

fn one_hot_class(label: &[f64], k: usize) -> Result<usize> {
    if k < 2 {
        return Err(MsdemError::invalid("cross entropy needs at least two classes"));
    }
    if label.len() != k {
        return Err(MsdemError::Shape {
            op: "cross_entropy",
            lhs: vec![k],
            rhs: vec![label.len()],
        });
    }
    let ones: Vec<usize> = (0..k).filter(|&i| label[i] == 1.0).collect();
    let zeros = label.iter().filter(|&&v| v == 0.0).count();
    if ones.len() != 1 || zeros != k - 1 {
        return Err(MsdemError::invalid("label is not a one-hot vector"));
    }
    Ok(ones[0])
}

/// Numerically-plain scaled dot-product attention over one token set,
/// `softmax(q kᵀ · scale) v` per head. Inputs are `[n × heads·d]`.
/// Returns the output and the per-head attention weights `[heads][n×n]`.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    scale: f64,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (n, width) = q.as_2d("attention")?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(MsdemError::Shape {
            op: "attention",
            lhs: q.shape.clone(),
            rhs: if k.shape() != q.shape() {
                k.shape.clone()
            } else {
                v.shape.clone()
            },
        });
    }
    if heads == 0 || width % heads != 0 {
        return Err(MsdemError::invalid(format!(
            "width {width} not divisible by {heads} heads"
        )));
    }
    let d = width / heads;
    let mut out = vec![0.0; n * width];
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * d;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            let row = &mut w[i * n..(i + 1) * n];
            for (j, slot) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for c in 0..d {
                    s += q.data[i * width + off + c] * k.data[j * width + off + c];
                }
                *slot = s * scale;
            }
            if row.iter().any(|s| s.is_nan()) {
                return Err(MsdemError::NonFinite("attention scores"));
            }
            softmax_in_place(row);
            for j in 0..n {
                let a = row[j];
                for c in 0..d {
                    out[i * width + off + c] += a * v.data[j * width + off + c];
                }
            }
        }
        weights.push(Tensor::from_parts(vec![n, n], w));
    }
    let t = Tensor::from_parts(vec![n, width], out);
    t.check_finite("attention")?;
    Ok((t, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = t(&[vec![3.0], vec![4.0]]);
        assert_eq!(matmul(&i, &b).unwrap().data(), &[3.0, 4.0]);
        let a = t(&[vec![1.0, 2.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0; 3]).unwrap(), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let s = softmax(&x, 0).unwrap();
        for (v, e) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-9);
        }
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_axis_zero_of_matrix() {
        let x = t(&[vec![0.0, 1.0], vec![0.0, 1.0]]);
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let l = Tensor::vector(vec![10.0, -10.0]).unwrap();
        let v = cross_entropy(&l, &[1.0, 0.0]).unwrap();
        assert!(v > 0.0 && v < 1e-8, "{v}");
        let l = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let v = cross_entropy(&l, &[1.0, 0.0]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let l = Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&l, &[1.0, 1.0, 0.0]).is_err());
        assert!(cross_entropy(&l, &[0.5, 0.5, 0.0]).is_err());
        assert!(cross_entropy(&l, &[1.0, 0.0]).is_err());
        let one = Tensor::vector(vec![0.0]).unwrap();
        assert!(cross_entropy(&one, &[1.0]).is_err());
    }

    #[test]
    fn cross_entropy_grad_matches_central_differences() {
        let logits = [1.0, 2.0, 3.0];
        let label = [0.0, 1.0, 0.0];
        let g = cross_entropy_grad(&Tensor::vector(logits.to_vec()).unwrap(), &label).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let mut up = logits;
            let mut dn = logits;
            up[i] += h;
            dn[i] -= h;
            let fu = cross_entropy(&Tensor::vector(up.to_vec()).unwrap(), &label).unwrap();
            let fd = cross_entropy(&Tensor::vector(dn.to_vec()).unwrap(), &label).unwrap();
            let num = (fu - fd) / (2.0 * h);
            let rel = (num - g.data()[i]).abs() / num.abs().max(1e-8);
            assert!(rel < 1e-6, "component {i}: {num} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn rejects_non_finite_and_zero_dims() {
        assert!(Tensor::vector(vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(Tensor::argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(Tensor::argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn single_token_attention_is_value() {
        let q = t(&[vec![0.3, -2.0]]);
        let v = t(&[vec![5.0, 6.0]]);
        let (out, w) = attention(&q, &q, &v, 2, 1.0).unwrap();
        assert_eq!(out.data(), v.data());
        assert_eq!(w[0].data(), &[1.0]);
    }
}

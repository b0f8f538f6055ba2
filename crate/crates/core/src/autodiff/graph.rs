use std::collections::HashMap;
use std::rc::Rc;

use super::gemm::{gemm, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Marks a padded position in a [`Graph::gather`] index list.
pub const PAD: usize = usize::MAX;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

#[derive(Debug)]
enum Op {
    Leaf {
        slot: Option<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    AddScalar {
        x: Var,
    },
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    ScatterAdd {
        sources: Vec<(Var, Rc<[usize]>)>,
    },
    Concat {
        parts: Vec<Var>,
        /// Width of each part's contiguous run per output row.
        widths: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        factors: Vec<f64>,
    },
    MulRows {
        x: Var,
        s: Var,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    Norm(Var),
    Sum(Var),
    SumRows(Var),
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Output extent of a convolution or pooling window sweep.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::config("kernel and stride must be positive"));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} larger than padded input {padded} (extent {input}, padding {padding})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Define-by-run tape of differentiable operations.
///
/// Every op appends a node holding its forward value; [`Graph::backward`]
/// walks the tape in exact reverse order. Parameters enter through
/// [`Graph::param`], which binds a caller-side slot so gradients can be
/// accumulated back into the owning tensors.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph values are well formed")
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (never receives a gradient).
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf { slot: None })
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), false, Op::Leaf { slot: None }))
    }

    /// Binds `t` as parameter `slot`. Repeated binds of a slot return the same
    /// variable, so a parameter used by several sub-graphs gets one summed
    /// gradient.
    pub fn param(&mut self, slot: usize, t: &Tensor) -> Var {
        if let Some(&v) = self.bound.get(&slot) {
            return v;
        }
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf { slot: Some(slot) },
        );
        self.bound.insert(slot, v);
        v
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a [M x K] * b [K x N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, false)
    }

    /// `a [M x K] * b^T` with `b` stored `[N x K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, true)
    }

    /// `a^T * b` with `a` stored `[K x M]`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, true, false)
    }

    fn matmul_general(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2(a, "matmul lhs")?;
        let (br, bc) = self.dims2(b, "matmul rhs")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: {:?}{} and {:?}{} have mismatched inner dimensions",
                self.shape(a),
                if ta { "^T" } else { "" },
                self.shape(b),
                if tb { "^T" } else { "" },
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::view(self.value(a), ar, ac, ta),
            MatRef::view(self.value(b), br, bc, tb),
            &mut out,
            false,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, ng, Op::MatMul { a, b, ta, tb, m, k, n }))
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, ng, Op::Mul(a, b)))
    }

    /// Adds `bias [C]` to every row of `x [.. x C]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().expect("non-empty shape");
        if self.shape(bias) != [c] {
            return Err(Error::shape(format!(
                "add_row_bias: bias {:?} does not match rows of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(self.shape(x).to_vec(), out, ng, Op::AddRowBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), out, ng, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), out, ng, Op::AddScalar { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), out, ng, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), out, ng, Op::Gelu(x))
    }

    // ---------------------------------------------------------------- row-wise

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().expect("non-empty shape");
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), out, ng, Op::Softmax(x))
    }

    /// Normalizes each last-dim row to zero mean and unit (biased) variance,
    /// then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let d = *self.shape(x).last().expect("non-empty shape");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm: affine {:?}/{:?} does not match feature width {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for (r, row) in xv.chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let out: Vec<f64> = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((h, gg), bb)| h * gg + bb))
            .collect();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let (xhat, inv_std) = if ng { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            ng,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Divides each row of `x [R x C]` by `max(||row||, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, c) = self.dims2(x, "l2_normalize_rows")?;
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / c);
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            let d = n.max(eps);
            row.iter_mut().for_each(|v| *v /= d);
        }
        let ng = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), out, ng, Op::L2NormalizeRows { x, norms, eps }))
    }

    /// Multiplies row `r` of `x [R x C]` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let (r, c) = self.dims2(x, "scale_rows")?;
        if factors.len() != r {
            return Err(Error::shape(format!(
                "scale_rows: {} factors for {r} rows",
                factors.len()
            )));
        }
        let out = self
            .value(x)
            .chunks(c)
            .zip(&factors)
            .flat_map(|(row, f)| row.iter().map(move |v| v * f))
            .collect();
        let ng = self.needs(x);
        Ok(self.push(vec![r, c], out, ng, Op::ScaleRows { x, factors }))
    }

    /// Multiplies row `r` of `x [R x C]` by `s[r]`, `s` differentiable.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "mul_rows")?;
        if self.shape(s) != [r] {
            return Err(Error::shape(format!(
                "mul_rows: scale {:?} for {r} rows",
                self.shape(s)
            )));
        }
        let sv = self.value(s);
        let out = self
            .value(x)
            .chunks(c)
            .zip(sv)
            .flat_map(|(row, f)| row.iter().map(move |v| v * f))
            .collect();
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(vec![r, c], out, ng, Op::MulRows { x, s }))
    }

    // ---------------------------------------------------------------- images

    /// Direct 2-D convolution of `x [C_in x H x W]` with `w [C_out x C_in x k x k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (c_in, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::shape(format!("conv2d: input must be CxHxW, got {s:?}"))),
        };
        let (c_out, k) = match self.shape(w) {
            [co, ci, k1, k2] if *ci == c_in && k1 == k2 => (*co, *k1),
            s => {
                return Err(Error::shape(format!(
                    "conv2d: kernel {s:?} does not fit input {:?}",
                    self.shape(x)
                )))
            }
        };
        if self.shape(b) != [c_out] {
            return Err(Error::shape(format!(
                "conv2d: bias {:?} for {c_out} output channels",
                self.shape(b)
            )));
        }
        let ho = conv_out_extent(h, k, stride, padding)?;
        let wo = conv_out_extent(wd, k, stride, padding)?;
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let cols = im2col(self.value(x), &geom);
        let mut out = vec![0.0; c_out * ho * wo];
        gemm(
            MatRef::new(self.value(w), c_out, c_in * k * k),
            MatRef::new(&cols, c_in * k * k, ho * wo),
            &mut out,
            false,
        );
        for (row, bb) in out.chunks_mut(ho * wo).zip(self.value(b)) {
            row.iter_mut().for_each(|v| *v += bb);
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        let cols = if self.needs(w) { cols } else { Vec::new() };
        Ok(self.push(vec![c_out, ho, wo], out, ng, Op::Conv2d { x, w, b, geom, cols }))
    }

    /// Windowed max over `x [C x H x W]`; padding never wins. Ties go to the
    /// first element in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::shape(format!("max_pool2d: input must be CxHxW, got {s:?}"))),
        };
        if padding >= kernel {
            return Err(Error::config(format!(
                "max_pool2d: padding {padding} must be smaller than kernel {kernel}"
            )));
        }
        let ho = conv_out_extent(h, kernel, stride, padding)?;
        let wo = conv_out_extent(w, kernel, stride, padding)?;
        let xv = self.value(x);
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0usize; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = PAD;
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
                            let idx = (ch * h + iy as usize) * w + ix as usize;
                            if best_i == PAD || xv[idx] > best {
                                best = xv[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![c, ho, wo], out, ng, Op::MaxPool { x, argmax }))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(shape, out, ng, Op::Reshape(x)))
    }

    /// `out.flat[i] = x.flat[index[i]]`, or zero where `index[i] == PAD`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != index.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "gather: {} indices for output shape {shape:?}",
                index.len()
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == PAD {
                out.push(0.0);
            } else if i < xv.len() {
                out.push(xv[i]);
            } else {
                return Err(Error::shape(format!(
                    "gather: index {i} out of range for {:?}",
                    self.shape(x)
                )));
            }
        }
        let ng = self.needs(x);
        Ok(self.push(shape, out, ng, Op::Gather { x, index }))
    }

    /// Selects rows of `x [R x C]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "gather_rows")?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!("gather_rows: row {bad} of {r}")));
        }
        let index: Rc<[usize]> = rows.iter().flat_map(|&i| (0..c).map(move |j| i * c + j)).collect();
        self.gather(x, index, vec![rows.len(), c])
    }

    /// Columns `start..start + len` of `x [R x C]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::shape(format!("slice_cols: {start}..{} of {c}", start + len)));
        }
        let index: Rc<[usize]> = (0..r)
            .flat_map(|i| (start..start + len).map(move |j| i * c + j))
            .collect();
        self.gather(x, index, vec![r, len])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let index: Rc<[usize]> = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(x, index, vec![c, r])
    }

    /// Zero tensor of `shape` with `out.flat[idx[i]] += src.flat[i]` for every source.
    pub fn scatter_add(&mut self, shape: impl Into<Vec<usize>>, sources: Vec<(Var, Rc<[usize]>)>) -> Result<Var> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        let mut ng = false;
        for (src, idx) in &sources {
            let sv = self.value(*src);
            if sv.len() != idx.len() {
                return Err(Error::shape(format!(
                    "scatter_add: {} indices for {} values",
                    idx.len(),
                    sv.len()
                )));
            }
            for (v, &i) in sv.iter().zip(idx.iter()) {
                if i >= n {
                    return Err(Error::shape(format!("scatter_add: index {i} of {n}")));
                }
                out[i] += v;
            }
            ng |= self.needs(*src);
        }
        Ok(self.push(shape, out, ng, Op::ScatterAdd { sources }))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::usage("concat_rows of nothing"))?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape(format!(
                    "concat_rows: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let widths = parts.iter().map(|&p| self.value(p).len()).collect();
        Ok(self.push(
            vec![rows, c],
            out,
            ng,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
        ))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::usage("concat_cols of nothing"))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape(format!(
                    "concat_cols: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        // Stored as per-row widths; a single-row stack reuses the same walk.
        Ok(self.push(
            vec![r, total],
            out,
            ng,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
        ))
    }

    // ---------------------------------------------------------------- reductions

    /// Euclidean norm of all elements, as a `[1]` scalar.
    pub fn norm(&mut self, x: Var) -> Var {
        let n = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        let ng = self.needs(x);
        self.push(vec![1], vec![n], ng, Op::Norm(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![s], ng, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column sums of `x [R x C]`, shape `[C]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.dims2(x, "sum_rows")?;
        let mut out = vec![0.0; c];
        for row in self.value(x).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let ng = self.needs(x);
        Ok(self.push(vec![c], out, ng, Op::SumRows(x)))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode sweep from the scalar `loss`.
    ///
    /// Gradients of bound parameters are *added* into `params[slot]` (for
    /// tensors with `requires_grad`), so repeated calls accumulate until the
    /// caller zeroes them. The tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var, params: &mut [Tensor]) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let grads = self.gradients(loss);
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { slot: Some(slot) } = node.op {
                if let Some(g) = &grads[i] {
                    let p = params
                        .get_mut(slot)
                        .ok_or_else(|| Error::usage(format!("no parameter tensor for bound slot {slot}")))?;
                    if p.requires_grad() {
                        p.accumulate_grad(g);
                    }
                }
            }
        }
        self.nodes.clear();
        self.bound.clear();
        Ok(())
    }

    fn gradients(&self, loss: Var) -> Vec<Option<Vec<f64>>> {
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            let needs = |v: Var| nodes[v.0].needs_grad;
            let val = |v: Var| nodes[v.0].value.as_slice();
            match &node.op {
                Op::Leaf { .. } => {
                    grads[i] = Some(gout);
                    continue;
                }
                &Op::MatMul { a, b, ta, tb, m, k, n } => {
                    let (ar, ac) = if ta { (k, m) } else { (m, k) };
                    let (br, bc) = if tb { (n, k) } else { (k, n) };
                    if needs(a) {
                        let ga = slot(&mut grads, a, nodes);
                        if !ta {
                            // dA = dC * op(B)^T
                            gemm(MatRef::new(&gout, m, n), MatRef::view(val(b), br, bc, !tb), ga, true);
                        } else {
                            // dA = op(B) * dC^T
                            gemm(
                                MatRef::view(val(b), br, bc, tb),
                                MatRef::transposed(&gout, m, n),
                                ga,
                                true,
                            );
                        }
                    }
                    if needs(b) {
                        let gb = slot(&mut grads, b, nodes);
                        if !tb {
                            // dB = op(A)^T * dC
                            gemm(MatRef::view(val(a), ar, ac, !ta), MatRef::new(&gout, m, n), gb, true);
                        } else {
                            // dB = dC^T * op(A)
                            gemm(
                                MatRef::transposed(&gout, m, n),
                                MatRef::view(val(a), ar, ac, ta),
                                gb,
                                true,
                            );
                        }
                    }
                }
                &Op::Add(a, b) => {
                    for v in [a, b] {
                        if needs(v) {
                            axpy(slot(&mut grads, v, nodes), &gout, 1.0);
                        }
                    }
                }
                &Op::Sub(a, b) => {
                    if needs(a) {
                        axpy(slot(&mut grads, a, nodes), &gout, 1.0);
                    }
                    if needs(b) {
                        axpy(slot(&mut grads, b, nodes), &gout, -1.0);
                    }
                }
                &Op::Mul(a, b) => {
                    if needs(a) {
                        let bv = val(b);
                        let ga = slot(&mut grads, a, nodes);
                        for ((g, d), y) in ga.iter_mut().zip(&gout).zip(bv) {
                            *g += d * y;
                        }
                    }
                    if needs(b) {
                        let av = val(a);
                        let gb = slot(&mut grads, b, nodes);
                        for ((g, d), x) in gb.iter_mut().zip(&gout).zip(av) {
                            *g += d * x;
                        }
                    }
                }
                &Op::AddRowBias { x, bias } => {
                    if needs(x) {
                        axpy(slot(&mut grads, x, nodes), &gout, 1.0);
                    }
                    if needs(bias) {
                        let gb = slot(&mut grads, bias, nodes);
                        let c = gb.len();
                        for row in gout.chunks(c) {
                            gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                        }
                    }
                }
                &Op::Scale { x, factor } => {
                    if needs(x) {
                        axpy(slot(&mut grads, x, nodes), &gout, factor);
                    }
                }
                &Op::AddScalar { x } | &Op::Reshape(x) => {
                    if needs(x) {
                        axpy(slot(&mut grads, x, nodes), &gout, 1.0);
                    }
                }
                &Op::Relu(x) => {
                    let xv = val(x);
                    let gx = slot(&mut grads, x, nodes);
                    for ((g, d), v) in gx.iter_mut().zip(&gout).zip(xv) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                }
                &Op::Gelu(x) => {
                    let xv = val(x);
                    let gx = slot(&mut grads, x, nodes);
                    for ((g, d), &v) in gx.iter_mut().zip(&gout).zip(xv) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *g += d * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
                &Op::Softmax(x) => {
                    let y = &node.value;
                    let n = *node.shape.last().expect("non-empty");
                    let gx = slot(&mut grads, x, nodes);
                    for ((gr, dr), yr) in gx.chunks_mut(n).zip(gout.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((g, d), yy) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += yy * (d - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = *node.shape.last().expect("non-empty");
                    if needs(*gamma) {
                        let gg = slot(&mut grads, *gamma, nodes);
                        for (dr, hr) in gout.chunks(d).zip(xhat.chunks(d)) {
                            for ((g, dd), h) in gg.iter_mut().zip(dr).zip(hr) {
                                *g += dd * h;
                            }
                        }
                    }
                    if needs(*beta) {
                        let gb = slot(&mut grads, *beta, nodes);
                        for dr in gout.chunks(d) {
                            gb.iter_mut().zip(dr).for_each(|(g, dd)| *g += dd);
                        }
                    }
                    if needs(*x) {
                        let gv = val(*gamma);
                        let gx = slot(&mut grads, *x, nodes);
                        let df = d as f64;
                        let mut dxhat = vec![0.0; d];
                        for (r, (gr, dr)) in gx.chunks_mut(d).zip(gout.chunks(d)).enumerate() {
                            let hr = &xhat[r * d..(r + 1) * d];
                            for ((o, dd), g) in dxhat.iter_mut().zip(dr).zip(gv) {
                                *o = dd * g;
                            }
                            let s1: f64 = dxhat.iter().sum();
                            let s2: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                            let is = inv_std[r];
                            for ((g, dh), h) in gr.iter_mut().zip(&dxhat).zip(hr) {
                                *g += is / df * (df * dh - s1 - h * s2);
                            }
                        }
                    }
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let ckk = geom.c_in * geom.k * geom.k;
                    let hw = geom.ho * geom.wo;
                    if needs(*b) {
                        let gb = slot(&mut grads, *b, nodes);
                        for (g, row) in gb.iter_mut().zip(gout.chunks(hw)) {
                            *g += row.iter().sum::<f64>();
                        }
                    }
                    if needs(*w) {
                        let gw = slot(&mut grads, *w, nodes);
                        gemm(
                            MatRef::new(&gout, geom.c_out, hw),
                            MatRef::transposed(cols, ckk, hw),
                            gw,
                            true,
                        );
                    }
                    if needs(*x) {
                        let mut dcols = vec![0.0; ckk * hw];
                        gemm(
                            MatRef::transposed(val(*w), geom.c_out, ckk),
                            MatRef::new(&gout, geom.c_out, hw),
                            &mut dcols,
                            false,
                        );
                        let gx = slot(&mut grads, *x, nodes);
                        col2im(&dcols, geom, gx);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let gx = slot(&mut grads, *x, nodes);
                    for (d, &i) in gout.iter().zip(argmax) {
                        gx[i] += d;
                    }
                }
                Op::Gather { x, index } => {
                    if needs(*x) {
                        let gx = slot(&mut grads, *x, nodes);
                        for (d, &i) in gout.iter().zip(index.iter()) {
                            if i != PAD {
                                gx[i] += d;
                            }
                        }
                    }
                }
                Op::ScatterAdd { sources } => {
                    for (src, idx) in sources {
                        if needs(*src) {
                            let gs = slot(&mut grads, *src, nodes);
                            for (g, &i) in gs.iter_mut().zip(idx.iter()) {
                                *g += gout[i];
                            }
                        }
                    }
                }
                Op::Concat { parts, widths } => {
                    let total: usize = widths.iter().sum();
                    let rows = gout.len() / total;
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(widths) {
                        if needs(p) {
                            let gp = slot(&mut grads, p, nodes);
                            for r in 0..rows {
                                let src = &gout[r * total + offset..r * total + offset + w];
                                gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(g, d)| *g += d);
                            }
                        }
                        offset += w;
                    }
                }
                Op::ScaleRows { x, factors } => {
                    let c = node.shape[1];
                    let gx = slot(&mut grads, *x, nodes);
                    for ((gr, dr), f) in gx.chunks_mut(c).zip(gout.chunks(c)).zip(factors) {
                        gr.iter_mut().zip(dr).for_each(|(g, d)| *g += d * f);
                    }
                }
                &Op::MulRows { x, s } => {
                    let c = node.shape[1];
                    if needs(x) {
                        let sv = val(s);
                        let gx = slot(&mut grads, x, nodes);
                        for ((gr, dr), f) in gx.chunks_mut(c).zip(gout.chunks(c)).zip(sv) {
                            gr.iter_mut().zip(dr).for_each(|(g, d)| *g += d * f);
                        }
                    }
                    if needs(s) {
                        let xv = val(x);
                        let gs = slot(&mut grads, s, nodes);
                        for ((g, dr), xr) in gs.iter_mut().zip(gout.chunks(c)).zip(xv.chunks(c)) {
                            *g += dr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                Op::L2NormalizeRows { x, norms, eps } => {
                    let c = node.shape[1];
                    let y = &node.value;
                    let gx = slot(&mut grads, *x, nodes);
                    for (r, (gr, dr)) in gx.chunks_mut(c).zip(gout.chunks(c)).enumerate() {
                        let n = norms[r];
                        if n > *eps {
                            let yr = &y[r * c..(r + 1) * c];
                            let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((g, d), yy) in gr.iter_mut().zip(dr).zip(yr) {
                                *g += (d - yy * dot) / n;
                            }
                        } else {
                            gr.iter_mut().zip(dr).for_each(|(g, d)| *g += d / eps);
                        }
                    }
                }
                &Op::Norm(x) => {
                    let n = node.value[0];
                    if n > 0.0 {
                        let xv = val(x);
                        let gx = slot(&mut grads, x, nodes);
                        for (g, v) in gx.iter_mut().zip(xv) {
                            *g += gout[0] * v / n;
                        }
                    }
                }
                &Op::Sum(x) => {
                    let gx = slot(&mut grads, x, nodes);
                    gx.iter_mut().for_each(|g| *g += gout[0]);
                }
                &Op::SumRows(x) => {
                    let c = node.shape[0];
                    let gx = slot(&mut grads, x, nodes);
                    for row in gx.chunks_mut(c) {
                        row.iter_mut().zip(&gout).for_each(|(g, d)| *g += d);
                    }
                }
            }
        }
        grads
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, nodes: &[Node]) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut cols = vec![0.0; g.c_in * g.k * g.k * hw];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw = g.ho * g.wo;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &dcols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

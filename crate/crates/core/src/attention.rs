//! Transformer encoders: per-frame spatial attention and sliding-window
//! temporal attention with a decomposed relative positional bias.
//!
//! Token order everywhere is frame-major: row `t * N + r * cols + c`.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamGroup, ParamId, ParamStore};

/// Weights of one pre-norm encoder layer. Linear maps are stored
/// `[D_in x D_out]` and applied as `x W + b`; the per-head Q/K/V projections
/// are the column blocks of `wq`, `wk`, `wv`.
#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub ln1: (ParamId, ParamId),
    pub wq: (ParamId, ParamId),
    pub wk: (ParamId, ParamId),
    pub wv: (ParamId, ParamId),
    pub wo: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

/// An encoder layer's parameters bound onto a graph.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1: (Var, Var),
    pub wq: (Var, Var),
    pub wk: (Var, Var),
    pub wv: (Var, Var),
    pub wo: (Var, Var),
    pub ln2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

impl EncoderLayerParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        group: ParamGroup,
        dim: usize,
        mlp_ratio: usize,
    ) -> Self {
        let mut linear = |name: &str, d_in: usize, d_out: usize| {
            let w = store.add(
                format!("{prefix}.{name}.weight"),
                group,
                trunc_normal(rng, &[d_in, d_out], 0.02),
            );
            let b = store.add(format!("{prefix}.{name}.bias"), group, Tensor::zeros([d_out]));
            (w, b)
        };
        let wq = linear("q", dim, dim);
        let wk = linear("k", dim, dim);
        let wv = linear("v", dim, dim);
        let wo = linear("out", dim, dim);
        let fc1 = linear("fc1", dim, dim * mlp_ratio);
        let fc2 = linear("fc2", dim * mlp_ratio, dim);
        let mut norm = |name: &str| {
            let g = store.add(format!("{prefix}.{name}.gamma"), group, Tensor::ones([dim]));
            let b = store.add(format!("{prefix}.{name}.beta"), group, Tensor::zeros([dim]));
            (g, b)
        };
        let ln1 = norm("ln1");
        let ln2 = norm("ln2");
        Self {
            ln1,
            wq,
            wk,
            wv,
            wo,
            ln2,
            fc1,
            fc2,
        }
    }

    pub fn bind(&self, store: &ParamStore, g: &mut Graph) -> LayerVars {
        let mut b = |(w, bias): (ParamId, ParamId)| (store.bind(g, w), store.bind(g, bias));
        LayerVars {
            ln1: b(self.ln1),
            wq: b(self.wq),
            wk: b(self.wk),
            wv: b(self.wv),
            wo: b(self.wo),
            ln2: b(self.ln2),
            fc1: b(self.fc1),
            fc2: b(self.fc2),
        }
    }

    pub fn ids(&self) -> [ParamId; 16] {
        let p = [
            self.ln1, self.wq, self.wk, self.wv, self.wo, self.ln2, self.fc1, self.fc2,
        ];
        let mut out = [p[0].0; 16];
        for (i, (a, b)) in p.into_iter().enumerate() {
            out[2 * i] = a;
            out[2 * i + 1] = b;
        }
        out
    }
}

/// Per-layer relative tables `p_h, p_w: [(2m-1) x D]` and `p_t: [(2L-1) x D]`.
#[derive(Clone, Debug)]
pub struct RelPosTables {
    pub p_h: ParamId,
    pub p_w: ParamId,
    pub p_t: ParamId,
}

impl RelPosTables {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        window: usize,
        frames: usize,
        dim: usize,
    ) -> Self {
        let side = 2 * window - 1;
        let p_h = store.add(
            format!("{prefix}.rel_h"),
            ParamGroup::Temporal,
            trunc_normal(rng, &[side, dim], 0.02),
        );
        let p_w = store.add(
            format!("{prefix}.rel_w"),
            ParamGroup::Temporal,
            trunc_normal(rng, &[side, dim], 0.02),
        );
        let p_t = store.add(
            format!("{prefix}.rel_t"),
            ParamGroup::Temporal,
            trunc_normal(rng, &[2 * frames - 1, dim], 0.02),
        );
        Self { p_h, p_w, p_t }
    }

    pub fn bind(&self, store: &ParamStore, g: &mut Graph) -> (Var, Var, Var) {
        (
            store.bind(g, self.p_h),
            store.bind(g, self.p_w),
            store.bind(g, self.p_t),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub m: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    pub frames: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.stride == 0 || self.stride > self.m {
            return Err(Error::config(format!(
                "window stride must satisfy 1 <= s <= m, got m={} s={}",
                self.m, self.stride
            )));
        }
        if self.m > self.rows || self.m > self.cols {
            return Err(Error::config(format!(
                "window {} exceeds token grid {}x{}",
                self.m, self.rows, self.cols
            )));
        }
        if self.frames == 0 {
            return Err(Error::config("window spec needs at least one frame"));
        }
        Ok(())
    }

    pub fn window_tokens(&self) -> usize {
        self.m * self.m * self.frames
    }
}

/// Starts `0, s, 2s, ...` up to `extent - m`, plus a clamped `extent - m`.
pub fn window_starts(extent: usize, m: usize, stride: usize) -> Result<Vec<usize>> {
    if m == 0 || stride == 0 || m > extent {
        return Err(Error::config(format!(
            "no windows of size {m} stride {stride} on extent {extent}"
        )));
    }
    let last = extent - m;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("0 is always a start") != last {
        starts.push(last);
    }
    Ok(starts)
}

/// Flat token indices of every window: row-start outer, col-start inner;
/// inside a window the order is `(t, r, c)`.
pub fn window_partition(spec: &WindowSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let rs = window_starts(spec.rows, spec.m, spec.stride)?;
    let cs = window_starts(spec.cols, spec.m, spec.stride)?;
    let n = spec.rows * spec.cols;
    let mut out = Vec::with_capacity(rs.len() * cs.len());
    for &r0 in &rs {
        for &c0 in &cs {
            let mut w = Vec::with_capacity(spec.window_tokens());
            for t in 0..spec.frames {
                for r in r0..r0 + spec.m {
                    for c in c0..c0 + spec.m {
                        w.push(t * n + r * spec.cols + c);
                    }
                }
            }
            out.push(w);
        }
    }
    Ok(out)
}

/// Index tables mapping `[T x T]` bias entries into the per-axis products
/// `A = Q p^T` of shapes `[T x (2m-1)]` and `[T x (2L-1)]`.
#[derive(Clone, Debug)]
pub struct RelIndex {
    pub tokens: usize,
    pub window: usize,
    pub frames: usize,
    idx_h: Rc<[usize]>,
    idx_w: Rc<[usize]>,
    idx_t: Rc<[usize]>,
}

impl RelIndex {
    /// `coords[i] = (t, r, c)` of row `i`; offsets must fit the tables.
    pub fn new(coords: &[(usize, usize, usize)], window: usize, frames: usize) -> Result<Self> {
        let n = coords.len();
        let (sw, st) = (2 * window - 1, 2 * frames - 1);
        let mut idx_h = Vec::with_capacity(n * n);
        let mut idx_w = Vec::with_capacity(n * n);
        let mut idx_t = Vec::with_capacity(n * n);
        let off = |a: usize, b: usize, half: usize, what: &str| -> Result<usize> {
            let d = a as isize - b as isize + half as isize - 1;
            if d < 0 || d >= (2 * half - 1) as isize {
                return Err(Error::Numeric(format!(
                    "{what} offset {a}-{b} outside table of half-width {half}"
                )));
            }
            Ok(d as usize)
        };
        for (i, &(ti, ri, ci)) in coords.iter().enumerate() {
            for &(tj, rj, cj) in coords {
                idx_h.push(i * sw + off(ri, rj, window, "row")?);
                idx_w.push(i * sw + off(ci, cj, window, "col")?);
                idx_t.push(i * st + off(ti, tj, frames, "time")?);
            }
        }
        Ok(Self {
            tokens: n,
            window,
            frames,
            idx_h: idx_h.into(),
            idx_w: idx_w.into(),
            idx_t: idx_t.into(),
        })
    }
}

/// `E_ij = Q_i . (p_h[dr] + p_w[dc] + p_t[dt])` for one head; the tables are
/// already sliced to the head's `d` columns.
pub fn relative_bias(g: &mut Graph, q: Var, rel: &RelIndex, p_h: Var, p_w: Var, p_t: Var) -> Result<Var> {
    let t = rel.tokens;
    let a_h = g.matmul_nt(q, p_h)?;
    let a_w = g.matmul_nt(q, p_w)?;
    let a_t = g.matmul_nt(q, p_t)?;
    let e_h = g.gather(a_h, rel.idx_h.clone(), vec![t, t])?;
    let e_w = g.gather(a_w, rel.idx_w.clone(), vec![t, t])?;
    let e_t = g.gather(a_t, rel.idx_t.clone(), vec![t, t])?;
    let e = g.add(e_h, e_w)?;
    g.add(e, e_t)
}

/// One head: returns `(softmax((q k^T + bias) / sqrt(d)), weights . v)`.
pub fn head_attention(g: &mut Graph, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<(Var, Var)> {
    let d = *g
        .shape(q)
        .last()
        .ok_or_else(|| Error::shape("head_attention: scalar query"))?;
    let mut s = g.matmul_nt(q, k)?;
    if let Some(b) = bias {
        s = g.add(s, b)?;
    }
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    let a = g.softmax_last(s);
    let z = g.matmul(a, v)?;
    Ok((a, z))
}

fn linear(g: &mut Graph, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, b)
}

fn head_dim(g: &Graph, x: Var, heads: usize) -> Result<(usize, usize)> {
    let dim = g.shape(x)[1];
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "embed dim {dim} is not divisible by {heads} heads"
        )));
    }
    Ok((dim, dim / heads))
}

/// Full multi-head self-attention over `x [T x D]`, including the output
/// projection. `bias` is empty, one shared `[T x T]`, or one per head.
pub fn multi_head_attention(g: &mut Graph, x: Var, lv: &LayerVars, heads: usize, bias: &[Var]) -> Result<Var> {
    let (_, d) = head_dim(g, x, heads)?;
    if !(bias.is_empty() || bias.len() == 1 || bias.len() == heads) {
        return Err(Error::usage(format!("{} bias matrices for {heads} heads", bias.len())));
    }
    let q = linear(g, x, lv.wq)?;
    let k = linear(g, x, lv.wk)?;
    let v = linear(g, x, lv.wv)?;
    let mut zs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let vh = g.slice_cols(v, h * d, d)?;
        let b = match bias.len() {
            0 => None,
            1 => Some(bias[0]),
            _ => Some(bias[h]),
        };
        zs.push(head_attention(g, qh, kh, vh, b)?.1);
    }
    let z = g.concat_cols(&zs)?;
    linear(g, z, lv.wo)
}

fn mlp_block(g: &mut Graph, x: Var, lv: &LayerVars, eps: f64) -> Result<Var> {
    let xn = g.layer_norm(x, lv.ln2.0, lv.ln2.1, eps)?;
    let h = linear(g, xn, lv.fc1)?;
    let h = g.gelu(h);
    let m = linear(g, h, lv.fc2)?;
    g.add(x, m)
}

/// Pre-norm layer: `x + MSA(LN(x))`, then `+ MLP(LN(.))` with GELU.
pub fn encoder_layer(g: &mut Graph, x: Var, lv: &LayerVars, heads: usize, eps: f64, bias: &[Var]) -> Result<Var> {
    let xn = g.layer_norm(x, lv.ln1.0, lv.ln1.1, eps)?;
    let a = multi_head_attention(g, xn, lv, heads, bias)?;
    let x = g.add(x, a)?;
    mlp_block(g, x, lv, eps)
}

/// Precomputed gather/scatter indices for attention restricted to windows
/// of a `[tokens x dim]` matrix.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    windows: Vec<Vec<usize>>,
    /// `[window][head]` flat indices of the window's rows, head's columns.
    head_index: Vec<Vec<Rc<[usize]>>>,
    coverage: Vec<usize>,
    rel: Option<RelIndex>,
}

impl WindowPlan {
    fn build(tokens: usize, dim: usize, heads: usize, windows: Vec<Vec<usize>>, rel: Option<RelIndex>) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "embed dim {dim} is not divisible by {heads} heads"
            )));
        }
        let d = dim / heads;
        let mut coverage = vec![0usize; tokens];
        for w in &windows {
            for &i in w {
                coverage[i] += 1;
            }
        }
        if let Some(i) = coverage.iter().position(|&c| c == 0) {
            return Err(Error::Numeric(format!("token {i} is not covered by any window")));
        }
        let head_index = windows
            .iter()
            .map(|w| {
                (0..heads)
                    .map(|h| {
                        w.iter()
                            .flat_map(|&i| (h * d..(h + 1) * d).map(move |j| i * dim + j))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            tokens,
            dim,
            heads,
            windows,
            head_index,
            coverage,
            rel,
        })
    }

    /// Sliding windows across all frames, with relative-offset tables.
    pub fn temporal(spec: &WindowSpec, dim: usize, heads: usize) -> Result<Self> {
        let windows = window_partition(spec)?;
        let mut coords = Vec::with_capacity(spec.window_tokens());
        for t in 0..spec.frames {
            for r in 0..spec.m {
                for c in 0..spec.m {
                    coords.push((t, r, c));
                }
            }
        }
        let rel = RelIndex::new(&coords, spec.m, spec.frames)?;
        Self::build(spec.rows * spec.cols * spec.frames, dim, heads, windows, Some(rel))
    }

    /// One window per frame of `n` tokens.
    pub fn per_frame(frames: usize, n: usize, dim: usize, heads: usize) -> Result<Self> {
        let windows = (0..frames).map(|t| (t * n..(t + 1) * n).collect()).collect();
        Self::build(frames * n, dim, heads, windows, None)
    }

    pub fn windows(&self) -> &[Vec<usize>] {
        &self.windows
    }

    pub fn coverage(&self) -> &[usize] {
        &self.coverage
    }
}

/// Multi-head attention inside each window of `plan` over `x [tokens x D]`;
/// overlapping outputs are averaged by coverage count, then output-projected.
pub fn windowed_attention(
    g: &mut Graph,
    x: Var,
    lv: &LayerVars,
    plan: &WindowPlan,
    rel: Option<(Var, Var, Var)>,
) -> Result<Var> {
    if g.shape(x) != [plan.tokens, plan.dim] {
        return Err(Error::shape(format!(
            "windowed attention over {:?} with a plan for [{}, {}]",
            g.shape(x),
            plan.tokens,
            plan.dim
        )));
    }
    let (heads, d) = (plan.heads, plan.dim / plan.heads);
    let q = linear(g, x, lv.wq)?;
    let k = linear(g, x, lv.wk)?;
    let v = linear(g, x, lv.wv)?;
    let tables = match (rel, &plan.rel) {
        (Some((ph, pw, pt)), Some(idx)) => {
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                per_head.push((
                    g.slice_cols(ph, h * d, d)?,
                    g.slice_cols(pw, h * d, d)?,
                    g.slice_cols(pt, h * d, d)?,
                ));
            }
            Some((idx, per_head))
        }
        (Some(_), None) => return Err(Error::usage("relative tables given to a plan without offsets")),
        (None, _) => None,
    };
    let mut sources = Vec::with_capacity(plan.windows.len() * heads);
    for (w, win) in plan.windows.iter().enumerate() {
        let t = win.len();
        for h in 0..heads {
            let idx = plan.head_index[w][h].clone();
            let qw = g.gather(q, idx.clone(), vec![t, d])?;
            let kw = g.gather(k, idx.clone(), vec![t, d])?;
            let vw = g.gather(v, idx.clone(), vec![t, d])?;
            let bias = match &tables {
                Some((ri, per_head)) => {
                    let (a, b, c) = per_head[h];
                    Some(relative_bias(g, qw, ri, a, b, c)?)
                }
                None => None,
            };
            let (_, z) = head_attention(g, qw, kw, vw, bias)?;
            sources.push((z, idx));
        }
    }
    let mut z = g.scatter_add(vec![plan.tokens, plan.dim], sources)?;
    if plan.coverage.iter().any(|&c| c != 1) {
        let inv = plan.coverage.iter().map(|&c| 1.0 / c as f64).collect();
        z = g.scale_rows(z, inv)?;
    }
    linear(g, z, lv.wo)
}

fn windowed_layer(
    g: &mut Graph,
    x: Var,
    lv: &LayerVars,
    plan: &WindowPlan,
    eps: f64,
    rel: Option<(Var, Var, Var)>,
) -> Result<Var> {
    let xn = g.layer_norm(x, lv.ln1.0, lv.ln1.1, eps)?;
    let a = windowed_attention(g, xn, lv, plan, rel)?;
    let x = g.add(x, a)?;
    mlp_block(g, x, lv, eps)
}

/// Stacked encoder layers with attention confined to each frame; `x` is
/// `[(L*N) x D]`. An empty stack is the identity.
pub fn spatial_encode(g: &mut Graph, x: Var, layers: &[LayerVars], plan: &WindowPlan, eps: f64) -> Result<Var> {
    let mut x = x;
    for lv in layers {
        x = windowed_layer(g, x, lv, plan, eps, None)?;
    }
    Ok(x)
}

/// Stacked sliding-window encoder layers; `rel[i]` are layer `i`'s relative
/// tables, or empty for no relative bias.
pub fn temporal_encode(
    g: &mut Graph,
    x: Var,
    layers: &[LayerVars],
    rel: &[(Var, Var, Var)],
    plan: &WindowPlan,
    eps: f64,
) -> Result<Var> {
    if !rel.is_empty() && rel.len() != layers.len() {
        return Err(Error::usage(format!(
            "{} relative tables for {} layers",
            rel.len(),
            layers.len()
        )));
    }
    let mut x = x;
    for (i, lv) in layers.iter().enumerate() {
        x = windowed_layer(g, x, lv, plan, eps, rel.get(i).copied())?;
    }
    Ok(x)
}

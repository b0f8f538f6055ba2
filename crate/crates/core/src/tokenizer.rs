//! Convolutional tokenizer: conv stack, patch embedding and absolute positions.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{conv_out_extent, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, trunc_normal, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub const fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        }
    }
}

/// Max-pool applied after every conv layer's ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub conv_layers: Vec<ConvLayer>,
    pub pool: Option<PoolSpec>,
    pub patch_size: usize,
    pub embed_dim: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            conv_layers: vec![ConvLayer::new(3, 64, 7, 2, 1), ConvLayer::new(64, 384, 7, 2, 1)],
            pool: Some(PoolSpec::new(3, 2, 1)),
            patch_size: 1,
            embed_dim: 384,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() {
            return Err(Error::config("tokenizer needs at least one conv layer"));
        }
        if self.patch_size == 0 || self.embed_dim == 0 {
            return Err(Error::config("patch_size and embed_dim must be positive"));
        }
        if self.conv_layers[0].c_in != 3 {
            return Err(Error::config(format!(
                "first conv layer must take 3 channels, got {}",
                self.conv_layers[0].c_in
            )));
        }
        for (i, l) in self.conv_layers.iter().enumerate() {
            if l.c_out == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::config(format!("conv layer {i}: zero channel/kernel/stride")));
            }
            if i > 0 && self.conv_layers[i - 1].c_out != l.c_in {
                return Err(Error::config(format!(
                    "conv layer {i} takes {} channels but the previous layer makes {}",
                    l.c_in,
                    self.conv_layers[i - 1].c_out
                )));
            }
        }
        if let Some(p) = self.pool {
            if p.kernel == 0 || p.stride == 0 || p.padding >= p.kernel {
                return Err(Error::config(format!("invalid pool {p:?}")));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.conv_layers.last().map_or(3, |l| l.c_out)
    }

    /// Input width of the patch projection, `P * P * c`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels()
    }
}

/// Feature-map and token-grid extents for one input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub map_h: usize,
    pub map_w: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }
}

fn stage_extents(h: usize, w: usize, cfg: &TokenizerConfig) -> Result<(usize, usize)> {
    let (mut h, mut w) = (h, w);
    for l in &cfg.conv_layers {
        h = conv_out_extent(h, l.kernel, l.stride, l.padding)?;
        w = conv_out_extent(w, l.kernel, l.stride, l.padding)?;
        if let Some(p) = cfg.pool {
            h = conv_out_extent(h, p.kernel, p.stride, p.padding)?;
            w = conv_out_extent(w, p.kernel, p.stride, p.padding)?;
        }
    }
    Ok((h, w))
}

/// Token grid `(h', w')` for an `H x W` input, stage by stage.
pub fn token_grid_shape(height: usize, width: usize, cfg: &TokenizerConfig) -> Result<GridShape> {
    cfg.validate()?;
    let (map_h, map_w) = stage_extents(height, width, cfg)?;
    let p = cfg.patch_size;
    if map_h % p != 0 || map_w % p != 0 {
        return Err(Error::config(format!(
            "feature map {map_h}x{map_w} is not divisible by patch size {p}"
        )));
    }
    Ok(GridShape {
        map_h,
        map_w,
        channels: cfg.channels(),
        rows: map_h / p,
        cols: map_w / p,
    })
}

/// Parameter handles of the tokenizer.
#[derive(Clone, Debug)]
pub struct TokenizerParams {
    pub convs: Vec<(ParamId, ParamId)>,
    pub embed: ParamId,
}

impl TokenizerParams {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &TokenizerConfig) -> Self {
        let convs = cfg
            .conv_layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let fan_in = l.c_in * l.kernel * l.kernel;
                let w = kaiming_uniform(rng, &[l.c_out, l.c_in, l.kernel, l.kernel], fan_in);
                let w = store.add(format!("tokenizer.conv{i}.weight"), ParamGroup::Tokenizer, w);
                let b = store.add(
                    format!("tokenizer.conv{i}.bias"),
                    ParamGroup::Tokenizer,
                    Tensor::zeros([l.c_out]),
                );
                (w, b)
            })
            .collect();
        let e = trunc_normal(rng, &[cfg.patch_dim(), cfg.embed_dim], 0.02);
        let embed = store.add("tokenizer.embed", ParamGroup::Tokenizer, e);
        Self { convs, embed }
    }

    pub fn bind(&self, store: &ParamStore, g: &mut Graph) -> (Vec<(Var, Var)>, Var) {
        let convs = self
            .convs
            .iter()
            .map(|&(w, b)| (store.bind(g, w), store.bind(g, b)))
            .collect();
        (convs, store.bind(g, self.embed))
    }
}

/// conv -> ReLU -> pool for each configured layer; `frame` is `[3 x H x W]`.
pub fn conv_tokenize(g: &mut Graph, frame: Var, cfg: &TokenizerConfig, convs: &[(Var, Var)]) -> Result<Var> {
    if convs.len() != cfg.conv_layers.len() {
        return Err(Error::config(format!(
            "{} conv parameter pairs for {} layers",
            convs.len(),
            cfg.conv_layers.len()
        )));
    }
    let mut x = frame;
    for (l, &(w, b)) in cfg.conv_layers.iter().zip(convs) {
        x = g.conv2d(x, w, b, l.stride, l.padding)?;
        x = g.relu(x);
        if let Some(p) = cfg.pool {
            x = g.max_pool2d(x, p.kernel, p.stride, p.padding)?;
        }
    }
    Ok(x)
}

/// Flat indices turning a `[c x h x w]` map into `N` rows of `P*P*c` patch
/// values, flattened rows -> cols -> channels.
pub fn patch_index(c: usize, h: usize, w: usize, p: usize) -> Result<Rc<[usize]>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::config(format!(
            "feature map {h}x{w} is not divisible by patch size {p}"
        )));
    }
    let mut idx = Vec::with_capacity(c * h * w);
    for pr in 0..h / p {
        for pc in 0..w / p {
            for i in 0..p {
                for j in 0..p {
                    let (r, col) = (pr * p + i, pc * p + j);
                    idx.extend((0..c).map(|ch| (ch * h + r) * w + col));
                }
            }
        }
    }
    Ok(idx.into())
}

/// `[c x h x w]` map -> `[N x D]` patch embeddings through `e [(P*P*c) x D]`.
pub fn embed_patches(g: &mut Graph, map: Var, patch_size: usize, e: Var) -> Result<Var> {
    let (c, h, w) = match *g.shape(map) {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape(format!("embed_patches: expected [c,h,w], got {s:?}"))),
    };
    let idx = patch_index(c, h, w, patch_size)?;
    let n = (h / patch_size) * (w / patch_size);
    let patches = g.gather(map, idx, vec![n, patch_size * patch_size * c])?;
    g.matmul(patches, e)
}

/// `x + pos`; shapes must agree.
pub fn add_absolute_position(g: &mut Graph, x: Var, pos: Var) -> Result<Var> {
    g.add(x, pos)
}

/// Tokenizes each frame and stacks the patch embeddings frame-major into
/// `[(L*N) x D]`.
pub fn tokenize_frames(
    g: &mut Graph,
    frames: &[Var],
    cfg: &TokenizerConfig,
    convs: &[(Var, Var)],
    e: Var,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(frames.len());
    for &f in frames {
        let map = conv_tokenize(g, f, cfg, convs)?;
        rows.push(embed_patches(g, map, cfg.patch_size, e)?);
    }
    g.concat_rows(&rows)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn extent(i: usize, k: usize, s: usize, p: usize) -> usize {
        (i + 2 * p - k) / s + 1
    }

    #[test]
    fn grid_shape_default_config() {
        let cfg = TokenizerConfig::default();
        // 384 -> 190 -> 95 -> 46 -> 23
        let mut h = 384;
        for _ in 0..2 {
            h = extent(extent(h, 7, 2, 1), 3, 2, 1);
        }
        assert_eq!(h, 23);
        let g = token_grid_shape(384, 384, &cfg).unwrap();
        assert_eq!((g.rows, g.cols, g.tokens()), (23, 23, 529));
        let g = token_grid_shape(128, 128, &cfg).unwrap();
        assert_eq!((g.rows, g.cols, g.tokens()), (7, 7, 49));
    }

    #[test]
    fn single_patch_grid() {
        let cfg = TokenizerConfig {
            patch_size: 7,
            ..TokenizerConfig::default()
        };
        let g = token_grid_shape(128, 128, &cfg).unwrap();
        assert_eq!(g.tokens(), 1);
        let cfg = TokenizerConfig {
            patch_size: 2,
            ..TokenizerConfig::default()
        };
        assert!(matches!(token_grid_shape(128, 128, &cfg), Err(Error::Config(_))));
    }

    fn small_cfg() -> TokenizerConfig {
        TokenizerConfig {
            conv_layers: vec![ConvLayer::new(3, 4, 3, 2, 1), ConvLayer::new(4, 6, 3, 1, 1)],
            pool: Some(PoolSpec::new(3, 2, 1)),
            patch_size: 1,
            embed_dim: 5,
        }
    }

    fn run_tokenize(cfg: &TokenizerConfig, h: usize, w: usize, frame: &Tensor, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = TokenizerParams::init(&mut store, &mut rng, cfg);
        let mut g = Graph::new();
        let (convs, _) = p.bind(&store, &mut g);
        let x = g.input(frame);
        assert_eq!(frame.shape(), &[3, h, w]);
        let out = conv_tokenize(&mut g, x, cfg, &convs).unwrap();
        g.to_tensor(out)
    }

    #[test]
    fn zero_frame_gives_zero_map() {
        let cfg = small_cfg();
        let out = run_tokenize(&cfg, 20, 20, &Tensor::zeros([3, 20, 20]), 1);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_tokenize_default_shapes() {
        let cfg = TokenizerConfig::default();
        let frame = Tensor::full([3, 128, 128], 0.5);
        let out = run_tokenize(&cfg, 128, 128, &frame, 2);
        assert_eq!(out.shape(), &[384, 7, 7]);
    }

    #[test]
    #[ignore = "full 384x384 conv stack; run with --ignored"]
    fn conv_tokenize_384_shape() {
        let cfg = TokenizerConfig::default();
        let frame = Tensor::full([3, 384, 384], 0.5);
        let out = run_tokenize(&cfg, 384, 384, &frame, 2);
        assert_eq!(out.shape(), &[384, 23, 23]);
    }

    #[test]
    fn embed_patches_hand_flatten() {
        // 3 channels, 2x2 map, P = 2 -> one token = flatten(rows, cols, channels) * E.
        let (c, d) = (3, 4);
        let map = Tensor::from_fn([c, 2, 2], |i| i as f64 * 0.25 - 1.0);
        let e = Tensor::from_fn([4 * c, d], |i| ((i * 7) % 11) as f64 * 0.1 - 0.5);
        let mut flat = Vec::new();
        for r in 0..2 {
            for col in 0..2 {
                for ch in 0..c {
                    flat.push(map.data()[(ch * 2 + r) * 2 + col]);
                }
            }
        }
        let expect: Vec<f64> = (0..d)
            .map(|j| flat.iter().enumerate().map(|(i, v)| v * e.data()[i * d + j]).sum())
            .collect();
        let mut g = Graph::new();
        let (m, ev) = (g.input(&map), g.input(&e));
        let out = embed_patches(&mut g, m, 2, ev).unwrap();
        assert_eq!(g.shape(out), &[1, d]);
        for (a, b) in g.value(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_patches_p1_is_per_pixel_map() {
        let map = Tensor::from_fn([2, 2, 3], |i| (i as f64).sin());
        let e = Tensor::from_fn([2, 3], |i| i as f64 - 2.0);
        let mut g = Graph::new();
        let (m, ev) = (g.input(&map), g.input(&e));
        let out = embed_patches(&mut g, m, 1, ev).unwrap();
        assert_eq!(g.shape(out), &[6, 3]);
        for tok in 0..6 {
            let (r, c) = (tok / 3, tok % 3);
            for j in 0..3 {
                let expect: f64 = (0..2)
                    .map(|ch| map.data()[(ch * 2 + r) * 3 + c] * e.data()[ch * 3 + j])
                    .sum();
                assert!((g.value(out)[tok * 3 + j] - expect).abs() < 1e-12);
            }
        }
        let z = Tensor::zeros([2, 3]);
        let zv = g.input(&z);
        let out = embed_patches(&mut g, m, 1, zv).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn absolute_position_examples() {
        let x = Tensor::from_fn([3, 2], |i| i as f64 * 0.3);
        let pos = Tensor::from_fn([3, 2], |i| 1.0 - i as f64);
        let mut g = Graph::new();
        let (xv, pv) = (g.input(&x), g.input(&pos));
        let out = add_absolute_position(&mut g, xv, pv).unwrap();
        for i in 0..6 {
            assert_eq!(g.value(out)[i], x.data()[i] + pos.data()[i]);
        }
        let z = g.input(&Tensor::zeros([3, 2]));
        let out = add_absolute_position(&mut g, z, pv).unwrap();
        assert_eq!(g.value(out), pos.data());
        let out = add_absolute_position(&mut g, xv, z).unwrap();
        assert_eq!(g.value(out), x.data());
        let bad = g.input(&Tensor::zeros([2, 2]));
        assert!(add_absolute_position(&mut g, xv, bad).is_err());
    }

    #[test]
    fn tokenize_is_deterministic() {
        let cfg = small_cfg();
        let frame = Tensor::from_fn([3, 24, 24], |i| ((i * 31) % 17) as f64 / 17.0);
        let a = run_tokenize(&cfg, 24, 24, &frame, 9);
        let b = run_tokenize(&cfg, 24, 24, &frame, 9);
        assert_eq!(a.data(), b.data());
    }

    proptest! {
        #[test]
        fn grid_shape_matches_running_the_stack(h in 12usize..40, w in 12usize..40) {
            let cfg = small_cfg();
            let shape = token_grid_shape(h, w, &cfg).unwrap();
            let frame = Tensor::full([3, h, w], 0.3);
            let out = run_tokenize(&cfg, h, w, &frame, 0);
            prop_assert_eq!(out.shape(), &[shape.channels, shape.map_h, shape.map_w]);
        }
    }
}

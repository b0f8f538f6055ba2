//! The full sequence model and its checkpoint file.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "STVC" | u32 version = 1
//! u32 config_len | config_len bytes of `key = value` text
//! u64 iteration
//! u32 tensor_count
//! per tensor: u32 name_len | name (UTF-8) | u8 dtype (1 = f64)
//!             u32 ndim | ndim x u32 extents | product(extents) x f64
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{fuse_branches, netvlad_aggregate, read_file, ByteReader, NetVladParams};
use crate::attention::{spatial_encode, temporal_encode, EncoderLayerParams, RelPosTables, WindowPlan, WindowSpec};
use crate::autodiff::{Graph, Tensor, Var};
use crate::config::{ModelConfig, RunConfig, SpatialPos, TemporalPos};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamGroup, ParamId, ParamStore};
use crate::tokenizer::{token_grid_shape, tokenize_frames, GridShape, TokenizerParams};

pub struct SequenceModel {
    pub config: ModelConfig,
    pub grid: GridShape,
    pub store: ParamStore,
    tokenizer: TokenizerParams,
    spatial_pos: Option<ParamId>,
    temporal_pos: Option<ParamId>,
    spatial: Vec<EncoderLayerParams>,
    temporal: Vec<EncoderLayerParams>,
    rel: Vec<RelPosTables>,
    netvlad: NetVladParams,
    spatial_plan: Option<WindowPlan>,
    temporal_plan: Option<WindowPlan>,
    pos_tile: Rc<[usize]>,
}

impl SequenceModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tcfg = config.tokenizer();
        let grid = token_grid_shape(config.image_height, config.image_width, &tcfg)?;
        let (n, l, d) = (grid.tokens(), config.seq_len, config.embed_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tokenizer = TokenizerParams::init(&mut store, &mut rng, &tcfg);

        let spatial_pos = (config.spatial_layers > 0 && config.spatial_pos == SpatialPos::Absolute).then(|| {
            store.add(
                "spatial.pos",
                ParamGroup::Spatial,
                trunc_normal(&mut rng, &[n, d], 0.02),
            )
        });
        let spatial = (0..config.spatial_layers)
            .map(|i| {
                EncoderLayerParams::init(
                    &mut store,
                    &mut rng,
                    &format!("spatial.layer{i}"),
                    ParamGroup::Spatial,
                    d,
                    config.mlp_ratio,
                )
            })
            .collect();

        let temporal_pos = (config.temporal_layers > 0 && config.temporal_pos == TemporalPos::Absolute).then(|| {
            store.add(
                "temporal.pos",
                ParamGroup::Temporal,
                trunc_normal(&mut rng, &[l * n, d], 0.02),
            )
        });
        let mut temporal = Vec::with_capacity(config.temporal_layers);
        let mut rel = Vec::new();
        for i in 0..config.temporal_layers {
            let prefix = format!("temporal.layer{i}");
            temporal.push(EncoderLayerParams::init(
                &mut store,
                &mut rng,
                &prefix,
                ParamGroup::Temporal,
                d,
                config.mlp_ratio,
            ));
            if config.temporal_pos == TemporalPos::Relative {
                rel.push(RelPosTables::init(&mut store, &mut rng, &prefix, config.window, l, d));
            }
        }
        let netvlad = NetVladParams::init(&mut store, &mut rng, config.clusters, d);

        let spatial_plan = (config.spatial_layers > 0)
            .then(|| WindowPlan::per_frame(l, n, d, config.heads))
            .transpose()?;
        let temporal_plan = if config.temporal_layers > 0 {
            let spec = WindowSpec {
                m: config.window,
                stride: config.window_stride,
                rows: grid.rows,
                cols: grid.cols,
                frames: l,
            };
            Some(WindowPlan::temporal(&spec, d, config.heads)?)
        } else {
            None
        };
        let pos_tile = (0..l * n * d).map(|i| i % (n * d)).collect();
        Ok(Self {
            config: config.clone(),
            grid,
            store,
            tokenizer,
            spatial_pos,
            temporal_pos,
            spatial,
            temporal,
            rel,
            netvlad,
            spatial_plan,
            temporal_plan,
            pos_tile,
        })
    }

    pub fn descriptor_dim(&self) -> usize {
        self.config.descriptor_dim()
    }

    /// Records the forward pass for one sequence of `seq_len` frames, each
    /// `[3 x H x W]`; returns the unit-norm `[K*D]` descriptor.
    pub fn forward(&self, g: &mut Graph, frames: &[Tensor]) -> Result<Var> {
        let cfg = &self.config;
        if frames.len() != cfg.seq_len {
            return Err(Error::shape(format!(
                "model expects {} frames, got {}",
                cfg.seq_len,
                frames.len()
            )));
        }
        let want = [3, cfg.image_height, cfg.image_width];
        if let Some(f) = frames.iter().find(|f| f.shape() != want) {
            return Err(Error::shape(format!(
                "frame shape {:?}, model expects {want:?}",
                f.shape()
            )));
        }
        let (n, l, d) = (self.grid.tokens(), cfg.seq_len, cfg.embed_dim);
        let (convs, e) = self.tokenizer.bind(&self.store, g);
        let inputs: Vec<Var> = frames.iter().map(|f| g.input(f)).collect();
        let tokens = tokenize_frames(g, &inputs, &cfg.tokenizer(), &convs, e)?;

        let xs = match &self.spatial_plan {
            Some(plan) => {
                let mut x = tokens;
                if let Some(p) = self.spatial_pos {
                    let pos = self.store.bind(g, p);
                    let tiled = g.gather(pos, self.pos_tile.clone(), vec![l * n, d])?;
                    x = g.add(x, tiled)?;
                }
                let layers: Vec<_> = self.spatial.iter().map(|p| p.bind(&self.store, g)).collect();
                Some(spatial_encode(g, x, &layers, plan, cfg.layer_norm_eps)?)
            }
            None => None,
        };
        let xt = match &self.temporal_plan {
            Some(plan) => {
                let mut x = tokens;
                if let Some(p) = self.temporal_pos {
                    let pos = self.store.bind(g, p);
                    x = g.add(x, pos)?;
                }
                let layers: Vec<_> = self.temporal.iter().map(|p| p.bind(&self.store, g)).collect();
                let rel: Vec<_> = self.rel.iter().map(|r| r.bind(&self.store, g)).collect();
                Some(temporal_encode(g, x, &layers, &rel, plan, cfg.layer_norm_eps)?)
            }
            None => None,
        };
        let fused = fuse_branches(g, xs, xt)?;
        let (c, w, b) = self.netvlad.bind(&self.store, g);
        netvlad_aggregate(g, fused, c, w, b)
    }

    /// Descriptor of one sequence on a throwaway graph.
    pub fn describe(&self, frames: &[Tensor]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, frames)?;
        let v = g.value(out).to_vec();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("descriptor contains non-finite values".into()));
        }
        Ok(v)
    }

    pub fn save_checkpoint(&self, path: &Path, run: &RunConfig, iteration: u64) -> Result<()> {
        if run.model != self.config {
            return Err(Error::usage(
                "checkpoint config snapshot differs from the model's config",
            ));
        }
        let text = run.to_text();
        let mut f = BufWriter::new(fs::File::create(path)?);
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&1u32.to_le_bytes())?;
        f.write_all(&(text.len() as u32).to_le_bytes())?;
        f.write_all(text.as_bytes())?;
        f.write_all(&iteration.to_le_bytes())?;
        f.write_all(&(self.store.len() as u32).to_le_bytes())?;
        for id in self.store.ids() {
            let name = self.store.name(id);
            let t = self.store.get(id);
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            f.write_all(&[1u8])?;
            f.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &e in t.shape() {
                f.write_all(&(e as u32).to_le_bytes())?;
            }
            for v in t.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Rebuilds the model from the embedded config and restores every tensor.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, RunConfig, u64)> {
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(&bytes, path);
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        let run = RunConfig::parse(text).map_err(|e| Error::format(path, format!("embedded config: {e}")))?;
        let iteration = r.u64()?;
        let count = r.u32()? as usize;
        let mut model = Self::new(&run.model, 0)?;
        if count != model.store.len() {
            return Err(Error::format(
                path,
                format!("{count} tensors stored, config needs {}", model.store.len()),
            ));
        }
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8_lossy(r.take(nlen)?).into_owned();
            let dtype = r.take(1)?[0];
            if dtype != 1 {
                return Err(Error::format(path, format!("tensor {name}: unsupported dtype {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::format(path, format!("unexpected tensor {name}")))?;
            if model.store.get(id).shape() != shape.as_slice() {
                return Err(Error::format(
                    path,
                    format!(
                        "tensor {name} has shape {shape:?}, config needs {:?}",
                        model.store.get(id).shape()
                    ),
                ));
            }
            let vals = r.f64s(shape.iter().product())?;
            model.store.assign(id, &vals)?;
        }
        r.finish()?;
        Ok((model, run, iteration))
    }
}

const CKPT_MAGIC: &[u8; 4] = b"STVC";

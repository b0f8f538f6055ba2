//! Descriptor extraction, brute-force retrieval, Recall@K, FLOP accounting
//! and the ablation harness.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};

use crate::aggregation::{write_descriptors, PcaModel, SequenceDescriptor};
use crate::attention::window_starts;
use crate::autodiff::{conv_out_extent, Tensor};
use crate::config::{ModelConfig, RunConfig, ScenarioConfig, TemporalPos, TrainConfig};
use crate::dataset::{
    generate_world_with, geo_distance, synthetic_split, CoordMode, Dataset, FrameSequence, GeoTag, RenderOptions,
    SplitData,
};
use crate::error::{Error, Result};
use crate::model::SequenceModel;
use crate::tokenizer::token_grid_shape;
use crate::training::train;

/// Sequences of one dataset with frames pre-resized to the model input.
#[derive(Clone, Debug)]
pub struct SequenceSet {
    pub tensors: Vec<Tensor>,
    pub sequences: Vec<FrameSequence>,
}

impl SequenceSet {
    pub fn new(data: &Dataset, cfg: &ModelConfig, stride: usize) -> Self {
        let tensors = (0..data.len())
            .map(|i| data.frame_tensor(i, cfg.image_height, cfg.image_width))
            .collect();
        Self {
            tensors,
            sequences: data.sequences(cfg.seq_len, stride),
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn frames(&self, i: usize) -> Vec<Tensor> {
        self.sequences[i]
            .frames
            .iter()
            .map(|&f| self.tensors[f].clone())
            .collect()
    }

    pub fn tags(&self) -> Vec<SeqTag> {
        self.sequences.iter().map(SeqTag::from).collect()
    }
}

/// Database and query sequences of one split.
#[derive(Clone, Debug)]
pub struct SplitSequences {
    pub db: SequenceSet,
    pub query: SequenceSet,
}

impl SplitSequences {
    pub fn new(split: &SplitData, cfg: &ModelConfig, stride: usize) -> Self {
        Self {
            db: SequenceSet::new(&split.db, cfg, stride),
            query: SequenceSet::new(&split.query, cfg, stride),
        }
    }
}

/// One descriptor per sequence, in sequence order.
pub fn describe_all(model: &SequenceModel, set: &SequenceSet) -> Result<Vec<Vec<f64>>> {
    (0..set.len()).map(|i| model.describe(&set.frames(i))).collect()
}

/// Recall@K of `query` against `db` under the current model.
pub fn split_recall(model: &SequenceModel, split: &SplitSequences, k: usize, thr: Threshold) -> Result<f64> {
    let db = describe_all(model, &split.db)?;
    let q = describe_all(model, &split.query)?;
    let r = retrieve_topk(&q, &db, k)?;
    recall_at_k(&r, &split.query.tags(), &split.db.tags(), k, thr)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per query: database indices by decreasing cosine similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub indices: Vec<Vec<usize>>,
    pub scores: Vec<Vec<f64>>,
}

/// Exact ranking of every database row for each query; equal scores keep
/// the lower database index first.
pub fn retrieve_topk(queries: &[Vec<f64>], db: &[Vec<f64>], kmax: usize) -> Result<RetrievalResult> {
    if db.is_empty() {
        return Err(Error::usage("retrieval needs a non-empty database"));
    }
    let dim = db[0].len();
    if db.iter().chain(queries).any(|r| r.len() != dim) {
        return Err(Error::shape(format!("descriptor dims differ from {dim}")));
    }
    let k = kmax.min(db.len());
    let mut indices = Vec::with_capacity(queries.len());
    let mut scores = Vec::with_capacity(queries.len());
    for q in queries {
        let s: Vec<f64> = db.iter().map(|d| cosine(q, d)).collect();
        let mut order: Vec<usize> = (0..db.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        order.truncate(k);
        scores.push(order.iter().map(|&i| s[i]).collect());
        indices.push(order);
    }
    Ok(RetrievalResult { indices, scores })
}

/// Ground truth of one sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeqTag {
    pub tag: GeoTag,
    pub traversal: u32,
    /// Frame index of the sequence center on its traversal.
    pub center_index: usize,
}

impl From<&FrameSequence> for SeqTag {
    fn from(s: &FrameSequence) -> Self {
        Self {
            tag: s.tag,
            traversal: s.traversal,
            center_index: s.center_index,
        }
    }
}

/// When a retrieved database sequence counts as correct.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    /// Geographic distance in meters.
    Radius(f64),
    /// Center frame indices within this many frames (aligned traversals).
    Frames(usize),
}

fn is_match(q: &SeqTag, d: &SeqTag, thr: Threshold) -> Result<bool> {
    Ok(match thr {
        Threshold::Radius(r) => geo_distance(&q.tag, &d.tag)? <= r,
        Threshold::Frames(n) => q.center_index.abs_diff(d.center_index) <= n,
    })
}

/// Fraction of queries with a correct database entry among the top `k`.
pub fn recall_at_k(
    result: &RetrievalResult,
    query_tags: &[SeqTag],
    db_tags: &[SeqTag],
    k: usize,
    thr: Threshold,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::usage("Recall@K needs K >= 1"));
    }
    if query_tags.len() != result.indices.len() {
        return Err(Error::usage(format!(
            "{} query tags for {} queries",
            query_tags.len(),
            result.indices.len()
        )));
    }
    if result.indices.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (q, ranked) in query_tags.iter().zip(&result.indices) {
        for &i in ranked.iter().take(k) {
            let d = db_tags
                .get(i)
                .ok_or_else(|| Error::usage(format!("no tag for database entry {i}")))?;
            if is_match(q, d, thr)? {
                hits += 1;
                break;
            }
        }
    }
    Ok(hits as f64 / result.indices.len() as f64)
}

/// `<descriptor file>.tags.csv`.
pub fn tags_path(stvd: &Path) -> PathBuf {
    let mut s = stvd.as_os_str().to_owned();
    s.push(".tags.csv");
    PathBuf::from(s)
}

const TAGS_HEADER: &str = "index,mode,a,b,traversal_id,center_frame";

pub fn write_tags(path: &Path, tags: &[SeqTag]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{TAGS_HEADER}")?;
    for (i, t) in tags.iter().enumerate() {
        let mode = match t.tag.mode {
            CoordMode::Planar => "planar",
            CoordMode::LatLon => "latlon",
        };
        writeln!(
            f,
            "{i},{mode},{},{},{},{}",
            t.tag.a, t.tag.b, t.traversal, t.center_index
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_tags(path: &Path) -> Result<Vec<SeqTag>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TAGS_HEADER) {
        return Err(Error::format(path, format!("line 1: expected header {TAGS_HEADER}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format(path, format!("line {}: malformed row '{line}'", i + 2));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 || f[0].parse::<usize>().ok() != Some(out.len()) {
            return Err(bad());
        }
        let mode = match f[1] {
            "planar" => CoordMode::Planar,
            "latlon" => CoordMode::LatLon,
            _ => return Err(bad()),
        };
        out.push(SeqTag {
            tag: GeoTag {
                mode,
                a: f[2].parse().map_err(|_| bad())?,
                b: f[3].parse().map_err(|_| bad())?,
            },
            traversal: f[4].parse().map_err(|_| bad())?,
            center_index: f[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Describes every sequence of `set`, optionally PCA-reduces, and writes the
/// STVD matrix to `out` plus the tag sidecar next to it.
pub fn extract_descriptors(
    model: &SequenceModel,
    set: &SequenceSet,
    pca: Option<&PcaModel>,
    out: &Path,
) -> Result<Vec<Vec<f64>>> {
    if set.is_empty() {
        return Err(Error::usage(format!(
            "dataset yields no sequences of length {}",
            model.config.seq_len
        )));
    }
    let mut rows = describe_all(model, set)?;
    if let Some(p) = pca {
        rows = rows
            .into_iter()
            .map(|values| p.apply(&SequenceDescriptor { values }).map(|d| d.values))
            .collect::<Result<_>>()?;
    }
    write_descriptors(out, &rows)?;
    write_tags(&tags_path(out), &set.tags())?;
    Ok(rows)
}

/// Multiply-accumulate counts of one sequence forward pass, by stage.
///
/// Q/K/V and output projections are applied once per token (overlapping
/// temporal windows share them); scores and the weighted sum are counted
/// per window.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub height: usize,
    pub width: usize,
    pub tokenizer: u64,
    pub spatial: u64,
    pub temporal: u64,
    pub aggregation: u64,
    /// Score and weighted-sum MACs inside `spatial`.
    pub spatial_score_apply: u64,
    /// Score and weighted-sum MACs inside `temporal`.
    pub temporal_score_apply: u64,
    pub config: ModelConfig,
}

impl FlopReport {
    pub fn total_macs(&self) -> u64 {
        self.tokenizer + self.spatial + self.temporal + self.aggregation
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    /// CSV with a leading comment line stating the convention.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# FLOPs = 2 x multiply-accumulates; input {}x{}, {} frames; norms, softmax and activations not counted; \
             profilers that count one multiply-accumulate as one FLOP report the gmacs column\n",
            self.height, self.width, self.config.seq_len
        );
        s.push_str("stage,macs,flops,gmacs,gflops\n");
        let rows = [
            ("tokenizer", self.tokenizer),
            ("spatial", self.spatial),
            ("temporal", self.temporal),
            ("aggregation", self.aggregation),
            ("total", self.total_macs()),
        ];
        for (name, macs) in rows {
            s.push_str(&format!(
                "{name},{macs},{},{:.4},{:.4}\n",
                2 * macs,
                macs as f64 / 1e9,
                2.0 * macs as f64 / 1e9
            ));
        }
        s
    }
}

/// Score plus weighted-sum MACs of dense attention over `t` tokens.
pub fn score_apply_macs(t: usize, dim: usize) -> u64 {
    2 * (t * t * dim) as u64
}

/// Closed-form MAC counts for `cfg` at an `height x width` input.
pub fn count_flops(cfg: &ModelConfig, height: usize, width: usize) -> Result<FlopReport> {
    let tok = cfg.tokenizer();
    let grid = token_grid_shape(height, width, &tok)?;
    let l = cfg.seq_len as u64;
    let d = cfg.embed_dim;
    let n = grid.tokens();

    let mut per_frame = 0u64;
    let (mut h, mut w) = (height, width);
    for c in &cfg.conv_layers {
        h = conv_out_extent(h, c.kernel, c.stride, c.padding)?;
        w = conv_out_extent(w, c.kernel, c.stride, c.padding)?;
        per_frame += (c.c_in * c.c_out * c.kernel * c.kernel * h * w) as u64;
        if let Some(p) = cfg.pool {
            h = conv_out_extent(h, p.kernel, p.stride, p.padding)?;
            w = conv_out_extent(w, p.kernel, p.stride, p.padding)?;
        }
    }
    per_frame += (n * tok.patch_dim() * d) as u64;
    let tokenizer = l * per_frame;

    let all = n * cfg.seq_len;
    let proj = 4 * (all * d * d) as u64;
    let mlp = 2 * (all * d * cfg.mlp_ratio * d) as u64;

    let spatial_score_apply = cfg.spatial_layers as u64 * l * score_apply_macs(n, d);
    let spatial = spatial_score_apply + cfg.spatial_layers as u64 * (proj + mlp);

    let temporal_score_apply = if cfg.temporal_layers == 0 {
        0
    } else {
        let windows = window_starts(grid.rows, cfg.window, cfg.window_stride)?.len()
            * window_starts(grid.cols, cfg.window, cfg.window_stride)?.len();
        let t = cfg.window * cfg.window * cfg.seq_len;
        cfg.temporal_layers as u64 * windows as u64 * score_apply_macs(t, d)
    };
    let temporal = temporal_score_apply + cfg.temporal_layers as u64 * (proj + mlp);

    // soft-assignment logits and residual sums
    let aggregation = 2 * (all * cfg.clusters * d) as u64;

    Ok(FlopReport {
        height,
        width,
        tokenizer,
        spatial,
        temporal,
        aggregation,
        spatial_score_apply,
        temporal_score_apply,
        config: cfg.clone(),
    })
}

/// Train, validation and test splits of a synthetic scenario; each split is
/// its own world so test places are never seen in training.
#[derive(Clone, Debug)]
pub struct ScenarioData {
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

pub fn render_scenario(sc: &ScenarioConfig, seed: u64) -> Result<ScenarioData> {
    let opts = RenderOptions {
        height: sc.render_height,
        width: sc.render_width,
        ..RenderOptions::default()
    };
    let split = |k: u64| -> Result<SplitData> {
        let s = seed.wrapping_mul(3).wrapping_add(k);
        let world = generate_world_with(s, sc.places, sc.spacing, sc.latent_dim)?;
        synthetic_split(&world, &sc.db_condition, &sc.query_condition, sc.query_shift, s, &opts)
    };
    Ok(ScenarioData {
        train: split(0)?,
        val: split(1)?,
        test: split(2)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Pos,
    Window,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pos" => Ok(Self::Pos),
            "window" => Ok(Self::Window),
            _ => Err(Error::usage(format!("unknown ablation axis '{s}' (pos|window)"))),
        }
    }
}

/// Named model configurations of one ablation axis, derived from `base`.
pub fn ablation_variants(axis: AblationAxis, base: &RunConfig) -> Vec<(String, ModelConfig)> {
    let m = &base.model;
    match axis {
        AblationAxis::Pos => {
            let spatial_only = ModelConfig {
                temporal_layers: 0,
                ..m.clone()
            };
            let temporal = |pos| ModelConfig {
                spatial_layers: 0,
                temporal_pos: pos,
                ..m.clone()
            };
            let full = ModelConfig {
                temporal_pos: TemporalPos::Relative,
                ..m.clone()
            };
            vec![
                ("spatial-only".into(), spatial_only),
                ("temporal-none".into(), temporal(TemporalPos::None)),
                ("temporal-absolute".into(), temporal(TemporalPos::Absolute)),
                ("temporal-relative".into(), temporal(TemporalPos::Relative)),
                ("full-relative".into(), full),
            ]
        }
        AblationAxis::Window => base
            .scenario
            .ablation_windows
            .iter()
            .map(|&(w, s)| {
                (
                    format!("window-{w}x{w}-stride-{s}"),
                    ModelConfig {
                        window: w,
                        window_stride: s,
                        ..m.clone()
                    },
                )
            })
            .collect(),
    }
}

/// Mean Recall@{1,5,10} of one variant over the seeds, or the first error.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub recall: std::result::Result<[f64; 3], String>,
    pub queries: usize,
    pub db_size: usize,
}

pub const METRICS_HEADER: &str = "variant,recall@1,recall@5,recall@10,queries,db_size";

impl AblationRow {
    pub fn csv_line(&self) -> String {
        match &self.recall {
            Ok(r) => format!(
                "{},{:.6},{:.6},{:.6},{},{}",
                self.variant, r[0], r[1], r[2], self.queries, self.db_size
            ),
            Err(_) => format!("{},nan,nan,nan,{},{}", self.variant, self.queries, self.db_size),
        }
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Trains one model and returns its test Recall@{1,5,10} plus
/// `(queries, db_size)`.
pub fn train_and_evaluate(
    model_cfg: &ModelConfig,
    run: &RunConfig,
    data: &ScenarioData,
    seed: u64,
) -> Result<([f64; 3], usize, usize)> {
    let mut model = SequenceModel::new(model_cfg, seed)?;
    let stride = run.train.seq_stride;
    let train_seqs = SplitSequences::new(&data.train, model_cfg, stride);
    let val_seqs = SplitSequences::new(&data.val, model_cfg, stride);
    let test_seqs = SplitSequences::new(&data.test, model_cfg, stride);
    let cfg = TrainConfig {
        seed,
        ..run.train.clone()
    };
    train(&mut model, &train_seqs, Some(&val_seqs), &cfg)?;
    let db = describe_all(&model, &test_seqs.db)?;
    let q = describe_all(&model, &test_seqs.query)?;
    let r = retrieve_topk(&q, &db, 10)?;
    let (qt, dt) = (test_seqs.query.tags(), test_seqs.db.tags());
    let thr = Threshold::Radius(run.scenario.eval_radius);
    let mut out = [0.0; 3];
    for (o, k) in out.iter_mut().zip([1, 5, 10]) {
        *o = recall_at_k(&r, &qt, &dt, k, thr)?;
    }
    Ok((out, q.len(), db.len()))
}

/// Trains and evaluates every variant of `axis` on the scenario of `run`,
/// averaging over `scenario.ablation_seeds` seeds starting at `train.seed`.
/// A failing variant yields an error row; the others still run.
pub fn run_ablation(axis: AblationAxis, run: &RunConfig) -> Result<Vec<AblationRow>> {
    let seeds = run.scenario.ablation_seeds.max(1) as u64;
    let data: Vec<ScenarioData> = (0..seeds)
        .map(|s| render_scenario(&run.scenario, run.train.seed + s))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(axis, run) {
        let mut sum = [0.0; 3];
        let (mut queries, mut db_size) = (0, 0);
        let mut failure = None;
        for (s, d) in data.iter().enumerate() {
            let seed = run.train.seed + s as u64;
            match cfg.validate().and_then(|_| train_and_evaluate(&cfg, run, d, seed)) {
                Ok((r, q, n)) => {
                    info!("{name} seed {seed}: R@1 {:.4} R@5 {:.4} R@10 {:.4}", r[0], r[1], r[2]);
                    sum.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                    queries = q;
                    db_size = n;
                }
                Err(e) => {
                    warn!("ablation variant {name} failed: {e}");
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        rows.push(AblationRow {
            variant: name,
            recall: match failure {
                Some(e) => Err(e),
                None => Ok(sum.map(|v| v / seeds as f64)),
            },
            queries,
            db_size,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn planar(x: f64, center: usize) -> SeqTag {
        SeqTag {
            tag: GeoTag::planar(x, 0.0),
            traversal: 0,
            center_index: center,
        }
    }

    fn random_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn retrieval_examples() {
        let db = random_rows(1, 6, 4);
        let q = vec![db[3].clone()];
        let r = retrieve_topk(&q, &db, 3).unwrap();
        assert_eq!(r.indices[0][0], 3);
        assert!((r.scores[0][0] - 1.0).abs() < 1e-12);
        let r = retrieve_topk(&q, &db, 100).unwrap();
        assert_eq!(r.indices[0].len(), 6);
        let mut sorted = r.indices[0].clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        // ties keep the lower index
        let db = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]];
        let r = retrieve_topk(&[vec![1.0, 0.0]], &db, 3).unwrap();
        assert_eq!(r.indices[0], vec![0, 2, 1]);
        assert!(retrieve_topk(&[vec![1.0]], &[], 1).is_err());
    }

    #[test]
    fn retrieval_matches_full_sort_oracle() {
        let db = random_rows(2, 20, 5);
        let qs = random_rows(3, 7, 5);
        let r = retrieve_topk(&qs, &db, 20).unwrap();
        for (qi, q) in qs.iter().enumerate() {
            let mut scored: Vec<(f64, usize)> = db
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let dot: f64 = q.iter().zip(d).map(|(a, b)| a * b).sum();
                    let n = (q.iter().map(|a| a * a).sum::<f64>() * d.iter().map(|a| a * a).sum::<f64>()).sqrt();
                    (dot / n, i)
                })
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let oracle: Vec<usize> = scored.iter().map(|p| p.1).collect();
            assert_eq!(r.indices[qi], oracle);
            assert!(r.scores[qi].windows(2).all(|w| w[0] >= w[1]));
        }
    }

    fn result(ranked: Vec<Vec<usize>>) -> RetrievalResult {
        let scores = ranked.iter().map(|r| vec![0.0; r.len()]).collect();
        RetrievalResult {
            indices: ranked,
            scores,
        }
    }

    #[test]
    fn recall_hand_enumerated_cases() {
        // database at x = 0, 10, 20, ..., 90 (center frames 0..9)
        let db: Vec<SeqTag> = (0..10).map(|i| planar(10.0 * i as f64, i)).collect();
        let exact = result((0..10).map(|i| vec![i]).collect());
        assert_eq!(recall_at_k(&exact, &db, &db, 1, Threshold::Radius(0.0)).unwrap(), 1.0);

        let queries: Vec<SeqTag> = (0..10).map(|i| planar(10.0 * i as f64 + 3.0, i)).collect();
        assert_eq!(
            recall_at_k(&exact, &queries, &db, 1, Threshold::Radius(0.0)).unwrap(),
            0.0
        );

        // crafted rankings
        let ranked = result(vec![
            vec![0, 5, 9], // q0 @3: hit at rank 1 (3 m)
            vec![3, 1, 2], // q1 @13: 1 is 3 m away at rank 2
            vec![9, 8, 7], // q2 @23: none within 5 m
            vec![3, 0, 1], // q3 @33: rank 1
            vec![1, 2, 4], // q4 @43: rank 3
            vec![5, 0, 0], // q5 @53: rank 1
            vec![0, 1, 2], // q6 @63: none
            vec![8, 7, 6], // q7 @73: rank 2
            vec![9, 9, 8], // q8 @83: rank 3
            vec![0, 9, 1], // q9 @93: rank 2
        ]);
        let r = |k| recall_at_k(&ranked, &queries, &db, k, Threshold::Radius(5.0)).unwrap();
        assert_eq!(r(1), 3.0 / 10.0);
        assert_eq!(r(2), 6.0 / 10.0);
        assert_eq!(r(3), 8.0 / 10.0);
        // frame tolerance 1: q2 (center 2) has 3 at rank... none of 9,8,7
        let f = |k, n| recall_at_k(&ranked, &queries, &db, k, Threshold::Frames(n)).unwrap();
        assert_eq!(f(1, 0), 3.0 / 10.0);
        // tolerance 1 at K=1: q0(0) q3(3) q5(5) q7(8) q9(0? no) q1(3? no) q2(9 no) q4(1 no) q6(0 no) q8(9 yes)
        assert_eq!(f(1, 1), 5.0 / 10.0);
        assert!(recall_at_k(&ranked, &queries[..3], &db, 1, Threshold::Frames(0)).is_err());
        assert!(recall_at_k(&ranked, &queries, &db[..5], 3, Threshold::Frames(0)).is_err());
        assert!(recall_at_k(&ranked, &queries, &db, 0, Threshold::Frames(0)).is_err());
    }

    #[test]
    fn tags_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.stvd.tags.csv");
        let tags = vec![
            planar(1.5, 3),
            SeqTag {
                tag: GeoTag::lat_lon(51.5, -0.12),
                traversal: 2,
                center_index: 9,
            },
        ];
        write_tags(&p, &tags).unwrap();
        assert_eq!(read_tags(&p).unwrap(), tags);
        assert_eq!(tags_path(Path::new("a/b.stvd")), PathBuf::from("a/b.stvd.tags.csv"));
    }

    fn hand_configs() -> Vec<(ModelConfig, usize, usize, [u64; 4])> {
        let desk = ModelConfig::desk();
        let wide = ModelConfig {
            window: 6,
            window_stride: 3,
            ..ModelConfig::desk()
        };
        vec![
            // tiny at 16x16: grid 4x4, 9 temporal windows of 8 tokens
            (ModelConfig::tiny(), 16, 16, [94_208, 32_768, 33_792, 2_048]),
            // desk at 32x32: grid 8x8, 9 windows of 80 tokens
            (desk, 32, 32, [8_437_760, 5_242_880, 7_618_560, 327_680]),
            // 48x40: grid 12x10, col starts {0,3,4}, 9 windows of 180 tokens
            (wide, 48, 40, [15_820_800, 11_980_800, 26_035_200, 614_400]),
        ]
    }

    #[test]
    fn flops_match_hand_computed_configs() {
        for (cfg, h, w, want) in hand_configs() {
            let r = count_flops(&cfg, h, w).unwrap();
            assert_eq!([r.tokenizer, r.spatial, r.temporal, r.aggregation], want);
            assert_eq!(r.total_macs(), want.iter().sum::<u64>());
            assert_eq!(r.total_flops(), 2 * r.total_macs());
        }
        let csv = count_flops(&ModelConfig::tiny(), 16, 16).unwrap().to_csv();
        assert!(csv.starts_with("# FLOPs = 2 x multiply-accumulates"));
        assert!(csv.contains("\ntotal,162816,325632,"));
    }

    #[test]
    fn flops_tokenizer_only_and_degenerate_window() {
        let cfg = ModelConfig {
            spatial_layers: 0,
            temporal_layers: 0,
            clusters: 0,
            ..ModelConfig::desk()
        };
        let r = count_flops(&cfg, 32, 32).unwrap();
        let conv = 5 * (3 * 16 * 9 * 32 * 32 + 16 * 32 * 9 * 16 * 16 + 64 * 32 * 32);
        assert_eq!(r.total_macs(), conv);
        assert_eq!(r.tokenizer, conv);

        // one full-grid window: temporal cost equals one attention over all L*N tokens
        let full = ModelConfig {
            window: 8,
            window_stride: 8,
            ..ModelConfig::desk()
        };
        let r = count_flops(&full, 32, 32).unwrap();
        assert_eq!(r.temporal_score_apply, score_apply_macs(5 * 64, 32));
        assert_eq!(r.temporal_score_apply, 2 * (320u64 * 320 * 32));
    }

    #[test]
    fn windowed_score_apply_on_a_12x12_grid() {
        // 12x12 grid at 48x48, L=5, m=6, s=3: starts {0,3,6}, 9 windows of 180 tokens
        let cfg = ModelConfig {
            window: 6,
            window_stride: 3,
            ..ModelConfig::desk()
        };
        let r = count_flops(&cfg, 48, 48).unwrap();
        let d = 32u64;
        assert_eq!(r.temporal_score_apply, 9 * (180 * 180 * 2 * d));
        let full = 720 * 720 * 2 * d;
        assert!(r.temporal_score_apply < full);
        assert!((full as f64 / r.temporal_score_apply as f64 - 720.0 * 720.0 / (9.0 * 180.0 * 180.0)).abs() < 1e-12);
    }

    #[test]
    fn ablation_variant_mapping() {
        let run = RunConfig::default();
        let v = ablation_variants(AblationAxis::Pos, &run);
        let get = |n: &str| v.iter().find(|(name, _)| name == n).unwrap().1.clone();
        assert_eq!(get("spatial-only").temporal_layers, 0);
        assert_eq!(get("spatial-only").spatial_layers, run.model.spatial_layers);
        assert_eq!(get("temporal-none").spatial_layers, 0);
        assert_eq!(get("temporal-none").temporal_pos, TemporalPos::None);
        assert_eq!(get("full-relative").temporal_pos, TemporalPos::Relative);
        let w = ablation_variants(AblationAxis::Window, &run);
        let pairs: Vec<(usize, usize)> = w.iter().map(|(_, c)| (c.window, c.window_stride)).collect();
        assert_eq!(pairs, vec![(4, 2), (6, 3), (8, 4)]);
        assert!("size".parse::<AblationAxis>().is_err());

        let rows = vec![AblationRow {
            variant: "only".into(),
            recall: Ok([0.5, 0.75, 1.0]),
            queries: 4,
            db_size: 4,
        }];
        assert_eq!(
            ablation_csv(&rows),
            format!("{METRICS_HEADER}\nonly,0.500000,0.750000,1.000000,4,4\n")
        );
    }

    #[test]
    fn extraction_matches_isolated_forward_passes() {
        use crate::dataset::{generate_world, Condition};
        let cfg = ModelConfig::tiny();
        let model = SequenceModel::new(&cfg, 5).unwrap();
        let world = generate_world(5, 6, 4.0).unwrap();
        let opts = RenderOptions {
            height: 16,
            width: 16,
            ..RenderOptions::default()
        };
        let c = Condition::preset("day").unwrap();
        let split = synthetic_split(&world, &c, &c, 0.0, 5, &opts).unwrap();
        let set = SequenceSet::new(&split.db, &cfg, 1);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("db.stvd");
        let rows = extract_descriptors(&model, &set, None, &out).unwrap();
        assert_eq!(rows.len(), set.len());
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), cfg.clusters * cfg.embed_dim);
            assert_eq!(r, &model.describe(&set.frames(i)).unwrap());
        }
        let back = crate::aggregation::read_descriptors(&out).unwrap();
        for (a, b) in back.iter().zip(&rows) {
            assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6));
        }
        assert_eq!(read_tags(&tags_path(&out)).unwrap(), set.tags());
        // same sequence twice
        assert_eq!(
            model.describe(&set.frames(0)).unwrap(),
            model.describe(&set.frames(0)).unwrap()
        );
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k(seed in 0u64..100) {
            let db = random_rows(seed, 15, 3);
            let qs = random_rows(seed + 1000, 8, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dbt: Vec<SeqTag> = (0..15).map(|i| planar(rng.random_range(0.0..50.0), i)).collect();
            let qt: Vec<SeqTag> = (0..8).map(|i| planar(rng.random_range(0.0..50.0), i)).collect();
            let r = retrieve_topk(&qs, &db, 15).unwrap();
            let mut last = 0.0;
            for k in 1..=15 {
                let v = recall_at_k(&r, &qt, &dbt, k, Threshold::Radius(5.0)).unwrap();
                prop_assert!(v >= last);
                last = v;
            }
        }
    }

    #[test]
    fn default_night_defeats_raw_pixels() {
        let sc = RunConfig::default().scenario;
        assert_eq!(sc.places, 64);
        let d = render_scenario(&sc, 0).unwrap();
        let rows = |ds: &Dataset| -> (Vec<Vec<f64>>, Vec<SeqTag>) {
            let px = ds
                .frames
                .iter()
                .map(|f| f.image.pixels.iter().map(|&p| p as f64 / 255.0).collect());
            let tags = ds.frames.iter().map(|f| SeqTag {
                tag: f.tag,
                traversal: f.traversal,
                center_index: f.index,
            });
            (px.collect(), tags.collect())
        };
        let (db, dt) = rows(&d.test.db);
        let (q, qt) = rows(&d.test.query);
        let r = retrieve_topk(&q, &db, 1).unwrap();
        let r1 = recall_at_k(&r, &qt, &dt, 1, Threshold::Radius(sc.eval_radius)).unwrap();
        assert!(r1 < 0.9, "raw-pixel recall@1 {r1}");
        assert!(r1 > 0.2, "raw-pixel recall@1 {r1}");
    }
}

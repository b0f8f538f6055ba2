//! Geo-tagged frames: the synthetic loop world, PPM/CSV directory I/O and
//! sequence assembly.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordMode {
    /// `x` east, `y` north, meters.
    Planar,
    /// Degrees.
    LatLon,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoTag {
    pub mode: CoordMode,
    /// `x` or latitude.
    pub a: f64,
    /// `y` or longitude.
    pub b: f64,
}

impl GeoTag {
    pub fn planar(x: f64, y: f64) -> Self {
        Self {
            mode: CoordMode::Planar,
            a: x,
            b: y,
        }
    }

    pub fn lat_lon(lat: f64, lon: f64) -> Self {
        Self {
            mode: CoordMode::LatLon,
            a: lat,
            b: lon,
        }
    }
}

/// Euclidean distance for planar tags, haversine for lat/lon tags.
pub fn geo_distance(p: &GeoTag, q: &GeoTag) -> Result<f64> {
    if p.mode != q.mode {
        return Err(Error::usage(format!(
            "cannot measure between {:?} and {:?} coordinates",
            p.mode, q.mode
        )));
    }
    Ok(match p.mode {
        CoordMode::Planar => (p.a - q.a).hypot(p.b - q.b),
        CoordMode::LatLon => {
            let (la1, la2) = (p.a.to_radians(), q.a.to_radians());
            let dlat = la2 - la1;
            let dlon = (q.b - p.b).to_radians();
            let h = (dlat / 2.0).sin().powi(2) + la1.cos() * la2.cos() * (dlon / 2.0).sin().powi(2);
            2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
        }
    })
}

/// Appearance change applied to a rendered traversal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Condition {
    /// Added to every channel, in `[-1, 1]`.
    pub brightness: f64,
    /// Rotation about the gray axis, radians in `[-pi, pi]`.
    pub hue: f64,
    /// Standard deviation of additive pixel noise, in `[0, 0.5]`.
    pub noise: f64,
    /// Random solid rectangles per frame, at most 16.
    pub occluders: usize,
}

const PRESETS: [(&str, Condition); 4] = [
    (
        "clean",
        Condition {
            brightness: 0.0,
            hue: 0.0,
            noise: 0.0,
            occluders: 0,
        },
    ),
    (
        "day",
        Condition {
            brightness: 0.0,
            hue: 0.0,
            noise: 0.02,
            occluders: 0,
        },
    ),
    (
        "dusk",
        Condition {
            brightness: -0.15,
            hue: 0.5,
            noise: 0.04,
            occluders: 1,
        },
    ),
    (
        "night",
        Condition {
            brightness: -0.3,
            hue: 1.0,
            noise: 0.06,
            occluders: 2,
        },
    ),
];

impl Condition {
    pub fn preset(name: &str) -> Result<Self> {
        PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, c)| *c)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown condition '{name}' (expected clean|day|dusk|night or custom:b,h,n,o)"
                ))
            })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (-1.0..=1.0).contains(&self.brightness)
            && (-PI..=PI).contains(&self.hue)
            && (0.0..=0.5).contains(&self.noise)
            && self.occluders <= 16;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("condition out of range: {self:?}")))
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let Some(rest) = s.strip_prefix("custom:") else {
            return Self::preset(s);
        };
        let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
        let bad = || Error::config(format!("malformed condition '{s}'"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let c = Condition {
            brightness: parts[0].parse().map_err(|_| bad())?,
            hue: parts[1].parse().map_err(|_| bad())?,
            noise: parts[2].parse().map_err(|_| bad())?,
            occluders: parts[3].parse().map_err(|_| bad())?,
        };
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some((name, _)) = PRESETS.iter().find(|(_, c)| c == self) {
            return f.write_str(name);
        }
        write!(
            f,
            "custom:{},{},{},{}",
            self.brightness, self.hue, self.noise, self.occluders
        )
    }
}

/// Places on a closed circular loop with spatially smoothed latents.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub spacing: f64,
    pub latents: Vec<Vec<f64>>,
}

impl SyntheticWorld {
    pub fn num_places(&self) -> usize {
        self.latents.len()
    }

    pub fn radius(&self) -> f64 {
        self.num_places() as f64 * self.spacing / (2.0 * PI)
    }

    /// Planar tag at loop position `u`, measured in places.
    pub fn tag_at(&self, u: f64) -> GeoTag {
        let theta = 2.0 * PI * u / self.num_places() as f64;
        let r = self.radius();
        GeoTag::planar(r * theta.cos(), r * theta.sin())
    }
}

pub fn generate_world(seed: u64, num_places: usize, spacing: f64) -> Result<SyntheticWorld> {
    generate_world_with(seed, num_places, spacing, 16)
}

/// Latents are `(n[i-1] + 2 n[i] + n[i+1]) / sqrt(6)` of i.i.d. normals,
/// wrapping around the loop, so each coordinate keeps unit variance.
pub fn generate_world_with(seed: u64, num_places: usize, spacing: f64, latent_dim: usize) -> Result<SyntheticWorld> {
    if num_places == 0 || latent_dim == 0 || !spacing.is_finite() || spacing <= 0.0 {
        return Err(Error::config(format!(
            "world needs places >= 1, latent_dim >= 1 and spacing > 0 (got {num_places}, {latent_dim}, {spacing})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<Vec<f64>> = (0..num_places)
        .map(|_| (0..latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let n = num_places;
    let latents = (0..n)
        .map(|i| {
            let (p, q) = (&raw[(i + n - 1) % n], &raw[(i + 1) % n]);
            (0..latent_dim)
                .map(|k| (p[k] + 2.0 * raw[i][k] + q[k]) / 6f64.sqrt())
                .collect()
        })
        .collect();
    Ok(SyntheticWorld { seed, spacing, latents })
}

/// 8-bit interleaved RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    /// `[3 x height x width]` in `[0, 1]`, nearest-neighbor resampled.
    pub fn to_tensor(&self, height: usize, width: usize) -> Tensor {
        let plane = height * width;
        Tensor::from_fn([3, height, width], |i| {
            let (c, rest) = (i / plane, i % plane);
            let (y, x) = (rest / width, rest % width);
            let sy = y * self.height / height;
            let sx = x * self.width / width;
            self.pixels[(sy * self.width + sx) * 3 + c] as f64 / 255.0
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.pixels)?;
        f.flush()?;
        Ok(())
    }

    /// Binary P6 with maxval 255; `#` comments in the header are skipped.
    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
                _ => Error::Io(e),
            })?
            .read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::format(path, m);
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated PPM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(bad("not a binary PPM (P6)"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM header number"));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 || width == 0 || height == 0 {
            return Err(bad("only non-empty 8-bit PPMs are supported"));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(bad("truncated PPM pixel data"));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[pos..pos + need].to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub filename: String,
    pub image: Image,
    pub tag: GeoTag,
    pub traversal: u32,
    pub index: usize,
}

/// Where and how a traversal is rendered.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub height: usize,
    pub width: usize,
    /// Frames beyond one lap; `L - 1` makes every place a sequence center.
    pub extra_frames: usize,
    /// Offset along the loop, meters.
    pub shift: f64,
    pub traversal: u32,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            extra_frames: 4,
            shift: 0.0,
            traversal: 0,
        }
    }
}

/// Places visible across one frame's width.
const VIEW_SPAN: f64 = 2.0;

fn latent(z: &[f64], k: usize) -> f64 {
    z[k % z.len()]
}

/// Unclamped RGB at loop position `u` (places) for pixel row fraction `v`
/// and column fraction `h`, both in `[0, 1)`.
fn scene_color(world: &SyntheticWorld, u: f64, v: f64, h: f64) -> [f64; 3] {
    let n = world.num_places() as f64;
    let s = u + (h - 0.5) * VIEW_SPAN;
    let s = s.rem_euclid(n);
    let j = (s.floor() as usize).min(world.num_places() - 1);
    let f = s - s.floor();
    let z = &world.latents[j];
    let block = (v * 4.0).floor().min(3.0) as usize * 2 + (f * 2.0).floor().min(1.0) as usize;
    let b = 0.25 * latent(z, 6 + block).tanh();
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let bg = 0.5 + 0.2 * latent(z, c).tanh() + 0.15 * latent(z, 3 + c).tanh() * (2.0 * v - 1.0);
        let w = if c == block % 3 { 1.0 } else { 0.4 };
        *o = bg + w * b;
    }
    out
}

fn rotate_hue(rgb: [f64; 3], angle: f64) -> [f64; 3] {
    if angle == 0.0 {
        return rgb;
    }
    // Rodrigues rotation about (1,1,1)/sqrt(3); the channel mean is preserved.
    let (s, c) = angle.sin_cos();
    let k = 1.0 / 3f64.sqrt();
    let dot = (rgb[0] + rgb[1] + rgb[2]) * k;
    let cross = [k * (rgb[2] - rgb[1]), k * (rgb[0] - rgb[2]), k * (rgb[1] - rgb[0])];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = rgb[i] * c + cross[i] * s + k * dot * (1.0 - c);
    }
    out
}

/// Renders one frame before clamping, `[3 x H x W]` channel-planar.
pub fn render_frame_raw(
    world: &SyntheticWorld,
    u: f64,
    cond: &Condition,
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
) -> Vec<f64> {
    let plane = height * width;
    let mut out = vec![0.0; 3 * plane];
    for y in 0..height {
        for x in 0..width {
            let rgb = scene_color(world, u, y as f64 / height as f64, x as f64 / width as f64);
            let rgb = rotate_hue(rgb, cond.hue);
            for c in 0..3 {
                out[c * plane + y * width + x] = rgb[c] + cond.brightness;
            }
        }
    }
    if cond.noise > 0.0 {
        let normal = Normal::new(0.0, cond.noise).expect("validated noise level");
        out.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    for _ in 0..cond.occluders {
        let w = ((rng.random_range(0.15..0.35) * width as f64) as usize).max(1);
        let h = ((rng.random_range(0.2..0.5) * height as f64) as usize).max(1);
        let x0 = rng.random_range(0..=width - w);
        let y0 = rng.random_range(0..=height - h);
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for c in 0..3 {
                    out[c * plane + y * width + x] = color[c];
                }
            }
        }
    }
    out
}

fn quantize(raw: &[f64], height: usize, width: usize) -> Image {
    let plane = height * width;
    let mut pixels = vec![0u8; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            pixels[i * 3 + c] = (raw[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Image { width, height, pixels }
}

/// Default traversal: one lap plus 4 wrap-around frames at 128x128.
pub fn render_traversal(world: &SyntheticWorld, cond: &Condition, seed: u64) -> Result<Vec<Frame>> {
    render_traversal_with(world, cond, seed, &RenderOptions::default())
}

/// Frame `k` sits at loop position `k - (extra_frames / 2) + shift / spacing`
/// (wrapping), so with `extra_frames = L - 1` place `i` is the center of the
/// sequence starting at frame `i`.
pub fn render_traversal_with(
    world: &SyntheticWorld,
    cond: &Condition,
    seed: u64,
    opts: &RenderOptions,
) -> Result<Vec<Frame>> {
    cond.validate()?;
    if opts.height == 0 || opts.width == 0 {
        return Err(Error::config("render size must be positive"));
    }
    let n = world.num_places();
    let back = (opts.extra_frames / 2) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(n + opts.extra_frames);
    for k in 0..n + opts.extra_frames {
        rng.set_stream(k as u64);
        let u = (k as f64 - back + opts.shift / world.spacing).rem_euclid(n as f64);
        let raw = render_frame_raw(world, u, cond, &mut rng, opts.height, opts.width);
        frames.push(Frame {
            filename: format!("t{}_{k:05}.ppm", opts.traversal),
            image: quantize(&raw, opts.height, opts.width),
            tag: world.tag_at(u),
            traversal: opts.traversal,
            index: k,
        });
    }
    Ok(frames)
}

/// L consecutive frames of one traversal, tagged by the center frame
/// (the earlier middle frame for even L).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    /// Positions in the owning dataset's frame list.
    pub frames: Vec<usize>,
    pub tag: GeoTag,
    pub traversal: u32,
    /// `frame_index` of the center frame.
    pub center_index: usize,
}

/// Sliding groups of `len` consecutive frames at `stride`, never crossing a
/// traversal change or a gap in frame indices. `frames` must be sorted.
pub fn make_sequences(frames: &[Frame], len: usize, stride: usize) -> Vec<FrameSequence> {
    if len == 0 || stride == 0 {
        warn!("sequence length and stride must be positive");
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut run_start = 0;
    for i in 0..=frames.len() {
        let breaks = i == frames.len()
            || (i > run_start
                && (frames[i].traversal != frames[i - 1].traversal || frames[i].index != frames[i - 1].index + 1));
        if !breaks {
            continue;
        }
        let run = run_start..i;
        if run.len() < len {
            warn!(
                "run of {} frames in traversal {} is shorter than sequence length {len}",
                run.len(),
                frames.get(run_start).map_or(0, |f| f.traversal)
            );
        } else {
            let mut s = run.start;
            while s + len <= run.end {
                let c = s + (len - 1) / 2;
                debug_assert!((s + 1..s + len).all(|k| frames[k].index == frames[k - 1].index + 1));
                out.push(FrameSequence {
                    frames: (s..s + len).collect(),
                    tag: frames[c].tag,
                    traversal: frames[c].traversal,
                    center_index: frames[c].index,
                });
                s += stride;
            }
        }
        run_start = i;
    }
    out
}

/// Frames ordered by `(traversal, frame_index)`, one coordinate mode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn new(mut frames: Vec<Frame>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if frames.iter().any(|f| f.tag.mode != first.tag.mode) {
                return Err(Error::usage("dataset mixes planar and lat/lon tags"));
            }
        }
        frames.sort_by_key(|f| (f.traversal, f.index));
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn sequences(&self, len: usize, stride: usize) -> Vec<FrameSequence> {
        make_sequences(&self.frames, len, stride)
    }

    pub fn frame_tensor(&self, i: usize, height: usize, width: usize) -> Tensor {
        self.frames[i].image.to_tensor(height, width)
    }
}

const POSES: &str = "poses.csv";

/// Writes `poses.csv` plus one PPM per frame.
pub fn write_directory(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mode = data.frames.first().map_or(CoordMode::Planar, |f| f.tag.mode);
    let (ca, cb) = match mode {
        CoordMode::Planar => ("x", "y"),
        CoordMode::LatLon => ("lat", "lon"),
    };
    let mut w = std::io::BufWriter::new(fs::File::create(dir.join(POSES))?);
    writeln!(w, "filename,{ca},{cb},traversal_id,frame_index")?;
    for f in &data.frames {
        f.image.write_ppm(&dir.join(&f.filename))?;
        writeln!(w, "{},{},{},{},{}", f.filename, f.tag.a, f.tag.b, f.traversal, f.index)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `poses.csv` (header `filename,x,y,...` or `filename,lat,lon,...`)
/// and the PPMs it names.
pub fn load_directory(dir: &Path) -> Result<Dataset> {
    let path = dir.join(POSES);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let file = BufReader::new(fs::File::open(&path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::format(&path, "missing header row"))?;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let mode = match cols.as_slice() {
        ["filename", "x", "y", "traversal_id", "frame_index"] => CoordMode::Planar,
        ["filename", "lat", "lon", "traversal_id", "frame_index"] => CoordMode::LatLon,
        _ => {
            return Err(Error::format(
                &path,
                format!("line 1: expected header filename,x,y,traversal_id,frame_index (or lat,lon), got '{header}'"),
            ))
        }
    };
    let mut frames = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(&path, format!("line {lineno}: {what}: '{line}'"));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let a: f64 = f[1].parse().map_err(|_| bad("bad coordinate"))?;
        let b: f64 = f[2].parse().map_err(|_| bad("bad coordinate"))?;
        if !a.is_finite() || !b.is_finite() {
            return Err(bad("non-finite coordinate"));
        }
        let traversal: u32 = f[3].parse().map_err(|_| bad("bad traversal_id"))?;
        let index: usize = f[4].parse().map_err(|_| bad("bad frame_index"))?;
        let img_path = dir.join(f[0]);
        if !img_path.is_file() {
            return Err(Error::MissingFile(img_path));
        }
        frames.push(Frame {
            filename: f[0].to_string(),
            image: Image::read_ppm(&img_path)?,
            tag: GeoTag { mode, a, b },
            traversal,
            index,
        });
    }
    Dataset::new(frames)
}

/// Database and query traversals of one synthetic split.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub db: Dataset,
    pub query: Dataset,
}

/// Renders the database (traversal 0) and query (traversal 1) of a world.
pub fn synthetic_split(
    world: &SyntheticWorld,
    db_cond: &Condition,
    query_cond: &Condition,
    query_shift: f64,
    seed: u64,
    opts: &RenderOptions,
) -> Result<SplitData> {
    let db = render_traversal_with(
        world,
        db_cond,
        seed ^ 0xD8,
        &RenderOptions {
            traversal: 0,
            shift: 0.0,
            ..*opts
        },
    )?;
    let query = render_traversal_with(
        world,
        query_cond,
        seed ^ 0x9E,
        &RenderOptions {
            traversal: 1,
            shift: query_shift,
            ..*opts
        },
    )?;
    Ok(SplitData {
        db: Dataset::new(db)?,
        query: Dataset::new(query)?,
    })
}

/// Writes a split as `dir/db` and `dir/query`.
pub fn write_split(dir: &Path, split: &SplitData) -> Result<()> {
    write_directory(&dir.join("db"), &split.db)?;
    write_directory(&dir.join("query"), &split.query)
}

/// Reads `dir/db` and `dir/query`.
pub fn load_split(dir: &Path) -> Result<SplitData> {
    Ok(SplitData {
        db: load_directory(&dir.join("db"))?,
        query: load_directory(&dir.join("query"))?,
    })
}

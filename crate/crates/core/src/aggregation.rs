//! Branch fusion, NetVLAD sequence descriptors, PCA reduction and the STVD
//! descriptor file format.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamGroup, ParamId, ParamStore};

/// Norm floor in `x / max(|x|, eps)`.
pub const NORM_EPS: f64 = 1e-12;

/// Positionwise sum of the two branch outputs, both `[(L*N) x D]`
/// frame-major. A missing branch contributes nothing.
pub fn fuse_branches(g: &mut Graph, xs: Option<Var>, xt: Option<Var>) -> Result<Var> {
    match (xs, xt) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(Error::usage("fuse_branches needs at least one branch")),
    }
}

#[derive(Clone, Debug)]
pub struct NetVladParams {
    /// `c_k`, `[K x D]`.
    pub centroids: ParamId,
    /// `w_k`, `[K x D]`.
    pub weights: ParamId,
    /// `b_k`, `[K]`.
    pub bias: ParamId,
}

impl NetVladParams {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, clusters: usize, dim: usize) -> Self {
        let c = trunc_normal(rng, &[clusters, dim], 0.1);
        let w = trunc_normal(rng, &[clusters, dim], 0.1);
        Self {
            centroids: store.add("netvlad.centroids", ParamGroup::NetVlad, c),
            weights: store.add("netvlad.weights", ParamGroup::NetVlad, w),
            bias: store.add("netvlad.bias", ParamGroup::NetVlad, Tensor::zeros([clusters])),
        }
    }

    pub fn bind(&self, store: &ParamStore, g: &mut Graph) -> (Var, Var, Var) {
        (
            store.bind(g, self.centroids),
            store.bind(g, self.weights),
            store.bind(g, self.bias),
        )
    }
}

/// `a_k(x) = softmax_k(w_k . x + b_k)` for one row `x`; `w` is `[K x D]`.
pub fn soft_assign(x: &[f64], w: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (k, d) = match *w.shape() {
        [k, d] => (k, d),
        ref s => return Err(Error::shape(format!("soft_assign: weights {s:?}"))),
    };
    if x.len() != d || b.len() != k {
        return Err(Error::shape(format!(
            "soft_assign: x has {} dims, weights {:?}, bias {}",
            x.len(),
            w.shape(),
            b.len()
        )));
    }
    let logits: Vec<f64> = (0..k)
        .map(|j| {
            w.data()[j * d..(j + 1) * d]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + b.data()[j]
        })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// NetVLAD over `x [M x D]`: `V(k) = sum_i a_k(x_i)(x_i - c_k)`, each
/// cluster block L2-normalized, then the whole `K*D` vector. Output shape
/// `[K*D]`, cluster-major.
pub fn netvlad_aggregate(g: &mut Graph, x: Var, centroids: Var, weights: Var, bias: Var) -> Result<Var> {
    let (k, d) = match *g.shape(centroids) {
        [k, d] => (k, d),
        ref s => return Err(Error::shape(format!("netvlad: centroids {s:?}"))),
    };
    let logits = g.matmul_nt(x, weights)?;
    let logits = g.add_row_bias(logits, bias)?;
    let a = g.softmax_last(logits);
    let ax = g.matmul_tn(a, x)?;
    let mass = g.sum_rows(a)?;
    let ac = g.mul_rows(centroids, mass)?;
    let v = g.sub(ax, ac)?;
    let v = g.l2_normalize_rows(v, NORM_EPS)?;
    let flat = g.reshape(v, vec![1, k * d])?;
    let flat = g.l2_normalize_rows(flat, NORM_EPS)?;
    g.reshape(flat, vec![k * d])
}

/// A finalized (unit-norm) or PCA-reduced sequence descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDescriptor {
    pub values: Vec<f64>,
}

impl SequenceDescriptor {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Scales `v` to unit length; returns false (leaving `v`) when its norm is
/// below `NORM_EPS`.
pub fn l2_normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < NORM_EPS {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `[out_dim x dim]`, orthonormal rows in decreasing eigenvalue order.
    pub components: Vec<f64>,
    /// Variance along each component.
    pub eigenvalues: Vec<f64>,
    pub whiten: bool,
}

const PCA_MAGIC: &[u8; 4] = b"STVP";

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.dim()..(i + 1) * self.dim()]
    }

    /// Top `out_dim` principal axes of `rows` (each of length `dim`).
    /// Each axis is signed so that its first nonzero coefficient is positive.
    pub fn fit(rows: &[Vec<f64>], out_dim: usize, whiten: bool) -> Result<Self> {
        let m = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if out_dim == 0 || out_dim > m.min(dim) {
            return Err(Error::config(format!(
                "pca output dim {out_dim} must be in 1..={} for {m} samples of dim {dim}",
                m.min(dim)
            )));
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("pca rows differ in length"));
        }
        let mut mean = vec![0.0; dim];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        mean.iter_mut().for_each(|a| *a /= m as f64);
        let x = DMatrix::from_fn(m, dim, |i, j| rows[i][j] - mean[j]);
        let denom = (m.max(2) - 1) as f64;

        let mut pairs: Vec<(f64, Vec<f64>)> = if m < dim {
            // Eigenvectors of X X^T map to those of X^T X through X^T.
            let gram = &x * x.transpose() / denom;
            let eig = SymmetricEigen::new(gram);
            (0..m)
                .map(|i| {
                    let lam = eig.eigenvalues[i].max(0.0);
                    let u = eig.eigenvectors.column(i);
                    let mut v: Vec<f64> = (x.transpose() * u).iter().copied().collect();
                    if !l2_normalize(&mut v) {
                        v = vec![0.0; dim];
                    }
                    (lam, v)
                })
                .collect()
        } else {
            let cov = x.transpose() * &x / denom;
            let eig = SymmetricEigen::new(cov);
            (0..dim)
                .map(|i| {
                    (
                        eig.eigenvalues[i].max(0.0),
                        eig.eigenvectors.column(i).iter().copied().collect(),
                    )
                })
                .collect()
        };
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        pairs.truncate(out_dim);

        // Directions the data never spans (zero variance) come out of the
        // Gram route as zero vectors; complete them to an orthonormal set.
        let scale = pairs.first().map_or(0.0, |p| p.0).max(1.0);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
        let mut eigenvalues = Vec::with_capacity(out_dim);
        let mut next_axis = 0;
        for (lam, v) in pairs {
            let mut v = if lam > 1e-12 * scale { v } else { vec![0.0; dim] };
            loop {
                orthogonalize(&mut v, &basis);
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if n > 1e-6 {
                    v.iter_mut().for_each(|a| *a /= n);
                    break;
                }
                v = vec![0.0; dim];
                v[next_axis] = 1.0;
                next_axis += 1;
            }
            if let Some(first) = v.iter().find(|a| a.abs() > 1e-12) {
                if *first < 0.0 {
                    v.iter_mut().for_each(|a| *a = -*a);
                }
            }
            eigenvalues.push(if lam > 1e-12 * scale { lam } else { 0.0 });
            basis.push(v);
        }
        Ok(Self {
            mean,
            components: basis.concat(),
            eigenvalues,
            whiten,
        })
    }

    /// `components (v - mean)`, divided by `sqrt(eigenvalue)` when whitening.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::shape(format!("pca expects dim {}, got {}", self.dim(), v.len())));
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok((0..self.out_dim())
            .map(|i| {
                let p: f64 = self.component(i).iter().zip(&centered).map(|(a, b)| a * b).sum();
                if self.whiten {
                    p / (self.eigenvalues[i] + 1e-12).sqrt()
                } else {
                    p
                }
            })
            .collect())
    }

    /// Projection re-normalized to unit length. A projection of zero length
    /// (e.g. the mean itself) is returned unnormalized with a warning.
    pub fn apply(&self, d: &SequenceDescriptor) -> Result<SequenceDescriptor> {
        let mut values = self.project(&d.values)?;
        if !l2_normalize(&mut values) {
            warn!("descriptor projects to zero under PCA; left unnormalized");
        }
        Ok(SequenceDescriptor { values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(fs::File::create(path)?);
        f.write_all(PCA_MAGIC)?;
        f.write_all(&1u32.to_le_bytes())?;
        f.write_all(&(self.dim() as u32).to_le_bytes())?;
        f.write_all(&(self.out_dim() as u32).to_le_bytes())?;
        f.write_all(&[self.whiten as u8])?;
        for v in self.mean.iter().chain(&self.eigenvalues).chain(&self.components) {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(&bytes, path);
        if r.take(4)? != PCA_MAGIC {
            return Err(Error::format(path, "not a PCA model (bad magic)"));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::format(path, format!("unsupported PCA model version {version}")));
        }
        let dim = r.u32()? as usize;
        let out = r.u32()? as usize;
        let whiten = r.take(1)?[0] != 0;
        let mean = r.f64s(dim)?;
        let eigenvalues = r.f64s(out)?;
        let components = r.f64s(out * dim)?;
        r.finish()?;
        Ok(Self {
            mean,
            components,
            eigenvalues,
            whiten,
        })
    }
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Little-endian cursor with truncation errors naming the file.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format(self.path, "size overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

const STVD_MAGIC: &[u8; 4] = b"STVD";

/// Writes `"STVD"`, u32 version 1, u32 count, u32 dim, u8 dtype 0, then
/// `count * dim` little-endian f32 values row-major.
pub fn write_descriptors(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("descriptors differ in length"));
    }
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(STVD_MAGIC)?;
    f.write_all(&1u32.to_le_bytes())?;
    f.write_all(&(rows.len() as u32).to_le_bytes())?;
    f.write_all(&(dim as u32).to_le_bytes())?;
    f.write_all(&[0u8])?;
    for v in rows.iter().flatten() {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_descriptors(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    if r.take(4)? != STVD_MAGIC {
        return Err(Error::format(path, "not a descriptor file (bad magic)"));
    }
    let version = r.u32()?;
    if version != 1 {
        return Err(Error::format(path, format!("unsupported descriptor version {version}")));
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let dtype = r.take(1)?[0];
    if dtype != 0 {
        return Err(Error::format(path, format!("unsupported dtype {dtype}")));
    }
    let raw = r.take(count * dim * 4)?;
    r.finish()?;
    let vals: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(if dim == 0 {
        vec![Vec::new(); count]
    } else {
        vals.chunks(dim).map(<[f64]>::to_vec).collect()
    })
}

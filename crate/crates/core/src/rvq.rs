//! Residual vector quantization: layerwise k-means codebooks, greedy
//! nearest-code quantization of the running residual, partial dequantization
//! and bitrate accounting.

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{read_file, snap_f32, Reader, Writer};
use crate::error::{Error, Result};
use crate::transform::{EmbeddingSequence, FrameConfig};

const RVQ_MAGIC: &[u8; 4] = b"RSVQ";
const CODES_MAGIC: &[u8; 4] = b"RSCD";

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codes: Array2<f64>,
    layer_index: usize,
}

impl Codebook {
    pub fn new(codes: Array2<f64>, layer_index: usize) -> Result<Self> {
        if codes.nrows() < 2 {
            return Err(Error::invalid("a codebook needs at least two codes"));
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook"));
        }
        if layer_index == 0 {
            return Err(Error::invalid("layer indices start at 1"));
        }
        Ok(Self { codes, layer_index })
    }

    pub fn codes(&self) -> &Array2<f64> {
        &self.codes
    }

    pub fn size(&self) -> usize {
        self.codes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.codes.ncols()
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn code(&self, index: usize) -> ArrayView1<'_, f64> {
        self.codes.row(index)
    }

    /// Nearest code under squared Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, x: ArrayView1<f64>) -> usize {
        nearest_row(&self.codes.view(), x)
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        _ => a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

fn nearest_row(codes: &ArrayView2<f64>, x: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in codes.outer_iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvqModel {
    codebooks: Vec<Codebook>,
}

impl RvqModel {
    pub fn new(codebooks: Vec<Codebook>) -> Result<Self> {
        let first = codebooks
            .first()
            .ok_or_else(|| Error::invalid("an RVQ model needs at least one codebook"))?;
        let (v, d) = (first.size(), first.dim());
        for (i, cb) in codebooks.iter().enumerate() {
            if cb.layer_index != i + 1 {
                return Err(Error::invalid(format!(
                    "codebook {} carries layer index {}",
                    i + 1,
                    cb.layer_index
                )));
            }
            Error::check_dim(v, cb.size())?;
            Error::check_dim(d, cb.dim())?;
        }
        Ok(Self { codebooks })
    }

    pub fn num_layers(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks[0].size()
    }

    pub fn dim(&self) -> usize {
        self.codebooks[0].dim()
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    /// `layer` is 1-based.
    pub fn codebook(&self, layer: usize) -> &Codebook {
        &self.codebooks[layer - 1]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Header `(N, V, d)` as little-endian u32 after the magic, then each
    /// codebook's rows as little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.magic(RVQ_MAGIC)
            .u32(self.num_layers() as u32)
            .u32(self.codebook_size() as u32)
            .u32(self.dim() as u32);
        for cb in &self.codebooks {
            w.f32s(cb.codes.iter().copied());
        }
        w.buf
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = read_file(path)?;
        let mut r = Reader::new(&data, path);
        r.expect_magic(RVQ_MAGIC)?;
        let n = r.u32()? as usize;
        let v = r.u32()? as usize;
        let d = r.u32()? as usize;
        let mut books = Vec::with_capacity(n);
        for layer in 1..=n {
            let vals = r.f32s(v * d)?;
            let codes = Array2::from_shape_vec((v, d), vals).map_err(|e| r.corrupt(e.to_string()))?;
            books.push(Codebook::new(codes, layer)?);
        }
        r.finish()?;
        Self::new(books)
    }
}

/// `L × N` matrix of codebook indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSequence {
    indices: Array2<usize>,
}

impl CodeSequence {
    pub fn new(indices: Array2<usize>) -> Result<Self> {
        if indices.nrows() == 0 || indices.ncols() == 0 {
            return Err(Error::invalid("code sequence must be non-empty"));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &Array2<usize> {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.nrows() == 0
    }

    pub fn num_layers(&self) -> usize {
        self.indices.ncols()
    }

    /// Indices of one layer (1-based) across all frames.
    pub fn layer(&self, layer: usize) -> Vec<usize> {
        self.indices.column(layer - 1).to_vec()
    }

    pub fn validate_for(&self, model: &RvqModel) -> Result<()> {
        if self.num_layers() > model.num_layers() {
            return Err(Error::DimensionMismatch {
                expected: model.num_layers(),
                actual: self.num_layers(),
            });
        }
        let v = model.codebook_size();
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= v) {
            return Err(Error::OutOfRange { index: bad, limit: v });
        }
        Ok(())
    }

    /// Header `(L, N)` as little-endian u32 after the magic, then row-major
    /// little-endian u16 indices.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(&bad) = self.indices.iter().find(|&&i| i > u16::MAX as usize) {
            return Err(Error::OutOfRange {
                index: bad,
                limit: u16::MAX as usize + 1,
            });
        }
        let mut w = Writer::default();
        w.magic(CODES_MAGIC)
            .u32(self.len() as u32)
            .u32(self.num_layers() as u32);
        for &i in self.indices.iter() {
            w.u16(i as u16);
        }
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = read_file(path)?;
        let mut r = Reader::new(&data, path);
        r.expect_magic(CODES_MAGIC)?;
        let l = r.u32()? as usize;
        let n = r.u32()? as usize;
        let mut idx = Vec::with_capacity(l * n);
        for _ in 0..l * n {
            idx.push(r.u16()? as usize);
        }
        r.finish()?;
        Self::new(Array2::from_shape_vec((l, n), idx).map_err(|e| r.corrupt(e.to_string()))?)
    }
}

/// Mean residual norm left after each layer, on the data that was quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub codes: CodeSequence,
    pub residual_norms: Vec<f64>,
}

pub fn quantize(model: &RvqModel, embeddings: &EmbeddingSequence) -> Result<Quantized> {
    quantize_values(model, embeddings.values())
}

pub fn quantize_values(model: &RvqModel, values: &Array2<f64>) -> Result<Quantized> {
    Error::check_dim(model.dim(), values.ncols())?;
    let l = values.nrows();
    let n = model.num_layers();
    let mut residual = values.clone();
    let mut indices = Array2::<usize>::zeros((l, n));
    let mut norms = Vec::with_capacity(n);
    for (layer, cb) in model.codebooks.iter().enumerate() {
        let chosen: Vec<usize> = residual
            .outer_iter()
            .into_par_iter()
            .map(|row| cb.nearest(row))
            .collect();
        for (j, &k) in chosen.iter().enumerate() {
            indices[[j, layer]] = k;
            let mut row = residual.row_mut(j);
            row -= &cb.code(k);
        }
        let total: f64 = residual
            .outer_iter()
            .map(|r| r.dot(&r).sqrt())
            .sum();
        norms.push(total / l.max(1) as f64);
    }
    Ok(Quantized {
        codes: CodeSequence::new(indices)?,
        residual_norms: norms,
    })
}

/// Per-frame sum of code vectors for layers `1..=upto_layer`.
pub fn dequantize(
    model: &RvqModel,
    codes: &CodeSequence,
    upto_layer: usize,
    frame_config: FrameConfig,
) -> Result<EmbeddingSequence> {
    EmbeddingSequence::new(dequantize_values(model, codes, upto_layer)?, frame_config)
}

pub fn dequantize_values(model: &RvqModel, codes: &CodeSequence, upto_layer: usize) -> Result<Array2<f64>> {
    if upto_layer == 0 || upto_layer > model.num_layers() || upto_layer > codes.num_layers() {
        return Err(Error::OutOfRange {
            index: upto_layer,
            limit: model.num_layers().min(codes.num_layers()),
        });
    }
    codes.validate_for(model)?;
    let mut out = Array2::<f64>::zeros((codes.len(), model.dim()));
    for layer in 1..=upto_layer {
        let cb = model.codebook(layer);
        for (j, mut row) in out.outer_iter_mut().enumerate() {
            row += &cb.code(codes.indices[[j, layer - 1]]);
        }
    }
    Ok(out)
}

/// Bits per second for `N` codebooks of size `V` at `frame_rate_hz`.
pub fn bitrate(model: &RvqModel, frame_rate_hz: f64) -> f64 {
    bitrate_for(model.num_layers(), model.codebook_size(), frame_rate_hz)
}

pub fn bitrate_for(num_layers: usize, codebook_size: usize, frame_rate_hz: f64) -> f64 {
    let bits = (codebook_size as f64).log2().ceil();
    frame_rate_hz * num_layers as f64 * bits
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvqTrainLog {
    /// Mean residual norm on the training frames after each layer.
    pub residual_norms: Vec<f64>,
}

/// Trains `num_layers` codebooks of `codebook_size` codes by k-means on the
/// successive residuals of the pooled training frames.
///
/// Frames are sorted into a canonical order before training, so the result
/// does not depend on how the input utterances were ordered.
pub fn train_rvq(
    embeddings: &[EmbeddingSequence],
    num_layers: usize,
    codebook_size: usize,
    iters: usize,
    seed: u64,
) -> Result<(RvqModel, RvqTrainLog)> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::invalid("no training embeddings"))?;
    let views: Vec<ArrayView2<f64>> = embeddings.iter().map(|e| e.values().view()).collect();
    Error::check_dim(first.dim(), views.iter().map(|v| v.ncols()).max().unwrap())?;
    train_rvq_values(&views, num_layers, codebook_size, iters, seed)
}

pub fn train_rvq_values(
    embeddings: &[ArrayView2<f64>],
    num_layers: usize,
    codebook_size: usize,
    iters: usize,
    seed: u64,
) -> Result<(RvqModel, RvqTrainLog)> {
    if num_layers == 0 || iters == 0 {
        return Err(Error::invalid("num_layers and iters must be positive"));
    }
    if codebook_size < 2 {
        return Err(Error::invalid("codebook size must be at least 2"));
    }
    let d = embeddings
        .first()
        .ok_or_else(|| Error::invalid("no training embeddings"))?
        .ncols();
    for e in embeddings {
        Error::check_dim(d, e.ncols())?;
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training embeddings"));
        }
    }
    let mut rows: Vec<Vec<f64>> = embeddings
        .iter()
        .flat_map(|e| e.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
        .collect();
    if rows.len() < codebook_size {
        return Err(Error::invalid(format!(
            "{} training frames is fewer than codebook size {codebook_size}",
            rows.len()
        )));
    }
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let n = rows.len();
    let mut residual =
        Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("shape");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut books = Vec::with_capacity(num_layers);
    let mut norms = Vec::with_capacity(num_layers);
    for layer in 1..=num_layers {
        let mut centroids = kmeans(&residual, codebook_size, iters, &mut rng);
        centroids.mapv_inplace(snap_f32);
        let cb = Codebook::new(centroids, layer)?;
        let chosen: Vec<usize> = residual
            .outer_iter()
            .into_par_iter()
            .map(|r| cb.nearest(r))
            .collect();
        for (j, &k) in chosen.iter().enumerate() {
            let mut row = residual.row_mut(j);
            row -= &cb.code(k);
        }
        norms.push(residual.outer_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / n as f64);
        books.push(cb);
    }
    Ok((
        RvqModel::new(books)?,
        RvqTrainLog {
            residual_norms: norms,
        },
    ))
}

/// k-means++ seeding followed by a fixed number of Lloyd iterations.
///
/// Empty clusters are re-seeded at the point of the largest cluster that lies
/// farthest from its centroid.
fn kmeans(data: &Array2<f64>, k: usize, iters: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = data.nrows();
    let d = data.ncols();
    let mut centroids = Array2::<f64>::zeros((k, d));

    // k-means++ seeding
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut nearest_d2: Vec<f64> = data
        .outer_iter()
        .map(|r| sq_dist(r, data.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = nearest_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in nearest_d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        let cview = centroids.row(c);
        nearest_d2
            .par_iter_mut()
            .zip(data.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(nd, r)| {
                let dd = sq_dist(r, cview);
                if dd < *nd {
                    *nd = dd;
                }
            });
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let cv = centroids.view();
        assign = data
            .outer_iter()
            .into_par_iter()
            .map(|r| nearest_row(&cv, r))
            .collect();

        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (j, &a) in assign.iter().enumerate() {
            let mut s = sums.row_mut(a);
            s += &data.row(j);
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mut row = centroids.row_mut(c);
                row.assign(&sums.row(c));
                row /= counts[c] as f64;
            }
        }

        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let largest = (0..k)
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .expect("k >= 2");
            let mut far = None;
            let mut far_d = -1.0;
            for j in 0..n {
                if assign[j] == largest && !taken[j] {
                    let dd = sq_dist(data.row(j), centroids.row(largest));
                    if dd > far_d {
                        far_d = dd;
                        far = Some(j);
                    }
                }
            }
            if let Some(j) = far {
                taken[j] = true;
                centroids.row_mut(c).assign(&data.row(j));
                counts[largest] -= 1;
                counts[c] = 1;
                assign[j] = c;
            }
        }
    }
    let _ = assign;
    centroids
}

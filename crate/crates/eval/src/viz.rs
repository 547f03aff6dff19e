//! Attention heatmaps, embedding tables and a linear 2-D projection.

use std::fmt::Write as _;
use std::path::Path;

use digitwin_models::{encode_frames, Cnn, Encoder, Images, VideoMae, ViT};
use digitwin_sim::Frame;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, EvalError, Result};
use crate::features::ENCODE_CHUNK;

/// A loaded encoder of any supported kind.
#[derive(Clone, Copy)]
pub enum ModelRef<'a> {
    Vit(&'a ViT<f32>),
    VideoMae(&'a VideoMae<f32>),
    Cnn(&'a Cnn<f32>),
}

impl<'a> ModelRef<'a> {
    pub fn encoder(self) -> &'a dyn Encoder {
        match self {
            ModelRef::Vit(m) => m,
            ModelRef::VideoMae(m) => m,
            ModelRef::Cnn(m) => m,
        }
    }
}

/// Per-head attention maps for one frame, `size × size` row-major in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapSet {
    pub size: usize,
    pub grid: usize,
    /// Class-token attention over patches per head, renormalised to sum to 1.
    pub patch_attention: Vec<Vec<f32>>,
    pub maps: Vec<Vec<f32>>,
    /// Heads whose attention was constant; their map is all zeros.
    pub flat: Vec<bool>,
    pub layer: usize,
}

impl HeatmapSet {
    pub fn num_heads(&self) -> usize {
        self.maps.len()
    }
}

/// Bilinear resampling of a `g × g` grid to `size × size`, sampling at
/// pixel centres with edge clamping.
pub fn upsample_bilinear(grid: &[f32], g: usize, size: usize) -> Vec<f32> {
    let scale = g as f64 / size as f64;
    let coord = |i: usize| {
        let c = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (g - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(g - 1), c - lo as f64)
    };
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (y0, y1, fy) = coord(y);
        for x in 0..size {
            let (x0, x1, fx) = coord(x);
            let at = |r: usize, c: usize| grid[r * g + c] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

/// Min-max normalisation to [0, 1]. A constant input maps to zeros and
/// reports `true`.
pub fn min_max(values: &[f32]) -> (Vec<f32>, bool) {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if !(range > 1e-7 * hi.abs().max(1e-30)) {
        return (vec![0.0; values.len()], true);
    }
    (values.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect(), false)
}

fn vit_of(model: ModelRef<'_>) -> Result<&ViT<f32>> {
    match model {
        ModelRef::Vit(m) => Ok(m),
        ModelRef::VideoMae(_) => Err(EvalError::Unsupported(
            "attention heatmaps need a class token; the masked video model has none".into(),
        )),
        ModelRef::Cnn(_) => Err(EvalError::Unsupported("the CNN has no attention to map".into())),
    }
}

/// Final-block class-token attention maps for each frame.
pub fn attention_heatmaps(model: ModelRef<'_>, frames: &[&Frame]) -> Result<Vec<HeatmapSet>> {
    let vit = vit_of(model)?;
    let cfg = vit.config();
    let size = cfg.image_size;
    let grid = size / cfg.patch_size;
    let patches = grid * grid;
    let layer = cfg.num_layers - 1;
    frames
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| {
            let images = Images::<f32>::from_frames(chunk, size)?;
            let attn = vit.cls_attention(&images)?;
            let (heads, tokens) = (attn.shape()[1], attn.shape()[2]);
            let data = attn.data();
            Ok((0..chunk.len())
                .map(|b| {
                    let mut set = HeatmapSet {
                        size,
                        grid,
                        patch_attention: Vec::with_capacity(heads),
                        maps: Vec::with_capacity(heads),
                        flat: Vec::with_capacity(heads),
                        layer,
                    };
                    for h in 0..heads {
                        let row = &data[(b * heads + h) * tokens..(b * heads + h + 1) * tokens];
                        let pa = &row[tokens - patches..];
                        let total: f32 = pa.iter().sum();
                        let pa: Vec<f32> = pa.iter().map(|v| v / total).collect();
                        let (map, flat) = min_max(&upsample_bilinear(&pa, grid, size));
                        set.patch_attention.push(pa);
                        set.maps.push(map);
                        set.flat.push(flat);
                    }
                    set
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.concat())
}

pub fn attention_heatmap(model: ModelRef<'_>, frame: &Frame) -> Result<HeatmapSet> {
    Ok(attention_heatmaps(model, &[frame])?.remove(0))
}

/// Binary PGM (P5) encoding of an 8-bit grayscale image.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn map_to_gray(map: &[f32]) -> Vec<u8> {
    map.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapImage {
    pub frame: usize,
    pub head: usize,
    pub file: String,
}

/// Writes one PGM per frame and head into `dir`, plus `index.csv` listing
/// every image in frame order.
pub fn heatmap_video(model: ModelRef<'_>, frames: &[&Frame], dir: &Path) -> Result<Vec<HeatmapImage>> {
    let sets = attention_heatmaps(model, frames)?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut index = String::from("frame,head,episode,frame_index,flat,file\n");
    let mut out = Vec::new();
    for (i, (set, f)) in sets.iter().zip(frames).enumerate() {
        for h in 0..set.num_heads() {
            let file = format!("frame{i:05}_head{h}.pgm");
            let path = dir.join(&file);
            std::fs::write(&path, encode_pgm(set.size, set.size, &map_to_gray(&set.maps[h]))).map_err(io_err(&path))?;
            let _ = writeln!(index, "{i},{h},{},{},{},{file}", f.meta.episode, f.meta.index, set.flat[h]);
            out.push(HeatmapImage { frame: i, head: h, file });
        }
    }
    let path = dir.join("index.csv");
    std::fs::write(&path, index).map_err(io_err(&path))?;
    Ok(out)
}

/// Frozen features `[n, d]` for a set of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub features: Vec<f32>,
}

impl EmbeddingTable {
    pub fn rows(&self) -> usize {
        self.features.len() / self.dim.max(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn embed(encoder: &dyn Encoder, frames: &[&Frame]) -> Result<EmbeddingTable> {
    let bytes: Vec<&[u8]> = frames.iter().map(|f| f.pixels.as_slice()).collect();
    Ok(EmbeddingTable {
        dim: encoder.feature_dim(),
        features: encode_frames(encoder, &bytes, ENCODE_CHUNK)?,
    })
}

/// Delimited text with frame labels, pose and feature columns `f0..`.
pub fn embeddings_csv(table: &EmbeddingTable, frames: &[&Frame]) -> String {
    let mut out = String::from(
        "episode,frame_index,condition,object,viewpoint,phase_deg,x,y,heading_deg,head_tilt_deg,head_yaw_deg,head_roll_deg",
    );
    for j in 0..table.dim {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for (i, f) in frames.iter().enumerate() {
        let m = &f.meta;
        let object = m.object.map(|o| format!("{o:?}")).unwrap_or_default();
        let _ = write!(
            out,
            "{},{},{},{object},{},{},{},{},{},{},{},{}",
            m.episode,
            m.index,
            m.condition,
            m.viewpoint,
            m.phase_deg,
            m.pose.x,
            m.pose.y,
            m.pose.heading_deg,
            m.pose.head_tilt_deg,
            m.pose.head_yaw_deg,
            m.pose.head_roll_deg
        );
        for v in table.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Encodes `frames` and writes the table to `path`.
pub fn export_embeddings(encoder: &dyn Encoder, frames: &[&Frame], path: &Path) -> Result<EmbeddingTable> {
    let table = embed(encoder, frames)?;
    std::fs::write(path, embeddings_csv(&table, frames)).map_err(io_err(path))?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    pub k: usize,
    /// `[n, k]` projected coordinates.
    pub coords: Vec<f64>,
    /// `[k, d]` unit principal directions.
    pub components: Vec<f64>,
    /// Variance captured by each component, non-increasing.
    pub variances: Vec<f64>,
    pub mean: Vec<f64>,
    /// True when the data has no variance; coordinates are then zero.
    pub degenerate: bool,
}

/// Projects `[n, d]` rows onto the top `k` eigenvectors of their covariance.
/// Each direction's largest-magnitude coordinate is made positive.
pub fn pca_project(rows: &[f64], dim: usize, k: usize) -> Result<PcaProjection> {
    if dim == 0 || rows.len() % dim != 0 {
        return Err(EvalError::Config(format!("{} values do not form rows of width {dim}", rows.len())));
    }
    let n = rows.len() / dim;
    if k == 0 || k > dim || n < k {
        return Err(EvalError::Config(format!("cannot take {k} components of {n} rows of width {dim}")));
    }
    let x = DMatrix::from_row_slice(n, dim, rows);
    let mean: Vec<f64> = (0..dim).map(|j| x.column(j).mean()).collect();
    let mut centred = x;
    for j in 0..dim {
        centred.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let cov = centred.transpose() * &centred / n as f64;
    let total = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let degenerate = !(total > 1e-12 * mean.iter().map(|m| m * m).sum::<f64>().max(1.0));
    let mut components = Vec::with_capacity(k * dim);
    let mut variances = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let v = eig.eigenvectors.column(i);
        let pivot = (0..dim)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        components.extend(v.iter().map(|c| c * sign));
        variances.push(if degenerate { 0.0 } else { eig.eigenvalues[i].max(0.0) });
    }
    let mut coords = vec![0.0; n * k];
    if !degenerate {
        for r in 0..n {
            for c in 0..k {
                coords[r * k + c] = (0..dim).map(|j| centred[(r, j)] * components[c * dim + j]).sum();
            }
        }
    }
    Ok(PcaProjection {
        k,
        coords,
        components,
        variances,
        mean,
        degenerate,
    })
}

pub fn pca_csv(p: &PcaProjection) -> String {
    let mut out = (0..p.k).map(|c| format!("pc{c}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in p.coords.chunks(p.k) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

//! Decoder cross-attention heatmaps.

use std::path::Path;

use hoit::data::Image;
use hoit::train::load_model;

use crate::{write_file, Failure, Outcome};

/// Bilinear upsample of an `fh x fw` map to `width x height`, then min-max
/// scaled to bytes. A flat map has no range to stretch and comes out all zero.
pub fn heatmap(weights: &[f64], fh: usize, fw: usize, width: usize, height: usize) -> Vec<u8> {
    assert_eq!(weights.len(), fh * fw, "attention row does not match the feature map");
    let grid = Image::new(fw, fh, weights.iter().flat_map(|&w| [w, w, w]).collect());
    let up = grid.resize(width, height);
    let values: Vec<f64> = up.pixels().chunks(3).map(|p| p[0]).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    values
        .iter()
        .map(|v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Binary (P5) PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn cmd_viz_attention(checkpoint: &Path, image: &Path, query: usize, output: &Path) -> Outcome {
    let (model, meta) = load_model(checkpoint).map_err(|e| Failure::usage(format!("{}: {e}", checkpoint.display())))?;
    let n = model.config().num_queries;
    if query >= n {
        return Err(Failure::usage(format!("--query {query} is out of range; the model has {n} queries")));
    }
    let img = Image::load_png(image)?;
    let (_, out, _) = model
        .predict(&img.to_tensor(&meta.train.normalization))
        .map_err(Failure::usage)?;
    let Some(attn) = out.cross_attention else {
        return Err(Failure::usage("the model has no decoder layers, so there is no cross attention to show"));
    };
    let row = attn.row(query);
    let sum: f64 = row.iter().sum();
    eprintln!("query {query}: attention row sum {sum:.12}");
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Failure::runtime(format!("attention row sums to {sum}, not 1")));
    }
    let (fh, fw) = out.feature_hw;
    let pixels = heatmap(row, fh, fw, img.width(), img.height());
    write_file(output, encode_pgm(img.width(), img.height(), &pixels))
}

//! Attention mask heatmaps and per-level weight summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::pnm::encode_pgm;
use crate::error::{Error, Result};
use crate::sap::AttentionState;
use crate::tensor::Tensor;

/// Min-max normalizes a 2-D mask to 8-bit gray; a constant mask maps to 0.
pub fn mask_to_gray(mask: &Tensor) -> Vec<u8> {
    let d = mask.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    d.iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Writes `level_NN.pgm` for every mask and `weights.txt` with the pooling
/// size and channel-averaged weight of each level. Returns the mask files.
pub fn export_attention(
    state: &AttentionState,
    pool_sizes: &[usize],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::with_capacity(state.masks.len());
    for (n, m) in state.masks.iter().enumerate() {
        let (h, w) = (m.shape()[0], m.shape()[1]);
        let path = out.join(format!("level_{n:02}.pgm"));
        fs::write(&path, encode_pgm(w, h, &mask_to_gray(m))).map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }
    let mut text = String::from("level pool_size mean_weight\n");
    for (n, phi) in state.mean_weights().iter().enumerate() {
        let k = pool_sizes
            .get(n)
            .map_or_else(|| "-".to_string(), |k| k.to_string());
        let _ = writeln!(text, "{n} {k} {phi}");
    }
    let _ = writeln!(text, "probability {}", state.probability);
    let path = out.join("weights.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_extremes() {
        let m = Tensor::new(&[1, 3], vec![0.1, 0.3, 0.2]).unwrap();
        assert_eq!(mask_to_gray(&m), vec![0, 255, 128]);
        assert_eq!(mask_to_gray(&Tensor::full(&[2, 2], 0.25)), vec![0; 4]);
    }
}

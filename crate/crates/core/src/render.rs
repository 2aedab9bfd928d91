//! Label maps and feature magnitudes as binary PPM images.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::synth::{sample_name, SceneSample};
use crate::tensor::Tensor;
use crate::train::AnyModel;

/// Fixed color for a class index, spreading the index bits over the three
/// channels from the most significant bit down.
pub fn palette(class: usize) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut c = class;
    let mut shift = 7;
    while c > 0 && shift >= 0 {
        for (ch, v) in rgb.iter_mut().enumerate() {
            *v |= (((c >> ch) & 1) as u8) << shift;
        }
        c >>= 3;
        shift -= 1;
    }
    rgb
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn label_image(labels: &[usize], height: usize, width: usize) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(Error::Input(format!(
            "label map has {} pixels, expected {height}×{width}",
            labels.len()
        )));
    }
    let rgb: Vec<u8> = labels.iter().flat_map(|&c| palette(c)).collect();
    Ok(encode_ppm(width, height, &rgb))
}

/// Grayscale per-pixel feature norm, scaled so the largest norm is white.
pub fn magnitude_image(features: &Tensor) -> Result<Vec<u8>> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(Error::Input(format!("expected H×W×C features, got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let norms: Vec<f64> = features
        .data()
        .chunks(c.max(1))
        .map(|px| px.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let rgb: Vec<u8> = norms
        .iter()
        .flat_map(|&n| {
            let g = if max > 0.0 { (255.0 * n / max).round() as u8 } else { 0 };
            [g, g, g]
        })
        .collect();
    Ok(encode_ppm(w, h, &rgb))
}

fn write(path: PathBuf, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes `<scene>_input.ppm` once per sample and `<scene>_<domain>_gt.ppm`
/// plus `<scene>_<domain>_pred.ppm` for every domain. Returns the paths in
/// write order.
pub fn render_samples(
    model: &AnyModel,
    samples: &[(usize, &SceneSample)],
    domains: &[String],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for &(index, s) in samples {
        let name = sample_name(index);
        write(
            out.join(format!("{name}_input.ppm")),
            &magnitude_image(&s.features)?,
            &mut written,
        )?;
        for d in domains {
            let gt = s.label_map(d)?;
            let pred = match model {
                AnyModel::Parsing(m) => m.predict(s, d)?,
                AnyModel::Panoptic(m) => m.predict(s)?,
            };
            let (h, w) = (s.height(), s.width());
            write(out.join(format!("{name}_{d}_gt.ppm")), &label_image(gt, h, w)?, &mut written)?;
            write(out.join(format!("{name}_{d}_pred.ppm")), &label_image(&pred, h, w)?, &mut written)?;
        }
    }
    Ok(written)
}

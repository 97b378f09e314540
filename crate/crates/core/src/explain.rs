//! Class activation heatmaps.
//!
//! The map for class `k` at conv layer `L` is `relu(mean_{c,t}(A * dA))`
//! where `A` is the layer output and `dA` the gradient of logit `k` with
//! respect to it, resampled onto the input frame and normalized by its
//! maximum. [`CamVariant::PooledWeights`] gives the channel-weighted form
//! `relu(mean_t(sum_c mean_{t,h,w}(dA_c) * A_c))` instead.
//!
//! Resampling places each map cell at the center of its receptive field
//! in the input, so a cell lines up with the pixels it was computed from.
//! The map is zero beyond its outermost cells: interpolation falls off to
//! zero one cell spacing past the edge centers.

use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::arch::{ActShape, ModelSpec, Resolved, FRAME_HEIGHT, FRAME_WIDTH};
use crate::nn::layers::Mode;
use crate::nn::model::{activation_gradient, forward, ForwardCache, ModelParams};
use crate::tensor::Tensor;
use crate::video::pnm::{encode_pgm, quantize};
use crate::video::synth::Region;
use crate::video::FRAME_PIXELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CamVariant {
    #[default]
    GradientTimesActivation,
    PooledWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `[72, 128]`, values in `[0, 1]`.
    pub values: Tensor,
    pub class: usize,
    pub layer: usize,
    /// Free-form reference to the input, e.g. `video003/12`.
    pub source: String,
}

impl Heatmap {
    pub fn is_zero(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0)
    }

    /// Share of the total map mass that falls inside `region`. Zero for an
    /// all-zero map.
    pub fn mass_fraction(&self, region: &Region) -> f64 {
        let mut inside = 0.0f64;
        let mut total = 0.0f64;
        for (i, &v) in self.values.data().iter().enumerate() {
            total += v as f64;
            if region.contains(i / FRAME_WIDTH, i % FRAME_WIDTH) {
                inside += v as f64;
            }
        }
        if total > 0.0 {
            inside / total
        } else {
            0.0
        }
    }
}

/// Index of the last convolution, the default source layer.
pub fn default_layer(spec: &ModelSpec) -> Result<usize> {
    spec.conv_layer_indices()
        .last()
        .copied()
        .ok_or_else(|| Error::InvalidLayer { index: 0, valid: vec![] })
}

pub fn gradcam(spec: &ModelSpec, params: &ModelParams, input: &[f32], class: usize, layer: usize) -> Result<Heatmap> {
    gradcam_with(spec, params, input, class, layer, CamVariant::default())
}

pub fn gradcam_with(
    spec: &ModelSpec,
    params: &ModelParams,
    input: &[f32],
    class: usize,
    layer: usize,
    variant: CamVariant,
) -> Result<Heatmap> {
    let convs = spec.conv_layer_indices();
    if !convs.contains(&layer) {
        return Err(Error::InvalidLayer {
            index: layer,
            valid: convs,
        });
    }
    if class >= spec.num_classes {
        return Err(Error::InvalidLabel {
            label: class,
            classes: spec.num_classes,
        });
    }
    let vol = match spec.shapes()?[layer + 1] {
        ActShape::Volume { vol, .. } => vol,
        ActShape::Flat(_) => return Err(Error::shape("convolution output is flat")),
    };
    let mut cache = ForwardCache::new();
    forward(spec, params, input, 1, Mode::Infer, &mut cache)?;
    let mut onehot = vec![0.0f32; spec.num_classes];
    onehot[class] = 1.0;
    let grad = activation_gradient(spec, params, &mut cache, &onehot, layer + 1)?;
    let act = cache.activation(layer + 1);

    let plane = vol.h * vol.w;
    let mut map = vec![0.0f64; plane];
    for c in 0..vol.c {
        let a_c = &act[c * vol.plane()..(c + 1) * vol.plane()];
        let g_c = &grad[c * vol.plane()..(c + 1) * vol.plane()];
        match variant {
            CamVariant::GradientTimesActivation => {
                for (i, (a, g)) in a_c.iter().zip(g_c).enumerate() {
                    map[i % plane] += (*a as f64) * (*g as f64);
                }
            }
            CamVariant::PooledWeights => {
                let alpha = g_c.iter().map(|&g| g as f64).sum::<f64>() / vol.plane() as f64;
                for (i, a) in a_c.iter().enumerate() {
                    map[i % plane] += alpha * *a as f64;
                }
            }
        }
    }
    let denom = match variant {
        CamVariant::GradientTimesActivation => (vol.c * vol.t) as f64,
        CamVariant::PooledWeights => vol.t as f64,
    };
    let mut max = 0.0f64;
    for v in &mut map {
        *v = (*v / denom).max(0.0);
        max = max.max(*v);
    }
    let values = if max > 0.0 {
        map.iter_mut().for_each(|v| *v /= max);
        let (start, jump) = receptive_grid(spec, layer)?;
        let up = upsample_centered(&map, vol.h, vol.w, start, jump);
        // Cell centers fall between pixels, so rescale after resampling.
        let peak = up.iter().cloned().fold(0.0f64, f64::max);
        up.iter().map(|v| (v / peak).clamp(0.0, 1.0) as f32).collect()
    } else {
        warn!("activation map for class {class} at layer {layer} is identically zero");
        vec![0.0; FRAME_PIXELS]
    };
    Ok(Heatmap {
        values: Tensor::from_vec(&[FRAME_HEIGHT, FRAME_WIDTH], values)?,
        class,
        layer,
        source: String::new(),
    })
}

/// Input coordinate of output cell 0 and the cell spacing, per spatial
/// axis `[h, w]`, for the output of `layer`.
pub fn receptive_grid(spec: &ModelSpec, layer: usize) -> Result<([f64; 2], [f64; 2])> {
    let resolved = spec.resolve()?;
    let mut start = [0.0f64; 2];
    let mut jump = [1.0f64; 2];
    for r in resolved.iter().take(layer + 1) {
        match *r {
            Resolved::Conv(g) => {
                for a in 0..2 {
                    start[a] += (g.kernel[a + 1] - 1) as f64 / 2.0 * jump[a];
                }
            }
            Resolved::Pool { pool, .. } => {
                for a in 0..2 {
                    start[a] += (pool[a + 1] - 1) as f64 / 2.0 * jump[a];
                    jump[a] *= pool[a + 1] as f64;
                }
            }
            Resolved::Relu => {}
            _ => return Err(Error::shape("receptive field of a layer past Flatten")),
        }
    }
    Ok((start, jump))
}

/// Bilinear resampling of an `h x w` map onto the frame, with cell `(i, j)`
/// centered at input pixel `(start[0] + i * jump[0], start[1] + j * jump[1])`
/// and zero cells assumed on every side of the map.
fn upsample_centered(map: &[f64], h: usize, w: usize, start: [f64; 2], jump: [f64; 2]) -> Vec<f64> {
    // Two taps per axis: (cell index, or None for padding; weight).
    let taps = |p: usize, a: usize, n: usize| -> [(Option<usize>, f64); 2] {
        let u = (p as f64 - start[a]) / jump[a];
        let i0 = u.floor();
        let f = u - i0;
        let cell = |i: f64| (i >= 0.0 && i < n as f64).then_some(i as usize);
        [(cell(i0), 1.0 - f), (cell(i0 + 1.0), f)]
    };
    let cols: Vec<_> = (0..FRAME_WIDTH).map(|x| taps(x, 1, w)).collect();
    let mut out = Vec::with_capacity(FRAME_PIXELS);
    for y in 0..FRAME_HEIGHT {
        let rows = taps(y, 0, h);
        for xt in &cols {
            let mut v = 0.0;
            for &(yi, wy) in &rows {
                for &(xi, wx) in xt {
                    if let (Some(yi), Some(xi)) = (yi, xi) {
                        v += wy * wx * map[yi * w + xi];
                    }
                }
            }
            out.push(v);
        }
    }
    out
}

/// 8-bit PGM images of the heatmap and of `0.5 * frame + 0.5 * heatmap`.
pub fn render_heatmap(h: &Heatmap, underlay: &[f32]) -> Result<(Vec<u8>, Vec<u8>)> {
    if h.values.shape() != [FRAME_HEIGHT, FRAME_WIDTH] || underlay.len() != FRAME_PIXELS {
        return Err(Error::shape(format!(
            "heatmap {:?} and underlay of {} pixels do not both cover a {FRAME_HEIGHT}x{FRAME_WIDTH} frame",
            h.values.shape(),
            underlay.len()
        )));
    }
    let heat: Vec<u8> = h.values.data().iter().map(|&v| quantize(v)).collect();
    let overlay: Vec<u8> = h
        .values
        .data()
        .iter()
        .zip(underlay)
        .map(|(&v, &f)| quantize(0.5 * f + 0.5 * v))
        .collect();
    Ok((
        encode_pgm(FRAME_WIDTH, FRAME_HEIGHT, &heat)?,
        encode_pgm(FRAME_WIDTH, FRAME_HEIGHT, &overlay)?,
    ))
}

/// Writes `heatmap.pgm` and `overlay.pgm` into `dir` (created if needed).
pub fn write_heatmap(h: &Heatmap, underlay: &[f32], dir: &Path) -> Result<[PathBuf; 2]> {
    let (heat, overlay) = render_heatmap(h, underlay)?;
    std::fs::create_dir_all(dir)?;
    let paths = [dir.join("heatmap.pgm"), dir.join("overlay.pgm")];
    std::fs::write(&paths[0], heat)?;
    std::fs::write(&paths[1], overlay)?;
    Ok(paths)
}

//! Class activation maps from the per-class score maps, heatmap export and
//! a box-hit localization check.

use std::path::Path;

use crate::backbone::FeatureMap;
use crate::csra::class_score_maps;
use crate::data::ShapeBox;
use crate::error::{Error, Result};
use crate::ppm::{self, RgbImage};
use crate::tensor::{Scalar, Tensor};

/// White columns between the original and the overlay.
pub const GUTTER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub class: usize,
    /// `X_jᵀ m_i` at each location, `[h, w]`.
    pub raw: Tensor<f64>,
    /// Min-max normalized raw map, `[h, w]`.
    pub normalized: Tensor<f64>,
    /// Normalized map at input resolution, `[H, W]`.
    pub upsampled: Tensor<f64>,
}

/// Rescale onto `[0, 1]`; constant maps become all zeros.
pub fn normalize_min_max(map: &Tensor<f64>) -> Tensor<f64> {
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        map.map(|v| (v - lo) / (hi - lo))
    } else {
        Tensor::zeros(map.dims())
    }
}

/// Bilinear upsampling of an `[h, w]` map where cell `k` sits on output
/// pixel `k · out / in`, the input location a stride-`out / in` backbone
/// samples for that cell. Pixels past the last cell clamp to it.
pub fn upsample_bilinear(map: &Tensor<f64>, out_h: usize, out_w: usize) -> Result<Tensor<f64>> {
    let [h, w] = map.dims() else {
        return Err(Error::config(format!("expected an [h, w] map, got {:?}", map.dims())));
    };
    let (h, w) = (*h, *w);
    let axis = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = (o as f64 * input as f64 / out as f64).min((input - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let v = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = v[y0 * w + x0] * (1.0 - fx) + v[y0 * w + x1] * fx;
            let bottom = v[y1 * w + x0] * (1.0 - fx) + v[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(&[out_h, out_w], out)
}

/// Class map for a single-sample feature map, upsampled to `input_hw`.
pub fn compute_cam<T: Scalar>(
    x: &FeatureMap<T>,
    m: &Tensor<T>,
    class: usize,
    input_hw: (usize, usize),
) -> Result<ActivationMap> {
    let (n, _, h, w) = x.shape();
    let classes = m.dims()[0];
    if class >= classes {
        return Err(Error::config(format!("class index {class} out of range for {classes} classes")));
    }
    if n != 1 {
        return Err(Error::config(format!("CAM expects a single sample, got a batch of {n}")));
    }
    let maps = class_score_maps(x, m)?;
    let plane = &maps.tensor.data()[class * h * w..(class + 1) * h * w];
    let raw = Tensor::new(&[h, w], plane.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())?;
    let normalized = normalize_min_max(&raw);
    let upsampled = upsample_bilinear(&normalized, input_hw.0, input_hw.1)?;
    Ok(ActivationMap {
        class,
        raw,
        normalized,
        upsampled,
    })
}

/// Location `(x, y)` of the maximum of an `[h, w]` map.
///
/// Among exactly tied maxima the one nearest their centroid is chosen,
/// earliest in row-major order on equal distance.
pub fn peak(map: &Tensor<f64>) -> (usize, usize) {
    let w = map.dims()[1];
    let max = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<(usize, usize)> = map
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == max)
        .map(|(i, _)| (i % w, i / w))
        .collect();
    let k = tied.len() as f64;
    let cx = tied.iter().map(|p| p.0 as f64).sum::<f64>() / k;
    let cy = tied.iter().map(|p| p.1 as f64).sum::<f64>() / k;
    let dist = |p: &(usize, usize)| (p.0 as f64 - cx).powi(2) + (p.1 as f64 - cy).powi(2);
    tied.iter()
        .copied()
        .reduce(|best, p| if dist(&p) < dist(&best) { p } else { best })
        .unwrap_or((0, 0))
}

impl ActivationMap {
    pub fn peak(&self) -> (usize, usize) {
        peak(&self.upsampled)
    }
}

/// Whether the upsampled map's peak lies inside `truth`.
pub fn localization_score(map: &ActivationMap, truth: &ShapeBox) -> bool {
    let (x, y) = map.peak();
    truth.contains(x, y)
}

/// Blue at 0 through red at 1.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 0.0, 1.0 - v]
}

/// Side-by-side original and 50/50 heatmap overlay, `H × (2W + GUTTER)`.
pub fn heatmap_image(map: &ActivationMap, base: &Tensor<f32>) -> Result<RgbImage> {
    let [3, h, w] = base.dims() else {
        return Err(Error::config(format!("base image must be [3, H, W], got {:?}", base.dims())));
    };
    let (h, w) = (*h, *w);
    if map.upsampled.dims() != [h, w] {
        return Err(Error::config(format!(
            "map {:?} does not match image {h}x{w}",
            map.upsampled.dims()
        )));
    }
    let original = RgbImage::from_tensor(base)?;
    let mut out = RgbImage::new(2 * w + GUTTER, h);
    out.pixels.fill(255);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            out.put(x, y, original.get(x, y));
            let heat = colormap(map.upsampled.data()[y * w + x]);
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let b = f64::from(base.data()[c * plane + y * w + x]).clamp(0.0, 1.0);
                rgb[c] = ((0.5 * b + 0.5 * heat[c]) * 255.0).round() as u8;
            }
            out.put(w + GUTTER + x, y, rgb);
        }
    }
    Ok(out)
}

pub fn cam_file_name(image_stem: &str, class_name: &str) -> String {
    format!("{image_stem}_cam_{class_name}.ppm")
}

pub fn render_heatmap(map: &ActivationMap, base: &Tensor<f32>, out_path: impl AsRef<Path>) -> Result<()> {
    ppm::write_ppm(out_path, &heatmap_image(map, base)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csra::attention_scores;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feature(data: Vec<f64>, d: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::new(Tensor::new(&[1, d, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn zero_classifier_gives_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = FeatureMap::new(Tensor::<f64>::randn(&[1, 4, 3, 3], 1.0, &mut rng)).unwrap();
        let cam = compute_cam(&x, &Tensor::zeros(&[2, 4]), 1, (12, 12)).unwrap();
        assert!(cam.upsampled.data().iter().all(|&v| v == 0.0));
        assert!(compute_cam(&x, &Tensor::zeros(&[2, 4]), 2, (12, 12)).is_err());
    }

    #[test]
    fn delta_feature_peaks_at_its_cell() {
        let (d, h, w) = (3, 4, 4);
        let mut data = vec![0.0; d * h * w];
        // location (x=2, y=1) carries the direction of m_0
        for c in 0..d {
            data[c * h * w + w + 2] = [1.0, 2.0, -1.0][c];
        }
        let m = Tensor::new(&[1, 3], vec![1.0, 2.0, -1.0]).unwrap();
        let cam = compute_cam(&feature(data, d, h, w), &m, 0, (32, 32)).unwrap();
        assert_eq!(peak(&cam.raw), (2, 1));
        assert_eq!(cam.normalized.data()[w + 2], 1.0);
        assert_eq!(cam.peak(), (16, 8));
    }

    #[test]
    fn raw_argmax_matches_attention_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = FeatureMap::new(Tensor::<f64>::randn(&[1, 6, 4, 5], 1.0, &mut rng)).unwrap();
            let m = Tensor::randn(&[3, 6], 1.0, &mut rng);
            for t in [0.1, 1.0, 99.0] {
                let att = attention_scores(&class_score_maps(&x, &m).unwrap(), t).unwrap();
                for class in 0..3 {
                    let cam = compute_cam(&x, &m, class, (8, 10)).unwrap();
                    let row = Tensor::new(&[4, 5], att.data()[class * 20..(class + 1) * 20].to_vec()).unwrap();
                    assert_eq!(peak(&cam.raw), peak(&row));
                }
            }
        }
    }

    #[test]
    fn box_hits_and_misses() {
        let mut raw = Tensor::zeros(&[4, 4]);
        raw.data_mut()[5] = 1.0;
        let map = ActivationMap {
            class: 0,
            normalized: raw.clone(),
            upsampled: upsample_bilinear(&raw, 32, 32).unwrap(),
            raw,
        };
        let around = ShapeBox { class: 0, xmin: 8, ymin: 8, xmax: 15, ymax: 15 };
        let corner = ShapeBox { class: 0, xmin: 24, ymin: 24, xmax: 31, ymax: 31 };
        assert!(localization_score(&map, &around));
        assert!(!localization_score(&map, &corner));
    }

    #[test]
    fn heatmap_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = Tensor::full(&[3, 6, 5], 0.5f32);
        let zeros = Tensor::zeros(&[6, 5]);
        let map = ActivationMap {
            class: 0,
            raw: Tensor::zeros(&[2, 2]),
            normalized: Tensor::zeros(&[2, 2]),
            upsampled: zeros,
        };
        let path = dir.path().join(cam_file_name("img", "disc"));
        render_heatmap(&map, &base, &path).unwrap();
        assert!(path.ends_with("img_cam_disc.ppm"));
        let img = ppm::read_ppm(&path).unwrap();
        assert_eq!((img.height, img.width), (6, 2 * 5 + GUTTER));
        // all-zero map: every overlay pixel gets the colormap minimum
        let tint = img.get(5 + GUTTER, 0);
        for y in 0..6 {
            for x in 0..5 {
                assert_eq!(img.get(5 + GUTTER + x, y), tint);
            }
        }
        assert_eq!(tint, [64, 64, 191]);
        let decoded = ppm::decode_image(&path).unwrap();
        assert_eq!(decoded.dims(), &[3, 6, 14]);
    }

    proptest! {
        #[test]
        fn normalization_hits_both_endpoints(values in prop::collection::vec(-50.0f64..50.0, 2..30)) {
            let t = Tensor::new(&[values.len()], values.clone()).unwrap();
            let n = normalize_min_max(&t);
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                prop_assert!(n.data().contains(&0.0) && n.data().contains(&1.0));
                prop_assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
            } else {
                prop_assert!(n.data().iter().all(|&v| v == 0.0));
            }
        }

        #[test]
        fn peak_invariant_under_positive_scaling(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = FeatureMap::new(Tensor::<f64>::randn(&[1, 4, 3, 3], 1.0, &mut rng)).unwrap();
            let m = Tensor::randn(&[2, 4], 1.0, &mut rng);
            let a = compute_cam(&x, &m, 1, (9, 9)).unwrap();
            let b = compute_cam(&x, &m.scale(scale), 1, (9, 9)).unwrap();
            prop_assert_eq!(peak(&a.raw), peak(&b.raw));
        }
    }
}

//! Scoring and metrics: per-site anomaly maps from latents, bilinear
//! upsampling to image resolution, image/pixel AUROC, dataset-level
//! evaluation, and latent-space generation helpers.
//!
//! A site's score is `0.5 * sum_c z(c,h,w)^2`: the negative Gaussian
//! log-density up to its additive constant. The constant and the
//! log-determinant are dropped deliberately: the logdet does not decompose
//! per site in this architecture, and every metric here is rank-based, so
//! constant shifts change nothing.

use crate::error::{Error, Result};
use crate::flow::{flow_forward, flow_inverse, FlowModel};
use crate::io::{DatasetManifest, Label};
use crate::parallel::try_map_indexed;
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

/// Feature-resolution score field, optionally upsampled to image size.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    /// `(1, 1, H, W)` non-negative scores at feature resolution.
    pub scores: Tensor<f64>,
    /// `(1, 1, H_img, W_img)` when upsampling has been applied.
    pub upsampled: Option<Tensor<f64>>,
}

/// Collapses one latent sample into per-site scores.
pub fn anomaly_map<T: Scalar>(z: &Tensor<T>) -> Result<AnomalyMap> {
    let s = z.shape();
    if s.n != 1 {
        return Err(Error::contract(
            "anomaly_map",
            format!("expected a single sample, got batch of {}", s.n),
        ));
    }
    let mut scores = Tensor::<f64>::zeros(Shape::new(1, 1, s.h, s.w));
    for c in 0..s.c {
        for h in 0..s.h {
            for w in 0..s.w {
                let v = z.at(0, c, h, w).as_f64();
                scores.data_mut()[h * s.w + w] += 0.5 * v * v;
            }
        }
    }
    Ok(AnomalyMap { scores, upsampled: None })
}

/// Convenience: forward pass plus [`anomaly_map`] for one feature map.
pub fn anomaly_heatmap<T: Scalar>(model: &FlowModel<T>, features: &Tensor<T>) -> Result<AnomalyMap> {
    anomaly_map(&flow_forward(features, model)?.z)
}

/// Align-corners bilinear interpolation onto an `(h_out, w_out)` grid.
/// Exact at source grid points; only upscaling is allowed.
pub fn upsample_bilinear(map: &AnomalyMap, h_out: usize, w_out: usize) -> Result<AnomalyMap> {
    let s = map.scores.shape();
    if h_out < s.h || w_out < s.w {
        return Err(Error::contract(
            "upsample_bilinear",
            format!("target {h_out}x{w_out} is smaller than source {}x{}", s.h, s.w),
        ));
    }
    let src = map.scores.data();
    let mut out = Tensor::<f64>::zeros(Shape::new(1, 1, h_out, w_out));
    let coord = |i: usize, len_out: usize, len_in: usize| -> f64 {
        if len_out == 1 {
            0.0
        } else {
            i as f64 * (len_in - 1) as f64 / (len_out - 1) as f64
        }
    };
    for i in 0..h_out {
        let y = coord(i, h_out, s.h);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(s.h - 1);
        let fy = y - y0 as f64;
        for j in 0..w_out {
            let x = coord(j, w_out, s.w);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(s.w - 1);
            let fx = x - x0 as f64;
            // lerp form keeps constant fields and grid points exact
            let lerp = |a: f64, b: f64, f: f64| a + f * (b - a);
            let top = lerp(src[y0 * s.w + x0], src[y0 * s.w + x1], fx);
            let bottom = lerp(src[y1 * s.w + x0], src[y1 * s.w + x1], fx);
            out.data_mut()[i * w_out + j] = lerp(top, bottom, fy);
        }
    }
    Ok(AnomalyMap { scores: map.scores.clone(), upsampled: Some(out) })
}

/// Image-level score: the maximum site score.
pub fn image_score(map: &AnomalyMap) -> Result<f64> {
    let data = map.scores.data();
    if data.is_empty() {
        return Err(Error::contract("image_score", "empty anomaly map"));
    }
    Ok(data.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v)))
}

fn check_scores(op: &'static str, pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::contract(op, "both score lists must be non-empty"));
    }
    if pos.iter().chain(neg).any(|v| !v.is_finite()) {
        return Err(Error::contract(op, "scores must be finite"));
    }
    Ok(())
}

/// Probability that a positive outranks a negative, ties counted half.
/// Rank-sum formulation with tie groups, O((M+N) log (M+N)).
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores("auroc", pos, neg)?;
    let (m, n) = (pos.len(), neg.len());
    let mut all: Vec<(f64, bool)> = Vec::with_capacity(m + n);
    all.extend(pos.iter().map(|&s| (s, true)));
    all.extend(neg.iter().map(|&s| (s, false)));
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for entry in &all[i..j] {
            if entry.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (m * (m + 1)) as f64 / 2.0;
    Ok(u / (m as f64 * n as f64))
}

/// Literal pair count over all M·N pairs; the oracle [`auroc`] is tested
/// against. Guarded to M·N ≤ 1e7.
pub fn auroc_bruteforce(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores("auroc_bruteforce", pos, neg)?;
    let pairs = pos.len() as f64 * neg.len() as f64;
    if pairs > 1e7 {
        return Err(Error::contract(
            "auroc_bruteforce",
            format!("{pairs:.0} pairs exceed the 1e7 guard"),
        ));
    }
    let mut acc = 0.0f64;
    for &p in pos {
        for &n in neg {
            if p > n {
                acc += 1.0;
            } else if p == n {
                acc += 0.5;
            }
        }
    }
    Ok(acc / pairs)
}

/// One test image's contribution to [`EvalResult::per_image`].
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PerImage {
    pub features: String,
    pub label: String,
    pub score: f64,
}

/// Dataset-level metrics. Pixel scores are pooled across the whole test
/// set (normal images contribute all-negative pixels).
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalResult {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub n_images: usize,
    pub n_pixels: usize,
    pub image_positives: usize,
    pub image_negatives: usize,
    pub pixel_positives: usize,
    pub pixel_negatives: usize,
    pub per_image: Vec<PerImage>,
}

/// Scores every record of `manifest` with `model` and computes image- and
/// pixel-level AUROC. Requires at least one record of each class;
/// anomalous records need binary masks at image resolution.
pub fn evaluate<T: Scalar>(model: &FlowModel<T>, manifest: &DatasetManifest) -> Result<EvalResult> {
    let records = &manifest.records;
    let n_anomalous = records.iter().filter(|r| r.label == Label::Anomalous).count();
    if n_anomalous == 0 {
        return Err(Error::contract("evaluate", "test set has no anomalous samples"));
    }
    if n_anomalous == records.len() {
        return Err(Error::contract("evaluate", "test set has no normal samples"));
    }

    struct Scored {
        image_score: f64,
        pixels: Vec<f64>,
        mask: Option<Vec<f64>>,
    }
    let scored: Vec<Scored> = try_map_indexed(records.len(), |i| -> Result<Scored> {
        let r = &records[i];
        let features = manifest.load_features::<T>(r)?;
        if features.shape().n != 1 {
            return Err(Error::contract(
                "evaluate",
                format!("feature file {} holds a batch, expected one sample", r.features.display()),
            ));
        }
        let map = anomaly_heatmap(model, &features)?;
        let (hi, wi) = r.image_dims;
        let up = upsample_bilinear(&map, hi, wi)?;
        let mask = match manifest.load_mask::<T>(r)? {
            None => None,
            Some(m) => {
                let ms = m.shape();
                if (ms.n, ms.c, ms.h, ms.w) != (1, 1, hi, wi) {
                    return Err(Error::contract(
                        "evaluate",
                        format!("mask {} is {ms}, image dims say ({hi}, {wi})", r.features.display()),
                    ));
                }
                let bits: Vec<f64> = m.data().iter().map(|v| v.as_f64()).collect();
                if bits.iter().any(|&b| b != 0.0 && b != 1.0) {
                    return Err(Error::contract(
                        "evaluate",
                        format!("mask for {} is not binary", r.features.display()),
                    ));
                }
                Some(bits)
            }
        };
        Ok(Scored {
            image_score: image_score(&map)?,
            pixels: up.upsampled.expect("upsample_bilinear sets it").into_data(),
            mask,
        })
    })?;

    let mut image_pos = Vec::new();
    let mut image_neg = Vec::new();
    let mut pixel_pos = Vec::new();
    let mut pixel_neg = Vec::new();
    let mut per_image = Vec::with_capacity(records.len());
    for (r, s) in records.iter().zip(&scored) {
        per_image.push(PerImage {
            features: r.features.display().to_string(),
            label: r.label.to_string(),
            score: s.image_score,
        });
        match r.label {
            Label::Normal => {
                image_neg.push(s.image_score);
                pixel_neg.extend_from_slice(&s.pixels);
            }
            Label::Anomalous => {
                image_pos.push(s.image_score);
                let mask = s.mask.as_ref().expect("manifest validation requires a mask");
                for (&score, &bit) in s.pixels.iter().zip(mask) {
                    if bit == 1.0 {
                        pixel_pos.push(score);
                    } else {
                        pixel_neg.push(score);
                    }
                }
            }
        }
    }

    Ok(EvalResult {
        image_auroc: auroc(&image_pos, &image_neg)?,
        pixel_auroc: auroc(&pixel_pos, &pixel_neg)?,
        n_images: records.len(),
        n_pixels: pixel_pos.len() + pixel_neg.len(),
        image_positives: image_pos.len(),
        image_negatives: image_neg.len(),
        pixel_positives: pixel_pos.len(),
        pixel_negatives: pixel_neg.len(),
        per_image,
    })
}

/// Adds `magnitude` to a single-sample latent at the listed sites.
pub fn perturb_latent<T: Scalar>(
    z: &Tensor<T>,
    sites: &[(usize, usize, usize)],
    magnitude: f64,
) -> Result<Tensor<T>> {
    let s = z.shape();
    if s.n != 1 {
        return Err(Error::contract(
            "perturb_latent",
            format!("expected a single sample, got batch of {}", s.n),
        ));
    }
    let mut out = z.clone();
    for &(c, h, w) in sites {
        if c >= s.c || h >= s.h || w >= s.w {
            return Err(Error::contract(
                "perturb_latent",
                format!("site ({c}, {h}, {w}) outside latent extents {s}"),
            ));
        }
        out.data_mut()[s.index(0, c, h, w)] += T::from_f64(magnitude);
    }
    Ok(out)
}

/// Inverts a latent back to feature space; the reverse-generation entry
/// point.
pub fn generate_from_latent<T: Scalar>(z: &Tensor<T>, model: &FlowModel<T>) -> Result<Tensor<T>> {
    flow_inverse(z, model)
}

/// Seeded standard-normal latent, for sampling-based generation.
pub fn sample_standard_normal<T: Scalar>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = seeded(seed);
    let data = (0..shape.count())
        .map(|_| T::from_f64(rng.sample(StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("sized data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{write_features, ManifestRecord};
    use crate::subnet::Variant;
    use std::path::PathBuf;

    fn map_of(rows: usize, cols: usize, data: &[f64]) -> AnomalyMap {
        AnomalyMap {
            scores: Tensor::new(Shape::new(1, 1, rows, cols), data.to_vec()).unwrap(),
            upsampled: None,
        }
    }

    fn argsort(data: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.sort_by(|&a, &b| data[a].partial_cmp(&data[b]).unwrap());
        idx
    }

    #[test]
    fn anomaly_map_matches_hand_values() {
        let zero = Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2));
        let m = anomaly_map(&zero).unwrap();
        assert!(m.scores.data().iter().all(|&v| v == 0.0));

        let mut z = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2));
        let s = z.shape();
        z.data_mut()[s.index(0, 0, 1, 0)] = 3.0;
        z.data_mut()[s.index(0, 1, 1, 0)] = 4.0;
        let m = anomaly_map(&z).unwrap();
        assert_eq!(m.scores.at(0, 0, 1, 0), 12.5);
        assert_eq!(m.scores.data().iter().filter(|&&v| v != 0.0).count(), 1);

        let doubled = z.scale_add(2.0, 0.0);
        let m2 = anomaly_map(&doubled).unwrap();
        for (a, b) in m.scores.data().iter().zip(m2.scores.data()) {
            assert_eq!(*b, 4.0 * *a);
        }
        assert_eq!(argsort(m.scores.data()), argsort(m2.scores.data()));

        let batched = Tensor::<f64>::zeros(Shape::new(2, 1, 1, 1));
        assert!(anomaly_map(&batched).is_err());
    }

    #[test]
    fn upsample_matches_align_corners_oracle() {
        let m = map_of(1, 2, &[0.0, 1.0]);
        let up = upsample_bilinear(&m, 1, 3).unwrap();
        assert_eq!(up.upsampled.as_ref().unwrap().data(), &[0.0, 0.5, 1.0]);

        let m = map_of(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let same = upsample_bilinear(&m, 2, 2).unwrap();
        assert_eq!(same.upsampled.as_ref().unwrap().data(), m.scores.data());

        let up = upsample_bilinear(&m, 4, 4).unwrap();
        let u = up.upsampled.as_ref().unwrap();
        assert_eq!(u.at(0, 0, 0, 0), 1.0);
        assert_eq!(u.at(0, 0, 0, 3), 2.0);
        assert_eq!(u.at(0, 0, 3, 0), 3.0);
        assert_eq!(u.at(0, 0, 3, 3), 4.0);
        let (lo, hi) = (1.0, 4.0);
        assert!(u.data().iter().all(|&v| v >= lo && v <= hi));

        let flat = map_of(2, 2, &[0.7; 4]);
        let fu = upsample_bilinear(&flat, 5, 7).unwrap();
        assert!(fu.upsampled.unwrap().data().iter().all(|&v| v == 0.7));

        assert!(upsample_bilinear(&m, 1, 4).is_err());
    }

    #[test]
    fn image_score_is_max_and_monotone() {
        assert_eq!(image_score(&map_of(2, 2, &[0.0; 4])).unwrap(), 0.0);
        let m = map_of(2, 2, &[1.0, 7.5, 2.0, 0.5]);
        assert_eq!(image_score(&m).unwrap(), 7.5);
        let bumped = map_of(2, 2, &[2.0, 8.5, 3.0, 1.5]);
        assert!(image_score(&bumped).unwrap() > image_score(&m).unwrap());
    }

    #[test]
    fn auroc_hand_cases() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.7]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(auroc(&[2.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0], &[2.0]).unwrap(), 0.0);
        assert_eq!(auroc(&[3.0; 5], &[3.0; 7]).unwrap(), 0.5);
        assert!(auroc(&[], &[1.0]).is_err());
        assert!(auroc(&[1.0], &[]).is_err());
        assert!(auroc(&[f64::NAN], &[1.0]).is_err());
        assert_eq!(auroc_bruteforce(&[0.9, 0.8], &[0.1, 0.7]).unwrap(), 1.0);
        assert!(auroc_bruteforce(&vec![0.0; 4000], &vec![1.0; 4000]).is_err());
    }

    #[test]
    fn auroc_agrees_with_bruteforce_on_tie_heavy_instances() {
        let mut rng = seeded(77);
        for case in 0..200 {
            let m = rng.random_range(1..40);
            let n = rng.random_range(1..40);
            // integer grid forces collisions within and across classes
            let pos: Vec<f64> = (0..m).map(|_| rng.random_range(0..6) as f64).collect();
            let neg: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
            let fast = auroc(&pos, &neg).unwrap();
            let slow = auroc_bruteforce(&pos, &neg).unwrap();
            assert!((fast - slow).abs() < 1e-12, "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn auroc_is_invariant_under_monotone_transforms() {
        let mut rng = seeded(78);
        let transforms: [fn(f64) -> f64; 3] =
            [|x| x.exp(), |x| x.atan(), |x| 2.0 * x + 10.0];
        for t in transforms {
            let pos: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..3.0)).collect();
            let neg: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
            let base = auroc(&pos, &neg).unwrap();
            let tp: Vec<f64> = pos.iter().map(|&x| t(x)).collect();
            let tn: Vec<f64> = neg.iter().map(|&x| t(x)).collect();
            assert_eq!(base, auroc(&tp, &tn).unwrap());
        }
    }

    /// Builds a manifest whose anomalous features carry one huge spike at
    /// a masked site, with image dims equal to feature dims so the
    /// upsample step is the identity.
    fn perfect_fixture(dir: &std::path::Path) -> DatasetManifest {
        let shape = Shape::new(1, 2, 4, 4);
        let mut records = Vec::new();
        for i in 0..2 {
            let name = format!("n{i}_feat.cafm");
            write_features(&Tensor::<f64>::zeros(shape), &dir.join(&name)).unwrap();
            records.push(ManifestRecord {
                features: PathBuf::from(name),
                label: Label::Normal,
                mask: None,
                image_dims: (4, 4),
            });
        }
        for i in 0..2 {
            let mut feat = Tensor::<f64>::zeros(shape);
            let site = (i + 1, i, i + 2);
            feat.data_mut()[shape.index(0, 0, site.1, site.2)] = 9.0;
            let name = format!("a{i}_feat.cafm");
            write_features(&feat, &dir.join(&name)).unwrap();
            let mut mask = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4));
            mask.data_mut()[site.1 * 4 + site.2] = 1.0;
            let mask_name = format!("a{i}_mask.cafm");
            write_features(&mask, &dir.join(&mask_name)).unwrap();
            records.push(ManifestRecord {
                features: PathBuf::from(name),
                label: Label::Anomalous,
                mask: Some(PathBuf::from(mask_name)),
                image_dims: (4, 4),
            });
        }
        DatasetManifest { dir: dir.to_path_buf(), records }
    }

    #[test]
    fn evaluate_perfect_separation_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = perfect_fixture(dir.path());
        let model = FlowModel::<f64>::new((2, 4, 4), 1, Variant::Cc, None, None, 5).unwrap();
        let result = evaluate(&model, &manifest).unwrap();
        assert_eq!(result.image_auroc, 1.0);
        assert_eq!(result.pixel_auroc, 1.0);
        assert_eq!(result.n_images, 4);
        assert_eq!(result.n_pixels, 4 * 16);
        assert_eq!(result.image_positives, 2);
        assert_eq!(result.image_negatives, 2);
        assert_eq!(result.pixel_positives, 2);
        assert_eq!(result.pixel_negatives, 62);
        assert_eq!(result.per_image.len(), 4);
        assert!(result.per_image.iter().all(|p| p.score >= 0.0));

        let json = serde_json::to_value(&result).unwrap();
        assert_eq!(json["image_auroc"], 1.0);
        assert_eq!(json["per_image"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn evaluate_pools_pixels_like_the_bruteforce_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = perfect_fixture(dir.path());
        let model = FlowModel::<f64>::new((2, 4, 4), 1, Variant::Cc, None, None, 6).unwrap();
        let result = evaluate(&model, &manifest).unwrap();

        // recompute the pooled configuration by hand
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for r in &manifest.records {
            let feat = manifest.load_features::<f64>(r).unwrap();
            let map = anomaly_heatmap(&model, &feat).unwrap();
            let pixels = map.scores.data().to_vec();
            match manifest.load_mask::<f64>(r).unwrap() {
                None => neg.extend(pixels),
                Some(mask) => {
                    for (p, m) in pixels.iter().zip(mask.data()) {
                        if *m == 1.0 {
                            pos.push(*p);
                        } else {
                            neg.push(*p);
                        }
                    }
                }
            }
        }
        let oracle = auroc_bruteforce(&pos, &neg).unwrap();
        assert!((result.pixel_auroc - oracle).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_single_class_sets() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = perfect_fixture(dir.path());
        let model = FlowModel::<f64>::new((2, 4, 4), 1, Variant::Cc, None, None, 7).unwrap();

        let only_normal = DatasetManifest {
            dir: manifest.dir.clone(),
            records: manifest.records.iter().filter(|r| r.label == Label::Normal).cloned().collect(),
        };
        let err = evaluate(&model, &only_normal).unwrap_err();
        assert!(err.to_string().contains("no anomalous"), "{err}");

        manifest.records.retain(|r| r.label == Label::Anomalous);
        let err = evaluate(&model, &manifest).unwrap_err();
        assert!(err.to_string().contains("no normal"), "{err}");
    }

    #[test]
    fn perturbation_and_generation_round_trip() {
        let mut model = FlowModel::<f64>::new((2, 3, 3), 2, Variant::Cac, None, Some(1.9), 8).unwrap();
        model.randomize(9, 0.2);
        let x = sample_standard_normal::<f64>(Shape::new(1, 2, 3, 3), 10);
        let z = flow_forward(&x, &model).unwrap().z;

        let same = perturb_latent(&z, &[], 0.0).unwrap();
        assert_eq!(same, z);
        let single = perturb_latent(&z, &[(1, 2, 0)], 3.0).unwrap();
        let diffs = single
            .data()
            .iter()
            .zip(z.data())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(diffs, 1);
        assert!(perturb_latent(&z, &[(2, 0, 0)], 1.0).is_err());
        assert!(perturb_latent(&z, &[(0, 3, 0)], 1.0).is_err());

        let rebuilt = generate_from_latent(&z, &model).unwrap();
        assert!(rebuilt.max_abs_diff(&x) < 1e-10);
        let shifted = generate_from_latent(&single, &model).unwrap();
        assert!(shifted.max_abs_diff(&rebuilt) > 1e-6);
    }

    #[test]
    fn latent_sampling_is_seeded_and_standard() {
        let a = sample_standard_normal::<f64>(Shape::new(2, 4, 8, 8), 11);
        let b = sample_standard_normal::<f64>(Shape::new(2, 4, 8, 8), 11);
        assert_eq!(a, b);
        assert_ne!(a, sample_standard_normal::<f64>(Shape::new(2, 4, 8, 8), 12));
        assert!(a.is_finite());
        let mean: f64 = a.data().iter().sum::<f64>() / a.data().len() as f64;
        let var: f64 =
            a.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / a.data().len() as f64;
        assert!(mean.abs() < 0.2, "mean {mean}");
        assert!((var - 1.0).abs() < 0.3, "variance {var}");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(
                prop_oneof![(-5i32..5).prop_map(|v| v as f64), -5.0..5.0f64],
                1..max_len,
            )
        }

        proptest! {
            #[test]
            fn rank_sum_equals_pair_count(pos in scores(60), neg in scores(60)) {
                let fast = auroc(&pos, &neg).unwrap();
                let slow = auroc_bruteforce(&pos, &neg).unwrap();
                prop_assert!((fast - slow).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&fast));
            }

            #[test]
            fn complement_symmetry(pos in scores(40), neg in scores(40)) {
                let a = auroc(&pos, &neg).unwrap();
                let flipped_pos: Vec<f64> = pos.iter().map(|v| -v).collect();
                let flipped_neg: Vec<f64> = neg.iter().map(|v| -v).collect();
                let b = auroc(&flipped_pos, &flipped_neg).unwrap();
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }
    }
}

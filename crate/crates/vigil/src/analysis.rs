//! Error triage: gradient saliency maps, misclassification galleries, and
//! the occlusion slice that partitions false negatives by whether the bag
//! was placed next to furniture.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{FrameRecord, Label, Manifest, Split};
use crate::error::{Error, Result};
use crate::eval::Rate;
use crate::image::Image;
use crate::model::{self, BackboneParams, FeatureMap, HeadParams};

/// Per-pixel saliency scores for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major H×W scores in [0,1].
    pub values: Vec<f64>,
    /// The frame the map was computed from, when known.
    pub source_frame: Option<FrameRecord>,
    /// The predicted class whose logit was differentiated.
    pub target_class: Label,
}

impl SaliencyMap {
    pub fn save_png(&self, path: &Path) -> Result<()> {
        Image::save_gray_png(&self.values, self.height, self.width, path)
    }
}

/// Gradient of the predicted-class logit with respect to every input pixel,
/// as a 3xHxW map, along with the predicted class. This is the raw signal
/// the saliency map aggregates; exposed so it can be checked against finite
/// differences.
pub fn input_gradient(
    backbone: &BackboneParams,
    head: &HeadParams,
    image: &Image,
) -> Result<(FeatureMap, Label)> {
    let trace = model::forward_trace(backbone, image)?;
    let head_trace = model::head_forward(head, &trace.output)?;
    let (predicted, _) = model::decide(&head_trace.probabilities);
    let class = predicted.class_index();
    // d logit_class / d embedding is the head weight column of that class
    let d_embedding: Vec<f64> = (0..head.embedding_dim)
        .map(|d| head.weight(d, class))
        .collect();
    let (d_input, _) = model::backward_trace(backbone, &trace, &d_embedding);
    Ok((d_input, predicted))
}

/// Saliency of `image` under the model: |gradient| of the predicted-class
/// logit, reduced per pixel by the maximum over the 3 channels, then
/// min-max normalized. A constant gradient leaves the map all zeros.
pub fn saliency(backbone: &BackboneParams, head: &HeadParams, image: &Image) -> Result<SaliencyMap> {
    let (d_input, predicted) = input_gradient(backbone, head, image)?;
    let (height, width) = (image.height(), image.width());
    let mut values = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut score = 0.0f64;
            for c in 0..d_input.channels {
                score = score.max(d_input.data[d_input.idx(c, y, x)].abs());
            }
            values[y * width + x] = score;
        }
    }
    let lo = values.iter().fold(f64::INFINITY, |a, v| a.min(*v));
    let hi = values.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
    if hi > lo {
        for v in &mut values {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        values.fill(0.0);
    }
    Ok(SaliencyMap {
        height,
        width,
        values,
        source_frame: None,
        target_class: predicted,
    })
}

/// Misclassified frames of one split, with the confidence of each wrong
/// prediction, plus where their images were written.
#[derive(Debug, Clone)]
pub struct ErrorGallery {
    /// Background frames predicted abandoned, most confident first.
    pub false_positives: Vec<(FrameRecord, f64)>,
    /// Abandoned frames predicted background, most confident first.
    pub false_negatives: Vec<(FrameRecord, f64)>,
    pub split: Split,
    pub output_dir: PathBuf,
}

pub const GALLERY_SUMMARY: &str = "summary.csv";
pub const FALSE_POSITIVE_DIR: &str = "false_positive";
pub const FALSE_NEGATIVE_DIR: &str = "false_negative";

fn gallery_file_stem(record: &FrameRecord) -> String {
    format!(
        "{}_{}_{}",
        record.video_id,
        record.frame_index,
        record.variant.as_str()
    )
}

/// Run the model over a split and write every misclassified frame as a PNG
/// next to its saliency map, under false_positive/ and false_negative/
/// subdirectories of `output_dir`, with a summary.csv index.
pub fn build_error_gallery(
    backbone: &BackboneParams,
    head: &HeadParams,
    manifest: &Manifest,
    split: Split,
    output_dir: &Path,
) -> Result<ErrorGallery> {
    let records = manifest.records_of(split);
    if records.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    let fp_dir = output_dir.join(FALSE_POSITIVE_DIR);
    let fn_dir = output_dir.join(FALSE_NEGATIVE_DIR);
    fs::create_dir_all(&fp_dir).map_err(|e| Error::io(&fp_dir, e))?;
    fs::create_dir_all(&fn_dir).map_err(|e| Error::io(&fn_dir, e))?;

    let base_dir = manifest.base_dir.as_deref();
    let mut false_positives: Vec<(FrameRecord, f64, Image)> = Vec::new();
    let mut false_negatives: Vec<(FrameRecord, f64, Image)> = Vec::new();
    for record in records {
        let image = record.decode(base_dir)?;
        let (predicted, confidence) = model::predict(backbone, head, &image)?;
        if predicted == record.label {
            continue;
        }
        let entry = ((*record).clone(), confidence, image);
        match predicted {
            Label::Abandoned => false_positives.push(entry),
            Label::Background => false_negatives.push(entry),
        }
    }
    // most confident mistakes first; key as tie-break for stable output
    let order = |a: &(FrameRecord, f64, Image), b: &(FrameRecord, f64, Image)| {
        b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.key().cmp(&b.0.key()))
    };
    false_positives.sort_by(order);
    false_negatives.sort_by(order);

    let mut summary = String::from("path,confidence,true_label,predicted_label\n");
    let mut write_group = |group: &[(FrameRecord, f64, Image)], dir_name: &str| -> Result<()> {
        for (record, confidence, image) in group {
            let stem = gallery_file_stem(record);
            let frame_path = output_dir.join(dir_name).join(format!("{stem}.png"));
            image.save_png(&frame_path)?;
            let map = saliency(backbone, head, image)?;
            map.save_png(&output_dir.join(dir_name).join(format!("{stem}_saliency.png")))?;
            let predicted = match record.label {
                Label::Background => Label::Abandoned,
                Label::Abandoned => Label::Background,
            };
            summary.push_str(&format!(
                "{dir_name}/{stem}.png,{confidence},{},{}\n",
                record.label.as_str(),
                predicted.as_str()
            ));
        }
        Ok(())
    };
    write_group(&false_positives, FALSE_POSITIVE_DIR)?;
    write_group(&false_negatives, FALSE_NEGATIVE_DIR)?;
    let summary_path = output_dir.join(GALLERY_SUMMARY);
    fs::write(&summary_path, summary).map_err(|e| Error::io(&summary_path, e))?;

    Ok(ErrorGallery {
        false_positives: false_positives.into_iter().map(|(r, c, _)| (r, c)).collect(),
        false_negatives: false_negatives.into_iter().map(|(r, c, _)| (r, c)).collect(),
        split,
        output_dir: output_dir.to_path_buf(),
    })
}

/// False negatives partitioned by whether the generating event placed the
/// bag next to furniture.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionSummary {
    pub occluded_false_negatives: u64,
    pub clear_false_negatives: u64,
    pub occluded_abandoned_frames: u64,
    pub clear_abandoned_frames: u64,
    /// Fraction of all false negatives that came from near-furniture events.
    pub occluded_share: Rate,
    pub clear_share: Rate,
    /// False negatives over abandoned frames, within each partition.
    pub occluded_miss_rate: Rate,
    pub clear_miss_rate: Rate,
}

impl OcclusionSummary {
    pub fn to_kv(&self) -> String {
        format!(
            "occluded_false_negatives={}\nclear_false_negatives={}\noccluded_abandoned_frames={}\nclear_abandoned_frames={}\noccluded_share={}\nclear_share={}\noccluded_miss_rate={}\nclear_miss_rate={}\n",
            self.occluded_false_negatives,
            self.clear_false_negatives,
            self.occluded_abandoned_frames,
            self.clear_abandoned_frames,
            self.occluded_share,
            self.clear_share,
            self.occluded_miss_rate,
            self.clear_miss_rate
        )
    }
}

fn rate_of(numerator: u64, denominator: u64) -> Rate {
    if denominator == 0 {
        Rate::NotApplicable
    } else {
        Rate::Value(numerator as f64 / denominator as f64)
    }
}

/// Slice a gallery's false negatives by the near_furniture flag of their
/// generating events. Requires event metadata on the manifest.
pub fn occlusion_slice(gallery: &ErrorGallery, manifest: &Manifest) -> Result<OcclusionSummary> {
    let events = manifest.events.as_ref().ok_or_else(|| {
        Error::MetadataMissing("manifest carries no event metadata".into())
    })?;
    let near_by_video: BTreeMap<&str, bool> = events
        .iter()
        .map(|e| (e.video_id.as_str(), e.near_furniture))
        .collect();
    let lookup = |video_id: &str| -> Result<bool> {
        near_by_video
            .get(video_id)
            .copied()
            .ok_or_else(|| Error::MetadataMissing(format!("no event metadata for video {video_id}")))
    };

    let mut occluded_fns = 0u64;
    let mut clear_fns = 0u64;
    for (record, _) in &gallery.false_negatives {
        if lookup(&record.video_id)? {
            occluded_fns += 1;
        } else {
            clear_fns += 1;
        }
    }
    let mut occluded_frames = 0u64;
    let mut clear_frames = 0u64;
    for record in manifest.records_of(gallery.split) {
        if record.label != Label::Abandoned {
            continue;
        }
        if lookup(&record.video_id)? {
            occluded_frames += 1;
        } else {
            clear_frames += 1;
        }
    }
    let total_fns = occluded_fns + clear_fns;
    Ok(OcclusionSummary {
        occluded_false_negatives: occluded_fns,
        clear_false_negatives: clear_fns,
        occluded_abandoned_frames: occluded_frames,
        clear_abandoned_frames: clear_frames,
        occluded_share: rate_of(occluded_fns, total_fns),
        clear_share: rate_of(clear_fns, total_fns),
        occluded_miss_rate: rate_of(occluded_fns, occluded_frames),
        clear_miss_rate: rate_of(clear_fns, clear_frames),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{EventMeta, ImageRef, Manifest, Variant};
    use crate::rng;
    use std::sync::Arc;
    use tempfile::tempdir;

    #[test]
    fn passthrough_saliency_matches_the_hand_computed_map() {
        // linear model: logit_1 depends on pixel (y, x) with coefficient
        // (4y + x) on the red channel and half that (negated) on green, so
        // the max-|gradient| map is exactly (4y + x), normalized by 15
        let backbone = BackboneParams::passthrough(4, 4);
        let mut head = HeadParams::zeros(backbone.embedding_dim);
        for y in 0..4 {
            for x in 0..4 {
                let p = (y * 4 + x) as f64;
                let red = y * 4 + x; // channel 0, CHW flattening
                let green = 16 + y * 4 + x;
                head.weights[red * 2 + 1] = p;
                head.weights[green * 2 + 1] = -0.5 * p;
            }
        }
        let image = Image::from_fn(4, 4, |_, _| [0.5, 0.5, 0.5]);
        let map = saliency(&backbone, &head, &image).unwrap();
        assert_eq!(map.target_class, Label::Abandoned);
        assert_eq!((map.height, map.width), (4, 4));
        for y in 0..4 {
            for x in 0..4 {
                let expected = (y * 4 + x) as f64 / 15.0;
                assert_eq!(map.values[y * 4 + x], expected, "pixel ({y}, {x})");
            }
        }
    }

    #[test]
    fn constant_logits_give_an_all_zero_map() {
        let backbone = BackboneParams::tiny_v1_with_input(7, 8, 8);
        let head = HeadParams::zeros(backbone.embedding_dim);
        let image = Image::from_fn(8, 8, |y, x| [(y as f64) / 8.0, 0.3, (x as f64) / 8.0]);
        let map = saliency(&backbone, &head, &image).unwrap();
        assert!(map.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn saliency_gradient_matches_finite_differences() {
        let backbone = BackboneParams::tiny_v1_with_input(11, 12, 12);
        let head = HeadParams::seeded(backbone.embedding_dim, 13);
        let mut r = rng::seeded(17);
        let image = Image::from_fn(12, 12, |_, _| {
            [
                rng::uniform(&mut r, 0.0, 1.0),
                rng::uniform(&mut r, 0.0, 1.0),
                rng::uniform(&mut r, 0.0, 1.0),
            ]
        });
        let (grad, predicted) = input_gradient(&backbone, &head, &image).unwrap();
        let class = predicted.class_index();
        let h = 1e-4;
        let logit = |img: &Image| -> f64 {
            let emb = model::embed(&backbone, img).unwrap();
            model::head_forward(&head, &emb).unwrap().logits[class]
        };
        let mut checked_nonzero = false;
        for _ in 0..20 {
            let c = rng::uniform_int(&mut r, 0, 2) as usize;
            let y = rng::uniform_int(&mut r, 0, 11) as usize;
            let x = rng::uniform_int(&mut r, 0, 11) as usize;
            let mut plus = image.clone();
            let mut px = plus.get(y, x);
            px[c] += h;
            plus.set(y, x, px);
            let mut minus = image.clone();
            let mut px = minus.get(y, x);
            px[c] -= h;
            minus.set(y, x, px);
            let fd = (logit(&plus) - logit(&minus)) / (2.0 * h);
            let analytic = grad.data[grad.idx(c, y, x)];
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-3, "pixel ({c}, {y}, {x}): analytic {analytic}, fd {fd}");
            checked_nonzero |= analytic.abs() > 1e-9;
        }
        assert!(checked_nonzero, "all sampled gradients were zero");
    }

    #[test]
    fn nonconstant_maps_attain_both_extremes() {
        let backbone = BackboneParams::tiny_v1_with_input(3, 16, 16);
        let head = HeadParams::seeded(backbone.embedding_dim, 5);
        let mut r = rng::seeded(29);
        let image = Image::from_fn(16, 16, |_, _| {
            [
                rng::uniform(&mut r, 0.0, 1.0),
                rng::uniform(&mut r, 0.0, 1.0),
                rng::uniform(&mut r, 0.0, 1.0),
            ]
        });
        let map = saliency(&backbone, &head, &image).unwrap();
        assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(map.values.contains(&0.0));
        assert!(map.values.contains(&1.0));
    }

    /// Toy split where brightness decides the class; `flip_videos` lists
    /// videos whose label is deliberately wrong so the model misclassifies
    /// exactly those frames.
    fn toy_manifest(flip_videos: &[&str]) -> Manifest {
        let mut records = Vec::new();
        let videos = [
            ("ev-a", true, 2usize),
            ("ev-b", false, 2),
            ("ev-c", true, 3),
            ("ev-d", false, 3),
        ];
        for (video, bright, frames) in videos {
            for f in 0..frames {
                let base = if bright { 0.8 } else { 0.2 };
                let img = Image::from_fn(8, 8, |y, x| {
                    [base + ((y + x + f) % 3) as f64 * 0.01, base, base]
                });
                let truthful = if bright { Label::Abandoned } else { Label::Background };
                let label = if flip_videos.contains(&video) {
                    match truthful {
                        Label::Abandoned => Label::Background,
                        Label::Background => Label::Abandoned,
                    }
                } else {
                    truthful
                };
                records.push(FrameRecord {
                    image_ref: ImageRef::Memory(Arc::new(img)),
                    label,
                    video_id: video.into(),
                    frame_index: f,
                    variant: Variant::OrigColor,
                });
            }
        }
        let assignment = [
            ("ev-a".to_string(), Split::Test),
            ("ev-b".to_string(), Split::Test),
            ("ev-c".to_string(), Split::Train),
            ("ev-d".to_string(), Split::Val),
        ]
        .into_iter()
        .collect();
        Manifest::new(records, assignment).unwrap()
    }

    fn brightness_model() -> (BackboneParams, HeadParams) {
        let backbone = BackboneParams::passthrough(8, 8);
        let mut head = HeadParams::zeros(backbone.embedding_dim);
        for d in 0..head.embedding_dim {
            head.weights[d * 2 + 1] = 1.0;
        }
        head.bias[1] = -(8.0 * 8.0 * 3.0) * 0.5;
        (backbone, head)
    }

    #[test]
    fn perfect_model_leaves_an_empty_gallery() {
        let manifest = toy_manifest(&[]);
        let (backbone, head) = brightness_model();
        let dir = tempdir().unwrap();
        let gallery =
            build_error_gallery(&backbone, &head, &manifest, Split::Test, dir.path()).unwrap();
        assert!(gallery.false_positives.is_empty());
        assert!(gallery.false_negatives.is_empty());
        for sub in [FALSE_POSITIVE_DIR, FALSE_NEGATIVE_DIR] {
            let entries: Vec<_> = fs::read_dir(dir.path().join(sub)).unwrap().collect();
            assert!(entries.is_empty(), "{sub} should hold zero files");
        }
        let summary = fs::read_to_string(dir.path().join(GALLERY_SUMMARY)).unwrap();
        assert_eq!(summary, "path,confidence,true_label,predicted_label\n");
    }

    #[test]
    fn false_negatives_write_a_frame_and_saliency_pair() {
        // flipping ev-b marks its dark frames abandoned; the brightness
        // model calls them background -> false negatives
        let manifest = toy_manifest(&["ev-b"]);
        let (backbone, head) = brightness_model();
        let dir = tempdir().unwrap();
        let gallery =
            build_error_gallery(&backbone, &head, &manifest, Split::Test, dir.path()).unwrap();
        assert!(gallery.false_positives.is_empty());
        assert_eq!(gallery.false_negatives.len(), 2);
        let mut files: Vec<String> = fs::read_dir(dir.path().join(FALSE_NEGATIVE_DIR))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        files.sort();
        assert_eq!(
            files,
            vec![
                "ev-b_0_orig-color.png",
                "ev-b_0_orig-color_saliency.png",
                "ev-b_1_orig-color.png",
                "ev-b_1_orig-color_saliency.png",
            ]
        );
        let summary = fs::read_to_string(dir.path().join(GALLERY_SUMMARY)).unwrap();
        assert_eq!(summary.lines().count(), 3);
        for line in summary.lines().skip(1) {
            assert!(line.starts_with("false_negative/ev-b_"), "{line}");
            assert!(line.ends_with(",abandoned,background"), "{line}");
        }
    }

    #[test]
    fn gallery_membership_matches_an_independent_recount() {
        let manifest = toy_manifest(&["ev-a", "ev-b"]);
        let (backbone, head) = brightness_model();
        let dir = tempdir().unwrap();
        let gallery =
            build_error_gallery(&backbone, &head, &manifest, Split::Test, dir.path()).unwrap();

        let mut expected_fp = Vec::new();
        let mut expected_fn = Vec::new();
        for record in manifest.records_of(Split::Test) {
            let image = record.decode(None).unwrap();
            let (predicted, _) = model::predict(&backbone, &head, &image).unwrap();
            if predicted == record.label {
                continue;
            }
            match predicted {
                Label::Abandoned => expected_fp.push((record.video_id.clone(), record.frame_index)),
                Label::Background => expected_fn.push((record.video_id.clone(), record.frame_index)),
            }
        }
        let ids = |list: &[(FrameRecord, f64)]| -> Vec<(String, usize)> {
            let mut v: Vec<_> = list
                .iter()
                .map(|(r, _)| (r.video_id.clone(), r.frame_index))
                .collect();
            v.sort();
            v
        };
        expected_fp.sort();
        expected_fn.sort();
        assert_eq!(ids(&gallery.false_positives), expected_fp);
        assert_eq!(ids(&gallery.false_negatives), expected_fn);
        // every gallery member really is misclassified, sorted by confidence
        for window in gallery.false_negatives.windows(2) {
            assert!(window[0].1 >= window[1].1);
        }
    }

    fn with_events(manifest: Manifest, near_videos: &[&str]) -> Manifest {
        let events = manifest
            .assignment
            .keys()
            .map(|video| EventMeta {
                video_id: video.clone(),
                has_bag: true,
                appear_frame: Some(0),
                near_furniture: near_videos.contains(&video.as_str()),
                num_persons: 2,
            })
            .collect();
        manifest.with_events(events).unwrap()
    }

    #[test]
    fn zero_false_negatives_slice_to_not_applicable() {
        let manifest = with_events(toy_manifest(&[]), &["ev-a"]);
        let (backbone, head) = brightness_model();
        let dir = tempdir().unwrap();
        let gallery =
            build_error_gallery(&backbone, &head, &manifest, Split::Test, dir.path()).unwrap();
        let slice = occlusion_slice(&gallery, &manifest).unwrap();
        assert_eq!(slice.occluded_share, Rate::NotApplicable);
        assert_eq!(slice.clear_share, Rate::NotApplicable);
        assert_eq!(slice.occluded_false_negatives + slice.clear_false_negatives, 0);
    }

    #[test]
    fn all_occluded_false_negatives_give_share_one() {
        // ev-b (flipped to abandoned, predicted background) is the only FN
        // source and is marked near furniture
        let manifest = with_events(toy_manifest(&["ev-b"]), &["ev-b"]);
        let (backbone, head) = brightness_model();
        let dir = tempdir().unwrap();
        let gallery =
            build_error_gallery(&backbone, &head, &manifest, Split::Test, dir.path()).unwrap();
        assert_eq!(gallery.false_negatives.len(), 2);
        let slice = occlusion_slice(&gallery, &manifest).unwrap();
        assert_eq!(slice.occluded_share, Rate::Value(1.0));
        assert_eq!(slice.clear_share, Rate::Value(0.0));
        assert_eq!(slice.occluded_miss_rate, Rate::Value(1.0));
        // ev-a's abandoned frames sit in the clear partition, all correct
        assert_eq!(slice.clear_miss_rate, Rate::Value(0.0));
    }

    #[test]
    fn missing_event_metadata_is_an_error() {
        let manifest = toy_manifest(&["ev-b"]);
        let (backbone, head) = brightness_model();
        let dir = tempdir().unwrap();
        let gallery =
            build_error_gallery(&backbone, &head, &manifest, Split::Test, dir.path()).unwrap();
        let err = occlusion_slice(&gallery, &manifest).unwrap_err();
        assert!(matches!(err, Error::MetadataMissing(_)));
    }
}

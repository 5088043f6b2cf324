use serde::{Deserialize, Serialize};

use super::loss::sigmoid;
use super::RawPredictions;
use crate::bbox::BBox;
use crate::error::{Error, Result};

/// Log-size offsets are clamped to this magnitude before exponentiation.
const MAX_LOG_SCALE: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

/// Turns raw predictions into scored boxes: decode offsets against anchors,
/// clip to the image, keep scores strictly above `score_threshold`, then run
/// per-class greedy NMS.
pub fn decode_detections(
    raw: &RawPredictions,
    score_threshold: f64,
    nms_iou: f64,
    image_size: (usize, usize),
) -> Result<Vec<Detection>> {
    for (name, v) in [("score_threshold", score_threshold), ("nms_iou", nms_iou)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} {v} outside [0, 1]")));
        }
    }
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    let mut candidates = Vec::new();
    for i in 0..raw.len() {
        let objectness = sigmoid(raw.field(i, 0));
        let (class_id, class_prob) = if raw.class_count == 1 {
            (0, 1.0)
        } else {
            let logits: Vec<f64> = (0..raw.class_count).map(|c| raw.field(i, 5 + c)).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let best = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (c, &l)| if l > b.1 { (c, l) } else { b });
            (best.0, 1.0 / sum)
        };
        let score = objectness * class_prob;
        if !(score > score_threshold) {
            continue;
        }
        let anchor = raw.anchor_box(i);
        let (ax, ay) = anchor.center();
        let cx = ax + raw.field(i, 1) * anchor.w;
        let cy = ay + raw.field(i, 2) * anchor.h;
        let w = anchor.w * raw.field(i, 3).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
        let h = anchor.h * raw.field(i, 4).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
        let Some(bbox) = BBox::from_center(cx, cy, w, h).clip(iw, ih) else {
            continue;
        };
        if bbox.is_valid() {
            candidates.push(Detection { bbox, score, class_id });
        }
    }
    Ok(nms(candidates, nms_iou))
}

/// Greedy per-class NMS. Candidates are visited by descending score, equal
/// scores in input order; a candidate is dropped when its IoU with an already
/// kept box of the same class exceeds `iou_threshold`.
pub fn nms(mut candidates: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && k.bbox.iou(&cand.bbox) > iou_threshold);
        if !suppressed {
            kept.push(cand);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(x: f64, y: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, y, 10.0, 10.0),
            score,
            class_id: 0,
        }
    }

    #[test]
    fn nms_examples() {
        let kept = nms(vec![det(0.0, 0.0, 0.8), det(0.0, 0.0, 0.9)], 0.5);
        assert_eq!(kept, vec![det(0.0, 0.0, 0.9)]);
        let kept = nms(vec![det(0.0, 0.0, 0.9), det(50.0, 50.0, 0.8)], 0.5);
        assert_eq!(kept.len(), 2);
        // Different classes never suppress each other.
        let mut other = det(0.0, 0.0, 0.5);
        other.class_id = 1;
        assert_eq!(nms(vec![det(0.0, 0.0, 0.9), other], 0.5).len(), 2);
    }

    #[test]
    fn equal_scores_keep_first() {
        let a = det(0.0, 0.0, 0.7);
        let b = det(1.0, 0.0, 0.7);
        assert_eq!(nms(vec![a, b], 0.5), vec![a]);
        assert_eq!(nms(vec![b, a], 0.5), vec![b]);
    }

    #[test]
    fn threshold_one_is_empty() {
        use crate::detector::DetectorConfig;
        use crate::tensor::Tensor;
        let config = DetectorConfig::default();
        let raw = RawPredictions::new(Tensor::from_vec(&[18, 4, 4], vec![50.0; 18 * 16]), &config, (128, 128));
        assert!(decode_detections(&raw, 1.0, 0.5, (128, 128)).unwrap().is_empty());
        assert!(!decode_detections(&raw, 0.5, 0.5, (128, 128)).unwrap().is_empty());
        assert!(decode_detections(&raw, 1.5, 0.5, (128, 128)).is_err());
    }

    proptest! {
        #[test]
        fn nms_is_sound(
            boxes in proptest::collection::vec((0.0f64..60.0, 0.0f64..60.0, 1.0f64..30.0, 1.0f64..30.0, 0.0f64..1.0, 0usize..2), 0..30),
            thr in 0.0f64..1.0,
        ) {
            let input: Vec<Detection> = boxes.iter().map(|&(x, y, w, h, s, c)| Detection {
                bbox: BBox::new(x, y, w, h), score: s, class_id: c,
            }).collect();
            let kept = nms(input.clone(), thr);
            for (i, a) in kept.iter().enumerate() {
                prop_assert!(input.contains(a));
                for b in &kept[i + 1..] {
                    if a.class_id == b.class_id {
                        prop_assert!(a.bbox.iou(&b.bbox) <= thr);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod round_trip {
    use super::*;
    use crate::detector::loss::encode;
    use crate::detector::{assign_anchors, DetectorConfig};
    use crate::domain::DomainSchema;
    use crate::scenes::{generate_split, Balance, SceneSpec, Split};
    use crate::tensor::Tensor;

    /// Raw predictions built from the training targets decode back to every
    /// ground truth that owns an anchor.
    #[test]
    fn targets_decode_to_ground_truth() {
        let config = DetectorConfig::default();
        let layout = DomainSchema::altitude(5.0, 100.0, 3).unwrap();
        let ds = generate_split(&SceneSpec::default(), &layout, 60, &Balance::Balanced, Split::Train).unwrap();
        let (mut owned, mut total) = (0, 0);
        for img in &ds.images {
            let empty = RawPredictions::new(Tensor::zeros(&[config.head_channels(), 4, 4]), &config, (128, 128));
            let assigned = assign_anchors(&empty, &img.objects);
            let mut raw = empty.clone();
            for i in 0..raw.len() {
                let o = raw.offset(i, 0);
                raw.values.data_mut()[o] = -20.0;
                if let Some(g) = assigned[i] {
                    let t = encode(&raw.anchor_box(i), &img.objects[g].bbox);
                    for (f, v) in t.iter().enumerate() {
                        let o = raw.offset(i, 1 + f);
                        raw.values.data_mut()[o] = *v;
                    }
                    let o = raw.offset(i, 0);
                    raw.values.data_mut()[o] = 20.0;
                }
            }
            let dets = decode_detections(&raw, 0.5, 0.5, (128, 128)).unwrap();
            for (g, obj) in img.objects.iter().enumerate() {
                total += 1;
                if assigned.contains(&Some(g)) {
                    owned += 1;
                    assert!(dets.iter().any(|d| d.bbox.iou(&obj.bbox) > 0.999), "image {} object {g}", img.id);
                }
            }
        }
        eprintln!("{owned} of {total} objects own an anchor");
        assert!(owned * 10 >= total * 8);
    }
}

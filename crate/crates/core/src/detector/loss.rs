use super::{
    conv_backward, conv_forward, leaky_relu_backward_inplace, leaky_relu_inplace, ConvParams, DetectorParams,
    RawPredictions,
};
use crate::bbox::BBox;
use crate::dataset::Annotation;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An anchor is positive when its IoU with some ground truth reaches this.
pub const POSITIVE_IOU: f64 = 0.5;
const BOX_WEIGHT: f64 = 5.0;

/// Gradients with the same layout as [`DetectorParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub stages: Vec<ConvParams>,
    pub head: ConvParams,
}

impl Gradients {
    pub fn zeros_like(params: &DetectorParams) -> Self {
        Gradients {
            stages: params.stages.iter().map(ConvParams::zeros_like).collect(),
            head: params.head.zeros_like(),
        }
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.stages
            .iter_mut()
            .flat_map(|s| [&mut s.weight, &mut s.bias])
            .chain([&mut self.head.weight, &mut self.head.bias])
    }

    /// Named tensors in the same order as [`DetectorParams::tensors`].
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{}.weight", i + 1), &s.weight));
            out.push((format!("stage{}.bias", i + 1), &s.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        let others: Vec<&Tensor> = other
            .stages
            .iter()
            .flat_map(|s| [&s.weight, &s.bias])
            .chain([&other.head.weight, &other.head.bias])
            .collect();
        for (a, b) in self.tensors_mut().zip(others) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.scale(alpha);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.sum_squares()).sum::<f64>().sqrt()
    }
}

fn shape_iou(w: f64, h: f64, side: f64) -> f64 {
    let inter = w.min(side) * h.min(side);
    inter / (w * h + side * side - inter)
}

/// Ground-truth index assigned to every prediction, or `None` for negatives.
///
/// An anchor is positive when its IoU with some ground truth is at least
/// [`POSITIVE_IOU`] (highest IoU wins). In addition every ground truth forces
/// one anchor positive: the anchor of the cell containing its center whose
/// size best matches its shape. Tiny boxes overlap no anchor by 0.5, and
/// away from the cell center their raw IoU is zero for every anchor, so the
/// forced match is chosen by shape within the owning cell.
pub fn assign_anchors(raw: &RawPredictions, objects: &[Annotation]) -> Vec<Option<usize>> {
    let n = raw.len();
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut best_iou = vec![0.0f64; n];
    for i in 0..n {
        let anchor = raw.anchor_box(i);
        for (g, obj) in objects.iter().enumerate() {
            let iou = anchor.iou(&obj.bbox);
            if iou >= POSITIVE_IOU && iou > best_iou[i] {
                best_iou[i] = iou;
                assigned[i] = Some(g);
            }
        }
    }
    let (gh, gw) = raw.grid();
    let a_n = raw.anchors_per_cell();
    let mut forced: Vec<(f64, usize, usize)> = Vec::with_capacity(objects.len());
    for (g, obj) in objects.iter().enumerate() {
        let (cx, cy) = obj.bbox.center();
        let gx = ((cx / raw.stride.0).floor().max(0.0) as usize).min(gw - 1);
        let gy = ((cy / raw.stride.1).floor().max(0.0) as usize).min(gh - 1);
        let (a, q) = raw
            .anchor_sizes
            .iter()
            .enumerate()
            .map(|(a, &s)| (a, shape_iou(obj.bbox.w, obj.bbox.h, s)))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        forced.push((q, (gy * gw + gx) * a_n + a, g));
    }
    // Better shape matches win contested anchors; applied last.
    forced.sort_by(|x, y| x.0.total_cmp(&y.0).then(y.2.cmp(&x.2)));
    for (_, i, g) in forced {
        assigned[i] = Some(g);
    }
    assigned
}

/// Regression targets `(tx, ty, tw, th)` of `target` relative to `anchor`.
pub(crate) fn encode(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = target.center();
    [
        (gx - ax) / anchor.w,
        (gy - ay) / anchor.h,
        (target.w / anchor.w).ln(),
        (target.h / anchor.h).ln(),
    ]
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Summed detection loss over all predictions and its gradient w.r.t. the
/// raw head output: objectness binary cross-entropy on every prediction,
/// smooth-L1 box regression and class cross-entropy on positives.
pub fn detection_loss(raw: &RawPredictions, objects: &[Annotation]) -> Result<(f64, Tensor)> {
    let assigned = assign_anchors(raw, objects);
    let mut grad = Tensor::zeros(raw.values.shape());
    let mut loss = 0.0;
    let c_n = raw.class_count;
    for (i, target) in assigned.iter().enumerate() {
        let z = raw.field(i, 0);
        let t = if target.is_some() { 1.0 } else { 0.0 };
        loss += softplus(z) - t * z;
        let o = raw.offset(i, 0);
        grad.data_mut()[o] = sigmoid(z) - t;

        let Some(g) = *target else { continue };
        let obj = &objects[g];
        let goal = encode(&raw.anchor_box(i), &obj.bbox);
        for (k, &want) in goal.iter().enumerate() {
            let d = raw.field(i, 1 + k) - want;
            let (l, dl) = if d.abs() < 1.0 {
                (0.5 * d * d, d)
            } else {
                (d.abs() - 0.5, d.signum())
            };
            loss += BOX_WEIGHT * l;
            let o = raw.offset(i, 1 + k);
            grad.data_mut()[o] = BOX_WEIGHT * dl;
        }
        if c_n > 1 {
            let logits: Vec<f64> = (0..c_n).map(|c| raw.field(i, 5 + c)).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            loss += sum.ln() + max - logits[obj.class_id];
            for c in 0..c_n {
                let p = exps[c] / sum;
                let o = raw.offset(i, 5 + c);
                grad.data_mut()[o] = p - if c == obj.class_id { 1.0 } else { 0.0 };
            }
        }
    }
    if !loss.is_finite() || !grad.all_finite() {
        return Err(Error::Divergence {
            phase: "loss".into(),
            epoch: 0,
        });
    }
    Ok((loss, grad))
}

/// Loss and parameter gradients for one image.
///
/// `input` is the feature grid produced by stage `from_stage` (the image
/// tensor when `from_stage == 0`); stages at or below `from_stage` get zero
/// gradient. Frozen tensors always get exactly zero gradient, and
/// backpropagation stops below the lowest stage with a trainable tensor.
pub fn compute_loss(
    params: &DetectorParams,
    input: &Tensor,
    from_stage: usize,
    objects: &[Annotation],
    image_size: (usize, usize),
) -> Result<(f64, Gradients)> {
    let s_n = params.stage_count();
    if from_stage > s_n {
        return Err(Error::invalid(format!("from_stage {from_stage} > {s_n}")));
    }
    for obj in objects {
        if !obj.bbox.is_valid() || obj.class_id >= params.config().class_count {
            return Err(Error::invalid(format!("invalid ground truth {obj:?}")));
        }
    }
    // Forward, keeping what backward needs.
    let mut inputs_hw = Vec::with_capacity(s_n - from_stage);
    let mut cols = Vec::with_capacity(s_n - from_stage);
    let mut outputs: Vec<Tensor> = Vec::with_capacity(s_n - from_stage);
    let mut x = input.clone();
    for stage in (from_stage + 1)..=s_n {
        let conv = params.stage(stage);
        super::check_stage_input(conv, &x)?;
        inputs_hw.push((x.shape()[1], x.shape()[2]));
        let (mut out, c) = conv_forward(&x, &conv.weight, &conv.bias, &conv.geometry(2, 1));
        leaky_relu_inplace(&mut out);
        cols.push(c);
        outputs.push(out.clone());
        x = out;
    }
    let head_g = params.head.geometry(1, 0);
    let (head_out, head_cols) = conv_forward(&x, &params.head.weight, &params.head.bias, &head_g);
    let raw = RawPredictions::new(head_out, params.config(), image_size);
    let (loss, d_raw) = detection_loss(&raw, objects)?;

    let mut grads = Gradients::zeros_like(params);
    let trainable = |name: String| !params.is_frozen(&name);
    let stage_trainable = |s: usize| trainable(format!("stage{s}.weight")) || trainable(format!("stage{s}.bias"));
    let lowest = ((from_stage + 1)..=s_n).find(|&s| stage_trainable(s));

    let head_params = trainable("head.weight".into()) || trainable("head.bias".into());
    let (hp, mut d_x) = conv_backward(
        &d_raw,
        &head_cols,
        &params.head.weight,
        &head_g,
        (x.shape()[1], x.shape()[2]),
        head_params,
        lowest.is_some(),
    );
    if let Some((dw, db)) = hp {
        grads.head = ConvParams { weight: dw, bias: db };
    }

    if let Some(lowest) = lowest {
        for stage in (lowest..=s_n).rev() {
            let k = stage - from_stage - 1;
            let mut d = d_x.take().expect("gradient flows down to the lowest trainable stage");
            leaky_relu_backward_inplace(&mut d, &outputs[k]);
            let conv = params.stage(stage);
            let (pg, d_in) = conv_backward(
                &d,
                &cols[k],
                &conv.weight,
                &conv.geometry(2, 1),
                inputs_hw[k],
                stage_trainable(stage),
                stage > lowest,
            );
            if let Some((dw, db)) = pg {
                grads.stages[stage - 1] = ConvParams { weight: dw, bias: db };
            }
            d_x = d_in;
        }
    }

    let frozen: Vec<String> = params.frozen().iter().cloned().collect();
    for (name, t) in grads_tensors_mut(&mut grads) {
        if frozen.contains(&name) {
            t.fill(0.0);
        }
    }
    Ok((loss, grads))
}

fn grads_tensors_mut(g: &mut Gradients) -> Vec<(String, &mut Tensor)> {
    let mut out = Vec::new();
    for (i, s) in g.stages.iter_mut().enumerate() {
        out.push((format!("stage{}.weight", i + 1), &mut s.weight));
        out.push((format!("stage{}.bias", i + 1), &mut s.bias));
    }
    out.push(("head.weight".into(), &mut g.head.weight));
    out.push(("head.bias".into(), &mut g.head.bias));
    out
}

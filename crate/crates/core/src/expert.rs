//! Expert detectors: shared lower stages, one upper-stage branch per domain.
//!
//! A model split at stage `s` keeps stages `1..=s` once, shared by every
//! domain, and owns a branch per domain key holding stages `s+1..=S` and the
//! head. Routing bins the image's metadata, runs the shared stages, then runs
//! only the selected branch. Models are named `<dims>@<s>`, e.g.
//! `altitude-angle-time@4`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_archive, encode_archive, write_bytes};
use crate::dataset::{AnnotatedImage, Raster};
use crate::detector::{
    decode_detections, image_tensor, run_head, run_stage, ConvParams, Detection, DetectorConfig, DetectorParams,
    RawPredictions,
};
use crate::domain::{DomainSchema, MetadataRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How expert branches start out after the split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertInit {
    /// Copy of the pretrained base's upper stages and head.
    #[default]
    Clone,
    /// Fresh random initialization.
    Reinit,
}

/// Upper stages and head owned by one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub stages: Vec<ConvParams>,
    pub head: ConvParams,
}

impl Branch {
    fn tensors(&self, first_stage: usize) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (k, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{}.weight", first_stage + k), &s.weight));
            out.push((format!("stage{}.bias", first_stage + k), &s.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.stages.iter().map(ConvParams::len).sum::<usize>() + self.head.len()
    }

    pub fn bit_eq(&self, other: &Branch) -> bool {
        self.stages.len() == other.stages.len()
            && self.stages.iter().zip(&other.stages).all(|(a, b)| a.bit_eq(b))
            && self.head.bit_eq(&other.head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub total: usize,
    pub shared: usize,
    pub per_branch: usize,
    pub branch_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDetector {
    config: DetectorConfig,
    schema: DomainSchema,
    split: usize,
    shared: Vec<ConvParams>,
    branches: Vec<Branch>,
    shared_frozen: bool,
}

impl ExpertDetector {
    /// Splits `base` after stage `split`. Stages `1..=split` move into the
    /// shared trunk; every domain key gets a clone of the rest.
    pub fn split_model(base: &DetectorParams, schema: &DomainSchema, split: usize) -> Result<Self> {
        Self::split_with(base, schema, split, ExpertInit::Clone, 0)
    }

    pub fn split_with(
        base: &DetectorParams,
        schema: &DomainSchema,
        split: usize,
        init: ExpertInit,
        seed: u64,
    ) -> Result<Self> {
        let s_n = base.stage_count();
        if split > s_n {
            return Err(Error::invalid(format!("split stage {split} outside [0, {s_n}]")));
        }
        let branches = (0..schema.key_count())
            .map(|k| {
                let source = match init {
                    ExpertInit::Clone => base.clone(),
                    ExpertInit::Reinit => DetectorParams::init(base.config().clone(), seed.wrapping_add(1 + k as u64))?,
                };
                Ok(Branch {
                    stages: source.stages[split..].to_vec(),
                    head: source.head.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExpertDetector {
            config: base.config().clone(),
            schema: schema.clone(),
            split,
            shared: base.stages[..split].to_vec(),
            branches,
            shared_frozen: false,
        })
    }

    pub fn name(&self) -> String {
        format!("{}@{}", self.schema.name(), self.split)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn schema(&self) -> &DomainSchema {
        &self.schema
    }

    pub fn split_stage(&self) -> usize {
        self.split
    }

    pub fn shared(&self) -> &[ConvParams] {
        &self.shared
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn branch(&self, key_index: usize) -> &Branch {
        &self.branches[key_index]
    }

    pub fn branch_mut(&mut self, key_index: usize) -> &mut Branch {
        &mut self.branches[key_index]
    }

    pub fn is_shared_frozen(&self) -> bool {
        self.shared_frozen
    }

    /// Marks the shared stages frozen. A no-op for `@0` models.
    pub fn freeze_shared(&mut self) {
        self.shared_frozen = self.split > 0;
    }

    /// Names of frozen tensors, in the flat `stage{i}.{tensor}` namespace.
    pub fn freeze_mask(&self) -> BTreeSet<String> {
        if !self.shared_frozen {
            return BTreeSet::new();
        }
        (1..=self.split)
            .flat_map(|i| [format!("stage{i}.weight"), format!("stage{i}.bias")])
            .collect()
    }

    pub fn parameter_count(&self) -> ParameterCount {
        let shared = self.shared.iter().map(ConvParams::len).sum();
        let per_branch = self.branches.first().map_or(0, Branch::parameter_count);
        debug_assert!(self.branches.iter().all(|b| b.parameter_count() == per_branch));
        ParameterCount {
            total: shared + self.branches.len() * per_branch,
            shared,
            per_branch,
            branch_count: self.branches.len(),
        }
    }

    pub fn trainable_parameter_count(&self) -> usize {
        let c = self.parameter_count();
        if self.shared_frozen {
            c.total - c.shared
        } else {
            c.total
        }
    }

    /// The full detector seen by one domain: shared trunk plus its branch,
    /// with the shared stages frozen if the trunk is.
    pub fn branch_detector(&self, key_index: usize) -> DetectorParams {
        let branch = &self.branches[key_index];
        let stages = self.shared.iter().chain(&branch.stages).cloned().collect();
        DetectorParams::from_parts(self.config.clone(), stages, branch.head.clone(), self.freeze_mask())
    }

    /// Copies the upper stages and head of `params` into branch `key_index`.
    /// The shared trunk is left untouched.
    pub fn set_branch(&mut self, key_index: usize, params: &DetectorParams) -> Result<()> {
        if params.config() != &self.config {
            return Err(Error::invalid("detector config differs from the expert model's"));
        }
        self.branches[key_index] = Branch {
            stages: params.stages[self.split..].to_vec(),
            head: params.head.clone(),
        };
        Ok(())
    }

    /// Output of the shared trunk for one image.
    pub fn shared_features(&self, image: &Raster) -> Result<Tensor> {
        let mut x = image_tensor(image);
        for conv in &self.shared {
            x = run_stage(conv, &x)?;
        }
        Ok(x)
    }

    /// Completes the forward pass through branch `key_index`.
    pub fn branch_forward(&self, key_index: usize, shared: &Tensor, image_size: (usize, usize)) -> Result<RawPredictions> {
        let branch = self
            .branches
            .get(key_index)
            .ok_or_else(|| Error::invalid(format!("no branch {key_index}")))?;
        let mut x = shared.clone();
        for conv in &branch.stages {
            x = run_stage(conv, &x)?;
        }
        run_head(&branch.head, &self.config, &x, image_size)
    }

    /// Raw predictions of the branch selected by `meta`.
    pub fn route_raw(&self, image: &Raster, meta: &MetadataRecord) -> Result<RawPredictions> {
        let key = self.schema.bin_index(meta)?;
        let shared = self.shared_features(image)?;
        self.branch_forward(key, &shared, (image.width(), image.height()))
    }

    pub fn route_forward(
        &self,
        image: &Raster,
        meta: &MetadataRecord,
        score_threshold: f64,
        nms_iou: f64,
    ) -> Result<Vec<Detection>> {
        let raw = self.route_raw(image, meta)?;
        decode_detections(&raw, score_threshold, nms_iou, (image.width(), image.height()))
    }

    /// Multiply-accumulates along the routed path (trunk plus one branch),
    /// counted from the actual tensor shapes.
    pub fn routed_inference_ops(&self, image_size: usize) -> Result<u64> {
        self.config.grid_size(image_size)?;
        let branch = &self.branches[0];
        let mut side = image_size;
        let mut total = 0u64;
        for conv in self.shared.iter().chain(&branch.stages) {
            side /= 2;
            total += (side * side * conv.weight.len()) as u64;
        }
        total += (side * side * branch.head.weight.len()) as u64;
        Ok(total)
    }

    fn archive_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.shared.iter().enumerate() {
            out.push((format!("stage{}.weight", i + 1), &s.weight));
            out.push((format!("stage{}.bias", i + 1), &s.bias));
        }
        for (k, branch) in self.branches.iter().enumerate() {
            let key = self.schema.key_at(k);
            for (name, t) in branch.tensors(self.split + 1) {
                out.push((format!("branch/{key}/{name}"), t));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = ExpertMeta {
            name: self.name(),
            config: self.config.clone(),
            schema: self.schema.clone(),
            split_stage: self.split,
            freeze_mask: self.freeze_mask().into_iter().collect(),
            keys: self.schema.enumerate_keys().iter().map(|k| k.to_string()).collect(),
        };
        encode_archive(EXPERT_KIND, &meta, &self.archive_tensors())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    /// Decodes an archive. With `expected_schema`, a model built for a
    /// different schema is rejected.
    pub fn from_bytes(bytes: &[u8], expected_schema: Option<&DomainSchema>) -> Result<Self> {
        let mut archive = decode_archive(bytes)?;
        if archive.kind != EXPERT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected an {EXPERT_KIND} archive, found `{}`",
                archive.kind
            )));
        }
        let meta: ExpertMeta = serde_json::from_value(archive.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if let Some(expected) = expected_schema {
            if expected != &meta.schema {
                return Err(Error::SchemaConflict(format!(
                    "model `{}` was built for schema `{}` ({} keys), active schema is `{}` ({} keys) or differs in bins",
                    meta.name,
                    meta.schema.name(),
                    meta.schema.key_count(),
                    expected.name(),
                    expected.key_count()
                )));
            }
        }
        meta.config.validate()?;
        let s_n = meta.config.stage_count();
        if meta.split_stage > s_n {
            return Err(Error::Checkpoint(format!("split stage {} > {s_n}", meta.split_stage)));
        }
        let shapes = meta.config.tensor_shapes();
        let shape_of = |name: &str| shapes.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone()).expect("known");
        let mut shared = Vec::with_capacity(meta.split_stage);
        for i in 1..=meta.split_stage {
            shared.push(ConvParams {
                weight: archive.take(&format!("stage{i}.weight"), &shape_of(&format!("stage{i}.weight")))?,
                bias: archive.take(&format!("stage{i}.bias"), &shape_of(&format!("stage{i}.bias")))?,
            });
        }
        let mut branches = Vec::with_capacity(meta.schema.key_count());
        for key in meta.schema.enumerate_keys() {
            let mut stages = Vec::new();
            for i in meta.split_stage + 1..=s_n {
                stages.push(ConvParams {
                    weight: archive.take(&format!("branch/{key}/stage{i}.weight"), &shape_of(&format!("stage{i}.weight")))?,
                    bias: archive.take(&format!("branch/{key}/stage{i}.bias"), &shape_of(&format!("stage{i}.bias")))?,
                });
            }
            let head = ConvParams {
                weight: archive.take(&format!("branch/{key}/head.weight"), &shape_of("head.weight"))?,
                bias: archive.take(&format!("branch/{key}/head.bias"), &shape_of("head.bias"))?,
            };
            branches.push(Branch { stages, head });
        }
        archive.finish()?;
        let model = ExpertDetector {
            config: meta.config,
            schema: meta.schema,
            split: meta.split_stage,
            shared,
            branches,
            shared_frozen: !meta.freeze_mask.is_empty(),
        };
        if model.freeze_mask().into_iter().collect::<Vec<_>>() != meta.freeze_mask {
            return Err(Error::Checkpoint("freeze mask does not cover exactly the shared stages".into()));
        }
        if model.name() != meta.name {
            return Err(Error::Checkpoint(format!("name `{}` does not match `{}`", meta.name, model.name())));
        }
        Ok(model)
    }

    pub fn load(path: &Path, expected_schema: Option<&DomainSchema>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_schema)
    }
}

pub const EXPERT_KIND: &str = "expert";

#[derive(Debug, Serialize, Deserialize)]
struct ExpertMeta {
    name: String,
    config: DetectorConfig,
    schema: DomainSchema,
    split_stage: usize,
    freeze_mask: Vec<String>,
    keys: Vec<String>,
}

/// Anything that turns an annotated image into detections.
pub trait Detector: Sync {
    fn detect_image(&self, image: &AnnotatedImage, score_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>>;
}

impl Detector for DetectorParams {
    fn detect_image(&self, image: &AnnotatedImage, score_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        self.detect(&image.image, score_threshold, nms_iou)
    }
}

impl Detector for ExpertDetector {
    fn detect_image(&self, image: &AnnotatedImage, score_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        self.route_forward(&image.image, &image.metadata, score_threshold, nms_iou)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DomainDimension, MetadataField};
    use crate::scenes::{generate_split, Balance, SceneSpec, Split};

    fn day_night() -> DomainSchema {
        DomainSchema::new(vec![DomainDimension::day_night().unwrap()]).unwrap()
    }

    fn base() -> DetectorParams {
        DetectorParams::init(DetectorConfig::default(), 21).unwrap()
    }

    fn images(n: usize) -> Vec<AnnotatedImage> {
        let layout = DomainSchema::new(vec![
            DomainDimension::equidistant("altitude", MetadataField::Altitude, 5.0, 100.0, 3).unwrap(),
            DomainDimension::day_night().unwrap(),
        ])
        .unwrap();
        generate_split(&SceneSpec::default(), &layout, n, &Balance::Balanced, Split::Test)
            .unwrap()
            .images
    }

    #[test]
    fn time_at_three() {
        let m = ExpertDetector::split_model(&base(), &day_night(), 3).unwrap();
        assert_eq!(m.name(), "time@3");
        assert_eq!(m.branch_count(), 2);
        assert_eq!(m.shared().len(), 3);
        assert_eq!(m.branch(0).stages.len(), 2);
        assert!(ExpertDetector::split_model(&base(), &day_night(), 6).is_err());

        let top = ExpertDetector::split_model(&base(), &day_night(), 5).unwrap();
        assert!(top.branch(0).stages.is_empty());
        let none = ExpertDetector::split_model(&base(), &day_night(), 0).unwrap();
        assert!(none.shared().is_empty());
    }

    #[test]
    fn clones_agree_at_birth() {
        let m = ExpertDetector::split_model(&base(), &day_night(), 2).unwrap();
        for img in images(6) {
            let shared = m.shared_features(&img.image).unwrap();
            let a = m.branch_forward(0, &shared, (128, 128)).unwrap();
            let b = m.branch_forward(1, &shared, (128, 128)).unwrap();
            assert!(a.values.bit_eq(&b.values));
        }
    }

    #[test]
    fn single_domain_routing_equals_base() {
        let single = DomainSchema::new(vec![DomainDimension::day_night()
            .unwrap()
            .fuse_labels(&[("day", "any"), ("night", "any")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect())
            .unwrap()])
        .unwrap();
        let b = base();
        let m = ExpertDetector::split_model(&b, &single, 3).unwrap();
        for img in images(4) {
            let routed = m.route_raw(&img.image, &img.metadata).unwrap();
            assert!(routed.values.bit_eq(&b.predict(&img.image).unwrap().values));
        }
    }

    #[test]
    fn routing_ignores_other_branches() {
        let mut m = ExpertDetector::split_model(&base(), &day_night(), 3).unwrap();
        let day_img = images(12).into_iter().find(|i| i.metadata.night == Some(false)).unwrap();
        let before = m.route_raw(&day_img.image, &day_img.metadata).unwrap();
        for v in m.branch_mut(1).head.weight.data_mut() {
            *v += 1.0;
        }
        let after = m.route_raw(&day_img.image, &day_img.metadata).unwrap();
        assert!(before.values.bit_eq(&after.values));
        for v in m.branch_mut(0).head.bias.data_mut() {
            *v += 1.0;
        }
        let changed = m.route_raw(&day_img.image, &day_img.metadata).unwrap();
        assert!(!before.values.bit_eq(&changed.values));
    }

    #[test]
    fn different_metadata_routes_differently() {
        let schema = DomainSchema::new(vec![
            DomainDimension::equidistant("altitude", MetadataField::Altitude, 0.0, 100.0, 3).unwrap(),
            DomainDimension::bird_view(60.0).unwrap(),
        ])
        .unwrap();
        let low = MetadataRecord::new(10.0, 10.0);
        let high = MetadataRecord::new(100.0, 90.0);
        assert_ne!(schema.bin_index(&low).unwrap(), schema.bin_index(&high).unwrap());
        let mut m = ExpertDetector::split_model(&base(), &schema, 2).unwrap();
        let hi_key = schema.bin_index(&high).unwrap();
        for v in m.branch_mut(hi_key).head.bias.data_mut() {
            *v += 0.5;
        }
        let img = &images(1)[0].image;
        let a = m.route_raw(img, &low).unwrap();
        let b = m.route_raw(img, &high).unwrap();
        assert!(!a.values.bit_eq(&b.values));
    }

    #[test]
    fn freezing_and_counts() {
        let b = base();
        let mut m = ExpertDetector::split_model(&b, &day_night(), 2).unwrap();
        let c = m.parameter_count();
        assert_eq!(c.total, c.shared + c.branch_count * c.per_branch);
        assert_eq!(c.shared + c.per_branch, b.count_parameters(false));
        let before = m.trainable_parameter_count();
        m.freeze_shared();
        assert_eq!(m.trainable_parameter_count(), before - c.shared);
        assert_eq!(m.freeze_mask().len(), 4);
        let d = m.branch_detector(1);
        assert_eq!(d.count_parameters(true), c.per_branch);

        let mut zero = ExpertDetector::split_model(&b, &day_night(), 0).unwrap();
        zero.freeze_shared();
        assert!(!zero.is_shared_frozen());
        assert!(zero.freeze_mask().is_empty());
    }

    #[test]
    fn routed_ops_equal_base_ops() {
        let b = base();
        let base_ops = crate::detector::count_inference_ops(b.config(), 128).unwrap();
        for s in 0..=5 {
            let m = ExpertDetector::split_model(&b, &day_night(), s).unwrap();
            assert_eq!(m.routed_inference_ops(128).unwrap(), base_ops);
        }
    }

    #[test]
    fn archive_round_trip() {
        let mut m = ExpertDetector::split_model(&base(), &day_night(), 3).unwrap();
        m.freeze_shared();
        for v in m.branch_mut(1).head.bias.data_mut() {
            *v -= 0.25;
        }
        let bytes = m.to_bytes().unwrap();
        let back = ExpertDetector::from_bytes(&bytes, Some(&day_night())).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for img in images(3) {
            assert_eq!(
                m.route_forward(&img.image, &img.metadata, 0.01, 0.5).unwrap(),
                back.route_forward(&img.image, &img.metadata, 0.01, 0.5).unwrap()
            );
        }
        let other = DomainSchema::altitude(5.0, 100.0, 3).unwrap();
        assert!(matches!(
            ExpertDetector::from_bytes(&bytes, Some(&other)),
            Err(Error::SchemaConflict(_))
        ));
    }

    #[test]
    fn tampered_branch_tensor_is_named() {
        let m = ExpertDetector::split_model(&base(), &day_night(), 4).unwrap();
        let mut tensors: Vec<(String, Tensor)> =
            m.archive_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let idx = tensors.iter().position(|(n, _)| n == "branch/night/stage5.weight").unwrap();
        let t = &tensors[idx].1;
        tensors[idx].1 = Tensor::from_vec(&[t.len()], t.data().to_vec());
        let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        let meta = ExpertMeta {
            name: m.name(),
            config: m.config.clone(),
            schema: m.schema.clone(),
            split_stage: 4,
            freeze_mask: vec![],
            keys: vec!["day".into(), "night".into()],
        };
        let bytes = encode_archive(EXPERT_KIND, &meta, &refs).unwrap();
        let err = ExpertDetector::from_bytes(&bytes, None).unwrap_err().to_string();
        assert!(err.contains("branch/night/stage5.weight"), "{err}");
    }
}

//! Domain dimensions and the binning of sensor metadata into discrete domain keys.
//!
//! A [`DomainSchema`] is an ordered list of [`DomainDimension`]s. Each dimension
//! maps one metadata reading (altitude, gimbal pitch, capture time, speed) onto
//! one of its labels; the schema maps a whole [`MetadataRecord`] onto a
//! [`DomainKey`], the tuple of per-dimension labels. Keys are enumerated in
//! lexicographic dimension order, so a key's index is its mixed-radix number
//! with the first dimension most significant.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-image sensor readings.
///
/// Every field is optional; a schema only requires the fields it bins on.
/// `night` is a direct day/night annotation that takes precedence over
/// `timestamp` when both are present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub altitude_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gimbal_pitch_deg: Option<f64>,
    /// Seconds since the Unix epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub night: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gps: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_mps: Option<f64>,
}

impl MetadataRecord {
    pub fn new(altitude_m: f64, gimbal_pitch_deg: f64) -> Self {
        MetadataRecord {
            altitude_m: Some(altitude_m),
            gimbal_pitch_deg: Some(gimbal_pitch_deg),
            ..Default::default()
        }
    }

    pub fn with_timestamp(mut self, timestamp: f64) -> Self {
        self.timestamp = Some(timestamp);
        self
    }

    pub fn with_night(mut self, night: bool) -> Self {
        self.night = Some(night);
        self
    }

    /// Checks the physical ranges of whichever fields are present.
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.altitude_m {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::invalid(format!("altitude {a} must be finite and >= 0")));
            }
        }
        if let Some(p) = self.gimbal_pitch_deg {
            if !p.is_finite() || !(0.0..=90.0).contains(&p) {
                return Err(Error::invalid(format!("gimbal pitch {p} outside [0, 90]")));
            }
        }
        Ok(())
    }
}

/// A scalar metadata field a dimension can bin on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetadataField {
    #[serde(alias = "altitude_m")]
    Altitude,
    #[serde(alias = "gimbal_pitch_deg", alias = "pitch")]
    GimbalPitch,
    #[serde(alias = "timestamp")]
    CaptureTime,
    #[serde(alias = "speed_mps")]
    Speed,
}

impl MetadataField {
    /// Name of the field as it appears in metadata files.
    pub fn record_name(self) -> &'static str {
        match self {
            MetadataField::Altitude => "altitude_m",
            MetadataField::GimbalPitch => "gimbal_pitch_deg",
            MetadataField::CaptureTime => "timestamp",
            MetadataField::Speed => "speed_mps",
        }
    }

    fn read(self, meta: &MetadataRecord) -> Result<f64> {
        let value = match self {
            MetadataField::Altitude => meta.altitude_m,
            MetadataField::GimbalPitch => meta.gimbal_pitch_deg,
            MetadataField::CaptureTime => meta.timestamp,
            MetadataField::Speed => meta.speed_mps,
        };
        value.ok_or_else(|| Error::SchemaMismatch {
            field: self.record_name().to_string(),
        })
    }
}

/// How raw metadata becomes a raw bin index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BinRule {
    EquidistantBins {
        field: MetadataField,
        lo: f64,
        hi: f64,
        n: usize,
    },
    /// Interior cut points; `edges.len() + 1` bins.
    ExplicitEdges {
        field: MetadataField,
        edges: Vec<f64>,
    },
    /// Categorical split of a scalar at one or more thresholds, e.g. bird view
    /// iff pitch >= 60.
    Threshold {
        field: MetadataField,
        thresholds: Vec<f64>,
    },
    /// Raw index 0 (day) iff the local hour lies in `[day_start, day_end)`.
    DayNight {
        day_start: f64,
        day_end: f64,
        #[serde(default)]
        utc_offset_hours: f64,
    },
}

impl BinRule {
    fn raw_count(&self) -> usize {
        match self {
            BinRule::EquidistantBins { n, .. } => *n,
            BinRule::ExplicitEdges { edges, .. } => edges.len() + 1,
            BinRule::Threshold { thresholds, .. } => thresholds.len() + 1,
            BinRule::DayNight { .. } => 2,
        }
    }

    fn field(&self) -> MetadataField {
        match self {
            BinRule::EquidistantBins { field, .. }
            | BinRule::ExplicitEdges { field, .. }
            | BinRule::Threshold { field, .. } => *field,
            BinRule::DayNight { .. } => MetadataField::CaptureTime,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            BinRule::EquidistantBins { lo, hi, n, .. } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::invalid(format!("equidistant bins need lo < hi, got [{lo}, {hi}]")));
                }
                if *n < 2 {
                    return Err(Error::invalid(format!("equidistant bins need n >= 2, got {n}")));
                }
            }
            BinRule::ExplicitEdges { edges, .. } | BinRule::Threshold { thresholds: edges, .. } => {
                if edges.is_empty() {
                    return Err(Error::invalid("edge list is empty"));
                }
                if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::invalid(format!("edges must be finite and strictly increasing: {edges:?}")));
                }
            }
            BinRule::DayNight {
                day_start, day_end, ..
            } => {
                if !(0.0..=24.0).contains(day_start) || !(0.0..=24.0).contains(day_end) || day_start >= day_end {
                    return Err(Error::invalid(format!("day window [{day_start}, {day_end}) is not a valid hour range")));
                }
            }
        }
        Ok(())
    }

    /// Index of the bin containing `value`. Bins are half-open `[e_i, e_{i+1})`;
    /// a value on an edge goes to the higher bin and out-of-range values clamp.
    fn bin_scalar(&self, value: f64) -> Result<usize> {
        if !value.is_finite() {
            return Err(Error::invalid(format!("cannot bin non-finite value {value}")));
        }
        let index = match self {
            BinRule::EquidistantBins { lo, hi, n, .. } => {
                (1..*n).take_while(|&i| value >= equidistant_edge(*lo, *hi, *n, i)).count()
            }
            BinRule::ExplicitEdges { edges, .. } | BinRule::Threshold { thresholds: edges, .. } => {
                edges.iter().take_while(|&&e| value >= e).count()
            }
            BinRule::DayNight {
                day_start,
                day_end,
                utc_offset_hours,
            } => {
                let hour = (value / 3600.0 + utc_offset_hours).rem_euclid(24.0);
                usize::from(!(hour >= *day_start && hour < *day_end))
            }
        };
        Ok(index)
    }

    fn bin_record(&self, meta: &MetadataRecord) -> Result<usize> {
        if let BinRule::DayNight { .. } = self {
            if let Some(night) = meta.night {
                return Ok(usize::from(night));
            }
        }
        let value = self.field().read(meta)?;
        self.bin_scalar(value)
    }
}

impl BinRule {
    /// Range of values covered by raw bin `raw`, before clamping; the outer
    /// bins extend to infinity. `None` for the day/night rule.
    pub(crate) fn raw_interval(&self, raw: usize) -> Option<(f64, f64)> {
        let cuts: Vec<f64> = match self {
            BinRule::EquidistantBins { lo, hi, n, .. } => (1..*n).map(|i| equidistant_edge(*lo, *hi, *n, i)).collect(),
            BinRule::ExplicitEdges { edges, .. } | BinRule::Threshold { thresholds: edges, .. } => edges.clone(),
            BinRule::DayNight { .. } => return None,
        };
        let lo = if raw == 0 { f64::NEG_INFINITY } else { cuts[raw - 1] };
        let hi = cuts.get(raw).copied().unwrap_or(f64::INFINITY);
        Some((lo, hi))
    }

    pub(crate) fn binned_field(&self) -> MetadataField {
        self.field()
    }
}

fn equidistant_edge(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    lo + (hi - lo) * i as f64 / n as f64
}

/// One axis of the domain space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDimension {
    name: String,
    rule: BinRule,
    /// Label for each raw bin, before any fusion.
    raw_labels: Vec<String>,
    /// Raw bin index -> index into `labels`.
    grouping: Vec<usize>,
    labels: Vec<String>,
}

impl DomainDimension {
    pub fn new(name: impl Into<String>, rule: BinRule, labels: Option<Vec<String>>) -> Result<Self> {
        let name = name.into();
        rule.validate()?;
        let count = rule.raw_count();
        let labels = match labels {
            Some(labels) => labels,
            None => default_labels(&rule),
        };
        if labels.len() != count {
            return Err(Error::invalid(format!(
                "dimension `{name}` has {count} bins but {} labels",
                labels.len()
            )));
        }
        check_unique(&labels, &format!("labels of `{name}`"))?;
        Ok(DomainDimension {
            name,
            rule,
            grouping: (0..count).collect(),
            raw_labels: labels.clone(),
            labels,
        })
    }

    pub fn equidistant(name: &str, field: MetadataField, lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(name, BinRule::EquidistantBins { field, lo, hi, n }, None)
    }

    /// Binary bird-view split on gimbal pitch: `bird` iff pitch >= threshold.
    pub fn bird_view(threshold_deg: f64) -> Result<Self> {
        Self::new(
            "angle",
            BinRule::Threshold {
                field: MetadataField::GimbalPitch,
                thresholds: vec![threshold_deg],
            },
            Some(vec!["acute".into(), "bird".into()]),
        )
    }

    /// Day iff the local hour is in `[7, 19)`.
    pub fn day_night() -> Result<Self> {
        Self::new(
            "time",
            BinRule::DayNight {
                day_start: 7.0,
                day_end: 19.0,
                utc_offset_hours: 0.0,
            },
            None,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn rule(&self) -> &BinRule {
        &self.rule
    }

    /// Label of a scalar value. Only defined for scalar rules.
    pub fn bin_value(&self, value: f64) -> Result<&str> {
        if let BinRule::DayNight { .. } = self.rule {
            return Err(Error::invalid(format!(
                "dimension `{}` bins capture time, not a scalar",
                self.name
            )));
        }
        let raw = self.rule.bin_scalar(value)?;
        Ok(&self.labels[self.grouping[raw]])
    }

    /// Raw bins merged into label `label`.
    pub(crate) fn raw_bins_of(&self, label: usize) -> Vec<usize> {
        (0..self.grouping.len()).filter(|&r| self.grouping[r] == label).collect()
    }

    /// Label index for a metadata record.
    pub fn bin_index(&self, meta: &MetadataRecord) -> Result<usize> {
        Ok(self.grouping[self.rule.bin_record(meta)?])
    }

    /// Merges labels according to `groups` (old label -> new label). New labels
    /// are ordered by first appearance when walking the old labels in order.
    pub fn fuse_labels(&self, groups: &BTreeMap<String, String>) -> Result<Self> {
        for old in groups.keys() {
            if !self.labels.contains(old) {
                return Err(Error::invalid(format!(
                    "fusion of `{}` names unknown label `{old}`",
                    self.name
                )));
            }
        }
        let mut labels: Vec<String> = Vec::new();
        let mut remap = Vec::with_capacity(self.labels.len());
        for old in &self.labels {
            let new = groups.get(old).ok_or_else(|| {
                Error::invalid(format!("fusion of `{}` does not cover label `{old}`", self.name))
            })?;
            let idx = match labels.iter().position(|l| l == new) {
                Some(i) => i,
                None => {
                    labels.push(new.clone());
                    labels.len() - 1
                }
            };
            remap.push(idx);
        }
        Ok(DomainDimension {
            name: self.name.clone(),
            rule: self.rule.clone(),
            raw_labels: self.raw_labels.clone(),
            grouping: self.grouping.iter().map(|&g| remap[g]).collect(),
            labels,
        })
    }
}

fn default_labels(rule: &BinRule) -> Vec<String> {
    match rule {
        BinRule::DayNight { .. } => vec!["day".into(), "night".into()],
        other => (0..other.raw_count()).map(|i| format!("bin{i}")).collect(),
    }
}

fn check_unique(items: &[String], what: &str) -> Result<()> {
    for (i, a) in items.iter().enumerate() {
        if items[..i].contains(a) {
            return Err(Error::invalid(format!("duplicate `{a}` in {what}")));
        }
    }
    Ok(())
}

/// The discrete domain of one image: one label per schema dimension.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainKey(pub Vec<String>);

impl DomainKey {
    pub fn labels(&self) -> &[String] {
        &self.0
    }
}

impl fmt::Display for DomainKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("+"))
    }
}

/// Ordered set of domain dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSchema {
    dimensions: Vec<DomainDimension>,
}

impl DomainSchema {
    pub fn new(dimensions: Vec<DomainDimension>) -> Result<Self> {
        if dimensions.is_empty() {
            return Err(Error::invalid("schema has no dimensions"));
        }
        let names: Vec<String> = dimensions.iter().map(|d| d.name.clone()).collect();
        check_unique(&names, "dimension names")?;
        Ok(DomainSchema { dimensions })
    }

    /// `n` equidistant altitude bins on `[lo, hi]`.
    pub fn altitude(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(vec![DomainDimension::equidistant("altitude", MetadataField::Altitude, lo, hi, n)?])
    }

    pub fn dimensions(&self) -> &[DomainDimension] {
        &self.dimensions
    }

    /// Dimension names joined by `-`, e.g. `altitude-angle-time`.
    pub fn name(&self) -> String {
        self.dimensions.iter().map(|d| d.name.as_str()).collect::<Vec<_>>().join("-")
    }

    /// Size of the key space.
    pub fn key_count(&self) -> usize {
        self.dimensions.iter().map(|d| d.labels.len()).product()
    }

    pub fn enumerate_keys(&self) -> Vec<DomainKey> {
        (0..self.key_count()).map(|i| self.key_at(i)).collect()
    }

    pub fn key_at(&self, mut index: usize) -> DomainKey {
        let mut labels = vec![String::new(); self.dimensions.len()];
        for (slot, dim) in labels.iter_mut().zip(&self.dimensions).rev() {
            let n = dim.labels.len();
            *slot = dim.labels[index % n].clone();
            index /= n;
        }
        DomainKey(labels)
    }

    pub fn index_of(&self, key: &DomainKey) -> Result<usize> {
        if key.0.len() != self.dimensions.len() {
            return Err(Error::invalid(format!(
                "key {key} has arity {} but schema has {} dimensions",
                key.0.len(),
                self.dimensions.len()
            )));
        }
        let mut index = 0;
        for (label, dim) in key.0.iter().zip(&self.dimensions) {
            let pos = dim.labels.iter().position(|l| l == label).ok_or_else(|| {
                Error::invalid(format!("`{label}` is not a label of dimension `{}`", dim.name))
            })?;
            index = index * dim.labels.len() + pos;
        }
        Ok(index)
    }

    /// Index of the key `meta` bins to.
    pub fn bin_index(&self, meta: &MetadataRecord) -> Result<usize> {
        meta.validate()?;
        let mut index = 0;
        for dim in &self.dimensions {
            index = index * dim.labels.len() + dim.bin_index(meta)?;
        }
        Ok(index)
    }

    pub fn bin_metadata(&self, meta: &MetadataRecord) -> Result<DomainKey> {
        self.bin_index(meta).map(|i| self.key_at(i))
    }

    /// Replaces the named dimension by its fusion under `groups`.
    pub fn fuse(&self, dimension: &str, groups: &BTreeMap<String, String>) -> Result<Self> {
        let mut dimensions = self.dimensions.clone();
        let dim = dimensions
            .iter_mut()
            .find(|d| d.name == dimension)
            .ok_or_else(|| Error::invalid(format!("fusion names unknown dimension `{dimension}`")))?;
        *dim = dim.fuse_labels(groups)?;
        Ok(DomainSchema { dimensions })
    }

    pub fn from_config(config: &SchemaConfig) -> Result<Self> {
        let dims = config
            .dimension
            .iter()
            .map(DimensionConfig::build)
            .collect::<Result<Vec<_>>>()?;
        let mut schema = DomainSchema::new(dims)?;
        for (name, groups) in &config.fusions {
            schema = schema.fuse(name, groups)?;
        }
        Ok(schema)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: SchemaConfig =
            toml::from_str(text).map_err(|e| Error::parse("schema config", e.to_string()))?;
        Self::from_config(&config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }
}

/// On-disk schema description.
///
/// ```toml
/// [[dimension]]
/// name = "altitude"
/// kind = "equidistant_bins"
/// field = "altitude"
/// lo = 5.0
/// hi = 100.0
/// n = 3
///
/// [[dimension]]
/// name = "angle"
/// kind = "categorical"
/// labels = ["acute", "bird"]
/// predicate = { field = "gimbal_pitch", threshold = 60.0 }
///
/// [fusions.angle]
/// front = "A"
/// ```
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    #[serde(default)]
    pub dimension: Vec<DimensionConfig>,
    #[serde(default)]
    pub fusions: BTreeMap<String, BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionConfig {
    pub name: String,
    pub kind: DimensionKind,
    #[serde(default)]
    pub field: Option<MetadataField>,
    #[serde(default)]
    pub lo: Option<f64>,
    #[serde(default)]
    pub hi: Option<f64>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub edges: Option<Vec<f64>>,
    #[serde(default)]
    pub predicate: Option<PredicateConfig>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionKind {
    EquidistantBins,
    ExplicitEdges,
    Categorical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredicateConfig {
    pub field: MetadataField,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub thresholds: Option<Vec<f64>>,
    /// `[start, end)` hours of the first label (day).
    #[serde(default)]
    pub hours: Option<[f64; 2]>,
    #[serde(default)]
    pub utc_offset_hours: Option<f64>,
}

impl DimensionConfig {
    fn build(&self) -> Result<DomainDimension> {
        let missing = |what: &str| Error::invalid(format!("dimension `{}` is missing `{what}`", self.name));
        let rule = match self.kind {
            DimensionKind::EquidistantBins => BinRule::EquidistantBins {
                field: self.field.ok_or_else(|| missing("field"))?,
                lo: self.lo.ok_or_else(|| missing("lo"))?,
                hi: self.hi.ok_or_else(|| missing("hi"))?,
                n: self.n.ok_or_else(|| missing("n"))?,
            },
            DimensionKind::ExplicitEdges => BinRule::ExplicitEdges {
                field: self.field.ok_or_else(|| missing("field"))?,
                edges: self.edges.clone().ok_or_else(|| missing("edges"))?,
            },
            DimensionKind::Categorical => {
                let p = self.predicate.as_ref().ok_or_else(|| missing("predicate"))?;
                match (p.field, p.hours, p.threshold, &p.thresholds) {
                    (MetadataField::CaptureTime, Some([start, end]), None, None) => BinRule::DayNight {
                        day_start: start,
                        day_end: end,
                        utc_offset_hours: p.utc_offset_hours.unwrap_or(0.0),
                    },
                    (field, None, Some(t), None) => BinRule::Threshold {
                        field,
                        thresholds: vec![t],
                    },
                    (field, None, None, Some(ts)) => BinRule::Threshold {
                        field,
                        thresholds: ts.clone(),
                    },
                    _ => {
                        return Err(Error::invalid(format!(
                            "dimension `{}`: predicate needs exactly one of `threshold`, `thresholds`, \
                             or `hours` (capture_time only)",
                            self.name
                        )))
                    }
                }
            }
        };
        DomainDimension::new(self.name.clone(), rule, self.labels.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn alt3() -> DomainDimension {
        DomainDimension::equidistant("altitude", MetadataField::Altitude, 0.0, 100.0, 3).unwrap()
    }

    fn alt_angle() -> DomainSchema {
        DomainSchema::new(vec![alt3(), DomainDimension::bird_view(60.0).unwrap()]).unwrap()
    }

    #[test]
    fn equidistant_bins() {
        let d = alt3();
        assert_eq!(d.bin_value(10.0).unwrap(), "bin0");
        assert_eq!(d.bin_value(100.0).unwrap(), "bin2");
        assert_eq!(d.bin_value(-5.0).unwrap(), "bin0");
        assert_eq!(d.bin_value(250.0).unwrap(), "bin2");
        let six = DomainDimension::equidistant("altitude", MetadataField::Altitude, 0.0, 100.0, 6).unwrap();
        assert_eq!(six.bin_value(50.0).unwrap(), "bin3");
        assert_eq!(six.bin_value(49.999).unwrap(), "bin2");
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(matches!(alt3().bin_value(f64::NAN), Err(Error::InvalidInput(_))));
        assert!(matches!(alt3().bin_value(f64::INFINITY), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn explicit_edges_need_matching_labels() {
        let rule = BinRule::ExplicitEdges {
            field: MetadataField::Altitude,
            edges: vec![20.0, 50.0],
        };
        let d = DomainDimension::new("alt", rule.clone(), Some(vec!["L".into(), "M".into(), "H".into()])).unwrap();
        assert_eq!(d.bin_value(20.0).unwrap(), "M");
        assert_eq!(d.bin_value(19.9).unwrap(), "L");
        assert!(DomainDimension::new("alt", rule, Some(vec!["L".into(), "M".into()])).is_err());
        let bad = BinRule::ExplicitEdges {
            field: MetadataField::Altitude,
            edges: vec![50.0, 20.0],
        };
        assert!(DomainDimension::new("alt", bad, None).is_err());
    }

    #[test]
    fn invalid_equidistant() {
        assert!(DomainDimension::equidistant("a", MetadataField::Altitude, 10.0, 10.0, 3).is_err());
        assert!(DomainDimension::equidistant("a", MetadataField::Altitude, 0.0, 10.0, 1).is_err());
    }

    #[test]
    fn bin_metadata_examples() {
        let schema = alt_angle();
        let key = schema.bin_metadata(&MetadataRecord::new(10.0, 10.0)).unwrap();
        assert_eq!(key, DomainKey(vec!["bin0".into(), "acute".into()]));
        let key = schema.bin_metadata(&MetadataRecord::new(100.0, 90.0)).unwrap();
        assert_eq!(key, DomainKey(vec!["bin2".into(), "bird".into()]));

        let partial = MetadataRecord {
            altitude_m: Some(50.0),
            ..Default::default()
        };
        match schema.bin_metadata(&partial) {
            Err(Error::SchemaMismatch { field }) => assert_eq!(field, "gimbal_pitch_deg"),
            other => panic!("expected schema mismatch, got {other:?}"),
        }
    }

    #[test]
    fn day_night_from_clock_and_override() {
        let schema = DomainSchema::new(vec![DomainDimension::day_night().unwrap()]).unwrap();
        let noon = MetadataRecord::default().with_timestamp(12.0 * 3600.0);
        let late = MetadataRecord::default().with_timestamp(86400.0 * 3.0 + 22.0 * 3600.0);
        let seven = MetadataRecord::default().with_timestamp(7.0 * 3600.0);
        assert_eq!(schema.bin_metadata(&noon).unwrap().to_string(), "day");
        assert_eq!(schema.bin_metadata(&late).unwrap().to_string(), "night");
        assert_eq!(schema.bin_metadata(&seven).unwrap().to_string(), "day");
        let forced = noon.clone().with_night(true);
        assert_eq!(schema.bin_metadata(&forced).unwrap().to_string(), "night");
        assert!(matches!(
            schema.bin_metadata(&MetadataRecord::default()),
            Err(Error::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn enumerate_key_spaces() {
        let time = DomainSchema::new(vec![DomainDimension::day_night().unwrap()]).unwrap();
        let keys: Vec<String> = time.enumerate_keys().iter().map(|k| k.to_string()).collect();
        assert_eq!(keys, ["day", "night"]);

        let labels = |v: &[&str]| Some(v.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        let alt = DomainDimension::new(
            "altitude",
            BinRule::EquidistantBins {
                field: MetadataField::Altitude,
                lo: 0.0,
                hi: 100.0,
                n: 3,
            },
            labels(&["L", "M", "H"]),
        )
        .unwrap();
        let angle = DomainDimension::new(
            "angle",
            BinRule::Threshold {
                field: MetadataField::GimbalPitch,
                thresholds: vec![60.0],
            },
            labels(&["A", "B"]),
        )
        .unwrap();
        let day = DomainDimension::new(
            "time",
            BinRule::DayNight {
                day_start: 7.0,
                day_end: 19.0,
                utc_offset_hours: 0.0,
            },
            labels(&["D", "N"]),
        )
        .unwrap();
        let two = DomainSchema::new(vec![alt.clone(), angle.clone()]).unwrap();
        assert_eq!(two.enumerate_keys().len(), 6);
        let three = DomainSchema::new(vec![alt, angle, day]).unwrap();
        let keys = three.enumerate_keys();
        assert_eq!(keys.len(), 12);
        assert_eq!(keys[0].to_string(), "L+A+D");
        assert_eq!(keys[1].to_string(), "L+A+N");
        assert_eq!(keys[11].to_string(), "H+B+N");
        assert_eq!(three.name(), "altitude-angle-time");
        for (i, k) in keys.iter().enumerate() {
            assert_eq!(three.index_of(k).unwrap(), i);
        }
    }

    #[test]
    fn duplicate_dimension_names_rejected() {
        assert!(DomainSchema::new(vec![alt3(), alt3()]).is_err());
    }

    fn three_way_angle() -> DomainDimension {
        DomainDimension::new(
            "angle",
            BinRule::Threshold {
                field: MetadataField::GimbalPitch,
                thresholds: vec![30.0, 60.0],
            },
            Some(vec!["front".into(), "side".into(), "bird".into()]),
        )
        .unwrap()
    }

    fn groups(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn fusion_examples() {
        let angle = three_way_angle();
        let fused = angle
            .fuse_labels(&groups(&[("front", "A"), ("side", "A"), ("bird", "B")]))
            .unwrap();
        assert_eq!(fused.labels(), ["A", "B"]);
        assert_eq!(fused.bin_value(10.0).unwrap(), "A");
        assert_eq!(fused.bin_value(45.0).unwrap(), "A");
        assert_eq!(fused.bin_value(75.0).unwrap(), "B");

        let same = angle
            .fuse_labels(&groups(&[("front", "front"), ("side", "side"), ("bird", "bird")]))
            .unwrap();
        assert_eq!(same, angle);

        let one = angle
            .fuse_labels(&groups(&[("front", "X"), ("side", "X"), ("bird", "X")]))
            .unwrap();
        assert_eq!(one.labels(), ["X"]);
        assert_eq!(DomainSchema::new(vec![one]).unwrap().key_count(), 1);

        assert!(angle.fuse_labels(&groups(&[("front", "A"), ("side", "A")])).is_err());
    }

    #[test]
    fn schema_config_round_trip() {
        let text = r#"
[[dimension]]
name = "altitude"
kind = "equidistant_bins"
field = "altitude"
lo = 5.0
hi = 100.0
n = 3
labels = ["L", "M", "H"]

[[dimension]]
name = "angle"
kind = "categorical"
labels = ["front", "side", "bird"]
predicate = { field = "gimbal_pitch", thresholds = [30.0, 60.0] }

[[dimension]]
name = "time"
kind = "categorical"
labels = ["D", "N"]
predicate = { field = "capture_time", hours = [7, 19] }

[fusions.angle]
front = "A"
side = "A"
bird = "B"
"#;
        let schema = DomainSchema::from_toml_str(text).unwrap();
        assert_eq!(schema.key_count(), 12);
        let meta = MetadataRecord::new(90.0, 80.0).with_timestamp(23.0 * 3600.0);
        assert_eq!(schema.bin_metadata(&meta).unwrap().to_string(), "H+B+N");

        let json = serde_json::to_string(&schema).unwrap();
        let back: DomainSchema = serde_json::from_str(&json).unwrap();
        assert_eq!(back, schema);
    }

    #[test]
    fn config_errors() {
        let missing_n = r#"
[[dimension]]
name = "altitude"
kind = "equidistant_bins"
field = "altitude"
lo = 5.0
hi = 100.0
"#;
        assert!(matches!(DomainSchema::from_toml_str(missing_n), Err(Error::InvalidInput(_))));
        assert!(matches!(DomainSchema::from_toml_str("dimension = 3"), Err(Error::Parse { .. })));
    }

    proptest! {
        #[test]
        fn binning_is_total(alt in 0.0f64..500.0, pitch in 0.0f64..=90.0, ts in 0.0f64..1e10) {
            let schema = DomainSchema::new(vec![
                alt3(),
                DomainDimension::bird_view(60.0).unwrap(),
                DomainDimension::day_night().unwrap(),
            ]).unwrap();
            let meta = MetadataRecord::new(alt, pitch).with_timestamp(ts);
            let key = schema.bin_metadata(&meta).unwrap();
            prop_assert!(schema.enumerate_keys().contains(&key));
            prop_assert_eq!(schema.bin_metadata(&meta).unwrap(), key);
        }

        #[test]
        fn binning_is_monotone(a in -50.0f64..150.0, b in -50.0f64..150.0, n in 2usize..9) {
            let d = DomainDimension::equidistant("x", MetadataField::Altitude, 0.0, 100.0, n).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let idx = |v: f64| d.labels().iter().position(|l| l == d.bin_value(v).unwrap()).unwrap();
            prop_assert!(idx(lo) <= idx(hi));
        }

        #[test]
        fn fusion_is_coherent(pitch in 0.0f64..=90.0, mapping in proptest::collection::vec(0usize..3, 3)) {
            let angle = three_way_angle();
            let names = ["p", "q", "r"];
            let g: BTreeMap<String, String> = angle.labels().iter().cloned()
                .zip(mapping.iter().map(|&i| names[i].to_string()))
                .collect();
            let fused = angle.fuse_labels(&g).unwrap();
            let before = angle.bin_value(pitch).unwrap().to_string();
            prop_assert_eq!(fused.bin_value(pitch).unwrap(), g[&before].as_str());
        }
    }
}

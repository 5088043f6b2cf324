//! Detection evaluation: greedy IoU matching, all-point interpolated AP,
//! per-domain stratification and unweighted domain averages.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::dataset::{content_digest, read_json, write_json, Dataset};
use crate::domain::DomainSchema;
use crate::error::{Error, Result};
use crate::expert::Detector;
use crate::training::domain_indices;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Detections at or below this score are dropped before matching.
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Stratify by domain. Without it reports carry no domain averages.
    pub per_domain: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: vec![0.5],
            score_threshold: 0.01,
            nms_iou: 0.5,
            per_domain: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::invalid("no IoU thresholds"));
        }
        for &t in &self.iou_thresholds {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::invalid(format!("IoU threshold {t} outside (0, 1]")));
            }
        }
        for (name, v) in [("score_threshold", self.score_threshold), ("nms_iou", self.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Metric name for an IoU threshold, e.g. `AP50`.
pub fn metric_name(iou_threshold: f64) -> String {
    format!("AP{}", (iou_threshold * 100.0).round() as i64)
}

/// One detection in a dump file. Mirrors the annotation index: `bbox` is
/// `[x, y, w, h]` in pixels and `category_id` is a dataset category id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub image_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
    pub category_id: u64,
}

/// Runs `detector` over every image, in dataset order.
pub fn detect_dataset(
    detector: &dyn Detector,
    dataset: &Dataset,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<DumpEntry>> {
    let per_image = dataset
        .images
        .par_iter()
        .map(|img| {
            let dets = detector.detect_image(img, score_threshold, nms_iou)?;
            dets.into_iter()
                .map(|d| {
                    let category_id = dataset
                        .categories
                        .get(d.class_id)
                        .map(|c| c.id)
                        .ok_or_else(|| Error::invalid(format!("detector emitted class {} not in dataset", d.class_id)))?;
                    Ok(DumpEntry {
                        image_id: img.id,
                        bbox: d.bbox.to_array(),
                        score: d.score,
                        category_id,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn save_dump(dump: &[DumpEntry], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_json(path, dump)
}

pub fn load_dump(path: &Path) -> Result<Vec<DumpEntry>> {
    read_json(path)
}

/// Matching outcome for one image and class.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub true_positive: Vec<bool>,
    /// Per ground truth.
    pub matched: Vec<bool>,
}

/// Greedy matching. Detections are visited by descending score (equal
/// scores in input order); each takes the unmatched ground truth with the
/// highest IoU and is a true positive when that IoU reaches `iou_threshold`.
pub fn match_detections(detections: &[(BBox, f64)], ground_truth: &[BBox], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].1.total_cmp(&detections[a].1));
    let mut result = MatchResult {
        true_positive: vec![false; detections.len()],
        matched: vec![false; ground_truth.len()],
    };
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if result.matched[g] {
                continue;
            }
            let iou = detections[i].0.iou(gt);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            if iou >= iou_threshold {
                result.matched[g] = true;
                result.true_positive[i] = true;
            }
        }
    }
    result
}

/// Ranking used for precision-recall: descending score, false positives
/// before true positives on equal scores.
fn ranked(scored: &[(f64, bool)]) -> Vec<(f64, bool)> {
    let mut v = scored.to_vec();
    v.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    v
}

/// Precision and recall after each ranked detection.
fn pr_points(scored: &[(f64, bool)], total_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    ranked(scored)
        .iter()
        .enumerate()
        .map(|(k, &(_, is_tp))| {
            tp += usize::from(is_tp);
            (tp as f64 / total_gt as f64, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

/// All-point interpolated AP: area under the precision envelope, where the
/// envelope at recall `r` is the best precision at any recall `>= r`.
///
/// `None` when there is nothing to score (no ground truth and no
/// detections); zero when there is no ground truth but some detections.
pub fn average_precision(scored: &[(f64, bool)], total_gt: usize) -> Option<f64> {
    if total_gt == 0 {
        return if scored.is_empty() { None } else { Some(0.0) };
    }
    let points = pr_points(scored, total_gt);
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(recall, _), &p) in points.iter().zip(&envelope) {
        ap += (recall - prev_recall) * p;
        prev_recall = recall;
    }
    Some(ap)
}

/// Envelope precision sampled at recall 0, 0.01, ..., 1 (zero past the
/// highest recall reached).
fn sampled_curve(scored: &[(f64, bool)], total_gt: usize) -> Vec<[f64; 2]> {
    if total_gt == 0 {
        return Vec::new();
    }
    let points = pr_points(scored, total_gt);
    (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let p = points
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            [r, p]
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub images: usize,
    pub objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou_threshold: f64,
    /// Mean over classes with at least one ground truth.
    pub overall: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    /// Absent when the report is not stratified.
    pub per_domain: Option<BTreeMap<String, Option<f64>>>,
    /// Unweighted mean over domains holding at least one object.
    pub average: Option<f64>,
    /// Full-set precision envelope per class, sampled on a 101-point recall grid.
    pub pr_curves: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset_digest: String,
    pub schema: Option<String>,
    /// Domain keys in schema order; empty when not stratified.
    pub domains: Vec<String>,
    pub classes: Vec<String>,
    pub counts: Counts,
    pub domain_counts: BTreeMap<String, Counts>,
    /// Domains without objects; they are left out of the average.
    pub excluded_domains: Vec<String>,
    pub metrics: BTreeMap<String, MetricReport>,
    /// Digest of the manifest that produced the report, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_digest: Option<String>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Result<&MetricReport> {
        self.metrics
            .get(name)
            .ok_or_else(|| Error::invalid(format!("report for {} has no metric {name}", self.model)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Aligned table: one row per metric, columns are domains, overall, average.
    pub fn to_text(&self) -> String {
        let mut header = vec!["metric".to_string()];
        header.extend(self.domains.iter().cloned());
        header.push("overall".into());
        if !self.domains.is_empty() {
            header.push("average".into());
        }
        let mut rows = vec![header];
        let mut counts = vec!["images".to_string()];
        let mut objects = vec!["objects".to_string()];
        for d in &self.domains {
            let c = self.domain_counts.get(d).copied().unwrap_or_default();
            counts.push(c.images.to_string());
            objects.push(c.objects.to_string());
        }
        counts.push(self.counts.images.to_string());
        objects.push(self.counts.objects.to_string());
        for (name, m) in &self.metrics {
            let mut row = vec![name.clone()];
            if let Some(per) = &m.per_domain {
                row.extend(self.domains.iter().map(|d| pct(per.get(d).copied().flatten())));
            }
            row.push(pct(m.overall));
            if !self.domains.is_empty() {
                row.push(pct(m.average));
            }
            rows.push(row);
        }
        rows.push(counts);
        rows.push(objects);
        let mut out = format!("model {}\n", self.model);
        out += &align(&rows);
        if !self.excluded_domains.is_empty() {
            let _ = writeln!(out, "no objects, left out of the average: {}", self.excluded_domains.join(", "));
        }
        out
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out += cells.join("  ").trim_end();
        out.push('\n');
    }
    out
}

/// Scored match flags and ground-truth count of one image for one class.
#[derive(Default, Clone)]
struct ImageClassMatch {
    scored: Vec<(f64, bool)>,
    gt: usize,
}

fn class_ap(per_image: &[Vec<ImageClassMatch>], images: &[usize], class: usize) -> (Option<f64>, usize, Vec<(f64, bool)>) {
    let mut scored = Vec::new();
    let mut gt = 0;
    for &i in images {
        let m = &per_image[i][class];
        scored.extend_from_slice(&m.scored);
        gt += m.gt;
    }
    (average_precision(&scored, gt), gt, scored)
}

/// Mean AP over the classes that have ground truth in `images`.
fn subset_map(per_image: &[Vec<ImageClassMatch>], images: &[usize], classes: usize) -> Option<f64> {
    mean((0..classes).filter_map(|c| {
        let (ap, gt, _) = class_ap(per_image, images, c);
        if gt > 0 {
            ap
        } else {
            None
        }
    }))
}

/// Evaluates a detection dump against `dataset`. With a schema and
/// `per_domain`, every domain is also evaluated as its own test set.
pub fn evaluate_dump(
    model: &str,
    dump: &[DumpEntry],
    dataset: &Dataset,
    schema: Option<&DomainSchema>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let classes = dataset.class_count();
    let position: HashMap<u64, usize> = dataset.images.iter().enumerate().map(|(i, img)| (img.id, i)).collect();
    let mut dets: Vec<Vec<Vec<(BBox, f64)>>> = vec![vec![Vec::new(); classes]; dataset.len()];
    for entry in dump {
        let &i = position
            .get(&entry.image_id)
            .ok_or_else(|| Error::invalid(format!("detection for unknown image {}", entry.image_id)))?;
        let class = dataset
            .class_of_category(entry.category_id)
            .ok_or_else(|| Error::invalid(format!("detection with unknown category {}", entry.category_id)))?;
        let bbox = BBox::from_array(entry.bbox);
        if !bbox.is_valid() || !(0.0..=1.0).contains(&entry.score) {
            return Err(Error::invalid(format!("malformed detection {entry:?}")));
        }
        if entry.score > config.score_threshold {
            dets[i][class].push((bbox, entry.score));
        }
    }

    let stratify = config.per_domain && schema.is_some();
    let (domains, groups) = match schema.filter(|_| stratify) {
        Some(schema) => {
            let indices = domain_indices(dataset, schema)?;
            let mut groups = vec![Vec::new(); schema.key_count()];
            for (i, d) in indices.into_iter().enumerate() {
                groups[d].push(i);
            }
            let names: Vec<String> = schema.enumerate_keys().iter().map(|k| k.to_string()).collect();
            (names, groups)
        }
        None => (Vec::new(), Vec::new()),
    };
    let domain_counts: BTreeMap<String, Counts> = domains
        .iter()
        .zip(&groups)
        .map(|(name, g)| {
            let objects = g.iter().map(|&i| dataset.images[i].objects.len()).sum();
            (name.clone(), Counts { images: g.len(), objects })
        })
        .collect();
    let excluded_domains: Vec<String> =
        domains.iter().filter(|d| domain_counts[*d].objects == 0).cloned().collect();
    let all: Vec<usize> = (0..dataset.len()).collect();

    let mut metrics = BTreeMap::new();
    for &t in &config.iou_thresholds {
        let per_image: Vec<Vec<ImageClassMatch>> = dataset
            .images
            .par_iter()
            .zip(&dets)
            .map(|(img, img_dets)| {
                (0..classes)
                    .map(|c| {
                        let gts: Vec<BBox> = img.objects.iter().filter(|o| o.class_id == c).map(|o| o.bbox).collect();
                        let m = match_detections(&img_dets[c], &gts, t);
                        ImageClassMatch {
                            scored: img_dets[c].iter().zip(&m.true_positive).map(|(d, &tp)| (d.1, tp)).collect(),
                            gt: gts.len(),
                        }
                    })
                    .collect()
            })
            .collect();
        let mut per_class = Vec::with_capacity(classes);
        let mut pr_curves = Vec::with_capacity(classes);
        for c in 0..classes {
            let (ap, gt, scored) = class_ap(&per_image, &all, c);
            per_class.push(ap);
            pr_curves.push(sampled_curve(&scored, gt));
        }
        let overall = subset_map(&per_image, &all, classes);
        let (per_domain, average) = if stratify {
            let values: BTreeMap<String, Option<f64>> = domains
                .iter()
                .zip(&groups)
                .map(|(name, g)| (name.clone(), subset_map(&per_image, g, classes)))
                .collect();
            // Domains without objects have no AP and drop out here.
            let average = mean(domains.iter().filter_map(|d| values[d]));
            (Some(values), average)
        } else {
            (None, None)
        };
        metrics.insert(
            metric_name(t),
            MetricReport {
                iou_threshold: t,
                overall,
                per_class,
                per_domain,
                average,
                pr_curves,
            },
        );
    }

    Ok(EvalReport {
        model: model.to_string(),
        dataset_digest: content_digest(dataset),
        schema: schema.filter(|_| stratify).map(DomainSchema::name),
        domains,
        classes: dataset.categories.iter().map(|c| c.name.clone()).collect(),
        counts: Counts {
            images: dataset.len(),
            objects: dataset.object_count(),
        },
        domain_counts,
        excluded_domains,
        metrics,
        manifest_digest: None,
    })
}

/// Runs `detector` on `dataset` and evaluates the result.
pub fn evaluate(
    model: &str,
    detector: &dyn Detector,
    dataset: &Dataset,
    schema: Option<&DomainSchema>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let dump = detect_dataset(detector, dataset, config.score_threshold, config.nms_iou)?;
    evaluate_dump(model, &dump, dataset, schema, config)
}

/// Writes `<stem>.json` and `<stem>.txt`, plus precision-recall and
/// per-domain bar charts as SVG when `plots` is set. Returns the paths written.
pub fn emit_report(report: &EvalReport, dir: &Path, stem: &str, plots: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(format!("{stem}.json"));
    report.save(&json)?;
    let text = dir.join(format!("{stem}.txt"));
    fs::write(&text, report.to_text()).map_err(|e| Error::io(&text, e))?;
    let mut written = vec![json, text];
    if plots {
        for (name, m) in &report.metrics {
            let series: Vec<(String, Vec<(f64, f64)>)> = m
                .pr_curves
                .iter()
                .zip(&report.classes)
                .map(|(c, class)| (class.clone(), c.iter().map(|p| (p[0], p[1])).collect()))
                .collect();
            let path = dir.join(format!("{stem}_{name}_pr.svg"));
            let svg = line_chart(&format!("{} {name} precision-recall", report.model), "recall", "precision", &series);
            fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            written.push(path);
            if let Some(per) = &m.per_domain {
                let bars: Vec<(String, f64)> =
                    report.domains.iter().map(|d| (d.clone(), per[d].unwrap_or(0.0))).collect();
                let path = dir.join(format!("{stem}_{name}_domains.svg"));
                fs::write(&path, bar_chart(&format!("{} {name} per domain", report.model), &bars))
                    .map_err(|e| Error::io(&path, e))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    /// One value per column.
    pub values: Vec<Option<f64>>,
    /// Value minus the baseline row's value, per column.
    pub deltas: Vec<Option<f64>>,
    /// Total gradient steps of the run, when known.
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub metric: String,
    pub baseline: String,
    pub dataset_digest: String,
    /// Domain keys, then `overall` and `average`.
    /// Set when every report came from the same manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_digest: Option<String>,
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// Side-by-side table of reports on the same test set, with deltas against
/// the report named `baseline`.
pub fn compare_reports(reports: &[EvalReport], baseline: &str, metric: &str) -> Result<ComparisonTable> {
    let first = reports.first().ok_or_else(|| Error::invalid("nothing to compare"))?;
    for r in reports {
        if r.dataset_digest != first.dataset_digest {
            return Err(Error::invalid(format!(
                "reports {} and {} were evaluated on different test sets",
                first.model, r.model
            )));
        }
        if r.domains != first.domains {
            return Err(Error::invalid(format!(
                "reports {} and {} use different domains",
                first.model, r.model
            )));
        }
    }
    let mut names: Vec<&str> = reports.iter().map(|r| r.model.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("duplicate report name {}", w[0])));
    }
    let row_values = |r: &EvalReport| -> Result<Vec<Option<f64>>> {
        let m = r.metric(metric)?;
        let mut v: Vec<Option<f64>> = match &m.per_domain {
            Some(per) => r.domains.iter().map(|d| per.get(d).copied().flatten()).collect(),
            None => vec![None; r.domains.len()],
        };
        v.push(m.overall);
        v.push(m.average);
        Ok(v)
    };
    let base = reports
        .iter()
        .find(|r| r.model == baseline)
        .ok_or_else(|| Error::invalid(format!("baseline {baseline} not among the reports")))?;
    let base_values = row_values(base)?;
    let rows = reports
        .iter()
        .map(|r| {
            let values = row_values(r)?;
            let deltas = values
                .iter()
                .zip(&base_values)
                .map(|(v, b)| Some((*v)? - (*b)?))
                .collect();
            Ok(ComparisonRow {
                name: r.model.clone(),
                values,
                deltas,
                steps: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut columns = first.domains.clone();
    columns.push("overall".into());
    columns.push("average".into());
    Ok(ComparisonTable {
        metric: metric.to_string(),
        baseline: baseline.to_string(),
        dataset_digest: first.dataset_digest.clone(),
        manifest_digest: first
            .manifest_digest
            .clone()
            .filter(|d| reports.iter().all(|r| r.manifest_digest.as_ref() == Some(d))),
        columns,
        rows,
    })
}

impl ComparisonTable {
    pub fn row(&self, name: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_text(&self) -> String {
        let with_steps = self.rows.iter().any(|r| r.steps.is_some());
        let mut header = vec!["model".to_string()];
        header.extend(self.columns.iter().cloned());
        header.extend(self.columns[self.columns.len() - 2..].iter().map(|c| format!("d_{c}")));
        if with_steps {
            header.push("steps".into());
        }
        let mut rows = vec![header];
        for r in &self.rows {
            let mut row = vec![r.name.clone()];
            row.extend(r.values.iter().map(|v| pct(*v)));
            row.extend(r.deltas[r.deltas.len() - 2..].iter().map(|d| {
                d.map_or_else(|| "-".to_string(), |d| format!("{:+.1}", 100.0 * d))
            }));
            if with_steps {
                row.push(r.steps.map_or_else(|| "-".into(), |s| s.to_string()));
            }
            rows.push(row);
        }
        format!("{} vs {}\n{}", self.metric, self.baseline, align(&rows))
    }

    /// Overall and average per row as a line chart, in row order.
    pub fn to_svg(&self) -> String {
        let idx_overall = self.columns.len() - 2;
        let series: Vec<(String, Vec<(f64, f64)>)> = [("overall", idx_overall), ("average", idx_overall + 1)]
            .iter()
            .map(|&(label, c)| {
                let pts = self
                    .rows
                    .iter()
                    .enumerate()
                    .filter_map(|(i, r)| r.values[c].map(|v| (i as f64, v)))
                    .collect();
                (label.to_string(), pts)
            })
            .collect();
        let labels: Vec<String> = self.rows.iter().map(|r| r.name.clone()).collect();
        let mut svg = line_chart(&format!("{} by model", self.metric), "model", &self.metric, &series);
        // Row names under the x axis.
        let n = labels.len().max(2) - 1;
        let mut names = String::new();
        for (i, l) in labels.iter().enumerate() {
            let x = PLOT_LEFT + PLOT_W * i as f64 / n as f64;
            let _ = write!(
                names,
                r#"<text x="{x:.1}" y="{:.1}" font-size="9" text-anchor="end" transform="rotate(-30 {x:.1} {:.1})">{}</text>"#,
                PLOT_TOP + PLOT_H + 28.0,
                PLOT_TOP + PLOT_H + 28.0,
                escape(l)
            );
        }
        svg.insert_str(svg.len() - "</svg>\n".len(), &names);
        svg
    }
}

const PLOT_LEFT: f64 = 60.0;
const PLOT_TOP: f64 = 30.0;
const PLOT_W: f64 = 400.0;
const PLOT_H: f64 = 260.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="520" height="360" font-family="sans-serif">
<text x="260" y="18" font-size="13" text-anchor="middle">{}</text>
<rect x="{PLOT_LEFT}" y="{PLOT_TOP}" width="{PLOT_W}" height="{PLOT_H}" fill="none" stroke="black"/>
<text x="{}" y="352" font-size="11" text-anchor="middle">{}</text>
<text x="14" y="{}" font-size="11" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>
"#,
        escape(title),
        PLOT_LEFT + PLOT_W / 2.0,
        escape(x_label),
        PLOT_TOP + PLOT_H / 2.0,
        PLOT_TOP + PLOT_H / 2.0,
        escape(y_label)
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = PLOT_TOP + PLOT_H * (1.0 - v);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="end">{v:.2}</text>"#,
            PLOT_LEFT - 4.0,
            y + 3.0
        );
    }
    s
}

/// Series share one axis box; x is rescaled to the data range, y is [0, 1].
fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut svg = frame(title, x_label, y_label);
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0));
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                format!(
                    "{:.1},{:.1}",
                    PLOT_LEFT + PLOT_W * (x - lo) / span,
                    PLOT_TOP + PLOT_H * (1.0 - y.clamp(0.0, 1.0))
                )
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" fill="{color}">{}</text>"#,
            PLOT_LEFT + PLOT_W - 70.0,
            PLOT_TOP + 14.0 + 12.0 * k as f64,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let mut svg = frame(title, "domain", "AP");
    let slot = PLOT_W / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = PLOT_H * v.clamp(0.0, 1.0);
        let x = PLOT_LEFT + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
            PLOT_TOP + PLOT_H - h,
            slot * 0.7,
            COLORS[0]
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            PLOT_TOP + PLOT_H + 12.0,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AnnotatedImage, Annotation, Category, Raster};
    use crate::domain::MetadataRecord;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Staircase oracle: every true positive contributes 1/G times the best
    /// precision over all ranking prefixes whose recall is at least its own.
    fn oracle_ap(scored: &[(f64, bool)], total_gt: usize) -> Option<f64> {
        if total_gt == 0 {
            return if scored.is_empty() { None } else { Some(0.0) };
        }
        let mut order: Vec<(f64, u8)> = scored.iter().map(|&(s, tp)| (s, tp as u8)).collect();
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let prefixes: Vec<(usize, usize)> = (1..=order.len())
            .map(|k| (order[..k].iter().filter(|e| e.1 == 1).count(), k))
            .collect();
        let mut ap = 0.0;
        for seen in 1..=order.iter().filter(|e| e.1 == 1).count() {
            let best = prefixes
                .iter()
                .filter(|(t, _)| *t >= seen)
                .map(|&(t, n)| t as f64 / n as f64)
                .fold(0.0, f64::max);
            ap += best / total_gt as f64;
        }
        Some(ap)
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<(f64, bool)>, usize) {
        let n_det = rng.random_range(0..=20);
        let n_gt = rng.random_range(0..=20);
        let mut tps_left = n_gt;
        let scored = (0..n_det)
            .map(|_| {
                // Coarse scores so ties happen often.
                let s = rng.random_range(0..10) as f64 / 10.0;
                let tp = tps_left > 0 && rng.random_bool(0.5);
                tps_left -= usize::from(tp);
                (s, tp)
            })
            .collect();
        (scored, n_gt)
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let (scored, gt) = random_instance(&mut rng);
            let (a, b) = (average_precision(&scored, gt), oracle_ap(&scored, gt));
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "{scored:?} {gt}: {a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[(0.9, true)], 1), Some(1.0));
        assert_eq!(average_precision(&[(0.9, false), (0.8, true)], 1), Some(0.5));
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[(0.3, false)], 0), Some(0.0));
        assert_eq!(average_precision(&[], 4), Some(0.0));
        // Tie: the false positive is ranked first.
        assert_eq!(average_precision(&[(0.5, true), (0.5, false)], 1), Some(0.5));
    }

    #[test]
    fn matching_examples() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let near = BBox::new(0.0, 0.0, 10.0, 8.0);
        assert!((near.iou(&gt) - 0.8).abs() < 1e-12);
        let m = match_detections(&[(near, 0.9)], &[gt], 0.7);
        assert_eq!(m.true_positive, vec![true]);
        let m = match_detections(&[(near, 0.8), (near, 0.9)], &[gt], 0.7);
        assert_eq!(m.true_positive, vec![false, true]);
        let m = match_detections(&[], &[gt], 0.7);
        assert!(m.true_positive.is_empty());
        assert_eq!(m.matched, vec![false]);
    }

    proptest! {
        #[test]
        fn ap_bounded_and_monotone(
            dets in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 0..20),
            extra_gt in 0usize..5,
        ) {
            let gt = dets.iter().filter(|d| d.1).count() + extra_gt;
            if let Some(ap) = average_precision(&dets, gt) {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
                // A true positive scored above everything never hurts.
                let mut better = dets.clone();
                better.push((2.0, true));
                let boosted = average_precision(&better, gt + 1).unwrap();
                prop_assert!(boosted + 1e-12 >= ap);
                // A lowest-scored false positive never helps.
                let mut worse = dets.clone();
                worse.push((-1.0, false));
                prop_assert!(average_precision(&worse, gt).unwrap() <= ap + 1e-12);
            }
        }
    }

    fn image(id: u64, objects: Vec<BBox>, altitude: f64) -> AnnotatedImage {
        AnnotatedImage {
            id,
            image: Raster::filled(64, 64, 0.0),
            objects: objects.into_iter().map(|bbox| Annotation { bbox, class_id: 0 }).collect(),
            metadata: MetadataRecord::new(altitude, 45.0),
        }
    }

    fn det(image_id: u64, b: BBox, score: f64) -> DumpEntry {
        DumpEntry {
            image_id,
            bbox: b.to_array(),
            score,
            category_id: 1,
        }
    }

    fn two_domain_set(large: usize, small: usize) -> (Dataset, DomainSchema) {
        let obj = BBox::new(10.0, 10.0, 8.0, 8.0);
        let mut images = Vec::new();
        for i in 0..large {
            images.push(image(i as u64, vec![obj], 10.0));
        }
        for i in 0..small {
            images.push(image((large + i) as u64, vec![obj], 90.0));
        }
        let ds = Dataset {
            categories: vec![Category {
                id: 1,
                name: "person".into(),
            }],
            images,
        };
        (ds, DomainSchema::altitude(0.0, 100.0, 2).unwrap())
    }

    #[test]
    fn domain_average_is_unweighted() {
        let (ds, schema) = two_domain_set(4, 2);
        let hit = BBox::new(10.0, 10.0, 8.0, 8.0);
        let miss = BBox::new(40.0, 40.0, 8.0, 8.0);
        // bin0: 2 of 4 found, AP 0.5. bin1: both found, AP 1.
        let dump = vec![
            det(0, hit, 0.9),
            det(1, hit, 0.9),
            det(2, miss, 0.1),
            det(4, hit, 0.8),
            det(5, hit, 0.8),
        ];
        let r = evaluate_dump("m", &dump, &ds, Some(&schema), &EvalConfig::default()).unwrap();
        let m = r.metric("AP50").unwrap();
        let per = m.per_domain.as_ref().unwrap();
        assert_eq!(per["bin0"], Some(0.5));
        assert_eq!(per["bin1"], Some(1.0));
        assert_eq!(m.average, Some(0.75));
        assert!(m.overall.unwrap() < 0.75);
    }

    #[test]
    fn empty_domain_is_excluded() {
        let (ds, _) = two_domain_set(3, 0);
        let schema = DomainSchema::altitude(0.0, 100.0, 2).unwrap();
        let dump = vec![det(0, BBox::new(10.0, 10.0, 8.0, 8.0), 0.9)];
        let r = evaluate_dump("m", &dump, &ds, Some(&schema), &EvalConfig::default()).unwrap();
        let m = r.metric("AP50").unwrap();
        assert_eq!(m.per_domain.as_ref().unwrap()["bin1"], None);
        assert_eq!(m.average, m.per_domain.as_ref().unwrap()["bin0"]);
        assert_eq!(r.excluded_domains, vec!["bin1".to_string()]);
    }

    #[test]
    fn single_domain_equals_full_set() {
        let (ds, _) = two_domain_set(5, 0);
        let schema = DomainSchema::altitude(0.0, 100.0, 2).unwrap();
        let dump = vec![
            det(0, BBox::new(10.0, 10.0, 8.0, 8.0), 0.9),
            det(1, BBox::new(30.0, 10.0, 8.0, 8.0), 0.95),
            det(2, BBox::new(11.0, 10.0, 8.0, 8.0), 0.4),
        ];
        let r = evaluate_dump("m", &dump, &ds, Some(&schema), &EvalConfig::default()).unwrap();
        let m = r.metric("AP50").unwrap();
        assert_eq!(m.per_domain.as_ref().unwrap()["bin0"], m.overall);
        assert_eq!(m.average, m.overall);
    }

    /// Dump A is better on the large domain, dump B on the small one.
    pub(crate) fn rank_flip_pair() -> (Dataset, DomainSchema, Vec<DumpEntry>, Vec<DumpEntry>) {
        let (ds, schema) = two_domain_set(9, 3);
        let hit = BBox::new(10.0, 10.0, 8.0, 8.0);
        let a: Vec<DumpEntry> = (0..9).map(|i| det(i, hit, 0.9)).collect();
        let b: Vec<DumpEntry> = (0..5).chain(9..12).map(|i| det(i, hit, 0.9)).collect();
        (ds, schema, a, b)
    }

    #[test]
    fn rank_flip() {
        let (ds, schema, a, b) = rank_flip_pair();
        let config = EvalConfig::default();
        let ra = evaluate_dump("a", &a, &ds, Some(&schema), &config).unwrap();
        let rb = evaluate_dump("b", &b, &ds, Some(&schema), &config).unwrap();
        let (ma, mb) = (ra.metric("AP50").unwrap(), rb.metric("AP50").unwrap());
        assert!(ma.overall > mb.overall);
        assert!(ma.average < mb.average);
    }

    #[test]
    fn unstratified_has_no_average() {
        let (ds, schema, a, _) = rank_flip_pair();
        let config = EvalConfig {
            per_domain: false,
            iou_thresholds: vec![0.5, 0.7],
            ..EvalConfig::default()
        };
        let r = evaluate_dump("a", &a, &ds, Some(&schema), &config).unwrap();
        assert_eq!(r.metrics.len(), 2);
        for m in r.metrics.values() {
            assert!(m.per_domain.is_none() && m.average.is_none());
        }
        assert!(r.domains.is_empty());
        assert!(!r.to_text().contains("average"));
    }

    #[test]
    fn bad_dumps_rejected() {
        let (ds, schema, _, _) = rank_flip_pair();
        let config = EvalConfig::default();
        let unknown = vec![det(99, BBox::new(0.0, 0.0, 1.0, 1.0), 0.5)];
        assert!(evaluate_dump("x", &unknown, &ds, Some(&schema), &config).is_err());
        let mut wrong_class = det(0, BBox::new(0.0, 0.0, 1.0, 1.0), 0.5);
        wrong_class.category_id = 7;
        assert!(evaluate_dump("x", &[wrong_class], &ds, Some(&schema), &config).is_err());
        let empty = Dataset {
            categories: ds.categories.clone(),
            images: vec![],
        };
        assert!(evaluate_dump("x", &[], &empty, None, &config).unwrap_err().is_input_error());
    }

    #[test]
    fn report_round_trip_and_plots() {
        let (ds, schema, a, _) = rank_flip_pair();
        let r = evaluate_dump("a", &a, &ds, Some(&schema), &EvalConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&r, dir.path(), "a", false).unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(EvalReport::load(&files[0]).unwrap(), r);
        let with_plots = emit_report(&r, dir.path(), "a", true).unwrap();
        assert_eq!(with_plots.len(), 4);
        assert!(fs::read_to_string(&with_plots[2]).unwrap().starts_with("<svg"));

        let dump_path = dir.path().join("dump.json");
        save_dump(&a, &dump_path).unwrap();
        assert_eq!(load_dump(&dump_path).unwrap(), a);
    }

    #[test]
    fn comparison_deltas() {
        let (ds, schema, a, b) = rank_flip_pair();
        let config = EvalConfig::default();
        let ra = evaluate_dump("a", &a, &ds, Some(&schema), &config).unwrap();
        let rb = evaluate_dump("b", &b, &ds, Some(&schema), &config).unwrap();
        let t = compare_reports(&[ra.clone()], "a", "AP50").unwrap();
        assert!(t.rows[0].deltas.iter().all(|d| *d == Some(0.0)));
        let t = compare_reports(&[ra.clone(), rb.clone()], "a", "AP50").unwrap();
        assert_eq!(t.columns, vec!["bin0", "bin1", "overall", "average"]);
        let row = t.row("b").unwrap();
        let c = t.column("average").unwrap();
        assert_eq!(row.deltas[c], Some(row.values[c].unwrap() - t.row("a").unwrap().values[c].unwrap()));
        assert!(t.to_text().contains("d_average"));
        assert!(t.to_svg().ends_with("</svg>\n"));

        let mut other = rb.clone();
        other.dataset_digest = "different".into();
        assert!(compare_reports(&[ra.clone(), other], "a", "AP50").is_err());
        assert!(compare_reports(&[ra.clone(), ra], "a", "AP50").is_err());
    }
}

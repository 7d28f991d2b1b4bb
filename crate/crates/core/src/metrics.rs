//! Instance-segmentation metrics.
//!
//! Overlap metrics (SBD, coverage, FP/FN) ignore the background label on both
//! sides. VOI and adapted Rand error are computed over ground-truth
//! foreground pixels by default, with the predicted background treated as an
//! ordinary label.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{pair_files, read_labels};
use crate::error::{check_dims, Error, Result};
use crate::grid::{relabel_connected, remove_small_segments, Connectivity, LabelMap};

/// Overlap statistics between the nonzero segments of two label maps.
#[derive(Debug, Clone)]
pub struct MatchTable {
    pub gt_ids: Vec<u16>,
    pub pred_ids: Vec<u16>,
    pub gt_area: Vec<u64>,
    pub pred_area: Vec<u64>,
    /// `(gt index, pred index) -> intersection area`
    pub intersection: HashMap<(usize, usize), u64>,
}

impl MatchTable {
    pub fn new(pred: &LabelMap, gt: &LabelMap) -> Result<Self> {
        check_dims(gt.dims(), pred.dims())?;
        let gt_ids = gt.segment_ids();
        let pred_ids = pred.segment_ids();
        let index = |ids: &[u16]| {
            let mut slot = vec![usize::MAX; u16::MAX as usize + 1];
            for (i, &l) in ids.iter().enumerate() {
                slot[l as usize] = i;
            }
            slot
        };
        let gslot = index(&gt_ids);
        let pslot = index(&pred_ids);
        let mut gt_area = vec![0; gt_ids.len()];
        let mut pred_area = vec![0; pred_ids.len()];
        let mut intersection = HashMap::new();
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            if g != 0 {
                gt_area[gslot[g as usize]] += 1;
            }
            if p != 0 {
                pred_area[pslot[p as usize]] += 1;
            }
            if g != 0 && p != 0 {
                *intersection
                    .entry((gslot[g as usize], pslot[p as usize]))
                    .or_insert(0) += 1;
            }
        }
        Ok(Self {
            gt_ids,
            pred_ids,
            gt_area,
            pred_area,
            intersection,
        })
    }

    fn inter(&self, g: usize, p: usize) -> u64 {
        self.intersection.get(&(g, p)).copied().unwrap_or(0)
    }

    pub fn iou(&self, g: usize, p: usize) -> f64 {
        let i = self.inter(g, p) as f64;
        let union = (self.gt_area[g] + self.pred_area[p]) as f64 - i;
        if union == 0.0 {
            0.0
        } else {
            i / union
        }
    }

    pub fn dice(&self, g: usize, p: usize) -> f64 {
        let denom = (self.gt_area[g] + self.pred_area[p]) as f64;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * self.inter(g, p) as f64 / denom
        }
    }

    pub fn best_iou_for_gt(&self, g: usize) -> f64 {
        (0..self.pred_ids.len())
            .map(|p| self.iou(g, p))
            .fold(0.0, f64::max)
    }

    pub fn best_iou_for_pred(&self, p: usize) -> f64 {
        (0..self.gt_ids.len())
            .map(|g| self.iou(g, p))
            .fold(0.0, f64::max)
    }
}

/// Symmetric best Dice on a 0-100 scale. Both maps empty scores 100; exactly
/// one empty scores 0.
pub fn sbd(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    let t = MatchTable::new(pred, gt)?;
    let (ng, np) = (t.gt_ids.len(), t.pred_ids.len());
    if ng == 0 && np == 0 {
        return Ok(100.0);
    }
    if ng == 0 || np == 0 {
        return Ok(0.0);
    }
    let bd_pred = (0..np)
        .map(|p| (0..ng).map(|g| t.dice(g, p)).fold(0.0, f64::max))
        .sum::<f64>()
        / np as f64;
    let bd_gt = (0..ng)
        .map(|g| (0..np).map(|p| t.dice(g, p)).fold(0.0, f64::max))
        .sum::<f64>()
        / ng as f64;
    Ok(100.0 * bd_pred.min(bd_gt))
}

/// Absolute difference in instance counts.
pub fn dic_abs(pred: &LabelMap, gt: &LabelMap) -> Result<usize> {
    check_dims(gt.dims(), pred.dims())?;
    Ok(pred.instance_count().abs_diff(gt.instance_count()))
}

/// `(MWCov, MUCov)` on a 0-100 scale.
pub fn coverage(pred: &LabelMap, gt: &LabelMap) -> Result<(f64, f64)> {
    let t = MatchTable::new(pred, gt)?;
    let ng = t.gt_ids.len();
    if ng == 0 {
        return Err(Error::InvalidParameter("coverage is undefined for an empty ground truth".into()));
    }
    let best: Vec<f64> = (0..ng).map(|g| t.best_iou_for_gt(g)).collect();
    let mucov = best.iter().sum::<f64>() / ng as f64;
    let total: u64 = t.gt_area.iter().sum();
    let mwcov = best
        .iter()
        .zip(&t.gt_area)
        .map(|(b, &a)| b * a as f64)
        .sum::<f64>()
        / total as f64;
    Ok((100.0 * mwcov, 100.0 * mucov))
}

/// `(avg_fp, avg_fn)`: fractions of predicted / ground-truth segments with no
/// counterpart of IoU strictly above `iou_threshold`. An empty side gives 0.
pub fn fp_fn_rates(pred: &LabelMap, gt: &LabelMap, iou_threshold: f64) -> Result<(f64, f64)> {
    let t = MatchTable::new(pred, gt)?;
    let (ng, np) = (t.gt_ids.len(), t.pred_ids.len());
    let fp = if np == 0 {
        0.0
    } else {
        (0..np).filter(|&p| t.best_iou_for_pred(p) <= iou_threshold).count() as f64 / np as f64
    };
    let fnr = if ng == 0 {
        0.0
    } else {
        (0..ng).filter(|&g| t.best_iou_for_gt(g) <= iou_threshold).count() as f64 / ng as f64
    };
    Ok((fp, fnr))
}

/// Joint label counts over the evaluated pixels.
fn contingency(pred: &LabelMap, gt: &LabelMap, foreground_only: bool) -> Result<HashMap<(u16, u16), u64>> {
    check_dims(gt.dims(), pred.dims())?;
    let mut joint = HashMap::new();
    for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
        if foreground_only && g == 0 {
            continue;
        }
        *joint.entry((g, p)).or_insert(0u64) += 1;
    }
    Ok(joint)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoiOptions {
    pub foreground_only: bool,
    pub log2: bool,
}

impl Default for VoiOptions {
    fn default() -> Self {
        Self {
            foreground_only: true,
            log2: false,
        }
    }
}

/// `(voi_split, voi_merge) = (H(pred | gt), H(gt | pred))`.
pub fn voi(pred: &LabelMap, gt: &LabelMap, opts: VoiOptions) -> Result<(f64, f64)> {
    let joint = contingency(pred, gt, opts.foreground_only)?;
    let n: u64 = joint.values().sum();
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    let mut gt_marg: HashMap<u16, u64> = HashMap::new();
    let mut pred_marg: HashMap<u16, u64> = HashMap::new();
    for (&(g, p), &c) in &joint {
        *gt_marg.entry(g).or_insert(0) += c;
        *pred_marg.entry(p).or_insert(0) += c;
    }
    let n = n as f64;
    let mut split = 0.0;
    let mut merge = 0.0;
    for (&(g, p), &c) in &joint {
        let pij = c as f64 / n;
        split -= pij * (c as f64 / gt_marg[&g] as f64).ln();
        merge -= pij * (c as f64 / pred_marg[&p] as f64).ln();
    }
    let scale = if opts.log2 { std::f64::consts::LN_2 } else { 1.0 };
    // Clamp away -0.0 from exact cancellations.
    Ok(((split / scale).max(0.0), (merge / scale).max(0.0)))
}

fn pairs(n: u64) -> f64 {
    (n as f64) * (n.saturating_sub(1) as f64) / 2.0
}

/// Adapted Rand error: one minus the pair-counting F-score. An empty pair set
/// on either side counts as perfect precision / recall.
pub fn arand(pred: &LabelMap, gt: &LabelMap, foreground_only: bool) -> Result<f64> {
    let joint = contingency(pred, gt, foreground_only)?;
    let mut gt_marg: HashMap<u16, u64> = HashMap::new();
    let mut pred_marg: HashMap<u16, u64> = HashMap::new();
    let mut both = 0.0;
    for (&(g, p), &c) in &joint {
        *gt_marg.entry(g).or_insert(0) += c;
        *pred_marg.entry(p).or_insert(0) += c;
        both += pairs(c);
    }
    let same_pred: f64 = pred_marg.values().map(|&c| pairs(c)).sum();
    let same_gt: f64 = gt_marg.values().map(|&c| pairs(c)).sum();
    let precision = if same_pred == 0.0 { 1.0 } else { both / same_pred };
    let recall = if same_gt == 0.0 { 1.0 } else { both / same_gt };
    if precision + recall == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - 2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Sbd,
    Dic,
    Coverage,
    FpFn,
    Voi,
    Arand,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Sbd,
        Metric::Dic,
        Metric::Coverage,
        Metric::FpFn,
        Metric::Voi,
        Metric::Arand,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "sbd" => Ok(Metric::Sbd),
            "dic" => Ok(Metric::Dic),
            "coverage" | "cov" | "mwcov" | "mucov" => Ok(Metric::Coverage),
            "fpfn" | "fp" | "fn" => Ok(Metric::FpFn),
            "voi" => Ok(Metric::Voi),
            "arand" => Ok(Metric::Arand),
            other => Err(Error::InvalidParameter(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub metrics: Vec<Metric>,
    /// Predicted segments below this area are removed before scoring.
    pub min_area: usize,
    pub connectivity: Connectivity,
    pub iou_threshold: f64,
    pub foreground_only: bool,
    pub voi_log2: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.to_vec(),
            min_area: 0,
            connectivity: Connectivity::Four,
            iou_threshold: 0.5,
            foreground_only: true,
            voi_log2: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sbd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mwcov: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mucov: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_fp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_fn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voi_split: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voi_merge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arand: Option<f64>,
    pub gt_instances: usize,
    pub pred_instances: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Small-segment removal followed by connected-component re-indexing.
pub fn postprocess(pred: &LabelMap, opts: &EvalOptions) -> Result<LabelMap> {
    let cleaned = remove_small_segments(pred, opts.min_area);
    relabel_connected(&cleaned, opts.connectivity)
}

/// Scores one prediction (after post-processing) against its ground truth.
pub fn evaluate_pair(id: &str, pred: &LabelMap, gt: &LabelMap, opts: &EvalOptions) -> Result<MetricReport> {
    check_dims(gt.dims(), pred.dims())?;
    let pred = postprocess(pred, opts)?;
    let mut r = MetricReport {
        id: id.to_string(),
        gt_instances: gt.instance_count(),
        pred_instances: pred.instance_count(),
        ..MetricReport::default()
    };
    let gt_empty = r.gt_instances == 0;
    let pred_empty = r.pred_instances == 0;
    if gt_empty {
        r.flags.push("empty_ground_truth".into());
    }
    if pred_empty {
        r.flags.push("empty_prediction".into());
    }
    for m in &opts.metrics {
        match m {
            Metric::Sbd => r.sbd = Some(sbd(&pred, gt)?),
            Metric::Dic => r.dic = Some(dic_abs(&pred, gt)? as f64),
            Metric::Coverage => {
                if gt_empty {
                    r.flags.push("coverage_undefined".into());
                } else {
                    let (w, u) = coverage(&pred, gt)?;
                    r.mwcov = Some(w);
                    r.mucov = Some(u);
                }
            }
            Metric::FpFn => {
                let (fp, fnr) = fp_fn_rates(&pred, gt, opts.iou_threshold)?;
                r.avg_fp = Some(fp);
                r.avg_fn = Some(fnr);
                r.flags.push(format!("iou_threshold={}", opts.iou_threshold));
            }
            Metric::Voi => {
                let (s, mg) = voi(
                    &pred,
                    gt,
                    VoiOptions {
                        foreground_only: opts.foreground_only,
                        log2: opts.voi_log2,
                    },
                )?;
                r.voi_split = Some(s);
                r.voi_merge = Some(mg);
            }
            Metric::Arand => r.arand = Some(arand(&pred, gt, opts.foreground_only)?),
        }
    }
    r.flags.dedup();
    Ok(r)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub images: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sbd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mwcov: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mucov: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_fp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_fn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voi_split: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voi_merge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arand: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl Aggregate {
    pub fn from_reports(reports: &[MetricReport]) -> Self {
        Self {
            images: reports.len(),
            sbd: mean_of(reports.iter().map(|r| r.sbd)),
            dic: mean_of(reports.iter().map(|r| r.dic)),
            mwcov: mean_of(reports.iter().map(|r| r.mwcov)),
            mucov: mean_of(reports.iter().map(|r| r.mucov)),
            avg_fp: mean_of(reports.iter().map(|r| r.avg_fp)),
            avg_fn: mean_of(reports.iter().map(|r| r.avg_fn)),
            voi_split: mean_of(reports.iter().map(|r| r.voi_split)),
            voi_merge: mean_of(reports.iter().map(|r| r.voi_merge)),
            arand: mean_of(reports.iter().map(|r| r.arand)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<MetricReport>,
    pub aggregate: Aggregate,
    pub options: EvalOptions,
}

/// Pairs `<id>_label.png` files across the two directories and scores each.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let preds = pair_files(pred_dir)?;
    let gts = pair_files(gt_dir)?;
    let pred_ids: Vec<&String> = preds.iter().filter(|(_, v)| v.1.is_some()).map(|(k, _)| k).collect();
    let gt_ids: Vec<&String> = gts.iter().filter(|(_, v)| v.1.is_some()).map(|(k, _)| k).collect();
    let mut offenders: Vec<String> = pred_ids
        .iter()
        .filter(|id| !gt_ids.contains(id))
        .map(|id| format!("{} (prediction only)", id))
        .collect();
    offenders.extend(
        gt_ids
            .iter()
            .filter(|id| !pred_ids.contains(id))
            .map(|id| format!("{} (ground truth only)", id)),
    );
    if !offenders.is_empty() {
        return Err(Error::Dataset(format!("unpaired label files: {}", offenders.join(", "))));
    }
    let mut per_image = Vec::with_capacity(gt_ids.len());
    for id in gt_ids {
        let pred = read_labels(preds[id].1.as_ref().expect("paired"))?;
        let gt = read_labels(gts[id].1.as_ref().expect("paired"))?;
        per_image.push(evaluate_pair(id, &pred, &gt, opts).map_err(|e| Error::Dataset(format!("{id}: {e}")))?);
    }
    Ok(EvalReport {
        aggregate: Aggregate::from_reports(&per_image),
        per_image,
        options: opts.clone(),
    })
}

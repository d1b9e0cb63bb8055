//! Detection and localization metrics.
//!
//! Image- and pixel-level AUROC, average precision and F1-max share one
//! sorted threshold sweep. PRO integrates the mean per-region recall over the
//! false-positive rate up to a limit (0.3 by default).

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Map2d;

/// Scores with binary labels (`true` = anomalous).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::param("scores must be finite"));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    /// `(positives, negatives)` per distinct score, highest score first.
    fn tie_groups(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut last = None;
        for i in idx {
            let s = self.scores[i];
            if last != Some(s) {
                groups.push((0, 0));
                last = Some(s);
            }
            let g = groups.last_mut().expect("group pushed above");
            if self.labels[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }
}

/// Probability that a random positive outranks a random negative, ties ½.
pub fn auroc(data: &LabeledScores) -> Result<f64> {
    let (p, n) = (data.positives() as u128, data.negatives() as u128);
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes"));
    }
    // half-unit win count; negatives seen so far are the higher-scored ones
    let mut losses2 = 0u128;
    let mut neg_above = 0u128;
    for (gp, gn) in data.tie_groups() {
        losses2 += gp as u128 * (2 * neg_above + gn as u128);
        neg_above += gn as u128;
    }
    let total2 = 2 * p * n;
    let wins2 = total2 - losses2;
    // evaluate the smaller side so that the label-flipped value sums to 1 exactly
    Ok(if 2 * wins2 <= total2 {
        wins2 as f64 / total2 as f64
    } else {
        1.0 - losses2 as f64 / total2 as f64
    })
}

/// `Σ (R_k − R_{k−1}) · P_k` over descending distinct thresholds.
pub fn average_precision(data: &LabeledScores) -> Result<f64> {
    let p = data.positives();
    if p == 0 {
        return Err(Error::UndefinedMetric("AP needs a positive"));
    }
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    for (gp, gn) in data.tie_groups() {
        tp += gp;
        fp += gn;
        if gp > 0 {
            ap += gp as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap / p as f64)
}

/// Best F1 over thresholds at observed scores (`score >= τ` is positive).
pub fn f1_max(data: &LabeledScores) -> Result<f64> {
    let p = data.positives();
    if p == 0 {
        return Err(Error::UndefinedMetric("F1-max needs a positive"));
    }
    let (mut tp, mut fp, mut best) = (0usize, 0usize, 0.0f64);
    for (gp, gn) in data.tie_groups() {
        tp += gp;
        fp += gn;
        best = best.max(2.0 * tp as f64 / (tp + p + fp) as f64);
    }
    Ok(best)
}

/// 8-connected components of `mask > 0.5`; labels start at 1, 0 is background.
pub fn connected_components(mask: &Map2d) -> (Vec<usize>, usize) {
    let (h, w) = (mask.height(), mask.width());
    let mut label = vec![0usize; h * w];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if label[start] != 0 || mask.data()[start] <= 0.5 {
            continue;
        }
        count += 1;
        label[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if label[j] == 0 && mask.data()[j] > 0.5 {
                        label[j] = count;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    (label, count)
}

pub const DEFAULT_PRO_FPR_LIMIT: f64 = 0.3;
/// Largest number of thresholds swept by [`pro`].
pub const PRO_MAX_THRESHOLDS: usize = 5000;

/// Points `(fpr, mean region overlap)` for thresholds from above the maximum
/// down to the minimum map value.
pub fn pro_curve(maps: &[Map2d], masks: &[Map2d]) -> Result<Vec<(f64, f64)>> {
    if maps.len() != masks.len() {
        return Err(Error::shape(format!(
            "{} maps but {} masks",
            maps.len(),
            masks.len()
        )));
    }
    // per pixel: score, component id (0 = normal)
    let mut pixels: Vec<(f64, usize)> = Vec::new();
    let mut sizes: Vec<usize> = vec![0];
    for (map, mask) in maps.iter().zip(masks) {
        if map.height() != mask.height() || map.width() != mask.width() {
            return Err(Error::shape("anomaly map and mask resolutions differ"));
        }
        let (labels, count) = connected_components(mask);
        let offset = sizes.len() - 1;
        sizes.resize(sizes.len() + count, 0);
        for (&s, &l) in map.data().iter().zip(&labels) {
            let id = if l == 0 { 0 } else { l + offset };
            sizes[id] += 1;
            pixels.push((s, id));
        }
    }
    let regions = sizes.len() - 1;
    if regions == 0 {
        return Err(Error::UndefinedMetric(
            "PRO needs at least one anomalous region",
        ));
    }
    let negatives = sizes[0];
    if negatives == 0 {
        return Err(Error::UndefinedMetric("PRO needs normal pixels"));
    }
    if pixels.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::param("anomaly maps must be finite"));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut distinct = 0usize;
    for (i, p) in pixels.iter().enumerate() {
        if i == 0 || p.0 != pixels[i - 1].0 {
            distinct += 1;
        }
    }
    // emit at every distinct value, or at quantile-spaced ones when capped
    let keep = |k: usize| -> bool {
        if distinct <= PRO_MAX_THRESHOLDS {
            return true;
        }
        let step = (distinct - 1) as f64 / (PRO_MAX_THRESHOLDS - 1) as f64;
        let j = (k as f64 / step).round();
        (j * step).round() as usize == k || k == distinct - 1
    };
    let mut hits = vec![0usize; sizes.len()];
    let mut curve = vec![(0.0, 0.0)];
    let mut k = 0;
    let mut i = 0;
    while i < pixels.len() {
        let v = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == v {
            hits[pixels[i].1] += 1;
            i += 1;
        }
        if keep(k) {
            let overlap: f64 = (1..sizes.len())
                .map(|c| hits[c] as f64 / sizes[c] as f64)
                .sum::<f64>()
                / regions as f64;
            curve.push((hits[0] as f64 / negatives as f64, overlap));
        }
        k += 1;
    }
    Ok(curve)
}

/// Trapezoid area under a monotone curve on `[0, limit]`, divided by `limit`.
pub fn normalized_area(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
        }
    }
    area / limit
}

pub fn pro(maps: &[Map2d], masks: &[Map2d], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::param("fpr_limit must lie in (0, 1]"));
    }
    Ok(normalized_area(&pro_curve(maps, masks)?, fpr_limit))
}

/// One evaluated test image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub score: f64,
    pub anomalous: bool,
    pub map: Map2d,
    /// Ground truth; `None` means all normal.
    pub mask: Option<Map2d>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub category: String,
    pub i_auroc: Option<f64>,
    pub i_ap: Option<f64>,
    pub i_f1max: Option<f64>,
    pub p_auroc: Option<f64>,
    pub p_ap: Option<f64>,
    pub p_f1max: Option<f64>,
    pub pro: Option<f64>,
    pub n_images: usize,
    pub n_anomalous: usize,
    pub config_hash: String,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn evaluate(category: &str, items: &[EvalItem], config_hash: &str) -> Result<MetricsReport> {
    let image = LabeledScores::new(
        items.iter().map(|i| i.score).collect(),
        items.iter().map(|i| i.anomalous).collect(),
    )?;
    let mut masks = Vec::with_capacity(items.len());
    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    for it in items {
        let mask = match &it.mask {
            Some(m) => {
                if m.height() != it.map.height() || m.width() != it.map.width() {
                    return Err(Error::shape("anomaly map and mask resolutions differ"));
                }
                m.clone()
            }
            None => Map2d::zeros(it.map.height(), it.map.width()),
        };
        pixel_scores.extend_from_slice(it.map.data());
        pixel_labels.extend(mask.data().iter().map(|&v| v > 0.5));
        masks.push(mask);
    }
    let pixel = LabeledScores::new(pixel_scores, pixel_labels)?;
    let maps: Vec<Map2d> = items.iter().map(|i| i.map.clone()).collect();
    Ok(MetricsReport {
        category: category.to_string(),
        i_auroc: defined(auroc(&image))?,
        i_ap: defined(average_precision(&image))?,
        i_f1max: defined(f1_max(&image))?,
        p_auroc: defined(auroc(&pixel))?,
        p_ap: defined(average_precision(&pixel))?,
        p_f1max: defined(f1_max(&pixel))?,
        pro: defined(pro(&maps, &masks, DEFAULT_PRO_FPR_LIMIT))?,
        n_images: items.len(),
        n_anomalous: image.positives(),
        config_hash: config_hash.to_string(),
    })
}

/// First line of every metrics CSV.
pub const METRICS_CSV_VERSION: &str = "# metrics-csv v1";
pub const METRICS_CSV_COLUMNS: &str =
    "category,i_auroc,i_ap,i_f1max,p_auroc,p_ap,p_f1max,pro,n_images,n_anomalous,config_hash";

impl MetricsReport {
    pub fn values(&self) -> [Option<f64>; 7] {
        [
            self.i_auroc,
            self.i_ap,
            self.i_f1max,
            self.p_auroc,
            self.p_ap,
            self.p_f1max,
            self.pro,
        ]
    }

    /// Per-metric mean over the reports where it is defined.
    pub fn average(reports: &[MetricsReport]) -> MetricsReport {
        let mean = |k: usize| {
            let v: Vec<f64> = reports.iter().filter_map(|r| r.values()[k]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let hashes: Vec<&str> = reports.iter().map(|r| r.config_hash.as_str()).collect();
        let hash = if hashes.windows(2).all(|w| w[0] == w[1]) {
            hashes.first().copied().unwrap_or_default().to_string()
        } else {
            "mixed".to_string()
        };
        MetricsReport {
            category: "average".into(),
            i_auroc: mean(0),
            i_ap: mean(1),
            i_f1max: mean(2),
            p_auroc: mean(3),
            p_ap: mean(4),
            p_f1max: mean(5),
            pro: mean(6),
            n_images: reports.iter().map(|r| r.n_images).sum(),
            n_anomalous: reports.iter().map(|r| r.n_anomalous).sum(),
            config_hash: hash,
        }
    }

    fn csv_row(&self) -> String {
        let mut s = self.category.clone();
        for v in self.values() {
            match v {
                Some(v) => write!(s, ",{v:.6}").unwrap(),
                None => s.push_str(",undefined"),
            }
        }
        write!(
            s,
            ",{},{},{}",
            self.n_images, self.n_anomalous, self.config_hash
        )
        .unwrap();
        s
    }

    /// One row per report plus an `average` row.
    pub fn to_csv(reports: &[MetricsReport]) -> String {
        let mut s = format!("{METRICS_CSV_VERSION}\n{METRICS_CSV_COLUMNS}\n");
        for r in reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s.push_str(&Self::average(reports).csv_row());
        s.push('\n');
        s
    }

    pub fn write_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
        std::fs::write(path, Self::to_csv(reports)).map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self) -> String {
        let f = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{:.2}", 100.0 * v));
        format!(
            "{}: I-AUROC {} I-AP {} I-F1max {} | P-AUROC {} P-AP {} P-F1max {} PRO {} ({} images, {} anomalous, config {})",
            self.category,
            f(self.i_auroc),
            f(self.i_ap),
            f(self.i_f1max),
            f(self.p_auroc),
            f(self.p_ap),
            f(self.p_f1max),
            f(self.pro),
            self.n_images,
            self.n_anomalous,
            self.config_hash
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(s: &[f64], l: &[u8]) -> LabeledScores {
        LabeledScores::new(s.to_vec(), l.iter().map(|&v| v == 1).collect()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&ls(&[0.1, 0.9], &[0, 1])).unwrap(), 1.0);
        assert_eq!(auroc(&ls(&[0.5; 4], &[0, 1, 0, 1])).unwrap(), 0.5);
        assert_eq!(
            auroc(&ls(&[0.2, 0.8, 0.4, 0.6], &[0, 1, 1, 0])).unwrap(),
            0.75
        );
        assert!(matches!(
            auroc(&ls(&[0.1, 0.2], &[1, 1])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(
            average_precision(&ls(&[0.9, 0.8, 0.1], &[1, 1, 0])).unwrap(),
            1.0
        );
        let ap = average_precision(&ls(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1])).unwrap();
        assert!((ap - 0.25).abs() < 1e-15);
        assert!(average_precision(&ls(&[0.1], &[0])).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_max(&ls(&[0.9, 0.1], &[1, 0])).unwrap(), 1.0);
        let f = f1_max(&ls(&[0.5, 0.5, 0.5], &[1, 1, 0])).unwrap();
        assert!((f - 0.8).abs() < 1e-15);
    }

    #[test]
    fn components_use_diagonals() {
        let m = Map2d::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(connected_components(&m).1, 1);
        let m = Map2d::new(3, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(connected_components(&m).1, 4);
    }

    #[test]
    fn pro_examples() {
        let mask = Map2d::from_fn(4, 4, |y, x| if y < 2 && x < 2 { 1.0 } else { 0.0 });
        assert_eq!(
            pro(
                std::slice::from_ref(&mask),
                std::slice::from_ref(&mask),
                0.3
            )
            .unwrap(),
            1.0
        );
        // one of two regions found perfectly, the other missed
        let two = Map2d::from_fn(4, 4, |y, x| {
            if (y < 1 && x < 1) || (y == 3 && x == 3) {
                1.0
            } else {
                0.0
            }
        });
        let half = Map2d::from_fn(4, 4, |y, x| if y < 1 && x < 1 { 1.0 } else { 0.0 });
        let curve = pro_curve(&[half], &[two]).unwrap();
        assert_eq!(curve[1], (0.0, 0.5));
        assert!(pro(std::slice::from_ref(&mask), &[Map2d::zeros(4, 4)], 0.3).is_err());
    }

    #[test]
    fn constant_map_pro() {
        let mask = Map2d::from_fn(4, 4, |y, _| if y == 0 { 1.0 } else { 0.0 });
        // a single threshold jumps straight to fpr 1 with full overlap
        let curve = pro_curve(&[Map2d::filled(4, 4, 0.3)], std::slice::from_ref(&mask)).unwrap();
        assert_eq!(curve, vec![(0.0, 0.0), (1.0, 1.0)]);
        let v = pro(&[Map2d::filled(4, 4, 0.3)], &[mask], 0.3).unwrap();
        assert!((v - 0.15).abs() < 1e-15);
    }

    #[test]
    fn report_csv_marks_undefined() {
        let item = |s: f64, a: bool| EvalItem {
            score: s,
            anomalous: a,
            map: Map2d::filled(2, 2, s),
            mask: None,
        };
        let r = evaluate("toy", &[item(0.1, false), item(0.2, false)], "abc").unwrap();
        assert_eq!(r.i_auroc, None);
        let csv = MetricsReport::to_csv(&[r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_CSV_VERSION);
        assert!(lines[2].starts_with("toy,undefined"));
        assert!(lines[3].starts_with("average,undefined"));
        assert!(lines[2].ends_with(",abc"));
    }
}

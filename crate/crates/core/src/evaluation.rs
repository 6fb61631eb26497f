//! Change-class F1 from pooled confusion counts, the two-class mean F1 kept
//! only to show how it inflates scores, seed/dataset aggregation, summary
//! tables and error overlays.
//!
//! Dataset scores are micro-averaged: counts are summed over every pixel of
//! every image before any ratio is taken.

use std::io::Write;
use std::ops::{Add, AddAssign};
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::data::{ChangeMask, ImagePair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts with the roles of the two classes exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

fn check_shapes(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("prediction {a:?} vs ground truth {b:?}")));
    }
    Ok(())
}

/// Adds the pixelwise outcomes of one prediction to `counts`.
pub fn accumulate(counts: ConfusionCounts, pred: &ChangeMask, gt: &ChangeMask) -> Result<ConfusionCounts> {
    check_shapes(pred.hw(), gt.hw())?;
    let mut c = counts;
    Zip::from(pred.as_array()).and(gt.as_array()).for_each(|&p, &g| match (p, g) {
        (1, 1) => c.tp += 1,
        (1, _) => c.fp += 1,
        (_, 1) => c.fn_ += 1,
        _ => c.tn += 1,
    });
    Ok(c)
}

/// Counts from raw `{0,1}` rasters, rejecting other values.
pub fn accumulate_raw(counts: ConfusionCounts, pred: &ndarray::Array2<u8>, gt: &ndarray::Array2<u8>) -> Result<ConfusionCounts> {
    accumulate(counts, &ChangeMask::new(pred.clone())?, &ChangeMask::new(gt.clone())?)
}

/// `2tp / (2tp + fp + fn)` and whether the denominator was zero (no change
/// in either mask), in which case the score is 1.
pub fn binary_f1_flagged(c: &ConfusionCounts) -> (f64, bool) {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        (1.0, true)
    } else {
        ((2 * c.tp) as f64 / den as f64, false)
    }
}

pub fn binary_f1(c: &ConfusionCounts) -> f64 {
    binary_f1_flagged(c).0
}

/// Mean of the change-class and unchanged-class F1. Not comparable with the
/// change-class F1: under class imbalance it is dominated by the easy
/// background class.
pub fn mean_f1_two_class(c: &ConfusionCounts) -> f64 {
    (binary_f1(c) + binary_f1(&c.swapped())) / 2.0
}

fn ratio_or(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

/// Mean and sample standard deviation over runs or datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Set when only one value exists and the std is reported as 0.
    pub single_sample: bool,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("cannot aggregate zero values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            values: values.to_vec(),
            mean,
            std,
            single_sample: values.len() == 1,
        })
    }
}

/// Scores of one evaluation, or an aggregate of several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    /// Change-class F1, the headline score.
    pub f1: f64,
    /// Two-class mean F1; inflated, reported for contrast only.
    pub mf1: f64,
    pub zero_denominator_flag: bool,
    pub averaging: String,
    /// Present on aggregated reports: per-member F1, mean and sample std.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1_aggregate: Option<Aggregate>,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let (f1, flag) = binary_f1_flagged(&counts);
        // with no change anywhere precision and recall are vacuously perfect
        let empty = if flag { 1.0 } else { 0.0 };
        Self {
            counts,
            precision: ratio_or(counts.tp, counts.tp + counts.fp, empty),
            recall: ratio_or(counts.tp, counts.tp + counts.fn_, empty),
            f1,
            mf1: mean_f1_two_class(&counts),
            zero_denominator_flag: flag,
            averaging: "micro".into(),
            f1_aggregate: None,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Unweighted mean over reports. `f1`, `precision`, `recall` and `mf1` are
/// the means of the members' values; `counts` are summed; `f1_aggregate`
/// carries the member F1s with mean and sample std.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("aggregate needs at least one report".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let f1s: Vec<f64> = reports.iter().map(|r| r.f1).collect();
    let agg = Aggregate::of(&f1s)?;
    Ok(MetricsReport {
        counts: reports.iter().map(|r| r.counts).sum(),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: agg.mean,
        mf1: mean(|r| r.mf1),
        zero_denominator_flag: reports.iter().any(|r| r.zero_denominator_flag),
        averaging: reports[0].averaging.clone(),
        f1_aggregate: Some(agg),
    })
}

/// Mean of per-image F1 scores. A diagnostic only: dataset scores use
/// pooled counts.
pub fn per_image_mean_f1(per_image: &[ConfusionCounts]) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::InvalidArgument("no images".into()));
    }
    Ok(per_image.iter().map(binary_f1).sum::<f64>() / per_image.len() as f64)
}

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];

/// Converts a planar `[0, 1]` image to 8-bit RGB.
pub fn to_rgb(img: &ndarray::Array3<f32>) -> RgbImage {
    let (_, h, w) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Error overlay on the post image (values in `[0, 1]`): true positives
/// white, false positives red, false negatives blue, true negatives show
/// the image.
pub fn render_overlay(pair: &ImagePair, pred: &ChangeMask, gt: &ChangeMask) -> Result<RgbImage> {
    check_shapes(pred.hw(), gt.hw())?;
    check_shapes(pair.hw(), gt.hw())?;
    let mut out = to_rgb(&pair.post);
    for ((y, x), &p) in pred.as_array().indexed_iter() {
        let color = match (p, gt.as_array()[[y, x]]) {
            (1, 1) => TP_COLOR,
            (1, _) => FP_COLOR,
            (_, 1) => FN_COLOR,
            _ => continue,
        };
        out.put_pixel(x as u32, y as u32, Rgb(color));
    }
    Ok(out)
}

pub const PANEL_TILES: u32 = 4;

/// Side-by-side panel of pre image, post image, ground-truth mask and the
/// error overlay. Images must hold values in `[0, 1]`.
pub fn render_panel(pair: &ImagePair, pred: &ChangeMask, gt: &ChangeMask) -> Result<RgbImage> {
    let overlay = render_overlay(pair, pred, gt)?;
    let (h, w) = pair.hw();
    let mask = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb([gt.as_array()[[y as usize, x as usize]] * 255; 3])
    });
    let mut panel = RgbImage::new(PANEL_TILES * w as u32, h as u32);
    for (i, tile) in [to_rgb(&pair.pre), to_rgb(&pair.post), mask, overlay].iter().enumerate() {
        image::imageops::replace(&mut panel, tile, i as i64 * w as i64, 0);
    }
    Ok(panel)
}

/// A results table: one row per configuration, one column per dataset,
/// plus the row average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub columns: Vec<String>,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    /// Aggregated report per column; `None` marks a failed or missing cell.
    pub cells: Vec<Option<MetricsReport>>,
}

impl SummaryRow {
    /// Mean F1 over the present cells, as computed by [`aggregate`].
    pub fn average(&self) -> Option<f64> {
        let present: Vec<MetricsReport> = self.cells.iter().flatten().cloned().collect();
        aggregate(&present).ok().map(|r| r.f1)
    }
}

impl SummaryTable {
    /// CSV with F1 in percent. With `with_std`, each cell reads `mean±std`.
    pub fn write_csv<W: Write>(&self, w: W, with_std: bool) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["config".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("Avg".into());
        wr.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut rec = vec![row.label.clone()];
            for cell in &row.cells {
                rec.push(match cell {
                    None => "failed".into(),
                    Some(r) => match (&r.f1_aggregate, with_std) {
                        (Some(a), true) => format!("{:.1}±{:.1}", 100.0 * a.mean, 100.0 * a.std),
                        _ => format!("{:.1}", 100.0 * r.f1),
                    },
                });
            }
            rec.push(row.average().map_or("failed".into(), |a| format!("{:.1}", 100.0 * a)));
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush().map_err(|e| Error::Serde(e.to_string()))?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array2, Array3};
    use proptest::prelude::*;

    fn mask(v: &[u8]) -> ChangeMask {
        ChangeMask::new(Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn accumulate_examples() {
        let c = accumulate(ConfusionCounts::default(), &mask(&[1, 0, 1, 0]), &mask(&[1, 1, 0, 0])).unwrap();
        assert_eq!(c, ConfusionCounts::new(1, 1, 1, 1));
        let c = accumulate(ConfusionCounts::default(), &mask(&[1; 5]), &mask(&[1; 5])).unwrap();
        assert_eq!(c.tp, 5);
        let c = accumulate(ConfusionCounts::default(), &mask(&[1; 5]), &mask(&[0; 5])).unwrap();
        assert_eq!(c.fp, 5);
        assert!(matches!(
            accumulate(ConfusionCounts::default(), &mask(&[1; 5]), &mask(&[0; 4])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            accumulate_raw(ConfusionCounts::default(), &arr2(&[[2u8]]), &arr2(&[[0u8]])),
            Err(Error::InvalidMask(_))
        ));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(binary_f1(&ConfusionCounts::new(10, 0, 0, 0)), 1.0);
        assert_eq!(binary_f1(&ConfusionCounts::new(0, 5, 5, 0)), 0.0);
        assert_abs_diff_eq!(binary_f1(&ConfusionCounts::new(2, 1, 1, 0)), 4.0 / 6.0);
        assert_eq!(binary_f1_flagged(&ConfusionCounts::new(0, 0, 0, 9)), (1.0, true));
        let m = mean_f1_two_class(&ConfusionCounts::new(2, 1, 1, 96));
        assert_abs_diff_eq!(m, (4.0 / 6.0 + 192.0 / 194.0) / 2.0, epsilon = 1e-15);
        assert!((m - 0.8282).abs() < 1e-4);
        assert_eq!(mean_f1_two_class(&ConfusionCounts::new(50, 0, 0, 50)), 1.0);
    }

    #[test]
    fn aggregation() {
        let rep = |f1: f64| MetricsReport {
            f1,
            ..MetricsReport::from_counts(ConfusionCounts::default())
        };
        let a = aggregate(&[rep(0.80), rep(0.81), rep(0.82)]).unwrap();
        assert_abs_diff_eq!(a.f1, 0.81, epsilon = 1e-12);
        assert_abs_diff_eq!(a.f1_aggregate.as_ref().unwrap().std, 0.01, epsilon = 1e-12);
        let table_viii = [82.4, 91.5, 85.6, 90.7, 80.9, 54.3];
        let a = Aggregate::of(&table_viii).unwrap();
        assert!((a.mean - 80.9).abs() < 0.05);
        let single = aggregate(&[rep(0.7)]).unwrap();
        let s = single.f1_aggregate.unwrap();
        assert_eq!((s.mean, s.std, s.single_sample), (0.7, 0.0, true));
        let same = aggregate(&[rep(0.5), rep(0.5), rep(0.5)]).unwrap();
        assert_eq!(same.f1_aggregate.unwrap().std, 0.0);
        assert!(matches!(aggregate(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn metrics_json_fields() {
        let r = MetricsReport::from_counts(ConfusionCounts::new(1, 2, 3, 4));
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in ["tp", "fp", "fn", "tn", "precision", "recall", "f1", "mf1", "zero_denominator_flag"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        let back: MetricsReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    fn count_color(img: &RgbImage, c: [u8; 3]) -> usize {
        img.pixels().filter(|p| p.0 == c).count()
    }

    #[test]
    fn panel_has_four_tiles() {
        let pair = ImagePair::new(Array3::zeros((3, 4, 5)), Array3::ones((3, 4, 5)), "p").unwrap();
        let gt = ChangeMask::new(Array2::ones((4, 5))).unwrap();
        let panel = render_panel(&pair, &gt, &gt).unwrap();
        assert_eq!(panel.dimensions(), (20, 4));
        assert_eq!(panel.get_pixel(0, 0).0, [0, 0, 0]);
        assert_eq!(panel.get_pixel(5, 0).0, [255, 255, 255]);
        assert_eq!(panel.get_pixel(15, 3).0, TP_COLOR);
    }

    #[test]
    fn overlay_colors() {
        let img = Array3::from_elem((3, 4, 4), 0.5f32);
        let pair = ImagePair::new(img.clone(), img, "s").unwrap();
        let half = ChangeMask::new(Array2::from_shape_fn((4, 4), |(_, x)| u8::from(x < 2))).unwrap();
        let comp = ChangeMask::new(half.as_array().mapv(|v| 1 - v)).unwrap();
        let o = render_overlay(&pair, &comp, &half).unwrap();
        assert_eq!(count_color(&o, FP_COLOR), 8);
        assert_eq!(count_color(&o, FN_COLOR), 8);
        let o = render_overlay(&pair, &half, &half).unwrap();
        assert_eq!(count_color(&o, FP_COLOR) + count_color(&o, FN_COLOR), 0);
        let ones = ChangeMask::new(Array2::ones((4, 4))).unwrap();
        let o = render_overlay(&pair, &ones, &ChangeMask::zeros(4, 4)).unwrap();
        assert_eq!(count_color(&o, FP_COLOR), 16);
    }

    #[test]
    fn table_average_matches_aggregate() {
        let r = |f1: f64| MetricsReport {
            f1,
            ..MetricsReport::from_counts(ConfusionCounts::default())
        };
        let table = SummaryTable {
            columns: vec!["A".into(), "B".into(), "C".into()],
            rows: vec![SummaryRow {
                label: "x".into(),
                cells: vec![Some(r(0.5)), None, Some(r(0.75))],
            }],
        };
        assert_eq!(table.rows[0].average(), Some(0.625));
        let mut buf = Vec::new();
        table.write_csv(&mut buf, false).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().nth(1).unwrap(), "x,50.0,failed,75.0,62.5");
    }

    proptest! {
        #[test]
        fn order_independent(
            masks in prop::collection::vec(prop::collection::vec((0u8..=1, 0u8..=1), 6), 1..10),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let pairs: Vec<(ChangeMask, ChangeMask)> = masks
                .iter()
                .map(|v| {
                    let (p, g): (Vec<u8>, Vec<u8>) = v.iter().copied().unzip();
                    (mask(&p), mask(&g))
                })
                .collect();
            let total = |ps: &[(ChangeMask, ChangeMask)]| {
                ps.iter().fold(ConfusionCounts::default(), |c, (p, g)| accumulate(c, p, g).unwrap())
            };
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(total(&pairs), total(&shuffled));
        }

        #[test]
        fn inflation_whenever_background_scores_higher(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..5000) {
            let c = ConfusionCounts::new(tp, fp, fn_, tn);
            if binary_f1(&c.swapped()) > binary_f1(&c) {
                prop_assert!(mean_f1_two_class(&c) > binary_f1(&c));
            }
        }
    }
}

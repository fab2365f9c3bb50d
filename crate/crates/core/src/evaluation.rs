//! Polygon matching at an IoU threshold and precision / recall / F1 reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rasterize_pixels, Polygon};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub truth: usize,
    pub iou: f64,
}

/// Outcome of matching one image's proposals against its ground truth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Number of proposed polygons.
    pub m: usize,
    /// Number of ground-truth polygons.
    pub n: usize,
    pub pairs: Vec<MatchedPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub min_area: f64,
}

/// Sorted pixel indices covered by each polygon.
fn footprints(polys: &[Polygon], h: usize, w: usize) -> Vec<Vec<u32>> {
    polys
        .iter()
        .map(|p| {
            let mut px = rasterize_pixels(p, h, w);
            px.sort_unstable();
            px.dedup();
            px
        })
        .collect()
}

fn intersection(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Rasterized IoU of every (pred, truth) pair with nonzero overlap.
pub fn pairwise_iou(pred: &[Polygon], truth: &[Polygon], h: usize, w: usize) -> Vec<MatchedPair> {
    let pp = footprints(pred, h, w);
    let tp = footprints(truth, h, w);
    let bbox = |px: &[u32]| -> Option<(u32, u32, u32, u32)> {
        let (first, last) = (*px.first()?, *px.last()?);
        let (mut c0, mut c1) = (u32::MAX, 0);
        for &p in px {
            c0 = c0.min(p % w as u32);
            c1 = c1.max(p % w as u32);
        }
        Some((first / w as u32, last / w as u32, c0, c1))
    };
    let pb: Vec<_> = pp.iter().map(|p| bbox(p)).collect();
    let tb: Vec<_> = tp.iter().map(|p| bbox(p)).collect();
    let mut out = Vec::new();
    for (i, (a, ab)) in pp.iter().zip(&pb).enumerate() {
        let Some(ab) = ab else { continue };
        for (j, (b, bb)) in tp.iter().zip(&tb).enumerate() {
            let Some(bb) = bb else { continue };
            if ab.1 < bb.0 || bb.1 < ab.0 || ab.3 < bb.2 || bb.3 < ab.2 {
                continue;
            }
            let inter = intersection(a, b);
            if inter > 0 {
                let union = a.len() + b.len() - inter;
                out.push(MatchedPair {
                    pred: i,
                    truth: j,
                    iou: inter as f64 / union as f64,
                });
            }
        }
    }
    out
}

/// One-to-one greedy matching by descending IoU, ties broken by
/// `(truth, pred)` index. Pairs at or above `iou_threshold` are true positives.
pub fn match_polygons(
    pred: &[Polygon],
    truth: &[Polygon],
    height: usize,
    width: usize,
    iou_threshold: f64,
) -> Result<MatchReport> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "IoU threshold {iou_threshold} outside (0, 1]"
        )));
    }
    let mut cands: Vec<MatchedPair> = pairwise_iou(pred, truth, height, width)
        .into_iter()
        .filter(|p| p.iou >= iou_threshold)
        .collect();
    cands.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then(a.truth.cmp(&b.truth))
            .then(a.pred.cmp(&b.pred))
    });
    let mut pred_used = vec![false; pred.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for c in cands {
        if !pred_used[c.pred] && !truth_used[c.truth] {
            pred_used[c.pred] = true;
            truth_used[c.truth] = true;
            pairs.push(c);
        }
    }
    let tp = pairs.len();
    Ok(MatchReport {
        tp,
        fp: pred.len() - tp,
        fn_: truth.len() - tp,
        m: pred.len(),
        n: truth.len(),
        pairs,
    })
}

/// Precision `tp/M`, recall `tp/N`, F1 `2 tp / (M + N)`. An empty
/// denominator gives 0, except that `M = N = 0` scores 1 throughout.
pub fn f1_score(tp: usize, m: usize, n: usize) -> Result<Scores> {
    if tp > m || tp > n {
        return Err(Error::invalid(format!(
            "tp = {tp} exceeds proposals ({m}) or labels ({n})"
        )));
    }
    if m == 0 && n == 0 {
        return Ok(Scores {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            min_area: 0.0,
        });
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Scores {
        precision: ratio(tp, m),
        recall: ratio(tp, n),
        f1: ratio(2 * tp, m + n),
        min_area: 0.0,
    })
}

/// `2 p r / (p + r)`, 0 when both are 0.
pub fn harmonic_f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Pools counts over images, then scores once.
pub fn pool_reports(reports: &[MatchReport], min_area: f64) -> Result<Scores> {
    if reports.is_empty() {
        return Err(Error::invalid("no match reports to pool"));
    }
    let (tp, m, n) = reports
        .iter()
        .fold((0, 0, 0), |(t, m, n), r| (t + r.tp, m + r.m, n + r.n));
    Ok(Scores {
        min_area,
        ..f1_score(tp, m, n)?
    })
}

/// One row of a city score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub city: String,
    pub scores: Scores,
}

pub fn score_report(per_image: &[MatchReport], city: &str, min_area: f64) -> Result<ScoreRow> {
    Ok(ScoreRow {
        city: city.to_string(),
        scores: pool_reports(per_image, min_area)?,
    })
}

pub const SCORE_CSV_HEADER: &str = "City,Precision,Recall,F-score,minArea";

pub fn format_score_csv(rows: &[ScoreRow]) -> String {
    let mut s = String::from(SCORE_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{}",
            r.city, r.scores.precision, r.scores.recall, r.scores.f1, r.scores.min_area
        );
    }
    s
}

pub fn write_score_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    std::fs::write(path, format_score_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Aligned plain-text table.
pub fn format_score_table(rows: &[ScoreRow]) -> String {
    let width = rows.iter().map(|r| r.city.len()).max().unwrap_or(0).max(4);
    let mut s = format!(
        "{:<width$}  {:>9}  {:>6}  {:>7}  {:>7}\n",
        "City", "Precision", "Recall", "F-score", "minArea"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.4}  {:>6.4}  {:>7.4}  {:>7}",
            r.city, r.scores.precision, r.scores.recall, r.scores.f1, r.scores.min_area
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        let s = f1_score(3, 4, 5).unwrap();
        assert!((s.f1 - 6.0 / 9.0).abs() < 1e-15);
        assert_eq!(f1_score(0, 0, 0).unwrap().f1, 1.0);
        let none = f1_score(0, 0, 7).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        assert!(f1_score(3, 2, 5).is_err());
        assert!((harmonic_f1(0.93, 0.842) - 0.8838).abs() < 5e-4);
        assert!((harmonic_f1(0.8277, 0.7031) - 0.7603).abs() < 5e-4);
    }

    #[test]
    fn pooling() {
        let r = |tp, m, n| MatchReport {
            tp,
            fp: m - tp,
            fn_: n - tp,
            m,
            n,
            pairs: vec![],
        };
        let row = score_report(&[r(1, 2, 2), r(3, 3, 4)], "x", 0.0).unwrap();
        assert!((row.scores.f1 - 8.0 / 11.0).abs() < 1e-15);
        assert_eq!(score_report(&[r(2, 2, 2)], "x", 0.0).unwrap().scores.f1, 1.0);
        assert_eq!(score_report(&[r(0, 0, 3), r(0, 0, 2)], "x", 0.0).unwrap().scores.f1, 0.0);
        assert!(score_report(&[], "x", 0.0).is_err());
    }

    #[test]
    fn match_examples() {
        let sq = |x: f64, y: f64| Polygon::rect(x, y, x + 10.0, y + 10.0);
        let truth = vec![sq(0.0, 0.0), sq(20.0, 0.0), sq(0.0, 20.0)];
        let r = match_polygons(&truth, &truth, 40, 40, 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (3, 0, 0));
        let r = match_polygons(&[], &truth, 40, 40, 0.5).unwrap();
        assert_eq!((r.tp, r.fn_), (0, 3));
        // 6 x 10 overlap: IoU 60 / 140
        let shifted = vec![sq(4.0, 0.0)];
        let pairs = pairwise_iou(&shifted, &truth[..1], 40, 40);
        assert!((pairs[0].iou - 60.0 / 140.0).abs() < 1e-15);
        let r = match_polygons(&shifted, &truth[..1], 40, 40, 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 1));
        assert!(match_polygons(&shifted, &truth, 40, 40, 0.0).is_err());
    }

    #[test]
    fn csv_format() {
        let rows = vec![ScoreRow {
            city: "Vegas".into(),
            scores: Scores {
                precision: 0.93,
                recall: 0.842,
                f1: harmonic_f1(0.93, 0.842),
                min_area: 120.0,
            },
        }];
        assert_eq!(
            format_score_csv(&rows),
            "City,Precision,Recall,F-score,minArea\nVegas,0.9300,0.8420,0.8838,120\n"
        );
        assert!(format_score_table(&rows).contains("0.8838"));
    }
}

//! Detection evaluation: IoU, greedy matching, 101-point AP and mean AP over
//! IoU thresholds 0.50:0.05:0.95 with an optional small-object slice.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground truth with area below this many square pixels counts as small.
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bbox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Bbox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite());
        if finite && self.x_max > self.x_min && self.y_max > self.y_min {
            Ok(())
        } else {
            Err(Error::domain("Bbox", format!("degenerate box {self:?}")))
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

pub fn iou(a: &Bbox, b: &Bbox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class_id: u64,
    pub bbox: Bbox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub class_id: u64,
    pub bbox: Bbox,
    pub score: f64,
}

// Flat CSV rows; the csv crate cannot (de)serialize flattened structs.
#[derive(Serialize, Deserialize)]
struct GtRow {
    image_id: u64,
    class_id: u64,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

#[derive(Serialize, Deserialize)]
struct DetRow {
    image_id: u64,
    class_id: u64,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Tp,
    Fp,
    /// Matched only to a ground truth excluded from the evaluated set.
    Ignored,
}

/// Greedy matching for one image and class. `dets` must already be in
/// descending score order. Each detection takes the unused, non-ignored
/// ground truth with the highest IoU ≥ `thresh` (first in input order on
/// ties); failing that, an unused ignored one, which makes it
/// [`Outcome::Ignored`].
pub fn match_detections(dets: &[Bbox], gts: &[Bbox], ignore: &[bool], thresh: f64) -> Result<Vec<Outcome>> {
    if ignore.len() != gts.len() {
        return Err(Error::mismatch("match_detections", &[gts.len()], &[ignore.len()]));
    }
    let mut used = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let mut pick: Option<(usize, f64)> = None;
        for want_ignored in [false, true] {
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || ignore[g] != want_ignored {
                    continue;
                }
                let o = iou(d, gt)?;
                if o >= thresh && pick.map_or(true, |(_, best)| o > best) {
                    pick = Some((g, o));
                }
            }
            if pick.is_some() {
                break;
            }
        }
        out.push(match pick {
            Some((g, _)) => {
                used[g] = true;
                if ignore[g] {
                    Outcome::Ignored
                } else {
                    Outcome::Tp
                }
            }
            None => Outcome::Fp,
        });
    }
    Ok(out)
}

/// 101-point interpolated AP of a score-ordered outcome sequence.
/// `None` when there is neither ground truth nor a counted detection.
pub fn average_precision(outcomes: &[Outcome], n_gt: usize) -> Option<f64> {
    let counted: Vec<bool> = outcomes
        .iter()
        .filter(|o| **o != Outcome::Ignored)
        .map(|o| *o == Outcome::Tp)
        .collect();
    if n_gt == 0 {
        return if counted.is_empty() { None } else { Some(0.0) };
    }
    let mut recall = Vec::with_capacity(counted.len());
    let mut precision = Vec::with_capacity(counted.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in &counted {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // Running maximum from the right gives max precision at recall ≥ r.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        while j < recall.len() && recall[j] < r - 1e-12 {
            j += 1;
        }
        if j < recall.len() {
            sum += precision[j];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeFilter {
    All,
    /// Ground truth with area < 32².
    Small,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    pub filter: SizeFilter,
    pub thresholds: Vec<f64>,
    /// AP per threshold for each class with at least one evaluated ground truth.
    pub per_class: BTreeMap<u64, Vec<f64>>,
    /// Mean over classes at each threshold.
    pub per_threshold: Vec<f64>,
    /// Mean over thresholds; `None` when no class has evaluated ground truth.
    pub mean: Option<f64>,
}

/// Mean AP over IoU thresholds 0.50:0.95, averaged over classes first.
/// Every detection must refer to an image that has ground truth.
pub fn map_evaluate(dets: &[Detection], gts: &[GroundTruth], filter: SizeFilter) -> Result<ApResult> {
    for g in gts {
        g.bbox.validate()?;
    }
    let images: BTreeSet<u64> = gts.iter().map(|g| g.image_id).collect();
    for d in dets {
        d.bbox.validate()?;
        if !images.contains(&d.image_id) {
            return Err(Error::UnknownImage(d.image_id));
        }
    }
    let ignored = |g: &GroundTruth| filter == SizeFilter::Small && g.bbox.area() >= SMALL_AREA;

    // Score order, ties by input position.
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));

    let classes: BTreeSet<u64> = gts.iter().filter(|g| !ignored(g)).map(|g| g.class_id).collect();
    let thresholds = iou_thresholds();
    let mut per_class = BTreeMap::new();
    for &class in &classes {
        let n_gt = gts.iter().filter(|g| g.class_id == class && !ignored(g)).count();
        let mut aps = Vec::with_capacity(thresholds.len());
        for &t in &thresholds {
            let mut outcome = vec![Outcome::Fp; dets.len()];
            for &img in &images {
                let di: Vec<usize> = order
                    .iter()
                    .copied()
                    .filter(|&i| dets[i].class_id == class && dets[i].image_id == img)
                    .collect();
                let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class && g.image_id == img).collect();
                let boxes: Vec<Bbox> = di.iter().map(|&i| dets[i].bbox).collect();
                let gb: Vec<Bbox> = g.iter().map(|g| g.bbox).collect();
                let ig: Vec<bool> = g.iter().map(|g| ignored(g)).collect();
                for (k, o) in match_detections(&boxes, &gb, &ig, t)?.into_iter().enumerate() {
                    outcome[di[k]] = o;
                }
            }
            let seq: Vec<Outcome> = order
                .iter()
                .filter(|&&i| dets[i].class_id == class)
                .map(|&i| outcome[i])
                .collect();
            aps.push(average_precision(&seq, n_gt).expect("class has ground truth"));
        }
        per_class.insert(class, aps);
    }
    let per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|k| per_class.values().map(|v| v[k]).sum::<f64>() / per_class.len().max(1) as f64)
        .collect();
    let mean = (!per_class.is_empty()).then(|| per_threshold.iter().sum::<f64>() / per_threshold.len() as f64);
    let per_threshold = if per_class.is_empty() { Vec::new() } else { per_threshold };
    Ok(ApResult {
        filter,
        thresholds,
        per_class,
        per_threshold,
        mean,
    })
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Csv(format!("{}: {e}", path.display()))))
        .collect()
}

/// `image_id,class_id,x_min,y_min,x_max,y_max,score` with a header row.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    read_rows::<DetRow>(path)?
        .into_iter()
        .map(|r| {
            if !r.score.is_finite() {
                return Err(Error::Csv(format!("{}: non-finite score", path.display())));
            }
            Ok(Detection {
                image_id: r.image_id,
                class_id: r.class_id,
                bbox: Bbox::new(r.x_min, r.y_min, r.x_max, r.y_max)?,
                score: r.score,
            })
        })
        .collect()
}

/// `image_id,class_id,x_min,y_min,x_max,y_max` with a header row.
pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    read_rows::<GtRow>(path)?
        .into_iter()
        .map(|r| {
            Ok(GroundTruth {
                image_id: r.image_id,
                class_id: r.class_id,
                bbox: Bbox::new(r.x_min, r.y_min, r.x_max, r.y_max)?,
            })
        })
        .collect()
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let rows: Vec<DetRow> = dets
        .iter()
        .map(|d| DetRow {
            image_id: d.image_id,
            class_id: d.class_id,
            x_min: d.bbox.x_min,
            y_min: d.bbox.y_min,
            x_max: d.bbox.x_max,
            y_max: d.bbox.y_max,
            score: d.score,
        })
        .collect();
    write_rows(path, &rows)
}

pub fn write_ground_truth(path: &Path, gts: &[GroundTruth]) -> Result<()> {
    let rows: Vec<GtRow> = gts
        .iter()
        .map(|g| GtRow {
            image_id: g.image_id,
            class_id: g.class_id,
            x_min: g.bbox.x_min,
            y_min: g.bbox.y_min,
            x_max: g.bbox.x_max,
            y_max: g.bbox.y_max,
        })
        .collect();
    write_rows(path, &rows)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> Bbox {
        Bbox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(img: u64, class: u64, bb: Bbox, score: f64) -> Detection {
        Detection {
            image_id: img,
            class_id: class,
            bbox: bb,
            score,
        }
    }

    fn gt(img: u64, class: u64, bb: Bbox) -> GroundTruth {
        GroundTruth {
            image_id: img,
            class_id: class,
            bbox: bb,
        }
    }

    #[test]
    fn iou_fixtures() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        assert!(Bbox::new(1.0, 0.0, 1.0, 2.0).is_err());
    }

    /// Box overlapping `(0,0,10,10)` with IoU 0.6: same height, width w
    /// offset so that inter/union = 0.6.
    fn iou_06() -> Bbox {
        // (0,0,10,10) vs (0,0,6,10): inter 60, union 100.
        b(0.0, 0.0, 6.0, 10.0)
    }

    #[test]
    fn matching_fixtures() {
        let g = [b(0.0, 0.0, 10.0, 10.0)];
        assert_eq!(match_detections(&[iou_06()], &g, &[false], 0.5).unwrap(), vec![Outcome::Tp]);
        assert_eq!(
            match_detections(&[g[0], iou_06()], &g, &[false], 0.5).unwrap(),
            vec![Outcome::Tp, Outcome::Fp]
        );
        // (0,0,10,10) vs (0,0,4.5,10): IoU 0.45.
        assert_eq!(match_detections(&[b(0.0, 0.0, 4.5, 10.0)], &g, &[false], 0.5).unwrap(), vec![Outcome::Fp]);
        assert_eq!(match_detections(&[g[0]], &g, &[true], 0.5).unwrap(), vec![Outcome::Ignored]);
    }

    #[test]
    fn matching_prefers_evaluated_ground_truth() {
        let gts = [b(0.0, 0.0, 10.0, 10.0), b(0.0, 0.0, 6.0, 10.0)];
        let out = match_detections(&[b(0.0, 0.0, 10.0, 10.0)], &gts, &[true, false], 0.5).unwrap();
        assert_eq!(out, vec![Outcome::Tp]);
    }

    #[test]
    fn ap_fixtures() {
        use Outcome::*;
        assert_eq!(average_precision(&[Tp], 1), Some(1.0));
        assert_eq!(average_precision(&[Fp, Tp], 1), Some(0.5));
        assert_eq!(average_precision(&[Fp, Fp], 3), Some(0.0));
        assert_eq!(average_precision(&[], 2), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[Ignored, Tp], 1), Some(1.0));
    }

    #[test]
    fn single_detection_fixture_is_point_three() {
        let r = map_evaluate(
            &[det(0, 0, iou_06(), 0.9)],
            &[gt(0, 0, b(0.0, 0.0, 10.0, 10.0))],
            SizeFilter::All,
        )
        .unwrap();
        let want = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(r.per_threshold, want);
        assert!((r.mean.unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn perfect_detections_and_unknown_images() {
        let gts = vec![gt(0, 1, b(0.0, 0.0, 5.0, 5.0)), gt(1, 2, b(3.0, 3.0, 50.0, 60.0))];
        let dets: Vec<Detection> = gts.iter().map(|g| det(g.image_id, g.class_id, g.bbox, 0.5)).collect();
        assert_eq!(map_evaluate(&dets, &gts, SizeFilter::All).unwrap().mean, Some(1.0));
        let stray = vec![det(7, 1, b(0.0, 0.0, 1.0, 1.0), 0.3)];
        assert!(matches!(map_evaluate(&stray, &gts, SizeFilter::All), Err(Error::UnknownImage(7))));
    }

    #[test]
    fn small_slice_ignores_large_matches_but_counts_strays() {
        let gts = vec![gt(0, 0, b(0.0, 0.0, 10.0, 10.0)), gt(0, 0, b(100.0, 100.0, 200.0, 200.0))];
        // Large-object hit is ignored: AP stays perfect.
        let dets = vec![
            det(0, 0, b(100.0, 100.0, 200.0, 200.0), 0.9),
            det(0, 0, b(0.0, 0.0, 10.0, 10.0), 0.8),
        ];
        assert_eq!(map_evaluate(&dets, &gts, SizeFilter::Small).unwrap().mean, Some(1.0));
        // A stray above the true positive halves precision at full recall.
        let mut with_stray = dets.clone();
        with_stray.push(det(0, 0, b(300.0, 300.0, 310.0, 310.0), 0.95));
        assert_eq!(map_evaluate(&with_stray, &gts, SizeFilter::Small).unwrap().mean, Some(0.5));
        // Only large objects: nothing to evaluate.
        let big = vec![gts[1]];
        assert_eq!(map_evaluate(&[], &big, SizeFilter::Small).unwrap().mean, None);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = vec![det(3, 1, b(1.0, 2.0, 3.5, 4.0), 0.25)];
        let g = vec![gt(3, 1, b(1.0, 2.0, 3.0, 4.0))];
        write_detections(&dir.path().join("d.csv"), &d).unwrap();
        write_ground_truth(&dir.path().join("g.csv"), &g).unwrap();
        let text = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
        assert!(text.starts_with("image_id,class_id,x_min,y_min,x_max,y_max,score"));
        assert_eq!(read_detections(&dir.path().join("d.csv")).unwrap(), d);
        assert_eq!(read_ground_truth(&dir.path().join("g.csv")).unwrap(), g);
        std::fs::write(dir.path().join("bad.csv"), "image_id,class_id\n1,x\n").unwrap();
        assert!(matches!(read_ground_truth(&dir.path().join("bad.csv")), Err(Error::Csv(_))));
    }

    // ---- brute-force oracle ----

    /// Preference key of one detection's assignment: evaluated match beats
    /// ignored match beats none, then higher IoU, then lower GT index.
    fn key(choice: Option<usize>, d: &Bbox, gts: &[Bbox], ignore: &[bool]) -> (u8, f64, i64) {
        match choice {
            None => (0, 0.0, 0),
            Some(g) => (if ignore[g] { 1 } else { 2 }, iou(d, &gts[g]).unwrap(), -(g as i64)),
        }
    }

    /// Enumerates every injective assignment of detections to ground truths
    /// at IoU ≥ `t` and keeps the lexicographically best in score order.
    fn oracle_match(dets: &[Bbox], gts: &[Bbox], ignore: &[bool], t: f64) -> Vec<Outcome> {
        fn rec(
            i: usize,
            dets: &[Bbox],
            gts: &[Bbox],
            ignore: &[bool],
            t: f64,
            used: &mut Vec<bool>,
            cur: &mut Vec<Option<usize>>,
            best: &mut Option<(Vec<(u8, f64, i64)>, Vec<Option<usize>>)>,
        ) {
            if i == dets.len() {
                let k: Vec<_> = cur.iter().zip(dets).map(|(c, d)| key(*c, d, gts, ignore)).collect();
                let better = match best {
                    None => true,
                    Some((bk, _)) => k.partial_cmp(bk) == Some(std::cmp::Ordering::Greater),
                };
                if better {
                    *best = Some((k, cur.clone()));
                }
                return;
            }
            cur.push(None);
            rec(i + 1, dets, gts, ignore, t, used, cur, best);
            cur.pop();
            for g in 0..gts.len() {
                if !used[g] && iou(&dets[i], &gts[g]).unwrap() >= t {
                    used[g] = true;
                    cur.push(Some(g));
                    rec(i + 1, dets, gts, ignore, t, used, cur, best);
                    cur.pop();
                    used[g] = false;
                }
            }
        }
        let mut best = None;
        rec(0, dets, gts, ignore, t, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
        best.unwrap()
            .1
            .into_iter()
            .map(|c| match c {
                None => Outcome::Fp,
                Some(g) if ignore[g] => Outcome::Ignored,
                Some(_) => Outcome::Tp,
            })
            .collect()
    }

    /// AP straight from the definition: for each recall level, the best
    /// precision over all cut-offs reaching it.
    fn oracle_ap(seq: &[Outcome], n_gt: usize) -> f64 {
        let counted: Vec<bool> = seq.iter().filter(|o| **o != Outcome::Ignored).map(|o| *o == Outcome::Tp).collect();
        let mut total = 0.0;
        for k in 0..=100 {
            let r = k as f64 / 100.0;
            let mut best = 0.0f64;
            for cut in 1..=counted.len() {
                let tp = counted[..cut].iter().filter(|h| **h).count();
                if tp as f64 / n_gt as f64 >= r - 1e-12 {
                    best = best.max(tp as f64 / cut as f64);
                }
            }
            total += best;
        }
        total / 101.0
    }

    fn oracle_map(dets: &[Detection], gts: &[GroundTruth], filter: SizeFilter) -> Option<f64> {
        let ignored = |g: &GroundTruth| filter == SizeFilter::Small && g.bbox.area() >= SMALL_AREA;
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
        let classes: BTreeSet<u64> = gts.iter().filter(|g| !ignored(g)).map(|g| g.class_id).collect();
        if classes.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for t in iou_thresholds() {
            let mut class_sum = 0.0;
            for &c in &classes {
                let mut outcome = BTreeMap::new();
                let images: BTreeSet<u64> = gts.iter().map(|g| g.image_id).collect();
                for img in images {
                    let di: Vec<usize> =
                        order.iter().copied().filter(|&i| dets[i].class_id == c && dets[i].image_id == img).collect();
                    let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == c && g.image_id == img).collect();
                    let o = oracle_match(
                        &di.iter().map(|&i| dets[i].bbox).collect::<Vec<_>>(),
                        &g.iter().map(|g| g.bbox).collect::<Vec<_>>(),
                        &g.iter().map(|g| ignored(g)).collect::<Vec<_>>(),
                        t,
                    );
                    for (k, oc) in o.into_iter().enumerate() {
                        outcome.insert(di[k], oc);
                    }
                }
                let seq: Vec<Outcome> = order.iter().filter(|&&i| dets[i].class_id == c).map(|i| outcome[i]).collect();
                let n_gt = gts.iter().filter(|g| g.class_id == c && !ignored(g)).count();
                class_sum += oracle_ap(&seq, n_gt);
            }
            total += class_sum / classes.len() as f64;
        }
        Some(total / 10.0)
    }

    fn random_box(rng: &mut impl rand::Rng) -> Bbox {
        // Coarse grid so exact IoU ties and near-threshold overlaps occur;
        // sizes straddle the small-object bound.
        let x0 = rng.gen_range(0..8) as f64 * 8.0;
        let y0 = rng.gen_range(0..8) as f64 * 8.0;
        let w = rng.gen_range(1..6) as f64 * 10.0;
        let h = rng.gen_range(1..6) as f64 * 10.0;
        b(x0, y0, x0 + w, y0 + h)
    }

    /// Five images, two classes, up to four boxes of each kind per image.
    pub(crate) fn random_instance(seed: u64) -> (Vec<Detection>, Vec<GroundTruth>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for img in 0..5u64 {
            for _ in 0..rng.gen_range(1..=4) {
                gts.push(gt(img, rng.gen_range(0..2), random_box(&mut rng)));
            }
            for _ in 0..rng.gen_range(0..=4) {
                let class = rng.gen_range(0..2);
                let bb = if rng.gen_bool(0.6) {
                    let g = gts[rng.gen_range(0..gts.len())].bbox;
                    let j = rng.gen_range(-3..=3) as f64 * 2.0;
                    b(g.x_min + j, g.y_min, g.x_max + j, g.y_max - j.abs())
                } else {
                    random_box(&mut rng)
                };
                // Few score levels so ties exercise input-order breaking.
                dets.push(det(img, class, bb, rng.gen_range(1..6) as f64 / 5.0));
            }
        }
        (dets, gts)
    }

    #[test]
    fn matches_brute_force_oracle() {
        for seed in 0..100 {
            let (dets, gts) = random_instance(seed);
            for filter in [SizeFilter::All, SizeFilter::Small] {
                let got = map_evaluate(&dets, &gts, filter).unwrap().mean;
                let want = oracle_map(&dets, &gts, filter);
                match (got, want) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "seed {seed} {filter:?}: {a} vs {b}"),
                    (a, b) => assert_eq!(a, b, "seed {seed}"),
                }
            }
        }
    }

    proptest! {
        #[test]
        fn ap_ignores_monotone_score_transforms(seed in 0u64..1000, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let (dets, gts) = random_instance(seed);
            let moved: Vec<Detection> = dets.iter().map(|d| Detection { score: (d.score * scale + shift).exp(), ..*d }).collect();
            let a = map_evaluate(&dets, &gts, SizeFilter::All).unwrap().mean;
            let b = map_evaluate(&moved, &gts, SizeFilter::All).unwrap().mean;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn duplicates_never_raise_ap(seed in 0u64..1000, pick in 0usize..100) {
            let (mut dets, gts) = random_instance(seed);
            if !dets.is_empty() {
                let before = map_evaluate(&dets, &gts, SizeFilter::All).unwrap().mean.unwrap();
                let mut d = dets[pick % dets.len()];
                d.score *= 0.999;
                dets.push(d);
                let after = map_evaluate(&dets, &gts, SizeFilter::All).unwrap().mean.unwrap();
                prop_assert!(after <= before + 1e-12);
            }
        }
    }
}

//! Region similarity (J), contour accuracy (F) and their aggregation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, LabelMap, ObjectId};

/// Intersection over union; 1 when both masks are empty.
pub fn jaccard(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    pred.check_same_dims(truth, "jaccard")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `ceil(0.8%)` of the image diagonal.
pub fn default_tolerance(height: usize, width: usize) -> f64 {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil()
}

const FAR: f64 = 1e20;

/// Exact squared Euclidean distance transform of a 1-D sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] = -inf, so this stops at k = 0 at the latest
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest set pixel of `sites`
/// (columns pass, then rows pass). Pixels are at `FAR` when `sites` is empty.
pub fn squared_distance_transform(sites: &BinaryMask) -> Vec<f64> {
    let (h, w) = sites.dims();
    let mut grid: Vec<f64> = sites.data().iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Fraction of `from`'s set pixels lying within `tolerance` of a set pixel
/// of `to`, given `to`'s squared distance map.
fn matched_fraction(from: &BinaryMask, to_dist2: &[f64], tolerance: f64) -> f64 {
    let total = from.count();
    let hit = from
        .data()
        .iter()
        .zip(to_dist2)
        .filter(|(&b, &d)| b && d <= tolerance * tolerance)
        .count();
    hit as f64 / total as f64
}

/// Boundary F-measure with a Euclidean pixel tolerance.
pub fn boundary_f(pred: &BinaryMask, truth: &BinaryMask, tolerance: f64) -> Result<f64> {
    pred.check_same_dims(truth, "boundary_f")?;
    if !(tolerance >= 0.0) {
        return Err(Error::contract("boundary tolerance must be non-negative"));
    }
    let (bp, bt) = (pred.inner_boundary(), truth.inner_boundary());
    match (bp.is_empty(), bt.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let precision = matched_fraction(&bp, &squared_distance_transform(&bt), tolerance);
    let recall = matched_fraction(&bt, &squared_distance_transform(&bp), tolerance);
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

pub fn jf_mean(j: f64, f: f64) -> f64 {
    (j + f) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
}

impl Score {
    pub fn jf(&self) -> f64 {
        jf_mean(self.j, self.f)
    }

    fn mean<'a>(scores: impl IntoIterator<Item = &'a Score>) -> Option<Score> {
        let (mut j, mut f, mut n) = (0.0, 0.0, 0usize);
        for s in scores {
            j += s.j;
            f += s.f;
            n += 1;
        }
        (n > 0).then(|| Score {
            j: j / n as f64,
            f: f / n as f64,
        })
    }
}

/// Per-frame scores of every object in one sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SequenceScores {
    pub objects: BTreeMap<ObjectId, Vec<Score>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalScore {
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JF")]
    pub jf: f64,
}

impl From<Score> for GlobalScore {
    fn from(s: Score) -> Self {
        Self {
            j: s.j,
            f: s.f,
            jf: s.jf(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub per_object: BTreeMap<String, Score>,
    pub mean: GlobalScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sequence: BTreeMap<String, SequenceReport>,
    pub global: GlobalScore,
}

/// Means over frames per object, then over objects, then over sequences.
pub fn aggregate(results: &BTreeMap<String, SequenceScores>) -> Result<EvalReport> {
    let mut per_sequence = BTreeMap::new();
    let mut sequence_means = Vec::new();
    for (name, seq) in results {
        let per_object: BTreeMap<String, Score> = seq
            .objects
            .iter()
            .filter_map(|(id, frames)| Score::mean(frames).map(|s| (id.to_string(), s)))
            .collect();
        let Some(mean) = Score::mean(per_object.values()) else {
            continue;
        };
        sequence_means.push(mean);
        per_sequence.insert(
            name.clone(),
            SequenceReport {
                per_object,
                mean: mean.into(),
            },
        );
    }
    let global = Score::mean(&sequence_means)
        .ok_or_else(|| Error::contract("nothing to aggregate: no scored frames"))?;
    Ok(EvalReport {
        per_sequence,
        global: global.into(),
    })
}

/// Scores a predicted sequence against ground truth. Objects are those
/// annotated in the first truth frame; the first frame itself is given to
/// the tracker and is skipped unless the sequence has a single frame.
pub fn score_sequence(pred: &[LabelMap], truth: &[LabelMap], tolerance: Option<f64>) -> Result<SequenceScores> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::dim(
            "score_sequence",
            format!("{} predicted vs {} truth frames", pred.len(), truth.len()),
        ));
    }
    let ids = truth[0].object_ids();
    let start = usize::from(truth.len() > 1);
    let per_frame = (start..truth.len())
        .into_par_iter()
        .map(|t| {
            let (p, g) = (&pred[t], &truth[t]);
            if p.dims() != g.dims() {
                return Err(Error::dim(
                    "score_sequence",
                    format!("frame {t}: {:?} vs {:?}", p.dims(), g.dims()),
                ));
            }
            let tol = tolerance.unwrap_or_else(|| default_tolerance(g.height(), g.width()));
            ids.iter()
                .map(|&id| {
                    let (pm, gm) = (p.mask(id), g.mask(id));
                    Ok(Score {
                        j: jaccard(&pm, &gm)?,
                        f: boundary_f(&pm, &gm, tol)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut objects: BTreeMap<ObjectId, Vec<Score>> = ids.iter().map(|&id| (id, Vec::new())).collect();
    for frame in per_frame {
        for (&id, s) in ids.iter().zip(frame) {
            objects.get_mut(&id).expect("id registered above").push(s);
        }
    }
    Ok(SequenceScores { objects })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, size: usize, y0: usize, x0: usize) -> BinaryMask {
        BinaryMask::from_fn(n, n, |y, x| (y0..y0 + size).contains(&y) && (x0..x0 + size).contains(&x))
    }

    fn brute_dist2(sites: &BinaryMask) -> Vec<f64> {
        let (h, w) = sites.dims();
        let pts: Vec<(usize, usize)> = (0..h * w).filter(|&i| sites.data()[i]).map(|i| (i / w, i % w)).collect();
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                pts.iter()
                    .map(|&(py, px)| (py as f64 - y).powi(2) + (px as f64 - x).powi(2))
                    .fold(FAR, f64::min)
            })
            .collect()
    }

    #[test]
    fn jaccard_examples() {
        let a = square(20, 10, 2, 2);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &square(20, 4, 15, 15)).unwrap(), 0.0);
        assert_eq!(jaccard(&a, &a.shifted(5, 0)).unwrap(), 50.0 / 150.0);
        let e = BinaryMask::empty(4, 4);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
        assert!(jaccard(&e, &BinaryMask::empty(4, 5)).is_err());
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = 12345u64;
        for _ in 0..20 {
            let bits = (0..13 * 9)
                .map(|_| {
                    rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (rng >> 33) % 11 == 0
                })
                .collect();
            let m = BinaryMask::new(13, 9, bits).unwrap();
            let fast = squared_distance_transform(&m);
            let slow = brute_dist2(&m);
            if m.is_empty() {
                continue;
            }
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn boundary_examples() {
        let a = square(20, 10, 2, 2);
        assert_eq!(boundary_f(&a, &a, 0.0).unwrap(), 1.0);
        assert_eq!(boundary_f(&BinaryMask::empty(20, 20), &a, 2.0).unwrap(), 0.0);
        assert_eq!(boundary_f(&BinaryMask::empty(20, 20), &BinaryMask::empty(20, 20), 2.0).unwrap(), 1.0);
        let b = a.shifted(1, 0);
        assert_eq!(boundary_f(&b, &a, 2.0).unwrap(), 1.0);

        // tolerance 0: only coincident boundary pixels match
        let (bp, bt) = (b.inner_boundary(), a.inner_boundary());
        let hits = |from: &BinaryMask, to: &BinaryMask| {
            let d = brute_dist2(to);
            (0..400).filter(|&i| from.data()[i] && d[i] == 0.0).count() as f64 / from.count() as f64
        };
        let (p, r) = (hits(&bp, &bt), hits(&bt, &bp));
        let want = 2.0 * p * r / (p + r);
        assert_eq!(boundary_f(&b, &a, 0.0).unwrap(), want);
        assert!(boundary_f(&a, &a, -1.0).is_err());
    }

    #[test]
    fn jf_examples() {
        assert_eq!(jf_mean(1.0, 1.0), 1.0);
        assert_eq!(jf_mean(0.0, 1.0), 0.5);
        assert!((jf_mean(0.804, 0.865) - 0.8345).abs() < 1e-12);
    }

    #[test]
    fn tolerance_default() {
        assert_eq!(default_tolerance(64, 64), 1.0);
        assert_eq!(default_tolerance(480, 854), 8.0);
    }

    fn seq(objects: &[(ObjectId, &[(f64, f64)])]) -> SequenceScores {
        SequenceScores {
            objects: objects
                .iter()
                .map(|(id, s)| (*id, s.iter().map(|&(j, f)| Score { j, f }).collect()))
                .collect(),
        }
    }

    #[test]
    fn aggregate_examples() {
        let one = BTreeMap::from([("a".to_string(), seq(&[(1, &[(0.3, 0.7)])]))]);
        let r = aggregate(&one).unwrap();
        assert_eq!(r.global, GlobalScore { j: 0.3, f: 0.7, jf: 0.5 });

        let two = BTreeMap::from([("a".to_string(), seq(&[(1, &[(0.2, 0.0)]), (2, &[(0.8, 0.0)])]))]);
        assert!((aggregate(&two).unwrap().global.j - 0.5).abs() < 1e-12);

        assert!(aggregate(&BTreeMap::new()).is_err());
    }

    #[test]
    fn aggregate_nested_matches_flat_recomputation() {
        let a: &[(f64, f64)] = &[(0.1, 0.2), (0.5, 0.4), (0.9, 0.3)];
        let b: &[(f64, f64)] = &[(0.6, 0.6)];
        let c: &[(f64, f64)] = &[(0.25, 1.0), (0.75, 0.0)];
        let data = BTreeMap::from([
            ("s1".to_string(), seq(&[(1, a), (3, b)])),
            ("s2".to_string(), seq(&[(2, c)])),
        ]);
        let r = aggregate(&data).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let obj = |s: &[(f64, f64)]| mean(&s.iter().map(|p| p.0).collect::<Vec<_>>());
        let s1 = mean(&[obj(a), obj(b)]);
        let s2 = obj(c);
        assert!((r.global.j - mean(&[s1, s2])).abs() < 1e-12);
        assert!((r.per_sequence["s1"].mean.j - s1).abs() < 1e-12);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["global"]["JF"].is_number());
        assert!(json["per_sequence"]["s1"]["per_object"]["3"]["J"].is_number());
    }

    #[test]
    fn scores_sequence_skipping_first_frame() {
        let truth = LabelMap::from_masks(16, 16, &BTreeMap::from([(1, square(16, 6, 2, 2))])).unwrap();
        let wrong = LabelMap::background(16, 16);
        let s = score_sequence(&[truth.clone(), truth.clone(), wrong], &[truth.clone(), truth.clone(), truth.clone()], None).unwrap();
        let v = &s.objects[&1];
        assert_eq!(v.len(), 2);
        assert_eq!((v[0].j, v[1].j), (1.0, 0.0));
        let single = score_sequence(&[truth.clone()], &[truth], None).unwrap();
        assert_eq!(single.objects[&1].len(), 1);
    }
}

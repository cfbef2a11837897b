use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, ClassMap};
use crate::error::{ensure, Result};

pub const ABSENT: &str = "absent";
pub const ONE_SIDED_EMPTY: &str = "one-sided-empty";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub dice: f64,
    pub iou: f64,
    /// `None` when one side is empty.
    pub hausdorff: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub dice: f64,
    pub iou: f64,
    pub hausdorff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub class_id: ClassId,
    /// `"all"` or the single excluded metric.
    pub metric: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetricReport {
    pub per_class: BTreeMap<ClassId, ClassScores>,
    #[serde(rename = "macro")]
    pub macro_scores: MacroScores,
    pub excluded_classes: Vec<Exclusion>,
    /// Number of images aggregated into this report.
    pub n_images: usize,
}

/// Mask pixels with a 4-neighbour outside the mask; pixels outside the
/// frame count as outside.
pub fn boundary_pixels(mask: &Array2<bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[[y as usize, x as usize]]
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !(inside(yi - 1, xi)
                && inside(yi + 1, xi)
                && inside(yi, xi - 1)
                && inside(yi, xi + 1))
            {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exact 1-D squared distance transform by lower envelope of parabolas.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        match first {
            None => {
                first = Some(q);
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                k = 0;
            }
            Some(_) => loop {
                let p = v[k];
                let s = ((fq + (q * q) as f64) - (f[p] + (p * p) as f64))
                    / (2.0 * (q as f64 - p as f64));
                if s <= z[k] {
                    k -= 1;
                    continue;
                }
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            },
        }
    }
    if first.is_none() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Squared Euclidean distance of every pixel to the nearest point of `pts`.
fn squared_distance_map(pts: &[(usize, usize)], h: usize, w: usize) -> Array2<f64> {
    let mut g = Array2::from_elem((h, w), f64::INFINITY);
    for &(y, x) in pts {
        g[[y, x]] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = g[[y, x]];
        }
        edt_1d(&col, &mut tmp);
        for y in 0..h {
            g[[y, x]] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    let mut tmp = vec![0.0; w];
    for y in 0..h {
        for x in 0..w {
            row[x] = g[[y, x]];
        }
        edt_1d(&row, &mut tmp);
        for x in 0..w {
            g[[y, x]] = tmp[x];
        }
    }
    g
}

/// `max_{a∈A} min_{b∈B} ‖a − b‖` on an `h × w` grid.
pub fn directed_hausdorff(a: &[(usize, usize)], b: &[(usize, usize)], h: usize, w: usize) -> f64 {
    let d = squared_distance_map(b, h, w);
    a.iter().map(|&(y, x)| d[[y, x]]).fold(0.0, f64::max).sqrt()
}

/// Symmetric Hausdorff distance between the boundaries of two nonempty
/// masks, in pixels.
pub fn hausdorff(p: &Array2<bool>, g: &Array2<bool>) -> Option<f64> {
    let (h, w) = p.dim();
    let bp = boundary_pixels(p);
    let bg = boundary_pixels(g);
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    Some(directed_hausdorff(&bp, &bg, h, w).max(directed_hausdorff(&bg, &bp, h, w)))
}

/// Dice, IoU and boundary Hausdorff per non-background class that occurs
/// in `pred` or `gt`.
pub fn seg_metrics(
    pred: &Array2<ClassId>,
    gt: &Array2<ClassId>,
    class_map: &ClassMap,
) -> Result<SegMetricReport> {
    ensure!(
        pred.dim() == gt.dim(),
        "prediction {:?} and ground truth {:?} differ in size",
        pred.dim(),
        gt.dim()
    );
    for &v in pred.iter().chain(gt.iter()) {
        ensure!(
            class_map.is_valid_label(v),
            "label value {v} is not in the class map"
        );
    }
    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    for c in class_map.class_ids() {
        let pm = pred.mapv(|v| v == c);
        let gm = gt.mapv(|v| v == c);
        let np = pm.iter().filter(|&&b| b).count();
        let ng = gm.iter().filter(|&&b| b).count();
        if np == 0 && ng == 0 {
            excluded.push(Exclusion {
                class_id: c,
                metric: "all".into(),
                reason: ABSENT.into(),
            });
            continue;
        }
        let inter = pm.iter().zip(&gm).filter(|(&a, &b)| a && b).count();
        let union = np + ng - inter;
        let scores = ClassScores {
            dice: 2.0 * inter as f64 / (np + ng) as f64,
            iou: inter as f64 / union as f64,
            hausdorff: hausdorff(&pm, &gm),
        };
        if scores.hausdorff.is_none() {
            excluded.push(Exclusion {
                class_id: c,
                metric: "hausdorff".into(),
                reason: ONE_SIDED_EMPTY.into(),
            });
        }
        per_class.insert(c, scores);
    }
    Ok(SegMetricReport {
        macro_scores: macro_of(&per_class),
        per_class,
        excluded_classes: excluded,
        n_images: 1,
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn macro_of(per_class: &BTreeMap<ClassId, ClassScores>) -> MacroScores {
    let d: Vec<f64> = per_class.values().map(|s| s.dice).collect();
    let i: Vec<f64> = per_class.values().map(|s| s.iou).collect();
    let h: Vec<f64> = per_class.values().filter_map(|s| s.hausdorff).collect();
    MacroScores {
        dice: mean(&d).unwrap_or(0.0),
        iou: mean(&i).unwrap_or(0.0),
        hausdorff: mean(&h),
    }
}

/// Per class, the mean of each metric over the images where it was
/// computed; the macro scores are the unweighted means of those.
pub fn aggregate_reports(reports: &[SegMetricReport]) -> Result<SegMetricReport> {
    ensure!(!reports.is_empty(), "nothing to aggregate");
    let mut acc: BTreeMap<ClassId, (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut excluded = Vec::new();
    for r in reports {
        for (&c, s) in &r.per_class {
            let e = acc.entry(c).or_default();
            e.0.push(s.dice);
            e.1.push(s.iou);
            e.2.extend(s.hausdorff);
        }
    }
    let mut per_class = BTreeMap::new();
    for (c, (d, i, h)) in acc {
        let hd = mean(&h);
        if hd.is_none() {
            excluded.push(Exclusion {
                class_id: c,
                metric: "hausdorff".into(),
                reason: ONE_SIDED_EMPTY.into(),
            });
        }
        per_class.insert(
            c,
            ClassScores {
                dice: mean(&d).unwrap(),
                iou: mean(&i).unwrap(),
                hausdorff: hd,
            },
        );
    }
    let mut absent: Vec<ClassId> = reports
        .iter()
        .flat_map(|r| {
            r.excluded_classes
                .iter()
                .filter(|e| e.reason == ABSENT)
                .map(|e| e.class_id)
        })
        .filter(|c| !per_class.contains_key(c))
        .collect();
    absent.sort_unstable();
    absent.dedup();
    for c in absent {
        excluded.push(Exclusion {
            class_id: c,
            metric: "all".into(),
            reason: ABSENT.into(),
        });
    }
    excluded.sort_by_key(|e| e.class_id);
    Ok(SegMetricReport {
        macro_scores: macro_of(&per_class),
        per_class,
        excluded_classes: excluded,
        n_images: reports.iter().map(|r| r.n_images).sum(),
    })
}

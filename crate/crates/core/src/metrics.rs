//! Saliency metrics: KL divergence, histogram-intersection similarity and
//! Judd's ROC area, plus evaluation at a reduced resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmaps::{round_half_down, sum_normalize, Heatmap, Point};

/// Floor on predicted mass inside the KLD logarithm.
pub const KLD_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kld: f64,
    pub sim: f64,
    pub auc_j: f64,
    pub resolution: (usize, usize),
}

impl MetricReport {
    /// Arithmetic mean, accumulated in slice order.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let (mut kld, mut sim, mut auc) = (0.0, 0.0, 0.0);
        for r in reports {
            kld += r.kld;
            sim += r.sim;
            auc += r.auc_j;
        }
        Some(MetricReport {
            kld: kld / n,
            sim: sim / n,
            auc_j: auc / n,
            resolution: first.resolution,
        })
    }
}

fn same_shape(a: &Heatmap, b: &Heatmap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "ground truth {:?} vs prediction {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `Σ_{gt>0} gt · ln(gt / max(pred, ε))` over two distributions.
pub fn kld(gt: &Heatmap, pred: &Heatmap) -> Result<f64> {
    same_shape(gt, pred)?;
    Ok(gt
        .values()
        .iter()
        .zip(pred.values())
        .filter(|(g, _)| **g > 0.0)
        .map(|(g, p)| g * (g / p.max(KLD_EPS)).ln())
        .sum())
}

/// `Σ min(gt, pred)`.
pub fn sim(gt: &Heatmap, pred: &Heatmap) -> Result<f64> {
    same_shape(gt, pred)?;
    Ok(gt.values().iter().zip(pred.values()).map(|(g, p)| g.min(*p)).sum())
}

/// Unique flat pixel indices hit by the points, in first-seen order.
pub fn point_pixels(points: &[Point], height: usize, width: usize) -> Vec<usize> {
    let mut seen = vec![false; height * width];
    let mut out = Vec::new();
    for &p in points {
        let (y, x) = crate::heatmaps::point_pixel(p, height, width);
        let i = y * width + x;
        if !seen[i] {
            seen[i] = true;
            out.push(i);
        }
    }
    out
}

/// Judd ROC area for a set of positive pixels (flat indices, no duplicates).
///
/// Thresholds are the distinct positive values; a pixel counts as salient at
/// threshold `t` when its value is `>= t`. The curve runs from (0,0) to (1,1)
/// and is integrated with the trapezoid rule.
pub fn auc_judd_pixels(positives: &[usize], pred: &[f64]) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::NoPoints);
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prediction"));
    }
    let mut is_pos = vec![false; pred.len()];
    for &i in positives {
        is_pos[i] = true;
    }
    let mut pos: Vec<f64> = positives.iter().map(|&i| pred[i]).collect();
    let mut neg: Vec<f64> = pred
        .iter()
        .zip(&is_pos)
        .filter(|(_, p)| !**p)
        .map(|(v, _)| *v)
        .collect();
    if neg.is_empty() {
        return Err(Error::DegenerateHeatmap("every pixel is a ground-truth point"));
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let count_ge = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&v| v < t);

    let mut thresholds = pos.clone();
    thresholds.dedup();
    thresholds.reverse();

    let mut area = 0.0;
    let (mut fx, mut ty) = (0.0, 0.0);
    for t in thresholds {
        let fp = count_ge(&neg, t) as f64 / nn;
        let tp = count_ge(&pos, t) as f64 / np;
        area += (fp - fx) * (tp + ty) / 2.0;
        fx = fp;
        ty = tp;
    }
    area += (1.0 - fx) * (1.0 + ty) / 2.0;
    Ok(area)
}

/// Judd ROC area with annotation points as positives.
pub fn auc_judd(points: &[Point], pred: &Heatmap) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::NoPoints);
    }
    let pixels = point_pixels(points, pred.height(), pred.width());
    auc_judd_pixels(&pixels, pred.values())
}

/// Bilinear resize with half-pixel centers (`align_corners = false`):
/// output cell `d` samples input coordinate `max((d + 0.5) * in/out - 0.5, 0)`.
pub fn bilinear_resize(values: &[f64], height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(values.len(), height * width);
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(height, out_h);
    let xs = axis(width, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, ly) in &ys {
        for &(x0, x1, lx) in &xs {
            let top = values[y0 * width + x0] * (1.0 - lx) + values[y0 * width + x1] * lx;
            let bot = values[y1 * width + x0] * (1.0 - lx) + values[y1 * width + x1] * lx;
            out.push(top * (1.0 - ly) + bot * ly);
        }
    }
    out
}

/// Maps a point into a grid rescaled from `(h, w)` to `(out_h, out_w)`,
/// consistent with [`bilinear_resize`]'s pixel-center convention.
pub fn rescale_point(p: Point, height: usize, width: usize, out_h: usize, out_w: usize) -> Point {
    let sx = out_w as f64 / width as f64;
    let sy = out_h as f64 / height as f64;
    let x = round_half_down((p[0] + 0.5) * sx - 0.5).clamp(0, out_w as i64 - 1);
    let y = round_half_down((p[1] + 0.5) * sy - 0.5).clamp(0, out_h as i64 - 1);
    [x as f64, y as f64]
}

/// Which pixels count as positives for AUC-J.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AucPositives {
    /// The annotation points (rescaled to the evaluation grid).
    #[default]
    Points,
    /// Cells of the resized ground-truth map at or above `relative * max`.
    Thresholded { relative: f64 },
}

/// Ground truth for one evaluated sample.
#[derive(Debug, Clone, Copy)]
pub struct EvalTarget<'a> {
    pub heatmap: &'a Heatmap,
    pub points: Option<&'a [Point]>,
}

fn resize_distribution(m: &Heatmap, res: (usize, usize)) -> Result<Heatmap> {
    let dist = m.to_distribution()?;
    if dist.dims() == res {
        return Ok(dist);
    }
    let v = bilinear_resize(dist.values(), dist.height(), dist.width(), res.0, res.1);
    sum_normalize(&Heatmap::raw(res.0, res.1, v)?)
}

/// Resize ground truth and prediction to `res`, renormalize, and score.
/// Logit predictions are softmaxed first.
pub fn evaluate_at(target: EvalTarget<'_>, pred: &Heatmap, res: (usize, usize), positives: AucPositives) -> Result<MetricReport> {
    let (h, w) = target.heatmap.dims();
    if res.0 == 0 || res.1 == 0 {
        return Err(Error::Config(format!("evaluation resolution {}x{} has a zero dimension", res.0, res.1)));
    }
    if res.0 > h || res.1 > w {
        return Err(Error::Config(format!(
            "evaluation resolution {}x{} exceeds native {h}x{w}",
            res.0, res.1
        )));
    }
    same_shape(target.heatmap, pred)?;
    let g = resize_distribution(target.heatmap, res)?;
    let p = resize_distribution(pred, res)?;
    let auc_j = match positives {
        AucPositives::Points => {
            let pts = target.points.ok_or(Error::NoPoints)?;
            let scaled: Vec<Point> = if res == (h, w) {
                pts.to_vec()
            } else {
                pts.iter().map(|&q| rescale_point(q, h, w, res.0, res.1)).collect()
            };
            auc_judd(&scaled, &p)?
        }
        AucPositives::Thresholded { relative } => {
            let cut = relative * g.max();
            let pix: Vec<usize> = g
                .values()
                .iter()
                .enumerate()
                .filter(|(_, v)| **v >= cut)
                .map(|(i, _)| i)
                .collect();
            auc_judd_pixels(&pix, p.values())?
        }
    };
    Ok(MetricReport {
        kld: kld(&g, &p)?,
        sim: sim(&g, &p)?,
        auc_j,
        resolution: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmaps::HeatmapKind;

    fn dist(h: usize, w: usize, v: Vec<f64>) -> Heatmap {
        Heatmap::new(h, w, v, HeatmapKind::SumNormalized).unwrap()
    }

    #[test]
    fn kld_examples() {
        let g = dist(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(kld(&g, &g).unwrap(), 0.0);
        let onehot = dist(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let uni = Heatmap::uniform(2, 2);
        assert!((kld(&onehot, &uni).unwrap() - 4f64.ln()).abs() < 1e-12);
        // uniform gt vs one-hot prediction: three cells hit the ε floor
        let want = 0.25 * (0.25f64 / 1.0).ln() + 3.0 * 0.25 * (0.25 / KLD_EPS).ln();
        assert!((kld(&uni, &onehot).unwrap() - want).abs() < 1e-9);
        assert!(kld(&uni, &Heatmap::uniform(3, 3)).is_err());
    }

    #[test]
    fn sim_examples() {
        let g = dist(2, 2, vec![0.5, 0.5, 0.0, 0.0]);
        assert!((sim(&g, &Heatmap::uniform(2, 2)).unwrap() - 0.5).abs() < 1e-15);
        assert!((sim(&g, &g).unwrap() - 1.0).abs() < 1e-15);
        let d = dist(2, 2, vec![0.0, 0.0, 0.5, 0.5]);
        assert_eq!(sim(&g, &d).unwrap(), 0.0);
    }

    #[test]
    fn auc_extremes() {
        let mut v = vec![0.0; 16];
        v[5] = 2.0;
        v[10] = 1.0;
        let pred = Heatmap::raw(4, 4, v).unwrap();
        let pts = [[1.0, 1.0], [2.0, 2.0]];
        assert_eq!(auc_judd(&pts, &pred).unwrap(), 1.0);
        let flat = Heatmap::raw(4, 4, vec![0.3; 16]).unwrap();
        assert_eq!(auc_judd(&pts, &flat).unwrap(), 0.5);
        assert!(matches!(auc_judd(&[], &flat), Err(Error::NoPoints)));
    }

    #[test]
    fn duplicate_points_collapse() {
        let v: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let pred = Heatmap::raw(3, 3, v).unwrap();
        let a = auc_judd(&[[1.0, 1.0]], &pred).unwrap();
        let b = auc_judd(&[[1.0, 1.0], [1.2, 0.9]], &pred).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let v: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        assert_eq!(bilinear_resize(&v, 3, 4, 3, 4), v);
        let c = bilinear_resize(&vec![1.0 / 65536.0; 256 * 256], 256, 256, 28, 28);
        assert!(c.iter().all(|&x| (x - 1.0 / 65536.0).abs() < 1e-18));
    }

    #[test]
    fn bilinear_8_to_4_matches_formula() {
        // 8 -> 4 with half-pixel centers samples input coordinate 2d + 0.5
        let v: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64).collect();
        let out = bilinear_resize(&v, 8, 8, 4, 4);
        for oy in 0..4 {
            for ox in 0..4 {
                let (y, x) = (2 * oy, 2 * ox);
                let want = 0.25 * (v[y * 8 + x] + v[y * 8 + x + 1] + v[(y + 1) * 8 + x] + v[(y + 1) * 8 + x + 1]);
                assert!((out[oy * 4 + ox] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rescale_point_stays_in_grid() {
        assert_eq!(rescale_point([255.0, 0.0], 256, 256, 28, 28), [27.0, 0.0]);
        assert_eq!(rescale_point([128.0, 128.0], 256, 256, 28, 28), [14.0, 14.0]);
    }

    #[test]
    fn evaluate_at_native_equals_direct() {
        let g = dist(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let p = dist(2, 2, vec![0.4, 0.3, 0.2, 0.1]);
        let pts = [[1.0, 1.0]];
        let r = evaluate_at(EvalTarget { heatmap: &g, points: Some(&pts) }, &p, (2, 2), AucPositives::Points).unwrap();
        assert_eq!(r.kld, kld(&g, &p).unwrap());
        assert_eq!(r.sim, sim(&g, &p).unwrap());
        assert_eq!(r.auc_j, auc_judd(&pts, &p).unwrap());
        let t = EvalTarget { heatmap: &g, points: Some(&pts) };
        assert!(evaluate_at(t, &p, (0, 2), AucPositives::Points).is_err());
        assert!(evaluate_at(t, &p, (4, 4), AucPositives::Points).is_err());
    }
}

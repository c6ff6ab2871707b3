use nalgebra::Vector3;
use rand::Rng;

use super::{logit, Gaussian, GaussianCloud};
use crate::error::{Error, Result};
use crate::numeric::quat;
use crate::render::{Camera, Image};

/// Back-projects `count` random mask pixels to depths within
/// `±depth_half_range` of the world origin's depth. Scales come from the mean
/// distance to the three nearest neighbours, colors from the image.
pub fn init_from_mask<R: Rng + ?Sized>(
    image: &Image,
    mask: &Image,
    camera: &Camera,
    count: usize,
    depth_half_range: f64,
    rng: &mut R,
) -> Result<GaussianCloud> {
    if mask.width != image.width || mask.height != image.height {
        return Err(Error::Dimension("mask and image sizes differ".into()));
    }
    if count == 0 {
        return Err(Error::InvalidInput("count must be positive".into()));
    }
    let pixels: Vec<(usize, usize)> = (0..mask.height)
        .flat_map(|y| (0..mask.width).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.at(x, y, 0) >= 0.5)
        .collect();
    if pixels.is_empty() {
        return Err(Error::EmptyMask);
    }
    let sx = camera.width as f64 / image.width as f64;
    let sy = camera.height as f64 / image.height as f64;
    let origin_depth = camera.world_to_camera(&Vector3::zeros()).z;
    let zmin = (origin_depth - depth_half_range).max(camera.fx.min(camera.fy) * 1e-3).max(1e-3);
    let zmax = (origin_depth + depth_half_range).max(zmin * 1.01);
    let rt = camera.rotation.transpose();

    let mut points = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    for _ in 0..count {
        let (x, y) = pixels[rng.gen_range(0..pixels.len())];
        let u = (x as f64 + rng.gen::<f64>()) * sx;
        let v = (y as f64 + rng.gen::<f64>()) * sy;
        let z = rng.gen_range(zmin..zmax);
        let pc = Vector3::new((u - camera.cx) / camera.fx * z, (v - camera.cy) / camera.fy * z, z);
        points.push(rt * (pc - camera.translation));
        let c = if image.channels >= 3 {
            [image.at(x, y, 0), image.at(x, y, 1), image.at(x, y, 2)]
        } else {
            [image.at(x, y, 0); 3]
        };
        colors.push(c);
    }
    let nn = mean_knn_distance(&points, 3);
    let fallback = depth_half_range.max(1e-3) * 0.05;
    let gs: Vec<Gaussian> = points
        .iter()
        .zip(&colors)
        .zip(&nn)
        .map(|((p, c), d)| {
            let s = if *d > 0.0 && d.is_finite() { *d } else { fallback };
            Gaussian {
                position: *p,
                rotation: quat::IDENTITY,
                log_scale: Vector3::repeat(s.max(1e-6).ln()),
                opacity_logit: logit(0.1),
                color: *c,
            }
        })
        .collect();
    Ok(GaussianCloud::from_gaussians(&gs))
}

/// Mean distance to the `k` nearest neighbours, by a sweep over x-sorted points.
pub(crate) fn mean_knn_distance(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    let n = points.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let k = k.min(n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a].x.total_cmp(&points[b].x).then(a.cmp(&b)));
    let mut rank = vec![0; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    (0..n)
        .map(|i| {
            let p = points[i];
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            let consider = |j: usize, best: &mut Vec<f64>| {
                let d2 = (points[j] - p).norm_squared();
                if best.len() < k || d2 < *best.last().unwrap() {
                    let pos = best.partition_point(|&b| b < d2);
                    best.insert(pos, d2);
                    best.truncate(k);
                }
            };
            let r = rank[i];
            let mut lo = r;
            let mut hi = r + 1;
            loop {
                let bound = if best.len() == k { best[k - 1] } else { f64::INFINITY };
                let left = lo.checked_sub(1).map(|l| (l, (points[order[l]].x - p.x).powi(2)));
                let right = (hi < n).then(|| (hi, (points[order[hi]].x - p.x).powi(2)));
                let next = match (left, right) {
                    (Some(l), Some(rr)) => {
                        if l.1 <= rr.1 {
                            Some((l, true))
                        } else {
                            Some((rr, false))
                        }
                    }
                    (Some(l), None) => Some((l, true)),
                    (None, Some(rr)) => Some((rr, false)),
                    (None, None) => None,
                };
                match next {
                    Some(((idx, dx2), is_left)) if dx2 < bound => {
                        consider(order[idx], &mut best);
                        if is_left {
                            lo -= 1;
                        } else {
                            hi += 1;
                        }
                    }
                    _ => break,
                }
            }
            best.iter().map(|d| d.sqrt()).sum::<f64>() / best.len() as f64
        })
        .collect()
}

use nalgebra::Vector2;
use rayon::prelude::*;

use super::project::{project, project_backward, ProjectedSplat, ScreenGrad};
use super::{Camera, ForwardContext, Image, RenderOutput, RenderSettings, SplatGrads, WorldSplat};
use crate::error::{Error, Result};

fn sort_key(a: &ProjectedSplat, b: &ProjectedSplat) -> std::cmp::Ordering {
    a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index))
}

fn build_context(
    splats: &[WorldSplat],
    cam: &Camera,
    background: [f64; 3],
    settings: &RenderSettings,
) -> ForwardContext {
    let mut projected: Vec<ProjectedSplat> = splats
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| project(s, i, cam, settings))
        .collect();
    projected.sort_by(sort_key);

    let ts = settings.tile_size.max(1);
    let tiles_x = cam.width.div_ceil(ts);
    let tiles_y = cam.height.div_ceil(ts);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (k, p) in projected.iter().enumerate() {
        // Pixel centers sit at integer + 0.5.
        let x0 = ((p.mean2d.x - p.radius - 0.5).ceil().max(0.0)) as usize;
        let y0 = ((p.mean2d.y - p.radius - 0.5).ceil().max(0.0)) as usize;
        let x1 = (p.mean2d.x + p.radius - 0.5).floor();
        let y1 = (p.mean2d.y + p.radius - 0.5).floor();
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let x1 = (x1 as usize).min(cam.width - 1);
        let y1 = (y1 as usize).min(cam.height - 1);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    ForwardContext {
        camera: *cam,
        settings: *settings,
        background,
        projected,
        tiles,
        tiles_x,
        splat_count: splats.len(),
    }
}

fn tile_bounds(ctx: &ForwardContext, t: usize) -> (usize, usize, usize, usize) {
    let ts = ctx.settings.tile_size.max(1);
    let (tx, ty) = (t % ctx.tiles_x, t / ctx.tiles_x);
    let x0 = tx * ts;
    let y0 = ty * ts;
    (
        x0,
        y0,
        (x0 + ts).min(ctx.camera.width),
        (y0 + ts).min(ctx.camera.height),
    )
}

/// Tile-local copy of the fields the blending loop touches.
struct Packed {
    mx: f64,
    my: f64,
    qa: f64,
    qb: f64,
    qc: f64,
    radius: f64,
    opacity: f64,
    color: [f64; 3],
    /// Below this exponent the alpha is certainly under `alpha_min`.
    skip_power: f64,
}

fn pack(ctx: &ForwardContext, list: &[u32]) -> Vec<Packed> {
    let amin = ctx.settings.alpha_min;
    list.iter()
        .map(|&k| {
            let p = &ctx.projected[k as usize];
            Packed {
                mx: p.mean2d.x,
                my: p.mean2d.y,
                qa: p.conic[(0, 0)],
                qb: p.conic[(0, 1)],
                qc: p.conic[(1, 1)],
                radius: p.radius,
                opacity: p.opacity,
                color: p.color,
                // margin keeps the shortcut from disagreeing with the exact test
                skip_power: if amin > 0.0 { (amin / p.opacity).ln() - 1e-6 } else { f64::NEG_INFINITY },
            }
        })
        .collect()
}

struct Contribution {
    slot: usize,
    alpha: f64,
    gauss: f64,
    transmittance: f64,
}

/// Contributors of one pixel in blending order; returns the final transmittance.
/// Matches [`ProjectedSplat::covers`] and [`ProjectedSplat::alpha_at`] exactly.
fn gather(
    packed: &[Packed],
    row: &[u32],
    px: f64,
    py: f64,
    settings: &RenderSettings,
    out: &mut Vec<Contribution>,
) -> f64 {
    out.clear();
    let mut t_acc = 1.0;
    for &slot in row {
        let p = &packed[slot as usize];
        let dx = px - p.mx;
        if dx.abs() > p.radius {
            continue;
        }
        let dy = py - p.my;
        let power = -0.5 * (p.qa * dx * dx + 2.0 * p.qb * dx * dy + p.qc * dy * dy);
        if power < p.skip_power {
            continue;
        }
        let gauss = power.exp();
        let alpha = p.opacity * gauss;
        if alpha < settings.alpha_min {
            continue;
        }
        out.push(Contribution {
            slot: slot as usize,
            alpha,
            gauss,
            transmittance: t_acc,
        });
        t_acc *= 1.0 - alpha;
        if t_acc < settings.transmittance_min {
            break;
        }
    }
    t_acc
}

/// Pixel columns of row `py` (clipped to `[x0, x1)`) where splat `p` may
/// contribute: inside its support square and not certainly below
/// `skip_power`. The exact tests still run per pixel.
#[inline]
fn row_span(p: &Packed, py: f64, x0: usize, x1: usize) -> Option<(usize, usize)> {
    let dy = py - p.my;
    if dy.abs() > p.radius {
        return None;
    }
    let mut lo = p.mx - p.radius;
    let mut hi = p.mx + p.radius;
    if p.skip_power.is_finite() {
        // qa dx² + 2 qb dy dx + qc dy² ≤ −2 s, widened slightly
        let c = p.qc * dy * dy + 2.0 * (p.skip_power - 1e-6);
        let disc = p.qb * p.qb * dy * dy - p.qa * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let pad = 1e-6 * (1.0 + sq / p.qa);
        lo = lo.max(p.mx + (-p.qb * dy - sq) / p.qa - pad);
        hi = hi.min(p.mx + (-p.qb * dy + sq) / p.qa + pad);
    }
    // pixel centers x + 0.5 within [lo, hi]; casts truncate, so clamp first
    let lo = (lo - 0.5).max(x0 as f64);
    let hi = (hi - 0.5).min(x1 as f64 - 1.0);
    if lo > hi {
        return None;
    }
    let mut a = lo as usize;
    if (a as f64) < lo {
        a += 1;
    }
    let b = hi as usize;
    (a <= b).then_some((a, b + 1))
}

/// Per-pixel candidate slots for one row of a tile, in blending order.
fn row_buckets(packed: &[Packed], py: f64, x0: usize, x1: usize, buckets: &mut [Vec<u32>]) {
    for b in buckets.iter_mut() {
        b.clear();
    }
    for (slot, p) in packed.iter().enumerate() {
        if let Some((a, b)) = row_span(p, py, x0, x1) {
            for bucket in &mut buckets[a - x0..b - x0] {
                bucket.push(slot as u32);
            }
        }
    }
}

/// Tiled front-to-back alpha blending over depth-sorted splats.
pub fn render_forward(
    splats: &[WorldSplat],
    cam: &Camera,
    background: [f64; 3],
    settings: &RenderSettings,
) -> RenderOutput {
    let ctx = build_context(splats, cam, background, settings);
    let (w, h) = (cam.width, cam.height);
    let tile_pixels: Vec<(Vec<[f64; 3]>, Vec<f64>)> = (0..ctx.tiles.len())
        .into_par_iter()
        .map(|t| {
            let (x0, y0, x1, y1) = tile_bounds(&ctx, t);
            let list = &ctx.tiles[t];
            let packed = pack(&ctx, list);
            let tw = x1 - x0;
            let mut colors = Vec::with_capacity(tw * (y1 - y0));
            let mut alphas = Vec::with_capacity(tw * (y1 - y0));
            let mut trans = vec![1.0; tw];
            let mut acc = vec![[0.0; 3]; tw];
            for y in y0..y1 {
                let py = y as f64 + 0.5;
                trans.fill(1.0);
                acc.fill([0.0; 3]);
                let mut live = tw;
                // Splats in depth order, each blended over its span; per pixel
                // this is the same sequence of operations as `gather`.
                for p in &packed {
                    if live == 0 {
                        break;
                    }
                    let Some((a, b)) = row_span(p, py, x0, x1) else {
                        continue;
                    };
                    let dy = py - p.my;
                    for x in a..b {
                        let i = x - x0;
                        let t_acc = trans[i];
                        if t_acc < settings.transmittance_min {
                            continue;
                        }
                        let dx = x as f64 + 0.5 - p.mx;
                        let power = -0.5 * (p.qa * dx * dx + 2.0 * p.qb * dx * dy + p.qc * dy * dy);
                        if power < p.skip_power {
                            continue;
                        }
                        let alpha = p.opacity * power.exp();
                        if alpha < settings.alpha_min {
                            continue;
                        }
                        let wgt = alpha * t_acc;
                        let c = &mut acc[i];
                        for ch in 0..3 {
                            c[ch] += p.color[ch] * wgt;
                        }
                        let t_new = t_acc * (1.0 - alpha);
                        trans[i] = t_new;
                        if t_new < settings.transmittance_min {
                            live -= 1;
                        }
                    }
                }
                for i in 0..tw {
                    let mut c = acc[i];
                    for ch in 0..3 {
                        c[ch] += trans[i] * background[ch];
                    }
                    colors.push(c);
                    alphas.push(1.0 - trans[i]);
                }
            }
            (colors, alphas)
        })
        .collect();

    let mut color = Image::new(w, h, 3);
    let mut alpha = Image::new(w, h, 1);
    for (t, (cs, al)) in tile_pixels.iter().enumerate() {
        let (x0, y0, x1, _) = tile_bounds(&ctx, t);
        let tw = x1 - x0;
        for (i, (c, a)) in cs.iter().zip(al).enumerate() {
            let (x, y) = (x0 + i % tw, y0 + i / tw);
            for ch in 0..3 {
                *color.at_mut(x, y, ch) = c[ch];
            }
            *alpha.at_mut(x, y, 0) = *a;
        }
    }
    RenderOutput {
        color,
        alpha,
        context: Some(ctx),
    }
}

/// Adjoint of [`render_forward`]: per-splat world-space gradients given
/// `dL/dcolor` (`H×W×3`) and `dL/dalpha` (`H×W×1`).
pub fn render_backward(
    out: &RenderOutput,
    splats: &[WorldSplat],
    d_color: &Image,
    d_alpha: &Image,
) -> Result<SplatGrads> {
    let ctx = out
        .context
        .as_ref()
        .ok_or(Error::BackwardBeforeForward("render"))?;
    if splats.len() != ctx.splat_count {
        return Err(Error::Dimension(format!(
            "backward with {} splats, forward had {}",
            splats.len(),
            ctx.splat_count
        )));
    }
    d_color.ensure_same_shape(&out.color, "color gradient")?;
    d_alpha.ensure_same_shape(&out.alpha, "alpha gradient")?;
    let settings = ctx.settings;
    let bg = ctx.background;

    // Per tile: gradients for each entry of the tile list.
    let tile_grads: Vec<Vec<ScreenGrad>> = (0..ctx.tiles.len())
        .into_par_iter()
        .map(|t| {
            let (x0, y0, x1, y1) = tile_bounds(ctx, t);
            let list = &ctx.tiles[t];
            let packed = pack(ctx, list);
            let mut grads = vec![ScreenGrad::default(); list.len()];
            let mut contribs: Vec<Contribution> = Vec::new();
            let mut buckets = vec![Vec::new(); x1 - x0];
            for y in y0..y1 {
                let py = y as f64 + 0.5;
                row_buckets(&packed, py, x0, x1, &mut buckets);
                for x in x0..x1 {
                    let gc = [d_color.at(x, y, 0), d_color.at(x, y, 1), d_color.at(x, y, 2)];
                    let ga = d_alpha.at(x, y, 0);
                    if gc == [0.0; 3] && ga == 0.0 {
                        continue;
                    }
                    let px = x as f64 + 0.5;
                    gather(&packed, &buckets[x - x0], px, py, &settings, &mut contribs);
                    let mut behind = bg;
                    let mut suffix = 1.0;
                    for c in contribs.iter().rev() {
                        let p = &ctx.projected[list[c.slot] as usize];
                        let ti = c.transmittance;
                        let mut d_a = ga * ti * suffix;
                        for ch in 0..3 {
                            d_a += gc[ch] * ti * (p.color[ch] - behind[ch]);
                        }
                        let g = &mut grads[c.slot];
                        for ch in 0..3 {
                            g.color[ch] += gc[ch] * c.alpha * ti;
                        }
                        g.opacity += d_a * c.gauss;
                        let d_power = d_a * c.alpha;
                        let d = Vector2::new(px - p.mean2d.x, py - p.mean2d.y);
                        g.mean2d += p.conic * d * d_power;
                        g.conic += d * d.transpose() * (-0.5 * d_power);
                        for ch in 0..3 {
                            behind[ch] = p.color[ch] * c.alpha + (1.0 - c.alpha) * behind[ch];
                        }
                        suffix *= 1.0 - c.alpha;
                    }
                }
            }
            grads
        })
        .collect();

    // Fixed-order merge keeps results independent of the thread count.
    let mut screen = vec![ScreenGrad::default(); ctx.projected.len()];
    for (t, grads) in tile_grads.iter().enumerate() {
        for (slot, g) in grads.iter().enumerate() {
            screen[ctx.tiles[t][slot] as usize].add(g);
        }
    }

    let cam = &ctx.camera;
    let half = Vector2::new(0.5 * cam.width as f64, 0.5 * cam.height as f64);
    let per_splat: Vec<_> = ctx
        .projected
        .par_iter()
        .zip(screen.par_iter())
        .map(|(p, g)| {
            let (dm, dc) = project_backward(p, &splats[p.index].cov, cam, g);
            let ndc = g.mean2d.component_mul(&half).norm();
            (p.index, dm, dc, g.opacity, g.color, ndc)
        })
        .collect();

    let mut out_grads = SplatGrads::zeros(splats.len());
    for (i, dm, dc, dop, dcol, ndc) in per_splat {
        out_grads.mean[i] = dm;
        out_grads.cov[i] = dc;
        out_grads.opacity[i] = dop;
        out_grads.color[i] = dcol;
        out_grads.view_grad_norm[i] = ndc;
        out_grads.visible[i] = true;
    }
    Ok(out_grads)
}

//! Multi-scale structural dissimilarity, the default perceptual term.

use crate::error::{Error, Result};
use crate::render::Image;

/// Seam for perceptual losses: value and gradient with respect to `render`.
pub trait PerceptualMetric: Send + Sync {
    fn loss(&self, render: &Image, target: &Image) -> Result<(f64, Image)>;
}

/// Mean over scales of `1 − SSIM`, computed per channel on box windows.
/// Each scale halves the previous one by 2×2 averaging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MsSsim {
    pub scales: usize,
    pub window: usize,
}

impl Default for MsSsim {
    fn default() -> Self {
        Self { scales: 3, window: 7 }
    }
}

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

impl PerceptualMetric for MsSsim {
    fn loss(&self, render: &Image, target: &Image) -> Result<(f64, Image)> {
        render.ensure_same_shape(target, "perceptual target")?;
        if self.scales == 0 || self.window == 0 {
            return Err(Error::InvalidInput("perceptual loss needs ≥ 1 scale and window".into()));
        }
        let coarse = (render.width >> (self.scales - 1)).min(render.height >> (self.scales - 1));
        if coarse < self.window {
            return Err(Error::Dimension(format!(
                "{}×{} image is {coarse} px at the coarsest of {} scales, window is {}",
                render.width, render.height, self.scales, self.window
            )));
        }
        let mut xs = vec![render.clone()];
        let mut ys = vec![target.clone()];
        for s in 1..self.scales {
            xs.push(downsample(&xs[s - 1]));
            ys.push(downsample(&ys[s - 1]));
        }
        let mut total = 0.0;
        let mut grad_up: Option<Image> = None;
        for s in (0..self.scales).rev() {
            let (v, mut g) = ssim(&xs[s], &ys[s], self.window);
            total += (1.0 - v) / self.scales as f64;
            for d in g.data.iter_mut() {
                *d *= -1.0 / self.scales as f64;
            }
            if let Some(coarser) = grad_up.take() {
                g.add_assign(&upsample_adjoint(&coarser, g.width, g.height));
            }
            grad_up = Some(g);
        }
        Ok((total, grad_up.expect("at least one scale")))
    }
}

pub fn perceptual_loss(render: &Image, target: &Image) -> Result<(f64, Image)> {
    MsSsim::default().loss(render, target)
}

fn downsample(img: &Image) -> Image {
    let (w, h, c) = (img.width / 2, img.height / 2, img.channels);
    let mut out = Image::new(w, h, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                *out.at_mut(x, y, ch) = 0.25
                    * (img.at(2 * x, 2 * y, ch)
                        + img.at(2 * x + 1, 2 * y, ch)
                        + img.at(2 * x, 2 * y + 1, ch)
                        + img.at(2 * x + 1, 2 * y + 1, ch));
            }
        }
    }
    out
}

fn upsample_adjoint(g: &Image, width: usize, height: usize) -> Image {
    let mut out = Image::new(width, height, g.channels);
    for y in 0..g.height {
        for x in 0..g.width {
            for ch in 0..g.channels {
                let v = 0.25 * g.at(x, y, ch);
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    *out.at_mut(2 * x + dx, 2 * y + dy, ch) += v;
                }
            }
        }
    }
    out
}

/// Box sums over every valid `k×k` window of one channel.
fn window_sums(v: &[f64], w: usize, h: usize, k: usize) -> Vec<f64> {
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    // summed-area table
    let mut sat = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += v[y * w + x];
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let (x1, y1) = (x + k, y + k);
            out[y * ow + x] = sat[y1 * (w + 1) + x1] - sat[y * (w + 1) + x1] - sat[y1 * (w + 1) + x] + sat[y * (w + 1) + x];
        }
    }
    out
}

/// Adjoint of [`window_sums`]: spreads each window value over its pixels.
fn window_spread(g: &[f64], w: usize, h: usize, k: usize) -> Vec<f64> {
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    // Pixel (x, y) receives the sum of g over windows with origin in
    // [x-k+1, x] × [y-k+1, y], again via a summed-area table.
    let mut sat = vec![0.0; (ow + 1) * (oh + 1)];
    for y in 0..oh {
        let mut row = 0.0;
        for x in 0..ow {
            row += g[y * ow + x];
            sat[(y + 1) * (ow + 1) + x + 1] = sat[y * (ow + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let y0 = (y + 1).saturating_sub(k);
        let y1 = (y + 1).min(oh);
        if y0 >= y1 {
            continue;
        }
        for x in 0..w {
            let x0 = (x + 1).saturating_sub(k);
            let x1 = (x + 1).min(ow);
            if x0 >= x1 {
                continue;
            }
            out[y * w + x] = sat[y1 * (ow + 1) + x1] - sat[y0 * (ow + 1) + x1] - sat[y1 * (ow + 1) + x0] + sat[y0 * (ow + 1) + x0];
        }
    }
    out
}

/// Mean SSIM over channels and windows, and its gradient with respect to `x`.
fn ssim(x: &Image, y: &Image, k: usize) -> (f64, Image) {
    let (w, h, c) = (x.width, x.height, x.channels);
    let n = (k * k) as f64;
    let windows = (w + 1 - k) * (h + 1 - k);
    let count = (windows * c) as f64;
    let mut grad = Image::new(w, h, c);
    let mut total = 0.0;
    for ch in 0..c {
        let xv: Vec<f64> = (0..w * h).map(|p| x.data[p * c + ch]).collect();
        let yv: Vec<f64> = (0..w * h).map(|p| y.data[p * c + ch]).collect();
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let sx = window_sums(&xv, w, h, k);
        let sy = window_sums(&yv, w, h, k);
        let sxx = window_sums(&sq(&xv, &xv), w, h, k);
        let syy = window_sums(&sq(&yv, &yv), w, h, k);
        let sxy = window_sums(&sq(&xv, &yv), w, h, k);
        // Per-window coefficients of dS/dx_p = (a + 2 b x_p + c y_p) / n.
        let mut ca = vec![0.0; windows];
        let mut cb = vec![0.0; windows];
        let mut cc = vec![0.0; windows];
        for i in 0..windows {
            let mx = sx[i] / n;
            let my = sy[i] / n;
            let vx = sxx[i] / n - mx * mx;
            let vy = syy[i] / n - my * my;
            let cxy = sxy[i] / n - mx * my;
            let a = 2.0 * mx * my + C1;
            let b = 2.0 * cxy + C2;
            let cden = mx * mx + my * my + C1;
            let dden = vx + vy + C2;
            let s = a * b / (cden * dden);
            total += s;
            let ds_dmx = 2.0 * my * b / (cden * dden) - 2.0 * mx * s / cden;
            let ds_dvx = -s / dden;
            let ds_dcxy = 2.0 * a / (cden * dden);
            ca[i] = (ds_dmx - 2.0 * mx * ds_dvx - my * ds_dcxy) / count;
            cb[i] = ds_dvx / count;
            cc[i] = ds_dcxy / count;
        }
        let ga = window_spread(&ca, w, h, k);
        let gb = window_spread(&cb, w, h, k);
        let gc = window_spread(&cc, w, h, k);
        for p in 0..w * h {
            grad.data[p * c + ch] = (ga[p] + 2.0 * gb[p] * xv[p] + gc[p] * yv[p]) / n;
        }
    }
    (total / count, grad)
}

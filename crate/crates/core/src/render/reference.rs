use super::project::{project, ProjectedSplat};
use super::{Camera, Image, RenderOutput, RenderSettings, WorldSplat};

/// Brute-force renderer: every pixel visits every projected splat in global
/// depth order. Uses the same support and alpha model as the tiled renderer
/// and the same skip threshold, but never terminates early. Its output carries
/// no backward context.
pub fn render_reference(
    splats: &[WorldSplat],
    cam: &Camera,
    background: [f64; 3],
    settings: &RenderSettings,
) -> RenderOutput {
    let mut projected: Vec<ProjectedSplat> = splats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| project(s, i, cam, settings))
        .collect();
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let mut color = Image::new(cam.width, cam.height, 3);
    let mut alpha = Image::new(cam.width, cam.height, 1);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for p in &projected {
                if !p.covers(px, py) {
                    continue;
                }
                let (a, _) = p.alpha_at(px, py);
                if a < settings.alpha_min {
                    continue;
                }
                for ch in 0..3 {
                    c[ch] += p.color[ch] * a * t;
                }
                t *= 1.0 - a;
            }
            for ch in 0..3 {
                *color.at_mut(x, y, ch) = c[ch] + t * background[ch];
            }
            *alpha.at_mut(x, y, 0) = 1.0 - t;
        }
    }
    RenderOutput {
        color,
        alpha,
        context: None,
    }
}

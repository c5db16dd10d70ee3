//! Standalone SVG rendering of a scene and its predictions.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::scene::Scene;

const SIZE: f64 = 800.0;
const MARGIN: f64 = 20.0;

struct View {
    min: Point,
    scale: f64,
    height: f64,
}

impl View {
    fn fit<'a>(pts: impl Iterator<Item = &'a Point>) -> View {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in pts {
            for c in 0..2 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        if !lo[0].is_finite() {
            lo = [0.0, 0.0];
            hi = [1.0, 1.0];
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
        let scale = (SIZE - 2.0 * MARGIN) / span;
        View {
            min: lo,
            scale,
            height: (hi[1] - lo[1]) * scale + 2.0 * MARGIN,
        }
    }

    fn map(&self, p: Point) -> (f64, f64) {
        // y grows upward in the scene, downward in SVG
        let x = (p[0] - self.min[0]) * self.scale + MARGIN;
        let y = self.height - ((p[1] - self.min[1]) * self.scale + MARGIN);
        (x, y)
    }

    fn polyline(&self, out: &mut String, pts: &[Point], style: &str) {
        let coords: Vec<String> = pts
            .iter()
            .map(|&p| {
                let (x, y) = self.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" {style}/>"#,
            coords.join(" ")
        );
    }
}

/// SVG text: lanes grey, past orange, ground truth red, predictions blue with
/// opacity equal to their probability.
pub fn render_svg(scene: &Scene, preds: &[Vec<Point>], probs: &[f64]) -> String {
    let lane_pts = scene.lanes.segments.iter().flat_map(|s| s.nodes.iter());
    let view = View::fit(
        lane_pts
            .chain(scene.target_past.iter())
            .chain(scene.gt_future.iter().flatten())
            .chain(preds.iter().flatten()),
    );
    let width = SIZE;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{:.0}" viewBox="0 0 {width:.0} {:.0}">"#,
        view.height, view.height
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, "<title>{}</title>", escape(&scene.scene_id));
    let _ = writeln!(s, r#"<g id="lanes">"#);
    for seg in &scene.lanes.segments {
        view.polyline(
            &mut s,
            &seg.nodes,
            r#"stroke="grey" stroke-width="6" stroke-opacity="0.35""#,
        );
    }
    s.push_str("</g>\n");
    for p in &scene.social_pasts {
        view.polyline(
            &mut s,
            p,
            r#"stroke="black" stroke-width="2" class="social""#,
        );
    }
    view.polyline(
        &mut s,
        &scene.target_past,
        r#"stroke="orange" stroke-width="3" class="past""#,
    );
    if let Some(gt) = &scene.gt_future {
        view.polyline(&mut s, gt, r#"stroke="red" stroke-width="3" class="gt""#);
    }
    for (traj, p) in preds.iter().zip(probs) {
        let style = format!(
            r#"stroke="blue" stroke-width="2" stroke-opacity="{:.4}" class="pred""#,
            p.clamp(0.0, 1.0)
        );
        view.polyline(&mut s, traj, &style);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn plot(
    scene: &Scene,
    preds: &[Vec<Point>],
    probs: &[f64],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_svg(scene, preds, probs)).map_err(|e| Error::io(path, e))
}

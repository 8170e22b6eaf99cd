//! Minimal SVG output: loss curves and keypoint wireframes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{KeypointState, Scene, WIREFRAME};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 40.0;

fn write(path: &Path, svg: String) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn bounds(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = xs.clone().fold(f64::INFINITY, f64::min);
    let hi = xs.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Loss against step as a polyline with a logarithmic y axis.
pub fn loss_plot_svg(points: &[(f64, f64)]) -> String {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, y)| *y > 0.0 && y.is_finite())
        .map(|&(x, y)| (x, y.log10()))
        .collect();
    let (x0, x1) = bounds(pts.iter().map(|p| p.0));
    let (y0, y1) = bounds(pts.iter().map(|p| p.1));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    let line: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" stroke="steelblue" stroke-width="1" fill="none"/>"#,
        line.join(" ")
    );
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}" font-size="12">step</text>"#, H - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="4" y="{}" font-size="12">{:.3}</text><text x="4" y="{}" font-size="12">{:.3}</text>"#,
        PAD,
        10f64.powf(y1),
        H - PAD,
        10f64.powf(y0)
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14">total loss (log scale)</text>"#, W / 2.0 - 60.0);
    s.push_str("</svg>\n");
    s
}

pub fn write_loss_plot(path: impl AsRef<Path>, points: &[(f64, f64)]) -> Result<()> {
    write(path.as_ref(), loss_plot_svg(points))
}

/// Side-by-side top (x-y) and side (x-z) views of every predicted skeleton:
/// yellow bones, red keypoints, hollow markers for invisible joints.
pub fn wireframe_svg(scene: &Scene) -> String {
    let all: Vec<[f64; 3]> = scene.keypoints.iter().flatten().flat_map(|k| k.positions).collect();
    let (x0, x1) = bounds(all.iter().map(|p| p[0]));
    let (y0, y1) = bounds(all.iter().map(|p| p[1]));
    let (z0, z1) = bounds(all.iter().map(|p| p[2]));
    let panel = W / 2.0 - PAD;
    let span = (x1 - x0).max(y1 - y0).max(z1 - z0);
    let scale = (panel - PAD) / span;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="black"/>"#);
    let _ = writeln!(s, r##"<text x="10" y="20" fill="#ccc" font-size="13">{} top (x-y) and side (x-z)</text>"##, scene.id);
    type Projection = Box<dyn Fn(&[f64; 3]) -> (f64, f64)>;
    let views: [(f64, Projection); 2] = [
        (PAD, Box::new(move |p: &[f64; 3]| (p[0] - x0, p[1] - y0))),
        (W / 2.0 + PAD / 2.0, Box::new(move |p: &[f64; 3]| (p[0] - x0, p[2] - z0))),
    ];
    for (left, proj) in &views {
        let to = |p: &[f64; 3]| {
            let (u, v) = proj(p);
            (left + u * scale, H - PAD - v * scale)
        };
        for k in scene.keypoints.iter().flatten() {
            for (a, b) in WIREFRAME {
                let (ax, ay) = to(&k.positions[a]);
                let (bx, by) = to(&k.positions[b]);
                let _ = writeln!(
                    s,
                    r#"<line x1="{ax:.1}" y1="{ay:.1}" x2="{bx:.1}" y2="{by:.1}" stroke="yellow" stroke-width="2"/>"#
                );
            }
            for (p, st) in k.positions.iter().zip(k.states) {
                let (cx, cy) = to(p);
                let fill = if st == KeypointState::Visible { "red" } else { "none" };
                let _ = writeln!(
                    s,
                    r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="3.5" fill="{fill}" stroke="red"/>"#
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_wireframe(path: impl AsRef<Path>, scene: &Scene) -> Result<()> {
    write(path.as_ref(), wireframe_svg(scene))
}

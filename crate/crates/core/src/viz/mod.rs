//! Renderers: confidence heatmaps and latent error maps decoded through the
//! latent colour map, binary PPM frames, and SVG reliability diagrams.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::calib::ReliabilityReport;
use crate::codec::{Codec, LatentColorMap};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Default heatmap opacity when compositing over a generated frame.
pub const DEFAULT_OPACITY: f32 = 0.5;

/// Channel mean at every latent site of a `(T, H_l, W_l, C_l)` tensor.
pub fn site_means(values: &Tensor) -> Result<Vec<f32>> {
    if values.rank() != 4 {
        return Err(Error::InvalidArgument(format!("expected a (T, H, W, C) tensor, got shape {:?}", values.shape())));
    }
    let c = values.shape()[3];
    Ok(values.data().chunks_exact(c).map(|ch| ch.iter().sum::<f32>() / c as f32).collect())
}

fn check_latent(values: &Tensor, codec: &Codec) -> Result<usize> {
    let t = values.shape().first().copied().unwrap_or(0);
    let expected = codec.cfg.latent_shape(t);
    if values.shape() != expected || t == 0 {
        return Err(Error::shape(&expected, values.shape()));
    }
    Ok(t)
}

/// Colours every latent site by its value in `[0, 1]` and decodes to
/// `(T, H, W, 3)` pixels.
pub fn render_sites(values: &[f32], frames: usize, cmap: &LatentColorMap, codec: &Codec) -> Result<Tensor> {
    codec.decode(&cmap.colorize(values, frames)?)
}

/// Heatmap frames for a confidence map: green where the model expects to be
/// wrong, red where it is unsure, blue where it expects to be right.
pub fn render_confidence(q: &Tensor, cmap: &LatentColorMap, codec: &Codec) -> Result<Tensor> {
    let t = check_latent(q, codec)?;
    if let Some(v) = q.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("confidence {v} outside [0, 1]")));
    }
    render_sites(&site_means(q)?, t, cmap, codec)
}

/// Latent error frames: `|x_hat - x_star|` clipped to `span` and shown blue
/// at the span minimum, red at its midpoint and green at its maximum.
pub fn render_error_map(
    x_hat: &Tensor,
    x_star: &Tensor,
    cmap: &LatentColorMap,
    codec: &Codec,
    span: [f64; 2],
) -> Result<Tensor> {
    let t = check_latent(x_hat, codec)?;
    x_hat.check_same_shape(x_star)?;
    let [lo, hi] = span;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::InvalidArgument(format!("error span [{lo}, {hi}] is empty")));
    }
    let scaled = x_hat.zip_map(x_star, |a, b| {
        let u = (((a - b).abs() as f64).clamp(lo, hi) - lo) / (hi - lo);
        (1.0 - u) as f32
    })?;
    render_sites(&site_means(&scaled)?, t, cmap, codec)
}

/// `(1 - alpha) * generated + alpha * heatmap`.
pub fn composite(generated: &Tensor, heatmap: &Tensor, alpha: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("opacity {alpha} outside [0, 1]")));
    }
    generated.zip_map(heatmap, |g, h| ((1.0 - alpha) * g + alpha * h).clamp(0.0, 1.0))
}

/// The four views rendered per episode, each `(T, H, W, 3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapFrameSet {
    pub ground_truth: Tensor,
    pub generated: Tensor,
    pub confidence: Tensor,
    pub composite: Tensor,
    pub opacity: f32,
}

impl HeatmapFrameSet {
    pub fn new(ground_truth: Tensor, generated: Tensor, confidence: Tensor, opacity: f32) -> Result<Self> {
        if ground_truth.rank() != 4 || ground_truth.shape()[3] != 3 {
            return Err(Error::InvalidArgument(format!("expected RGB frames, got shape {:?}", ground_truth.shape())));
        }
        ground_truth.check_same_shape(&generated)?;
        ground_truth.check_same_shape(&confidence)?;
        let composite = composite(&generated, &confidence, opacity)?;
        Ok(HeatmapFrameSet { ground_truth, generated, confidence, composite, opacity })
    }

    pub fn frames(&self) -> usize {
        self.ground_truth.shape()[0]
    }

    fn views(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("gt", &self.ground_truth),
            ("generated", &self.generated),
            ("confidence", &self.confidence),
            ("composite", &self.composite),
        ]
    }

    /// Writes every frame of every view as `{episode}_{frame}_{kind}.ppm`.
    pub fn write_ppm(&self, dir: &Path, episode: &str) -> Result<Vec<PathBuf>> {
        self.write_with(dir, episode, "ppm", write_ppm)
    }

    /// Same layout as [`Self::write_ppm`] with PNG files.
    #[cfg(feature = "png")]
    pub fn write_png(&self, dir: &Path, episode: &str) -> Result<Vec<PathBuf>> {
        self.write_with(dir, episode, "png", write_png)
    }

    fn write_with(
        &self,
        dir: &Path,
        episode: &str,
        ext: &str,
        write: fn(&Path, &[f32], usize, usize) -> Result<()>,
    ) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let s = self.ground_truth.shape();
        let (h, w) = (s[1], s[2]);
        let per = h * w * 3;
        let mut paths = Vec::new();
        for (kind, frames) in self.views() {
            for f in 0..self.frames() {
                let path = dir.join(format!("{}.{ext}", frame_stem(episode, f, kind)));
                write(&path, &frames.data()[f * per..(f + 1) * per], h, w)?;
                paths.push(path);
            }
        }
        Ok(paths)
    }
}

/// `{episode}_{frame}_{kind}` without an extension.
pub fn frame_stem(episode: &str, frame: usize, kind: &str) -> String {
    format!("{episode}_{frame}_{kind}")
}

fn to_bytes(frame: &[f32]) -> Vec<u8> {
    frame.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Binary PPM (P6) bytes of one `(H, W, 3)` frame with values in `[0, 1]`.
pub fn encode_ppm(frame: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    if frame.len() != height * width * 3 {
        return Err(Error::shape(&[height, width, 3], &[frame.len()]));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(to_bytes(frame));
    Ok(out)
}

pub fn write_ppm(path: &Path, frame: &[f32], height: usize, width: usize) -> Result<()> {
    fs::write(path, encode_ppm(frame, height, width)?)?;
    Ok(())
}

#[cfg(feature = "png")]
pub fn write_png(path: &Path, frame: &[f32], height: usize, width: usize) -> Result<()> {
    if frame.len() != height * width * 3 {
        return Err(Error::shape(&[height, width, 3], &[frame.len()]));
    }
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()
        .and_then(|mut w| w.write_image_data(&to_bytes(frame)))
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Plot geometry of a reliability diagram, in SVG user units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagramLayout {
    pub margin: f64,
    pub size: f64,
}

impl Default for DiagramLayout {
    fn default() -> Self {
        DiagramLayout { margin: 48.0, size: 400.0 }
    }
}

impl DiagramLayout {
    pub fn x(&self, v: f64) -> f64 {
        self.margin + v * self.size
    }

    pub fn y(&self, v: f64) -> f64 {
        self.margin + (1.0 - v) * self.size
    }
}

/// SVG 1.1 reliability diagram: one accuracy bar per nonempty bin, the
/// dashed diagonal of perfect calibration, and a cross per nonempty bin
/// whose height is that bin's share of the samples.
pub fn reliability_svg(report: &ReliabilityReport, layout: DiagramLayout) -> String {
    let (m, s) = (layout.margin, layout.size);
    let full = 2.0 * m + s;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{full}" height="{full}" viewBox="0 0 {full} {full}">"#
    );
    let title = match (&report.meta.head, report.meta.eps_v) {
        (Some(h), Some(e)) => format!("{h} eps_v={e:.3} {}", report.meta.dataset),
        (Some(h), None) => format!("{h} {}", report.meta.dataset),
        _ => report.meta.dataset.clone(),
    };
    let _ = writeln!(out, r#"<title>{}</title>"#, escape(&title));
    let _ = writeln!(
        out,
        r#"<path class="axes" d="M {m} {m} L {m} {b} L {r} {b}" fill="none" stroke="black" stroke-width="1"/>"#,
        b = m + s,
        r = m + s
    );
    for bin in &report.bins {
        let Some(acc) = bin.accuracy() else { continue };
        let (x0, x1) = (layout.x(bin.lower), layout.x(bin.upper));
        let top = layout.y(acc);
        let _ = writeln!(
            out,
            r#"<rect class="bar" x="{x0:.3}" y="{top:.3}" width="{:.3}" height="{:.3}" fill="steelblue" fill-opacity="0.8" stroke="navy" stroke-width="0.5"/>"#,
            x1 - x0,
            m + s - top
        );
    }
    let _ = writeln!(
        out,
        r#"<line class="diagonal" x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
        layout.x(0.0),
        layout.y(0.0),
        layout.x(1.0),
        layout.y(1.0)
    );
    let n = report.n.max(1) as f64;
    for bin in report.bins.iter().filter(|b| b.count > 0) {
        let cx = layout.x(0.5 * (bin.lower + bin.upper));
        let cy = layout.y(bin.count as f64 / n);
        let _ = writeln!(
            out,
            r#"<path class="density" d="M {:.3} {:.3} L {:.3} {:.3} M {:.3} {:.3} L {:.3} {:.3}" stroke="darkorange" stroke-width="1.5"/>"#,
            cx - 4.0,
            cy - 4.0,
            cx + 4.0,
            cy + 4.0,
            cx - 4.0,
            cy + 4.0,
            cx + 4.0,
            cy - 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">confidence</text>"#,
        m + s / 2.0,
        m + s + 32.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">accuracy</text>"#,
        m + s / 2.0,
        m + s / 2.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">ECE {:.4}  MCE {:.4}  n {}</text>"#,
        m + 8.0,
        m + 16.0,
        report.ece,
        report.mce,
        report.n
    );
    out.push_str("</svg>\n");
    out
}

pub fn write_reliability_svg(report: &ReliabilityReport, path: &Path) -> Result<()> {
    fs::write(path, reliability_svg(report, DiagramLayout::default()))?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

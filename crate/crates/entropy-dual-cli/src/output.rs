use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

/// Collects every file written by one command so the manifest can list it.
pub struct OutputDir {
    root: PathBuf,
    pub files: Vec<FileEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), files: vec![] })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        fs::write(self.root.join(name), bytes)?;
        self.files.push(FileEntry { path: name.to_string(), bytes: bytes.len(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> io::Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> io::Result<()> {
        let mut text = header.join(",");
        text.push('\n');
        for r in rows {
            let line: Vec<String> = r.iter().map(|x| format!("{x:e}")).collect();
            text.push_str(&line.join(","));
            text.push('\n');
        }
        self.write(name, text.as_bytes())
    }

    /// Little-endian `f64` stream.
    pub fn binary(&mut self, name: &str, data: impl Iterator<Item = f64>) -> io::Result<()> {
        let bytes: Vec<u8> = data.flat_map(f64::to_le_bytes).collect();
        self.write(name, &bytes)
    }

    pub fn svg(&mut self, name: &str, plot: &LinePlot) -> io::Result<()> {
        self.write(name, plot.render().as_bytes())
    }
}

pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub series: Vec<(String, Vec<(f64, f64)>)>,
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

impl LinePlot {
    /// Self-contained SVG with axes, min/max tick labels and a legend.
    pub fn render(&self) -> String {
        let (w, h, pad) = (640.0, 400.0, 60.0);
        let pts = self.series.iter().flat_map(|(_, s)| s.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 <= 0.0 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 <= 1e-300 * y0.abs().max(1.0) {
            let d = 0.5 * y0.abs().max(1e-12);
            (y0, y1) = (y0 - d, y1 + d);
        }
        let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
        let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, w / 2.0, escape(&self.title));
        let _ = writeln!(s, r#"<polyline points="{pad},{} {pad},{} {},{}" fill="none" stroke="black"/>"#, pad, h - pad, w - pad, h - pad);
        let _ = writeln!(s, r#"<text x="{pad}" y="{}" font-size="11">{x0:.4e}</text>"#, h - pad + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{x1:.4e}</text>"#, w - pad, h - pad + 16.0);
        let _ =
            writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, escape(&self.x_label));
        let _ = writeln!(s, r#"<text x="4" y="{}" font-size="11">{y0:.4e}</text>"#, h - pad - 4.0);
        let _ = writeln!(s, r#"<text x="4" y="{}" font-size="11">{y1:.4e}</text>"#, pad - 4.0);
        for (i, (label, pts)) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> =
                pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.join(" "));
            let ly = pad + 16.0 * i as f64;
            let _ =
                writeln!(s, r#"<text x="{}" y="{ly}" font-size="12" fill="{color}" text-anchor="end">{}</text>"#, w - pad, escape(label));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_abc() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn svg_handles_flat_and_empty_series() {
        let flat = LinePlot { title: "a<b".into(), x_label: "t".into(), series: vec![("K".into(), vec![(0.0, 1.0), (1.0, 1.0)])] };
        let s = flat.render();
        assert!(s.starts_with("<svg") && s.contains("a&lt;b") && !s.contains("NaN"));
        let empty = LinePlot { title: String::new(), x_label: String::new(), series: vec![] };
        assert!(empty.render().ends_with("</svg>\n"));
    }
}

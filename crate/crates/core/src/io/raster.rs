//! Spike rasters as event CSV and per-depth SVG scatter panels.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::block::SpikeProbe;
use crate::energy::measure_firing_rates;
use crate::error::{Error, Result};

pub const RASTER_HEADER: &str = "block,plif_index,t,c,l";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterFormat {
    Csv,
    Svg,
}

impl std::str::FromStr for RasterFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "csv" => Ok(RasterFormat::Csv),
            "svg" => Ok(RasterFormat::Svg),
            other => Err(format!("unknown raster format {other:?}, expected csv or svg")),
        }
    }
}

/// One row per spike, ordered by site then `(t, c, l)`.
pub fn raster_csv(probe: &SpikeProbe) -> String {
    let mut s = String::with_capacity(32 * probe.total_spikes() + 32);
    s.push_str(RASTER_HEADER);
    s.push('\n');
    for site in &probe.sites {
        for ((t, c, l), &v) in site.spikes.indexed_iter() {
            if v == 1 {
                let _ = writeln!(s, "{},{},{t},{c},{l}", site.block, site.plif_index);
            }
        }
    }
    s
}

/// Events as `[block, plif_index, t, c, l]`.
pub fn parse_raster_csv(text: &str) -> Result<Vec<[usize; 5]>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RASTER_HEADER) {
        return Err(Error::InvalidInput(format!("raster CSV must start with {RASTER_HEADER:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let row: Option<Vec<usize>> =
            (fields.len() == 5).then(|| fields.iter().map(|f| f.trim().parse().ok()).collect()).flatten();
        match row {
            Some(r) => out.push([r[0], r[1], r[2], r[3], r[4]]),
            None => return Err(Error::InvalidInput(format!("raster CSV line {}: {line:?}", i + 2))),
        }
    }
    Ok(out)
}

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 180.0;
const MARGIN: f64 = 28.0;

/// One panel per block; the neuron layer before `pw1` occupies the upper
/// rows and the one before `pw2` the lower rows. Each panel carries the
/// block's gated-op weighted firing rate.
pub fn raster_svg(probe: &SpikeProbe) -> Result<String> {
    let n_blocks = probe.n_blocks();
    let height = n_blocks as f64 * (PANEL_H + MARGIN) + MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{height}" viewBox="0 0 {w} {height}">"#,
        w = PANEL_W + 2.0 * MARGIN
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for b in 0..n_blocks {
        let sites: Vec<_> = probe.sites.iter().filter(|x| x.block == b).cloned().collect();
        let y0 = MARGIN + b as f64 * (PANEL_H + MARGIN);
        let _ = writeln!(s, r#"<g class="panel" data-block="{b}">"#);
        let _ = writeln!(
            s,
            r##"<rect x="{MARGIN}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#888"/>"##
        );
        if sites.is_empty() {
            let _ = writeln!(s, "</g>");
            continue;
        }
        let rate = measure_firing_rates(&SpikeProbe { sites: sites.clone() })?.mean;
        let _ = writeln!(
            s,
            r#"<text class="rate" x="{MARGIN}" y="{}" font-size="12" data-block="{b}" data-rate="{rate:e}">block {b}: r = {:.2}%</text>"#,
            y0 - 6.0,
            100.0 * rate
        );
        let rows: usize = sites.iter().map(|x| x.spikes.dim().1).sum();
        let cols = sites.iter().map(|x| x.spikes.dim().0 * x.spikes.dim().2).max().unwrap_or(1).max(1);
        let (dx, dy) = (PANEL_W / cols as f64, PANEL_H / rows.max(1) as f64);
        let mut row0 = 0;
        for site in &sites {
            let (_, c_site, l_site) = site.spikes.dim();
            for ((t, c, l), &v) in site.spikes.indexed_iter() {
                if v == 1 {
                    let x = MARGIN + (t * l_site + l) as f64 * dx;
                    let y = y0 + (row0 + c) as f64 * dy;
                    let _ = writeln!(
                        s,
                        r#"<rect x="{x:.3}" y="{y:.3}" width="{:.3}" height="{:.3}" fill="black"/>"#,
                        dx.max(0.5),
                        dy.max(0.5)
                    );
                }
            }
            row0 += c_site;
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn export_raster(probe: &SpikeProbe, path: impl AsRef<Path>, format: RasterFormat) -> Result<()> {
    let text = match format {
        RasterFormat::Csv => raster_csv(probe),
        RasterFormat::Svg => raster_svg(probe)?,
    };
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use ndarray::Array3;

    use super::*;
    use crate::block::SiteRecord;

    fn probe_with(events: &[(usize, usize, usize, usize, usize)]) -> SpikeProbe {
        let mut sites = Vec::new();
        for b in 0..2 {
            for idx in 1..=2 {
                let mut a = Array3::<u8>::zeros((2, 3 * idx, 4));
                for &(eb, ei, t, c, l) in events {
                    if eb == b && ei == idx {
                        a[[t, c, l]] = 1;
                    }
                }
                sites.push(SiteRecord { block: b, plif_index: idx, spikes: a, fan_out: if idx == 1 { 6 } else { 3 } });
            }
        }
        SpikeProbe { sites }
    }

    #[test]
    fn zero_spikes_header_only() {
        assert_eq!(raster_csv(&probe_with(&[])), format!("{RASTER_HEADER}\n"));
    }

    #[test]
    fn three_events_three_rows() {
        let ev = [(0, 1, 0, 2, 3), (1, 2, 1, 5, 0), (1, 1, 1, 0, 0)];
        let csv = raster_csv(&probe_with(&ev));
        let rows = parse_raster_csv(&csv).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.contains(&[1, 2, 1, 5, 0]));
    }

    #[test]
    fn svg_panels_and_rates() {
        let ev = [(0, 1, 0, 2, 3), (1, 2, 1, 5, 0), (1, 1, 1, 0, 0)];
        let probe = probe_with(&ev);
        let svg = raster_svg(&probe).unwrap();
        assert_eq!(svg.matches(r#"<g class="panel""#).count(), 2);
        for b in 0..2 {
            let sub = SpikeProbe { sites: probe.sites.iter().filter(|s| s.block == b).cloned().collect() };
            let want = measure_firing_rates(&sub).unwrap().mean;
            let tag = format!(r#"data-block="{b}" data-rate=""#);
            let start = svg.find(&tag).unwrap() + tag.len();
            let got: f64 = svg[start..].split('"').next().unwrap().parse().unwrap();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn malformed_csv_rejected() {
        assert!(parse_raster_csv("a,b\n").is_err());
        assert!(parse_raster_csv(&format!("{RASTER_HEADER}\n1,2,3\n")).is_err());
    }
}

//! Static comparison figure: one column per signal, waveform on top and
//! log-magnitude spectrogram below. Amplitude and colour scales are shared
//! across columns.

use std::path::Path;

use image::{Rgb, RgbImage};
use radgan_core::audio::{stft, SpectrogramConfig, WaveformSegment};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Panel {
    pub label: String,
    pub wave: WaveformSegment,
}

#[derive(Clone, Copy, Debug)]
pub struct PlotLayout {
    pub column_width: u32,
    pub wave_height: u32,
    pub spec_height: u32,
    pub margin: u32,
    /// Spectrogram range below the global peak.
    pub dynamic_range_db: f64,
}

impl Default for PlotLayout {
    fn default() -> Self {
        Self {
            column_width: 320,
            wave_height: 120,
            spec_height: 160,
            margin: 6,
            dynamic_range_db: 80.0,
        }
    }
}

impl PlotLayout {
    pub fn size(&self, columns: u32) -> (u32, u32) {
        (
            columns * self.column_width + (columns + 1) * self.margin,
            self.wave_height + self.spec_height + 3 * self.margin,
        )
    }
}

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const TRACE: Rgb<u8> = Rgb([31, 73, 125]);
const AXIS: Rgb<u8> = Rgb([200, 200, 200]);

// Dark-to-bright ramp, sampled from a perceptual sequential map.
const RAMP: [[f64; 3]; 5] = [
    [0.0, 0.0, 4.0],
    [81.0, 18.0, 124.0],
    [183.0, 55.0, 121.0],
    [252.0, 137.0, 97.0],
    [252.0, 253.0, 191.0],
];

fn colour(t: f64) -> Rgb<u8> {
    let x = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (RAMP[i][k] + f * (RAMP[i + 1][k] - RAMP[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Renders `panels` left to right.
pub fn render(panels: &[Panel], layout: &PlotLayout) -> Result<RgbImage> {
    if panels.is_empty() {
        return Err(Error::Other("nothing to plot".into()));
    }
    let (w, h) = layout.size(panels.len() as u32);
    let mut img = RgbImage::from_pixel(w, h, BACKGROUND);
    let peak = panels
        .iter()
        .flat_map(|p| p.wave.samples())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-9);
    let cfg = SpectrogramConfig::paper();
    let specs = panels
        .iter()
        .map(|p| {
            let s = stft(&p.wave, &cfg)?;
            let db: Vec<f64> = s.magnitude().iter().map(|m| 20.0 * m.max(1e-10).log10()).collect();
            Ok((s.bins, s.frames, db))
        })
        .collect::<Result<Vec<_>>>()?;
    let top_db = specs
        .iter()
        .flat_map(|(_, _, d)| d.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);

    for (col, (panel, (bins, frames, db))) in panels.iter().zip(&specs).enumerate() {
        let x0 = layout.margin + col as u32 * (layout.column_width + layout.margin);
        let y_wave = layout.margin;
        let mid = y_wave + layout.wave_height / 2;
        for x in 0..layout.column_width {
            img.put_pixel(x0 + x, mid, AXIS);
        }
        let s = panel.wave.samples();
        let per_px = s.len() as f64 / layout.column_width as f64;
        let half = (layout.wave_height / 2) as f64 - 1.0;
        for x in 0..layout.column_width {
            let a = (x as f64 * per_px) as usize;
            let b = (((x + 1) as f64 * per_px) as usize).clamp(a + 1, s.len().max(a + 1));
            let chunk = &s[a.min(s.len())..b.min(s.len())];
            if chunk.is_empty() {
                continue;
            }
            let lo = chunk.iter().copied().fold(f64::INFINITY, f64::min) / peak;
            let hi = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max) / peak;
            let y_hi = (mid as f64 - hi * half).round() as u32;
            let y_lo = (mid as f64 - lo * half).round() as u32;
            for y in y_hi..=y_lo {
                img.put_pixel(x0 + x, y, TRACE);
            }
        }
        let y_spec = y_wave + layout.wave_height + layout.margin;
        for x in 0..layout.column_width {
            let frame = ((x as usize * frames) / layout.column_width as usize).min(frames - 1);
            for y in 0..layout.spec_height {
                // Low frequencies at the bottom.
                let bin = ((layout.spec_height - 1 - y) as usize * bins) / layout.spec_height as usize;
                let v = db[bin * frames + frame];
                let t = 1.0 - (top_db - v) / layout.dynamic_range_db;
                img.put_pixel(x0 + x, y_spec + y, colour(t));
            }
        }
    }
    Ok(img)
}

pub fn save(path: &Path, panels: &[Panel], layout: &PlotLayout) -> Result<()> {
    render(panels, layout)?.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(label: &str, f: f64) -> Panel {
        Panel {
            label: label.into(),
            wave: WaveformSegment::at_8k((0..4000).map(|i| (i as f64 * f).sin() * 0.3).collect()).unwrap(),
        }
    }

    #[test]
    fn four_columns_give_the_expected_canvas() {
        let l = PlotLayout::default();
        let panels: Vec<Panel> = ["clean", "noisy", "wvn", "rad-gan"]
            .iter()
            .enumerate()
            .map(|(i, n)| panel(n, 0.1 + 0.2 * i as f64))
            .collect();
        let img = render(&panels, &l).unwrap();
        assert_eq!(img.dimensions(), (4 * 320 + 5 * 6, 120 + 160 + 18));
        // Each column's brightest spectrogram row sits at its tone's height.
        let y_spec = l.margin * 2 + l.wave_height;
        let lum = |p: &Rgb<u8>| p[0] as u32 + p[1] as u32 + p[2] as u32;
        for c in 0..4u32 {
            let x = l.margin + c * (l.column_width + l.margin) + l.column_width / 2;
            let brightest = (0..l.spec_height)
                .max_by_key(|&y| lum(img.get_pixel(x, y_spec + y)))
                .unwrap();
            let frac = (0.1 + 0.2 * c as f64) / std::f64::consts::PI;
            let expected = (l.spec_height - 1) as f64 - frac * l.spec_height as f64;
            assert!(
                (brightest as f64 - expected).abs() <= 2.0,
                "column {c}: {brightest} vs {expected}"
            );
        }
    }

    #[test]
    fn colour_ramp_is_monotone_in_brightness() {
        let lum = |c: Rgb<u8>| c[0] as u32 + c[1] as u32 + c[2] as u32;
        let l: Vec<u32> = (0..=20).map(|i| lum(colour(i as f64 / 20.0))).collect();
        assert!(l.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(render(&[], &PlotLayout::default()).is_err());
    }
}

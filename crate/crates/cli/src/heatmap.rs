//! PNG rendering of band-energy profiles: one row band per segment, one
//! column per STFT frame, linear color scale against the global maximum.

use std::path::Path;

use handcap::pipeline::Error;
use handcap::spectral::BandEnergyProfile;
use image::{Rgb, RgbImage};

const ROW_PX: u32 = 12;
const MAX_WIDTH: usize = 2000;
const EMPTY: Rgb<u8> = Rgb([96, 96, 96]);

// Dark blue through teal and yellow.
const STOPS: [[f64; 3]; 5] = [
    [13.0, 8.0, 135.0],
    [84.0, 2.0, 163.0],
    [33.0, 145.0, 140.0],
    [144.0, 215.0, 67.0],
    [253.0, 231.0, 37.0],
];

pub fn color(x: f64) -> Rgb<u8> {
    let x = x.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Frames are max-pooled into at most `MAX_WIDTH` columns so bursts stay
/// visible on long sessions.
pub fn image(p: &BandEnergyProfile) -> RgbImage {
    let frames = p.frame_times.len().max(1);
    let width = frames.min(MAX_WIDTH);
    let peak = p.energy.iter().flatten().fold(0.0f64, |m, v| m.max(*v));
    let mut img = RgbImage::new(width as u32, ROW_PX * p.labels.len().max(1) as u32);
    for (r, row) in p.energy.iter().enumerate() {
        for c in 0..width {
            let px = if row.is_empty() {
                EMPTY
            } else {
                let (a, b) = (c * frames / width, ((c + 1) * frames / width).max(c * frames / width + 1));
                let v = row[a..b.min(row.len())].iter().fold(0.0f64, |m, v| m.max(*v));
                color(if peak > 0.0 { v / peak } else { 0.0 })
            };
            for y in 0..ROW_PX {
                img.put_pixel(c as u32, r as u32 * ROW_PX + y, px);
            }
        }
    }
    img
}

pub fn render(p: &BandEnergyProfile, out: &Path) -> Result<(), Error> {
    image(p).save(out).map_err(|e| Error::Invalid(format!("{}: {e}", out.display())))
}

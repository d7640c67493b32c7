use std::io::Cursor;
use std::path::Path;

use anyhow::Context;
use image::{ImageFormat, Rgb, RgbImage};
use mrad_core::{write_atomic, AnomalyMap};

/// Blue-cyan-yellow-red ramp over [0, 1].
fn colormap(v: f32) -> Rgb<u8> {
    const STOPS: [(f32, [f32; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.5]),
        (0.25, [0.0, 0.4, 1.0]),
        (0.5, [0.0, 1.0, 1.0]),
        (0.75, [1.0, 1.0, 0.0]),
        (1.0, [1.0, 0.0, 0.0]),
    ];
    let v = if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let i = STOPS
        .iter()
        .rposition(|s| s.0 <= v)
        .unwrap_or(0)
        .min(STOPS.len() - 2);
    let ((a, ca), (b, cb)) = (STOPS[i], STOPS[i + 1]);
    let t = (v - a) / (b - a);
    let ch = |k: usize| ((ca[k] + (cb[k] - ca[k]) * t) * 255.0).round() as u8;
    Rgb([ch(0), ch(1), ch(2)])
}

pub fn write_heatmap(map: &AnomalyMap, path: &Path) -> anyhow::Result<()> {
    let img = RgbImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        colormap(map.get(y as usize, x as usize))
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .with_context(|| format!("encoding {}", path.display()))?;
    write_atomic(path, buf.get_ref())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), Rgb([0, 0, 128]));
        assert_eq!(colormap(1.0), Rgb([255, 0, 0]));
        assert_eq!(colormap(f32::NAN), colormap(0.0));
        assert_eq!(colormap(0.5), Rgb([0, 255, 255]));
    }
}

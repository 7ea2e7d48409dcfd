use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `count` images (`count x channels x h x w`, values in [0, 1]) as a
/// binary PGM (1 channel) or PPM (3 channels) grid with `cols` columns and a
/// one-pixel black gutter.
pub fn write_grid(
    path: &Path,
    images: &[f32],
    count: usize,
    channels: usize,
    h: usize,
    w: usize,
    cols: usize,
) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::contract(format!("preview needs 1 or 3 channels, got {channels}")));
    }
    if images.len() != count * channels * h * w || cols == 0 {
        return Err(Error::shape("preview", format!("{} values for {count} x {channels} x {h} x {w}", images.len())));
    }
    let rows = count.div_ceil(cols).max(1);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut canvas = vec![0u8; gw * gh * channels];
    for n in 0..count {
        let (oy, ox) = ((n / cols) * (h + 1) + 1, (n % cols) * (w + 1) + 1);
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    let v = images[((n * channels + c) * h + y) * w + x];
                    canvas[((oy + y) * gw + ox + x) * channels + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "{}\n{gw} {gh}\n255\n", if channels == 1 { "P5" } else { "P6" })?;
    out.write_all(&canvas)?;
    out.flush()?;
    Ok(())
}

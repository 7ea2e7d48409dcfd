//! IDX reader/writer for MNIST-style files: big-endian magic
//! (0x00000803 images, 0x00000801 labels), big-endian u32 extents, u8 payload.

use std::fs;
use std::path::Path;

use super::{Dataset, IMAGE_LEN};
use crate::classifier::IMAGE_SIZE;
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn fail(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, detail: detail.into() }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| fail(bytes.len(), format!("truncated {what}")))
}

/// Returns (extents, payload offset) after checking the magic number.
fn header(bytes: &[u8], magic: u32, rank: usize, what: &str) -> Result<(Vec<usize>, usize)> {
    let found = be_u32(bytes, 0, "magic")?;
    if found != magic {
        return Err(fail(0, format!("{what}: magic {found:#010x}, expected {magic:#010x}")));
    }
    let dims = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i, "dimensions").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    Ok((dims, 4 + 4 * rank))
}

/// Decodes IDX image and label buffers, keeping the first `limit` records.
/// Images narrower than 32 are zero-padded symmetrically; gray values are
/// replicated to three channels and scaled to [0, 1].
pub fn parse_idx(images: &[u8], labels: &[u8], limit: Option<usize>, name: &str) -> Result<Dataset> {
    let (idims, ioff) = header(images, IMAGE_MAGIC, 3, "images")?;
    let (ldims, loff) = header(labels, LABEL_MAGIC, 1, "labels")?;
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if ldims[0] != n {
        return Err(fail(4, format!("{} labels for {n} images", ldims[0])));
    }
    if h > IMAGE_SIZE || w > IMAGE_SIZE {
        return Err(fail(8, format!("{h}x{w} images exceed {IMAGE_SIZE}x{IMAGE_SIZE}")));
    }
    let n = limit.map_or(n, |l| l.min(n));
    let plane = h * w;
    let need = ioff + n * plane;
    if images.len() < need {
        return Err(fail(images.len(), format!("image payload truncated: {need} bytes needed")));
    }
    if labels.len() < loff + n {
        return Err(fail(labels.len(), format!("label payload truncated: {} bytes needed", loff + n)));
    }
    let (top, left) = ((IMAGE_SIZE - h) / 2, (IMAGE_SIZE - w) / 2);
    let mut out = vec![0f32; n * IMAGE_LEN];
    for i in 0..n {
        let src = &images[ioff + i * plane..ioff + (i + 1) * plane];
        let dst = &mut out[i * IMAGE_LEN..(i + 1) * IMAGE_LEN];
        for r in 0..h {
            for c in 0..w {
                let v = src[r * w + c] as f32 / 255.0;
                let p = (top + r) * IMAGE_SIZE + left + c;
                for ch in 0..3 {
                    dst[ch * IMAGE_SIZE * IMAGE_SIZE + p] = v;
                }
            }
        }
    }
    let ys: Vec<usize> = labels[loff..loff + n].iter().map(|&y| y as usize).collect();
    if let Some(pos) = ys.iter().position(|&y| y >= 10) {
        return Err(fail(loff + pos, format!("label {} outside 0..10", ys[pos])));
    }
    Dataset::new(name, out, ys, 10)
}

pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let name = images.file_stem().and_then(|s| s.to_str()).unwrap_or("idx").to_string();
    parse_idx(&fs::read(images)?, &fs::read(labels)?, limit, &name)
}

/// Encodes `n` gray `h x w` images and labels as (image file, label file) bytes.
pub fn write_idx(pixels: &[u8], labels: &[u8], h: usize, w: usize) -> (Vec<u8>, Vec<u8>) {
    let n = labels.len();
    assert_eq!(pixels.len(), n * h * w, "pixel count");
    let mut img = IMAGE_MAGIC.to_be_bytes().to_vec();
    for d in [n, h, w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = LABEL_MAGIC.to_be_bytes().to_vec();
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_images() -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let pixels: Vec<u8> = (0..2 * 28 * 28).map(|i| (i * 7 % 256) as u8).collect();
        let (img, lab) = write_idx(&pixels, &[3, 9], 28, 28);
        (pixels, img, lab)
    }

    #[test]
    fn round_trip_pads_and_replicates() {
        let (pixels, img, lab) = two_images();
        let ds = parse_idx(&img, &lab, None, "t").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[3, 9]);
        let im = ds.image(1);
        for r in 0..32 {
            for c in 0..32 {
                let expect = if (2..30).contains(&r) && (2..30).contains(&c) {
                    pixels[28 * 28 + (r - 2) * 28 + (c - 2)] as f32 / 255.0
                } else {
                    0.0
                };
                for ch in 0..3 {
                    assert_eq!(im[ch * 1024 + r * 32 + c], expect);
                }
            }
        }
    }

    #[test]
    fn limit_truncates() {
        let (_, img, lab) = two_images();
        assert_eq!(parse_idx(&img, &lab, Some(0), "t").unwrap().len(), 0);
        assert_eq!(parse_idx(&img, &lab, Some(1), "t").unwrap().labels(), &[3]);
    }

    #[test]
    fn format_errors_carry_offsets() {
        let (_, mut img, lab) = two_images();
        let cut = img.len() - 10;
        match parse_idx(&img[..cut], &lab, None, "t") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, cut),
            other => panic!("{other:?}"),
        }
        img[3] = 0x01;
        assert!(matches!(parse_idx(&img, &lab, None, "t"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx(&lab, &lab, None, "t"), Err(Error::Format { offset: 0, .. })));
    }
}

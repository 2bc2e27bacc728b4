//! Portable float map: `PF` (RGB) or `Pf` (gray), rows stored bottom to top,
//! negative scale meaning little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0;
    let mut token = |what: &str| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data(path, format!("missing {what} at byte {start}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token("magic")?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        m => return Err(Error::data(path, format!("bad PFM magic {m:?} at byte 0"))),
    };
    let parse = |s: String, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::data(path, format!("invalid {what} {s:?} in PFM header")))
    };
    let w = parse(token("width")?, "width")? as usize;
    let h = parse(token("height")?, "height")? as usize;
    let scale = parse(token("scale")?, "scale")?;
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let little = scale < 0.0;
    let need = w * h * channels * 4;
    if bytes.len() < start + need {
        return Err(Error::data(
            path,
            format!("truncated raster: expected {need} bytes from byte {start}, found {}", bytes.len().saturating_sub(start)),
        ));
    }
    let mut img = Image::zeros(channels, h, w);
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            for c in 0..channels {
                let o = start + ((row * w + x) * channels + c) * 4;
                let b = [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]];
                let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
                img.data[(c * h + y) * w + x] = v;
            }
        }
    }
    Ok(img)
}

/// Little-endian encoding with scale `-1`.
pub fn encode_pfm(img: &Image) -> Vec<u8> {
    assert!(img.channels == 1 || img.channels == 3, "PFM holds 1 or 3 channels");
    let magic = if img.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let (h, w) = (img.height, img.width);
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            for c in 0..img.channels {
                out.extend_from_slice(&img.data[(c * h + y) * w + x].to_le_bytes());
            }
        }
    }
    out
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_pfm(img)).map_err(|e| Error::io(path, e))
}

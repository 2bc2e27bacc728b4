//! Radiance RGBE (`.hdr`) reader and writer. Reads flat and run-length
//! encoded scanlines; writes run-length encoded scanlines.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// `byte * 2^(e - 136)`, black for `e = 0`.
pub fn rgbe_to_rgb(q: [u8; 4]) -> [f32; 3] {
    if q[3] == 0 {
        return [0.0; 3];
    }
    let f = 2f64.powi(q[3] as i32 - 136);
    [q[0] as f64 * f, q[1] as f64 * f, q[2] as f64 * f].map(|v| v as f32)
}

pub fn rgb_to_rgbe(rgb: [f32; 3]) -> [u8; 4] {
    let v = rgb[0].max(rgb[1]).max(rgb[2]) as f64;
    if !(v >= 1e-32) {
        return [0; 4];
    }
    // v = m 2^e with m in [0.5, 1)
    let mut e = v.log2().floor() as i32 + 1;
    let mut m = v / 2f64.powi(e);
    if m >= 1.0 {
        m /= 2.0;
        e += 1;
    } else if m < 0.5 {
        m *= 2.0;
        e -= 1;
    }
    if e + 128 > 255 {
        return [255, 255, 255, 255];
    }
    if e + 128 < 1 {
        return [0; 4];
    }
    let k = m * 256.0 / v;
    let q = |c: f32| ((c.max(0.0) as f64) * k).floor().min(255.0) as u8;
    [q(rgb[0]), q(rgb[1]), q(rgb[2]), (e + 128) as u8]
}

pub fn decode_rgbe(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |off: usize, msg: &str| Error::data(path, format!("{msg} at byte {off}"));
    let mut pos = 0;
    let line = |pos: &mut usize| -> Option<(usize, String)> {
        let start = *pos;
        let end = bytes[start..].iter().position(|&b| b == b'\n')? + start;
        *pos = end + 1;
        Some((start, String::from_utf8_lossy(&bytes[start..end]).into_owned()))
    };
    match line(&mut pos) {
        Some((_, l)) if l.starts_with("#?RADIANCE") || l.starts_with("#?RGBE") => {}
        _ => return Err(bad(0, "missing #?RADIANCE magic")),
    }
    loop {
        let Some((off, l)) = line(&mut pos) else {
            return Err(bad(pos, "unterminated header"));
        };
        if l.is_empty() {
            break;
        }
        if let Some(fmt) = l.strip_prefix("FORMAT=") {
            if fmt != "32-bit_rle_rgbe" {
                return Err(bad(off, &format!("unsupported format {fmt:?}")));
            }
        }
    }
    let Some((off, res)) = line(&mut pos) else {
        return Err(bad(pos, "missing resolution line"));
    };
    let parts: Vec<&str> = res.split_whitespace().collect();
    let (h, w) = match parts.as_slice() {
        ["-Y", h, "+X", w] => (
            h.parse::<usize>().map_err(|_| bad(off, "bad height"))?,
            w.parse::<usize>().map_err(|_| bad(off, "bad width"))?,
        ),
        _ => return Err(bad(off, &format!("unsupported resolution line {res:?}"))),
    };
    let mut img = Image::zeros(3, h, w);
    let mut scan = vec![[0u8; 4]; w];
    for y in 0..h {
        read_scanline(bytes, &mut pos, &mut scan, path)?;
        for (x, q) in scan.iter().enumerate() {
            let rgb = rgbe_to_rgb(*q);
            for c in 0..3 {
                img.data[(c * h + y) * w + x] = rgb[c];
            }
        }
    }
    Ok(img)
}

fn read_scanline(bytes: &[u8], pos: &mut usize, scan: &mut [[u8; 4]], path: &Path) -> Result<()> {
    let w = scan.len();
    let trunc = |p: usize| Error::data(path, format!("truncated scanline at byte {p}"));
    let get = |p: usize| bytes.get(p).copied().ok_or_else(|| trunc(p));
    let rle = (8..=0x7fff).contains(&w)
        && bytes.len() >= *pos + 4
        && bytes[*pos] == 2
        && bytes[*pos + 1] == 2
        && bytes[*pos + 2] & 0x80 == 0;
    if !rle {
        for q in scan.iter_mut() {
            if *pos + 4 > bytes.len() {
                return Err(trunc(*pos));
            }
            q.copy_from_slice(&bytes[*pos..*pos + 4]);
            *pos += 4;
        }
        return Ok(());
    }
    let len = ((bytes[*pos + 2] as usize) << 8) | bytes[*pos + 3] as usize;
    if len != w {
        return Err(Error::data(path, format!("scanline width mismatch at byte {}", *pos)));
    }
    *pos += 4;
    for c in 0..4 {
        let mut x = 0;
        while x < w {
            let n = get(*pos)? as usize;
            *pos += 1;
            if n > 128 {
                let count = n - 128;
                let v = get(*pos)?;
                *pos += 1;
                if x + count > w {
                    return Err(Error::data(path, format!("run overflows scanline at byte {}", *pos - 2)));
                }
                for q in &mut scan[x..x + count] {
                    q[c] = v;
                }
                x += count;
            } else {
                if n == 0 || x + n > w {
                    return Err(Error::data(path, format!("bad literal run at byte {}", *pos - 1)));
                }
                for q in &mut scan[x..x + n] {
                    q[c] = get(*pos)?;
                    *pos += 1;
                }
                x += n;
            }
        }
    }
    Ok(())
}

pub fn encode_rgbe(img: &Image) -> Vec<u8> {
    assert_eq!(img.channels, 3, "RGBE holds RGB images");
    let (h, w) = (img.height, img.width);
    let mut out = format!("#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {h} +X {w}\n").into_bytes();
    let mut scan = vec![[0u8; 4]; w];
    for y in 0..h {
        for (x, q) in scan.iter_mut().enumerate() {
            *q = rgb_to_rgbe([0, 1, 2].map(|c| img.data[(c * h + y) * w + x]));
        }
        if !(8..=0x7fff).contains(&w) {
            scan.iter().for_each(|q| out.extend_from_slice(q));
            continue;
        }
        out.extend_from_slice(&[2, 2, (w >> 8) as u8, (w & 0xff) as u8]);
        for c in 0..4 {
            let chan: Vec<u8> = scan.iter().map(|q| q[c]).collect();
            encode_channel(&chan, &mut out);
        }
    }
    out
}

fn encode_channel(v: &[u8], out: &mut Vec<u8>) {
    let mut i = 0;
    let mut literal_start = 0;
    let flush = |out: &mut Vec<u8>, from: usize, to: usize| {
        let mut s = from;
        while s < to {
            let n = (to - s).min(128);
            out.push(n as u8);
            out.extend_from_slice(&v[s..s + n]);
            s += n;
        }
    };
    while i < v.len() {
        let mut run = 1;
        while i + run < v.len() && v[i + run] == v[i] && run < 127 {
            run += 1;
        }
        if run >= 4 {
            flush(out, literal_start, i);
            out.push(128 + run as u8);
            out.push(v[i]);
            i += run;
            literal_start = i;
        } else {
            i += run;
        }
    }
    flush(out, literal_start, v.len());
}

pub fn read_rgbe(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rgbe(&bytes, path)
}

pub fn write_rgbe(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_rgbe(img)).map_err(|e| Error::io(path, e))
}

//! Greyscale image files and raw dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::wavelet::{Image, WaveletLayout};

/// Load an 8-bit PGM (P2/P5) or greyscale PNG, intensities scaled to `[0, 1]`.
/// With `levels`, the size must be divisible by `2^levels`.
pub fn load_image(path: &Path, levels: Option<usize>) -> Result<Image> {
    let bytes = fs::read(path)?;
    let image = if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        parse_pgm(&bytes)?
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)?
    } else {
        return Err(Error::UnsupportedImage(format!(
            "{}: not a PGM or PNG file",
            path.display()
        )));
    };
    if let Some(l) = levels {
        WaveletLayout::new(image.height, image.width, l)?;
    }
    Ok(image)
}

fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::UnsupportedImage(format!("PGM: {m}"));
    let mut pos = 2;
    let mut header = [0usize; 3];
    for slot in &mut header {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while !matches!(bytes.get(pos), Some(b'\n') | None) {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    let [width, height, maxval] = header;
    if maxval == 0 || maxval > 255 {
        return Err(bad(&format!(
            "only 8-bit images are supported (maxval {maxval})"
        )));
    }
    let n = width * height;
    let scale = 1.0 / maxval as f64;
    let values: Vec<u8> = if bytes[1] == b'5' {
        // exactly one whitespace byte after maxval
        let data = bytes
            .get(pos + 1..pos + 1 + n)
            .ok_or_else(|| bad("truncated pixel data"))?;
        data.to_vec()
    } else {
        let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| bad("non-ASCII data"))?;
        let vals: Vec<u8> = text
            .split_ascii_whitespace()
            .take(n)
            .map(|t| t.parse::<u8>().map_err(|_| bad("bad sample")))
            .collect::<Result<_>>()?;
        if vals.len() != n {
            return Err(bad("truncated pixel data"));
        }
        vals
    };
    if values.iter().any(|&v| v as usize > maxval) {
        return Err(bad("sample exceeds maxval"));
    }
    Image::new(
        height,
        width,
        values.iter().map(|&v| v as f64 * scale).collect(),
    )
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::UnsupportedImage(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f64> = match img {
        image::DynamicImage::ImageLuma8(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
        image::DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        other => {
            return Err(Error::UnsupportedImage(format!(
                "PNG is not greyscale ({:?})",
                other.color()
            )))
        }
    };
    Image::new(h, w, pixels)
}

/// 8-bit samples of `pixels` clipped to `[0, 1]`.
pub fn to_bytes(pixels: &[f64]) -> Vec<u8> {
    pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Binary PGM, maxval 255.
pub fn save_pgm(image: &Image, path: &Path) -> Result<()> {
    write_pgm_bytes(image.height, image.width, &to_bytes(&image.pixels), path)
}

fn write_pgm_bytes(height: usize, width: usize, data: &[u8], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(data)?;
    f.flush()?;
    Ok(())
}

/// Little-endian `f32`, row-major, with a `<path>.dims` sidecar holding
/// `height width`.
pub fn save_f32(image: &Image, path: &Path) -> Result<()> {
    let data: Vec<u8> = image
        .pixels
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(path, data)?;
    let mut dims = path.as_os_str().to_owned();
    dims.push(".dims");
    fs::write(dims, format!("{} {}\n", image.height, image.width))?;
    Ok(())
}

pub fn load_f32(path: &Path) -> Result<Image> {
    let mut dims = path.as_os_str().to_owned();
    dims.push(".dims");
    let text = fs::read_to_string(dims)?;
    let parsed: Vec<usize> = text
        .split_whitespace()
        .filter_map(|t| t.parse().ok())
        .collect();
    let [h, w] = parsed[..] else {
        return Err(Error::UnsupportedImage("malformed dims sidecar".into()));
    };
    let bytes = fs::read(path)?;
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Image::new(h, w, pixels)
}

/// One heatmap per detail level, the H, V and D bands side by side; `values`
/// are per detail node in canonical order, expected in `[0, 1]`.
pub fn save_level_heatmaps(
    layout: &WaveletLayout,
    values: &[f64],
    prefix: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    let offset = layout.n_scaling();
    let mut written = Vec::new();
    for l in 1..=layout.levels() {
        let (bh, bw) = layout.band_dims(l);
        let range = layout.level_range(l);
        let mut data = vec![0u8; bh * 3 * bw];
        for (k, j) in range.enumerate() {
            let (band, idx) = (k / (bh * bw), k % (bh * bw));
            let (r, c) = (idx / bw, idx % bw);
            data[r * 3 * bw + band * bw + c] =
                (values[j - offset].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        let mut name = prefix.as_os_str().to_owned();
        name.push(format!("_l{l}.pgm"));
        let path = std::path::PathBuf::from(name);
        write_pgm_bytes(bh, 3 * bw, &data, &path)?;
        written.push(path);
    }
    Ok(written)
}

//! Binary PNM (P5 / P6) codec, with optional PNG support behind the `png`
//! feature.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{round_half_away, ImageTensor, SaliencyMap, ValueSpace};

struct PnmHeader {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<PnmHeader> {
    let malformed = |reason: &str| Error::MalformedImage {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 2 {
        return Err(malformed("file too short"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(malformed("truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("header field out of range"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed("missing separator after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(malformed("zero-sized image"));
    }
    if maxval == 0 {
        return Err(malformed("maxval must be positive"));
    }
    Ok(PnmHeader {
        magic,
        width: width as usize,
        height: height as usize,
        maxval,
        data_offset: pos,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit binary PPM (P6) or PGM (P5) into an `Rgb255` tensor.
/// With the `png` feature, `.png` files are accepted too.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    if is_png(path) {
        return read_png(path);
    }
    let bytes = read_bytes(path)?;
    let header = parse_header(&bytes, path)?;
    let channels = match &header.magic {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(Error::MalformedImage {
                path: path.to_path_buf(),
                reason: format!("unsupported magic {:?}", String::from_utf8_lossy(other)),
            })
        }
    };
    if header.maxval > 255 {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            maxval: header.maxval,
        });
    }
    let n = header.width * header.height * channels;
    let raster = &bytes[header.data_offset..];
    if raster.len() < n {
        return Err(Error::MalformedImage {
            path: path.to_path_buf(),
            reason: format!("raster has {} bytes, expected {n}", raster.len()),
        });
    }
    let scale = 255.0 / f64::from(header.maxval);
    let data = raster[..n]
        .iter()
        .map(|&b| {
            if header.maxval == 255 {
                f64::from(b)
            } else {
                round_half_away(f64::from(b) * scale).min(255.0)
            }
        })
        .collect();
    ImageTensor::new(header.height, header.width, channels, data, ValueSpace::Rgb255)
}

fn quantize_sample(v: f64, space: ValueSpace) -> u8 {
    let scaled = match space {
        ValueSpace::Unit => v * 255.0,
        _ => v,
    };
    round_half_away(scaled).clamp(0.0, 255.0) as u8
}

/// Encodes an `Rgb255` or `Unit` tensor as 8-bit PNM (or PNG with the `png`
/// feature and a `.png` extension). Samples are rounded half away from zero.
pub fn write_image(tensor: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if tensor.space() == ValueSpace::MeanSubtracted {
        return Err(Error::ValueSpace {
            expected: "rgb255 or unit",
            actual: tensor.space().name(),
        });
    }
    let raster: Vec<u8> = tensor
        .data()
        .iter()
        .map(|&v| quantize_sample(v, tensor.space()))
        .collect();
    if is_png(path) {
        return write_png(tensor, &raster, path);
    }
    let magic = if tensor.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", tensor.width(), tensor.height()).into_bytes();
    out.extend_from_slice(&raster);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_saliency(map: &SaliencyMap, path: impl AsRef<Path>) -> Result<()> {
    write_image(&map.to_image(), path)
}

/// Writes a 16-bit big-endian PGM; used to export segment labels.
pub fn write_pgm16(height: usize, width: usize, values: &[u16], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if values.len() != height * width {
        return Err(Error::Shape("pgm16 raster length".into()));
    }
    let maxval = values.iter().copied().max().unwrap_or(0).max(1);
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    for v in values {
        if maxval > 255 {
            out.extend_from_slice(&v.to_be_bytes());
        } else {
            out.push(*v as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a P5 file of any bit depth as raw integer samples.
pub fn read_pgm16(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u16>)> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let header = parse_header(&bytes, path)?;
    if &header.magic != b"P5" {
        return Err(Error::MalformedImage {
            path: path.to_path_buf(),
            reason: "expected P5".into(),
        });
    }
    if header.maxval > u32::from(u16::MAX) {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            maxval: header.maxval,
        });
    }
    let n = header.width * header.height;
    let raster = &bytes[header.data_offset..];
    let wide = header.maxval > 255;
    let need = if wide { 2 * n } else { n };
    if raster.len() < need {
        return Err(Error::MalformedImage {
            path: path.to_path_buf(),
            reason: "truncated raster".into(),
        });
    }
    let values = if wide {
        raster[..need]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        raster[..n].iter().map(|&b| u16::from(b)).collect()
    };
    Ok((header.height, header.width, values))
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

#[cfg(feature = "png")]
fn read_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::MalformedImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (channels, raw) = match img.color().channel_count() {
        1 | 2 => (1, img.to_luma8().into_raw()),
        _ => (3, img.to_rgb8().into_raw()),
    };
    let data = raw.into_iter().map(f64::from).collect();
    ImageTensor::new(
        img.height() as usize,
        img.width() as usize,
        channels,
        data,
        ValueSpace::Rgb255,
    )
}

#[cfg(not(feature = "png"))]
fn read_png(path: &Path) -> Result<ImageTensor> {
    Err(Error::UnsupportedFormat(format!(
        "{} (built without the `png` feature)",
        path.display()
    )))
}

#[cfg(feature = "png")]
fn write_png(tensor: &ImageTensor, raster: &[u8], path: &Path) -> Result<()> {
    let color = if tensor.channels() == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    image::save_buffer(path, raster, tensor.width() as u32, tensor.height() as u32, color)
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))
}

#[cfg(not(feature = "png"))]
fn write_png(_tensor: &ImageTensor, _raster: &[u8], path: &Path) -> Result<()> {
    Err(Error::UnsupportedFormat(format!(
        "{} (built without the `png` feature)",
        path.display()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn decodes_white_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ppm");
        let mut bytes = b"P6\n# comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255; 12]);
        fs::write(&p, bytes).unwrap();
        let img = read_image(&p).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (2, 2, 3));
        assert!(img.data().iter().all(|&v| v == 255.0));
    }

    #[test]
    fn decodes_black_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.ppm");
        let mut bytes = b"P6 1 1 255\n".to_vec();
        bytes.extend_from_slice(&[0, 0, 0]);
        fs::write(&p, bytes).unwrap();
        assert_eq!(read_image(&p).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn error_paths() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_image(dir.path().join("missing.ppm")),
            Err(Error::Io { .. })
        ));

        let bad = dir.path().join("bad.ppm");
        fs::write(&bad, b"P3\n1 1\n255\n0 0 0").unwrap();
        assert!(matches!(read_image(&bad), Err(Error::MalformedImage { .. })));

        let deep = dir.path().join("deep.pgm");
        let mut bytes = b"P5\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0, 0]);
        fs::write(&deep, bytes).unwrap();
        assert!(matches!(
            read_image(&deep),
            Err(Error::UnsupportedBitDepth { maxval: 65535, .. })
        ));

        let short = dir.path().join("short.pgm");
        fs::write(&short, b"P5\n4 4\n255\n\x00").unwrap();
        assert!(read_image(&short).is_err());
    }

    #[test]
    fn write_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.pgm");
        let unit = ImageTensor::new(1, 2, 1, vec![0.5, 0.0], ValueSpace::Unit).unwrap();
        write_image(&unit, &p).unwrap();
        assert_eq!(read_image(&p).unwrap().data(), &[128.0, 0.0]);

        let rgb = ImageTensor::new(1, 1, 1, vec![254.6], ValueSpace::Rgb255).unwrap();
        write_image(&rgb, &p).unwrap();
        assert_eq!(read_image(&p).unwrap().data(), &[255.0]);

        let ms = ImageTensor::new(1, 1, 1, vec![-1.0], ValueSpace::MeanSubtracted).unwrap();
        assert!(write_image(&ms, &p).is_err());
        assert!(write_image(&rgb, dir.path().join("no/such/dir.pgm")).is_err());
    }

    #[test]
    fn rgb_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ppm");
        let mut rng = Rng::new(7);
        let data = (0..8 * 8 * 3).map(|_| rng.below(256) as f64).collect();
        let img = ImageTensor::new(8, 8, 3, data, ValueSpace::Rgb255).unwrap();
        write_image(&img, &p).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
    }

    #[test]
    fn pgm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.pgm");
        let values: Vec<u16> = (0..12).map(|v| v * 100).collect();
        write_pgm16(3, 4, &values, &p).unwrap();
        assert_eq!(read_pgm16(&p).unwrap(), (3, 4, values));
    }
}

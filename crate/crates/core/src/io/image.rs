//! 8/16-bit raster I/O: binary PGM/PPM and PNG.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Decoded raster with interleaved samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    /// Largest representable sample, e.g. 255 or 65535.
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl ImageBuffer {
    pub fn bit_depth(&self) -> u8 {
        if self.maxval > 255 {
            16
        } else {
            8
        }
    }

    /// `(1, channels, height, width)` with samples scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let m = self.maxval as f32;
        let c = self.channels;
        let w = self.width;
        Tensor::from_fn(Shape::new(1, c, self.height, w), |_, ch, y, x| {
            self.samples[(y * w + x) * c + ch] as f32 / m
        })
    }

    /// Clamp to `[0, 1]` and quantise with round-half-up.
    pub fn from_tensor(t: &Tensor, bit_depth: u8) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || !(s.c == 1 || s.c == 3) {
            return Err(Error::shape(format!("can only encode 1x1xHxW or 1x3xHxW images, got {s}")));
        }
        let maxval: u16 = match bit_depth {
            8 => 255,
            16 => 65535,
            other => return Err(Error::Config(format!("unsupported bit depth {other}"))),
        };
        let m = maxval as f64;
        let mut samples = vec![0u16; s.plane() * s.c];
        for c in 0..s.c {
            for (i, &v) in t.plane(0, c).iter().enumerate() {
                let v = if v.is_nan() { 0.0 } else { (v as f64).clamp(0.0, 1.0) };
                samples[i * s.c + c] = (v * m + 0.5).floor() as u16;
            }
        }
        Ok(ImageBuffer {
            width: s.w,
            height: s.h,
            channels: s.c,
            maxval,
            samples,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(b"\x89PNG") {
            decode_png(&bytes, path)
        } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
            decode_pnm(&bytes, path)
        } else {
            Err(Error::format(path, "unsupported image format (expected PNG or binary PGM/PPM)"))
        }
    }

    /// Format chosen by extension: `.png`, or `.pgm`/`.ppm`/`.pnm`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        let bytes = match ext.as_str() {
            "png" => encode_png(self, path)?,
            "pgm" | "ppm" | "pnm" => encode_pnm(self),
            _ => return Err(Error::format(path, "unknown image extension (use .png, .pgm or .ppm)")),
        };
        let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }
}

fn decode_pnm(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // whitespace and '#' comments may separate header tokens
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed PNM header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "malformed PNM header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("invalid maxval {maxval}")));
    }
    let wide = maxval > 255;
    let count = width * height * channels;
    let need = count * if wide { 2 } else { 1 };
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(Error::format(
            path,
            format!("truncated pixel data: {} of {need} bytes", data.len()),
        ));
    }
    let samples = if wide {
        data[..need].chunks_exact(2).map(|p| u16::from_be_bytes([p[0], p[1]])).collect()
    } else {
        data[..need].iter().map(|&b| b as u16).collect()
    };
    Ok(ImageBuffer {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
    })
}

fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval > 255 {
        for &s in &img.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(img.samples.iter().map(|&s| s as u8));
    }
    out
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let fmt = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut decoder = png::Decoder::new(BufReader::new(std::io::Cursor::new(bytes)));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let (src_c, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::format(path, "palette image was not expanded")),
    };
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let bps = if wide { 2 } else { 1 };
    let mut samples = Vec::with_capacity(width * height * keep);
    for y in 0..height {
        let row = &buf[y * info.line_size..];
        for x in 0..width {
            for c in 0..keep {
                let i = (x * src_c + c) * bps;
                samples.push(if wide {
                    u16::from_be_bytes([row[i], row[i + 1]])
                } else {
                    row[i] as u16
                });
            }
        }
    }
    Ok(ImageBuffer {
        width,
        height,
        channels: keep,
        maxval: if wide { 65535 } else { 255 },
        samples,
    })
}

fn encode_png(img: &ImageBuffer, path: &Path) -> Result<Vec<u8>> {
    if img.maxval != 255 && img.maxval != 65535 {
        return Err(Error::format(path, format!("PNG needs maxval 255 or 65535, got {}", img.maxval)));
    }
    let fmt = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        let wide = img.maxval == 65535;
        enc.set_depth(if wide { png::BitDepth::Sixteen } else { png::BitDepth::Eight });
        let mut writer = enc.write_header().map_err(fmt)?;
        let data: Vec<u8> = if wide {
            img.samples.iter().flat_map(|s| s.to_be_bytes()).collect()
        } else {
            img.samples.iter().map(|&s| s as u8).collect()
        };
        writer.write_image_data(&data).map_err(fmt)?;
        writer.finish().map_err(fmt)?;
    }
    Ok(out)
}

/// Load an image as `(1, c, h, w)` in `[0, 1]`, `c` as stored (1 or 3).
pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(ImageBuffer::read(path)?.to_tensor())
}

/// Load an image as three channels, replicating gray if needed.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let t = load_image(path)?;
    if t.shape().c == 3 {
        return Ok(t);
    }
    crate::ops::concat_channels(&[&t, &t, &t])
}

/// Save at 8 bits per sample.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    ImageBuffer::from_tensor(t, 8)?.write(path)
}

/// Save at 16 bits per sample.
pub fn save_image16(t: &Tensor, path: &Path) -> Result<()> {
    ImageBuffer::from_tensor(t, 16)?.write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantisation_rounds_half_up() {
        let t = Tensor::full(Shape::new(1, 1, 1, 2), 0.5);
        let b = ImageBuffer::from_tensor(&t, 8).unwrap();
        assert_eq!(b.samples, vec![128, 128]);
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 2.0, 1.0]).unwrap();
        assert_eq!(ImageBuffer::from_tensor(&t, 8).unwrap().samples, vec![0, 255, 255]);
    }

    #[test]
    fn pnm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = decode_pnm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(img.samples, vec![0, 255]);
        assert!(decode_pnm(&bytes[..bytes.len() - 1], Path::new("x.pgm")).is_err());
    }

    #[test]
    fn pnm_16bit_is_big_endian() {
        let img = ImageBuffer {
            width: 1,
            height: 1,
            channels: 1,
            maxval: 65535,
            samples: vec![0x1234],
        };
        let bytes = encode_pnm(&img);
        assert_eq!(&bytes[bytes.len() - 2..], &[0x12, 0x34]);
        assert_eq!(decode_pnm(&bytes, Path::new("x")).unwrap(), img);
    }
}

//! Pixel buffers with intensities in `[0, 1]` and a binary PGM (P5) / PPM (P6)
//! codec.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved, row-major pixel buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "pixel buffer of {} values does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.data.iter().sum::<f64>() / self.data.len() as f64
        }
    }

    /// Bilinear sample at continuous position `(sx, sy)` where pixel `i`
    /// has its center at `i + 0.5`. Samples outside the image return `fill`.
    pub fn sample_bilinear(&self, sx: f64, sy: f64, c: usize, fill: f64) -> f64 {
        let fx = sx - 0.5;
        let fy = sy - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let ax = fx - x0;
        let ay = fy - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let at = |x: i64, y: i64| -> f64 {
            if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
                fill
            } else {
                self.get(x as usize, y as usize, c)
            }
        };
        if fx < -1.0 || fy < -1.0 || fx > self.width as f64 || fy > self.height as f64 {
            return fill;
        }
        let top = if ax == 0.0 {
            at(x0, y0)
        } else {
            at(x0, y0) * (1.0 - ax) + at(x0 + 1, y0) * ax
        };
        if ay == 0.0 {
            return top;
        }
        let bottom = if ax == 0.0 {
            at(x0, y0 + 1)
        } else {
            at(x0, y0 + 1) * (1.0 - ax) + at(x0 + 1, y0 + 1) * ax
        };
        top * (1.0 - ay) + bottom * ay
    }

    /// Exact rotation by `quarter_turns * 90` degrees counter-clockwise as
    /// displayed (y down): the point `(x, y)` of a `W x H` image lands on
    /// `(y, W - x)` for one quarter turn.
    pub fn rotate_quarter_turns(&self, quarter_turns: u32) -> Image {
        let k = quarter_turns % 4;
        if k == 0 {
            return self.clone();
        }
        let (w, h, ch) = (self.width, self.height, self.channels);
        let (ow, oh) = if k % 2 == 1 { (h, w) } else { (w, h) };
        let mut out = Image::new(ow, oh, ch);
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = match k {
                    1 => (y, w - 1 - x),
                    2 => (w - 1 - x, h - 1 - y),
                    _ => (h - 1 - y, x),
                };
                for c in 0..ch {
                    out.set(nx, ny, c, self.get(x, y, c));
                }
            }
        }
        out
    }

    /// Quantizes every intensity to the nearest of 256 levels.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            *v = to_u8(*v) as f64 / 255.0;
        }
    }

    pub fn read_pnm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_pnm(&bytes)
    }

    /// Writes PGM for one channel, PPM for three, 8 bits per sample.
    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let bytes = encode_pnm(self)?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pnm(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Codec(format!("cannot encode {c}-channel image"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| to_u8(v)));
    Ok(out)
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Codec(format!("missing or malformed {what}")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 {
        return Err(Error::Codec("file too short".into()));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        m => {
            return Err(Error::Codec(format!(
                "unsupported magic {:?}; expected P5 or P6",
                String::from_utf8_lossy(m)
            )))
        }
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Codec("zero image dimension".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Codec(format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(Error::Codec("missing whitespace before raster".into()));
    }
    let raster = &bytes[r.pos + 1..];
    let samples = width * height * channels;
    let bytes_per_sample = if maxval < 256 { 1 } else { 2 };
    if raster.len() < samples * bytes_per_sample {
        return Err(Error::Codec(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            samples * bytes_per_sample
        )));
    }
    let scale = maxval as f64;
    let data = if bytes_per_sample == 1 {
        raster[..samples].iter().map(|&b| b as f64 / scale).collect()
    } else {
        raster[..samples * 2]
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f64 / scale)
            .collect()
    };
    Image::from_data(width, height, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_exact_on_quantized_levels() {
        let data: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let img = Image::from_data(4, 3, 1, data).unwrap();
        let decoded = decode_pnm(&encode_pnm(&img).unwrap()).unwrap();
        assert_eq!(decoded, img);
    }

    #[test]
    fn ppm_header_with_comments_and_16_bit() {
        let mut bytes = b"P6\n# comment\n1 1\n65535\n".to_vec();
        bytes.extend([0xff, 0xff, 0x00, 0x00, 0x80, 0x00]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (1, 1, 3));
        assert_eq!(img.data[0], 1.0);
        assert_eq!(img.data[1], 0.0);
        assert!((img.data[2] - 32768.0 / 65535.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_truncated_and_unknown() {
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00\x01").is_err());
        assert!(decode_pnm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn quarter_turns_compose_to_identity() {
        let data: Vec<f64> = (0..15).map(|i| i as f64).collect();
        let img = Image::from_data(5, 3, 1, data).unwrap();
        let r1 = img.rotate_quarter_turns(1);
        assert_eq!((r1.width, r1.height), (3, 5));
        // top-right pixel moves to the top-left
        assert_eq!(r1.get(0, 0, 0), img.get(4, 0, 0));
        assert_eq!(r1.rotate_quarter_turns(3), img);
        assert_eq!(img.rotate_quarter_turns(2).rotate_quarter_turns(2), img);
    }

    #[test]
    fn bilinear_hits_pixel_centers_exactly() {
        let data: Vec<f64> = (0..9).map(|i| i as f64 * 0.1).collect();
        let img = Image::from_data(3, 3, 1, data).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let s = img.sample_bilinear(x as f64 + 0.5, y as f64 + 0.5, 0, -1.0);
                assert_eq!(s, img.get(x, y, 0));
            }
        }
        assert_eq!(img.sample_bilinear(-5.0, 1.0, 0, 0.25), 0.25);
    }
}

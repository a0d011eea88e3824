//! Dense multi-channel images and the netpbm-family codecs used for
//! rendered output and datasets.
//!
//! * PPM (`P6`, 8-bit) for color, written as `round(255 * clamp(c, 0, 1))`.
//! * PFM (`Pf`, single channel, little-endian, scale `-1.0`) for depth and
//!   weight-sum maps. Rows are stored bottom-to-top as the format requires.
//! * PGM (`P5`, 8-bit) for class-id maps.

use std::io::{BufRead, Write};

use crate::error::{contract, format_err, Result};

/// Row-major `height x width x channels` image of `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(contract(format!(
                "image data has {} samples, expected {width}x{height}x{channels}",
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
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }
}

fn read_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b);
    }
    if tok.is_empty() {
        return Err(format_err("unexpected end of header"));
    }
    String::from_utf8(tok).map_err(|_| format_err("non-ASCII header token"))
}

fn read_usize<R: BufRead>(r: &mut R, what: &str) -> Result<usize> {
    let tok = read_token(r)?;
    tok.parse()
        .map_err(|_| format_err(format!("bad {what} `{tok}`")))
}

pub fn write_ppm<W: Write>(w: &mut W, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(contract(format!(
            "PPM needs 3 channels, image has {}",
            img.channels
        )));
    }
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.data.iter().map(|&c| to_byte(c)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn to_byte(c: f64) -> u8 {
    let c = if c.is_nan() { 0.0 } else { c.clamp(0.0, 1.0) };
    (255.0 * c).round() as u8
}

pub fn read_ppm<R: BufRead>(r: &mut R) -> Result<Image> {
    let magic = read_token(r)?;
    if magic != "P6" {
        return Err(format_err(format!("expected P6 magic, found `{magic}`")));
    }
    let width = read_usize(r, "width")?;
    let height = read_usize(r, "height")?;
    let maxval = read_usize(r, "maxval")?;
    if maxval != 255 {
        return Err(format_err(format!(
            "only 8-bit PPM supported, maxval {maxval}"
        )));
    }
    let mut bytes = vec![0u8; width * height * 3];
    r.read_exact(&mut bytes)?;
    let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Image::from_data(width, height, 3, data)
}

pub fn write_pfm<W: Write>(w: &mut W, img: &Image) -> Result<()> {
    if img.channels != 1 {
        return Err(contract(format!(
            "PFM writer needs 1 channel, image has {}",
            img.channels
        )));
    }
    write!(w, "Pf\n{} {}\n-1.0\n", img.width, img.height)?;
    let mut bytes = Vec::with_capacity(img.width * img.height * 4);
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            bytes.extend_from_slice(&(img.get(x, y, 0) as f32).to_le_bytes());
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_pfm<R: BufRead>(r: &mut R) -> Result<Image> {
    let magic = read_token(r)?;
    if magic != "Pf" {
        return Err(format_err(format!("expected Pf magic, found `{magic}`")));
    }
    let width = read_usize(r, "width")?;
    let height = read_usize(r, "height")?;
    let scale_tok = read_token(r)?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| format_err(format!("bad PFM scale `{scale_tok}`")))?;
    let little = scale < 0.0;
    let mut bytes = vec![0u8; width * height * 4];
    r.read_exact(&mut bytes)?;
    let mut img = Image::zeros(width, height, 1);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let arr = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(arr)
        } else {
            f32::from_be_bytes(arr)
        };
        let (x, row) = (i % width, i / width);
        img.pixel_mut(x, height - 1 - row)[0] = v as f64;
    }
    Ok(img)
}

pub fn write_pgm<W: Write>(w: &mut W, width: usize, height: usize, values: &[u8]) -> Result<()> {
    if values.len() != width * height {
        return Err(contract("PGM value count does not match dimensions"));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(values)?;
    Ok(())
}

pub fn read_pgm<R: BufRead>(r: &mut R) -> Result<(usize, usize, Vec<u8>)> {
    let magic = read_token(r)?;
    if magic != "P5" {
        return Err(format_err(format!("expected P5 magic, found `{magic}`")));
    }
    let width = read_usize(r, "width")?;
    let height = read_usize(r, "height")?;
    let maxval = read_usize(r, "maxval")?;
    if maxval != 255 {
        return Err(format_err(format!(
            "only 8-bit PGM supported, maxval {maxval}"
        )));
    }
    let mut values = vec![0u8; width * height];
    r.read_exact(&mut values)?;
    Ok((width, height, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn ppm_quantizes_and_reads_back() {
        let img = Image::from_data(2, 1, 3, vec![0.0, 0.5, 1.0, 1.2, -0.3, 0.25]).unwrap();
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img).unwrap();
        assert!(buf.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&buf[buf.len() - 6..], &[0, 128, 255, 255, 0, 64]);
        let back = read_ppm(&mut Cursor::new(buf)).unwrap();
        assert_eq!(back.pixel(0, 0)[2], 1.0);
    }

    #[test]
    fn pfm_is_bottom_up_little_endian() {
        let img = Image::from_data(1, 2, 1, vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_pfm(&mut buf, &img).unwrap();
        let header = b"Pf\n1 2\n-1.0\n";
        assert!(buf.starts_with(header));
        assert_eq!(&buf[header.len()..header.len() + 4], &2.0f32.to_le_bytes());
        let back = read_pfm(&mut Cursor::new(buf)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_round_trip_and_bad_magic() {
        let mut buf = Vec::new();
        write_pgm(&mut buf, 3, 1, &[0, 7, 255]).unwrap();
        assert_eq!(
            read_pgm(&mut Cursor::new(buf)).unwrap(),
            (3, 1, vec![0, 7, 255])
        );
        assert!(read_pgm(&mut Cursor::new(b"P2\n1 1\n255\n0".to_vec())).is_err());
    }
}

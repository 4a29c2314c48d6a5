//! Planar RGB images in `[0, 1]` and lossless PPM (P6) I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tensor;

/// RGB image, channel-planar `[3, H, W]`, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T: Scalar> {
    pub height: usize,
    pub width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape(&[3, height, width], &[data.len()], "image"));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [T; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(height * width));
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::constant(&[3, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            [3, h, w] => Image::new(*h, *w, t.to_vec()),
            s => Err(Error::invalid(format!("image tensor must be [3,H,W], got {s:?}"))),
        }
    }

    pub fn mean_channel(&self, c: usize) -> T {
        let n = self.height * self.width;
        let sum = self.data[c * n..(c + 1) * n]
            .iter()
            .fold(T::zero(), |acc, v| acc + *v);
        sum / T::from_f64_lossy(n as f64)
    }
}

/// Write as binary PPM (P6), clamping to `[0, 1]`.
pub fn write_ppm<T: Scalar>(path: &Path, img: &Image<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + 3 * img.height * img.width);
    write!(buf, "P6\n{} {}\n255\n", img.width, img.height)?;
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                let v = img.get(c, y, x).to_f64_lossy().clamp(0.0, 1.0);
                buf.push((v * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let mut fields: Vec<String> = Vec::new();
    // Header: magic, width, height, maxval; '#' comments allowed.
    while fields.len() < 4 {
        if pos >= bytes.len() {
            return Err(Error::invalid("truncated PPM header"));
        }
        match bytes[pos] {
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => pos += 1,
            _ => {
                let start = pos;
                while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
            }
        }
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != "P6" {
        return Err(Error::invalid(format!("unsupported PPM magic {}", fields[0])));
    }
    let width: usize = fields[1].parse().map_err(|_| Error::invalid("bad PPM width"))?;
    let height: usize = fields[2].parse().map_err(|_| Error::invalid("bad PPM height"))?;
    let maxval: f64 = fields[3].parse().map_err(|_| Error::invalid("bad PPM maxval"))?;
    if maxval != 255.0 {
        return Err(Error::invalid("only 8-bit PPM is supported"));
    }
    if bytes.len() < pos + 3 * width * height {
        return Err(Error::invalid("truncated PPM pixel data"));
    }
    let mut img = Image::filled(height, width, [T::zero(); 3]);
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let raw = bytes[pos + (y * width + x) * 3 + c] as f64 / 255.0;
                img.set(c, y, x, T::from_f64_lossy(raw));
            }
        }
    }
    Ok(img)
}

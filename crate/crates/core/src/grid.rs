//! Row-major 2D grids used for images, masks, depth maps and token grids.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb as PxRgb};

use crate::{Error, Result};

pub type Rgb = [f32; 3];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type Image = Grid<Rgb>;
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        &mut self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Iterates `(row, col, &value)` in row-major order.
    pub fn iter_indexed(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, v)| (i / w, i % w, v))
    }

    /// In-bounds 8-neighbors of `(row, col)`.
    pub fn neighbors8(&self, row: usize, col: usize) -> impl Iterator<Item = (usize, usize)> {
        let (h, w) = (self.height as isize, self.width as isize);
        let (r, c) = (row as isize, col as isize);
        (-1isize..=1)
            .flat_map(move |dr| (-1isize..=1).map(move |dc| (dr, dc)))
            .filter(|&(dr, dc)| dr != 0 || dc != 0)
            .map(move |(dr, dc)| (r + dr, c + dc))
            .filter(move |&(rr, cc)| rr >= 0 && cc >= 0 && rr < h && cc < w)
            .map(|(rr, cc)| (rr as usize, cc as usize))
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.data.len() as f64
    }
}

impl<T: serde::Serialize> serde::Serialize for Grid<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&(self.height(), self.width(), self.as_slice()), s)
    }
}

impl<'de, T: serde::Deserialize<'de>> serde::Deserialize<'de> for Grid<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (h, w, data): (usize, usize, Vec<T>) = serde::Deserialize::deserialize(d)?;
        Grid::from_vec(h, w, data).map_err(serde::de::Error::custom)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Image {
    pub fn to_rgb8(&self) -> ImageBuffer<PxRgb<u8>, Vec<u8>> {
        let mut buf = ImageBuffer::new(self.width as u32, self.height as u32);
        for (row, col, px) in self.iter_indexed() {
            buf.put_pixel(
                col as u32,
                row as u32,
                PxRgb([to_u8(px[0]), to_u8(px[1]), to_u8(px[2])]),
            );
        }
        buf
    }

    pub fn from_rgb8(buf: &ImageBuffer<PxRgb<u8>, Vec<u8>>) -> Self {
        Grid::from_fn(buf.height() as usize, buf.width() as usize, |row, col| {
            let p = buf.get_pixel(col as u32, row as u32).0;
            [
                p[0] as f32 / 255.0,
                p[1] as f32 / 255.0,
                p[2] as f32 / 255.0,
            ]
        })
    }

    /// Rounds every channel to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Image {
        self.map(|p| [0, 1, 2].map(|c| to_u8(p[c]) as f32 / 255.0))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }
}

impl Mask {
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::new(self.width as u32, self.height as u32);
        for (row, col, &v) in self.iter_indexed() {
            buf.put_pixel(col as u32, row as u32, Luma([if v { 255 } else { 0 }]));
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Ok(Grid::from_fn(
            img.height() as usize,
            img.width() as usize,
            |row, col| img.get_pixel(col as u32, row as u32).0[0] >= 128,
        ))
    }
}

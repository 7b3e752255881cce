//! Dense per-pixel maps and the binary raster container they are stored in.
//!
//! Raster layout (all integers little-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 8     | magic `b"SDCARAST"`                     |
//! | 4     | version (`u32`, currently 1)            |
//! | 4     | height `H` (`u32`)                      |
//! | 4     | width `W` (`u32`)                       |
//! | 4     | channels `C` (`u32`)                    |
//! | 1     | dtype code: 0 = `u8`, 1 = `f64`         |
//! | …     | row-major payload, `H·W·C` elements     |

use std::io::{Read, Write};

use crate::error::{Result, SdcaError};

/// Label id reserved for pixels that take no part in losses or statistics.
pub const IGNORE_LABEL: u8 = 255;

pub const RASTER_MAGIC: &[u8; 8] = b"SDCARAST";
pub const RASTER_VERSION: u32 = 1;
const DTYPE_U8: u8 = 0;
const DTYPE_F64: u8 = 1;

/// `H × W × C` real-valued map. Images, feature maps (`C = A`) and score
/// maps (`C = K` logits) all use this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

pub type Image = VectorMap;
pub type FeatureMap = VectorMap;
pub type ScoreMap = VectorMap;

impl VectorMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        VectorMap {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(SdcaError::DimensionMismatch {
                expected: height * width * channels,
                got: data.len(),
            });
        }
        Ok(VectorMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels.max(1))
    }

    pub fn write_raster<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, self.height, self.width, self.channels, DTYPE_F64)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_raster<R: Read>(r: &mut R) -> Result<Self> {
        let (h, w, c, dtype) = read_header(r)?;
        if dtype != DTYPE_F64 {
            return Err(SdcaError::Format(format!("expected f64 raster, got dtype {dtype}")));
        }
        let mut data = Vec::with_capacity(h * w * c);
        let mut buf = [0u8; 8];
        for _ in 0..h * w * c {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        VectorMap::from_data(h, w, c, data)
    }
}

/// `H × W` class ids in `[0, K)` or [`IGNORE_LABEL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn from_labels(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(SdcaError::DimensionMismatch {
                expected: height * width,
                got: labels.len(),
            });
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn num_valid(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }

    /// All non-ignore ids are below `num_classes`.
    pub fn is_valid_for(&self, num_classes: usize) -> bool {
        self.labels
            .iter()
            .all(|&l| l == IGNORE_LABEL || (l as usize) < num_classes)
    }

    pub fn write_raster<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, self.height, self.width, 1, DTYPE_U8)?;
        w.write_all(&self.labels)?;
        Ok(())
    }

    pub fn read_raster<R: Read>(r: &mut R) -> Result<Self> {
        let (h, w, c, dtype) = read_header(r)?;
        if dtype != DTYPE_U8 || c != 1 {
            return Err(SdcaError::Format(format!(
                "expected single-channel u8 raster, got dtype {dtype} with {c} channels"
            )));
        }
        let mut labels = vec![0u8; h * w];
        r.read_exact(&mut labels)?;
        LabelMap::from_labels(h, w, labels)
    }
}

fn write_header<W: Write>(w: &mut W, h: usize, wd: usize, c: usize, dtype: u8) -> Result<()> {
    w.write_all(RASTER_MAGIC)?;
    w.write_all(&RASTER_VERSION.to_le_bytes())?;
    for v in [h, wd, c] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&[dtype])?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<(usize, usize, usize, u8)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != RASTER_MAGIC {
        return Err(SdcaError::Format("bad raster magic".into()));
    }
    let version = read_u32(r)?;
    if version != RASTER_VERSION {
        return Err(SdcaError::Format(format!("unsupported raster version {version}")));
    }
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let c = read_u32(r)? as usize;
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    Ok((h, w, c, dtype[0]))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rasters_round_trip_bit_exact(
            h in 1usize..6, w in 1usize..6, c in 1usize..4,
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let mut rng = crate::numeric::rng_from_seed(seed);
            let data: Vec<f64> = (0..h * w * c).map(|_| rng.random::<f64>() * 1e3 - 5e2).collect();
            let map = VectorMap::from_data(h, w, c, data).unwrap();
            let mut buf = Vec::new();
            map.write_raster(&mut buf).unwrap();
            prop_assert_eq!(buf.len(), 25 + 8 * h * w * c);
            let back = VectorMap::read_raster(&mut buf.as_slice()).unwrap();
            prop_assert!(back.data.iter().zip(&map.data).all(|(a, b)| a.to_bits() == b.to_bits()));

            let labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..5)).collect();
            let lm = LabelMap::from_labels(h, w, labels).unwrap();
            let mut buf = Vec::new();
            lm.write_raster(&mut buf).unwrap();
            prop_assert_eq!(LabelMap::read_raster(&mut buf.as_slice()).unwrap(), lm);
        }
    }

    #[test]
    fn header_is_documented_layout() {
        let lm = LabelMap::filled(2, 3, 7);
        let mut buf = Vec::new();
        lm.write_raster(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"SDCARAST");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[20..24].try_into().unwrap()), 1);
        assert_eq!(buf[24], 0);
        assert_eq!(&buf[25..], &[7u8; 6]);
    }

    #[test]
    fn rejects_wrong_magic_and_dtype() {
        let mut bad = b"NOTARAST".to_vec();
        bad.extend_from_slice(&[0u8; 17]);
        assert!(LabelMap::read_raster(&mut bad.as_slice()).is_err());

        let mut buf = Vec::new();
        VectorMap::zeros(1, 1, 1).write_raster(&mut buf).unwrap();
        assert!(LabelMap::read_raster(&mut buf.as_slice()).is_err());
    }
}

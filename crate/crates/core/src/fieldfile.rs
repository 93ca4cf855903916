//! `CFD1` field files: an ASCII header line `CFD1 <H> <W> <C>\n` followed by
//! `H * W * C` little-endian `f32` values, row-major, channel-interleaved.

use std::io::{BufRead, Read, Write};

use crate::differential::{DensityMap, MetricField, MetricSample};
use crate::error::{Error, Result};
use crate::evalfid::DisplacementField;
use crate::grid::{NormalizedPoint, WarpField};

pub const MAGIC: &str = "CFD1";

#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FieldFile {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Format(format!("header: zero dimension in {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Format(format!(
                "payload: {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC} {} {} {}", self.height, self.width, self.channels)?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut header = Vec::new();
        r.by_ref().take(256).read_until(b'\n', &mut header)?;
        if header.last() != Some(&b'\n') {
            return Err(Error::Format("header: missing newline-terminated header line".into()));
        }
        let header = std::str::from_utf8(&header[..header.len() - 1])
            .map_err(|_| Error::Format("header: not ASCII".into()))?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.first() != Some(&MAGIC) {
            return Err(Error::Format(format!("magic: expected {MAGIC:?}, found {:?}", parts[0])));
        }
        if parts.len() != 4 {
            return Err(Error::Format(format!("header: expected 4 fields, found {}", parts.len())));
        }
        let dim = |name: &str, s: &str| -> Result<usize> {
            s.parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Format(format!("{name}: invalid value {s:?}")))
        };
        let height = dim("height", parts[1])?;
        let width = dim("width", parts[2])?;
        let channels = dim("channels", parts[3])?;
        let count = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .filter(|&n| n <= 1 << 30)
            .ok_or_else(|| Error::Format("header: dimensions too large".into()))?;
        let mut bytes = Vec::with_capacity(count * 4);
        r.by_ref().take(count as u64 * 4 + 1).read_to_end(&mut bytes)?;
        if bytes.len() != count * 4 {
            return Err(Error::Format(format!(
                "payload: expected {} bytes, found {}{}",
                count * 4,
                bytes.len().min(count * 4),
                if bytes.len() > count * 4 { " plus trailing data" } else { "" }
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(height, width, channels, data)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    fn expect_channels(&self, c: usize, what: &str) -> Result<()> {
        if self.channels != c {
            return Err(Error::Format(format!(
                "channels: {what} needs {c}, file has {}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Values of pixel `i`, widened to `f64`.
    pub fn pixel(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        self.data[i * self.channels..(i + 1) * self.channels].iter().map(|&v| v as f64)
    }
}

impl From<&WarpField> for FieldFile {
    fn from(f: &WarpField) -> Self {
        let data = f.coords().iter().flat_map(|p| [p.u as f32, p.v as f32]).collect();
        Self {
            height: f.height(),
            width: f.width(),
            channels: 2,
            data,
        }
    }
}

impl From<&DensityMap> for FieldFile {
    fn from(d: &DensityMap) -> Self {
        Self {
            height: d.height(),
            width: d.width(),
            channels: 1,
            data: d.values().iter().map(|&v| v as f32).collect(),
        }
    }
}

impl From<&MetricField> for FieldFile {
    fn from(m: &MetricField) -> Self {
        let data = m
            .values
            .iter()
            .flat_map(|s| [s.g11 as f32, s.g22 as f32, s.g12 as f32, s.dist as f32])
            .collect();
        Self {
            height: m.height,
            width: m.width,
            channels: 4,
            data,
        }
    }
}

impl From<&DisplacementField> for FieldFile {
    fn from(d: &DisplacementField) -> Self {
        let data = d.values.iter().flat_map(|v| [v[0] as f32, v[1] as f32]).collect();
        Self {
            height: d.height,
            width: d.width,
            channels: 2,
            data,
        }
    }
}

impl TryFrom<&FieldFile> for WarpField {
    type Error = Error;

    fn try_from(f: &FieldFile) -> Result<Self> {
        f.expect_channels(2, "warp field")?;
        let coords = f
            .data
            .chunks_exact(2)
            .map(|c| NormalizedPoint::new(c[0] as f64, c[1] as f64))
            .collect();
        WarpField::from_parts(f.height, f.width, coords, vec![true; f.height * f.width])
    }
}

impl TryFrom<&FieldFile> for DensityMap {
    type Error = Error;

    fn try_from(f: &FieldFile) -> Result<Self> {
        f.expect_channels(1, "density map")?;
        DensityMap::new(f.height, f.width, f.data.iter().map(|&v| v as f64).collect())
    }
}

impl TryFrom<&FieldFile> for MetricField {
    type Error = Error;

    fn try_from(f: &FieldFile) -> Result<Self> {
        f.expect_channels(4, "metric field")?;
        let values = f
            .data
            .chunks_exact(4)
            .map(|c| MetricSample {
                g11: c[0] as f64,
                g22: c[1] as f64,
                g12: c[2] as f64,
                dist: c[3] as f64,
            })
            .collect();
        Ok(MetricField {
            height: f.height,
            width: f.width,
            values,
        })
    }
}

impl TryFrom<&FieldFile> for DisplacementField {
    type Error = Error;

    fn try_from(f: &FieldFile) -> Result<Self> {
        f.expect_channels(2, "displacement field")?;
        let values = f.data.chunks_exact(2).map(|c| [c[0] as f64, c[1] as f64]).collect();
        DisplacementField::new(f.height, f.width, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens::{warp_field_from_lens, LensParams};

    fn encode(f: &FieldFile) -> Vec<u8> {
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        buf
    }

    #[test]
    fn header_and_layout_are_exact() {
        let f = FieldFile::new(1, 2, 2, vec![1.0, -2.0, 0.5, 3.25]).unwrap();
        let bytes = encode(&f);
        assert!(bytes.starts_with(b"CFD1 1 2 2\n"));
        assert_eq!(bytes.len(), 11 + 16);
        assert_eq!(&bytes[11..15], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[15..19], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let field = warp_field_from_lens(&LensParams::radial(0.7), 5, 7).unwrap();
        let f = FieldFile::from(&field);
        let back = FieldFile::read_from(&encode(&f)[..]).unwrap();
        assert_eq!(back, f);
        let bits: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, f.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let w = WarpField::try_from(&back).unwrap();
        assert_eq!(w.height(), 5);
    }

    #[test]
    fn malformed_files_name_the_offending_field() {
        let err = |bytes: &[u8]| FieldFile::read_from(bytes).unwrap_err().to_string();
        assert!(err(b"CFD2 1 1 1\n\0\0\0\0").contains("magic"));
        assert!(err(b"CFD1 x 1 1\n\0\0\0\0").contains("height"));
        assert!(err(b"CFD1 1 0 1\n").contains("width"));
        assert!(err(b"CFD1 1 1 -3\n").contains("channels"));
        assert!(err(b"CFD1 1 1 1\n\0\0").contains("payload"));
        assert!(err(b"CFD1 1 1 1\n\0\0\0\0\0").contains("payload"));
        assert!(err(b"CFD1 1 1").contains("header"));
        let f = FieldFile::new(2, 2, 3, vec![0.0; 12]).unwrap();
        assert!(WarpField::try_from(&f).unwrap_err().to_string().contains("channels"));
    }
}

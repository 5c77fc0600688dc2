//! Binary portable pixmaps (P6), bitmaps (P4) and float maps (PFM).

use std::path::Path;

use super::IoError;
use crate::grid::{Grid, RgbImage};

/// Header tokenizer shared by the netpbm formats: whitespace separated, `#` comments to end of line.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn token(&mut self) -> Result<&'a str, IoError> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(IoError::Format("truncated header".into())),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| IoError::Format("non-ASCII header".into()))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, IoError> {
        let t = self.token()?;
        t.parse().map_err(|_| IoError::Format(format!("bad {what} '{t}'")))
    }

    /// Skips the single whitespace byte that ends a header and returns the payload.
    fn payload(self) -> Result<&'a [u8], IoError> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(&self.bytes[self.pos + 1..]),
            _ => Err(IoError::Format("missing payload".into())),
        }
    }
}

fn expect_magic(h: &mut Header, magic: &str) -> Result<(), IoError> {
    let m = h.token()?;
    if m == magic {
        Ok(())
    } else {
        Err(IoError::Format(format!("expected magic {magic}, found '{m}'")))
    }
}

fn dims(h: &mut Header) -> Result<(usize, usize), IoError> {
    let w: usize = h.number("width")?;
    let hh: usize = h.number("height")?;
    if w == 0 || hh == 0 {
        return Err(IoError::Format(format!("empty image {w}×{hh}")));
    }
    Ok((w, hh))
}

fn quantize(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit binary pixmap; channels are clamped to `[0, 1]` and rounded.
pub fn encode_p6(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.iter().flat_map(|p| p.map(quantize)));
    out
}

pub fn decode_p6(bytes: &[u8]) -> Result<RgbImage, IoError> {
    let mut h = Header::new(bytes);
    expect_magic(&mut h, "P6")?;
    let (w, hh) = dims(&mut h)?;
    let max: u32 = h.number("maxval")?;
    if max != 255 {
        return Err(IoError::Format(format!("only 8-bit pixmaps are supported, maxval {max}")));
    }
    let data = h.payload()?;
    if data.len() < 3 * w * hh {
        return Err(IoError::Format("truncated pixmap payload".into()));
    }
    let pixels = data[..3 * w * hh]
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
        .collect();
    Ok(Grid::from_vec(w, hh, pixels).expect("sizes checked"))
}

/// Binary bitmap, `true` stored as 1 (black).
pub fn encode_p4(mask: &Grid<bool>) -> Vec<u8> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = format!("P4\n{w} {h}\n").into_bytes();
    let row_bytes = w.div_ceil(8);
    for y in 0..h {
        let mut row = vec![0u8; row_bytes];
        for x in 0..w {
            if *mask.get(x, y) {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend(row);
    }
    out
}

pub fn decode_p4(bytes: &[u8]) -> Result<Grid<bool>, IoError> {
    let mut h = Header::new(bytes);
    expect_magic(&mut h, "P4")?;
    let (w, hh) = dims(&mut h)?;
    let data = h.payload()?;
    let row_bytes = w.div_ceil(8);
    if data.len() < row_bytes * hh {
        return Err(IoError::Format("truncated bitmap payload".into()));
    }
    Ok(Grid::from_fn(w, hh, |x, y| data[y * row_bytes + x / 8] & (0x80 >> (x % 8)) != 0))
}

/// Single-precision image with 1 or 3 channels, rows top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatMap {
    pub fn from_grid(g: &Grid<f64>) -> Self {
        Self {
            width: g.width(),
            height: g.height(),
            channels: 1,
            data: g.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_grid(&self, channel: usize) -> Grid<f64> {
        Grid::from_fn(self.width, self.height, |x, y| {
            self.data[(y * self.width + x) * self.channels + channel] as f64
        })
    }
}

/// Little-endian float map (negative scale); rows are written bottom to top.
pub fn encode_pfm(map: &FloatMap) -> Result<Vec<u8>, IoError> {
    let magic = match map.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(IoError::InvalidArgument(format!("float maps have 1 or 3 channels, not {c}"))),
    };
    if map.data.len() != map.width * map.height * map.channels {
        return Err(IoError::InvalidArgument("float map size mismatch".into()));
    }
    let mut out = format!("{magic}\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    let row = map.width * map.channels;
    for y in (0..map.height).rev() {
        for v in &map.data[y * row..(y + 1) * row] {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<FloatMap, IoError> {
    let mut h = Header::new(bytes);
    let channels = match h.token()? {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(IoError::Format(format!("expected magic Pf or PF, found '{m}'"))),
    };
    let (w, hh) = dims(&mut h)?;
    let scale: f64 = h.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(IoError::Format(format!("bad scale {scale}")));
    }
    let data = h.payload()?;
    let n = w * hh * channels;
    if data.len() < 4 * n {
        return Err(IoError::Format("truncated float map payload".into()));
    }
    let mut values = vec![0f32; n];
    let row = w * channels;
    for (i, chunk) in data[..4 * n].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (i / row, i % row);
        values[(hh - 1 - file_row) * row + col] = v;
    }
    Ok(FloatMap {
        width: w,
        height: hh,
        channels,
        data: values,
    })
}

fn read(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(IoError::at(path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(IoError::at(path))
}

pub fn read_p6(path: &Path) -> Result<RgbImage, IoError> {
    decode_p6(&read(path)?)
}

pub fn write_p6(img: &RgbImage, path: &Path) -> Result<(), IoError> {
    write(path, &encode_p6(img))
}

pub fn read_p4(path: &Path) -> Result<Grid<bool>, IoError> {
    decode_p4(&read(path)?)
}

pub fn write_p4(mask: &Grid<bool>, path: &Path) -> Result<(), IoError> {
    write(path, &encode_p4(mask))
}

pub fn read_pfm(path: &Path) -> Result<FloatMap, IoError> {
    decode_pfm(&read(path)?)
}

pub fn write_pfm(map: &FloatMap, path: &Path) -> Result<(), IoError> {
    write(path, &encode_pfm(map)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_pixel_bytes() {
        let img = Grid::filled(1, 1, [1.0; 3]);
        assert_eq!(encode_p6(&img), b"P6\n1 1\n255\n\xff\xff\xff".to_vec());
    }

    #[test]
    fn header_comments_and_errors() {
        let img = decode_p6(b"P6 # comment\n2 1\n# another\n255\n\x00\x80\xff\x01\x02\x03").unwrap();
        assert_eq!(*img.get(0, 0), [0.0, 128.0 / 255.0, 1.0]);
        assert!(matches!(decode_p6(b"P5\n1 1\n255\n\x00"), Err(IoError::Format(_))));
        assert!(matches!(decode_p6(b"P6\n2 2\n255\n\x00\x00"), Err(IoError::Format(_))));
        assert!(decode_p4(b"P4\n9 2\n\x00\x00\x00").is_err());
        assert!(decode_pfm(b"Pf\n2 2\n-1.0\n\x00\x00").is_err());
        assert!(decode_pfm(b"PX\n1 1\n-1.0\n\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn pfm_zeros_and_orientation() {
        let zeros = FloatMap {
            width: 3,
            height: 2,
            channels: 1,
            data: vec![0.0; 6],
        };
        let bytes = encode_pfm(&zeros).unwrap();
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        assert_eq!(decode_pfm(&bytes).unwrap(), zeros);
        let ramp = FloatMap {
            width: 1,
            height: 2,
            channels: 1,
            data: vec![1.0, 2.0],
        };
        let bytes = encode_pfm(&ramp).unwrap();
        // Bottom row first.
        assert_eq!(&bytes[bytes.len() - 8..bytes.len() - 4], &2.0f32.to_le_bytes());
        let mut big = b"Pf\n1 1\n1.0\n".to_vec();
        big.extend(1.5f32.to_be_bytes());
        assert_eq!(decode_pfm(&big).unwrap().data, vec![1.5]);
    }

    proptest! {
        #[test]
        fn p6_round_trip(w in 1usize..9, h in 1usize..9, seed in prop::collection::vec(any::<u8>(), 243)) {
            let img = Grid::from_fn(w, h, |x, y| {
                let i = 3 * (y * w + x);
                [seed[i] as f64 / 255.0, seed[i + 1] as f64 / 255.0, seed[i + 2] as f64 / 255.0]
            });
            prop_assert_eq!(decode_p6(&encode_p6(&img)).unwrap(), img);
        }

        #[test]
        fn p4_round_trip(w in 1usize..20, h in 1usize..6, bits in prop::collection::vec(any::<bool>(), 120)) {
            let mask = Grid::from_fn(w, h, |x, y| bits[y * w + x]);
            prop_assert_eq!(decode_p4(&encode_p4(&mask)).unwrap(), mask);
        }

        #[test]
        fn pfm_round_trip(w in 1usize..7, h in 1usize..7, three in any::<bool>(), vals in prop::collection::vec(any::<f32>(), 147)) {
            let channels = if three { 3 } else { 1 };
            let data: Vec<f32> = vals[..w * h * channels].iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect();
            let map = FloatMap { width: w, height: h, channels, data };
            let back = decode_pfm(&encode_pfm(&map).unwrap()).unwrap();
            prop_assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), map.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}

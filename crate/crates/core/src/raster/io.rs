//! PGM (P2/P5), PPM (P3/P6), grayscale PFM, PNG and the `FMAP` feature-map
//! container.
//!
//! PFM stores IEEE-754 single precision, so float rasters are narrowed to
//! `f32` on save; values already representable in `f32` round-trip exactly.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use super::{FeatureMap, Grid, Raster2D, RasterError, Result, RgbImage};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];
const FMAP_MAGIC: &[u8; 4] = b"FMAP";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    /// ASCII graymap, `P2`.
    PgmAscii,
    /// Binary graymap, `P5`.
    PgmBinary,
    /// Grayscale portable float map, `Pf`.
    Pfm,
    Png,
}

impl ImageFormat {
    /// Picks a format from a file extension (`pgm` maps to binary P5).
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "pgm" => Some(ImageFormat::PgmBinary),
            "pfm" => Some(ImageFormat::Pfm),
            "png" => Some(ImageFormat::Png),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::PgmAscii | ImageFormat::PgmBinary => "pgm",
            ImageFormat::Pfm => "pfm",
            ImageFormat::Png => "png",
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> RasterError {
    RasterError::Io { path: path.to_path_buf(), source }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

/// Writes `bytes` to a sibling temporary file, syncs it and renames it over
/// `path`, so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    static SEQ: AtomicU64 = AtomicU64::new(0);
    let seq = SEQ.fetch_add(1, Ordering::Relaxed);
    let tmp = dir.join(format!(".{name}.tmp-{}-{seq}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

pub fn load_gray(path: &Path) -> Result<Raster2D> {
    decode_gray(&read_file(path)?, path)
}

pub fn save_gray(raster: &Raster2D, path: &Path, format: ImageFormat) -> Result<()> {
    let bytes = encode_gray(raster, format)?;
    write_atomic(path, &bytes).map_err(|e| io_err(path, e))
}

/// Decodes a single-channel image. `path` is only used in error messages.
pub fn decode_gray(bytes: &[u8], path: &Path) -> Result<Raster2D> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        return decode_png(bytes, path, PngTarget::Gray).map(|img| match img {
            DecodedPng::Gray(r) => r,
            DecodedPng::Rgb(_) => unreachable!("gray target"),
        });
    }
    match bytes.get(..2) {
        Some(b"P2") => decode_pgm(bytes, path, false),
        Some(b"P5") => decode_pgm(bytes, path, true),
        Some(b"Pf") => decode_pfm(bytes, path),
        Some(b"PF") => Err(RasterError::Unsupported {
            path: path.to_path_buf(),
            offset: 0,
            detail: "three-channel PFM is not a grayscale image".into(),
        }),
        Some(b"P3") | Some(b"P6") => Err(RasterError::Unsupported {
            path: path.to_path_buf(),
            offset: 0,
            detail: "PPM color image where a single channel was expected".into(),
        }),
        _ => Err(RasterError::Unsupported {
            path: path.to_path_buf(),
            offset: 0,
            detail: "unrecognized magic number".into(),
        }),
    }
}

pub fn encode_gray(raster: &Raster2D, format: ImageFormat) -> Result<Vec<u8>> {
    match (raster, format) {
        (Raster2D::Byte8(g), ImageFormat::PgmAscii) => Ok(encode_pgm_ascii(g.dims(), 255, g.data().iter().map(|&v| u32::from(v)))),
        (Raster2D::Uint16(g), ImageFormat::PgmAscii) => Ok(encode_pgm_ascii(g.dims(), 65535, g.data().iter().map(|&v| u32::from(v)))),
        (Raster2D::Byte8(g), ImageFormat::PgmBinary) => {
            let mut out = format!("P5\n{} {}\n255\n", g.width(), g.height()).into_bytes();
            out.extend_from_slice(g.data());
            Ok(out)
        }
        (Raster2D::Uint16(g), ImageFormat::PgmBinary) => {
            let mut out = format!("P5\n{} {}\n65535\n", g.width(), g.height()).into_bytes();
            out.extend(g.data().iter().flat_map(|v| v.to_be_bytes()));
            Ok(out)
        }
        (Raster2D::Float64(g), ImageFormat::Pfm) => {
            let mut out = format!("Pf\n{} {}\n-1.0\n", g.width(), g.height()).into_bytes();
            for y in (0..g.height()).rev() {
                for x in 0..g.width() {
                    out.extend_from_slice(&(g.get(x, y) as f32).to_le_bytes());
                }
            }
            Ok(out)
        }
        (Raster2D::Byte8(g), ImageFormat::Png) => {
            encode_png(g.dims(), png::ColorType::Grayscale, png::BitDepth::Eight, g.data())
        }
        (Raster2D::Uint16(g), ImageFormat::Png) => {
            let bytes: Vec<u8> = g.data().iter().flat_map(|v| v.to_be_bytes()).collect();
            encode_png(g.dims(), png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
        }
        (r, format) => Err(RasterError::KindMismatch { kind: r.kind(), format }),
    }
}

fn encode_pgm_ascii((w, h): (usize, usize), maxval: u32, values: impl Iterator<Item = u32>) -> Vec<u8> {
    let mut out = format!("P2\n{w} {h}\n{maxval}\n");
    for (i, v) in values.enumerate() {
        out.push_str(&v.to_string());
        out.push(if (i + 1) % w == 0 { '\n' } else { ' ' });
    }
    out.into_bytes()
}

/// Whitespace/comment aware tokenizer over a netpbm-style header.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<(usize, &'a str)> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.malformed(start, "unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map(|s| (start, s))
            .map_err(|_| self.malformed(start, "non-ASCII header token"))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let (at, tok) = self.token()?;
        tok.parse().map_err(|_| self.malformed(at, &format!("invalid {what} {tok:?}")))
    }

    fn dimension(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v: usize = self.number(what)?;
        if v == 0 {
            return Err(self.malformed(at, &format!("{what} must be positive")));
        }
        Ok(v)
    }

    /// Consumes the single whitespace byte that separates the header from a
    /// binary payload and returns the payload offset.
    fn payload_start(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(self.malformed(self.pos, "missing whitespace before payload")),
        }
    }

    fn malformed(&self, offset: usize, detail: &str) -> RasterError {
        RasterError::Malformed { path: self.path.to_path_buf(), offset: offset as u64, detail: detail.to_string() }
    }
}

fn truncated(path: &Path, offset: usize, expected: usize) -> RasterError {
    RasterError::Truncated { path: path.to_path_buf(), offset: offset as u64, expected: expected as u64 }
}

struct PnmHeader {
    width: usize,
    height: usize,
    maxval: u32,
}

fn pnm_header(h: &mut Header<'_>) -> Result<PnmHeader> {
    h.token()?;
    let width = h.dimension("width")?;
    let height = h.dimension("height")?;
    let at = h.pos;
    let maxval: u32 = h.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(h.malformed(at, &format!("maxval {maxval} outside 1..=65535")));
    }
    Ok(PnmHeader { width, height, maxval })
}

/// Reads `count` samples of a P2/P3 (ascii) or P5/P6 (binary) payload.
fn pnm_samples(h: &mut Header<'_>, header: &PnmHeader, count: usize, binary: bool) -> Result<Vec<u16>> {
    let path = h.path;
    if binary {
        let start = h.payload_start()?;
        let bytes_per = if header.maxval > 255 { 2 } else { 1 };
        let expected = count * bytes_per;
        let payload = &h.bytes[start.min(h.bytes.len())..];
        if payload.len() < expected {
            return Err(truncated(path, start + payload.len(), expected));
        }
        let samples: Vec<u16> = if bytes_per == 1 {
            payload[..count].iter().map(|&b| u16::from(b)).collect()
        } else {
            payload[..expected].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        };
        if let Some(i) = samples.iter().position(|&v| u32::from(v) > header.maxval) {
            return Err(h.malformed(start + i * bytes_per, "sample exceeds maxval"));
        }
        Ok(samples)
    } else {
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            h.skip_space();
            if h.pos >= h.bytes.len() {
                return Err(truncated(path, h.pos, count));
            }
            let at = h.pos;
            let v: u32 = h.number("sample")?;
            if v > header.maxval {
                return Err(h.malformed(at, "sample exceeds maxval"));
            }
            samples.push(v as u16);
        }
        Ok(samples)
    }
}

fn decode_pgm(bytes: &[u8], path: &Path, binary: bool) -> Result<Raster2D> {
    let mut h = Header::new(bytes, path);
    let header = pnm_header(&mut h)?;
    let samples = pnm_samples(&mut h, &header, header.width * header.height, binary)?;
    if header.maxval <= 255 {
        let data = samples.into_iter().map(|v| v as u8).collect();
        Ok(Raster2D::Byte8(Grid::new(header.width, header.height, data)?))
    } else {
        Ok(Raster2D::Uint16(Grid::new(header.width, header.height, samples)?))
    }
}

fn decode_ppm(bytes: &[u8], path: &Path, binary: bool) -> Result<RgbImage> {
    let mut h = Header::new(bytes, path);
    let header = pnm_header(&mut h)?;
    if header.maxval > 255 {
        return Err(RasterError::Unsupported {
            path: path.to_path_buf(),
            offset: 0,
            detail: "16-bit PPM is not supported".into(),
        });
    }
    let samples = pnm_samples(&mut h, &header, header.width * header.height * 3, binary)?;
    let data = samples.chunks_exact(3).map(|c| [c[0] as u8, c[1] as u8, c[2] as u8]).collect();
    Grid::new(header.width, header.height, data)
}

fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Raster2D> {
    let mut h = Header::new(bytes, path);
    h.token()?;
    let width = h.dimension("width")?;
    let height = h.dimension("height")?;
    let (at, tok) = h.token()?;
    let scale: f64 = tok.parse().map_err(|_| h.malformed(at, &format!("invalid scale {tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(h.malformed(at, "scale must be finite and non-zero"));
    }
    let little = scale < 0.0;
    let start = h.payload_start()?;
    let expected = width * height * 4;
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() < expected {
        return Err(truncated(path, start + payload.len(), expected));
    }
    let mut data = vec![0.0; width * height];
    for (k, chunk) in payload[..expected].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        if !v.is_finite() {
            return Err(h.malformed(start + 4 * k, "non-finite sample"));
        }
        // PFM rows run bottom to top.
        let (row, col) = (height - 1 - k / width, k % width);
        data[row * width + col] = f64::from(v);
    }
    Raster2D::float64(Grid::new(width, height, data)?)
}

enum PngTarget {
    Gray,
    Rgb,
}

enum DecodedPng {
    Gray(Raster2D),
    Rgb(RgbImage),
}

fn decode_png(bytes: &[u8], path: &Path, target: PngTarget) -> Result<DecodedPng> {
    use png::{BitDepth, ColorType};

    let mut cursor = Cursor::new(bytes);
    let fail = |cursor: &Cursor<&[u8]>, e: png::DecodingError| -> RasterError {
        let offset = cursor.position();
        match e {
            png::DecodingError::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
                RasterError::Truncated { path: path.to_path_buf(), offset, expected: bytes.len() as u64 + 1 }
            }
            other => RasterError::Malformed { path: path.to_path_buf(), offset, detail: other.to_string() },
        }
    };
    let decoder = png::Decoder::new(&mut cursor);
    let mut reader = match decoder.read_info() {
        Ok(r) => r,
        Err(e) => return Err(fail(&cursor, e)),
    };
    let info = reader.info();
    let (width, height) = (info.width as usize, info.height as usize);
    let (color, depth) = (info.color_type, info.bit_depth);
    let unsupported = |detail: String| RasterError::Unsupported { path: path.to_path_buf(), offset: 0, detail };
    match (&target, color, depth) {
        (PngTarget::Gray, ColorType::Grayscale, BitDepth::Eight | BitDepth::Sixteen) => {}
        (PngTarget::Gray, c, d) => {
            return Err(unsupported(format!("expected single-channel 8/16-bit PNG, found {c:?} at {d:?}")))
        }
        (PngTarget::Rgb, ColorType::Rgb | ColorType::Rgba | ColorType::Grayscale, BitDepth::Eight) => {}
        (PngTarget::Rgb, c, d) => return Err(unsupported(format!("expected 8-bit RGB PNG, found {c:?} at {d:?}"))),
    }
    let size = reader.output_buffer_size().ok_or_else(|| unsupported("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = {
        let res = reader.next_frame(&mut buf);
        drop(reader);
        res.map_err(|e| fail(&cursor, e))?
    };
    let buf = &buf[..frame.buffer_size()];
    Ok(match (target, color, depth) {
        (PngTarget::Gray, _, BitDepth::Eight) => DecodedPng::Gray(Raster2D::Byte8(Grid::new(width, height, buf.to_vec())?)),
        (PngTarget::Gray, _, _) => {
            let data = buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
            DecodedPng::Gray(Raster2D::Uint16(Grid::new(width, height, data)?))
        }
        (PngTarget::Rgb, ColorType::Grayscale, _) => DecodedPng::Rgb(Grid::new(width, height, buf.iter().map(|&v| [v, v, v]).collect())?),
        (PngTarget::Rgb, ColorType::Rgba, _) => {
            DecodedPng::Rgb(Grid::new(width, height, buf.chunks_exact(4).map(|c| [c[0], c[1], c[2]]).collect())?)
        }
        (PngTarget::Rgb, _, _) => {
            DecodedPng::Rgb(Grid::new(width, height, buf.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())?)
        }
    })
}

fn encode_png((w, h): (usize, usize), color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc.write_header().map_err(|e| RasterError::Encode(e.to_string()))?;
        writer.write_image_data(data).map_err(|e| RasterError::Encode(e.to_string()))?;
        writer.finish().map_err(|e| RasterError::Encode(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit color image (PNG RGB/RGBA/gray, PPM P3/P6, or an 8-bit
/// PGM replicated to three channels).
pub fn decode_rgb(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        return decode_png(bytes, path, PngTarget::Rgb).map(|img| match img {
            DecodedPng::Rgb(r) => r,
            DecodedPng::Gray(_) => unreachable!("rgb target"),
        });
    }
    match bytes.get(..2) {
        Some(b"P3") => decode_ppm(bytes, path, false),
        Some(b"P6") => decode_ppm(bytes, path, true),
        Some(b"P2") | Some(b"P5") => match decode_gray(bytes, path)? {
            Raster2D::Byte8(g) => Ok(g.map(|v| [v, v, v])),
            _ => Err(RasterError::Unsupported {
                path: path.to_path_buf(),
                offset: 0,
                detail: "16-bit graymap cannot be viewed as 8-bit RGB".into(),
            }),
        },
        _ => Err(RasterError::Unsupported {
            path: path.to_path_buf(),
            offset: 0,
            detail: "unrecognized color image format".into(),
        }),
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    decode_rgb(&read_file(path)?, path)
}

pub fn encode_rgb_png(image: &RgbImage) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = image.data().iter().flatten().copied().collect();
    encode_png(image.dims(), png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

pub fn save_rgb_png(image: &RgbImage, path: &Path) -> Result<()> {
    let bytes = encode_rgb_png(image)?;
    write_atomic(path, &bytes).map_err(|e| io_err(path, e))
}

/// Reads only the header of an image to obtain `(width, height)`.
pub fn image_dimensions(path: &Path) -> Result<(usize, usize)> {
    let bytes = read_file(path)?;
    if bytes.starts_with(&PNG_SIGNATURE) {
        let mut cursor = Cursor::new(bytes.as_slice());
        let reader = png::Decoder::new(&mut cursor).read_info();
        return match reader {
            Ok(r) => Ok((r.info().width as usize, r.info().height as usize)),
            Err(e) => Err(RasterError::Malformed { path: path.to_path_buf(), offset: 0, detail: e.to_string() }),
        };
    }
    // Decoding the full payload also validates the file; netpbm images are
    // small enough that this is not a concern.
    match bytes.get(..2) {
        Some(b"P3") | Some(b"P6") => decode_rgb(&bytes, path).map(|g| g.dims()),
        _ => decode_gray(&bytes, path).map(|r| (r.width(), r.height())),
    }
}

/// Serializes a feature map: `"FMAP"`, then `u32` C, H, W (little-endian),
/// then `C*H*W` little-endian `f64` values.
pub fn write_feature_map<W: Write>(map: &FeatureMap, mut w: W) -> std::io::Result<()> {
    w.write_all(FMAP_MAGIC)?;
    for d in [map.channels(), map.height(), map.width()] {
        let d = u32::try_from(d).map_err(|_| std::io::Error::other("dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in map.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature_map<R: Read>(mut r: R, path: &Path) -> Result<FeatureMap> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    if bytes.len() < 16 {
        return Err(truncated(path, bytes.len(), 16));
    }
    if &bytes[..4] != FMAP_MAGIC {
        return Err(RasterError::Unsupported { path: path.to_path_buf(), offset: 0, detail: "missing FMAP magic".into() });
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let expected = c * h * w * 8;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(truncated(path, bytes.len(), 16 + expected));
    }
    let data = payload[..expected].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    FeatureMap::new(c, h, w, data)
}

pub fn save_feature_map(map: &FeatureMap, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + map.data().len() * 8);
    write_feature_map(map, &mut bytes).map_err(|e| io_err(path, e))?;
    write_atomic(path, &bytes).map_err(|e| io_err(path, e))
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    read_feature_map(read_file(path)?.as_slice(), path)
}

impl Raster2D {
    /// Rescales a `{0,1}` byte mask to `{0,255}` for viewing. Other kinds
    /// and values are returned unchanged.
    pub fn visualized(&self) -> Raster2D {
        match self {
            Raster2D::Byte8(g) if g.data().iter().all(|&v| v <= 1) => Raster2D::Byte8(g.map(|v| v * 255)),
            other => other.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::PixelKind;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn ascii_pgm_literal() {
        let r = decode_gray(b"P2\n# comment\n2 2\n255\n0 1\n2 3\n", p()).unwrap();
        assert_eq!(r, Raster2D::Byte8(Grid::new(2, 2, vec![0, 1, 2, 3]).unwrap()));
    }

    #[test]
    fn binary_pgm_zero_image_payload() {
        let r = Raster2D::Byte8(Grid::filled(4, 4, 0));
        let bytes = encode_gray(&r, ImageFormat::PgmBinary).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0u8; 16]);
    }

    #[test]
    fn mask_values_survive_without_visualization() {
        let mask = Raster2D::Byte8(Grid::new(3, 1, vec![0, 1, 1]).unwrap());
        for fmt in [ImageFormat::PgmBinary, ImageFormat::PgmAscii, ImageFormat::Png] {
            let back = decode_gray(&encode_gray(&mask, fmt).unwrap(), p()).unwrap();
            assert_eq!(back, mask, "{fmt:?}");
        }
        assert_eq!(mask.visualized(), Raster2D::Byte8(Grid::new(3, 1, vec![0, 255, 255]).unwrap()));
    }

    #[test]
    fn pfm_big_and_little_endian_rows_flip() {
        // Stored bottom-up: first payload row is the image's last row.
        let mut le = b"Pf\n2 2\n-1.0\n".to_vec();
        let mut be = b"Pf\n2 2\n1.0\n".to_vec();
        for v in [3.0f32, 4.0, 1.0, 2.0] {
            le.extend_from_slice(&v.to_le_bytes());
            be.extend_from_slice(&v.to_be_bytes());
        }
        let want = Raster2D::Float64(Grid::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(decode_gray(&le, p()).unwrap(), want);
        assert_eq!(decode_gray(&be, p()).unwrap(), want);
    }

    #[test]
    fn uint16_png_round_trip_is_byte_identical() {
        let r = Raster2D::Uint16(Grid::new(3, 1, vec![0, 32768, 65535]).unwrap());
        let bytes = encode_gray(&r, ImageFormat::Png).unwrap();
        let back = decode_gray(&bytes, p()).unwrap();
        assert_eq!(back, r);
        assert_eq!(encode_gray(&back, ImageFormat::Png).unwrap(), bytes);
    }

    #[test]
    fn random_float_pfm_round_trip_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..64).map(|_| f64::from(rng.random::<f32>() * 10.0 - 5.0)).collect();
        let r = Raster2D::Float64(Grid::new(8, 8, data).unwrap());
        let back = decode_gray(&encode_gray(&r, ImageFormat::Pfm).unwrap(), p()).unwrap();
        let (a, b) = (r.to_f64(), back.to_f64());
        let max_diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert_eq!(max_diff, 0.0);
    }

    #[test]
    fn truncated_payloads_report_offsets() {
        let err = decode_gray(b"P5\n4 4\n255\n\0\0\0", p()).unwrap_err();
        assert!(matches!(err, RasterError::Truncated { offset: 14, expected: 16, .. }), "{err}");
        let err = decode_gray(b"P2\n2 2\n255\n1 2 3", p()).unwrap_err();
        assert!(matches!(err, RasterError::Truncated { .. }), "{err}");
        let err = decode_gray(b"Pf\n2 2\n-1.0\n\0\0\0\0", p()).unwrap_err();
        assert!(matches!(err, RasterError::Truncated { offset: 16, expected: 16, .. }), "{err}");
        let full = encode_gray(&Raster2D::Byte8(Grid::filled(5, 5, 9)), ImageFormat::Png).unwrap();
        assert!(decode_gray(&full[..full.len() - 20], p()).is_err());
    }

    #[test]
    fn unsupported_inputs_are_rejected() {
        assert!(matches!(decode_gray(b"PF\n1 1\n-1\n", p()), Err(RasterError::Unsupported { .. })));
        assert!(matches!(decode_gray(b"GIF89a", p()), Err(RasterError::Unsupported { .. })));
        let rgb = encode_rgb_png(&Grid::filled(2, 2, [1, 2, 3])).unwrap();
        assert!(matches!(decode_gray(&rgb, p()), Err(RasterError::Unsupported { .. })));
        let f = Raster2D::Float64(Grid::filled(2, 2, 0.5));
        assert!(matches!(encode_gray(&f, ImageFormat::Png), Err(RasterError::KindMismatch { .. })));
        let b = Raster2D::Byte8(Grid::filled(2, 2, 1));
        assert!(matches!(encode_gray(&b, ImageFormat::Pfm), Err(RasterError::KindMismatch { .. })));
    }

    #[test]
    fn malformed_header_reports_offset() {
        let err = decode_gray(b"P5\n4 x\n255\n", p()).unwrap_err();
        assert!(matches!(err, RasterError::Malformed { offset: 5, .. }), "{err}");
    }

    #[test]
    fn rgb_formats_decode() {
        let img = Grid::from_fn(3, 2, |x, y| [x as u8, y as u8, 7]);
        assert_eq!(decode_rgb(&encode_rgb_png(&img).unwrap(), p()).unwrap(), img);
        let mut ppm = b"P6\n3 2\n255\n".to_vec();
        ppm.extend(img.data().iter().flatten());
        assert_eq!(decode_rgb(&ppm, p()).unwrap(), img);
    }

    #[test]
    fn fmap_header_is_sixteen_bytes() {
        let f = FeatureMap::from_fn(2, 1, 3, |c, i, j| (c + i + j) as f64 * 0.5);
        let mut bytes = Vec::new();
        write_feature_map(&f, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"FMAP");
        assert_eq!(&bytes[4..16], &[2, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 6 * 8);
        assert_eq!(read_feature_map(bytes.as_slice(), p()).unwrap(), f);
    }

    #[test]
    fn files_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let r = Raster2D::Uint16(Grid::new(2, 1, vec![300, 7]).unwrap());
        save_gray(&r, &path, ImageFormat::PgmBinary).unwrap();
        assert_eq!(load_gray(&path).unwrap(), r);
        assert_eq!(image_dimensions(&path).unwrap(), (2, 1));
        let missing = dir.path().join("nope.png");
        assert!(matches!(load_gray(&missing), Err(RasterError::Io { .. })));
    }

    fn arb_raster() -> impl Strategy<Value = Raster2D> {
        (1usize..7, 1usize..7, 0u8..3).prop_flat_map(|(w, h, kind)| {
            let n = w * h;
            match kind {
                0 => prop::collection::vec(any::<u8>(), n)
                    .prop_map(move |d| Raster2D::Byte8(Grid::new(w, h, d).unwrap()))
                    .boxed(),
                1 => prop::collection::vec(any::<u16>(), n)
                    .prop_map(move |d| Raster2D::Uint16(Grid::new(w, h, d).unwrap()))
                    .boxed(),
                _ => prop::collection::vec(-1e6f32..1e6, n)
                    .prop_map(move |d| Raster2D::Float64(Grid::new(w, h, d.into_iter().map(f64::from).collect()).unwrap()))
                    .boxed(),
            }
        })
    }

    proptest! {
        #[test]
        fn save_then_load_is_identity(r in arb_raster()) {
            let formats: &[ImageFormat] = match r.kind() {
                PixelKind::Float64 => &[ImageFormat::Pfm],
                _ => &[ImageFormat::PgmAscii, ImageFormat::PgmBinary, ImageFormat::Png],
            };
            for &fmt in formats {
                let back = decode_gray(&encode_gray(&r, fmt).unwrap(), p()).unwrap();
                prop_assert_eq!(&back, &r);
            }
        }
    }
}

//! Frame decoding (binary PGM, PNG), frame directories and PGM writing.

use std::cell::Cell;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use epigeo_core::image::Frame;

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "pgm" => Some(Self::Pgm),
            "png" => Some(Self::Png),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("decode error at byte {offset}: {message}")]
    Decode { offset: usize, message: String },
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] epigeo_core::Error),
}

impl IoError {
    fn decode(offset: usize, message: impl Into<String>) -> Self {
        IoError::Decode {
            offset,
            message: message.into(),
        }
    }

    pub fn file(path: &Path, source: std::io::Error) -> Self {
        IoError::File {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Decoded luminance of any size. [`Gray::into_frame`] applies the frame
/// size rules.
#[derive(Debug, Clone, PartialEq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Gray {
    pub fn into_frame(self) -> Result<Frame, IoError> {
        Ok(Frame::new(self.width, self.height, self.pixels)?)
    }
}

pub fn decode_frame(bytes: &[u8], format: ImageFormat) -> Result<Gray, IoError> {
    match format {
        ImageFormat::Pgm => decode_pgm(bytes),
        ImageFormat::Png => decode_png(bytes),
    }
}

struct PgmHeader<'a> {
    bytes: &'a [u8],
    pos: usize,
    comments: Vec<String>,
}

impl PgmHeader<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                let start = self.pos + 1;
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
                self.comments.push(String::from_utf8_lossy(&self.bytes[start..self.pos]).trim().to_string());
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, IoError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(IoError::decode(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| IoError::decode(start, format!("{what} out of range")))
    }
}

/// Header comments of a binary PGM, in order.
pub fn pgm_comments(bytes: &[u8]) -> Result<Vec<String>, IoError> {
    Ok(parse_pgm(bytes)?.1)
}

/// Width, height, maxval and the offset of the pixel data.
type PgmLayout = (usize, usize, usize, usize);

fn parse_pgm(bytes: &[u8]) -> Result<(PgmLayout, Vec<String>), IoError> {
    if !bytes.starts_with(b"P5") {
        return Err(IoError::decode(0, "not a binary PGM (missing P5 magic)"));
    }
    let mut h = PgmHeader {
        bytes,
        pos: 2,
        comments: Vec::new(),
    };
    if !h.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(IoError::decode(2, "expected whitespace after magic"));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(IoError::decode(maxval_at, "zero image size"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(IoError::decode(maxval_at, format!("maxval {maxval} outside 1..=65535")));
    }
    if !h.bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(IoError::decode(h.pos, "expected single whitespace before pixel data"));
    }
    Ok(((width, height, maxval, h.pos + 1), h.comments))
}

fn decode_pgm(bytes: &[u8]) -> Result<Gray, IoError> {
    let ((width, height, maxval, data), _) = parse_pgm(bytes)?;
    let sample = if maxval > 255 { 2 } else { 1 };
    let n = width * height;
    let need = n * sample;
    let body = &bytes[data..];
    if body.len() < need {
        return Err(IoError::decode(
            bytes.len(),
            format!("pixel data truncated: {} of {need} bytes present", body.len()),
        ));
    }
    let max = maxval as f64;
    let pixels = (0..n)
        .map(|i| {
            let v = if sample == 2 {
                u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as usize
            } else {
                body[i] as usize
            };
            if v > maxval {
                Err(IoError::decode(data + i * sample, format!("sample {v} exceeds maxval {maxval}")))
            } else {
                Ok(v as f64 / max)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Gray { width, height, pixels })
}

/// Reader that records how many bytes the decoder has pulled.
struct Counting<'a> {
    inner: &'a [u8],
    pos: Rc<Cell<usize>>,
}

impl Read for Counting<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.pos.set(self.pos.get() + n);
        Ok(n)
    }
}

fn decode_png(bytes: &[u8]) -> Result<Gray, IoError> {
    let pos = Rc::new(Cell::new(0));
    // The decoder reads ahead, so the offset is where reading had got to.
    let fail = |e: png::DecodingError| IoError::decode(pos.get(), format!("PNG: {e}"));
    let mut decoder = png::Decoder::new(Counting {
        inner: bytes,
        pos: pos.clone(),
    });
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(fail)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let max = if wide { 65535.0 } else { 255.0 };
    let sample = |k: usize| -> f64 {
        if wide {
            u16::from_be_bytes([buf[2 * k], buf[2 * k + 1]]) as f64 / max
        } else {
            buf[k] as f64 / max
        }
    };
    let pixels = (0..width * height)
        .map(|p| {
            let base = p * channels;
            match channels {
                1 | 2 => sample(base),
                _ => LUMA[0] * sample(base) + LUMA[1] * sample(base + 1) + LUMA[2] * sample(base + 2),
            }
            .clamp(0.0, 1.0)
        })
        .collect();
    Ok(Gray { width, height, pixels })
}

/// Binary 8-bit PGM with optional header comments.
pub fn encode_pgm(frame: &Frame, comments: &[String]) -> Vec<u8> {
    let mut out = b"P5\n".to_vec();
    for c in comments {
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    out.extend_from_slice(format!("{} {}\n255\n", frame.width(), frame.height()).as_bytes());
    out.extend(frame.pixels().iter().map(|p| (p * 255.0).round() as u8));
    out
}

/// Trailing run of digits in a file stem, used to order frames.
fn frame_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

/// PGM and PNG files of a frame directory in numeric filename order.
pub fn frame_files(dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    let entries = fs::read_dir(dir).map_err(|e| IoError::file(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| IoError::file(dir, e))?.path();
        if path.is_file() && ImageFormat::from_path(&path).is_some() {
            files.push(path);
        }
    }
    files.sort_by(|a, b| {
        (frame_number(a).unwrap_or(u64::MAX), a.file_name()).cmp(&(frame_number(b).unwrap_or(u64::MAX), b.file_name()))
    });
    Ok(files)
}

pub fn read_frame(path: &Path, max_dim: Option<usize>) -> Result<Frame, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::file(path, e))?;
    let format = ImageFormat::from_path(path).ok_or_else(|| IoError::Input(format!("{}: unknown image type", path.display())))?;
    let gray = decode_frame(&bytes, format).map_err(|e| IoError::Input(format!("{}: {e}", path.display())))?;
    let gray = match max_dim {
        Some(m) => fit_within(&gray, m),
        None => gray,
    };
    gray.into_frame()
        .map_err(|e| IoError::Input(format!("{}: {e}", path.display())))
}

/// All frames of a directory. A directory without frame files is an error.
pub fn load_frames(dir: &Path, max_dim: Option<usize>) -> Result<Vec<Frame>, IoError> {
    let files = frame_files(dir)?;
    if files.is_empty() {
        return Err(IoError::Input(format!("{}: no PGM or PNG frames", dir.display())));
    }
    files.iter().map(|p| read_frame(p, max_dim)).collect()
}

/// Area-average downscale so that neither edge exceeds `max_dim`. Images
/// already small enough are returned unchanged.
pub fn fit_within(img: &Gray, max_dim: usize) -> Gray {
    let longest = img.width.max(img.height);
    if max_dim == 0 || longest <= max_dim {
        return img.clone();
    }
    let s = longest as f64 / max_dim as f64;
    let nw = ((img.width as f64 / s).round() as usize).max(1);
    let nh = ((img.height as f64 / s).round() as usize).max(1);
    let wx = area_weights(img.width, nw);
    let wy = area_weights(img.height, nh);
    let mut rows = vec![0.0; img.height * nw];
    for y in 0..img.height {
        for (ox, taps) in wx.iter().enumerate() {
            rows[y * nw + ox] = taps.iter().map(|&(x, w)| w * img.pixels[y * img.width + x]).sum();
        }
    }
    let mut pixels = vec![0.0; nh * nw];
    for (oy, taps) in wy.iter().enumerate() {
        for ox in 0..nw {
            pixels[oy * nw + ox] = taps.iter().map(|&(y, w)| w * rows[y * nw + ox]).sum::<f64>().clamp(0.0, 1.0);
        }
    }
    Gray {
        width: nw,
        height: nh,
        pixels,
    }
}

/// For each output sample, the input samples it covers and their
/// normalized overlap.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let s = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (lo, hi) = (o as f64 * s, (o + 1) as f64 * s);
            let mut taps: Vec<(usize, f64)> = (lo.floor() as usize..(hi.ceil() as usize).min(n_in))
                .map(|i| (i, (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0)))
                .filter(|(_, w)| *w > 0.0)
                .collect();
            let total: f64 = taps.iter().map(|(_, w)| w).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png_bytes(w: u32, h: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(color);
        enc.set_depth(depth);
        enc.write_header().unwrap().write_image_data(data).unwrap();
        out
    }

    #[test]
    fn pgm_endpoints() {
        let g = decode_frame(b"P5\n2 2\n255\n\x00\xff\xff\x00", ImageFormat::Pgm).unwrap();
        assert_eq!((g.width, g.height), (2, 2));
        assert_eq!(g.pixels, [0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn pgm_sixteen_bit_and_comments() {
        let g = decode_frame(b"P5 # made by hand\n1 2\n# another\n65535\n\xff\xff\x80\x00", ImageFormat::Pgm).unwrap();
        assert_eq!(g.pixels, [1.0, 32768.0 / 65535.0]);
        let c = pgm_comments(b"P5 # made by hand\n1 2\n# another\n65535\n\xff\xff\x80\x00").unwrap();
        assert_eq!(c, ["made by hand", "another"]);
    }

    #[test]
    fn pgm_errors_name_offsets() {
        match decode_frame(b"P5\n2 2\n255\n\x00\xff", ImageFormat::Pgm) {
            Err(IoError::Decode { offset, .. }) => assert_eq!(offset, 13),
            other => panic!("{other:?}"),
        }
        match decode_frame(b"P5\n2 x\n255\n", ImageFormat::Pgm) {
            Err(IoError::Decode { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_frame(b"P2\n", ImageFormat::Pgm), Err(IoError::Decode { offset: 0, .. })));
        assert!(decode_frame(b"P5\n1 1\n100\n\xc8", ImageFormat::Pgm).is_err());
    }

    #[test]
    fn png_luma() {
        let red = png_bytes(1, 1, png::ColorType::Rgb, png::BitDepth::Eight, &[255, 0, 0]);
        let g = decode_frame(&red, ImageFormat::Png).unwrap();
        assert!((g.pixels[0] - 0.299).abs() < 1e-15);
        let wide = png_bytes(2, 1, png::ColorType::Grayscale, png::BitDepth::Sixteen, &[0xff, 0xff, 0, 0]);
        assert_eq!(decode_frame(&wide, ImageFormat::Png).unwrap().pixels, [1.0, 0.0]);
        let rgba = png_bytes(1, 1, png::ColorType::Rgba, png::BitDepth::Eight, &[0, 255, 0, 7]);
        assert!((decode_frame(&rgba, ImageFormat::Png).unwrap().pixels[0] - 0.587).abs() < 1e-15);
    }

    #[test]
    fn png_truncation_is_an_error() {
        let img = png_bytes(4, 4, png::ColorType::Grayscale, png::BitDepth::Eight, &[9; 16]);
        let err = decode_frame(&img[..img.len() - 20], ImageFormat::Png).unwrap_err();
        assert!(matches!(err, IoError::Decode { .. }), "{err}");
        assert!(matches!(decode_frame(b"nope", ImageFormat::Png), Err(IoError::Decode { .. })));
    }

    #[test]
    fn pgm_roundtrip() {
        let px: Vec<f64> = (0..16 * 16).map(|i| (i % 256) as f64 / 255.0).collect();
        let f = Frame::new(16, 16, px).unwrap();
        let bytes = encode_pgm(&f, &["hello".into()]);
        let g = decode_frame(&bytes, ImageFormat::Pgm).unwrap();
        assert_eq!(g.pixels, f.pixels());
        assert_eq!(pgm_comments(&bytes).unwrap(), ["hello"]);
    }

    #[test]
    fn downscale_averages_areas() {
        let g = Gray {
            width: 4,
            height: 2,
            pixels: vec![0.0, 1.0, 0.5, 0.5, 0.0, 1.0, 0.5, 0.5],
        };
        let s = fit_within(&g, 2);
        assert_eq!((s.width, s.height), (2, 1));
        assert_eq!(s.pixels, [0.5, 0.5]);
        assert_eq!(fit_within(&g, 8), g);
        let odd = fit_within(&Gray { width: 3, height: 1, pixels: vec![0.0, 0.3, 0.9] }, 2);
        assert_eq!(odd.width, 2);
        assert!((odd.pixels[0] - 0.1).abs() < 1e-12 && (odd.pixels[1] - 0.7).abs() < 1e-12);
    }
}

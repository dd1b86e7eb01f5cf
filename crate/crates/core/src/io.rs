//! Frame and flow file formats, and color-coded flow rendering.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{FlowField, Image};

/// Tag at the start of every Middlebury `.flo` file ("PIEH" as bytes).
pub const FLO_TAG: f32 = 202021.25;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Serialises a flow field in the Middlebury `.flo` layout.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = flow.extents();
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(&FLO_TAG.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (u, v) in flow.u.data().iter().zip(flow.v.data()) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated .flo header"));
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
    let tag = f32::from_le_bytes(word(0));
    if tag != FLO_TAG {
        return Err(Error::format(
            path,
            format!("bad .flo tag {tag}, expected {FLO_TAG}"),
        ));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16 {
        return Err(Error::format(path, format!("implausible extents {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let payload = &bytes[12..];
    if payload.len() != 8 * w * h {
        return Err(Error::format(
            path,
            format!(
                "truncated or oversized payload: {} bytes for {w}x{h} (expected {})",
                payload.len(),
                8 * w * h
            ),
        ));
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for px in payload.chunks_exact(8) {
        u.push(f32::from_le_bytes(px[..4].try_into().unwrap()));
        v.push(f32::from_le_bytes(px[4..].try_into().unwrap()));
    }
    FlowField::from_components(h, w, u, v)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    decode_flo(&read_bytes(path)?, path)
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_flo(flow))
}

struct Pnm<'a> {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data: &'a [u8],
}

fn parse_pnm<'a>(bytes: &'a [u8], path: &Path) -> Result<Pnm<'a>> {
    let mut pos = 2;
    let mut field = || -> Result<usize> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format(path, "truncated PNM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed PNM header"))
    };
    let (width, height, maxval) = (field()?, field()?, field()?);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, "invalid PNM extents or maxval"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(Error::format(path, "missing raster after PNM header"));
    }
    Ok(Pnm {
        magic: [bytes[0], bytes[1]],
        width,
        height,
        maxval,
        data: &bytes[pos + 1..],
    })
}

fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let pnm = parse_pnm(bytes, path)?;
    let channels = if &pnm.magic == b"P6" { 3 } else { 1 };
    let depth = if pnm.maxval > 255 { 2 } else { 1 };
    let n = pnm.width * pnm.height;
    if pnm.data.len() < n * channels * depth {
        return Err(Error::format(path, "truncated PNM raster"));
    }
    let sample = |i: usize| -> f32 {
        let raw = if depth == 1 {
            pnm.data[i] as u32
        } else {
            u16::from_be_bytes([pnm.data[2 * i], pnm.data[2 * i + 1]]) as u32
        };
        raw as f32 / pnm.maxval as f32
    };
    let data = (0..n)
        .map(|p| {
            if channels == 1 {
                sample(p)
            } else {
                (0..3).map(|c| LUMA[c] * sample(3 * p + c)).sum::<f32>()
            }
        })
        .map(|x| x.clamp(0.0, 1.0))
        .collect();
    Image::new(pnm.height, pnm.width, data)
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb
        .pixels()
        .map(|p| (LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).clamp(0.0, 1.0))
        .collect();
    Image::new(h, w, data)
}

/// Loads a binary PGM/PPM or a PNG frame as intensities in `[0, 1]`.
/// Color input is reduced with luma weights `(0.299, 0.587, 0.114)`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    match bytes.get(..2) {
        Some(b"P5") | Some(b"P6") => decode_pnm(&bytes, path),
        _ if bytes.starts_with(b"\x89PNG") => decode_png(&bytes, path),
        _ => Err(Error::format(
            path,
            "unsupported image format (expected binary PGM/PPM or PNG)",
        )),
    }
}

/// Writes an 8-bit binary PGM.
pub fn write_pgm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = image.extents();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    write_bytes(path.as_ref(), &out)
}

/// 8-bit RGB raster, row-major, three bytes per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Writes PPM (P6) when the extension is `.ppm`, PNG otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let is_ppm = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
        if is_ppm {
            let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
            out.extend_from_slice(&self.data);
            write_bytes(path, &out)
        } else {
            image::save_buffer_with_format(
                path,
                &self.data,
                self.width as u32,
                self.height as u32,
                image::ExtendedColorType::Rgb8,
                image::ImageFormat::Png,
            )
            .map_err(|e| Error::format(path, e.to_string()))
        }
    }
}

/// Hue, saturation and value in `[0, 360) x [0, 1] x [0, 1]` to 8-bit RGB.
pub fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [u8; 3] {
    let c = val * sat;
    let hp = hue.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r, g, b].map(|ch| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// 99th percentile of per-pixel flow magnitude over finite pixels.
pub fn magnitude_percentile_99(flow: &FlowField) -> f64 {
    let mut mags: Vec<f64> = flow
        .u
        .data()
        .iter()
        .zip(flow.v.data())
        .map(|(&u, &v)| (u as f64).hypot(v as f64))
        .filter(|m| m.is_finite())
        .collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let idx = ((mags.len() - 1) as f64 * 0.99).round() as usize;
    mags[idx]
}

/// Color wheel rendering: hue is the flow direction, saturation the
/// magnitude relative to `max_magnitude` (default: 99th percentile),
/// saturating at 1. Zero flow is white; non-finite pixels are black.
pub fn flow_to_color(flow: &FlowField, max_magnitude: Option<f64>) -> RgbImage {
    let (h, w) = flow.extents();
    let norm = max_magnitude
        .unwrap_or_else(|| magnitude_percentile_99(flow))
        .max(f64::MIN_POSITIVE);
    let mut data = Vec::with_capacity(3 * h * w);
    for (&u, &v) in flow.u.data().iter().zip(flow.v.data()) {
        let (u, v) = (u as f64, v as f64);
        let rgb = if !u.is_finite() || !v.is_finite() {
            [0, 0, 0]
        } else {
            let sat = (u.hypot(v) / norm).min(1.0);
            hsv_to_rgb(v.atan2(u).to_degrees(), sat, 1.0)
        };
        data.extend_from_slice(&rgb);
    }
    RgbImage {
        width: w,
        height: h,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn p() -> PathBuf {
        PathBuf::from("mem.flo")
    }

    #[test]
    fn flo_round_trip_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut r = |n| (0..n).map(|_| rng.gen_range(-10.0f32..10.0)).collect::<Vec<_>>();
        let flow = FlowField::from_components(3, 4, r(12), r(12)).unwrap();
        let bytes = encode_flo(&flow);
        assert_eq!(decode_flo(&bytes, &p()).unwrap(), flow);

        let small =
            FlowField::from_components(1, 2, vec![1.5, 0.0], vec![-2.0, 0.0]).unwrap();
        assert_eq!(encode_flo(&small).len(), 4 + 4 + 4 + 16);
    }

    #[test]
    fn flo_nan_payload_survives() {
        let nan = f32::from_bits(0x7fc0_1234);
        let flow = FlowField::from_components(1, 1, vec![nan], vec![1.0]).unwrap();
        let back = decode_flo(&encode_flo(&flow), &p()).unwrap();
        assert_eq!(back.u.data()[0].to_bits(), 0x7fc0_1234);
    }

    #[test]
    fn flo_errors() {
        let mut bytes = encode_flo(&FlowField::zeros(2, 2));
        bytes[..4].copy_from_slice(&0.0f32.to_le_bytes());
        assert!(matches!(decode_flo(&bytes, &p()), Err(Error::Format { .. })));
        let bytes = encode_flo(&FlowField::zeros(2, 2));
        match decode_flo(&bytes[..bytes.len() - 3], &p()) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("truncated")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pgm_intensity_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        fs::write(&path, b"P5\n# comment\n2 1\n255\n\xff\x00").unwrap();
        let img = read_image(&path).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0]);
        let path = dir.path().join("b.pgm");
        write_pgm(&Image::from_fn(2, 3, |y, x| (y * 3 + x) as f32 / 5.0), &path).unwrap();
        let back = read_image(&path).unwrap();
        assert!((back.at(1, 2) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn png_red_pixel_uses_luma_weight() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("red.png");
        let img = RgbImage {
            width: 1,
            height: 1,
            data: vec![255, 0, 0],
        };
        img.save(&path).unwrap();
        assert!((read_image(&path).unwrap().data()[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn unsupported_format_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bmp");
        fs::write(&path, b"BM....").unwrap();
        match read_image(&path) {
            Err(e @ Error::Format { .. }) => assert!(e.to_string().contains("x.bmp")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_color(&FlowField::zeros(3, 3), None);
        assert!(img.data.iter().all(|&c| c == 255));
    }

    fn hue_of(rgb: [u8; 3]) -> f64 {
        let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let d = max - min;
        let h = if max == r {
            60.0 * ((g - b) / d)
        } else if max == g {
            60.0 * ((b - r) / d + 2.0)
        } else {
            60.0 * ((r - g) / d + 4.0)
        };
        h.rem_euclid(360.0)
    }

    #[test]
    fn antipodal_flows_have_opposite_hues() {
        for (u, v) in [(1.0f32, 0.0f32), (0.0, 1.0), (1.0, 1.0), (-0.3, 0.8)] {
            let a = flow_to_color(&FlowField::constant(1, 1, u, v), Some(1.0)).pixel(0, 0);
            let b = flow_to_color(&FlowField::constant(1, 1, -u, -v), Some(1.0)).pixel(0, 0);
            let diff = (hue_of(a) - hue_of(b)).rem_euclid(360.0);
            assert!((diff - 180.0).abs() < 2.0, "{u},{v}: {a:?} vs {b:?}");
        }
    }

    #[test]
    fn saturation_grows_with_magnitude() {
        let mut last = -1.0;
        for k in 0..=20 {
            let m = k as f32 * 0.25;
            let px = flow_to_color(&FlowField::constant(1, 1, m * 0.6, m * 0.8), Some(5.0))
                .pixel(0, 0)
                .map(|c| c as f64);
            let max = px.iter().cloned().fold(0.0, f64::max);
            let min = px.iter().cloned().fold(255.0, f64::min);
            let sat = (max - min) / max;
            assert!(sat >= last);
            last = sat;
        }
        assert!((last - 1.0).abs() < 1e-9);
    }
}

//! On-disk artifacts: PFM and PNG images, raw feature maps, decoder
//! checkpoints and the CSV logs.

use std::io::{Read, Write};

use image::{ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{DenseLayer, FeatureDecoder};
use crate::guidance::GuidanceLogEntry;
use crate::raster::RenderOutput;

/// Refuse headers that would allocate more than this many floats.
pub const MAX_ELEMENTS: usize = 1 << 28;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed PFM: {0}")]
    Pfm(String),
    #[error("malformed feature map: {0}")]
    FeatureMap(String),
    #[error("malformed decoder checkpoint: {0}")]
    Checkpoint(String),
    #[error("PNG encoding failed: {0}")]
    Png(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Lowercase hex SHA-256 of `bytes`, used for scene and render fingerprints.
pub fn sha256_hex(bytes: &[u8]) -> String {
    crate::math::sha256_hex(bytes)
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_ELEMENTS)
}

/// Float image, row-major with the top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PfmImage {
    pub fn from_rgb(render: &RenderOutput) -> Self {
        Self {
            width: render.width,
            height: render.height,
            channels: 3,
            data: render.rgb.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_alpha(render: &RenderOutput) -> Self {
        Self {
            width: render.width,
            height: render.height,
            channels: 1,
            data: render.alpha.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Little-endian PFM; rows are stored bottom to top as the format requires.
pub fn encode_pfm(img: &PfmImage) -> Result<Vec<u8>, FormatError> {
    let tag = match img.channels {
        3 => "PF",
        1 => "Pf",
        c => return Err(FormatError::Pfm(format!("unsupported channel count {c}"))),
    };
    let row = img.width * img.channels;
    if img.data.len() != row * img.height {
        return Err(FormatError::Pfm("data length does not match dimensions".into()));
    }
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 4);
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return None;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()
}

pub fn decode_pfm(bytes: &[u8]) -> Result<PfmImage, FormatError> {
    let bad = |m: &str| FormatError::Pfm(m.to_string());
    let mut pos = 0;
    let channels = match next_token(bytes, &mut pos) {
        Some("PF") => 3,
        Some("Pf") => 1,
        _ => return Err(bad("missing PF/Pf tag")),
    };
    let mut dim = |what: &str| -> Result<usize, FormatError> {
        next_token(bytes, &mut pos)
            .and_then(|t| t.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| bad(&format!("bad {what}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let scale: f32 = next_token(bytes, &mut pos)
        .and_then(|t| t.parse().ok())
        .filter(|s: &f32| s.is_finite() && *s != 0.0)
        .ok_or_else(|| bad("bad scale"))?;
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("header not terminated"));
    }
    pos += 1;
    let n = element_count(&[width, height, channels]).ok_or_else(|| bad("image too large"))?;
    let body = &bytes[pos..];
    if body.len() != n * 4 {
        return Err(bad(&format!("expected {} data bytes, found {}", n * 4, body.len())));
    }
    let little = scale < 0.0;
    let row = width * channels;
    let mut data = vec![0f32; n];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (i / row, i % row);
        data[(height - 1 - file_row) * row + col] = v;
    }
    Ok(PfmImage {
        width,
        height,
        channels,
        data,
    })
}

/// 8-bit RGB PNG of a render, values clamped to `[0, 1]`.
pub fn encode_png(render: &RenderOutput) -> Result<Vec<u8>, FormatError> {
    let bytes: Vec<u8> = render
        .rgb
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = RgbImage::from_raw(render.width as u32, render.height as u32, bytes)
        .ok_or_else(|| FormatError::Png("buffer does not match dimensions".into()))?;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| FormatError::Png(e.to_string()))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMapHeader {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub dtype: String,
    pub order: String,
}

/// `H x W x D` float map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn from_render(render: &RenderOutput) -> Self {
        Self {
            height: render.height,
            width: render.width,
            dim: render.feature_dim,
            data: render.feature.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn header(&self) -> FeatureMapHeader {
        FeatureMapHeader {
            height: self.height,
            width: self.width,
            dim: self.dim,
            dtype: "f32".into(),
            order: "row-major".into(),
        }
    }
}

/// One JSON header line, then `H*W*D` little-endian `f32` values.
pub fn encode_feature_map(map: &FeatureMap) -> Result<Vec<u8>, FormatError> {
    if Some(map.data.len()) != element_count(&[map.height, map.width, map.dim]) {
        return Err(FormatError::FeatureMap("data length does not match header".into()));
    }
    let mut out = serde_json::to_vec(&map.header()).expect("header serializes");
    out.push(b'\n');
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap, FormatError> {
    let bad = |m: String| FormatError::FeatureMap(m);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: FeatureMapHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
    if header.dtype != "f32" || header.order != "row-major" {
        return Err(bad(format!("unsupported layout {}/{}", header.dtype, header.order)));
    }
    let n = element_count(&[header.height, header.width, header.dim])
        .ok_or_else(|| bad("map too large".into()))?;
    let body = &bytes[nl + 1..];
    if body.len() != n * 4 {
        return Err(bad(format!("expected {} data bytes, found {}", n * 4, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(FeatureMap {
        height: header.height,
        width: header.width,
        dim: header.dim,
        data,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointLayer {
    /// `outputs x inputs`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// JSON decoder checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderCheckpoint {
    pub version: u32,
    pub dims: Vec<usize>,
    pub layers: Vec<CheckpointLayer>,
}

impl DecoderCheckpoint {
    pub fn from_decoder(d: &FeatureDecoder) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            dims: d.dims(),
            layers: d
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    weights: l.weights.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }

    pub fn into_decoder(self) -> Result<FeatureDecoder, FormatError> {
        let bad = |m: String| FormatError::Checkpoint(m);
        if self.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", self.version)));
        }
        if self.dims.len() != self.layers.len() + 1 {
            return Err(bad("dims must list one more entry than layers".into()));
        }
        let layers = self
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| DenseLayer {
                inputs: self.dims[i],
                outputs: self.dims[i + 1],
                weights: l.weights,
                bias: l.bias,
            })
            .collect();
        let d = FeatureDecoder { layers };
        d.validate().map_err(|e| bad(e.to_string()))?;
        Ok(d)
    }
}

pub fn encode_checkpoint(d: &FeatureDecoder) -> String {
    serde_json::to_string_pretty(&DecoderCheckpoint::from_decoder(d)).expect("checkpoint serializes")
}

pub fn decode_checkpoint(text: &str) -> Result<FeatureDecoder, FormatError> {
    let ck: DecoderCheckpoint =
        serde_json::from_str(text).map_err(|e| FormatError::Checkpoint(e.to_string()))?;
    ck.into_decoder()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct LossRow {
    step: usize,
    #[serde(rename = "L_feat")]
    loss: f64,
}

/// `step,L_feat` rows, one per optimisation step.
pub fn write_loss_csv<W: Write>(out: W, losses: &[f64]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(out);
    for (step, &loss) in losses.iter().enumerate() {
        w.serialize(LossRow { step, loss })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv<R: Read>(input: R) -> Result<Vec<f64>, FormatError> {
    csv::Reader::from_reader(input)
        .deserialize::<LossRow>()
        .map(|r| Ok(r?.loss))
        .collect()
}

/// `step,frame,token,E_before,E_after,in_box_mass` rows.
pub fn write_guidance_csv<W: Write>(out: W, entries: &[GuidanceLogEntry]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(out);
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_guidance_csv<R: Read>(input: R) -> Result<Vec<GuidanceLogEntry>, FormatError> {
    Ok(csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_and_row_order() {
        let img = PfmImage {
            width: 2,
            height: 2,
            channels: 1,
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        let bytes = encode_pfm(&img).unwrap();
        assert!(bytes.starts_with(b"Pf\n2 2\n-1.0\n"));
        let body = &bytes[bytes.len() - 16..];
        assert_eq!(f32::from_le_bytes(body[..4].try_into().unwrap()), 3.0);
        assert_eq!(decode_pfm(&bytes).unwrap(), img);
    }

    #[test]
    fn pfm_big_endian_and_truncation() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().data, vec![2.5]);
        bytes.pop();
        assert!(decode_pfm(&bytes).is_err());
        assert!(decode_pfm(b"PF\n100000 100000\n-1.0\n").is_err());
    }

    #[test]
    fn feature_map_round_trip() {
        let map = FeatureMap {
            height: 2,
            width: 3,
            dim: 2,
            data: (0..12).map(|i| i as f32 * 0.5).collect(),
        };
        let bytes = encode_feature_map(&map).unwrap();
        let line = bytes.split(|&b| b == b'\n').next().unwrap();
        assert_eq!(
            std::str::from_utf8(line).unwrap(),
            r#"{"H":2,"W":3,"D":2,"dtype":"f32","order":"row-major"}"#
        );
        assert_eq!(decode_feature_map(&bytes).unwrap(), map);
        assert!(decode_feature_map(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = FeatureDecoder::mlp(4, 6, 3, 2).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&d)).unwrap();
        assert_eq!(back, d);
        let mut ck = DecoderCheckpoint::from_decoder(&d);
        ck.dims[1] = 5;
        assert!(ck.into_decoder().is_err());
    }

    #[test]
    fn csv_round_trips() {
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &[0.5, 0.25]).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("step,L_feat\n0,0.5\n"));
        assert_eq!(read_loss_csv(&buf[..]).unwrap(), vec![0.5, 0.25]);

        let e = GuidanceLogEntry {
            step: 3,
            frame: 1,
            token: 2,
            e_before: 0.4,
            e_after: 0.3,
            in_box_mass: 0.45,
        };
        let mut buf = Vec::new();
        write_guidance_csv(&mut buf, &[e]).unwrap();
        assert!(String::from_utf8(buf.clone())
            .unwrap()
            .starts_with("step,frame,token,E_before,E_after,in_box_mass\n"));
        assert_eq!(read_guidance_csv(&buf[..]).unwrap(), vec![e]);
    }
}

//! `EKC1` checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic          "EKC1"
//! version        u32 (= 1)
//! config block   dim_in u64, layer_count u32, layer widths u64 x layer_count,
//!                with_projection u8, projection_width u64, embed_dim u64,
//!                dropout_rate f64, activation u8 (0 tanh, 1 relu), seed u64,
//!                frozen_backbone u8
//! parameters     f64 x parameter_count, blocks in canonical order:
//!                backbone.0.weight, backbone.0.bias, ..., projection.weight,
//!                projection.bias (if present), neck.weight, neck.bias;
//!                weights are row-major (out x in)
//! section_count  u32
//! sections       tag [u8; 4], payload length u64, payload
//! ```
//!
//! Known sections, at most once each and in this order:
//!
//! * `HEAD`: class_count u64, embed_dim u64, scale f64, weights f64 x
//!   (class_count * embed_dim), row-major.
//! * `ADAM`: block_count u32, then per block: step u64, len u64, first
//!   moments f64 x len, second moments f64 x len. Blocks follow the encoder
//!   parameter order, plus one final block for the head weights when a
//!   `HEAD` section is present.

use std::fs;
use std::path::Path;

use crate::encoder::{Activation, Dense, EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::margin::ArcFaceHead;
use crate::optim::{AdamWState, BlockMoments};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EKC1";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEAD_TAG: &[u8; 4] = b"HEAD";
const ADAM_TAG: &[u8; 4] = b"ADAM";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub encoder: EncoderState,
    pub head: Option<ArcFaceHead>,
    pub optimizer: Option<AdamWState>,
}

impl Checkpoint {
    pub fn encoder_only(encoder: EncoderState) -> Self {
        Self {
            encoder,
            head: None,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut w, CHECKPOINT_VERSION);
        let cfg = self.encoder.config();
        put_u64(&mut w, cfg.dim_in as u64);
        put_u32(&mut w, cfg.backbone_widths.len() as u32);
        for &width in &cfg.backbone_widths {
            put_u64(&mut w, width as u64);
        }
        w.push(cfg.with_projection as u8);
        put_u64(&mut w, cfg.projection_width as u64);
        put_u64(&mut w, cfg.embed_dim as u64);
        put_f64(&mut w, cfg.dropout_rate);
        w.push(cfg.activation.code());
        put_u64(&mut w, cfg.seed);
        w.push(self.encoder.frozen_backbone as u8);
        for block in self.encoder.blocks() {
            put_f64s(&mut w, block);
        }

        let mut sections: Vec<(&[u8; 4], Vec<u8>)> = Vec::new();
        if let Some(head) = &self.head {
            let mut p = Vec::new();
            put_u64(&mut p, head.class_count() as u64);
            put_u64(&mut p, head.embed_dim() as u64);
            put_f64(&mut p, head.scale);
            put_f64s(&mut p, &head.weights);
            sections.push((HEAD_TAG, p));
        }
        if let Some(adam) = &self.optimizer {
            let mut p = Vec::new();
            put_u32(&mut p, adam.blocks.len() as u32);
            for b in &adam.blocks {
                put_u64(&mut p, b.step);
                put_u64(&mut p, b.first.len() as u64);
                put_f64s(&mut p, &b.first);
                put_f64s(&mut p, &b.second);
            }
            sections.push((ADAM_TAG, p));
        }
        put_u32(&mut w, sections.len() as u32);
        for (tag, payload) in sections {
            w.extend_from_slice(tag);
            put_u64(&mut w, payload.len() as u64);
            w.extend_from_slice(&payload);
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.fail_at(0, format!("bad magic {magic:?}, expected EKC1")));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail_at(4, format!("unsupported version {version}")));
        }
        let config_start = r.pos;
        let dim_in = r.usize()?;
        let layer_count = r.u32()? as usize;
        let mut backbone_widths = Vec::with_capacity(layer_count.min(1024));
        for _ in 0..layer_count {
            backbone_widths.push(r.usize()?);
        }
        let with_projection = r.flag()?;
        let projection_width = r.usize()?;
        let embed_dim = r.usize()?;
        let dropout_rate = r.f64()?;
        let code_at = r.pos;
        let activation = Activation::from_code(r.u8()?)
            .ok_or_else(|| r.fail_at(code_at, "unknown activation code".into()))?;
        let seed = r.u64()?;
        let frozen_backbone = r.flag()?;
        let config = EncoderConfig {
            dim_in,
            backbone_widths,
            with_projection,
            projection_width,
            embed_dim,
            dropout_rate,
            activation,
            seed,
        };
        config
            .validate()
            .map_err(|e| r.fail_at(config_start, e.to_string()))?;

        let mut fan_in = dim_in;
        let mut backbone = Vec::with_capacity(config.backbone_widths.len());
        for &width in &config.backbone_widths {
            backbone.push(r.dense(fan_in, width)?);
            fan_in = width;
        }
        let projection = if with_projection {
            Some(r.dense(fan_in, projection_width)?)
        } else {
            None
        };
        let neck = r.dense(config.neck_input_width(), embed_dim)?;
        let encoder = EncoderState::from_parts(config, backbone, projection, neck, frozen_backbone)
            .map_err(|e| r.fail_at(config_start, e.to_string()))?;

        let mut head = None;
        let mut optimizer = None;
        let section_count = r.u32()?;
        for _ in 0..section_count {
            let tag_at = r.pos;
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = r.usize()?;
            let payload_at = r.pos;
            let end = payload_at
                .checked_add(len)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| {
                    r.fail_at(
                        payload_at,
                        format!("section payload of {len} bytes is truncated"),
                    )
                })?;
            match &tag {
                HEAD_TAG if head.is_none() && optimizer.is_none() => {
                    let classes = r.usize()?;
                    let dim = r.usize()?;
                    let scale = r.f64()?;
                    let n = classes
                        .checked_mul(dim)
                        .ok_or_else(|| r.fail_at(payload_at, "head size overflows".into()))?;
                    let weights = r.f64s(n)?;
                    if dim != embed_dim_of(&encoder) {
                        return Err(r.fail_at(
                            payload_at,
                            format!(
                                "head dim {dim} does not match embed_dim {}",
                                embed_dim_of(&encoder)
                            ),
                        ));
                    }
                    head = Some(
                        ArcFaceHead::new(classes, dim, scale, weights)
                            .map_err(|e| r.fail_at(payload_at, e.to_string()))?,
                    );
                }
                ADAM_TAG if optimizer.is_none() => {
                    let blocks = r.u32()? as usize;
                    let mut expected: Vec<usize> =
                        encoder.blocks().iter().map(|b| b.len()).collect();
                    expected.extend(head.as_ref().map(|h| h.weights.len()));
                    if blocks != expected.len() {
                        return Err(r.fail_at(
                            payload_at,
                            format!(
                                "optimizer has {blocks} blocks, model has {}",
                                expected.len()
                            ),
                        ));
                    }
                    let mut state = Vec::with_capacity(blocks);
                    for &want in &expected {
                        let len_at = r.pos + 8;
                        let step = r.u64()?;
                        let n = r.usize()?;
                        if n != want {
                            return Err(r.fail_at(
                                len_at,
                                format!("moment block has {n} values, expected {want}"),
                            ));
                        }
                        let first = r.f64s(n)?;
                        let second = r.f64s(n)?;
                        state.push(BlockMoments {
                            step,
                            first,
                            second,
                        });
                    }
                    optimizer = Some(AdamWState { blocks: state });
                }
                _ => {
                    return Err(r.fail_at(
                        tag_at,
                        format!("unexpected section {:?}", String::from_utf8_lossy(&tag)),
                    ))
                }
            }
            if r.pos != end {
                return Err(r.fail_at(
                    r.pos,
                    format!("section length mismatch, payload ends at {end}"),
                ));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.fail_at(r.pos, "trailing bytes after last section".into()));
        }
        Ok(Self {
            encoder,
            head,
            optimizer,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

fn embed_dim_of(encoder: &EncoderState) -> usize {
    encoder.config().embed_dim
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(w: &mut Vec<u8>, vs: &[f64]) {
    for &v in vs {
        put_f64(w, v);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail_at(&self, offset: usize, msg: String) -> Error {
        Error::Format {
            offset: offset as u64,
            msg,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail_at(self.pos, format!("truncated: need {n} bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.fail_at(at, format!("flag byte must be 0 or 1, got {v}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail_at(at, format!("size {v} out of range")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.fail_at(self.pos, format!("{n} values overflow")))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn dense(&mut self, fan_in: usize, fan_out: usize) -> Result<Dense> {
        let n = fan_in
            .checked_mul(fan_out)
            .ok_or_else(|| self.fail_at(self.pos, "layer size overflows".into()))?;
        let weights = self.f64s(n)?;
        let bias = self.f64s(fan_out)?;
        Ok(Dense {
            fan_in,
            fan_out,
            weights,
            bias,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u64, projection: bool, sections: bool) -> Checkpoint {
        let cfg = EncoderConfig {
            dim_in: 5,
            backbone_widths: vec![7, 6],
            with_projection: projection,
            projection_width: 4,
            embed_dim: 3,
            seed,
            ..Default::default()
        };
        let encoder = EncoderState::init(&cfg).unwrap();
        let (head, optimizer) = if sections {
            let head = ArcFaceHead::init(4, 3, 30.0, seed).unwrap();
            let mut sizes: Vec<usize> = encoder.blocks().iter().map(|b| b.len()).collect();
            sizes.push(head.weights.len());
            let mut adam = AdamWState::new(sizes);
            adam.blocks[1].step = 7;
            adam.blocks[1].first[0] = 0.25;
            adam.blocks[2].second[3] = 1e-9;
            (Some(head), Some(adam))
        } else {
            (None, None)
        };
        Checkpoint {
            encoder,
            head,
            optimizer,
        }
    }

    #[test]
    fn roundtrip_both_directions() {
        for (proj, sections) in [(false, false), (true, false), (false, true), (true, true)] {
            let ck = sample(3, proj, sections);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back.encoder, ck.encoder);
            assert_eq!(back.head, ck.head);
            assert_eq!(back.optimizer, ck.optimizer);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn parameters_follow_the_config_block() {
        let ck = sample(1, false, false);
        let bytes = ck.to_bytes();
        // magic, version, dim_in, layer count, 2 widths, flag, pw, ed, rate, act, seed, frozen
        let config_end = 4 + 4 + 8 + 4 + 16 + 1 + 8 + 8 + 8 + 1 + 8 + 1;
        let first = f64::from_le_bytes(bytes[config_end..config_end + 8].try_into().unwrap());
        assert_eq!(first, ck.encoder.blocks()[0][0]);
        assert_eq!(
            bytes.len(),
            config_end + 8 * ck.encoder.parameter_count() + 4
        );
    }

    #[test]
    fn rejects_corruption_with_offsets() {
        let bytes = sample(2, true, true).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format { offset: 4, .. })
        ));
        for cut in [3, 20, 100, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ekc");
        let ck = sample(4, true, true);
        ck.write(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), ck.to_bytes());
        assert_eq!(Checkpoint::read(&path).unwrap().encoder, ck.encoder);
    }
}

//! Range coder and bitstream container.
//!
//! 32-bit carry-less range coder (Subbotin style) driven by the 16-bit
//! fixed-point cumulative tables from the entropy model. Out-of-range
//! latents are escaped to a flat 16-bit raw encoding so the stream stays
//! lossless regardless of the learned support.

use crate::entropy::{CdfTable, TOTAL_FREQ};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, out: Vec::new() }
    }

    /// Encode one symbol occupying [cum_low, cum_low+freq) of the 2^16
    /// probability space.
    pub fn encode(&mut self, cum_low: u32, freq: u32) {
        debug_assert!(freq > 0 && cum_low + freq <= TOTAL_FREQ);
        let r = self.range / TOTAL_FREQ;
        self.low = self.low.wrapping_add(r * cum_low);
        self.range = if cum_low + freq == TOTAL_FREQ {
            self.range - r * cum_low
        } else {
            r * freq
        };
        self.normalize();
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                // carry-less clamp: shrink range up to the next BOT boundary
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder { low: 0, range: u32::MAX, code: 0, buf, pos: 0 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        if self.pos >= self.buf.len() {
            return Err(Error::Bitstream("truncated payload".into()));
        }
        let b = self.buf[self.pos];
        self.pos += 1;
        Ok(b)
    }

    /// Cumulative position of the next symbol in the 2^16 space.
    pub fn decode_target(&self) -> u32 {
        let r = self.range / TOTAL_FREQ;
        (self.code.wrapping_sub(self.low) / r).min(TOTAL_FREQ - 1)
    }

    /// Consume the symbol occupying [cum_low, cum_low+freq).
    pub fn decode_update(&mut self, cum_low: u32, freq: u32) -> Result<()> {
        let r = self.range / TOTAL_FREQ;
        self.low = self.low.wrapping_add(r * cum_low);
        self.range = if cum_low + freq == TOTAL_FREQ {
            self.range - r * cum_low
        } else {
            r * freq
        };
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }
}

const MAGIC: &[u8; 4] = b"QLB1";
const ESCAPE_BIAS: i64 = 1 << 15;

/// A decodable compressed image: header plus range-coded payload.
#[derive(Clone, Debug)]
pub struct Bitstream {
    pub image_h: u32,
    pub image_w: u32,
    pub latent_h: u32,
    pub latent_w: u32,
    pub channels: u32,
    pub tables: Vec<CdfTable>,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn num_symbols(&self) -> usize {
        (self.channels * self.latent_h * self.latent_w) as usize
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [self.image_h, self.image_w, self.latent_h, self.latent_w, self.channels] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in &self.tables {
            t.serialize(&mut out);
        }
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 24 {
            return Err(Error::Bitstream("stream shorter than header".into()));
        }
        if &buf[..4] != MAGIC {
            return Err(Error::Bitstream(format!("bad magic {:?}, expected QLB1", &buf[..4])));
        }
        let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
        let (image_h, image_w) = (u32_at(4), u32_at(8));
        let (latent_h, latent_w) = (u32_at(12), u32_at(16));
        let channels = u32_at(20);
        let mut pos = 24;
        let mut tables = Vec::with_capacity(channels as usize);
        for _ in 0..channels {
            tables.push(CdfTable::deserialize(buf, &mut pos)?);
        }
        if pos + 4 > buf.len() {
            return Err(Error::Bitstream("truncated header".into()));
        }
        let payload_len = u32_at(pos) as usize;
        pos += 4;
        if pos + payload_len > buf.len() {
            return Err(Error::Bitstream(format!(
                "truncated payload: header promises {payload_len} bytes, {} available",
                buf.len() - pos
            )));
        }
        let payload = buf[pos..pos + payload_len].to_vec();
        Ok(Bitstream { image_h, image_w, latent_h, latent_w, channels, tables, payload })
    }

    /// Total size in bits, header included.
    pub fn total_bits(&self) -> usize {
        self.to_bytes().len() * 8
    }
}

/// Encode integer latents laid out [C, H', W'] (channel-major) with one
/// table per channel.
pub fn encode(
    symbols: &[i32],
    tables: &[CdfTable],
    image_dims: (u32, u32),
    latent_dims: (u32, u32),
) -> Result<Bitstream> {
    let channels = tables.len();
    let plane = (latent_dims.0 * latent_dims.1) as usize;
    if symbols.len() != channels * plane {
        return Err(Error::ShapeMismatch {
            op: "coder::encode",
            detail: format!(
                "{} symbols but {} channels x {} positions",
                symbols.len(),
                channels,
                plane
            ),
        });
    }
    let payload = if symbols.is_empty() {
        Vec::new()
    } else {
        let mut enc = RangeEncoder::new();
        for (i, &v) in symbols.iter().enumerate() {
            let table = &tables[i / plane];
            let sym = table.symbol_of(v);
            enc.encode(table.cum[sym], table.freq(sym));
            if sym == table.escape_symbol() {
                let raw = v as i64 + ESCAPE_BIAS;
                if !(0..=0xFFFF).contains(&raw) {
                    return Err(Error::invalid(format!("latent value {v} exceeds escape range")));
                }
                // two flat bytes
                for shift in [8u32, 0] {
                    let byte = ((raw as u32) >> shift) & 0xFF;
                    enc.encode(byte << 8, 256);
                }
            }
        }
        enc.finish()
    };
    Ok(Bitstream {
        image_h: image_dims.0,
        image_w: image_dims.1,
        latent_h: latent_dims.0,
        latent_w: latent_dims.1,
        channels: channels as u32,
        tables: tables.to_vec(),
        payload,
    })
}

/// Exact inverse of [`encode`].
pub fn decode(stream: &Bitstream) -> Result<Vec<i32>> {
    let n = stream.num_symbols();
    if n == 0 {
        return Ok(Vec::new());
    }
    let plane = (stream.latent_h * stream.latent_w) as usize;
    let mut dec = RangeDecoder::new(&stream.payload)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let table = &stream.tables[i / plane];
        let sym = table.symbol_at(dec.decode_target());
        dec.decode_update(table.cum[sym], table.freq(sym))?;
        if sym == table.escape_symbol() {
            let mut raw = 0u32;
            for _ in 0..2 {
                let target = dec.decode_target();
                let byte = target >> 8;
                dec.decode_update(byte << 8, 256)?;
                raw = (raw << 8) | byte;
            }
            out.push((raw as i64 - ESCAPE_BIAS) as i32);
        } else {
            out.push(table.value_of(sym));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;

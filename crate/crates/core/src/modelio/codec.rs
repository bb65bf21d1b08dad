//! Little-endian framing shared by the model file and the binary bundle:
//! `magic[4] | version u32 | payload_len u64 | payload | crc32(payload) u32`.

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) fn frame(magic: &[u8; 4], version: u32, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 20);
    out.extend_from_slice(magic);
    out.write_u32::<LittleEndian>(version).expect("vec write");
    out.write_u64::<LittleEndian>(payload.len() as u64).expect("vec write");
    out.extend_from_slice(payload);
    out.write_u32::<LittleEndian>(crc32fast::hash(payload)).expect("vec write");
    out
}

/// Checks magic, version, length and checksum, in that order.
pub(crate) fn unframe<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < 16 {
        return Err(Error::Truncated(format!("{what} header")));
    }
    if &bytes[..4] != magic {
        return Err(Error::BadMagic {
            what: what.to_string(),
            found: LittleEndian::read_u32(&bytes[..4]),
            expected: LittleEndian::read_u32(magic),
        });
    }
    let found = LittleEndian::read_u32(&bytes[4..]);
    if found != version {
        return Err(Error::UnsupportedVersion {
            found,
            supported: version,
        });
    }
    let len = LittleEndian::read_u64(&bytes[8..]);
    let rest = &bytes[16..];
    if (rest.len() as u64) < len.saturating_add(4) {
        return Err(Error::Truncated(format!("{what}: payload declares {len} bytes, {} present", rest.len())));
    }
    let len = len as usize;
    if rest.len() != len + 4 {
        return Err(Error::Format(format!("{} trailing bytes after {what}", rest.len() - len - 4)));
    }
    let payload = &rest[..len];
    let stored = LittleEndian::read_u32(&rest[len..]);
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(payload)
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.write_u32::<LittleEndian>(v).expect("vec write");
    }

    pub fn i32(&mut self, v: i32) {
        self.buf.write_i32::<LittleEndian>(v).expect("vec write");
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.write_u32::<LittleEndian>(v.to_bits()).expect("vec write");
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn shape(&mut self, shape: &[usize]) {
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
    }

    pub fn f32s(&mut self, shape: &[usize], values: &[f32]) {
        self.shape(shape);
        for &v in values {
            self.f32(v);
        }
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("payload at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(LittleEndian::read_i32(self.take(4)?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    pub fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor rank {rank}")));
        }
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }

    /// A shape followed by that many `f32` values.
    pub fn f32s(&mut self) -> Result<(Vec<usize>, Vec<f32>)> {
        let shape = self.shape()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count
            .filter(|&c| c.saturating_mul(4) <= self.bytes.len() - self.pos)
            .ok_or_else(|| Error::Truncated(format!("array of shape {shape:?}")))?;
        let values = (0..count).map(|_| self.f32()).collect::<Result<_>>()?;
        Ok((shape, values))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} unread payload bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

//! Bitstream container.
//!
//! ```text
//! "PCBS" | version u16 | width u32 | height u32 | channels u8 | levels u8 |
//! fingerprint [16] | payload_len u64 | payload | crc32(payload) u32
//! ```
//!
//! All integers little-endian.

use crate::Error;

pub const CONTAINER_MAGIC: &[u8; 4] = b"PCBS";
pub const CONTAINER_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 1 + 1 + 16 + 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub levels: u8,
    pub fingerprint: [u8; 16],
    pub payload: Vec<u8>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_LEN + self.payload.len() + 4);
        b.extend_from_slice(CONTAINER_MAGIC);
        b.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        b.extend_from_slice(&self.width.to_le_bytes());
        b.extend_from_slice(&self.height.to_le_bytes());
        b.push(self.channels);
        b.push(self.levels);
        b.extend_from_slice(&self.fingerprint);
        b.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        b.extend_from_slice(&self.payload);
        b.extend_from_slice(&crc32fast::hash(&self.payload).to_le_bytes());
        b
    }

    /// Parses and checks the container, including the payload checksum.
    pub fn from_bytes(b: &[u8]) -> Result<Self, Error> {
        if b.len() < HEADER_LEN + 4 {
            return Err(Error::Truncated);
        }
        if &b[..4] != CONTAINER_MAGIC {
            return Err(Error::Corrupt("not a PCBS container".into()));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != CONTAINER_VERSION {
            return Err(Error::Corrupt(format!("unsupported container version {version}")));
        }
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"));
        let width = u32_at(6);
        let height = u32_at(10);
        let channels = b[14];
        let levels = b[15];
        let mut fingerprint = [0u8; 16];
        fingerprint.copy_from_slice(&b[16..32]);
        let len = u64::from_le_bytes(b[32..40].try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| Error::Corrupt("payload length overflows".into()))?;
        let end = HEADER_LEN.checked_add(len).ok_or_else(|| Error::Corrupt("payload length overflows".into()))?;
        if b.len() < end + 4 {
            return Err(Error::Truncated);
        }
        if b.len() > end + 4 {
            return Err(Error::Corrupt("trailing bytes after container".into()));
        }
        let payload = b[HEADER_LEN..end].to_vec();
        let stored = u32::from_le_bytes(b[end..end + 4].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Corrupt(format!("invalid geometry {width}x{height}x{channels}")));
        }
        Ok(Self { width, height, channels, levels, fingerprint, payload })
    }

    pub fn payload_bits(&self) -> u64 {
        8 * self.payload.len() as u64
    }

    pub fn bpp(&self) -> f64 {
        let px = self.width as f64 * self.height as f64;
        if px == 0.0 {
            0.0
        } else {
            self.payload_bits() as f64 / px
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container { width: 13, height: 7, channels: 3, levels: 4, fingerprint: [9; 16], payload: vec![1, 2, 3, 250] }
    }

    #[test]
    fn layout_and_round_trip() {
        let c = sample();
        let b = c.to_bytes();
        assert_eq!(b.len(), HEADER_LEN + 4 + 4);
        assert!(HEADER_LEN <= 64);
        assert_eq!(&b[..4], b"PCBS");
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 13);
        assert_eq!(Container::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn corruption_is_detected() {
        let b = sample().to_bytes();
        let mut bad = b.clone();
        bad[HEADER_LEN + 1] ^= 0x40;
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Checksum { .. })));
        assert!(matches!(Container::from_bytes(&b[..b.len() - 1]), Err(Error::Truncated)));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
    }

    #[test]
    fn empty_payload_has_zero_rate() {
        let c = Container { payload: Vec::new(), ..sample() };
        assert_eq!(c.bpp(), 0.0);
        assert_eq!(Container::from_bytes(&c.to_bytes()).unwrap(), c);
    }
}

//! Flat binary parameter container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PCMP" | version u16 | count u32 |
//!   count x ( name_len u16 | name utf-8 | rank u8 | dims u32 x rank | values f64 x prod(dims) )
//! ```

use std::io::{Read, Write};

use super::{NnError, ParamStore, Tensor};

pub const PARAM_MAGIC: &[u8; 4] = b"PCMP";
pub const PARAM_VERSION: u16 = 1;

pub fn write_params<W: Write>(store: &ParamStore, mut w: W) -> Result<(), NnError> {
    w.write_all(PARAM_MAGIC)?;
    w.write_all(&PARAM_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| NnError::Format(format!("parameter name too long: {}", p.name)))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| NnError::Format(format!("rank too large for {}", p.name)))?;
        w.write_all(&[rank])?;
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| NnError::Format(format!("dim too large in {}", p.name)))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], NnError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => NnError::Format("truncated parameter file".into()),
        _ => NnError::Io(e),
    })?;
    Ok(buf)
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamStore, NnError> {
    if &take::<4, _>(&mut r)? != PARAM_MAGIC {
        return Err(NnError::Format("bad magic, not a parameter file".into()));
    }
    let version = u16::from_le_bytes(take(&mut r)?);
    if version != PARAM_VERSION {
        return Err(NnError::Format(format!("unsupported parameter file version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| NnError::Format("truncated parameter name".into()))?;
        let name = String::from_utf8(name).map_err(|_| NnError::Format("parameter name is not utf-8".into()))?;
        let rank = take::<1, _>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(&mut r)?));
        }
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut s = ParamStore::new();
        s.insert("ab", Tensor::new(vec![2], vec![1.0, -0.5]).unwrap()).unwrap();
        let mut bytes = Vec::new();
        write_params(&s, &mut bytes).unwrap();
        let mut want = b"PCMP".to_vec();
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(bytes, want);

        let back = read_params(&bytes[..]).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.value(back.id("ab").unwrap()).data(), &[1.0, -0.5]);
    }

    #[test]
    fn truncation_and_magic_are_detected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[3, 3])).unwrap();
        let mut bytes = Vec::new();
        write_params(&s, &mut bytes).unwrap();
        assert!(matches!(read_params(&bytes[..bytes.len() - 3]), Err(NnError::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(read_params(&bytes[..]), Err(NnError::Format(_))));
    }
}

//! Checkpoint file format.
//!
//! ```text
//! [0..8)    magic "MSRG0001"
//! [8..16)   header length H, u64 little-endian
//! [16..16+H) UTF-8 header, one line per tensor in payload order:
//!           name \t dim0,dim1,... \t byte_offset \t byte_length \n
//! [16+H..)  f32 little-endian payloads, contiguous, offsets relative to here
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"MSRG0001";

pub fn encode_paramset(params: &ParamSet) -> Result<Vec<u8>> {
    let mut header = String::new();
    let mut offset = 0usize;
    for (name, t) in params.iter() {
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(Error::InvalidArgument(format!("unencodable parameter name {name:?}")));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let nbytes = t.len() * 4;
        header.push_str(&format!("{name}\t{}\t{offset}\t{nbytes}\n", dims.join(",")));
        offset += nbytes;
    }
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_paramset(bytes: &[u8]) -> Result<ParamSet> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated("header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Truncated("header".into()))?;
    let header = std::str::from_utf8(&bytes[16..payload_start]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let payload = &bytes[payload_start..];

    let mut params = ParamSet::new();
    let mut expected_offset = 0usize;
    for line in header.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dims, offset, nbytes] = fields[..] else {
            return Err(Error::MalformedHeader(format!("line {line:?}")));
        };
        let shape = dims
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::MalformedHeader(format!("dims of {name}")))?;
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::MalformedHeader(format!("offset of {name}")));
        let (offset, nbytes) = (parse(offset)?, parse(nbytes)?);
        let count: usize = shape.iter().product();
        if offset != expected_offset || nbytes != count * 4 {
            return Err(Error::MalformedHeader(format!("layout of {name}")));
        }
        let end = offset + nbytes;
        if end > payload.len() {
            return Err(Error::Truncated(format!("payload of {name}")));
        }
        let data: Vec<f32> =
            payload[offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| Error::MalformedHeader(format!("{name}: {e}")))?;
        params.insert(name, tensor).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(Error::MalformedHeader("trailing payload bytes".into()));
    }
    Ok(params)
}

pub fn save_paramset(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_paramset(params)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load_paramset(path: impl AsRef<Path>) -> Result<ParamSet> {
    decode_paramset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("block1.weight", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, -0.0, 1e-30]).unwrap()).unwrap();
        p.insert("block1.bias", Tensor::new(vec![2], vec![0.25, -7.0]).unwrap()).unwrap();
        p
    }

    fn bits(p: &ParamSet) -> Vec<(String, Vec<usize>, Vec<u32>)> {
        p.iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn layout_is_as_documented() {
        let bytes = encode_paramset(&sample()).unwrap();
        assert_eq!(&bytes[..8], b"MSRG0001");
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + hl]).unwrap();
        assert_eq!(header, "block1.weight\t2,3\t0\t24\nblock1.bias\t2\t24\t8\n");
        assert_eq!(bytes.len(), 16 + hl + 32);
        assert_eq!(&bytes[16 + hl..16 + hl + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.msrg");
        save_paramset(&sample(), &path).unwrap();
        assert_eq!(bits(&load_paramset(&path).unwrap()), bits(&sample()));
    }

    #[test]
    fn empty_paramset() {
        let bytes = encode_paramset(&ParamSet::new()).unwrap();
        assert_eq!(bytes.len(), 16);
        assert!(decode_paramset(&bytes).unwrap().is_empty());
    }

    #[test]
    fn corrupted_first_byte() {
        let mut bytes = encode_paramset(&sample()).unwrap();
        bytes[0] ^= 0xff;
        assert!(matches!(decode_paramset(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_paramset(&sample()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_paramset(cut), Err(Error::Truncated(_))));
        assert!(matches!(decode_paramset(&bytes[..12]), Err(Error::Truncated(_))));
    }

    #[test]
    fn non_finite_rejected_on_load() {
        let mut bytes = encode_paramset(&sample()).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_paramset(&bytes), Err(Error::NonFinite(name)) if name == "block1.bias"));
        let mut inf = sample();
        inf.set("x", Tensor::new(vec![1], vec![f32::INFINITY]).unwrap());
        assert!(matches!(encode_paramset(&inf), Err(Error::NonFinite(_))));
    }

    fn arb_paramset() -> impl Strategy<Value = ParamSet> {
        prop::collection::vec((prop::collection::vec(1usize..4, 1..3), any::<u32>()), 0..5)
            .prop_flat_map(|specs| {
                let strategies: Vec<_> = specs
                    .into_iter()
                    .map(|(shape, _)| {
                        let n: usize = shape.iter().product();
                        (
                            Just(shape),
                            prop::collection::vec(
                                prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL,
                                n,
                            ),
                        )
                    })
                    .collect();
                strategies
            })
            .prop_map(|tensors| {
                let mut p = ParamSet::new();
                for (i, (shape, data)) in tensors.into_iter().enumerate() {
                    p.insert(format!("t{i}.w"), Tensor::new(shape, data).unwrap()).unwrap();
                }
                p
            })
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(p in arb_paramset()) {
            let back = decode_paramset(&encode_paramset(&p).unwrap()).unwrap();
            prop_assert_eq!(bits(&back), bits(&p));
        }
    }
}

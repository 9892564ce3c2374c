//! Versioned on-disk container: a JSON header followed by named f64 tensor
//! blobs. Checkpoints and embedding records are built on this.
//!
//! Layout: magic (4 bytes), version u32, header length u64, header JSON,
//! blob count u64, then per blob: name length u64, name bytes, rank u32,
//! dims u64 each, payload little-endian f64. Writes go to a temp file and
//! rename into place, so a crash never leaves a truncated file at the
//! target path; reads validate every length and reject short files.

use std::io::{Read, Write as IoWrite};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::graph::Tensor;

const VERSION: u32 = 1;

pub fn write_container(
    path: &Path,
    magic: &[u8; 4],
    header_json: &str,
    blobs: &[(String, Tensor)],
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(magic)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(header_json.len() as u64)?;
        w.write_all(header_json.as_bytes())?;
        w.write_u64::<LittleEndian>(blobs.len() as u64)?;
        for (name, tensor) in blobs {
            w.write_u64::<LittleEndian>(name.len() as u64)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(tensor.ndim() as u32)?;
            for &d in tensor.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            let standard = tensor.view().as_standard_layout().to_owned();
            for &v in standard.iter() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(path: &Path, magic: &[u8; 4]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let bad = |msg: String| Error::data(format!("{}: {msg}", path.display()));
    let mut got_magic = [0u8; 4];
    r.read_exact(&mut got_magic)
        .map_err(|e| bad(format!("truncated header ({e})")))?;
    if &got_magic != magic {
        return Err(bad(format!("bad magic {got_magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(bad(format!("unsupported container version {version}")));
    }
    let header_len = r.read_u64::<LittleEndian>()? as usize;
    if header_len > 64 << 20 {
        return Err(bad(format!("absurd header length {header_len}")));
    }
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)
        .map_err(|e| bad(format!("truncated header ({e})")))?;
    let header =
        String::from_utf8(header).map_err(|_| bad("header is not UTF-8".into()))?;
    let n_blobs = r.read_u64::<LittleEndian>()? as usize;
    if n_blobs > 1 << 24 {
        return Err(bad(format!("absurd blob count {n_blobs}")));
    }
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let name_len = r.read_u64::<LittleEndian>()? as usize;
        if name_len > 4096 {
            return Err(bad(format!("absurd blob name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| bad(format!("truncated blob name ({e})")))?;
        let name = String::from_utf8(name).map_err(|_| bad("blob name is not UTF-8".into()))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        if rank > 8 {
            return Err(bad(format!("blob '{name}': absurd rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = vec![0.0f64; len];
        for v in data.iter_mut() {
            *v = r
                .read_f64::<LittleEndian>()
                .map_err(|e| bad(format!("blob '{name}': truncated payload ({e})")))?;
        }
        let tensor = Tensor::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| bad(format!("blob '{name}': {e}")))?;
        blobs.push((name, tensor));
    }
    // a valid container has nothing after the last blob
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(bad("trailing bytes after final blob".into()));
    }
    Ok((header, blobs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn roundtrip_and_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let blobs = vec![
            ("b".to_string(), arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn()),
            ("a".to_string(), ndarray::arr1(&[5.0]).into_dyn()),
        ];
        write_container(&path, b"TEST", "{\"k\":1}", &blobs).unwrap();
        let (header, back) = read_container(&path, b"TEST").unwrap();
        assert_eq!(header, "{\"k\":1}");
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "b"); // order preserved
        assert_eq!(back[0].1, blobs[0].1);
        assert_eq!(back[1].1, blobs[1].1);

        // identical bytes on rewrite
        let bytes1 = std::fs::read(&path).unwrap();
        write_container(&path, b"TEST", "{\"k\":1}", &blobs).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());

        // wrong magic
        assert!(read_container(&path, b"XXXX").is_err());
        // truncation
        std::fs::write(&path, &bytes1[..bytes1.len() - 4]).unwrap();
        assert!(read_container(&path, b"TEST").is_err());
        // trailing garbage
        let mut extended = bytes1.clone();
        extended.push(0);
        std::fs::write(&path, &extended).unwrap();
        assert!(read_container(&path, b"TEST").is_err());
    }
}

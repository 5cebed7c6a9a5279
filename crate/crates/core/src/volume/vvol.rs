//! VVOL container: `b"VVOL1"`, a little-endian `u32` header length, a
//! compact JSON header, then the raw little-endian x-fastest payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{voxel_count, Dims, LabelVolume, Mask, Volume};
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"VVOL1";
const ORDER: &str = "x-fastest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
    U16,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
            Dtype::U16 => 2,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: Dims,
    dtype: Dtype,
    order: String,
}

fn encode(dims: Dims, dtype: Dtype, payload: &[u8]) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        dims,
        dtype,
        order: ORDER.to_string(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    out
}

fn decode<'a>(path: &Path, bytes: &'a [u8], expected: Dtype) -> Result<(Dims, &'a [u8])> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, "not a VVOL file (bad magic)"));
    }
    let len_bytes: [u8; 4] = bytes[5..9].try_into().unwrap();
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let body = &bytes[9..];
    if body.len() < header_len {
        return Err(Error::format(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.order != ORDER {
        return Err(Error::format(path, format!("unsupported order {:?}", header.order)));
    }
    if header.dtype != expected {
        return Err(Error::format(
            path,
            format!("dtype {:?}, expected {:?}", header.dtype, expected),
        ));
    }
    if header.dims.contains(&0) {
        return Err(Error::format(path, format!("zero dimension in {:?}", header.dims)));
    }
    let payload = &body[header_len..];
    let want = voxel_count(header.dims) * expected.width();
    if payload.len() != want {
        return Err(Error::format(
            path,
            format!(
                "header dims {:?} need {want} payload bytes, found {}",
                header.dims,
                payload.len()
            ),
        ));
    }
    Ok((header.dims, payload))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (dims, payload) = decode(path, &bytes, Dtype::F32)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            path,
            format!("non-finite value at voxel index {index}"),
        ));
    }
    Volume::new(dims, data)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &volume_bytes(v))
}

pub(crate) fn volume_bytes(v: &Volume) -> Vec<u8> {
    let payload: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    encode(v.dims(), Dtype::F32, &payload)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (dims, payload) = decode(path, &bytes, Dtype::U8)?;
    Mask::new(dims, payload.to_vec()).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode(m.dims(), Dtype::U8, m.data()))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (dims, payload) = decode(path, &bytes, Dtype::U16)?;
    let data = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelVolume::new(dims, data)
}

pub fn save_labels(l: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let payload: Vec<u8> = l.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write(path.as_ref(), &encode(l.dims(), Dtype::U16, &payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vvol");
        let v = Volume::new([2, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        save_volume(&v, &p).unwrap();
        let first = fs::read(&p).unwrap();
        let loaded = load_volume(&p).unwrap();
        assert_eq!(loaded.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        save_volume(&loaded, &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = volume_bytes(&Volume::zeros([1, 1, 1]));
        let header = br#"{"dims":[1,1,1],"dtype":"f32","order":"x-fastest"}"#;
        assert_eq!(&bytes[..5], b"VVOL1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize, header.len());
        assert_eq!(&bytes[9..9 + header.len()], header);
        assert_eq!(&bytes[9 + header.len()..], &[0, 0, 0, 0]);
    }

    #[test]
    fn mask_payload_is_one_byte_per_voxel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vvol");
        let m = Mask::from_fn([3, 2, 2], |x, _, _| x == 1);
        save_mask(&m, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let hl = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 9 - hl, 12);
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    #[test]
    fn rejects_short_payload_bad_magic_and_nan() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vvol");
        let payload: Vec<u8> = (0..63).flat_map(|i| (i as f32).to_le_bytes()).collect();
        fs::write(&p, encode([4, 4, 4], Dtype::F32, &payload)).unwrap();
        let err = load_volume(&p).unwrap_err().to_string();
        assert!(err.contains("payload"), "{err}");

        fs::write(&p, b"NOPE1\0\0\0\0").unwrap();
        assert!(load_volume(&p).unwrap_err().to_string().contains("magic"));

        let mut payload: Vec<u8> = (0..8).flat_map(|i| (i as f32).to_le_bytes()).collect();
        payload[12..16].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&p, encode([2, 2, 2], Dtype::F32, &payload)).unwrap();
        let err = load_volume(&p).unwrap_err().to_string();
        assert!(err.contains("voxel index 3"), "{err}");

        assert!(matches!(load_volume(dir.path().join("missing.vvol")), Err(Error::Io { .. })));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.vvol");
        let l = LabelVolume::new([2, 1, 2], vec![0, 7, 300, 65535]).unwrap();
        save_labels(&l, &p).unwrap();
        assert_eq!(load_labels(&p).unwrap(), l);
        assert!(load_volume(&p).is_err());
    }

    proptest! {
        #[test]
        fn volume_round_trip_is_bit_exact(
            dims in (1usize..5, 1usize..5, 1usize..5),
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let dims = [dims.0, dims.1, dims.2];
            let mut rng = crate::rng::seeded(seed);
            let data = (0..voxel_count(dims)).map(|_| rng.random_range(-1e6f32..1e6)).collect();
            let v = Volume::new(dims, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("v.vvol");
            save_volume(&v, &p).unwrap();
            let bytes = fs::read(&p).unwrap();
            let back = load_volume(&p).unwrap();
            prop_assert_eq!(&back, &v);
            prop_assert_eq!(volume_bytes(&back), bytes);
        }
    }
}

//! Binary checkpoint serialization for [`ModelParams`].
//!
//! Layout: magic `HAAF1`, version u32, tensor count u32, then per tensor
//! (sorted by name): name length u32 + UTF-8 name, rank u64, dims u64 each,
//! values as little-endian f64. Round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelParams, NnError};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 5] = b"HAAF1";
const VERSION: u32 = 1;

impl ModelParams {
    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let count = u32::try_from(self.len())
            .map_err(|_| NnError::BadCheckpoint("too many tensors".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for (name, t) in self.iter() {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.values() {
                w.write_all(&(v as f64).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::BadCheckpoint(format!(
                "bad magic {:?} in {}",
                magic,
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(NnError::BadCheckpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| NnError::BadCheckpoint(format!("non-UTF-8 name: {e}")))?;
            let rank = read_u64(&mut r)? as usize;
            if rank > 8 {
                return Err(NnError::BadCheckpoint(format!("implausible rank {rank} for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                values.push(f64::from_le_bytes(buf) as Real);
            }
            if params.get(&name).is_some() {
                return Err(NnError::BadCheckpoint(format!("duplicate tensor {name}")));
            }
            params.insert(name, Tensor::param(shape, values)?);
        }
        Ok(params)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, NnError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, NnError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::super::{LinearLayer, ModelParams, TransformerBlock};
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let block =
            TransformerBlock::new(&mut ChaCha8Rng::seed_from_u64(77), 8, 2, 16).unwrap();
        let params = ModelParams::from_model(&block);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("block.ckpt");
        params.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(params.len(), loaded.len());
        for ((n1, t1), (n2, t2)) in params.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.values().iter().map(|v| (*v as f64).to_bits()).collect();
            let b2: Vec<u64> = t2.values().iter().map(|v| (*v as f64).to_bits()).collect();
            assert_eq!(b1, b2, "{n1} not bit-exact");
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTHAAF").unwrap();
        assert!(matches!(ModelParams::load(&path), Err(NnError::BadCheckpoint(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn random_params_round_trip(seed in 0u64..1000, d_in in 1usize..6, d_out in 1usize..6) {
            let l = LinearLayer::new(&mut ChaCha8Rng::seed_from_u64(seed), d_in, d_out);
            let params = ModelParams::from_model(&l);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("l.ckpt");
            params.save(&path).unwrap();
            let loaded = ModelParams::load(&path).unwrap();
            for ((_, a), (_, b)) in params.iter().zip(loaded.iter()) {
                prop_assert_eq!(a.values(), b.values());
                prop_assert_eq!(a.shape(), b.shape());
            }
        }
    }
}

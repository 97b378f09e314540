//! `AFM1` checkpoint files.
//!
//! Layout: magic `AFM1`, u32 LE format version, u32 LE model id, u64 LE rng
//! seed, then every parameter tensor as a blob in architecture order
//! (per layer: trainable tensors, then running statistics).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::arch::{build_architecture, ModelName, ModelSpec};
use super::model::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{read_u32, read_u64, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFM1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelName,
    pub seed: u64,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    pub fn spec(&self) -> ModelSpec {
        build_architecture(self.model)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.params.check(&self.spec())?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.model.id().to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for t in self.params.all_tensors() {
            t.write_blob(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let model = ModelName::from_id(read_u32(r)?)?;
        let seed = read_u64(r)?;
        let spec = build_architecture(model);
        // shapes come from the architecture; the blobs must agree with them
        let mut params = ModelParams::<f32>::init(&spec, &mut crate::rng::Rng::new(0))?;
        for t in params.all_tensors_mut() {
            let blob = Tensor::read_blob(r)?;
            if blob.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor shape {:?}, architecture expects {:?}",
                    blob.shape(),
                    t.shape()
                )));
            }
            *t = blob;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { model, seed, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_bytes() {
        for m in ModelName::ALL {
            let params = ModelParams::init(&build_architecture(m), &mut Rng::new(3)).unwrap();
            let ck = Checkpoint { model: m, seed: 99, params };
            let mut a = Vec::new();
            ck.write_to(&mut a).unwrap();
            let back = Checkpoint::read_from(&mut a.as_slice()).unwrap();
            assert_eq!(back, ck);
            let mut b = Vec::new();
            back.write_to(&mut b).unwrap();
            assert_eq!(a, b);
            assert_eq!(&a[..4], b"AFM1");
            assert_eq!(u32::from_le_bytes(a[8..12].try_into().unwrap()), m.id());
        }
    }

    #[test]
    fn rejects_corruption() {
        let params = ModelParams::init(&build_architecture(ModelName::FrameCnn2d), &mut Rng::new(3)).unwrap();
        let ck = Checkpoint { model: ModelName::FrameCnn2d, seed: 1, params };
        let mut a = Vec::new();
        ck.write_to(&mut a).unwrap();
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
        assert!(Checkpoint::read_from(&mut &a[..a.len() - 3]).is_err());
        let mut long = a.clone();
        long.push(0);
        assert!(Checkpoint::read_from(&mut long.as_slice()).is_err());
        // claim the 3D model while carrying 2D tensors
        let mut swapped = a;
        swapped[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(Checkpoint::read_from(&mut swapped.as_slice()).is_err());
    }
}

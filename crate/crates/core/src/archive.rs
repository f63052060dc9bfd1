//! Named multi-array archives (safetensors, `f64`) and atomic file writes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type NamedArrays = BTreeMap<String, ArrayD<f64>>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a sibling temp file and renames, so readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_arrays(arrays: &NamedArrays) -> Result<Vec<u8>> {
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = arrays
        .iter()
        .map(|(name, a)| {
            let bytes = a.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), a.shape().to_vec(), bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::Archive(format!("{name}: {e:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::tensor::serialize(views, &None).map_err(|e| Error::Archive(format!("{e:?}")))
}

pub fn decode_arrays(bytes: &[u8]) -> Result<NamedArrays> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Archive(format!("{e:?}")))?;
    let mut out = NamedArrays::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::Archive(format!("{name}: expected f64, found {:?}", view.dtype())));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let array = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
            .map_err(|e| Error::Archive(format!("{name}: {e}")))?;
        out.insert(name, array);
    }
    Ok(out)
}

pub fn write_arrays(path: &Path, arrays: &NamedArrays) -> Result<String> {
    let bytes = encode_arrays(arrays)?;
    atomic_write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Returns the arrays and the sha256 of the archive bytes.
pub fn read_arrays(path: &Path) -> Result<(NamedArrays, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((decode_arrays(&bytes)?, sha256_hex(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn arrays_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), cols in 1usize..4) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let a = ArrayD::from_shape_vec(IxDyn(&[rows, cols]), values[..rows * cols].to_vec()).unwrap();
            let mut arrays = NamedArrays::new();
            arrays.insert("layer/profile".into(), a.clone());
            arrays.insert("b".into(), ArrayD::zeros(IxDyn(&[2])));
            let bytes = encode_arrays(&arrays).unwrap();
            let back = decode_arrays(&bytes).unwrap();
            prop_assert_eq!(&back, &arrays);
            // deterministic encoding
            prop_assert_eq!(encode_arrays(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/x.bin");
        atomic_write(&path, b"abc").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"abc");
        assert_eq!(fs::read_dir(dir.path().join("sub")).unwrap().count(), 1);
    }
}

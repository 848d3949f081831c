//! Named-tensor blobs in the safetensors format.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::SafeTensors;

use crate::{Float, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum BlobError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed tensor blob {path}: {msg}")]
    Format { path: String, msg: String },
}

pub fn to_bytes<F: Float>(tensors: &[(String, Tensor<F>)]) -> Vec<u8> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), F::to_le_bytes_vec(t.data())))
        .collect();
    let views: Vec<(String, TensorView<'_>)> = raw
        .iter()
        .map(|(n, s, b)| {
            (
                n.clone(),
                TensorView::new(F::DTYPE, s.clone(), b).expect("consistent view"),
            )
        })
        .collect();
    safetensors::serialize(views, None::<HashMap<String, String>>).expect("serializable tensors")
}

pub fn from_bytes<F: Float>(
    bytes: &[u8],
    path: &str,
) -> Result<BTreeMap<String, Tensor<F>>, BlobError> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| BlobError::Format {
        path: path.to_string(),
        msg: e.to_string(),
    })?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != F::DTYPE {
            return Err(BlobError::Format {
                path: path.to_string(),
                msg: format!("tensor `{name}` has dtype {:?}", view.dtype()),
            });
        }
        let data = F::from_le_bytes_slice(view.data());
        out.insert(name, Tensor::constant(view.shape().to_vec(), data));
    }
    Ok(out)
}

pub fn save<F: Float>(path: &Path, tensors: &[(String, Tensor<F>)]) -> Result<Vec<u8>, BlobError> {
    let bytes = to_bytes(tensors);
    std::fs::write(path, &bytes).map_err(|source| BlobError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(bytes)
}

pub fn load<F: Float>(path: &Path) -> Result<BTreeMap<String, Tensor<F>>, BlobError> {
    let bytes = std::fs::read(path).map_err(|source| BlobError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes, &path.display().to_string())
}

//! Named tensors on disk in the safetensors format.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::{Dtype, SafeTensors};

use super::Parameterized;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type TensorMap<T> = BTreeMap<String, ArrayD<T>>;

/// Writes tensors plus string metadata. The file is written next to `path`
/// first and renamed into place.
pub fn write_tensors<T: Scalar>(
    path: &Path,
    tensors: &[(String, ArrayD<T>)],
    metadata: HashMap<String, String>,
) -> Result<()> {
    let mut bufs = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let mut bytes = Vec::with_capacity(t.len() * std::mem::size_of::<T>());
        for &v in t.as_standard_layout().iter() {
            v.write_le(&mut bytes);
        }
        bufs.push((name.clone(), t.shape().to_vec(), bytes));
    }
    let views = bufs
        .iter()
        .map(|(n, shape, b)| {
            safetensors::tensor::TensorView::new(T::DTYPE, shape.clone(), b)
                .map(|v| (n.as_str(), v))
                .map_err(|e| Error::Tensors(format!("{n}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = (!metadata.is_empty()).then_some(metadata);
    let data = safetensors::serialize(views, meta).map_err(|e| Error::Tensors(e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("safetensors.tmp");
    std::fs::write(&tmp, data)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn decode<T: Scalar>(dtype: Dtype, raw: &[u8]) -> Result<Vec<T>> {
    match dtype {
        Dtype::F32 => Ok(raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()),
        Dtype::F64 => Ok(raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect()),
        Dtype::I64 => Ok(raw
            .chunks_exact(8)
            .map(|c| T::lit(i64::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()),
        other => Err(Error::Tensors(format!("unsupported dtype {other:?}"))),
    }
}

/// Reads every tensor in the file, converting to `T`, plus the metadata map.
pub fn read_tensors<T: Scalar>(path: &Path) -> Result<(TensorMap<T>, HashMap<String, String>)> {
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Tensors(format!("{}: {e}", path.display())))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Tensors(format!("{}: {e}", path.display())))?;
    let mut out = TensorMap::new();
    for (name, view) in st.tensors() {
        // Integer counters such as `num_batches_tracked` are not needed.
        if name.ends_with("num_batches_tracked") {
            continue;
        }
        let vals = decode::<T>(view.dtype(), view.data()).map_err(|e| Error::Tensors(format!("{name}: {e}")))?;
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), vals).map_err(|e| Error::Tensors(format!("{name}: {e}")))?;
        out.insert(name, arr);
    }
    Ok((out, header.metadata().clone().unwrap_or_default()))
}

/// Copies tensors into the model's parameters and buffers by name. Every
/// model tensor must be present with a matching shape; extra entries in
/// `tensors` are ignored (e.g. a classifier the model does not have).
pub fn load_state<T: Scalar, M: Parameterized<T> + ?Sized>(model: &mut M, prefix: &str, tensors: &TensorMap<T>) -> Result<()> {
    let mut err = None;
    model.visit(prefix, &mut |name, p| {
        if err.is_some() {
            return;
        }
        match tensors.get(name) {
            None => err = Some(Error::Tensors(format!("missing tensor `{name}`"))),
            Some(t) if t.shape() != p.value.shape() => {
                err = Some(Error::Tensors(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )))
            }
            Some(t) => p.value.assign(t),
        }
    });
    err.map_or(Ok(()), Err)
}

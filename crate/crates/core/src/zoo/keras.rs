//! Import of weights exported from Keras (channels-last kernels).

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::scalar::Scalar;

pub(crate) fn decode<T: Scalar>(name: &str, view: &safetensors::tensor::TensorView<'_>) -> Result<ArrayD<T>> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let values: Vec<T> = match view.dtype() {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|b| T::from_f64_lossy(f64::from_le_bytes(b.try_into().unwrap())))
            .collect(),
        other => return Err(Error::Shape(format!("{name}: unsupported dtype {other:?}"))),
    };
    ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| Error::Shape(format!("{name}: {e}")))
}

/// Rearranges a Keras kernel into the engine layout expected by `target`.
fn to_engine_layout<T: Scalar>(name: &str, src: ArrayD<T>, target: &[usize]) -> Result<ArrayD<T>> {
    let converted = if src.ndim() == 4 {
        let s = src.shape();
        // depthwise kernels are (kh, kw, C, 1) in Keras and (C, 1, kh, kw) here
        let depthwise = target[1] == 1 && s[3] == 1 && s[2] == target[0];
        let perm = if depthwise { [2, 3, 0, 1] } else { [3, 2, 0, 1] };
        src.permuted_axes(IxDyn(&perm)).as_standard_layout().into_owned()
    } else {
        src
    };
    if converted.shape() != target {
        return Err(Error::Shape(format!(
            "{name}: weights have shape {:?}, layer expects {:?}",
            converted.shape(),
            target
        )));
    }
    Ok(converted)
}

/// Overwrites every backbone parameter with the tensor of the same name.
pub fn load_keras_weights<T: Scalar>(graph: &mut Graph<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::artifact(path, e.to_string()))?;
    let ids: Vec<_> = graph.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let view = st
            .tensor(&name)
            .map_err(|_| Error::artifact(path, format!("no tensor named {name}")))?;
        let src = decode::<T>(&name, &view)?;
        let target = graph.params.value(id).shape().to_vec();
        *graph.params.value_mut(id) = to_engine_layout(&name, src, &target)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn conv_kernel_is_transposed_to_out_in_h_w() {
        let src = Array::from_shape_fn(IxDyn(&[3, 2, 4, 5]), |i| (i[0] * 1000 + i[1] * 100 + i[2] * 10 + i[3]) as f64);
        let out = to_engine_layout("k", src, &[5, 4, 3, 2]).unwrap();
        assert_eq!(out[[4, 3, 2, 1]], 2134.0);
    }

    #[test]
    fn depthwise_kernel_keeps_channel_first() {
        let src = Array::from_shape_fn(IxDyn(&[3, 3, 6, 1]), |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let out = to_engine_layout("k", src, &[6, 1, 3, 3]).unwrap();
        assert_eq!(out[[5, 0, 2, 1]], 215.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let src = ArrayD::<f32>::zeros(IxDyn(&[3, 3, 2, 4]));
        assert!(to_engine_layout("k", src, &[8, 2, 3, 3]).is_err());
    }
}

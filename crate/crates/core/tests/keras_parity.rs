//! Forward-pass parity with Keras on weights and probes produced by
//! `tools/export_keras.py --weights random --probe`. Runs only when
//! `STONECRACK_PARITY_DIR` points at the exported files.

use std::path::PathBuf;

use ndarray::{ArrayD, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use stonecrack::zoo::{build_backbone, keras::load_keras_weights, Backbone, ZooOptions};

fn read(path: &PathBuf, name: &str) -> ArrayD<f32> {
    let bytes = std::fs::read(path).unwrap();
    let st = SafeTensors::deserialize(&bytes).unwrap();
    let t = st.tensor(name).unwrap();
    let v: Vec<f32> = t.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    ArrayD::from_shape_vec(t.shape().to_vec(), v).unwrap()
}

#[test]
fn backbones_match_keras_outputs() {
    let Some(dir) = std::env::var_os("STONECRACK_PARITY_DIR").map(PathBuf::from) else {
        eprintln!("STONECRACK_PARITY_DIR unset; skipping");
        return;
    };
    let mut checked = 0;
    for b in Backbone::ALL {
        let probe = dir.join(format!("{}.probe.safetensors", b.name()));
        if !probe.is_file() {
            continue;
        }
        let x = read(&probe, "input").into_dimensionality::<Ix4>().unwrap();
        let want = read(&probe, "output").into_dimensionality::<Ix4>().unwrap();
        let opts = ZooOptions {
            width: 1.0,
            input_size: x.shape()[1],
        };
        let mut g = build_backbone::<f64>(b, opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        load_keras_weights(&mut g, &dir.join(format!("{}.safetensors", b.name()))).unwrap();
        let x = x.permuted_axes([0, 3, 1, 2]).mapv(f64::from).as_standard_layout().into_owned();
        let got = g.forward(&x).unwrap().permuted_axes([0, 2, 3, 1]);
        assert_eq!(got.shape(), want.shape(), "{b}");
        let scale = want.iter().fold(0f64, |m, &v| m.max((v as f64).abs())).max(1e-6);
        let err = got.iter().zip(want.iter()).fold(0f64, |m, (&a, &b)| m.max((a - b as f64).abs()));
        eprintln!("{b}: max |diff| {err:.3e} (output scale {scale:.3e})");
        assert!(err / scale < 1e-3, "{b}: relative error {}", err / scale);
        checked += 1;
    }
    assert!(checked > 0, "no probes found in {}", dir.display());
}

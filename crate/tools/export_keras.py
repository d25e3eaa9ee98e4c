"""Export a headless Keras application backbone to safetensors.

Tensors are stored as ``<layer>/<weight>`` in Keras layout (HWIO kernels);
``stonecrack`` converts them on load.  With ``--probe`` a second file holds
a random input batch and the backbone output (both NHWC) for parity checks.

    python tools/export_keras.py ResNet50V2 --weights imagenet --out weights/
    python tools/export_keras.py Xception --weights random --probe --out /tmp/parity/
"""

import argparse
import os

import numpy as np
from safetensors.numpy import save_file

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")
import keras  # noqa: E402

APPS = {
    "VGG16": keras.applications.VGG16,
    "VGG19": keras.applications.VGG19,
    "InceptionResNetV2": keras.applications.InceptionResNetV2,
    "MobileNetV3Small": keras.applications.MobileNetV3Small,
    "MobileNetV3Large": keras.applications.MobileNetV3Large,
    "DenseNet121": keras.applications.DenseNet121,
    "DenseNet169": keras.applications.DenseNet169,
    "DenseNet201": keras.applications.DenseNet201,
    "ResNet50V2": keras.applications.ResNet50V2,
    "ResNet101V2": keras.applications.ResNet101V2,
    "Xception": keras.applications.Xception,
}


def build(name, weights, size):
    kwargs = dict(include_top=False, weights=weights, input_shape=(size, size, 3))
    if name.startswith("MobileNetV3"):
        kwargs["include_preprocessing"] = False
    return APPS[name](**kwargs)


def randomize_batch_norm(model, rng):
    for layer in model.layers:
        if isinstance(layer, keras.layers.BatchNormalization):
            new = []
            for w in layer.weights:
                n = w.shape
                if w.name.endswith("gamma"):
                    new.append(rng.uniform(0.5, 1.5, n))
                elif w.name.endswith("moving_variance"):
                    new.append(rng.uniform(0.5, 1.5, n))
                else:
                    new.append(rng.normal(0.0, 0.1, n))
            layer.set_weights([v.astype("float32") for v in new])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("backbone", choices=sorted(APPS))
    ap.add_argument("--weights", choices=["imagenet", "random"], default="imagenet")
    ap.add_argument("--size", type=int, default=224)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--probe", action="store_true")
    ap.add_argument("--out", default=".")
    args = ap.parse_args()

    keras.utils.set_random_seed(args.seed)
    rng = np.random.default_rng(args.seed)
    model = build(args.backbone, None if args.weights == "random" else "imagenet", args.size)
    if args.weights == "random":
        randomize_batch_norm(model, rng)

    tensors = {}
    for layer in model.layers:
        for w in layer.weights:
            key = f"{layer.name}/{w.name.split('/')[-1]}"
            tensors[key] = np.ascontiguousarray(np.asarray(w.numpy(), dtype=np.float32))
    os.makedirs(args.out, exist_ok=True)
    save_file(tensors, os.path.join(args.out, f"{args.backbone}.safetensors"))

    if args.probe:
        x = rng.uniform(-1.0, 1.0, (2, args.size, args.size, 3)).astype("float32")
        y = model.predict(x, verbose=0).astype("float32")
        save_file(
            {"input": np.ascontiguousarray(x), "output": np.ascontiguousarray(y)},
            os.path.join(args.out, f"{args.backbone}.probe.safetensors"),
        )
    print(f"{args.backbone}: {len(tensors)} tensors, {model.count_params()} parameters")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Export ImageNet backbone weights from torchvision to safetensors files
that `lesionfuse` loads from $LESIONFUSE_CACHE/<name>.safetensors.

    python3 scripts/export_weights.py --out ~/.cache/lesionfuse
    python3 scripts/export_weights.py --out /tmp/w --names resnet50 --random

`--random` skips the download and writes freshly initialized weights, which
is enough to check tensor names and shapes. `mobilenet` (v1) has no
torchvision model; bring your own file with `model.<i>.<j>` names.
"""

import argparse
import os
import sys

import torch
import torchvision.models as tvm
from safetensors.torch import save_file

BUILDERS = {
    "resnet50": (tvm.resnet50, "IMAGENET1K_V1"),
    "resnet101": (tvm.resnet101, "IMAGENET1K_V1"),
    "googlenet": (tvm.googlenet, "IMAGENET1K_V1"),
    "vgg13bn": (tvm.vgg13_bn, "IMAGENET1K_V1"),
    "vgg19bn": (tvm.vgg19_bn, "IMAGENET1K_V1"),
}

# Classifier and auxiliary-head tensors are not part of the extractors.
DROP = ("fc.", "classifier.", "aux1.", "aux2.")


def build(name, random):
    fn, weights = BUILDERS[name]
    if random:
        kwargs = {"aux_logits": False, "init_weights": True} if name == "googlenet" else {}
        return fn(weights=None, **kwargs)
    return fn(weights=weights)


def export(name, out, random):
    model = build(name, random).eval()
    state = {
        k: v.detach().to(torch.float32).contiguous()
        for k, v in model.state_dict().items()
        if not k.startswith(DROP) and not k.endswith("num_batches_tracked")
    }
    path = os.path.join(out, f"{name}.safetensors")
    save_file(state, path, metadata={"source": "torchvision", "random": str(random).lower()})
    print(f"{name}: {len(state)} tensors -> {path}")
    return model


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--names", nargs="+", default=list(BUILDERS), choices=list(BUILDERS) + ["mobilenet"])
    ap.add_argument("--random", action="store_true")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    for name in args.names:
        if name == "mobilenet":
            print("mobilenet: no torchvision model, skipped", file=sys.stderr)
            continue
        export(name, args.out, args.random)


if __name__ == "__main__":
    main()

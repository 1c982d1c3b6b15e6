#!/usr/bin/env python3
"""Convert torchvision ImageNet backbones to the pcos tensor archive format.

Writes <out_dir>/<kind>.pcosw for each requested backbone. The classifier
(fc / classifier) and BatchNorm step counters are dropped; everything else is
stored as float64 under its torchvision state_dict name, which is the naming
the C++ backbones use.

Point PCOS_WEIGHTS_DIR (or the weights_dir config key) at <out_dir>.
"""

import argparse
import pathlib
import struct
import sys

MAGIC = b"PCOSTNSR"
VERSION = 1
SKIPPED_PREFIXES = ("fc.", "classifier.")


def backbone_tensors(state_dict):
    """(name, tensor) pairs that belong to the backbone, in state_dict order."""
    for name, tensor in state_dict.items():
        if name.endswith("num_batches_tracked") or name.startswith(SKIPPED_PREFIXES):
            continue
        yield name, tensor


def write_archive(path, named_tensors):
    """Little-endian: magic, u32 version, u64 count, then per tensor
    u32 name length, name, u32 rank, i32 dims, f64 values."""
    named_tensors = list(named_tensors)
    with open(path, "wb") as out:
        out.write(MAGIC)
        out.write(struct.pack("<IQ", VERSION, len(named_tensors)))
        for name, tensor in named_tensors:
            encoded = name.encode("utf-8")
            values = tensor.detach().to("cpu").double().contiguous()
            out.write(struct.pack("<I", len(encoded)))
            out.write(encoded)
            out.write(struct.pack("<I", values.dim()))
            out.write(struct.pack("<%di" % values.dim(), *values.shape))
            out.write(values.numpy().astype("<f8").tobytes())


def export_model(model, path):
    write_archive(path, backbone_tensors(model.state_dict()))


def pretrained(kind):
    import torchvision.models as models

    if kind == "resnet50":
        return models.resnet50(weights=models.ResNet50_Weights.IMAGENET1K_V2)
    if kind == "densenet201":
        return models.densenet201(weights=models.DenseNet201_Weights.IMAGENET1K_V1)
    raise ValueError("unknown backbone " + kind)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, type=pathlib.Path, help="output directory")
    parser.add_argument("--model", action="append", choices=["resnet50", "densenet201"],
                        help="backbone to export (repeatable; default both)")
    args = parser.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    for kind in args.model or ["resnet50", "densenet201"]:
        target = args.out / (kind + ".pcosw")
        export_model(pretrained(kind), target)
        print(target)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Trainable parameter shapes of the MobileNetV3-Large reference.

Builds torchvision's mobilenet_v3_large with a 1-channel stem and 527 outputs
and writes the ordered trainable shapes for several width multipliers.
"""
import json
import pathlib

import torch
from torchvision.models import mobilenet_v3_large

OUT = pathlib.Path(__file__).resolve().parent.parent / "crates/core/tests/data/mn_large_shapes.json"


def shapes(alpha):
    model = mobilenet_v3_large(width_mult=alpha, num_classes=527)
    stem = model.features[0][0]
    model.features[0][0] = torch.nn.Conv2d(1, stem.out_channels, 3, 2, 1, bias=False)
    return [list(p.shape) for p in model.parameters() if p.requires_grad]


def main():
    table = {str(a): shapes(a) for a in (0.4, 1.0, 2.0)}
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(table))
    for a, s in table.items():
        n = sum(int(torch.tensor(x).prod()) for x in s)
        print(f"alpha {a}: {len(s)} tensors, {n} parameters")


if __name__ == "__main__":
    main()

"""LSNM and LSNF writers.

LSNM (little-endian): magic "LSNM", u16 version=1, u16 layer count; per
layer: u8 kind, u32 parameter count + u32 parameters (leading with the
layer's input shape), u64 blob byte length + float32 weights (conv/linear:
weights then bias, row-major). Kinds: 1 conv2d, 2 dense, 3 relu,
4 maxpool, 5 avgpool, 6 flatten, 7 softmax.

LSNF: magic "LSNF", u16 version=1, u32 count, u32 class count, u32 ndim +
dims; per item: u32 label, float32 input, float32 logits.
"""

from __future__ import annotations

import struct

import numpy as np
import torch
from torch import nn

MAGIC = b"LSNM"
FIXTURE_MAGIC = b"LSNF"
VERSION = 1

KIND_CONV, KIND_DENSE, KIND_RELU = 1, 2, 3
KIND_MAXPOOL, KIND_AVGPOOL, KIND_FLATTEN, KIND_SOFTMAX = 4, 5, 6, 7


def _entry(kind: int, params: list[int], blob: bytes = b"") -> bytes:
    head = struct.pack("<B", kind)
    head += struct.pack("<I", len(params))
    head += struct.pack(f"<{len(params)}I", *params)
    head += struct.pack("<Q", len(blob))
    return head + blob


def _f32(tensor: torch.Tensor) -> bytes:
    return tensor.detach().cpu().numpy().astype("<f4").tobytes()


def model_to_lsnm(model: nn.Sequential, input_shape: tuple[int, int, int]) -> bytes:
    """Serialize a torch Sequential of supported layers, tracking shapes."""
    shape = tuple(int(d) for d in input_shape)
    entries = []
    for module in model:
        if isinstance(module, nn.Conv2d):
            c, h, w = shape
            kh, kw = module.kernel_size
            stride = module.stride[0]
            pad = module.padding[0]
            out_c = module.out_channels
            params = [c, h, w, out_c, kh, kw, stride, pad]
            blob = _f32(module.weight) + _f32(module.bias)
            entries.append(_entry(KIND_CONV, params, blob))
            oh = (h + 2 * pad - kh) // stride + 1
            ow = (w + 2 * pad - kw) // stride + 1
            shape = (out_c, oh, ow)
        elif isinstance(module, nn.Linear):
            params = [module.in_features, module.out_features]
            blob = _f32(module.weight) + _f32(module.bias)
            entries.append(_entry(KIND_DENSE, params, blob))
            shape = (module.out_features,)
        elif isinstance(module, nn.ReLU):
            entries.append(_entry(KIND_RELU, list(shape)))
        elif isinstance(module, (nn.MaxPool2d, nn.AvgPool2d)):
            c, h, w = shape
            win = module.kernel_size if isinstance(module.kernel_size, int) else module.kernel_size[0]
            stride = module.stride if isinstance(module.stride, int) else module.stride[0]
            kind = KIND_MAXPOOL if isinstance(module, nn.MaxPool2d) else KIND_AVGPOOL
            entries.append(_entry(kind, [c, h, w, win, stride]))
            shape = (c, (h - win) // stride + 1, (w - win) // stride + 1)
        elif isinstance(module, nn.Flatten):
            entries.append(_entry(KIND_FLATTEN, list(shape)))
            shape = (int(np.prod(shape)),)
        elif isinstance(module, nn.Softmax):
            entries.append(_entry(KIND_SOFTMAX, list(shape)))
        else:
            raise ValueError(f"unsupported module {type(module).__name__}")
    out = MAGIC + struct.pack("<HH", VERSION, len(entries))
    return out + b"".join(entries)


def write_fixture(path, inputs: np.ndarray, labels: np.ndarray, logits: np.ndarray) -> None:
    count = inputs.shape[0]
    dims = inputs.shape[1:]
    class_count = logits.shape[1]
    with open(path, "wb") as f:
        f.write(FIXTURE_MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<III", count, class_count, len(dims)))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        for i in range(count):
            f.write(struct.pack("<I", int(labels[i])))
            f.write(inputs[i].astype("<f4").tobytes())
            f.write(logits[i].astype("<f4").tobytes())

"""Per-tensor 8-bit affine quantization shared with training-time fake quantization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .. import autodiff as ad
from ..errors import ValidationError


@dataclass(frozen=True, eq=False)
class QuantizedBlob:
    shape: tuple[int, ...]
    offset: np.float32
    scale: np.float32
    symbols: np.ndarray  # uint8, one per element
    bits: int = 8

    def __post_init__(self):
        if self.symbols.dtype != np.uint8 or self.symbols.size != int(np.prod(self.shape, dtype=np.int64)):
            raise ValidationError("blob symbols must be uint8 with one symbol per element")

    @property
    def size(self) -> int:
        return int(self.symbols.size)


def quantize_tensor(x, bits: int = 8) -> QuantizedBlob:
    """Codes over the tensor's [min, max]; a constant tensor gets scale 0 and code 0 everywhere."""
    if bits != 8:
        raise ValidationError(f"only 8-bit quantization is supported, got {bits}")
    t = torch.as_tensor(np.asarray(x, dtype=np.float32)) if not isinstance(x, torch.Tensor) else x.detach().float()
    if t.numel() == 0:
        raise ValidationError("cannot quantize an empty tensor")
    if not bool(torch.isfinite(t).all()):
        raise ValidationError("cannot quantize non-finite values")
    lo, scale = ad.affine_params(t, bits)
    codes = ad.affine_codes(t, lo, scale, bits)
    return QuantizedBlob(tuple(t.shape), np.float32(lo.item()), np.float32(scale.item()),
                         codes.numpy().astype(np.uint8).reshape(-1), bits)


def dequantize(blob: QuantizedBlob) -> np.ndarray:
    lo = torch.tensor(blob.offset, dtype=torch.float32)
    scale = torch.tensor(blob.scale, dtype=torch.float32)
    if float(scale) == 0.0:
        return np.full(blob.shape, blob.offset, dtype=np.float32)
    codes = torch.from_numpy(blob.symbols.astype(np.int64))
    return ad.affine_dequantize(codes, lo, scale).numpy().reshape(blob.shape)

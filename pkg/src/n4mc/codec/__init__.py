"""Quantization, entropy coding, the container format and the end-to-end pipeline."""

from .container import Container, Header, Section, pack_blobs, unpack_blobs
from .huffman import huffman_decode, huffman_encode
from .pipeline import (CompressResult, DecodeResult, bitrate_mbps, compress_sequence, decompress_sequence,
                       load_models)
from .quant import QuantizedBlob, dequantize, quantize_tensor

__all__ = [
    "CompressResult", "Container", "DecodeResult", "Header", "QuantizedBlob", "Section", "bitrate_mbps",
    "compress_sequence", "decompress_sequence", "dequantize", "huffman_decode", "huffman_encode",
    "load_models", "pack_blobs", "quantize_tensor", "unpack_blobs",
]

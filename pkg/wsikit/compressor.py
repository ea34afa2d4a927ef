"""
Fixed-length token compression by learned-query cross-attention.

A bank of learned queries attends jointly over all region tokens of a slide,
so the output always has num_queries rows whatever the number of regions.
Region coordinates are not consumed: there is no positional encoding.
Computation runs in float64; stored outputs and checkpoints are float32.
"""
import copy
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from wsikit.errors import CorruptFileError, DimensionMismatchError, EmptyInputError
from wsikit.features import FeatureMatrix, Provenance

logger = logging.getLogger(__name__)

DEFAULT_NUM_QUERIES = 1152
DEFAULT_NUM_HEADS = 8
QUERY_INIT_STD = 0.02

CHECKPOINT_MAGIC = b"WSCK"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sIIIIIII")
# Declared tensor order of the checkpoint payload
CHECKPOINT_TENSORS = [
    "query_bank",
    "input_adapter.weight",
    "input_adapter.bias",
    "w_q.weight",
    "w_k.weight",
    "w_v.weight",
    "w_o.weight",
]


class TokenCompressor(nn.Module):
    """Learned query bank + multi-head cross-attention over adapted inputs"""

    def __init__(self,
                 in_dim: int,
                 model_dim: int = 64,
                 num_heads: int = DEFAULT_NUM_HEADS,
                 num_queries: int = DEFAULT_NUM_QUERIES,
                 seed: int = 0):
        super().__init__()
        if model_dim % num_heads != 0:
            raise DimensionMismatchError(f"model_dim {model_dim} not divisible by num_heads {num_heads}")
        self.in_dim = in_dim
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.num_queries = num_queries

        self.query_bank = nn.Parameter(torch.empty(num_queries, model_dim))
        self.input_adapter = nn.Linear(in_dim, model_dim)
        self.w_q = nn.Linear(model_dim, model_dim, bias=False)
        self.w_k = nn.Linear(model_dim, model_dim, bias=False)
        self.w_v = nn.Linear(model_dim, model_dim, bias=False)
        self.w_o = nn.Linear(model_dim, model_dim, bias=False)
        self.reset_parameters(seed)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def reset_parameters(self, seed: int):
        """Seeded init: queries ~ N(0, 0.02^2), linear layers uniform(+-1/sqrt(fan_in))."""
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.query_bank.normal_(0.0, QUERY_INIT_STD, generator=generator)
            for linear in (self.input_adapter, self.w_q, self.w_k, self.w_v, self.w_o):
                bound = 1.0 / math.sqrt(linear.in_features)
                linear.weight.uniform_(-bound, bound, generator=generator)
                if linear.bias is not None:
                    linear.bias.uniform_(-bound, bound, generator=generator)

    def attention(self, x: torch.Tensor):
        """Return (attention weights (H, Q, N), values (H, N, d_head)) for inputs x (N, in_dim)."""
        dtype = x.dtype
        h = F.linear(x, self.input_adapter.weight.to(dtype), self.input_adapter.bias.to(dtype))
        q = F.linear(self.query_bank.to(dtype), self.w_q.weight.to(dtype))
        k = F.linear(h, self.w_k.weight.to(dtype))
        v = F.linear(h, self.w_v.weight.to(dtype))

        heads, d_head = self.num_heads, self.head_dim
        q = q.view(self.num_queries, heads, d_head).transpose(0, 1)
        k = k.view(-1, heads, d_head).transpose(0, 1)
        v = v.view(-1, heads, d_head).transpose(0, 1)

        # torch.softmax subtracts the row max internally
        logits = q @ k.transpose(-1, -2) / math.sqrt(d_head)
        return torch.softmax(logits, dim=-1), v

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        attn, v = self.attention(x)
        context = (attn @ v).transpose(0, 1).reshape(self.num_queries, self.model_dim)
        return F.linear(context, self.w_o.weight.to(x.dtype))


# The module's parameters are the compressor state
CompressorState = TokenCompressor


def _check_inputs(state: TokenCompressor, data: np.ndarray):
    if data.ndim != 2 or data.shape[0] == 0:
        raise EmptyInputError("compression needs at least one input row")
    if data.shape[1] != state.in_dim:
        raise DimensionMismatchError(f"input dim {data.shape[1]} != compressor in_dim {state.in_dim}")


def _as_array(features) -> np.ndarray:
    return features.data if isinstance(features, FeatureMatrix) else np.asarray(features)


def compress(state: TokenCompressor, region_features: FeatureMatrix) -> FeatureMatrix:
    """
    Compress N region tokens to num_queries tokens.

    Raises:
        EmptyInputError: If N == 0
        DimensionMismatchError: If the feature dim differs from the adapter in_dim
    """
    data = _as_array(region_features)
    _check_inputs(state, data)
    with torch.no_grad():
        out = state(torch.from_numpy(np.asarray(data, dtype=np.float64)))
    return FeatureMatrix.from_array(out.numpy(), Provenance.COMPRESSED)


def attention_weights(state: TokenCompressor, region_features: FeatureMatrix) -> np.ndarray:
    """Softmax attention weights (heads, queries, N) in float64."""
    data = _as_array(region_features)
    _check_inputs(state, data)
    with torch.no_grad():
        attn, _ = state.attention(torch.from_numpy(np.asarray(data, dtype=np.float64)))
    return attn.numpy()


@dataclass
class CompressorGradients:
    params: Dict[str, np.ndarray]
    inputs: np.ndarray


def compress_backward(state: TokenCompressor, region_features, upstream_grad: np.ndarray) -> CompressorGradients:
    """
    Exact gradients of <upstream_grad, compress(x)> w.r.t. every weight and input.

    Raises:
        DimensionMismatchError: If upstream_grad does not match the output shape
    """
    data = _as_array(region_features)
    _check_inputs(state, data)
    upstream = np.asarray(upstream_grad, dtype=np.float64)
    if upstream.shape != (state.num_queries, state.model_dim):
        raise DimensionMismatchError(
            f"upstream gradient shape {upstream.shape} != output shape {(state.num_queries, state.model_dim)}"
        )

    module = copy.deepcopy(state).double()
    x = torch.tensor(data, dtype=torch.float64, requires_grad=True)
    names, params = zip(*module.named_parameters())
    grads = torch.autograd.grad(module(x), [x, *params], grad_outputs=torch.from_numpy(upstream))
    return CompressorGradients(
        params={name: g.numpy() for name, g in zip(names, grads[1:])},
        inputs=grads[0].numpy(),
    )


@dataclass
class CompressorCheckpoint:
    state: TokenCompressor
    stage: int
    step: int


def save_compressor(state: TokenCompressor, path: Union[str, Path], stage: int = 0, step: int = 0) -> Path:
    """Write a versioned float32 checkpoint tagged with stage and step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = dict(state.named_parameters())
    header = _CHECKPOINT_HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
        state.in_dim, state.model_dim, state.num_heads, state.num_queries,
        stage, step,
    )
    with open(path, 'wb') as f:
        f.write(header)
        for name in CHECKPOINT_TENSORS:
            f.write(tensors[name].detach().to(torch.float32).numpy().astype("<f4").tobytes())
    return path


def load_compressor(path: Union[str, Path]) -> CompressorCheckpoint:
    """
    Read a checkpoint written by save_compressor.

    Raises:
        CorruptFileError: On a bad magic, unsupported version or size mismatch
    """
    path = Path(path)
    payload = path.read_bytes()
    if len(payload) < _CHECKPOINT_HEADER.size:
        raise CorruptFileError(f"{path}: truncated checkpoint header")
    magic, version, in_dim, model_dim, num_heads, num_queries, stage, step = _CHECKPOINT_HEADER.unpack_from(payload)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptFileError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CorruptFileError(f"{path}: unsupported checkpoint version {version}")

    state = TokenCompressor(in_dim, model_dim, num_heads, num_queries)
    tensors = dict(state.named_parameters())
    offset = _CHECKPOINT_HEADER.size
    expected = offset + 4 * sum(tensors[name].numel() for name in CHECKPOINT_TENSORS)
    if len(payload) != expected:
        raise CorruptFileError(f"{path}: holds {len(payload)} bytes, header implies {expected}")

    with torch.no_grad():
        for name in CHECKPOINT_TENSORS:
            target = tensors[name]
            values = np.frombuffer(payload, dtype="<f4", count=target.numel(), offset=offset)
            target.copy_(torch.from_numpy(values.astype(np.float32).reshape(target.shape)))
            offset += 4 * target.numel()
    logger.debug("loaded compressor checkpoint %s (stage %d, step %d)", path, stage, step)
    return CompressorCheckpoint(state=state, stage=stage, step=step)

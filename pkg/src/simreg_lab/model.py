"""Tiny decoder-only transformer (RMSNorm, RoPE, SwiGLU, causal attention).

The network is split into an embedding part and a prediction part at
``capture_layer``: layer ``l < n_layers`` is the residual stream after ``l``
blocks, and ``l == n_layers`` is the final RMSNorm output that feeds the LM
head.  The logits never depend on where embeddings are captured.
"""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensorcore as tc
from .tensorcore import Expr

ROPE_BASE = 10000.0
MASK_VALUE = -1e30


@dataclass
class ModelConfig:
    vocab_size: int = 256
    n_layers: int = 2
    n_heads: int = 4
    embed_dim: int = 64
    ffn_hidden: int = 172
    max_seq_len: int = 128
    rmsnorm_eps: float = 1e-6
    init_std: float = 0.01

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "n_heads", "embed_dim", "ffn_hidden", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if (self.embed_dim // self.n_heads) % 2:
            raise ValueError("head dimension must be even for RoPE")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.embed_dim, cfg.ffn_hidden
    shapes = {"tok_emb": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn_norm": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "ffn_norm": (d,),
            p + "w_gate": (d, f), p + "w_up": (d, f), p + "w_down": (f, d),
        })
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, cfg.vocab_size)
    return shapes


def is_norm_gain(name: str) -> bool:
    return name.endswith("_norm")


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Gaussian weights with std ``init_std``; norm gains start at one. No biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if is_norm_gain(name):
            params[name] = np.ones(shape)
        else:
            params[name] = rng.normal(0.0, cfg.init_std, size=shape)
    return params


def rmsnorm(x, gain, eps: float) -> Expr:
    """``x * gain / sqrt(mean(x^2) + eps)`` over the last axis."""
    x = tc._lift(x)
    if x.kind == "constant" and np.ndim(x.value) == 0:
        raise ValueError("rmsnorm needs at least one axis")
    ms = tc.mean(x * x, axis=-1, keepdims=True)
    return x * gain / tc.sqrt(ms + eps)


def rope_tables(head_dim: int, positions) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2:
        raise ValueError("head dimension must be even for RoPE")
    pos = np.asarray(positions, dtype=np.float64)
    freqs = ROPE_BASE ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = pos[:, None] * freqs[None, :]
    return np.cos(angles), np.sin(angles)


def _rotate(x: Expr, cos: np.ndarray, sin: np.ndarray) -> Expr:
    # pairs are (2i, 2i+1) on the last axis; positions run along axis -2
    even = x[..., 0::2]
    odd = x[..., 1::2]
    r_even = even * cos - odd * sin
    r_odd = even * sin + odd * cos
    half = cos.shape[-1]
    stacked = tc.concatenate([r_even[..., None], r_odd[..., None]], axis=-1)
    return tc.reshape(stacked, _shape_of(x)[:-1] + (2 * half,))


def _shape_of(x: Expr) -> tuple[int, ...]:
    if x.shape is None:
        raise ValueError(f"{x!r} has no static shape; declare input shapes")
    return x.shape


def rope(q, k, positions) -> tuple[Expr, Expr]:
    """Rotate interleaved coordinate pairs of q and k by position (base 10000).

    Inputs have shape ``[..., seq, head_dim]``; ``positions`` has length seq.
    """
    q, k = tc._lift(q), tc._lift(k)
    hd = _shape_of(q)[-1]
    cos, sin = rope_tables(hd, positions)
    return _rotate(q, cos, sin), _rotate(k, cos, sin)


def causal_mask(n: int) -> np.ndarray:
    """True above the diagonal, i.e. where a query must not look."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def causal_attention(x, p: Mapping[str, Expr], n_heads: int, max_seq_len: int | None = None) -> Expr:
    """Multi-head causal self-attention on ``x`` of shape ``[B, n, d]``.

    ``p`` maps ``wq, wk, wv, wo`` to expressions of shape ``[d, d]``.
    """
    x = tc._lift(x)
    B, n, d = _shape_of(x)
    if max_seq_len is not None and n > max_seq_len:
        raise ValueError(f"sequence length {n} exceeds max_seq_len {max_seq_len}")
    hd = d // n_heads

    def heads(t: Expr) -> Expr:
        return tc.transpose(tc.reshape(t, (B, n, n_heads, hd)), (0, 2, 1, 3))

    q, k, v = heads(x @ p["wq"]), heads(x @ p["wk"]), heads(x @ p["wv"])
    q, k = rope(q, k, np.arange(n))
    scores = (q @ tc.transpose(k, (0, 1, 3, 2))) / np.sqrt(hd)
    scores = tc.masked_fill(scores, causal_mask(n), MASK_VALUE)
    att = tc.softmax(scores, axis=-1) @ v
    merged = tc.reshape(tc.transpose(att, (0, 2, 1, 3)), (B, n, d))
    return merged @ p["wo"]


def swiglu_ffn(x, p: Mapping[str, Expr]) -> Expr:
    """``W_down(silu(x W_gate) * (x W_up))``."""
    x = tc._lift(x)
    return (tc.silu(x @ p["w_gate"]) * (x @ p["w_up"])) @ p["w_down"]


def param_inputs(cfg: ModelConfig) -> dict[str, Expr]:
    return {name: tc.input(name, shape) for name, shape in param_shapes(cfg).items()}


def build_forward(tokens: np.ndarray, p: Mapping[str, Expr], cfg: ModelConfig,
                  capture_layer: int | None = None) -> tuple[Expr, Expr]:
    """Graph for embeddings at ``capture_layer`` and final logits.

    ``tokens`` is an integer array ``[B, n]`` (a 1-D array is treated as one
    sequence).  Returns expressions of shape ``[B, n, d]`` and ``[B, n, V]``.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError("token id out of range for vocab_size")
    if capture_layer is None:
        capture_layer = cfg.n_layers
    if not 0 <= capture_layer <= cfg.n_layers:
        raise ValueError(f"capture_layer must be in [0, {cfg.n_layers}]")
    B, n = tokens.shape
    if n > cfg.max_seq_len:
        raise ValueError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    d = cfg.embed_dim

    h = tc.take(p["tok_emb"], tokens, axis=0)
    captured = h if capture_layer == 0 else None
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        layer = {k: p[pre + k] for k in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")}
        a_in = rmsnorm(h, p[pre + "attn_norm"], cfg.rmsnorm_eps)
        h = h + causal_attention(a_in, layer, cfg.n_heads)
        h = h + swiglu_ffn(rmsnorm(h, p[pre + "ffn_norm"], cfg.rmsnorm_eps), layer)
        if capture_layer == i + 1 and capture_layer < cfg.n_layers:
            captured = h
    final = rmsnorm(h, p["final_norm"], cfg.rmsnorm_eps)
    if capture_layer == cfg.n_layers:
        captured = final
    logits = final @ p["lm_head"]
    return captured, logits


def model_forward(tokens, params: Mapping[str, np.ndarray], cfg: ModelConfig,
                  capture_layer: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Numeric forward pass; returns ``(embeddings, logits)`` as arrays."""
    p = param_inputs(cfg)
    emb, logits = build_forward(tokens, p, cfg, capture_layer)
    both = tc.concatenate([tc.reshape(emb, (-1,)), tc.reshape(logits, (-1,))], axis=0)
    tc.evaluate(both, params)
    return emb.value.copy(), logits.value.copy()


# ---------------------------------------------------------------------------
# checkpoint archive
# ---------------------------------------------------------------------------

MAGIC = b"SIMREG-CKPT 1\n"


def save_checkpoint(path, cfg: ModelConfig, tensors: Mapping[str, np.ndarray],
                    extra: Mapping[str, object] | None = None) -> None:
    """Write a flat archive: text header, then named little-endian float64 blobs.

    Layout::

        SIMREG-CKPT 1
        model.<field> = <value>          (one line per ModelConfig field)
        <key> = <value>                  (optional extra header lines)
        tensors = <count>
        ---
        then per tensor: u32 name length, utf-8 name, u32 ndim,
        ndim x u64 extents, raw '<f8' data in row-major order.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    for field in dataclasses.fields(cfg):
        buf.write(f"model.{field.name} = {getattr(cfg, field.name)!r}\n".encode())
    for key, value in (extra or {}).items():
        buf.write(f"{key} = {value}\n".encode())
    buf.write(f"tensors = {len(tensors)}\n---\n".encode())
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, str]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint archive")
    sep = data.find(b"\n---\n")
    if sep < 0:
        raise ValueError(f"{path}: truncated checkpoint header")
    header = data[len(MAGIC):sep].decode().splitlines()
    pos = sep + len(b"\n---\n")
    fields, extra = {}, {}
    count = 0
    for line in header:
        key, _, value = line.partition(" = ")
        if key.startswith("model."):
            fields[key[len("model."):]] = value
        elif key == "tensors":
            count = int(value)
        else:
            extra[key] = value
    types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    cfg = ModelConfig(**{k: (float(v) if types[k] in ("float", float) else int(v)) for k, v in fields.items()})
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return cfg, tensors, extra

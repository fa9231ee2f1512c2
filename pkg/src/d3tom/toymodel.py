"""Seeded bidirectional transformer used as the decoding backbone.

Pre-norm blocks: RMSNorm -> multi-head attention -> residual, then
RMSNorm -> gated FFN (``W_down(silu(x W_gate) * x W_up))``) -> residual.
Sinusoidal position codes are added to the attention *inputs* of every layer
and are looked up by each row's original position, so rows can be dropped
between layers without disturbing the survivors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

from . import kernels
from .errors import ContractError, InvalidInput
from .numkernel import matmul, row_softmax

if TYPE_CHECKING:
    from .diffusion import SequenceState

MAGIC = b"D3TM"
FORMAT_VERSION = 1
RMS_EPS = 1e-6
# spreads tensor ordinals across the 64-bit SplitMix64 state space
ORDINAL_STRIDE = 0xD1B54A32D192ED03
LAYER_TENSORS = ("wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 256
    d_ff: int = 768
    n_layers: int = 8
    n_heads: int = 4
    max_positions: int = 0  # 0 -> exactly n_total
    n_visual: int = 1024
    n_prompt: int = 64
    n_output: int = 64
    n_steps: int = 32
    merge_layer: int = 3
    seed: int = 42
    d_visual: int = 64

    def __post_init__(self):
        if self.max_positions == 0:
            object.__setattr__(self, "max_positions", self.n_total)
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise InvalidInput(f"{f.name} must be non-negative")
        for name in ("vocab_size", "d_model", "d_ff", "n_layers", "n_heads", "n_visual", "n_output", "d_visual"):
            if getattr(self, name) < 1:
                raise InvalidInput(f"{name} must be at least 1")
        if self.vocab_size < 2:
            raise InvalidInput("vocab_size must leave room for the mask token")
        if self.d_model % self.n_heads:
            raise InvalidInput(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if not 0 <= self.merge_layer < self.n_layers:
            raise InvalidInput(f"merge_layer must lie in [0, {self.n_layers})")
        if self.n_steps < 1:
            raise InvalidInput("n_steps must be at least 1")
        if self.max_positions < self.n_total:
            raise InvalidInput("max_positions is shorter than the sequence")
        if self.seed >= 1 << 64:
            raise InvalidInput("seed must fit in 64 bits")

    @property
    def n_total(self) -> int:
        return self.n_visual + self.n_prompt + self.n_output

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    @property
    def visual_range(self) -> range:
        return range(0, self.n_visual)

    @property
    def output_start(self) -> int:
        return self.n_visual + self.n_prompt

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_gate: np.ndarray
    w_down: np.ndarray


@dataclass
class Weights:
    config: ModelConfig
    layers: list
    embed: np.ndarray
    projector: np.ndarray
    head: np.ndarray
    pos_table: np.ndarray

    def tensors(self):
        """All stored tensors in file/declaration order."""
        for lw in self.layers:
            for name in LAYER_TENSORS:
                yield getattr(lw, name)
        yield self.embed
        yield self.projector
        yield self.head


def stream_state(seed: int, ordinal: int) -> int:
    return (seed + ordinal * ORDINAL_STRIDE) % (1 << 64)


def uniform_stream(seed: int, ordinal: int, n: int, low: float, high: float) -> np.ndarray:
    """``n`` float64 draws in [low, high) from the SplitMix64 stream of ``ordinal``."""
    raw = kernels.splitmix64(np.uint64(stream_state(seed, ordinal)), n)
    unit = (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return low + (high - low) * unit


def _tensor_shapes(cfg: ModelConfig):
    d, m = cfg.d_model, cfg.d_ff
    layer = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "w_up": (d, m), "w_gate": (d, m), "w_down": (m, d)}
    shapes = [layer[name] for _ in range(cfg.n_layers) for name in LAYER_TENSORS]
    shapes += [(cfg.vocab_size, d), (cfg.d_visual, d), (d, cfg.vocab_size)]
    return shapes


def sinusoidal_table(n_positions: int, d: int) -> np.ndarray:
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-(np.arange(0, d, 2, dtype=np.float64)) / d)
    table = np.zeros((n_positions, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    return table.astype(np.float32)


def init_weights(config: ModelConfig) -> Weights:
    bound = 1.0 / np.sqrt(config.d_model)
    tensors = [
        uniform_stream(config.seed, ordinal, r * c, -bound, bound).astype(np.float32).reshape(r, c)
        for ordinal, (r, c) in enumerate(_tensor_shapes(config))
    ]
    return _assemble(config, tensors)


def zero_weights(config: ModelConfig) -> Weights:
    return _assemble(config, [np.zeros(s, np.float32) for s in _tensor_shapes(config)])


def _assemble(config: ModelConfig, tensors) -> Weights:
    per = len(LAYER_TENSORS)
    layers = [LayerWeights(*tensors[i * per : (i + 1) * per]) for i in range(config.n_layers)]
    embed, projector, head = tensors[config.n_layers * per :]
    return Weights(config, layers, embed, projector, head, sinusoidal_table(config.max_positions, config.d_model))


def make_inputs(config: ModelConfig):
    """Seeded stand-ins for the image features and the prompt token ids."""
    base = len(_tensor_shapes(config))
    feats = uniform_stream(config.seed, base, config.n_visual * config.d_visual, -1.0, 1.0)
    feats = feats.astype(np.float32).reshape(config.n_visual, config.d_visual)
    raw = kernels.splitmix64(np.uint64(stream_state(config.seed, base + 1)), config.n_prompt)
    prompt = (raw % np.uint64(config.vocab_size - 1)).astype(np.int64)
    return feats, prompt


# --- weight file -------------------------------------------------------------

_CONFIG_INTS = ("vocab_size", "d_model", "d_ff", "n_layers", "n_heads", "max_positions",
                "n_visual", "n_prompt", "n_output", "n_steps", "merge_layer", "d_visual")


def save_weights(weights: Weights, path) -> None:
    cfg = weights.config
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<" + "I" * len(_CONFIG_INTS), *(getattr(cfg, k) for k in _CONFIG_INTS)))
        fh.write(struct.pack("<Q", cfg.seed))
        for t in weights.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_weights(path) -> Weights:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise InvalidInput(f"{path}: not a D3TM weight file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise InvalidInput(f"{path}: unsupported version {version}")
    off = 8
    ints = struct.unpack_from("<" + "I" * len(_CONFIG_INTS), data, off)
    off += 4 * len(_CONFIG_INTS)
    (seed,) = struct.unpack_from("<Q", data, off)
    off += 8
    cfg = ModelConfig(**dict(zip(_CONFIG_INTS, ints)), seed=seed)
    tensors = []
    for r, c in _tensor_shapes(cfg):
        t = np.frombuffer(data, dtype="<f4", count=r * c, offset=off).astype(np.float32).reshape(r, c)
        tensors.append(t)
        off += 4 * r * c
    if off != len(data):
        raise InvalidInput(f"{path}: {len(data) - off} trailing bytes")
    return _assemble(cfg, tensors)


# --- forward -----------------------------------------------------------------

def rms_norm(h: np.ndarray) -> np.ndarray:
    h64 = h.astype(np.float64)
    return (h64 / np.sqrt((h64 * h64).mean(axis=1, keepdims=True) + RMS_EPS)).astype(np.float32)


def _check_positions(positions, n_rows: int, limit: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (n_rows,):
        raise InvalidInput(f"need {n_rows} positions, got {positions.shape}")
    if n_rows and (positions.min() < 0 or positions.max() >= limit):
        raise InvalidInput(f"position outside [0, {limit})")
    return positions


def qkv(h: np.ndarray, lw: LayerWeights, pos_codes: np.ndarray):
    """Queries, keys and values for hidden rows ``h`` (positions pre-resolved)."""
    x = rms_norm(h)
    xp = x + pos_codes
    return matmul(xp, lw.wq), matmul(xp, lw.wk), matmul(x, lw.wv)


def attend(q, k, v, n_heads: int, want_attn: bool):
    """Multi-head attention of ``q`` rows over ``k``/``v`` rows.

    Returns the concatenated head outputs and, if asked, the head-averaged
    post-softmax matrix.
    """
    dh = q.shape[1] // n_heads
    scale = 1.0 / np.sqrt(dh)
    outs = []
    avg = None
    for hd in range(n_heads):
        cols = slice(hd * dh, (hd + 1) * dh)
        a = row_softmax(matmul(q[:, cols], k[:, cols].T), scale)
        if want_attn:
            # float32 running sum in fixed head order; relative error ~1e-7
            avg = a.copy() if avg is None else np.add(avg, a, out=avg)
        outs.append(matmul(a, v[:, cols]))
    attn = np.multiply(avg, np.float32(1.0 / n_heads), out=avg) if want_attn else None
    return np.concatenate(outs, axis=1), attn


def attention_block(h, lw: LayerWeights, pos_codes, n_heads: int, want_attn: bool):
    q, k, v = qkv(h, lw, pos_codes)
    o, attn = attend(q, k, v, n_heads, want_attn)
    return h + matmul(o, lw.wo), attn


def ffn_block(h, lw: LayerWeights):
    x = rms_norm(h)
    g = matmul(x, lw.w_gate).astype(np.float64)
    u = matmul(x, lw.w_up).astype(np.float64)
    act = (g / (1.0 + np.exp(-g)) * u).astype(np.float32)
    return h + matmul(act, lw.w_down)


def forward_layer(h, layer: int, weights: Weights, positions, attn_out_request: bool = False):
    """One pre-norm block. Returns ``(h', attn)``; ``attn`` is None unless requested."""
    cfg = weights.config
    positions = _check_positions(positions, h.shape[0], cfg.max_positions)
    lw = weights.layers[layer]
    h_tilde, attn = attention_block(h, lw, weights.pos_table[positions], cfg.n_heads, attn_out_request)
    return ffn_block(h_tilde, lw), attn


def embed_sequence(weights: Weights, output_tokens, inputs=None) -> np.ndarray:
    cfg = weights.config
    feats, prompt = inputs if inputs is not None else make_inputs(cfg)
    toks = np.asarray(output_tokens, dtype=np.int64)
    return np.concatenate([matmul(feats, weights.projector), weights.embed[prompt], weights.embed[toks]])


MergeHook = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple]


def forward_hidden(
    weights: Weights,
    h: np.ndarray,
    positions,
    merge_hook: Optional[MergeHook] = None,
    first_layer: int = 0,
):
    """Run layers ``first_layer..L-1``.

    ``merge_hook(h_tilde, attn, positions)`` fires after the attention
    sub-block of ``merge_layer`` and returns ``(h_short, surviving_rows)``.
    Returns ``(h_final, positions, rows_per_layer)``.
    """
    cfg = weights.config
    positions = _check_positions(positions, h.shape[0], cfg.max_positions)
    rows = []
    for layer in range(first_layer, cfg.n_layers):
        lw = weights.layers[layer]
        rows.append(h.shape[0])
        hooked = merge_hook is not None and layer == cfg.merge_layer
        h_tilde, attn = attention_block(h, lw, weights.pos_table[positions], cfg.n_heads, hooked)
        if hooked:
            h_tilde, keep = merge_hook(h_tilde, attn, positions)
            keep = np.asarray(keep, dtype=np.int64)
            if h_tilde.shape[0] != keep.shape[0]:
                raise ContractError(f"merge hook returned {h_tilde.shape[0]} rows but {keep.shape[0]} indices")
            if keep.size and (np.any(np.diff(keep) <= 0) or keep[0] < 0 or keep[-1] >= positions.shape[0]):
                raise ContractError("merge hook surviving rows must be increasing and in range")
            positions = positions[keep]
        h = ffn_block(h_tilde, lw)
    return h, positions, rows


def logits_for(weights: Weights, h: np.ndarray, positions) -> np.ndarray:
    out_rows = np.asarray(positions) >= weights.config.output_start
    return matmul(rms_norm(h[out_rows]), weights.head)


def forward_full(state: "SequenceState", weights: Weights, merge_hook: Optional[MergeHook] = None, inputs=None):
    """Logits for every output position (rows: output positions in order)."""
    h = embed_sequence(weights, state.output_tokens, inputs)
    h, positions, _ = forward_hidden(weights, h, state.positions, merge_hook)
    return logits_for(weights, h, positions)

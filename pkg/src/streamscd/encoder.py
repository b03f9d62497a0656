"""Chunk-masked Transformer encoder with an exactly equivalent streaming mode."""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import (
    Dense,
    FeedForward,
    Layer,
    LayerNorm,
    MultiHeadAttention,
    ParamSet,
    ShapeError,
    sinusoidal_positions,
)

FRAME_SHIFT_S = 0.04
FEAT_MAGIC = b"FEAT"


@dataclass(frozen=True)
class ChunkConfig:
    chunk_frames: int = 4
    left_chunks: int = 2
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int | None = None

    def __post_init__(self):
        if self.chunk_frames < 1:
            raise ValueError("chunk_frames must be >= 1")
        if self.left_chunks < 0:
            raise ValueError("left_chunks must be >= 0")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_dim or 4 * self.model_dim


PRESETS = {
    "toy": ChunkConfig(chunk_frames=4, left_chunks=2, layers=2, model_dim=64, heads=4),
    # 1 s chunks at 0.04 s shift, 18 history chunks, 12 layers
    "full": ChunkConfig(chunk_frames=25, left_chunks=18, layers=12, model_dim=512, heads=8),
}


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_shift_s: float = FRAME_SHIFT_S

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ShapeError(f"features must be T x d, got shape {self.frames.shape}")
        if not self.frame_shift_s > 0:
            raise ValueError("frame_shift_s must be positive")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def timestamp(self, frame_index: int) -> float:
        return frame_index * self.frame_shift_s

    def write(self, path: str | Path) -> None:
        T, d = self.frames.shape
        header = FEAT_MAGIC + struct.pack("<IIf", T, d, self.frame_shift_s)
        Path(path).write_bytes(header + np.ascontiguousarray(self.frames, dtype="<f4").tobytes())

    @classmethod
    def read(cls, path: str | Path) -> FeatureSequence:
        data = Path(path).read_bytes()
        if data[:4] != FEAT_MAGIC:
            raise ValueError(f"{path}: not a FEAT file")
        T, d, shift = struct.unpack_from("<IIf", data, 4)
        if len(data) != 16 + 4 * T * d:
            raise ValueError(f"{path}: expected {T}x{d} frames, file size disagrees")
        frames = np.frombuffer(data, dtype="<f4", count=T * d, offset=16).reshape(T, d)
        # f32 shift -> shortest decimal so 0.04 comes back as the double 0.04
        return cls(frames.astype(np.float64), float(str(np.float32(shift))))


def build_chunk_mask(T: int, cfg: ChunkConfig) -> np.ndarray:
    """mask[t, s] is True iff frame t may attend to frame s."""
    chunk = np.arange(T) // cfg.chunk_frames
    diff = chunk[:, None] - chunk[None, :]
    return (diff >= 0) & (diff <= cfg.left_chunks)


def reception_field(layer: int, t: int, cfg: ChunkConfig, T: int | None = None) -> tuple[int, int]:
    """Inclusive range of input frames that can influence frame ``t`` after ``layer`` layers."""
    if layer < 1:
        raise ValueError("layer must be >= 1")
    U = cfg.chunk_frames
    start = (t // U) * U
    end = start + U - 1
    if T is not None:
        end = min(end, T - 1)
    return max(0, start - layer * cfg.left_chunks * U), end


def iter_chunks(frames: np.ndarray, chunk_frames: int):
    for s in range(0, frames.shape[0], chunk_frames):
        yield frames[s : s + chunk_frames]


class EncoderLayer(Layer):
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, params, name, dim, heads, ffn_hidden, rng):
        super().__init__(params, name)
        self.ln_att = LayerNorm(params, f"{name}.ln_att", dim)
        self.att = MultiHeadAttention(params, f"{name}.att", dim, dim, dim, heads, rng)
        self.ln_ffn = LayerNorm(params, f"{name}.ln_ffn", dim)
        self.ffn = FeedForward(params, f"{name}.ffn", dim, ffn_hidden, rng)

    def forward(self, x, mask=None, history=None):
        """``history`` holds earlier frames' layer inputs (keys/values only)."""
        n = x.shape[0]
        kv_in = x if history is None or history.shape[0] == 0 else np.concatenate([history, x])
        a_kv = self.ln_att.forward(kv_in)
        y = x + self.att.forward(a_kv[-n:] if n else a_kv[:0], a_kv, a_kv, mask)
        return y + self.ffn.forward(self.ln_ffn.forward(y))

    def backward(self, dy):
        # only the self-contained (offline) form is trained
        dff = self.ln_ffn.backward(self.ffn.backward(dy))
        dy = dy + dff
        dq, dk, dv = self.att.backward(dy)
        return dy + self.ln_att.backward(dq + dk + dv)


@dataclass
class EncoderOutput:
    hidden: np.ndarray
    layer_outputs: list[np.ndarray]


@dataclass
class EncoderCache:
    """Per-layer history of the last ``left_chunks`` chunks of layer inputs."""

    history: list[deque] = field(default_factory=list)
    frames_consumed: int = 0
    closed: bool = False

    @classmethod
    def empty(cls, cfg: ChunkConfig) -> EncoderCache:
        return cls([deque(maxlen=cfg.left_chunks) for _ in range(cfg.layers)])

    def stacked(self, layer: int, dim: int) -> np.ndarray:
        h = self.history[layer]
        return np.concatenate(list(h)) if h else np.zeros((0, dim))

    def cached_frames(self, layer: int) -> int:
        return sum(c.shape[0] for c in self.history[layer])


class StreamingEncoder(Layer):
    """Input projection + sinusoidal positions, L chunk-masked layers, final LayerNorm."""

    def __init__(self, cfg: ChunkConfig, input_dim: int, rng: np.random.Generator, params: ParamSet | None = None, name: str = "enc"):
        super().__init__(params if params is not None else ParamSet(), name)
        self.cfg = cfg
        self.input_dim = input_dim
        d = cfg.model_dim
        self.proj = Dense(self.params, f"{name}.proj", input_dim, d, rng)
        self.layers = [EncoderLayer(self.params, f"{name}.layer{k}", d, cfg.heads, cfg.ffn_hidden, rng) for k in range(cfg.layers)]
        self.ln_out = LayerNorm(self.params, f"{name}.ln_out", d)

    def _check(self, frames):
        if frames.ndim != 2 or frames.shape[1] != self.input_dim:
            raise ShapeError(f"expected T x {self.input_dim} features, got {frames.shape}")

    def forward(self, frames: np.ndarray) -> EncoderOutput:
        frames = np.asarray(frames, dtype=np.float64)
        self._check(frames)
        T = frames.shape[0]
        if T == 0:
            empty = np.zeros((0, self.cfg.model_dim))
            return EncoderOutput(empty, [empty.copy() for _ in self.layers])
        mask = build_chunk_mask(T, self.cfg)
        x = self.proj.forward(frames) + sinusoidal_positions(0, T, self.cfg.model_dim)
        outs = []
        for layer in self.layers:
            x = layer.forward(x, mask)
            outs.append(x)
        return EncoderOutput(self.ln_out.forward(x), outs)

    def backward(self, d_hidden: np.ndarray, d_layer_outputs: list | None = None) -> np.ndarray:
        dx = self.ln_out.backward(d_hidden)
        for k in reversed(range(len(self.layers))):
            if d_layer_outputs is not None and d_layer_outputs[k] is not None:
                dx = dx + d_layer_outputs[k]
            dx = self.layers[k].backward(dx)
        return self.proj.backward(dx)

    def stream(self, chunk: np.ndarray, cache: EncoderCache) -> tuple[EncoderOutput, EncoderCache]:
        chunk = np.asarray(chunk, dtype=np.float64)
        self._check(chunk)
        U = self.cfg.chunk_frames
        n = chunk.shape[0]
        if len(cache.history) != len(self.layers):
            raise ValueError(f"cache has {len(cache.history)} layers, encoder has {len(self.layers)}")
        if n > U:
            raise ValueError(f"chunk of {n} frames exceeds chunk size {U}")
        if cache.closed:
            raise ValueError("stream already ended with a short chunk")
        x = self.proj.forward(chunk) + sinusoidal_positions(cache.frames_consumed, n, self.cfg.model_dim)
        outs = []
        for k, layer in enumerate(self.layers):
            # every cached frame belongs to one of the last B chunks, all visible
            hist = cache.stacked(k, self.cfg.model_dim)
            cache.history[k].append(x)
            x = layer.forward(x, None, hist)
            outs.append(x)
        cache.frames_consumed += n
        cache.closed = n < U
        return EncoderOutput(self.ln_out.forward(x), outs), cache


def encode_offline(feat: FeatureSequence | np.ndarray, encoder: StreamingEncoder) -> EncoderOutput:
    frames = feat.frames if isinstance(feat, FeatureSequence) else feat
    return encoder.forward(frames)


def encode_streaming(chunk: np.ndarray, cache: EncoderCache, encoder: StreamingEncoder) -> tuple[EncoderOutput, EncoderCache]:
    return encoder.stream(chunk, cache)


def encode_chunked(feat: FeatureSequence | np.ndarray, encoder: StreamingEncoder) -> EncoderOutput:
    """Run the streaming path over a whole sequence and concatenate the chunks."""
    frames = feat.frames if isinstance(feat, FeatureSequence) else np.asarray(feat, dtype=np.float64)
    cache = EncoderCache.empty(encoder.cfg)
    hidden, layers = [], [[] for _ in encoder.layers]
    for chunk in iter_chunks(frames, encoder.cfg.chunk_frames):
        out, cache = encoder.stream(chunk, cache)
        hidden.append(out.hidden)
        for k, h in enumerate(out.layer_outputs):
            layers[k].append(h)
    d = encoder.cfg.model_dim
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros((0, d))  # noqa: E731
    return EncoderOutput(cat(hidden), [cat(x) for x in layers])

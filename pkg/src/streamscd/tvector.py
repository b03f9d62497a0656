"""Token-level speaker embeddings (t-vectors) on top of a frozen ST model.

The speaker encoder mirrors the ST encoder layer for layer.  Layer ``i``
builds its queries and keys from the speaker encoder's own previous layer
and takes its values from the output of ST encoder layer ``i``; it uses the
ST encoder's chunk mask, so it streams exactly like the ST encoder.  A
two-layer LSTM decoder consumes, for every emitted non-blank token, the
speaker-encoder frame at the token's emission frame together with the ST
prediction network's embedding of that token, and a linear layer maps the
top hidden state to a unit-norm t-vector.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import scipy.linalg

from .encoder import ChunkConfig, FeatureSequence, build_chunk_mask
from .nn import (
    Dense,
    FeedForward,
    Layer,
    LayerNorm,
    LSTMStack,
    MultiHeadAttention,
    ParamSet,
    ShapeError,
    log_softmax,
    unit_normalize_backward,
    unit_normalize_forward,
)
from .transducer import Hypothesis, STModel, lattice_terms


class AlignmentError(ValueError):
    pass


# ---------------------------------------------------------------------------
# speaker-ID extractors


class SIDExtractor(Protocol):
    dim: int

    def extract(self, feat: FeatureSequence) -> np.ndarray:
        """Per-frame speaker embeddings, shape ``(T, dim)``."""


class OracleSIDExtractor:
    """Returns the generating speaker's embedding per frame plus seeded noise.

    With ``window > 1`` each output frame is the causal mean of the last
    ``window`` noisy frames, as a windowed d-vector extractor would produce.
    """

    def __init__(self, frame_embeddings: np.ndarray, noise_std: float = 0.0, seed: int = 0, window: int = 1):
        if window < 1:
            raise ValueError("window must be >= 1")
        emb = np.asarray(frame_embeddings, dtype=np.float64)
        self.dim = emb.shape[1]
        self.window = window
        noise = np.random.default_rng(seed).normal(0.0, noise_std, size=emb.shape) if noise_std > 0 else 0.0
        self._frames = causal_mean(emb + noise, window)

    def extract(self, feat: FeatureSequence) -> np.ndarray:
        if len(feat) != self._frames.shape[0]:
            raise ShapeError(f"oracle track has {self._frames.shape[0]} frames, features have {len(feat)}")
        return self._frames.copy()


def causal_mean(frames: np.ndarray, window: int) -> np.ndarray:
    """Row ``t`` is the mean of rows ``max(0, t-window+1) .. t``."""
    T = frames.shape[0]
    if window == 1 or T == 0:
        return frames
    cs = np.vstack([np.zeros(frames.shape[1]), np.cumsum(frames, axis=0)])
    hi = np.arange(1, T + 1)
    lo = np.maximum(0, hi - window)
    return (cs[hi] - cs[lo]) / (hi - lo)[:, None]


class PoolingSIDExtractor:
    """Causal windowed mean/std pooling followed by a linear projection.

    The projection is fitted with linear discriminant analysis on frames
    labelled by speaker (:meth:`fit`).
    """

    def __init__(self, window: int = 12, dim: int = 16, projection: np.ndarray | None = None, center: np.ndarray | None = None):
        self.window = window
        self.dim = dim
        self.projection = projection
        self.center = center

    def pooled(self, frames: np.ndarray) -> np.ndarray:
        mean = causal_mean(frames, self.window)
        var = np.maximum(causal_mean(frames * frames, self.window) - mean * mean, 0.0)
        return np.hstack([mean, np.sqrt(var)])

    def fit(self, feats: Sequence[FeatureSequence], frame_labels: Sequence[np.ndarray], reg: float = 1e-3) -> PoolingSIDExtractor:
        X = np.vstack([self.pooled(f.frames) for f in feats])
        y = np.concatenate([np.asarray(l) for l in frame_labels])
        mu = X.mean(axis=0)
        Sw = np.zeros((X.shape[1], X.shape[1]))
        Sb = np.zeros_like(Sw)
        for c in np.unique(y):
            Xc = X[y == c]
            mc = Xc.mean(axis=0)
            Sw += (Xc - mc).T @ (Xc - mc)
            Sb += len(Xc) * np.outer(mc - mu, mc - mu)
        Sw /= len(X)
        Sb /= len(X)
        vals, vecs = scipy.linalg.eigh(Sb, Sw + reg * np.eye(len(Sw)))
        self.center = mu
        self.projection = vecs[:, np.argsort(vals)[::-1][: self.dim]]
        return self

    def extract(self, feat: FeatureSequence) -> np.ndarray:
        if self.projection is None:
            raise RuntimeError("PoolingSIDExtractor.fit must run before extract")
        return (self.pooled(feat.frames) - self.center) @ self.projection


# ---------------------------------------------------------------------------
# speaker encoder / decoder


class SpeakerEncoderLayer(Layer):
    def __init__(self, params, name, dim, st_dim, heads, rng):
        super().__init__(params, name)
        self.ln_qk = LayerNorm(params, f"{name}.ln_qk", dim)
        self.ln_v = LayerNorm(params, f"{name}.ln_v", st_dim)
        self.att = MultiHeadAttention(params, f"{name}.att", dim, st_dim, dim, heads, rng)
        self.ln_ffn = LayerNorm(params, f"{name}.ln_ffn", dim)
        self.ffn = FeedForward(params, f"{name}.ffn", dim, 2 * dim, rng)

    def forward(self, x, st, mask=None, x_hist=None, st_hist=None):
        """``x``: previous speaker layer (queries/keys); ``st``: ST layer output (values)."""
        n = x.shape[0]
        if x_hist is not None and x_hist.shape[0]:
            x_kv, st_kv = np.concatenate([x_hist, x]), np.concatenate([st_hist, st])
        else:
            x_kv, st_kv = x, st
        a = self.ln_qk.forward(x_kv)
        v = self.ln_v.forward(st_kv)
        y = x + self.att.forward(a[a.shape[0] - n :], a, v, mask)
        return y + self.ffn.forward(self.ln_ffn.forward(y))

    def backward(self, dy):
        dy = dy + self.ln_ffn.backward(self.ffn.backward(dy))
        dq, dk, dv = self.att.backward(dy)
        self.ln_v.backward(dv)  # parameter grads only; the ST side is frozen
        return dy + self.ln_qk.backward(dq + dk)


@dataclass
class SpeakerEncoderCache:
    x_hist: list[deque]
    st_hist: list[deque]
    frames_consumed: int = 0

    @classmethod
    def empty(cls, chunk: ChunkConfig) -> SpeakerEncoderCache:
        B = chunk.left_chunks
        return cls([deque(maxlen=B) for _ in range(chunk.layers)], [deque(maxlen=B) for _ in range(chunk.layers)])


class SpeakerEncoder(Layer):
    def __init__(self, params, name, sid_dim, dim, st_dim, heads, chunk: ChunkConfig, rng):
        super().__init__(params, name)
        self.chunk = chunk
        self.dim = dim
        self.proj = Dense(params, f"{name}.proj", sid_dim, dim, rng)
        self.layers = [SpeakerEncoderLayer(params, f"{name}.layer{k}", dim, st_dim, heads, rng) for k in range(chunk.layers)]
        self.ln_out = LayerNorm(params, f"{name}.ln_out", dim)

    def _check(self, sid, st_layers):
        if len(st_layers) != len(self.layers):
            raise ShapeError(f"speaker encoder has {len(self.layers)} layers, got {len(st_layers)} ST layer outputs")
        for h in st_layers:
            if h.shape[0] != sid.shape[0]:
                raise ShapeError(f"ST layer output has {h.shape[0]} frames, SID stream has {sid.shape[0]}")

    def forward(self, sid: np.ndarray, st_layers: Sequence[np.ndarray]) -> np.ndarray:
        sid = np.asarray(sid, dtype=np.float64)
        self._check(sid, st_layers)
        T = sid.shape[0]
        if T == 0:
            return np.zeros((0, self.dim))
        mask = build_chunk_mask(T, self.chunk)
        x = self.proj.forward(sid)
        for layer, st in zip(self.layers, st_layers):
            x = layer.forward(x, st, mask)
        return self.ln_out.forward(x)

    def backward(self, dy: np.ndarray) -> None:
        dx = self.ln_out.backward(dy)
        for layer in reversed(self.layers):
            dx = layer.backward(dx)
        self.proj.backward(dx)

    def stream(self, sid_chunk: np.ndarray, st_chunks: Sequence[np.ndarray], cache: SpeakerEncoderCache):
        sid_chunk = np.asarray(sid_chunk, dtype=np.float64)
        self._check(sid_chunk, st_chunks)
        if sid_chunk.shape[0] > self.chunk.chunk_frames:
            raise ValueError("chunk longer than the configured chunk size")
        x = self.proj.forward(sid_chunk)
        for k, (layer, st) in enumerate(zip(self.layers, st_chunks)):
            xh = np.concatenate(list(cache.x_hist[k])) if cache.x_hist[k] else None
            sh = np.concatenate(list(cache.st_hist[k])) if cache.st_hist[k] else None
            cache.x_hist[k].append(x)
            cache.st_hist[k].append(np.asarray(st, dtype=np.float64))
            x = layer.forward(x, st, None, xh, sh)
        cache.frames_consumed += sid_chunk.shape[0]
        return self.ln_out.forward(x), cache


@dataclass
class TVector:
    vector: np.ndarray
    token_index: int
    frame_index: int
    token: int

    def to_json(self, token_str: str, frame_shift_s: float) -> dict:
        return {
            "token_index": self.token_index,
            "token": token_str,
            "frame_index": self.frame_index,
            "timestamp_s": self.frame_index * frame_shift_s,
            "tvec": self.vector.tolist(),
        }


class SpeakerDecoder(Layer):
    def __init__(self, params, name, spk_dim, emb_dim, hidden, n_layers, tvec_dim, rng):
        super().__init__(params, name)
        self.rnn = LSTMStack(params, f"{name}.rnn", spk_dim + emb_dim, hidden, n_layers, rng)
        self.out = Dense(params, f"{name}.out", hidden, tvec_dim, rng)

    def initial_state(self):
        return self.rnn.initial_state()

    def step(self, spk_frame: np.ndarray, token_embedding: np.ndarray, state):
        h, state = self.rnn.step(np.concatenate([spk_frame, token_embedding]), state)
        y, cache = unit_normalize_forward(self.out.forward(h))
        self._push(cache)
        return y, state

    def step_backward(self, dy, dstate):
        dz = unit_normalize_backward(dy, self._pop())
        dx, dstate = self.rnn.step_backward(self.out.backward(dz), dstate)
        return dx, dstate


class CosineClassifier(Layer):
    """Logits ``scale * x @ normalize(W)``: a linear head with unit-norm class columns and no bias.

    Tying logits to angles makes same-speaker t-vectors cluster in direction,
    which is what cosine-based change detection relies on.
    """

    def __init__(self, params, name, d_in, n_classes, scale, rng):
        super().__init__(params, name)
        self.scale = scale
        self._new("W", rng.normal(size=(d_in, n_classes)))

    def weights(self) -> np.ndarray:
        W = self.p("W")
        return W / np.linalg.norm(W, axis=0, keepdims=True)

    def forward(self, x):
        Wn, cache = unit_normalize_forward(self.p("W").T)
        self._push((x, cache))
        return self.scale * x @ Wn.T

    def backward(self, dy):
        x, cache = self._pop()
        Wn = cache[0]
        self._acc("W", unit_normalize_backward(self.scale * dy.T @ x, cache).T)
        return self.scale * dy @ Wn


@dataclass
class TVectorConfig:
    sid_dim: int
    n_speakers: int = 8
    attention_dim: int = 32
    heads: int = 4
    decoder_hidden: int = 64
    decoder_layers: int = 2
    tvector_dim: int = 128
    head: str = "cosine"
    head_scale: float = 11.0
    seed: int = 0


# attention 128 / 8 heads, two-layer LSTM with hidden 512, 128-dim t-vectors
FULL_TVECTOR = dict(attention_dim=128, heads=8, decoder_hidden=512, decoder_layers=2, tvector_dim=128)


class TVectorModel:
    def __init__(self, cfg: TVectorConfig, st_model: STModel):
        self.cfg = cfg
        self.st = st_model
        rng = np.random.default_rng(cfg.seed)
        st_cfg = st_model.cfg
        self.params = ParamSet()
        self.encoder = SpeakerEncoder(self.params, "tv.enc", cfg.sid_dim, cfg.attention_dim, st_cfg.chunk.model_dim, cfg.heads, st_cfg.chunk, rng)
        self.decoder = SpeakerDecoder(self.params, "tv.dec", cfg.attention_dim, st_cfg.emb_dim, cfg.decoder_hidden, cfg.decoder_layers, cfg.tvector_dim, rng)
        if cfg.head == "cosine":
            self.classifier = CosineClassifier(self.params, "tv.cls", cfg.tvector_dim, cfg.n_speakers, cfg.head_scale, rng)
        elif cfg.head == "linear":
            self.classifier = Dense(self.params, "tv.cls", cfg.tvector_dim, cfg.n_speakers, rng)
        else:
            raise ValueError(f"unknown classifier head {cfg.head!r}")

    @property
    def modules(self) -> list[Layer]:
        return [self.encoder, self.decoder, self.classifier]

    def set_recording(self, on: bool) -> None:
        for m in self.modules:
            m.set_recording(on)

    def token_embedding(self, token: int) -> np.ndarray:
        return self.st.prediction.table[token]

    def tvectors(self, spk_frames: np.ndarray, tokens: Sequence[int], frames: Sequence[int], state=None) -> list[TVector]:
        state = self.decoder.initial_state() if state is None else state
        out = []
        for u, (tok, f) in enumerate(zip(tokens, frames)):
            vec, state = self.decoder.step(spk_frames[f], self.token_embedding(tok), state)
            out.append(TVector(vec, u, int(f), int(tok)))
        return out

    def save(self, stem: str | Path) -> None:
        stem = Path(stem)
        self.params.save(stem.with_suffix(".nnc"))
        stem.with_suffix(".json").write_text(json.dumps(asdict(self.cfg), indent=2))

    @classmethod
    def load(cls, stem: str | Path, st_model: STModel) -> TVectorModel:
        stem = Path(stem)
        model = cls(TVectorConfig(**json.loads(stem.with_suffix(".json").read_text())), st_model)
        model.params.load(stem.with_suffix(".nnc"))
        return model


def speaker_encoder_forward(sid_frames: np.ndarray, st_layer_outputs: Sequence[np.ndarray], model: TVectorModel) -> np.ndarray:
    return model.encoder.forward(sid_frames, st_layer_outputs)


def speaker_decoder_step(spk_enc_frame: np.ndarray, token_embedding: np.ndarray, state, model: TVectorModel):
    return model.decoder.step(spk_enc_frame, token_embedding, state)


# ---------------------------------------------------------------------------
# forced alignment


@dataclass
class AlignmentPath:
    frames: list[int]
    log_prob: float


def viterbi_align(lattice: np.ndarray, target: Sequence[int], blank_id: int = 0) -> AlignmentPath:
    """Best single path through the transducer lattice for a known target.

    ``frames[u]`` is the frame at which token ``u`` is emitted.  Between
    equally scoring paths the one emitting tokens earlier wins.
    """
    lattice = np.asarray(lattice, dtype=np.float64)
    T = lattice.shape[0]
    blank, emit = lattice_terms(lattice, target, blank_id)
    U = emit.shape[1]
    if T == 0:
        if U:
            raise AlignmentError("cannot align a non-empty target to zero frames")
        return AlignmentPath([], 0.0)
    b, y = blank.tolist(), emit.tolist()
    score = [[-math.inf] * (U + 1) for _ in range(T)]
    score[0][0] = 0.0
    for t in range(T):
        for u in range(U + 1):
            if t == 0 and u == 0:
                continue
            via_blank = score[t - 1][u] + b[t - 1][u] if t else -math.inf
            via_emit = score[t][u - 1] + y[t][u - 1] if u else -math.inf
            score[t][u] = max(via_blank, via_emit)
    total = score[T - 1][U] + b[T - 1][U]
    if total == -math.inf:
        raise AlignmentError("target unreachable in lattice")
    frames = [0] * U
    t, u = T - 1, U
    while u > 0:
        via_blank = score[t - 1][u] + b[t - 1][u] if t else -math.inf
        via_emit = score[t][u - 1] + y[t][u - 1]
        # ties go to the blank predecessor: the token was emitted earlier
        if t and via_blank >= via_emit:
            t -= 1
        else:
            frames[u - 1] = t
            u -= 1
    return AlignmentPath(frames, float(total))


# ---------------------------------------------------------------------------
# training


@dataclass
class TVectorExample:
    sid: np.ndarray
    st_layers: list[np.ndarray]
    tokens: list[int]
    frames: list[int]
    speakers: list[int]


def prepare_tvector_example(st_model: STModel, feat: FeatureSequence, lid: int, target: Sequence[int], speakers: Sequence[int], extractor: SIDExtractor) -> TVectorExample:
    """Run the frozen ST model once and force-align the target tokens to frames."""
    if len(target) != len(speakers):
        raise ValueError(f"{len(target)} tokens but {len(speakers)} speaker labels")
    enc = st_model.encode(feat.frames)
    lattice = st_model.lattice(enc.hidden, lid, list(target))
    path = viterbi_align(lattice, target, st_model.vocab.blank_id)
    return TVectorExample(extractor.extract(feat), enc.layer_outputs, list(target), path.frames, list(speakers))


def tvector_example_loss(model: TVectorModel, ex: TVectorExample, scale: float = 1.0) -> tuple[float, int]:
    """Summed token cross-entropy and the number of correct argmax predictions."""
    if len(ex.tokens) != len(ex.speakers):
        raise ValueError("token/speaker-label length mismatch")
    if not ex.tokens:
        return 0.0, 0
    model.set_recording(True)
    try:
        spk = model.encoder.forward(ex.sid, ex.st_layers)
        state = model.decoder.initial_state()
        vecs = []
        for tok, f in zip(ex.tokens, ex.frames):
            v, state = model.decoder.step(spk[f], model.token_embedding(tok), state)
            vecs.append(v)
        logits = model.classifier.forward(np.stack(vecs))
        lp = log_softmax(logits)
        labels = np.asarray(ex.speakers)
        idx = np.arange(len(labels))
        loss = -float(lp[idx, labels].sum())
        correct = int((lp.argmax(axis=1) == labels).sum())
        dlogits = np.exp(lp)
        dlogits[idx, labels] -= 1.0
        dvecs = model.classifier.backward(dlogits * scale)
        dspk = np.zeros_like(spk)
        dstate = None
        for u in reversed(range(len(ex.tokens))):
            dx, dstate = model.decoder.step_backward(dvecs[u], dstate)
            dspk[ex.frames[u]] += dx[: spk.shape[1]]
        model.encoder.backward(dspk)
    finally:
        model.set_recording(False)
    return loss, correct


def train_tvector(model: TVectorModel, batch: Sequence[TVectorExample], optimizer) -> float:
    """One optimizer step on mean per-token cross-entropy.  Only t-vector parameters change."""
    n_tok = sum(len(ex.tokens) for ex in batch)
    if n_tok == 0:
        raise ValueError("batch has no tokens")
    model.params.zero_grad()
    total = 0.0
    for ex in batch:
        total += tvector_example_loss(model, ex, 1.0 / n_tok)[0]
    optimizer.step()
    return total / n_tok


def classify_tokens(model: TVectorModel, ex: TVectorExample) -> np.ndarray:
    spk = model.encoder.forward(ex.sid, ex.st_layers)
    vecs = model.tvectors(spk, ex.tokens, ex.frames)
    if not vecs:
        return np.zeros(0, dtype=np.int64)
    return model.classifier.forward(np.stack([v.vector for v in vecs])).argmax(axis=1)

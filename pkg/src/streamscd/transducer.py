"""Transformer-transducer: prediction/joint networks, loss, decoding, training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .encoder import ChunkConfig, EncoderCache, EncoderOutput, StreamingEncoder, iter_chunks
from .nn import (
    SGD,
    Dense,
    Embedding,
    Layer,
    LSTMStack,
    ParamSet,
    ShapeError,
    log_softmax,
    log_softmax_backward,
)

log = logging.getLogger(__name__)

BLANK = "<blank>"
EOS = "<eos>"


class VocabularyError(KeyError):
    pass


class NumericError(FloatingPointError):
    pass


def lid_token(lang: str) -> str:
    return f"<LID:{lang}>"


@dataclass
class Vocabulary:
    """Ordered tokens; ``<blank>`` and ``<eos>`` reserved, LID tokens appended last."""

    tokens: list[str]

    def __post_init__(self):
        if BLANK not in self.tokens or EOS not in self.tokens:
            raise VocabularyError("vocabulary must contain <blank> and <eos>")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def build(cls, words: Sequence[str], languages: Sequence[str]) -> Vocabulary:
        return cls([BLANK, EOS, *words, *(lid_token(l) for l in languages)])

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyError(token) from None

    @property
    def blank_id(self) -> int:
        return self._index[BLANK]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def languages(self) -> list[str]:
        return [t[5:-1] for t in self.tokens if t.startswith("<LID:")]

    @property
    def lid_ids(self) -> list[int]:
        return [self._index[lid_token(l)] for l in self.languages]

    def lid(self, lang: str) -> int:
        tok = lid_token(lang)
        if tok not in self._index:
            raise VocabularyError(f"language {lang!r} not in vocabulary")
        return self._index[tok]

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self[w] for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def write(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> Vocabulary:
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)
    frame_indices: list[int] = field(default_factory=list)
    log_prob: float = 0.0

    def __len__(self) -> int:
        return len(self.tokens)

    def timestamps(self, frame_shift_s: float) -> list[float]:
        return [f * frame_shift_s for f in self.frame_indices]

    def to_json(self, vocab: Vocabulary, frame_shift_s: float, **extra) -> dict:
        return {
            **extra,
            "tokens": vocab.decode(self.tokens),
            "frame_indices": list(self.frame_indices),
            "timestamps_s": self.timestamps(frame_shift_s),
            "log_prob": self.log_prob,
        }

    @classmethod
    def from_json(cls, obj: dict, vocab: Vocabulary) -> Hypothesis:
        return cls(vocab.encode(obj["tokens"]), list(obj["frame_indices"]), float(obj["log_prob"]))


# ---------------------------------------------------------------------------
# networks


class PredictionNetwork(Layer):
    """Token embedding followed by a stacked LSTM; the first input is the LID token."""

    def __init__(self, params, name, vocab_size, emb_dim, hidden, n_layers, rng):
        super().__init__(params, name)
        self.embed = Embedding(params, f"{name}.embed", vocab_size, emb_dim, rng)
        self.rnn = LSTMStack(params, f"{name}.rnn", emb_dim, hidden, n_layers, rng)

    @property
    def table(self) -> np.ndarray:
        return self.embed.p("table")

    def forward(self, tokens: Sequence[int]) -> np.ndarray:
        """Hidden states for every prefix, shape ``(len(tokens), hidden)``."""
        emb = self.embed.forward(tokens)
        state = self.rnn.initial_state()
        out = []
        for e in emb:
            h, state = self.rnn.step(e, state)
            out.append(h)
        return np.stack(out)

    def backward(self, dh: np.ndarray) -> None:
        demb = np.zeros((dh.shape[0], self.table.shape[1]))
        dstate = None
        for u in reversed(range(dh.shape[0])):
            demb[u], dstate = self.rnn.step_backward(dh[u], dstate)
        self.embed.backward(demb)

    def start(self, lid: int):
        if not 0 <= lid < self.table.shape[0]:
            raise VocabularyError(f"token index {lid} out of range")
        return self.rnn.step(self.table[lid], self.rnn.initial_state())

    def step(self, token: int, state):
        if not 0 <= token < self.table.shape[0]:
            raise VocabularyError(f"token index {token} out of range")
        return self.rnn.step(self.table[token], state)


class JointNetwork(Layer):
    """z[t, u] = log_softmax(W_o tanh(W_e h_enc[t] + W_p h_pred[u] + b))."""

    def __init__(self, params, name, enc_dim, pred_dim, joint_dim, vocab_size, rng):
        super().__init__(params, name)
        self.enc = Dense(params, f"{name}.enc", enc_dim, joint_dim, rng)
        self.pred = Dense(params, f"{name}.pred", pred_dim, joint_dim, rng, bias=False)
        self.out = Dense(params, f"{name}.out", joint_dim, vocab_size, rng, bias=False)

    def forward(self, h_enc: np.ndarray, h_pred: np.ndarray) -> np.ndarray:
        if h_enc.ndim != 2 or h_pred.ndim != 2:
            raise ShapeError("joint expects 2-D encoder and prediction states")
        e = self.enc.forward(h_enc)
        p = self.pred.forward(h_pred)
        hid = np.tanh(e[:, None, :] + p[None, :, :])
        z = log_softmax(self.out.forward(hid))
        self._push((hid, z))
        return z

    def backward(self, dz: np.ndarray):
        hid, z = self._pop()
        dpre = self.out.backward(log_softmax_backward(dz, z)) * (1.0 - hid * hid)
        dp = self.pred.backward(dpre.sum(axis=0))
        de = self.enc.backward(dpre.sum(axis=1))
        return de, dp


def joint_forward(h_enc: np.ndarray, h_pred: np.ndarray, joint: JointNetwork) -> np.ndarray:
    """Pure lattice computation, shape ``(T, U+1, V)``."""
    e = h_enc @ joint.enc.p("W") + joint.enc.p("b")
    p = h_pred @ joint.pred.p("W")
    return log_softmax(np.tanh(e[:, None, :] + p[None, :, :]) @ joint.out.p("W"))


# ---------------------------------------------------------------------------
# loss


def _lse(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = max(a, b)
    return m + math.log(math.exp(a - m) + math.exp(b - m))


def lattice_terms(lattice: np.ndarray, target: Sequence[int], blank_id: int):
    T, U1, V = lattice.shape
    target = np.asarray(target, dtype=np.int64)
    U = target.size
    if U1 != U + 1:
        raise ShapeError(f"lattice has {U1} label states for a target of length {U}")
    if U and (target == blank_id).any():
        raise ValueError("target contains <blank>")
    if U and (target.min() < 0 or target.max() >= V):
        raise ValueError("target token out of vocabulary range")
    blank = lattice[:, :, blank_id]
    emit = lattice[:, np.arange(U), target] if U else np.zeros((T, 0))
    return blank, emit


def transducer_forward_backward(blank: np.ndarray, emit: np.ndarray):
    """Log forward/backward variables over the (T, U+1) lattice.

    ``blank[t, u]`` is the log-prob of blank at node (t, u), ``emit[t, u]``
    the log-prob of emitting target token u+1 there.
    """
    T, U1 = blank.shape
    U = U1 - 1
    b = blank.tolist()
    y = emit.tolist()
    alpha = [[-math.inf] * U1 for _ in range(T)]
    alpha[0][0] = 0.0
    for t in range(T):
        row, prev = alpha[t], alpha[t - 1] if t else None
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            a = prev[u] + b[t - 1][u] if t else -math.inf
            if u:
                a = _lse(a, row[u - 1] + y[t][u - 1])
            row[u] = a
    beta = [[-math.inf] * U1 for _ in range(T)]
    beta[T - 1][U] = b[T - 1][U]
    for t in reversed(range(T)):
        row, nxt = beta[t], beta[t + 1] if t < T - 1 else None
        for u in reversed(range(U1)):
            if t == T - 1 and u == U:
                continue
            a = nxt[u] + b[t][u] if nxt is not None else -math.inf
            if u < U:
                a = _lse(a, row[u + 1] + y[t][u])
            row[u] = a
    return np.array(alpha), np.array(beta)


def transducer_loss(lattice: np.ndarray, target: Sequence[int], blank_id: int = 0) -> tuple[float, np.ndarray]:
    """Negative log-likelihood over all alignments and its gradient w.r.t. the lattice."""
    lattice = np.asarray(lattice, dtype=np.float64)
    T = lattice.shape[0]
    blank, emit = lattice_terms(lattice, target, blank_id)
    U = emit.shape[1]
    grad = np.zeros_like(lattice)
    if T == 0:
        # nothing to emit from: empty target is trivially matched, anything else is unreachable
        return (0.0 if U == 0 else math.inf), grad
    alpha, beta = transducer_forward_backward(blank, emit)
    logp = beta[0, 0]
    loss = -logp
    # occupancy of each transition, negated
    occ_blank = np.full_like(blank, -np.inf)
    occ_blank[:-1] = alpha[:-1] + blank[:-1] + beta[1:]
    occ_blank[-1, U] = alpha[-1, U] + blank[-1, U]
    grad[:, :, blank_id] = -np.exp(occ_blank - logp)
    if U:
        occ_emit = alpha[:, :U] + emit + beta[:, 1:]
        np.add.at(grad, (slice(None), np.arange(U), np.asarray(target)), -np.exp(occ_emit - logp))
    return float(loss), grad


# ---------------------------------------------------------------------------
# decoding


class TransducerScorer:
    """Adapter between a trained model and the decoders.

    Frames are rows of the joint's encoder projection; states are
    ``(prediction projection, LSTM state)`` pairs.
    """

    def __init__(self, model: STModel, lid: int):
        self.model = model
        self.lid = lid
        self.vocab_size = len(model.vocab)
        self.blank_id = model.vocab.blank_id
        self.eos_id = model.vocab.eos_id
        joint = model.joint
        self._We, self._be = joint.enc.p("W"), joint.enc.p("b")
        self._Wp = joint.pred.p("W")
        self._Wo = joint.out.p("W")

    def frames(self, h_enc: np.ndarray) -> np.ndarray:
        return h_enc @ self._We + self._be

    def start(self):
        h, st = self.model.prediction.start(self.lid)
        return h @ self._Wp, st

    def advance(self, state, token: int):
        h, st = self.model.prediction.step(token, state[1])
        return h @ self._Wp, st

    def log_probs(self, frame: np.ndarray, state) -> np.ndarray:
        return log_softmax(np.tanh(frame + state[0]) @ self._Wo)


class GreedyDecoder:
    """Frame-synchronous greedy search that can be fed frames incrementally."""

    def __init__(self, scorer, max_symbols_per_frame: int = 3):
        if max_symbols_per_frame < 1:
            raise ValueError("max_symbols_per_frame must be >= 1")
        self.scorer = scorer
        self.max_symbols = max_symbols_per_frame
        self.state = scorer.start()
        self.hyp = Hypothesis()
        self.t = 0
        self.ended = False

    def push(self, frames: Iterable) -> list[tuple[int, int]]:
        """Consume frames; return the ``(token, frame)`` pairs emitted."""
        sc = self.scorer
        blank, eos = sc.blank_id, getattr(sc, "eos_id", None)
        new = []
        for frame in frames:
            if not self.ended:
                for n in range(self.max_symbols + 1):
                    lp = sc.log_probs(frame, self.state)
                    k = blank if n == self.max_symbols else int(np.argmax(lp))
                    self.hyp.log_prob += float(lp[k])
                    if k == blank:
                        break
                    if k == eos:
                        self.ended = True
                        break
                    self.hyp.tokens.append(k)
                    self.hyp.frame_indices.append(self.t)
                    new.append((k, self.t))
                    self.state = sc.advance(self.state, k)
            self.t += 1
        return new

    def result(self) -> Hypothesis:
        return Hypothesis(list(self.hyp.tokens), list(self.hyp.frame_indices), self.hyp.log_prob)


@dataclass
class _BeamHyp:
    tokens: tuple
    frames: tuple
    score: float
    state: Any


class BeamDecoder:
    """Frame-synchronous transducer beam search.

    Hypotheses are scored by their best single alignment path.  Within a
    frame, every round expands the in-frame hypotheses by one symbol; blanks
    move a hypothesis to the next frame.  Blank-advanced hypotheses, new
    emissions and ``<eos>`` completions compete for the same ``beam`` slots,
    so ``beam=1`` reproduces greedy search exactly.  Advanced hypotheses with
    identical token sequences are merged by keeping the better score.
    """

    def __init__(self, scorer, beam: int = 4, max_symbols_per_frame: int = 3):
        if beam < 1:
            raise ValueError("beam must be >= 1")
        if max_symbols_per_frame < 1:
            raise ValueError("max_symbols_per_frame must be >= 1")
        self.scorer = scorer
        self.beam_size = beam
        self.max_symbols = max_symbols_per_frame
        self.beam = [_BeamHyp((), (), 0.0, scorer.start())]
        self.finished: list[_BeamHyp] = []
        self.t = 0

    def push(self, frames: Iterable) -> None:
        sc = self.scorer
        blank, eos = sc.blank_id, getattr(sc, "eos_id", None)
        V = sc.vocab_size
        for frame in frames:
            if self.beam:
                kept: list[_BeamHyp] = []
                active = self.beam
                for n in range(self.max_symbols + 1):
                    pool: list[tuple[str, Any]] = [("adv", h) for h in kept]
                    for h in active:
                        lp = sc.log_probs(frame, h.state)
                        if n == self.max_symbols:
                            pool.append(("adv", _BeamHyp(h.tokens, h.frames, h.score + lp[blank], h.state)))
                            continue
                        for k in range(V):
                            s = h.score + float(lp[k])
                            if k == blank:
                                pool.append(("adv", _BeamHyp(h.tokens, h.frames, s, h.state)))
                            elif k == eos:
                                pool.append(("eos", _BeamHyp(h.tokens, h.frames, s, None)))
                            else:
                                pool.append(("emit", (h, k, s)))
                    pool = _merge_advanced(pool)
                    pool.sort(key=lambda item: -_score(item))
                    top = pool[: self.beam_size]
                    kept = [h for kind, h in top if kind == "adv"]
                    self.finished.extend(h for kind, h in top if kind == "eos")
                    active = [
                        _BeamHyp(h.tokens + (k,), h.frames + (self.t,), s, sc.advance(h.state, k))
                        for kind, (h, k, s) in ((kind, x) for kind, x in top if kind == "emit")
                    ]
                    if not active:
                        break
                self.beam = kept
            self.t += 1

    def best(self) -> Hypothesis:
        cands = sorted(self.finished + self.beam, key=lambda h: -h.score)
        if not cands:
            return Hypothesis()
        h = cands[0]
        return Hypothesis(list(h.tokens), list(h.frames), float(h.score))

    def hypotheses(self) -> list[Hypothesis]:
        return [Hypothesis(list(h.tokens), list(h.frames), float(h.score)) for h in self.finished + self.beam]


def _score(item) -> float:
    kind, x = item
    return x[2] if kind == "emit" else x.score


def _merge_advanced(pool):
    best: dict[tuple, int] = {}
    out = []
    for kind, x in pool:
        if kind == "adv":
            j = best.get(x.tokens)
            if j is not None:
                if x.score > out[j][1].score:
                    out[j] = (kind, x)
                continue
            best[x.tokens] = len(out)
        out.append((kind, x))
    return out


# ---------------------------------------------------------------------------
# model


@dataclass
class STConfig:
    input_dim: int
    vocab_size: int
    chunk: ChunkConfig = field(default_factory=ChunkConfig)
    emb_dim: int = 32
    pred_dim: int = 64
    pred_layers: int = 1
    joint_dim: int = 64
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> STConfig:
        obj = dict(obj)
        obj["chunk"] = ChunkConfig(**obj["chunk"])
        return cls(**obj)


class STModel:
    """Streaming encoder, prediction network and joint network over one ParamSet."""

    def __init__(self, cfg: STConfig, vocab: Vocabulary):
        if cfg.vocab_size != len(vocab):
            raise ShapeError(f"config vocab size {cfg.vocab_size} != vocabulary size {len(vocab)}")
        self.cfg = cfg
        self.vocab = vocab
        rng = np.random.default_rng(cfg.seed)
        self.params = ParamSet()
        self.encoder = StreamingEncoder(cfg.chunk, cfg.input_dim, rng, self.params, "st.enc")
        self.prediction = PredictionNetwork(self.params, "st.pred", cfg.vocab_size, cfg.emb_dim, cfg.pred_dim, cfg.pred_layers, rng)
        self.joint = JointNetwork(self.params, "st.joint", cfg.chunk.model_dim, cfg.pred_dim, cfg.joint_dim, cfg.vocab_size, rng)

    @property
    def modules(self) -> list[Layer]:
        return [self.encoder, self.prediction, self.joint]

    def set_recording(self, on: bool) -> None:
        for m in self.modules:
            m.set_recording(on)

    def encode(self, frames: np.ndarray) -> EncoderOutput:
        return self.encoder.forward(frames)

    def lattice(self, h_enc: np.ndarray, lid: int, target: Sequence[int]) -> np.ndarray:
        h_pred = self.prediction.forward([lid, *target])
        return self.joint.forward(h_enc, h_pred)

    def scorer(self, lid: int) -> TransducerScorer:
        return TransducerScorer(self, lid)

    def save(self, stem: str | Path) -> None:
        """Write ``<stem>.nnc``, ``<stem>.json`` and ``<stem>.vocab``."""
        stem = Path(stem)
        self.params.save(stem.with_suffix(".nnc"))
        stem.with_suffix(".json").write_text(json.dumps(self.cfg.to_json(), indent=2))
        self.vocab.write(stem.with_suffix(".vocab"))

    @classmethod
    def load(cls, stem: str | Path) -> STModel:
        stem = Path(stem)
        cfg = STConfig.from_json(json.loads(stem.with_suffix(".json").read_text()))
        model = cls(cfg, Vocabulary.read(stem.with_suffix(".vocab")))
        model.params.load(stem.with_suffix(".nnc"))
        return model


def prediction_forward(prev_tokens: Sequence[int], model: STModel) -> np.ndarray:
    """Prediction-network states for ``[lid, y_1, ..., y_U]``."""
    if not prev_tokens:
        raise ValueError("prediction input needs at least the start (LID) token")
    V = len(model.vocab)
    if any(not 0 <= t < V for t in prev_tokens):
        raise VocabularyError("unknown token index")
    pred = model.prediction
    h, st = pred.start(prev_tokens[0])
    out = [h]
    for tok in prev_tokens[1:]:
        h, st = pred.step(tok, st)
        out.append(h)
    return np.stack(out)


def greedy_decode_streaming(enc_chunks: Iterable[np.ndarray], model: STModel, lid: int, max_symbols_per_frame: int = 3) -> Hypothesis:
    scorer = model.scorer(lid)
    dec = GreedyDecoder(scorer, max_symbols_per_frame)
    for chunk in enc_chunks:
        dec.push(scorer.frames(chunk))
    return dec.result()


def beam_decode(h_enc: np.ndarray, model: STModel, lid: int, beam: int = 4, max_symbols_per_frame: int = 3) -> Hypothesis:
    scorer = model.scorer(lid)
    dec = BeamDecoder(scorer, beam, max_symbols_per_frame)
    dec.push(scorer.frames(h_enc))
    return dec.best()


def stream_encoder_chunks(model: STModel, frames: np.ndarray) -> Iterable[np.ndarray]:
    cache = EncoderCache.empty(model.cfg.chunk)
    for chunk in iter_chunks(frames, model.cfg.chunk.chunk_frames):
        out, cache = model.encoder.stream(chunk, cache)
        yield out.hidden


# ---------------------------------------------------------------------------
# training


@dataclass
class STExample:
    frames: np.ndarray
    lid: int
    target: list[int]


def st_example_loss(model: STModel, ex: STExample, scale: float = 1.0) -> float:
    """Forward + backward for one utterance; gradients accumulate into ``model.params``."""
    model.set_recording(True)
    try:
        enc = model.encoder.forward(ex.frames)
        h_pred = model.prediction.forward([ex.lid, *ex.target])
        z = model.joint.forward(enc.hidden, h_pred)
        loss, dz = transducer_loss(z, ex.target, model.vocab.blank_id)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite transducer loss {loss} (T={len(ex.frames)}, U={len(ex.target)})")
        de, dp = model.joint.backward(dz * scale)
        model.prediction.backward(dp)
        model.encoder.backward(de)
    finally:
        model.set_recording(False)
    return loss


def train_step_st(model: STModel, batch: Sequence[STExample], optimizer: SGD) -> float:
    """One optimizer step on the mean per-utterance loss."""
    if not batch:
        raise ValueError("empty batch")
    model.params.zero_grad()
    total = 0.0
    for ex in batch:
        total += st_example_loss(model, ex, 1.0 / len(batch))
    grad_norm = optimizer.step()
    if not math.isfinite(grad_norm):
        raise NumericError(f"non-finite gradient norm after loss {total / len(batch)}")
    return total / len(batch)

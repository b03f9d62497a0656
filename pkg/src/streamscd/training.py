"""Training loops and dataset plumbing shared by the CLI and the tests."""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .encoder import PRESETS
from .nn import Adam
from .scd import ProfileBank
from .synth import SynthDataset, SynthSample
from .transducer import NumericError, STConfig, STExample, STModel, train_step_st
from .tvector import OracleSIDExtractor, TVectorConfig, TVectorExample, TVectorModel, classify_tokens, prepare_tvector_example, train_tvector


@dataclass
class TrainConfig:
    steps: int = 1500
    lr: float = 3e-3
    batch: int = 8
    clip_norm: float = 5.0
    seed: int = 0


def _sample_seed(sample_id: str, seed: int) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{sample_id}".encode()).digest()[:4], "little")


def oracle_extractor(ds: SynthDataset, sample: SynthSample, noise: float | None = None, window: int = 1, seed: int = 0) -> OracleSIDExtractor:
    """Noisy ground-truth speaker track for a dataset sample; the noise draw is fixed per sample id."""
    noise = ds.config.sid_noise if noise is None else noise
    return OracleSIDExtractor(sample.frame_embeddings(ds.speakers), noise, _sample_seed(sample.sample_id, seed), window)


def oracle_sid(ds: SynthDataset, sample: SynthSample, noise: float | None = None, window: int = 1, seed: int = 0) -> np.ndarray:
    return oracle_extractor(ds, sample, noise, window, seed).extract(sample.features)


def batch_schedule(n: int, cfg: TrainConfig):
    """Sample indices drawn for each training step; seeded by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.steps):
        yield rng.integers(n, size=cfg.batch)


def new_st_model(ds: SynthDataset, preset: str = "toy", seed: int = 0) -> STModel:
    vocab = ds.world.vocabulary()
    if preset not in PRESETS:
        raise KeyError(f"unknown preset {preset!r}")
    return STModel(STConfig(ds.world.feature_dim, len(vocab), PRESETS[preset], seed=seed), vocab)


def make_optimizer(params, cfg: TrainConfig) -> Adam:
    return Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)


def _remaining(n: int, cfg: TrainConfig, opt: Adam):
    """Schedule entries not yet consumed; a restored optimizer resumes where it stopped."""
    return itertools.islice(enumerate(batch_schedule(n, cfg)), opt.t, None)


def train_st(model: STModel, ds: SynthDataset, cfg: TrainConfig, log: Callable[[int, float], None] | None = None, opt: Adam | None = None) -> list[float]:
    """Adam on mean per-utterance transducer loss; returns the per-step loss curve.

    Passing an optimizer restored from an earlier run continues that run's
    trajectory at step ``opt.t``.
    """
    vocab = model.vocab
    examples = [STExample(s.features.frames, vocab.lid(s.lang), s.targets) for s in ds]
    opt = opt or make_optimizer(model.params, cfg)
    losses = []
    for step, idx in _remaining(len(examples), cfg, opt):
        loss = train_step_st(model, [examples[i] for i in idx], opt)
        losses.append(loss)
        if log:
            log(step, loss)
    return losses


def speaker_labels(ds: SynthDataset) -> dict[int, int]:
    """Dense class index per speaker id, in id order."""
    return {spk: k for k, spk in enumerate(sorted(ds.speakers))}


def tvector_examples(st: STModel, ds: SynthDataset, sid_window: int = 1, seed: int = 0) -> list[TVectorExample]:
    labels = speaker_labels(ds)
    out = []
    for s in ds:
        ext = oracle_extractor(ds, s, window=sid_window, seed=seed)
        out.append(prepare_tvector_example(st, s.features, st.vocab.lid(s.lang), s.targets, [labels[k] for k in s.token_speakers], ext))
    return out


def new_tvector_model(st: STModel, ds: SynthDataset, seed: int = 0, **overrides) -> TVectorModel:
    cfg = TVectorConfig(sid_dim=ds.world.speaker_dim, n_speakers=len(ds.speakers), seed=seed, **overrides)
    return TVectorModel(cfg, st)


def train_tvectors(model: TVectorModel, examples: Sequence[TVectorExample], cfg: TrainConfig, log: Callable[[int, float], None] | None = None, opt: Adam | None = None) -> list[float]:
    opt = opt or make_optimizer(model.params, cfg)
    losses = []
    for step, idx in _remaining(len(examples), cfg, opt):
        loss = train_tvector(model, [examples[i] for i in idx], opt)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite t-vector loss at step {step}")
        losses.append(loss)
        if log:
            log(step, loss)
    return losses


def token_accuracy(model: TVectorModel, examples: Sequence[TVectorExample]) -> float:
    correct = total = 0
    for ex in examples:
        pred = classify_tokens(model, ex)
        correct += int((pred == np.asarray(ex.speakers)).sum())
        total += len(pred)
    return correct / total if total else 0.0


def build_profiles(model: TVectorModel, ds: SynthDataset, examples: Sequence[TVectorExample]) -> ProfileBank:
    """One profile per training speaker from t-vectors of force-aligned reference tokens."""
    vecs: dict[int, list] = {}
    for s, ex in zip(ds, examples):
        spk = model.encoder.forward(ex.sid, ex.st_layers)
        for v, k in zip(model.tvectors(spk, ex.tokens, ex.frames), s.token_speakers):
            vecs.setdefault(k, []).append(v.vector)
    return ProfileBank.from_speakers(vecs, {k: ds.speakers[k].gender for k in vecs})


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

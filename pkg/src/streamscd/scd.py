"""Speaker-change detection and gender labelling from t-vectors."""

from __future__ import annotations

import json
import logging
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

GENDERS = ("M", "F")
SC_MARK = "<SC>"
_SC_LINE = re.compile(r"^<SC>\t(-?\d+\.\d{2}) sec$")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class SCDEvent:
    """A detected change between tokens ``token_index - 1`` and ``token_index``."""

    token_index: int
    frame_index: int
    timestamp_s: float
    similarity: float

    @property
    def after_token_index(self) -> int:
        return self.token_index - 1

    def to_json(self) -> dict:
        return {"token_index": self.token_index, "frame_index": self.frame_index, "timestamp_s": self.timestamp_s, "similarity": self.similarity}


@dataclass
class SCDConfig:
    threshold: float = 0.94
    min_gap_s: float = 1.0
    frame_shift_s: float = 0.04
    smooth: int = 1

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")
        if self.min_gap_s < 0:
            raise ValueError("min_gap_s must be >= 0")

    def detector(self) -> SpeakerChangeDetector:
        return SpeakerChangeDetector(self.threshold, self.min_gap_s, self.frame_shift_s, self.smooth)


class SpeakerChangeDetector:
    """Streaming detector: one t-vector in, at most one event out.

    An event fires at token ``u`` when the similarity between t-vectors
    ``u-1`` and ``u`` drops below ``threshold``.  Its timestamp is the
    emission frame of token ``u`` times the frame shift.  A candidate less
    than ``min_gap_s`` after the previous event is dropped.  With
    ``smooth=k`` the similarity is the mean of the last ``k`` raw
    similarities.
    """

    def __init__(self, threshold: float = 0.94, min_gap_s: float = 1.0, frame_shift_s: float = 0.04, smooth: int = 1):
        if smooth < 1:
            raise ValueError("smooth must be >= 1")
        if min_gap_s < 0:
            raise ValueError("min_gap_s must be >= 0")
        self.threshold = threshold
        self.min_gap_s = min_gap_s
        self.frame_shift_s = frame_shift_s
        self.smooth = smooth
        self.reset()

    def reset(self) -> None:
        self._prev: np.ndarray | None = None
        self._recent: deque[float] = deque(maxlen=self.smooth)
        self._last_event_s: float | None = None
        self.n_tokens = 0
        self.similarities: list[float] = []
        self.events: list[SCDEvent] = []

    def push(self, tvec: np.ndarray, frame_index: int) -> SCDEvent | None:
        u = self.n_tokens
        self.n_tokens += 1
        prev, self._prev = self._prev, np.asarray(tvec, dtype=np.float64)
        if prev is None:
            return None
        self._recent.append(cosine_similarity(prev, tvec))
        sim = float(np.mean(self._recent))
        self.similarities.append(sim)
        if sim >= self.threshold:
            return None
        ts = frame_index * self.frame_shift_s
        if self._last_event_s is not None and ts - self._last_event_s < self.min_gap_s:
            return None
        self._last_event_s = ts
        event = SCDEvent(u, int(frame_index), ts, sim)
        self.events.append(event)
        return event


def detect_changes(tvectors: Sequence[np.ndarray], frames: Sequence[int], threshold: float = 0.94, min_gap_s: float = 1.0, frame_shift_s: float = 0.04, smooth: int = 1) -> list[SCDEvent]:
    det = SpeakerChangeDetector(threshold, min_gap_s, frame_shift_s, smooth)
    for v, f in zip(tvectors, frames):
        det.push(v, f)
    return det.events


# ---------------------------------------------------------------------------
# gender


@dataclass
class ProfileBank:
    """Reference t-vectors per gender."""

    male: np.ndarray
    female: np.ndarray

    def __post_init__(self):
        self.male = np.atleast_2d(np.asarray(self.male, dtype=np.float64))
        self.female = np.atleast_2d(np.asarray(self.female, dtype=np.float64))
        if self.male.size == 0 or self.female.size == 0:
            raise ValueError("profile bank needs at least one profile per gender")
        if self.male.shape[1] != self.female.shape[1]:
            raise ValueError("male and female profiles differ in dimension")
        for bank in (self.male, self.female):
            if np.any(np.linalg.norm(bank, axis=1) == 0):
                raise ValueError("zero-norm profile vector")

    @property
    def dim(self) -> int:
        return self.male.shape[1]

    def profiles(self, gender: str) -> np.ndarray:
        return self.male if gender == "M" else self.female

    def to_json(self) -> dict:
        return {"male": self.male.tolist(), "female": self.female.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> ProfileBank:
        return cls(np.asarray(obj["male"]), np.asarray(obj["female"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> ProfileBank:
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def from_speakers(cls, speaker_tvectors: dict[str, Sequence[np.ndarray]], genders: dict[str, str]) -> ProfileBank:
        """One profile per speaker: the normalized mean of that speaker's t-vectors."""
        banks: dict[str, list] = {"M": [], "F": []}
        for spk in sorted(speaker_tvectors):
            vecs = np.asarray(speaker_tvectors[spk])
            if len(vecs):
                m = vecs.mean(axis=0)
                banks[genders[spk]].append(m / np.linalg.norm(m))
        return cls(np.asarray(banks["M"]), np.asarray(banks["F"]))


@dataclass
class GenderDecision:
    gender: str
    score: float
    margin: float


def _similarities(v: np.ndarray, bank: np.ndarray) -> np.ndarray:
    nv = np.linalg.norm(v)
    if nv == 0:
        raise ValueError("zero-norm t-vector")
    return np.clip(bank @ v / (np.linalg.norm(bank, axis=1) * nv), -1.0, 1.0)


def classify_gender_token(tvec: np.ndarray, profiles: ProfileBank, mode: str = "max") -> GenderDecision:
    """Closer gender by cosine; ``mode`` is ``max`` (best profile) or ``centroid``.  Ties go to M."""
    v = np.asarray(tvec, dtype=np.float64)
    if v.shape != (profiles.dim,):
        raise ValueError(f"t-vector has shape {v.shape}, profiles have dim {profiles.dim}")
    if mode == "max":
        sm = float(_similarities(v, profiles.male).max())
        sf = float(_similarities(v, profiles.female).max())
    elif mode == "centroid":
        sm = float(_similarities(v, profiles.male.mean(axis=0, keepdims=True))[0])
        sf = float(_similarities(v, profiles.female.mean(axis=0, keepdims=True))[0])
    else:
        raise ValueError(f"unknown gender mode {mode!r}")
    if sm >= sf:
        return GenderDecision("M", sm, sm - sf)
    return GenderDecision("F", sf, sf - sm)


def classify_gender_segment(decisions: Sequence[GenderDecision]) -> str:
    """Majority vote; a tie goes to the side holding the single most confident token."""
    if not decisions:
        raise ValueError("empty segment")
    n_m = sum(d.gender == "M" for d in decisions)
    n_f = len(decisions) - n_m
    if n_m != n_f:
        return "M" if n_m > n_f else "F"
    return max(decisions, key=lambda d: d.margin).gender


# ---------------------------------------------------------------------------
# annotated transcripts


@dataclass
class GenderTag:
    token_index: int
    gender: str
    score: float


@dataclass
class AnnotatedTranscript:
    tokens: list[str]
    changes: list[SCDEvent] = field(default_factory=list)
    genders: list[GenderTag] = field(default_factory=list)

    def segments(self) -> list[list[str]]:
        cuts = [e.token_index for e in self.changes]
        bounds = [0, *cuts, len(self.tokens)]
        return [self.tokens[a:b] for a, b in zip(bounds, bounds[1:])]

    def to_text(self) -> str:
        lines = []
        bounds = [0, *[e.token_index for e in self.changes], len(self.tokens)]
        for k, (a, b) in enumerate(zip(bounds, bounds[1:])):
            if k:
                lines.append(f"{SC_MARK}\t{self.changes[k - 1].timestamp_s:.2f} sec")
            if b > a:
                lines.append(" ".join(self.tokens[a:b]))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def parse_text(cls, text: str) -> tuple[list[str], list[tuple[int, float]]]:
        """Tokens and ``(token_index, timestamp_s)`` change marks from :meth:`to_text` output."""
        tokens: list[str] = []
        marks: list[tuple[int, float]] = []
        for line in text.splitlines():
            m = _SC_LINE.match(line)
            if m:
                marks.append((len(tokens), float(m.group(1))))
            elif line.startswith(SC_MARK):
                raise ValueError(f"malformed change line {line!r}")
            elif line:
                tokens.extend(line.split(" "))
        return tokens, marks

    def gender_sidecar(self) -> list[dict]:
        return [{"token_index": g.token_index, "gender": g.gender, "score": g.score} for g in self.genders]

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "changes": [e.to_json() for e in self.changes], "genders": self.gender_sidecar()}

    @classmethod
    def from_json(cls, obj: dict) -> AnnotatedTranscript:
        return cls(
            list(obj["tokens"]),
            [SCDEvent(**e) for e in obj["changes"]],
            [GenderTag(**g) for g in obj["genders"]],
        )


def annotate(tokens: Sequence[str], frames: Sequence[int], tvectors: Sequence[np.ndarray], cfg: SCDConfig, bank: ProfileBank | None = None, mode: str = "max") -> AnnotatedTranscript:
    """Merge a decoded hypothesis, its change events and per-token genders."""
    if not len(tokens) == len(frames) == len(tvectors):
        raise ValueError(f"{len(tokens)} tokens, {len(frames)} frames, {len(tvectors)} t-vectors")
    events = detect_changes(tvectors, frames, cfg.threshold, cfg.min_gap_s, cfg.frame_shift_s, cfg.smooth)
    tags = []
    if bank is not None:
        for u, v in enumerate(tvectors):
            d = classify_gender_token(v, bank, mode)
            tags.append(GenderTag(u, d.gender, d.score))
    return AnnotatedTranscript(list(tokens), events, tags)

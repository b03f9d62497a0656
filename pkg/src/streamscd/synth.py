"""Synthetic multi-speaker "audio" for desk-scale experiments.

A :class:`SynthWorld` fixes the codebooks shared by every dataset drawn
from it: word content vectors, the target-language token mappings and the
gender axis of the speaker space.  Feature frames are laid out as
``[content | onset | speaker]``:

* content: the current word's vector (zero in silence),
* onset: 1.0 on the first frame of each word,
* speaker: the speaker embedding scaled by ``speaker_gain``,

plus i.i.d. Gaussian noise.  Conversations concatenate single-speaker
segments, so reference change times sit exactly on segment boundaries.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import FRAME_SHIFT_S, FeatureSequence
from .transducer import Vocabulary

GENDERS = ("M", "F")


class InfeasibleSeparation(ValueError):
    pass


@dataclass(frozen=True)
class SynthWorld:
    n_words: int = 12
    content_dim: int = 12
    speaker_dim: int = 16
    languages: tuple[str, ...] = ("aa", "bb")
    seed: int = 1234

    @property
    def feature_dim(self) -> int:
        return self.content_dim + 1 + self.speaker_dim

    def _rng(self, tag: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, tag])

    @property
    def content(self) -> np.ndarray:
        v = self._rng(0).normal(size=(self.n_words, self.content_dim))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    @property
    def gender_axis(self) -> np.ndarray:
        g = self._rng(1).normal(size=self.speaker_dim)
        return g / np.linalg.norm(g)

    def word_maps(self) -> dict[str, np.ndarray]:
        """Source word -> target word per language; the first language copies."""
        rng = self._rng(2)
        maps = {}
        for k, lang in enumerate(self.languages):
            maps[lang] = np.arange(self.n_words) if k == 0 else rng.permutation(self.n_words)
        return maps

    @property
    def words(self) -> list[str]:
        return [f"w{i:02d}" for i in range(self.n_words)]

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.build(self.words, self.languages)

    def target_tokens(self, source_words, lang: str, vocab: Vocabulary | None = None) -> list[int]:
        vocab = vocab or self.vocabulary()
        m = self.word_maps()[lang]
        return [vocab[self.words[m[w]]] for w in source_words]


@dataclass
class Speaker:
    id: int
    gender: str
    embedding: np.ndarray

    def to_json(self) -> dict:
        return {"id": self.id, "gender": self.gender, "embedding": self.embedding.tolist()}

    @classmethod
    def from_json(cls, obj) -> Speaker:
        return cls(int(obj["id"]), obj["gender"], np.asarray(obj["embedding"], dtype=np.float64))


def make_speaker(world: SynthWorld, gender: str, rng: np.random.Generator, gender_strength: float, sid: int) -> Speaker:
    g = world.gender_axis
    r = rng.normal(size=world.speaker_dim)
    r -= (r @ g) * g
    r /= np.linalg.norm(r)
    sign = 1.0 if gender == "M" else -1.0
    e = sign * gender_strength * g + r
    return Speaker(sid, gender, e / np.linalg.norm(e))


def make_speakers(
    world: SynthWorld,
    n: int,
    rng: np.random.Generator,
    gender_strength: float = 1.0,
    max_pair_cos: float | None = None,
    first_id: int = 0,
    max_tries: int = 2000,
) -> list[Speaker]:
    """Draw ``n`` speakers, alternating genders, with pairwise cosine <= ``max_pair_cos``."""
    if n < 1:
        raise ValueError("need at least one speaker")
    if max_pair_cos is not None:
        # n unit vectors cannot all be more separated than a regular simplex
        if n > 1 and max_pair_cos < -1.0 / (n - 1):
            raise InfeasibleSeparation(f"{n} unit vectors cannot have pairwise cosine <= {max_pair_cos}")
        # two same-gender speakers share the gender component
        same = gender_strength**2 / (1 + gender_strength**2)
        if n > 2 and max_pair_cos < same - 1.0 / (1 + gender_strength**2):
            raise InfeasibleSeparation(f"max_pair_cos={max_pair_cos} unreachable with gender_strength={gender_strength}")
    out: list[Speaker] = []
    first = int(rng.integers(2))
    for k in range(n):
        gender = GENDERS[(first + k) % 2]
        for _ in range(max_tries):
            s = make_speaker(world, gender, rng, gender_strength, first_id + k)
            if max_pair_cos is None or all(float(s.embedding @ o.embedding) <= max_pair_cos for o in out):
                out.append(s)
                break
        else:
            raise InfeasibleSeparation(f"could not place speaker {k} with pairwise cosine <= {max_pair_cos}")
    return out


@dataclass
class SynthConfig:
    n_samples: int = 16
    n_speakers: tuple[int, int] = (2, 8)
    n_recordings: int = 5
    changes_per_sample: int = 1
    mean_duration_s: float = 5.0
    min_segment_s: float = 1.0
    word_frames: tuple[int, int] = (5, 9)
    max_gap_frames: int = 2
    max_pair_cos: float | None = 0.8
    gender_strength: float = 1.0
    speaker_gain: float = 1.0
    feature_noise: float = 0.1
    sid_noise: float = 0.1
    languages: tuple[str, ...] | None = None
    frame_shift_s: float = FRAME_SHIFT_S
    speaker_pool: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.speaker_pool is not None and self.speaker_pool < self.changes_per_sample + 1:
            raise ValueError("speaker pool too small for the requested changes")
        lo, hi = self.n_speakers
        if lo < 2 and self.changes_per_sample > 0:
            raise ValueError("a speaker change needs at least two speakers")
        if hi < lo or lo < 1:
            raise ValueError(f"bad n_speakers range {self.n_speakers}")
        if self.mean_duration_s <= 0 or self.min_segment_s <= 0:
            raise ValueError("durations must be positive")
        if (self.changes_per_sample + 1) * self.min_segment_s > self.mean_duration_s:
            raise ValueError("mean duration too short for the requested segments")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> SynthConfig:
        obj = dict(obj)
        for k in ("n_speakers", "word_frames"):
            if k in obj:
                obj[k] = tuple(obj[k])
        if obj.get("languages") is not None:
            obj["languages"] = tuple(obj["languages"])
        return cls(**obj)


# 688 concatenated samples, one change each, ~5 s average, up to eight speakers
TEST_PRESET = SynthConfig(n_samples=688, n_speakers=(2, 8), n_recordings=5, seed=688)


@dataclass
class ReferenceAnnotation:
    sample_id: str
    sc_times_s: list[float]
    genders: list[str] = field(default_factory=list)
    gender_segments: list[tuple[float, float, str]] = field(default_factory=list)

    def __post_init__(self):
        if any(b < a for a, b in zip(self.sc_times_s, self.sc_times_s[1:])):
            raise ValueError("sc_times_s must be sorted")
        if any(t < 0 for t in self.sc_times_s):
            raise ValueError("sc_times_s must be non-negative")

    def gender_at(self, time_s: float) -> str | None:
        for start, end, g in self.gender_segments:
            if start <= time_s < end:
                return g
        if self.gender_segments and time_s >= self.gender_segments[-1][1]:
            return self.gender_segments[-1][2]
        return None

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "sc_times_s": list(self.sc_times_s),
            "genders": list(self.genders),
            "gender_segments": [list(s) for s in self.gender_segments],
        }

    @classmethod
    def from_json(cls, obj: dict) -> ReferenceAnnotation:
        return cls(
            obj["sample_id"],
            [float(x) for x in obj["sc_times_s"]],
            list(obj.get("genders", [])),
            [(float(a), float(b), g) for a, b, g in obj.get("gender_segments", [])],
        )


@dataclass
class SynthSample:
    sample_id: str
    features: FeatureSequence
    lang: str
    source_words: list[int]
    targets: list[int]
    token_speakers: list[int]
    token_genders: list[str]
    word_onsets: list[int]
    frame_speakers: np.ndarray
    reference: ReferenceAnnotation

    def frame_embeddings(self, speakers: dict[int, Speaker]) -> np.ndarray:
        return np.stack([speakers[s].embedding for s in self.frame_speakers]) if len(self.frame_speakers) else np.zeros((0, 0))

    def meta_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "lang": self.lang,
            "source_words": self.source_words,
            "targets": self.targets,
            "token_speakers": self.token_speakers,
            "token_genders": self.token_genders,
            "word_onsets": self.word_onsets,
            "frame_speakers": [int(s) for s in self.frame_speakers],
        }


@dataclass
class SynthDataset:
    world: SynthWorld
    config: SynthConfig
    speakers: dict[int, Speaker]
    samples: list[SynthSample]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def write(self, root: str | Path) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        (root / "world.json").write_text(json.dumps(asdict(self.world), indent=2) + "\n")
        (root / "config.json").write_text(json.dumps(self.config.to_json(), indent=2) + "\n")
        (root / "speakers.json").write_text(json.dumps([s.to_json() for s in self.speakers.values()]) + "\n")
        self.world.vocabulary().write(root / "vocab.txt")
        with open(root / "reference.jsonl", "w", encoding="utf-8") as ref, open(root / "meta.jsonl", "w", encoding="utf-8") as meta:
            for s in self.samples:
                s.features.write(root / f"{s.sample_id}.feat")
                ref.write(json.dumps(s.reference.to_json()) + "\n")
                meta.write(json.dumps(s.meta_json()) + "\n")

    @classmethod
    def read(cls, root: str | Path) -> SynthDataset:
        root = Path(root)
        w = json.loads((root / "world.json").read_text())
        w["languages"] = tuple(w["languages"])
        world = SynthWorld(**w)
        cfg = SynthConfig.from_json(json.loads((root / "config.json").read_text()))
        speakers = {s.id: s for s in map(Speaker.from_json, json.loads((root / "speakers.json").read_text()))}
        refs = [ReferenceAnnotation.from_json(json.loads(l)) for l in (root / "reference.jsonl").read_text().splitlines() if l]
        metas = [json.loads(l) for l in (root / "meta.jsonl").read_text().splitlines() if l]
        samples = []
        for ref, m in zip(refs, metas):
            if ref.sample_id != m["sample_id"]:
                raise ValueError(f"reference/meta order mismatch at {ref.sample_id}")
            samples.append(
                SynthSample(
                    m["sample_id"],
                    FeatureSequence.read(root / f"{m['sample_id']}.feat"),
                    m["lang"],
                    m["source_words"],
                    m["targets"],
                    m["token_speakers"],
                    m["token_genders"],
                    m["word_onsets"],
                    np.asarray(m["frame_speakers"], dtype=np.int64),
                    ref,
                )
            )
        return cls(world, cfg, speakers, samples)


def _segment_frames(cfg: SynthConfig, rng: np.random.Generator) -> list[int]:
    n_seg = cfg.changes_per_sample + 1
    shift = cfg.frame_shift_s
    min_total = n_seg * cfg.min_segment_s
    extra_mean = cfg.mean_duration_s - min_total
    # gamma(k=4) keeps the mean exact and leaves a long tail of 30 s+ samples
    total = min_total + (rng.gamma(4.0, extra_mean / 4.0) if extra_mean > 0 else 0.0)
    weights = rng.dirichlet(np.full(n_seg, 4.0))
    secs = cfg.min_segment_s + weights * (total - min_total)
    return [max(1, int(round(s / shift))) for s in secs]


def _fill_segment(n_frames: int, cfg: SynthConfig, world: SynthWorld, rng: np.random.Generator):
    """Lay words and short gaps into ``n_frames``; returns (word ids, onsets, content rows, onset column)."""
    content = np.zeros((n_frames, world.content_dim))
    onset = np.zeros(n_frames)
    words, onsets = [], []
    lo, hi = cfg.word_frames
    t = 0
    while True:
        t += int(rng.integers(0, cfg.max_gap_frames + 1))
        length = int(rng.integers(lo, hi + 1))
        if t + length > n_frames:
            break
        w = int(rng.integers(world.n_words))
        content[t : t + length] = world.content[w] * rng.uniform(0.8, 1.2)
        onset[t] = 1.0
        words.append(w)
        onsets.append(t)
        t += length
    return words, onsets, content, onset


def synth_conversation(
    cfg: SynthConfig,
    world: SynthWorld,
    speakers: list[Speaker],
    rng: np.random.Generator,
    sample_id: str = "s0000",
    lang: str | None = None,
) -> SynthSample:
    """One concatenated sample with ``cfg.changes_per_sample`` speaker changes.

    Consecutive segments always switch speaker; segment speakers are drawn
    from ``speakers``.
    """
    if cfg.changes_per_sample > 0 and len(speakers) < 2:
        raise ValueError("need two speakers for a change")
    vocab = world.vocabulary()
    langs = cfg.languages or world.languages
    lang = lang or langs[int(rng.integers(len(langs)))]
    seg_frames = _segment_frames(cfg, rng)
    order = [speakers[int(rng.integers(len(speakers)))]]
    for _ in seg_frames[1:]:
        others = [s for s in speakers if s.id != order[-1].id]
        order.append(others[int(rng.integers(len(others)))])

    blocks, frame_spk = [], []
    src, onsets, tok_spk, tok_gen = [], [], [], []
    gender_segments, sc_times = [], []
    start = 0
    shift = cfg.frame_shift_s
    for n, spk in zip(seg_frames, order):
        words, w_on, content, onset = _fill_segment(n, cfg, world, rng)
        spk_part = np.tile(spk.embedding * cfg.speaker_gain, (n, 1))
        blocks.append(np.concatenate([content, onset[:, None], spk_part], axis=1))
        frame_spk.extend([spk.id] * n)
        src += words
        onsets += [start + o for o in w_on]
        tok_spk += [spk.id] * len(words)
        tok_gen += [spk.gender] * len(words)
        if start:
            sc_times.append(start * shift)
        gender_segments.append((start * shift, (start + n) * shift, spk.gender))
        start += n
    frames = np.concatenate(blocks) + rng.normal(0.0, cfg.feature_noise, size=(start, world.feature_dim))
    # f32-representable so FEAT round trips are lossless
    frames = frames.astype(np.float32).astype(np.float64)
    ref = ReferenceAnnotation(sample_id, sc_times, list(tok_gen), gender_segments)
    return SynthSample(
        sample_id,
        FeatureSequence(frames, shift),
        lang,
        src,
        world.target_tokens(src, lang, vocab),
        tok_spk,
        tok_gen,
        onsets,
        np.asarray(frame_spk, dtype=np.int64),
        ref,
    )


def synth_dataset(cfg: SynthConfig, world: SynthWorld | None = None, speakers: list[Speaker] | None = None) -> SynthDataset:
    """Draw ``cfg.n_samples`` samples.

    Without ``speakers``, fresh speaker pools are drawn per recording
    (``n_recordings`` pools of ``n_speakers`` people each) and samples are
    spread round-robin over recordings.  With ``speakers`` or
    ``cfg.speaker_pool``, every sample draws from one fixed pool.
    """
    world = world or SynthWorld()
    rng = np.random.default_rng(cfg.seed)
    if speakers is None and cfg.speaker_pool is not None:
        speakers = make_speakers(world, cfg.speaker_pool, rng, cfg.gender_strength, cfg.max_pair_cos)
    if speakers is not None:
        pools = [list(speakers)]
    else:
        pools = []
        next_id = 0
        for _ in range(cfg.n_recordings):
            lo, hi = cfg.n_speakers
            n = int(rng.integers(lo, hi + 1))
            pool = make_speakers(world, n, rng, cfg.gender_strength, cfg.max_pair_cos, first_id=next_id)
            next_id += n
            pools.append(pool)
    samples = [
        synth_conversation(cfg, world, pools[i % len(pools)], rng, sample_id=f"s{i:04d}")
        for i in range(cfg.n_samples)
    ]
    all_speakers = {s.id: s for pool in pools for s in pool}
    return SynthDataset(world, cfg, all_speakers, samples)

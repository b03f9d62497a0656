"""End-to-end decoding: ST hypothesis, t-vectors, change events and genders."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoder import EncoderCache, FeatureSequence, iter_chunks
from .scd import (
    AnnotatedTranscript,
    GenderTag,
    ProfileBank,
    SCDConfig,
    SCDEvent,
    classify_gender_token,
    detect_changes,
)
from .transducer import BeamDecoder, GreedyDecoder, Hypothesis, STModel
from .tvector import SpeakerEncoderCache, TVector, TVectorModel


@dataclass
class DecodeResult:
    hypothesis: Hypothesis
    tvectors: list[TVector]
    events: list[SCDEvent]
    genders: list[GenderTag] = field(default_factory=list)

    def transcript(self, st: STModel) -> AnnotatedTranscript:
        return AnnotatedTranscript(st.vocab.decode(self.hypothesis.tokens), list(self.events), list(self.genders))


def _finish(hyp: Hypothesis, tvecs: list[TVector], scd: SCDConfig, bank: ProfileBank | None, mode: str) -> DecodeResult:
    vecs = [t.vector for t in tvecs]
    events = detect_changes(vecs, hyp.frame_indices, scd.threshold, scd.min_gap_s, scd.frame_shift_s, scd.smooth)
    genders = []
    if bank is not None:
        for t in tvecs:
            d = classify_gender_token(t.vector, bank, mode)
            genders.append(GenderTag(t.token_index, d.gender, d.score))
    return DecodeResult(hyp, tvecs, events, genders)


def decode_offline(
    st: STModel,
    tv: TVectorModel,
    feat: FeatureSequence,
    sid: np.ndarray,
    lid: int,
    scd: SCDConfig | None = None,
    bank: ProfileBank | None = None,
    gender_mode: str = "max",
    beam: int = 1,
    max_symbols: int = 3,
) -> DecodeResult:
    """Whole-utterance decode using the masked (non-incremental) encoders."""
    scd = scd or SCDConfig(frame_shift_s=feat.frame_shift_s)
    enc = st.encode(feat.frames)
    scorer = st.scorer(lid)
    dec = BeamDecoder(scorer, beam, max_symbols) if beam > 1 else GreedyDecoder(scorer, max_symbols)
    dec.push(scorer.frames(enc.hidden))
    hyp = dec.best() if beam > 1 else dec.result()
    spk = tv.encoder.forward(sid, enc.layer_outputs)
    return _finish(hyp, tv.tvectors(spk, hyp.tokens, hyp.frame_indices), scd, bank, gender_mode)


class StreamingSession:
    """Chunk-by-chunk decoding of one stream.

    Greedy search (``beam=1``) emits tokens, t-vectors and change events
    incrementally.  With a beam, t-vectors follow the current best
    hypothesis: when it changes, they are recomputed from the longest
    prefix it shares with the previous best.
    """

    def __init__(self, st: STModel, tv: TVectorModel, lid: int, scd: SCDConfig | None = None, bank: ProfileBank | None = None, gender_mode: str = "max", beam: int = 1, max_symbols: int = 3):
        if lid not in st.vocab.lid_ids:
            raise KeyError(f"token {lid} is not a language-ID token")
        self.st, self.tv = st, tv
        self.scd = scd or SCDConfig()
        self.bank, self.gender_mode = bank, gender_mode
        self.beam = beam
        self.scorer = st.scorer(lid)
        self.decoder = BeamDecoder(self.scorer, beam, max_symbols) if beam > 1 else GreedyDecoder(self.scorer, max_symbols)
        self.detector = self.scd.detector()
        self.enc_cache = EncoderCache.empty(st.cfg.chunk)
        self.spk_cache = SpeakerEncoderCache.empty(st.cfg.chunk)
        self.spk_frames: list[np.ndarray] = []
        self.tvecs: list[TVector] = []
        self._states = [tv.decoder.initial_state()]  # decoder state before token u
        self._keys: list[tuple[int, int]] = []

    def _sync(self, tokens: Sequence[int], frames: Sequence[int]) -> list[TVector]:
        keys = list(zip(tokens, frames))
        n = 0
        while n < min(len(keys), len(self._keys)) and keys[n] == self._keys[n]:
            n += 1
        del self.tvecs[n:], self._keys[n:], self._states[n + 1 :]
        spk = self.spk_frames
        new = []
        for u in range(n, len(keys)):
            tok, f = keys[u]
            vec, state = self.tv.decoder.step(spk[f], self.tv.token_embedding(tok), self._states[-1])
            t = TVector(vec, u, f, tok)
            self.tvecs.append(t)
            self._keys.append((tok, f))
            self._states.append(state)
            new.append(t)
        return new

    def push(self, feat_chunk: np.ndarray, sid_chunk: np.ndarray) -> tuple[list[TVector], list[SCDEvent]]:
        """Feed one chunk; return the t-vectors and events it produced."""
        out, self.enc_cache = self.st.encoder.stream(feat_chunk, self.enc_cache)
        spk, self.spk_cache = self.tv.encoder.stream(sid_chunk, out.layer_outputs, self.spk_cache)
        self.spk_frames.extend(spk)
        self.decoder.push(self.scorer.frames(out.hidden))
        hyp = self.hypothesis()
        new = self._sync(hyp.tokens, hyp.frame_indices)
        events = []
        if self.beam == 1:
            for t in new:
                e = self.detector.push(t.vector, t.frame_index)
                if e is not None:
                    events.append(e)
        return new, events

    def hypothesis(self) -> Hypothesis:
        return self.decoder.best() if self.beam > 1 else self.decoder.result()

    def result(self) -> DecodeResult:
        return _finish(self.hypothesis(), list(self.tvecs), self.scd, self.bank, self.gender_mode)


def decode_streaming(
    st: STModel,
    tv: TVectorModel,
    feat: FeatureSequence,
    sid: np.ndarray,
    lid: int,
    scd: SCDConfig | None = None,
    bank: ProfileBank | None = None,
    gender_mode: str = "max",
    beam: int = 1,
    max_symbols: int = 3,
) -> DecodeResult:
    scd = scd or SCDConfig(frame_shift_s=feat.frame_shift_s)
    sess = StreamingSession(st, tv, lid, scd, bank, gender_mode, beam, max_symbols)
    U = st.cfg.chunk.chunk_frames
    for a, chunk in zip(range(0, len(feat), U), iter_chunks(feat.frames, U)):
        sess.push(chunk, sid[a : a + len(chunk)])
    return sess.result()

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st_

from streamscd.scd import (
    AnnotatedTranscript,
    GenderDecision,
    ProfileBank,
    SCDConfig,
    SCDEvent,
    SpeakerChangeDetector,
    annotate,
    classify_gender_segment,
    classify_gender_token,
    cosine_similarity,
    detect_changes,
)

E = np.eye(4)


def test_cosine_examples():
    v = np.array([1.0, 2.0, -3.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0)
    assert cosine_similarity(E[0], E[1]) == 0.0
    assert cosine_similarity(v, -v) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        cosine_similarity(np.zeros(3), v)


def test_constant_stream_has_no_events():
    v = np.array([0.3, -0.2, 0.9])
    for th in (0.1, 0.5, 0.94, 0.999):
        assert detect_changes([v] * 20, list(range(20)), th, 0.0) == []


def test_two_orthogonal_clusters_give_one_event():
    vecs = [E[0]] * 5 + [E[1]] * 6
    frames = list(range(0, 110, 10))
    for gap in (0.0, 1.0, 100.0):
        ev = detect_changes(vecs, frames, 0.5, gap)
        assert [(e.token_index, e.after_token_index, e.frame_index) for e in ev] == [(5, 4, 50)]
        assert ev[0].timestamp_s == 50 * 0.04 and ev[0].similarity == 0.0


def test_frame_217_gives_8_68():
    ev = detect_changes([E[0], E[1]], [3, 217], 0.94, 1.0)
    assert ev[0].timestamp_s == 217 * 0.04
    assert f"{ev[0].timestamp_s:.2f}" == "8.68"


def test_min_gap_is_strict():
    vecs = [E[0], E[1], E[0], E[1]]
    # events at 1.0 s, 2.0 s, 2.4 s
    ev = detect_changes(vecs, [0, 25, 50, 60], 0.5, 1.0)
    assert [e.frame_index for e in ev] == [25, 50]


def test_smoothing_averages_similarities():
    vecs = [E[0], E[0], E[0], E[1], E[1]]
    det = SpeakerChangeDetector(0.6, 0.0, smooth=3)
    for f, v in enumerate(vecs):
        det.push(v, f)
    assert det.similarities == pytest.approx([1.0, 1.0, 2 / 3, 2 / 3])
    assert det.events == []
    with pytest.raises(ValueError):
        SpeakerChangeDetector(smooth=0)


def test_detector_decision_ignores_future_tokens():
    rng = np.random.default_rng(0)
    vecs = rng.standard_normal((12, 5))
    full = detect_changes(vecs, list(range(0, 120, 10)), 0.3, 0.0)
    for u in range(1, 12):
        part = detect_changes(vecs[: u + 1], list(range(0, 10 * (u + 1), 10)), 0.3, 0.0)
        assert part == [e for e in full if e.token_index <= u]


@settings(max_examples=100, deadline=None)
@given(st_.integers(0, 2**32 - 1), st_.floats(0.01, 0.99), st_.floats(0.01, 0.99))
def test_events_nested_in_threshold(seed, a, b):
    lo, hi = sorted((a, b))
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((15, 3)) + 1.0
    frames = list(range(15))
    ev_lo = {e.token_index for e in detect_changes(vecs, frames, lo, 0.0)}
    ev_hi = {e.token_index for e in detect_changes(vecs, frames, hi, 0.0)}
    assert ev_lo <= ev_hi


@pytest.mark.parametrize("bad", [dict(threshold=0.0), dict(threshold=1.5), dict(min_gap_s=-1.0)])
def test_scd_config_validation(bad):
    with pytest.raises(ValueError):
        SCDConfig(**bad)


# ---------------------------------------------------------------------------
# gender


BANK = ProfileBank(np.array([E[0], E[2]]), np.array([E[1]]))


def test_gender_token_examples():
    d = classify_gender_token(E[0], BANK)
    assert d.gender == "M" and d.score == pytest.approx(1.0)
    assert classify_gender_token(E[1], BANK).gender == "F"
    tie = classify_gender_token(E[0] + E[1], BANK)
    assert tie.gender == "M" and tie.margin == 0.0
    assert classify_gender_token(E[1] + 0.1 * E[0], BANK, "centroid").gender == "F"
    with pytest.raises(ValueError):
        classify_gender_token(E[0], BANK, "median")
    with pytest.raises(ValueError):
        classify_gender_token(np.ones(3), BANK)


def test_centroid_differs_from_max():
    # best single male profile matches exactly, but the male centroid (cos 0.71) trails the female one (0.8)
    bank = ProfileBank(np.array([E[0], E[2]]), np.array([0.8 * E[0] + 0.6 * E[1]]))
    assert classify_gender_token(E[0], bank, "max").gender == "M"
    assert classify_gender_token(E[0], bank, "centroid").gender == "F"


def test_gender_scale_invariance():
    rng = np.random.default_rng(1)
    bank = ProfileBank(rng.standard_normal((3, 6)), rng.standard_normal((4, 6)))
    for _ in range(200):
        v = rng.standard_normal(6)
        c = float(np.exp(rng.uniform(-6, 6)))
        for mode in ("max", "centroid"):
            assert classify_gender_token(c * v, bank, mode).gender == classify_gender_token(v, bank, mode).gender


def test_gender_segment_votes():
    M = lambda m: GenderDecision("M", 0.5, m)  # noqa: E731
    F = lambda m: GenderDecision("F", 0.5, m)  # noqa: E731
    assert classify_gender_segment([M(0.1)] * 4) == "M"
    assert classify_gender_segment([M(0.1)] * 3 + [F(0.9)] * 2) == "M"
    assert classify_gender_segment([M(0.1), M(0.2), F(0.05), F(0.7)]) == "F"
    with pytest.raises(ValueError):
        classify_gender_segment([])


def test_profile_bank_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        ProfileBank(np.zeros((0, 3)), np.ones((1, 3)))
    with pytest.raises(ValueError):
        ProfileBank(np.ones((1, 3)), np.ones((1, 4)))
    with pytest.raises(ValueError):
        ProfileBank(np.zeros((1, 3)), np.ones((1, 3)))
    BANK.save(tmp_path / "p.json")
    back = ProfileBank.load(tmp_path / "p.json")
    assert np.array_equal(back.male, BANK.male) and np.array_equal(back.female, BANK.female)


def test_profiles_from_speakers():
    bank = ProfileBank.from_speakers({"a": [E[0], E[0] + E[1]], "b": [2 * E[2]]}, {"a": "M", "b": "F"})
    np.testing.assert_allclose(bank.male, [[2, 1, 0, 0] / np.sqrt(5)])
    np.testing.assert_allclose(bank.female, [E[2]])


# ---------------------------------------------------------------------------
# transcripts


def _event(u, frame):
    return SCDEvent(u, frame, frame * 0.04, 0.1)


def test_transcript_layout():
    tokens = [f"w{i}" for i in range(15)]
    tr = AnnotatedTranscript(tokens, [_event(13, 217)])
    assert tr.to_text() == " ".join(tokens[:13]) + "\n<SC>\t8.68 sec\n" + " ".join(tokens[13:]) + "\n"
    assert tr.segments() == [tokens[:13], tokens[13:]]
    assert AnnotatedTranscript([]).to_text() == ""


def test_transcript_round_trips():
    tokens = ["a", "b", "c", "d"]
    events = [_event(1, 30), _event(3, 90)]
    tr = annotate(tokens, [5, 30, 60, 90], [E[0], E[1], E[1], E[2]], SCDConfig(0.5, 0.0), BANK)
    assert [(e.token_index, e.frame_index, e.timestamp_s) for e in tr.changes] == [(e.token_index, e.frame_index, e.timestamp_s) for e in events]
    back_tokens, marks = AnnotatedTranscript.parse_text(tr.to_text())
    assert back_tokens == tokens and marks == [(1, 1.2), (3, 3.6)]
    again = AnnotatedTranscript.from_json(tr.to_json())
    assert again == tr
    assert [g["gender"] for g in tr.gender_sidecar()] == ["M", "F", "F", "M"]
    with pytest.raises(ValueError):
        AnnotatedTranscript.parse_text("a\n<SC> 1.2 sec\n")


def test_annotate_errors_and_empty():
    assert annotate([], [], [], SCDConfig()).tokens == []
    with pytest.raises(ValueError):
        annotate(["a"], [0, 1], [E[0]], SCDConfig())

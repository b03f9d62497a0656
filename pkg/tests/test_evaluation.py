import json

import numpy as np
import pytest

from oracles import exhaustive_max_matching
from streamscd.evaluation import (
    Counts,
    MatchResult,
    ScoredSample,
    compute_prf,
    evaluate_events,
    f1_score,
    gender_accuracy,
    match_detections,
    read_report_tsv,
    report_json,
    report_tsv,
    threshold_sweep,
    write_reports,
)
from streamscd.synth import (
    InfeasibleSeparation,
    ReferenceAnnotation,
    SynthConfig,
    SynthWorld,
    make_speakers,
    synth_dataset,
)

# ---------------------------------------------------------------------------
# matching and metrics


def test_identical_sets_fully_matched():
    m = match_detections([1.0, 5.0, 9.5], [1.0, 5.0, 9.5])
    assert len(m.matched) == 3 and not m.false_positives and not m.misses
    assert compute_prf(m).precision == compute_prf(m).recall == 1.0


def test_tolerance_boundary_is_inclusive():
    assert match_detections([10.0], [12.0], 2.0).matched == [(10.0, 12.0)]
    m = match_detections([10.0], [12.5], 2.0)
    assert m.false_positives == [10.0] and m.misses == [12.5]


def test_matching_errors():
    with pytest.raises(ValueError):
        match_detections([2.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        match_detections([1.0], [3.0, 2.0])
    with pytest.raises(ValueError):
        match_detections([1.0], [1.0], -0.1)


def test_greedy_matching_is_one_to_one_and_maximum():
    rng = np.random.default_rng(0)
    for _ in range(200):
        hyp = sorted(rng.uniform(0, 10, int(rng.integers(0, 6))).round(1))
        ref = sorted(rng.uniform(0, 10, int(rng.integers(0, 6))).round(1))
        m = match_detections(hyp, ref, 1.0)
        assert all(abs(h - r) <= 1.0 for h, r in m.matched)
        assert sorted([h for h, _ in m.matched] + m.false_positives) == hyp
        assert sorted([r for _, r in m.matched] + m.misses) == ref
        assert len(m.matched) == exhaustive_max_matching(hyp, ref, 1.0)


def test_prf_edge_cases():
    assert compute_prf(MatchResult()) == compute_prf(Counts(0, 0, 0))
    empty = compute_prf(MatchResult())
    assert (empty.recall, empty.precision) == (1.0, 1.0)
    no_hyp = compute_prf(match_detections([], [3.0]))
    assert (no_hyp.recall, no_hyp.precision, no_hyp.f1) == (0.0, 0.0, 0.0)
    no_ref = compute_prf(match_detections([3.0], []))
    assert (no_ref.recall, no_ref.precision, no_ref.f1) == (1.0, 0.0, 0.0)
    assert f1_score(0.0, 0.0) == 0.0


@pytest.mark.parametrize("r,p,f1", [(0.89, 0.55, 0.68), (0.49, 0.74, 0.59), (0.85, 0.69, 0.76)])
def test_f1_spot_checks(r, p, f1):
    assert round(f1_score(p, r), 2) == f1


def test_counts_pool_across_samples():
    a = match_detections([1.0], [1.5])
    b = match_detections([4.0, 9.0], [20.0])
    c = Counts().add(a).add(b)
    assert (c.matches, c.n_hyp, c.n_ref) == (1, 3, 2)
    m = compute_prf(c)
    assert (m.recall, m.precision) == (0.5, 1 / 3)


def test_gender_accuracy():
    assert gender_accuracy(["M", "F"], ["M", "F"]) == 1.0
    assert gender_accuracy(["M", "M", "F", "F"], ["M", "F", "M", "F"]) == 0.5
    with pytest.raises(ValueError):
        gender_accuracy(["M"], ["M", "F"])
    with pytest.raises(ValueError):
        gender_accuracy([], [])


def test_evaluate_events_requires_same_ids():
    m, c = evaluate_events({"a": [2.0], "b": []}, {"a": [1.0], "b": [5.0]})
    assert (c.matches, c.n_hyp, c.n_ref) == (1, 1, 2)
    assert (m.recall, m.precision) == (0.5, 1.0)
    with pytest.raises(KeyError):
        evaluate_events({"a": []}, {"a": [], "b": [1.0]})


# ---------------------------------------------------------------------------
# sweeps and reports


def _scored(rng, n_tokens=12, dim=4):
    vecs = rng.standard_normal((n_tokens, dim))
    frames = sorted(rng.choice(200, n_tokens, replace=False).tolist())
    return ScoredSample("x", vecs, frames, [frames[n_tokens // 2] * 0.04])


def test_sweep_threshold_below_all_similarities():
    s = ScoredSample("x", np.ones((5, 3)) + 0.01 * np.eye(5, 3), [0, 10, 20, 30, 40], [0.8])
    (row,) = threshold_sweep([s], [0.5])
    assert row.n_hyp == 0 and row.recall == 0.0


def test_sweep_threshold_one_flags_every_pair():
    s = _scored(np.random.default_rng(0))
    (row,) = threshold_sweep([s], [1.0])
    assert row.n_hyp == len(s.frames) - 1 and row.recall == 1.0 and row.precision < 0.5


def test_sweep_recall_non_decreasing():
    rng = np.random.default_rng(1)
    samples = [_scored(rng) for _ in range(20)]
    rows = threshold_sweep(samples, np.linspace(0.05, 1.0, 20))
    recalls = [r.recall for r in rows]
    hyps = [r.n_hyp for r in rows]
    assert recalls == sorted(recalls) and hyps == sorted(hyps)
    assert all(0.0 <= v <= 1.0 for r in rows for v in (r.recall, r.precision, r.f1))
    with pytest.raises(ValueError):
        threshold_sweep(samples, [])


def test_tsv_and_json_twins(tmp_path):
    rng = np.random.default_rng(2)
    rows = threshold_sweep([_scored(rng) for _ in range(5)], [0.3, 0.6, 0.9])
    tsv, js = write_reports(rows, tmp_path / "sweep")
    a = read_report_tsv(tsv.read_text())
    b = json.loads(js.read_text())
    assert list(a[0]) == ["threshold", "recall", "precision", "f1"]
    for x, y in zip(a, b):
        assert all(x[k] == y[k] for k in x)
    assert report_tsv(rows) == tsv.read_text() and report_json(rows) == js.read_text()


# ---------------------------------------------------------------------------
# synthetic conversations


def test_reference_annotation_invariants():
    with pytest.raises(ValueError):
        ReferenceAnnotation("s", [2.0, 1.0], [], [])
    with pytest.raises(ValueError):
        ReferenceAnnotation("s", [-1.0], [], [])
    ref = ReferenceAnnotation("s", [2.0], ["M", "F"], [(0.0, 2.0, "M"), (2.0, 3.0, "F")])
    assert ref.gender_at(1.0) == "M" and ref.gender_at(2.5) == "F"
    assert ReferenceAnnotation.from_json(ref.to_json()) == ref


def test_synth_is_deterministic(tmp_path):
    cfg = SynthConfig(n_samples=6, seed=3)
    synth_dataset(cfg).write(tmp_path / "a")
    synth_dataset(cfg).write(tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_read_back(tmp_path):
    ds = synth_dataset(SynthConfig(n_samples=4, seed=4))
    ds.write(tmp_path)
    back = type(ds).read(tmp_path)
    assert back.config == ds.config and set(back.speakers) == set(ds.speakers)
    for a, b in zip(ds, back):
        assert np.array_equal(a.features.frames, b.features.frames)
        assert a.reference == b.reference and a.targets == b.targets


def test_synth_structure():
    ds = synth_dataset(SynthConfig(n_samples=30, seed=5))
    for s in ds:
        assert len(s.reference.sc_times_s) == 1
        t = s.reference.sc_times_s[0]
        k = round(t / 0.04)
        assert s.frame_speakers[k - 1] != s.frame_speakers[k]
        assert len(s.targets) == len(s.source_words) == len(s.token_speakers) == len(s.token_genders)
        assert s.reference.genders == s.token_genders
        for k, on in enumerate(s.word_onsets):
            assert s.frame_speakers[on] == s.token_speakers[k]
            assert ds.speakers[s.token_speakers[k]].gender == s.token_genders[k]


def test_durations_average_near_mean():
    cfg = SynthConfig(n_samples=1000, seed=6)
    ds = synth_dataset(cfg)
    mean = np.mean([len(s.features) * cfg.frame_shift_s for s in ds])
    assert abs(mean - cfg.mean_duration_s) <= 0.1 * cfg.mean_duration_s


def test_speaker_separation_and_infeasible():
    world = SynthWorld()
    spk = make_speakers(world, 8, np.random.default_rng(7), 1.0, 0.8)
    emb = np.stack([s.embedding for s in spk])
    cos = emb @ emb.T
    assert np.allclose(np.diag(cos), 1.0) and (cos[~np.eye(8, dtype=bool)] <= 0.8).all()
    with pytest.raises(InfeasibleSeparation):
        make_speakers(world, 4, np.random.default_rng(0), 1.0, -0.5)
    with pytest.raises(InfeasibleSeparation):
        make_speakers(world, 3, np.random.default_rng(0), 3.0, 0.1)


@pytest.mark.parametrize("bad", [dict(n_speakers=(1, 3)), dict(n_speakers=(4, 3)), dict(mean_duration_s=0.0), dict(mean_duration_s=1.5)])
def test_synth_config_validation(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)

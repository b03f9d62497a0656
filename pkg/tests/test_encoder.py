import numpy as np
import pytest

from streamscd.encoder import (
    PRESETS,
    ChunkConfig,
    EncoderCache,
    FeatureSequence,
    StreamingEncoder,
    build_chunk_mask,
    encode_chunked,
    reception_field,
)
from streamscd.nn import ShapeError

CFG = ChunkConfig(chunk_frames=2, left_chunks=1, layers=2, model_dim=8, heads=2)


def test_mask_small_example():
    m = build_chunk_mask(5, CFG).astype(int)
    expect = [
        [1, 1, 0, 0, 0],
        [1, 1, 0, 0, 0],
        [1, 1, 1, 1, 0],
        [1, 1, 1, 1, 0],
        [0, 0, 1, 1, 1],
    ]
    assert m.tolist() == expect


def test_mask_b0_is_block_diagonal_and_diagonal_always_visible():
    m = build_chunk_mask(7, ChunkConfig(chunk_frames=3, left_chunks=0, layers=1, model_dim=8, heads=2))
    assert m[2, 0] and not m[3, 2] and m[6, 6]
    assert np.all(np.diag(build_chunk_mask(11, CFG)))


def test_reception_field_law_and_errors():
    cfg = ChunkConfig(chunk_frames=3, left_chunks=1, layers=2, model_dim=8, heads=2)
    assert reception_field(1, 9, cfg) == (6, 11)
    assert reception_field(2, 9, cfg) == (3, 11)
    assert reception_field(5, 9, cfg) == (0, 11)
    assert reception_field(1, 10, cfg, T=11) == (6, 10)
    with pytest.raises(ValueError):
        reception_field(0, 3, cfg)


@pytest.mark.parametrize("bad", [dict(chunk_frames=0), dict(left_chunks=-1), dict(layers=0), dict(model_dim=6, heads=4)])
def test_chunk_config_validation(bad):
    with pytest.raises(ValueError):
        ChunkConfig(**bad)


def test_presets():
    assert PRESETS["full"].chunk_frames * 0.04 == pytest.approx(1.0)
    assert PRESETS["full"].left_chunks == 18 and PRESETS["full"].layers == 12


@pytest.mark.parametrize("T", [0, 1, 4, 7, 13])
def test_streaming_matches_offline(T):
    rng = np.random.default_rng(T)
    enc = StreamingEncoder(CFG, 3, rng)
    x = rng.standard_normal((T, 3))
    a, b = enc.forward(x), encode_chunked(x, enc)
    assert a.hidden.shape == b.hidden.shape == (T, 8)
    np.testing.assert_allclose(a.hidden, b.hidden, atol=1e-12)
    for la, lb in zip(a.layer_outputs, b.layer_outputs):
        np.testing.assert_allclose(la, lb, atol=1e-12)


def test_cache_keeps_only_left_chunks():
    rng = np.random.default_rng(0)
    enc = StreamingEncoder(CFG, 3, rng)
    cache = EncoderCache.empty(CFG)
    for _ in range(4):
        _, cache = enc.stream(rng.standard_normal((2, 3)), cache)
    assert cache.frames_consumed == 8
    assert all(cache.cached_frames(k) == 2 for k in range(CFG.layers))


def test_stream_errors():
    rng = np.random.default_rng(0)
    enc = StreamingEncoder(CFG, 3, rng)
    with pytest.raises(ValueError):
        enc.stream(np.zeros((3, 3)), EncoderCache.empty(CFG))
    with pytest.raises(ValueError):
        enc.stream(np.zeros((2, 3)), EncoderCache.empty(ChunkConfig(chunk_frames=2, layers=3, model_dim=8, heads=2)))
    _, cache = enc.stream(np.zeros((1, 3)), EncoderCache.empty(CFG))
    with pytest.raises(ValueError):
        enc.stream(np.zeros((1, 3)), cache)
    with pytest.raises(ShapeError):
        enc.forward(np.zeros((4, 2)))


def test_feat_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    f = FeatureSequence(rng.standard_normal((6, 4)).astype(np.float32), 0.04)
    f.write(tmp_path / "a.feat")
    g = FeatureSequence.read(tmp_path / "a.feat")
    assert g.frame_shift_s == 0.04 and len(g) == 6 and g.dim == 4
    assert np.array_equal(g.frames, f.frames)
    assert g.timestamp(217) == 217 * 0.04


def test_feat_errors(tmp_path):
    (tmp_path / "x.feat").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        FeatureSequence.read(tmp_path / "x.feat")
    FeatureSequence(np.zeros((2, 2))).write(tmp_path / "y.feat")
    (tmp_path / "z.feat").write_bytes((tmp_path / "y.feat").read_bytes()[:-4])
    with pytest.raises(ValueError):
        FeatureSequence.read(tmp_path / "z.feat")
    with pytest.raises(ShapeError):
        FeatureSequence(np.zeros(3))
    with pytest.raises(ValueError):
        FeatureSequence(np.zeros((1, 1)), 0.0)

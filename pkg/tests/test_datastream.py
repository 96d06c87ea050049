import json

import numpy as np
import pytest

from ccotta.datastream import (ALL_KINDS, CORRUPTION_LEVELS, DEFAULT_KINDS, GRADUAL_PATTERN, Batch,
                               DomainStage, SourceSpec, StreamConfig, build_stream, clean_pool,
                               corrupt, corruption_level, iter_batches, make_source, random_orders,
                               stage_data)


def test_source_spec_validation():
    with pytest.raises(ValueError):
        SourceSpec(num_classes=1)
    with pytest.raises(ValueError):
        SourceSpec(noise=0.0)


def test_source_is_balanced_and_deterministic():
    spec = SourceSpec(num_classes=5, input_dim=4, samples_per_class=30)
    x, y = make_source(spec)
    assert x.shape == (150, 4)
    assert np.bincount(y).tolist() == [30] * 5
    x2, y2 = make_source(spec)
    assert x.tobytes() == x2.tobytes() and y.tobytes() == y2.tobytes()
    x3, _ = make_source(SourceSpec(num_classes=5, input_dim=4, samples_per_class=30, seed=1))
    assert not np.array_equal(x, x3)


def test_at_least_seven_default_types():
    assert len(DEFAULT_KINDS) == 7
    assert set(DEFAULT_KINDS) == {"gaussian_noise", "uniform_noise", "feature_blur", "contrast_scale",
                                  "rotation", "feature_dropout", "offset_shift"}


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_levels_strictly_monotone(kind):
    levels = np.array(CORRUPTION_LEVELS[kind])
    steps = np.diff(levels)
    assert np.all(steps > 0) or np.all(steps < 0)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_distortion_grows_with_severity(kind):
    x, _ = make_source(SourceSpec(samples_per_class=50))
    dist = [np.mean(np.linalg.norm(corrupt(x, kind, s, 0) - x, axis=1)) for s in range(1, 6)]
    assert all(b > a for a, b in zip(dist, dist[1:])), dist


def test_corruption_errors():
    with pytest.raises(ValueError, match="unknown corruption"):
        corruption_level("fog", 3)
    with pytest.raises(ValueError, match="severity"):
        corruption_level("rotation", 6)
    with pytest.raises(ValueError):
        DomainStage("rotation", 0)


def test_corruption_is_deterministic():
    x = np.random.default_rng(0).normal(size=(10, 16))
    for kind in ALL_KINDS:
        assert corrupt(x, kind, 3, 7).tobytes() == corrupt(x, kind, 3, 7).tobytes()


def test_rotation_preserves_norms_and_offset_is_a_translation():
    x = np.random.default_rng(0).normal(size=(10, 16))
    np.testing.assert_allclose(np.linalg.norm(corrupt(x, "rotation", 5, 1), axis=1),
                               np.linalg.norm(x, axis=1), rtol=1e-12)
    d = corrupt(x, "offset_shift", 2, 1) - x
    np.testing.assert_allclose(d, np.tile(d[0], (10, 1)), atol=1e-12)
    assert np.linalg.norm(d[0]) == pytest.approx(CORRUPTION_LEVELS["offset_shift"][1])


def test_standard_stream():
    s = build_stream("standard", 0)
    assert [st.corruption for st in s.stages] == list(DEFAULT_KINDS)
    assert {st.severity for st in s.stages} == {5}


def test_gradual_stream_walks_severities():
    s = build_stream("gradual", 0)
    assert len(s) == 9 * len(DEFAULT_KINDS)
    for k, kind in enumerate(DEFAULT_KINDS):
        block = s.stages[9 * k: 9 * (k + 1)]
        assert {st.corruption for st in block} == {kind}
        assert tuple(st.severity for st in block) == GRADUAL_PATTERN == (1, 2, 3, 4, 5, 4, 3, 2, 1)


def test_loop_stream_is_ten_standard_cycles():
    std, loop = build_stream("standard", 0), build_stream("loop", 0)
    assert len(loop) == 10 * len(std)
    assert loop.stages == std.stages * 10


def test_random_orders_are_distinct_permutations():
    streams = random_orders(3)
    orders = [tuple(st.corruption for st in s.stages) for s in streams]
    assert len(orders) == 10 == len(set(orders))
    assert all(sorted(o) == sorted(DEFAULT_KINDS) for o in orders)
    assert len({s.seed for s in streams}) == 10
    again = [tuple(st.corruption for st in s.stages) for s in random_orders(3)]
    assert again == orders


def test_unknown_protocol():
    with pytest.raises(ValueError, match="protocol"):
        build_stream("shuffled", 0)


def test_stream_json_describes_stages():
    s = build_stream("standard", 4, StreamConfig(batches=3))
    doc = json.loads(s.to_json())
    assert doc["protocol"] == "standard" and doc["seed"] == 4
    assert doc["stages"][0] == {"corruption": "gaussian_noise", "severity": 5, "batches": 3,
                                "batch_size": 64}


def test_batches_cover_every_stage_in_order():
    spec = SourceSpec(num_classes=3, input_dim=4, samples_per_class=10)
    stream = build_stream("standard", 0, StreamConfig(batches=2, batch_size=5))
    batches = list(iter_batches(spec, stream))
    assert len(batches) == 14
    assert all(isinstance(b, Batch) and b.inputs.shape == (5, 4) for b in batches)
    assert [b.stage_index for b in batches] == [i for i in range(7) for _ in range(2)]
    again = list(iter_batches(spec, stream))
    assert all(a.inputs.tobytes() == b.inputs.tobytes() for a, b in zip(batches, again))


def test_every_stage_draws_from_the_same_clean_pool():
    spec = SourceSpec(num_classes=3, input_dim=4, samples_per_class=10)
    stream = build_stream("standard", 0, StreamConfig(batches=2, batch_size=5))
    pool_x, pool_y = clean_pool(spec, stream)
    assert len(pool_x) == 10
    for si in range(len(stream)):
        _, y = stage_data(spec, stream, si, (pool_x, pool_y))
        assert sorted(y.tolist()) == sorted(pool_y.tolist())

import numpy as np
import pytest

from metasample import brdf_core as bc
from metasample import sampler as S


def test_random_valid_properties(oracles):
    xs = S.random_valid(1_000_000, 7)
    assert xs.shape == (1_000_000, 3)
    assert bc.is_valid(xs).all()
    assert np.array_equal(S.random_valid(500, 3), S.random_valid(500, 3))
    oracle_hits = 10_000_000 * oracles["valid_fraction"]
    sigma = oracles["valid_u_std"] * np.sqrt(1 / xs.shape[0] + 1 / oracle_hits)
    assert abs(xs[:, 0].mean() - oracles["valid_mean_u"]) < 3 * sigma + 5e-6


def test_random_valid_rejects_bad_count():
    with pytest.raises(ValueError):
        S.random_valid(0, 0)


def test_sobol_first_points(oracles):
    assert S.sobol_init(1).tolist() == [[0.5, 0.5, 0.5]]
    assert np.array_equal(S.sobol_init(4), np.array(oracles["sobol_first_valid"]))


def test_sobol_distinct_and_valid():
    pts = S.sobol_init(512)
    assert np.unique(pts, axis=0).shape[0] == 512
    assert bc.is_valid(pts).all()


def test_sobol_skip_continues_sequence():
    a, cursor = S.sobol_valid(10)
    b, _ = S.sobol_valid(10, cursor)
    both = S.sobol_init(20)
    assert np.array_equal(np.concatenate([a, b]), both)


def test_sobol_discrepancy_below_uniform():
    sob = S.sobol_init(256)
    # both sets live in the valid region
    uni = S.random_valid(256, 0)
    assert S.star_discrepancy_estimate(sob) < S.star_discrepancy_estimate(uni)


def test_grow_preserves_and_validates():
    p = S.SamplePattern.from_sobol(1)
    p.coords[0] = [0.1, 0.2, 0.3]
    q = S.grow(p, 2)
    assert q.n == 2 and np.array_equal(q.coords[0], [0.1, 0.2, 0.3])
    r = S.grow(q, 4)
    assert np.array_equal(r.coords[:2], q.coords)
    # the fresh halves never repeat Sobol points
    assert not np.any(np.all(r.coords[2:, None] == q.coords[None, 1:], axis=2))
    with pytest.raises(S.BadSchedule):
        S.grow(r, 6)


def test_full_schedule_to_64():
    sched = S.DoublingSchedule(64)
    assert sched.targets == [1, 2, 4, 8, 16, 32, 64]
    p = S.SamplePattern.from_sobol(1)
    for n in sched.targets[1:]:
        p = S.grow(p, n)
    assert p.n == 64 and p.valid_fraction() == 1.0
    assert np.unique(p.coords, axis=0).shape[0] == 64


@pytest.mark.parametrize("n_max", [0, 3, 1024])
def test_schedule_rejects(n_max):
    with pytest.raises(S.BadSchedule):
        S.DoublingSchedule(n_max)


def test_clamp_and_round_trip(tmp_path, rng):
    p = S.SamplePattern(rng.normal(0.5, 1.0, (16, 3)), sobol_cursor=17)
    p.clamp()
    assert p.coords.min() >= 0 and p.coords.max() <= 1
    p.save(tmp_path / "xi.txt")
    q = S.SamplePattern.load(tmp_path / "xi.txt")
    assert np.array_equal(p.coords, q.coords) and q.sobol_cursor == 17
    text = (tmp_path / "xi.txt").read_text().splitlines()
    assert len(text) == 17 and len(text[1].split()) == 3

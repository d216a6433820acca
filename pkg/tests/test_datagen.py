import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tbpinn.datagen import (
    Dataset,
    fingerprint,
    generate_dataset,
    initial_condition,
    proximity_stats,
    read_dataset,
    record_rng,
    sample_initial_condition,
    simulate,
    write_dataset,
)
from tbpinn.errors import FormatError
from tbpinn.integrator import FailureReason


@pytest.fixture(scope="module")
def small():
    return generate_dataset(10, 1234)


def test_singular_corner():
    ic = initial_condition(0.0, 1.0)
    assert ic.p2 == (-0.5, 0.0)
    assert ic.p3 == (-0.5, 0.0)


def test_upright_corner():
    ic = initial_condition(math.pi / 2, 1.0)
    assert ic.p1 == (1.0, 0.0)
    assert ic.p2.x == pytest.approx(0.0, abs=1e-16) and ic.p2.z == 1.0
    assert ic.p3.x == pytest.approx(-1.0) and ic.p3.z == -1.0


@given(st.integers(0, 2**63), st.integers(0, 10**6))
def test_sampled_conditions_are_centred_and_in_region(seed, index):
    ic = sample_initial_condition(record_rng(seed, index), index)
    assert ic.p1.x + ic.p2.x + ic.p3.x == 0.0
    assert ic.p1.z + ic.p2.z + ic.p3.z == 0.0
    assert -0.5 <= ic.p2.x <= 0.0 and 0.0 <= ic.p2.z <= 1.0
    assert ic.seed_index == index
    assert np.all(ic.state().vel == 0.0)


def test_out_of_range_parameters():
    with pytest.raises(ValueError):
        initial_condition(-0.1, 0.5)
    with pytest.raises(ValueError):
        initial_condition(0.5, 1.5)


def test_sampling_is_uniform():
    n = 20000
    draws = [sample_initial_condition(record_rng(99, i), i) for i in range(n)]
    theta = np.array([d.theta for d in draws])
    s = np.array([d.s for d in draws])
    for values, hi in ((theta, math.pi / 2), (s, 1.0)):
        counts, _ = np.histogram(values, bins=10, range=(0.0, hi))
        assert np.all(np.abs(counts / n - 0.1) <= 0.02)


def test_record_streams_are_order_independent():
    a = sample_initial_condition(record_rng(7, 3), 3)
    [sample_initial_condition(record_rng(7, i), i) for i in range(3)]
    assert sample_initial_condition(record_rng(7, 3), 3) == a
    assert sample_initial_condition(record_rng(7, 4), 4) != a


def test_single_well_separated_record_converges():
    rec = simulate(initial_condition(1.2, 0.4), 0)
    assert rec.converged and len(rec.trajectory) == 257


def test_dataset_shape(small):
    assert [r.sim_id for r in small.records] == list(range(10))
    assert small.meta.n_requested == 10
    assert small.meta.n_converged == sum(r.converged for r in small.records)
    assert small.meta.tolerance == 1e-10
    for r in small.records:
        assert r.trajectory.dt == small.meta.dt
        if r.converged:
            assert len(r.trajectory) == 257
        assert r.wall_time_seconds == 0.0


def test_round_trip(small, tmp_path):
    path = tmp_path / "d.tbpd"
    write_dataset(small, path)
    back = read_dataset(path)
    assert back == small
    assert back.fingerprint == fingerprint(small)
    for a, b in zip(small.records, back.records):
        np.testing.assert_array_equal(a.trajectory.vectors(), b.trajectory.vectors())
        if not a.converged:
            assert b.trajectory.verdict.failure_reason is FailureReason.UNRECORDED


def test_same_call_gives_identical_bytes(tmp_path):
    a, b = tmp_path / "a.tbpd", tmp_path / "b.tbpd"
    write_dataset(generate_dataset(4, 5), a)
    write_dataset(generate_dataset(4, 5), b)
    assert a.read_bytes() == b.read_bytes()


def test_worker_count_does_not_change_output(small):
    assert generate_dataset(10, 1234, workers=2) == small


def test_bad_magic(small, tmp_path):
    path = tmp_path / "d.tbpd"
    write_dataset(small, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="magic"):
        read_dataset(path)


def test_bad_version(small, tmp_path):
    path = tmp_path / "d.tbpd"
    write_dataset(small, path)
    data = bytearray(path.read_bytes())
    data[4] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="version"):
        read_dataset(path)


def test_truncation_names_the_record(small, tmp_path):
    path = tmp_path / "d.tbpd"
    write_dataset(small, path)
    data = path.read_bytes()
    # cut inside the state block of the fourth record
    header = 8 + 48
    sizes = [37 + 13 * 8 * len(r.trajectory) for r in small.records]
    cut = header + sum(sizes[:3]) + 37 + 100
    path.write_bytes(data[:cut])
    with pytest.raises(FormatError, match="sim_id 3"):
        read_dataset(path)


def test_trailing_bytes_rejected(small, tmp_path):
    path = tmp_path / "d.tbpd"
    write_dataset(small, path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError):
        read_dataset(path)


def test_missing_file_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        read_dataset(tmp_path / "nope.tbpd")


def test_proximity_stats_counts():
    ds = generate_dataset(3, 0)
    stats = proximity_stats(ds)
    assert stats["n"] == 3
    assert stats["converged"] == ds.meta.n_converged
    assert isinstance(ds, Dataset)


def test_generate_rejects_empty():
    with pytest.raises(ValueError):
        generate_dataset(0, 1)

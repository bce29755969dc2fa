"""MOSIMTRJ round trips, noise injection, fragment sampling."""
import hashlib

import numpy as np
import pytest

from motionsim.datasets import (
    TrajectoryDataset,
    TrajectorySegment,
    add_observation_noise,
    read_dataset,
    sample_fragments,
    train_validation_split,
    write_dataset,
)
from motionsim.errors import DimensionError, FormatError


def make_dataset(n_segments=3, n_steps=12, seed=0):
    rng = np.random.default_rng(seed)
    segs = [
        TrajectorySegment(rng.normal(size=(n_steps + 1, 4)),
                          rng.normal(size=(n_steps, 2)),
                          source="random" if i % 2 == 0 else "policy")
        for i in range(n_segments)
    ]
    return TrajectoryDataset(env_name="reacher2", d_q=2, d_v=2, d_a=2,
                             dt=0.05, segments=segs)


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


class TestRoundTrip:
    def test_empty_dataset(self, tmp_path):
        ds = TrajectoryDataset("pendulum", 1, 1, 1, 0.05, [])
        path = tmp_path / "empty.mosimtrj"
        write_dataset(path, ds)
        back = read_dataset(path)
        assert back.env_name == "pendulum"
        assert back.segments == []
        assert back.dt == 0.05

    def test_single_step_segment_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        seg = TrajectorySegment(rng.normal(size=(2, 2)), rng.normal(size=(1, 1)))
        ds = TrajectoryDataset("pendulum", 1, 1, 1, 0.05, [seg])
        path = tmp_path / "one.mosimtrj"
        write_dataset(path, ds)
        back = read_dataset(path)
        assert np.array_equal(back.segments[0].states, seg.states)
        assert np.array_equal(back.segments[0].actions, seg.actions)
        assert back.segments[0].source == "random"

    def test_reserialization_is_byte_identical(self, tmp_path):
        ds = make_dataset(n_segments=1000, n_steps=3, seed=2)
        p1 = tmp_path / "a.mosimtrj"
        p2 = tmp_path / "b.mosimtrj"
        write_dataset(p1, ds)
        write_dataset(p2, read_dataset(p1))
        assert file_hash(p1) == file_hash(p2)

    def test_meta_footer_round_trips(self, tmp_path):
        ds = make_dataset()
        path = tmp_path / "meta.mosimtrj"
        write_dataset(path, ds, meta={"config_hash": "ab" * 8})
        back, meta = read_dataset(path, with_meta=True)
        assert meta == {"config_hash": "ab" * 8}

    def test_source_tags_preserved(self, tmp_path):
        ds = make_dataset(n_segments=4)
        path = tmp_path / "tags.mosimtrj"
        write_dataset(path, ds)
        back = read_dataset(path)
        assert [s.source for s in back.segments] == \
            [s.source for s in ds.segments]


class TestFormatErrors:
    def test_bad_magic_offset_zero(self, tmp_path):
        path = tmp_path / "bad.mosimtrj"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(FormatError) as err:
            read_dataset(path)
        assert err.value.offset == 0

    def test_truncation_reports_offset(self, tmp_path):
        ds = make_dataset()
        path = tmp_path / "full.mosimtrj"
        write_dataset(path, ds)
        blob = path.read_bytes()
        cut = tmp_path / "cut.mosimtrj"
        cut.write_bytes(blob[: len(blob) - 40])
        with pytest.raises(FormatError) as err:
            read_dataset(cut)
        assert err.value.offset is not None
        assert 0 < err.value.offset <= len(blob)

    def test_bad_version(self, tmp_path):
        ds = make_dataset(n_segments=0)
        path = tmp_path / "v.mosimtrj"
        write_dataset(path, ds)
        blob = bytearray(path.read_bytes())
        blob[8] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            read_dataset(path)

    def test_segment_shape_validation(self):
        with pytest.raises(DimensionError):
            TrajectorySegment(np.zeros((5, 2)), np.zeros((3, 1)))


class TestObservationNoise:
    def test_sigma_zero_identical(self):
        ds = make_dataset()
        noisy = add_observation_noise(ds, 0.0, seed=1)
        for a, b in zip(ds.segments, noisy.segments):
            assert np.array_equal(a.states, b.states)

    def test_actions_byte_identical(self):
        ds = make_dataset()
        noisy = add_observation_noise(ds, 0.05, seed=1)
        for a, b in zip(ds.segments, noisy.segments):
            assert a.actions.tobytes() == b.actions.tobytes()
            assert not np.array_equal(a.states, b.states)

    def test_same_seed_identical(self):
        ds = make_dataset()
        n1 = add_observation_noise(ds, 0.01, seed=3)
        n2 = add_observation_noise(ds, 0.01, seed=3)
        for a, b in zip(n1.segments, n2.segments):
            assert np.array_equal(a.states, b.states)

    def test_sample_variance_matches_sigma(self):
        # >= 1e6 entries so the variance estimator is tight
        rng = np.random.default_rng(0)
        segs = [TrajectorySegment(np.zeros((2501, 4)), np.zeros((2500, 1)))
                for _ in range(100)]
        ds = TrajectoryDataset("pendulum", 2, 2, 1, 0.05, segs)
        noisy = add_observation_noise(ds, 0.01, seed=5)
        allstates = np.concatenate([s.states for s in noisy.segments])
        assert allstates.size >= 1_000_000
        var = allstates.var()
        assert abs(var - 1e-4) < 0.1 * 1e-4

    def test_shape_preserved(self):
        ds = make_dataset()
        noisy = add_observation_noise(ds, 0.01, seed=1)
        assert [s.states.shape for s in noisy.segments] == \
            [s.states.shape for s in ds.segments]


class TestFragmentSampling:
    def test_respects_warmin(self):
        rng = np.random.default_rng(0)
        seg = TrajectorySegment(np.arange(301)[:, None] * 1.0,
                                np.zeros((300, 1)))
        ds = TrajectoryDataset("pendulum", 1, 0, 1, 0.05, [seg])
        states, actions = sample_fragments(ds, 10, 64, rng, warmin=100)
        assert states.shape == (64, 11, 1)
        assert np.all(states[:, 0, 0] >= 100)

    def test_too_short_segments_rejected(self):
        rng = np.random.default_rng(0)
        ds = make_dataset(n_steps=12)
        with pytest.raises(ValueError):
            sample_fragments(ds, 10, 4, rng, warmin=100)

    def test_split_is_deterministic_tail(self):
        ds = make_dataset(n_segments=10)
        train, val = train_validation_split(ds, 0.2)
        assert len(train.segments) == 8
        assert len(val.segments) == 2
        assert val.segments[0] is ds.segments[8]

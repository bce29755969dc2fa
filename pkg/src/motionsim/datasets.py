"""Trajectory dataset storage and sampling.

Datasets are lists of :class:`TrajectorySegment` plus shared environment
header info, stored in the MOSIMTRJ binary format: little-endian, magic
``MOSIMTRJ``, version u32, header (env name, D_q, D_v, D_a, dt f64, segment
count u32), then per segment (n u32, states f64 block, actions f64 block,
source tag u8). An optional JSON footer (magic ``META``) carries run
metadata such as the config hash; readers tolerate its absence.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, FormatError

MAGIC = b"MOSIMTRJ"
META_MAGIC = b"META"
VERSION = 1

SOURCE_TAGS = ("random", "policy")

#: Control steps dropped from the head of every stored trajectory before a
#: fragment may start, so sampled fragments come from steady-state behavior.
WARMIN_STEPS = 100


@dataclass
class TrajectorySegment:
    """(n+1) states and n actions on a fixed control grid."""

    states: np.ndarray   # (n+1, d_s)
    actions: np.ndarray  # (n, d_a)
    source: str = "random"

    def __post_init__(self):
        self.states = np.ascontiguousarray(self.states, dtype=np.float64)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float64)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise DimensionError("segment arrays must be 2-D")
        if self.states.shape[0] != self.actions.shape[0] + 1:
            raise DimensionError(
                f"{self.states.shape[0]} states need "
                f"{self.states.shape[0] - 1} actions, got {self.actions.shape[0]}")
        if self.source not in SOURCE_TAGS:
            raise ValueError(f"unknown source tag {self.source!r}")

    @property
    def n_steps(self):
        return self.actions.shape[0]


@dataclass
class TrajectoryDataset:
    env_name: str
    d_q: int
    d_v: int
    d_a: int
    dt: float
    segments: list = field(default_factory=list)

    @property
    def d_s(self):
        return self.d_q + self.d_v

    def state_std(self):
        """Per-dimension std over all states; floors at 1e-12 so it can be
        used as a normalizer."""
        if not self.segments:
            return np.ones(self.d_s)
        allstates = np.concatenate([seg.states for seg in self.segments])
        return np.maximum(allstates.std(axis=0), 1e-12)

    def all_states(self):
        return np.concatenate([seg.states for seg in self.segments]) \
            if self.segments else np.zeros((0, self.d_s))


def write_dataset(path, dataset, meta=None):
    """Serialize to MOSIMTRJ. ``meta`` (a JSON-able dict) goes into the
    optional footer."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        name = dataset.env_name.encode("utf-8")
        fh.write(struct.pack("<I", len(name)))
        fh.write(name)
        fh.write(struct.pack("<III", dataset.d_q, dataset.d_v, dataset.d_a))
        fh.write(struct.pack("<d", dataset.dt))
        fh.write(struct.pack("<I", len(dataset.segments)))
        for seg in dataset.segments:
            if seg.states.shape[1] != dataset.d_s:
                raise DimensionError(
                    f"segment state width {seg.states.shape[1]} != {dataset.d_s}")
            fh.write(struct.pack("<I", seg.n_steps))
            fh.write(np.ascontiguousarray(seg.states, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(seg.actions, dtype="<f8").tobytes())
            fh.write(struct.pack("<B", SOURCE_TAGS.index(seg.source)))
        if meta is not None:
            blob = json.dumps(meta, sort_keys=True).encode("utf-8")
            fh.write(META_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def read_dataset(path, with_meta=False):
    """Read a MOSIMTRJ file. Raises :class:`FormatError` with the byte
    offset on magic/version mismatch or truncation."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    total = len(data)

    def need(nbytes, what):
        if pos + nbytes > total:
            raise FormatError(f"truncated while reading {what}", offset=pos)

    need(8, "magic")
    if data[:8] != MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {MAGIC!r}", offset=0)
    pos = 8
    need(4, "version")
    (version,) = struct.unpack_from("<I", data, pos)
    if version != VERSION:
        raise FormatError(f"unsupported MOSIMTRJ version {version}", offset=pos)
    pos += 4
    need(4, "env name length")
    (nlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    need(nlen, "env name")
    env_name = data[pos:pos + nlen].decode("utf-8")
    pos += nlen
    need(12 + 8 + 4, "header")
    d_q, d_v, d_a = struct.unpack_from("<III", data, pos)
    pos += 12
    (dt,) = struct.unpack_from("<d", data, pos)
    pos += 8
    (n_segments,) = struct.unpack_from("<I", data, pos)
    pos += 4

    d_s = d_q + d_v
    segments = []
    for i in range(n_segments):
        need(4, f"segment {i} length")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        sbytes = 8 * (n + 1) * d_s
        abytes = 8 * n * d_a
        need(sbytes + abytes + 1, f"segment {i} payload")
        states = np.frombuffer(data, dtype="<f8", count=(n + 1) * d_s,
                               offset=pos).reshape(n + 1, d_s).copy()
        pos += sbytes
        actions = np.frombuffer(data, dtype="<f8", count=n * d_a,
                                offset=pos).reshape(n, d_a).copy()
        pos += abytes
        tag = data[pos]
        pos += 1
        if tag >= len(SOURCE_TAGS):
            raise FormatError(f"unknown source tag {tag}", offset=pos - 1)
        segments.append(TrajectorySegment(states, actions, SOURCE_TAGS[tag]))

    meta = None
    if pos < total:
        need(4, "footer magic")
        if data[pos:pos + 4] != META_MAGIC:
            raise FormatError(
                f"trailing bytes are not a META footer", offset=pos)
        pos += 4
        need(4, "footer length")
        (blen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        need(blen, "footer body")
        meta = json.loads(data[pos:pos + blen].decode("utf-8"))
        pos += blen
        if pos != total:
            raise FormatError("trailing bytes after META footer", offset=pos)

    ds = TrajectoryDataset(env_name=env_name, d_q=d_q, d_v=d_v, d_a=d_a,
                           dt=dt, segments=segments)
    return (ds, meta) if with_meta else ds


# ---------------------------------------------------------------------------
# noise and sampling


def add_observation_noise(dataset, sigma, seed=0):
    """I.i.d. Gaussian noise on every state entry; actions are untouched
    (byte-identical). ``sigma = 0`` returns an identical dataset."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return replace(dataset, segments=list(dataset.segments))
    rng = np.random.default_rng(seed)
    noisy = []
    for seg in dataset.segments:
        states = seg.states + rng.normal(0.0, sigma, size=seg.states.shape)
        noisy.append(TrajectorySegment(states, seg.actions, seg.source))
    return replace(dataset, segments=noisy)


def sample_fragments(dataset, length, n, rng, warmin=WARMIN_STEPS):
    """Draw ``n`` random fragments of ``length`` control steps.

    Start indices are uniform over ``[warmin, n_steps - length]``; segments
    too short to honor the warm-in prefix are skipped (an error if none
    qualify). Returns (states (n, length+1, d_s), actions (n, length, d_a)).
    """
    usable = [seg for seg in dataset.segments
              if seg.n_steps - warmin - length >= 0]
    if not usable:
        raise ValueError(
            f"no segment offers {length} steps after a {warmin}-step warm-in")
    states = np.empty((n, length + 1, dataset.d_s))
    actions = np.empty((n, length, dataset.d_a))
    seg_idx = rng.integers(0, len(usable), size=n)
    for i, j in enumerate(seg_idx):
        seg = usable[j]
        start = rng.integers(warmin, seg.n_steps - length + 1)
        states[i] = seg.states[start:start + length + 1]
        actions[i] = seg.actions[start:start + length]
    return states, actions


def train_validation_split(dataset, validation_fraction=0.1, min_validation=1):
    """Deterministic tail split into train/validation datasets."""
    n = len(dataset.segments)
    n_val = max(min_validation, int(round(n * validation_fraction)))
    if n_val >= n:
        raise ValueError("dataset too small to split")
    train = replace(dataset, segments=dataset.segments[:-n_val])
    val = replace(dataset, segments=dataset.segments[-n_val:])
    return train, val

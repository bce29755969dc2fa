"""MSNN parameter checkpoint format.

Little-endian binary: magic ``MSNN``, format version u32, then per-tensor
records of (name length u32, UTF-8 name, rank u32, dims u32 x rank, f64
payload) until end of file. Tensor names follow the canonical dynamics
naming (``pos_enc.*``, ``state_enc.*``, ``act_enc.*``, ``corr{i}.*``);
structural metadata rides along as ``meta.*`` tensors so a checkpoint is
self-describing.
"""
from __future__ import annotations

import struct

import numpy as np

from .dynamics import DynamicsParams
from .errors import FormatError
from .nn import ACTIVATIONS, MlpParams, ResBlockParams, ResNetParams

MAGIC = b"MSNN"
VERSION = 1


def write_tensors(path, tensors):
    """Write an ordered {name: array} mapping as an MSNN file."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_tensors(path):
    """Read an MSNN file back into an ordered {name: array} mapping."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported MSNN version {version}", offset=4)
    pos = 8
    tensors = {}
    total = len(data)

    def need(nbytes, what):
        if pos + nbytes > total:
            raise FormatError(f"truncated while reading {what}", offset=pos)

    while pos < total:
        need(4, "name length")
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        need(nlen, "name")
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        need(4, "rank")
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        need(8 * count, f"payload of {name}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        tensors[name] = arr.reshape(dims).copy()
    return tensors


# ---------------------------------------------------------------------------
# dynamics-parameter checkpoints


def _act_code(name):
    return float(ACTIVATIONS.index(name))


def _act_name(code):
    return ACTIVATIONS[int(code)]


def save_dynamics(path, params, extra_meta=None):
    """Checkpoint a DynamicsParams, including the structural metadata
    needed to rebuild it."""
    tensors = dict(params.named_parameters())
    tensors["meta.dims"] = np.array(
        [params.d_q, params.d_v, params.d_a], dtype=np.float64)
    tensors["meta.active_correctors"] = np.array(
        [params.active_correctors], dtype=np.float64)
    tensors["meta.n_correctors"] = np.array(
        [len(params.correctors)], dtype=np.float64)
    acts = [params.pos_enc.activation, params.state_enc.activation,
            params.act_enc.activation]
    acts += [c.activation for c in params.correctors]
    tensors["meta.activations"] = np.array(
        [_act_code(a) for a in acts], dtype=np.float64)
    if extra_meta:
        for key, value in extra_meta.items():
            tensors[f"meta.{key}"] = np.asarray(value, dtype=np.float64)
    write_tensors(path, tensors)


def _collect_resnet(tensors, prefix, activation):
    blocks = []
    j = 0
    while f"{prefix}block{j}.w1" in tensors:
        blocks.append(ResBlockParams(
            w1=tensors[f"{prefix}block{j}.w1"], b1=tensors[f"{prefix}block{j}.b1"],
            w2=tensors[f"{prefix}block{j}.w2"], b2=tensors[f"{prefix}block{j}.b2"]))
        j += 1
    try:
        return ResNetParams(
            w_in=tensors[f"{prefix}w_in"], b_in=tensors[f"{prefix}b_in"],
            blocks=blocks, w_out=tensors[f"{prefix}w_out"],
            b_out=tensors[f"{prefix}b_out"], activation=activation)
    except KeyError as e:
        raise FormatError(f"checkpoint is missing tensor {e}") from None


def _collect_mlp(tensors, prefix, activation):
    weights, biases = [], []
    i = 0
    while f"{prefix}w{i}" in tensors:
        weights.append(tensors[f"{prefix}w{i}"])
        biases.append(tensors[f"{prefix}b{i}"])
        i += 1
    if not weights:
        raise FormatError(f"checkpoint has no layers under {prefix!r}")
    return MlpParams(weights, biases, activation)


def load_dynamics(path):
    """Rebuild a DynamicsParams from an MSNN checkpoint.

    Returns ``(params, meta)`` where meta holds any extra ``meta.*``
    tensors that were stored alongside.
    """
    tensors = read_tensors(path)
    try:
        d_q, d_v, d_a = (int(v) for v in tensors["meta.dims"])
        active = int(tensors["meta.active_correctors"][0])
        n_corr = int(tensors["meta.n_correctors"][0])
        acts = [_act_name(c) for c in tensors["meta.activations"]]
    except KeyError as e:
        raise FormatError(f"checkpoint is missing metadata tensor {e}") from None
    params = DynamicsParams(
        d_q=d_q, d_v=d_v, d_a=d_a,
        pos_enc=_collect_resnet(tensors, "pos_enc.", acts[0]),
        state_enc=_collect_resnet(tensors, "state_enc.", acts[1]),
        act_enc=_collect_mlp(tensors, "act_enc.", acts[2]),
        correctors=[_collect_resnet(tensors, f"corr{i}.", acts[3 + i])
                    for i in range(n_corr)],
        active_correctors=active,
    )
    known = {"meta.dims", "meta.active_correctors", "meta.n_correctors",
             "meta.activations"}
    meta = {k[len("meta."):]: v for k, v in tensors.items()
            if k.startswith("meta.") and k not in known}
    return params, meta

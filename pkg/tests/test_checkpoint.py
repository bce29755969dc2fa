"""MSNN tensor files and dynamics checkpointing."""
import hashlib

import numpy as np
import pytest

from motionsim.checkpoint import load_dynamics, read_tensors, save_dynamics, \
    write_tensors
from motionsim.dynamics import full_derivative, init_dynamics_params
from motionsim.errors import FormatError


def test_tensor_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a.w": rng.normal(size=(3, 4)),
        "a.b": rng.normal(size=7),
        "scalarish": rng.normal(size=(1,)),
        "cube": rng.normal(size=(2, 2, 2)),
    }
    path = tmp_path / "t.msnn"
    write_tensors(path, tensors)
    back = read_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])
        assert back[k].dtype == np.float64


def test_reserialization_byte_identical(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {f"t{i}": rng.normal(size=(i + 1, 3)) for i in range(5)}
    p1, p2 = tmp_path / "a.msnn", tmp_path / "b.msnn"
    write_tensors(p1, tensors)
    write_tensors(p2, read_tensors(p1))
    h = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
    assert h(p1) == h(p2)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.msnn"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(FormatError) as err:
        read_tensors(path)
    assert err.value.offset == 0


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.msnn"
    write_tensors(path, {"w": np.ones((4, 4))})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(FormatError) as err:
        read_tensors(path)
    assert err.value.offset is not None


def test_dynamics_checkpoint_reproduces_outputs(tmp_path):
    rng = np.random.default_rng(2)
    params = init_dynamics_params(rng, 2, 2, 1, hidden=8, blocks=1,
                                  act_hidden=4, act_blocks=1, n_correctors=2)
    params.correctors[0].w_out[:] = rng.normal(size=params.correctors[0].w_out.shape)
    import dataclasses
    params = dataclasses.replace(params, active_correctors=1)

    path = tmp_path / "model.msnn"
    save_dynamics(path, params, extra_meta={"note": [1.0, 2.0]})
    loaded, meta = load_dynamics(path)

    assert loaded.d_q == 2 and loaded.d_a == 1
    assert loaded.active_correctors == 1
    assert len(loaded.correctors) == 2
    assert loaded.act_enc.activation == "tanh"
    assert loaded.correctors[0].activation == "relu"
    assert np.array_equal(meta["note"], [1.0, 2.0])

    s = rng.normal(size=(5, 4))
    a = rng.normal(size=(5, 1))
    assert np.array_equal(full_derivative(s, a, params),
                          full_derivative(s, a, loaded))


def test_missing_metadata_is_format_error(tmp_path):
    path = tmp_path / "half.msnn"
    write_tensors(path, {"pos_enc.w_in": np.ones((4, 2))})
    with pytest.raises(FormatError):
        load_dynamics(path)

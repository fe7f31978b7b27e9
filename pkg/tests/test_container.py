import numpy as np
import pytest

from mcwc import errors
from mcwc.container import (
    Checkpoint,
    LayerTensors,
    file_sha256,
    load_activation_summaries,
    load_checkpoint,
    param_count,
    save_activation_summaries,
    save_checkpoint,
)


def make_ckpt(rng, n_layers=3):
    layers = []
    for i in range(1, n_layers + 1):
        layers.append(LayerTensors(index=i, tensors={
            "w": rng.standard_normal((4, 3)).astype(np.float32),
            "b": rng.standard_normal(4).astype(np.float32),
        }))
    return Checkpoint(arch_id=7, layers=layers)


def test_identity_load(tmp_path, rng):
    ckpt = Checkpoint(arch_id=1, layers=[LayerTensors(index=1, tensors={
        "w": np.arange(6, dtype=np.float32).reshape(2, 3)})])
    path = tmp_path / "one.ckpt"
    save_checkpoint(ckpt, path)
    out = load_checkpoint(path)
    assert out.num_layers == 1
    assert out.layers[0].tensors["w"].size == 6
    np.testing.assert_array_equal(out.layers[0].tensors["w"],
                                  ckpt.layers[0].tensors["w"])


def test_short_data_region_rejected(tmp_path, rng):
    ckpt = make_ckpt(rng, 1)
    path = tmp_path / "short.ckpt"
    save_checkpoint(ckpt, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(errors.ShapeMismatch):
        load_checkpoint(path)


def test_roundtrip_bytes_identical(tmp_path, rng):
    ckpt = make_ckpt(rng, 3)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(ckpt, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_same_input_same_sha256(tmp_path, rng):
    ckpt = make_ckpt(rng)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(ckpt, p1)
    save_checkpoint(ckpt, p2)
    assert file_sha256(p1) == file_sha256(p2)


def test_empty_layer_rejected(tmp_path):
    ckpt = Checkpoint(arch_id=0, layers=[LayerTensors(index=1, tensors={})])
    with pytest.raises(errors.InvalidCheckpoint):
        save_checkpoint(ckpt, tmp_path / "x.ckpt")


def test_nan_rejected_on_load(tmp_path, rng):
    ckpt = make_ckpt(rng, 1)
    path = tmp_path / "nan.ckpt"
    save_checkpoint(ckpt, path)
    raw = bytearray(path.read_bytes())
    raw[-4:] = np.float32("nan").tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(errors.NonFiniteValue):
        load_checkpoint(path)


def test_missing_file():
    with pytest.raises(errors.MissingFile):
        load_checkpoint("/nonexistent/never.ckpt")


def test_bad_magic(tmp_path, rng):
    path = tmp_path / "bad.ckpt"
    save_checkpoint(make_ckpt(rng, 1), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(errors.ManifestParse):
        load_checkpoint(path)


def test_param_count(rng):
    ckpt = Checkpoint(arch_id=0, layers=[LayerTensors(index=1, tensors={
        "a": np.ones((2, 3), dtype=np.float32)})])
    assert param_count(ckpt) == 6
    ckpt2 = Checkpoint(arch_id=0, layers=[LayerTensors(index=1, tensors={
        "a": np.ones(4, dtype=np.float32),
        "b": np.ones((4, 4), dtype=np.float32)})])
    assert param_count(ckpt2) == 20


def test_param_count_order_invariant(rng):
    t = {"a": rng.standard_normal((3, 2)).astype(np.float32),
         "b": rng.standard_normal(5).astype(np.float32)}
    c1 = Checkpoint(arch_id=0, layers=[LayerTensors(index=1, tensors=dict(t))])
    c2 = Checkpoint(arch_id=0, layers=[LayerTensors(
        index=1, tensors={k: t[k] for k in reversed(list(t))})])
    assert param_count(c1) == param_count(c2)


def test_activation_sidecar_roundtrip(tmp_path, rng):
    acts = {(1, 0): rng.standard_normal((4, 6)).astype(np.float32),
            (2, 0): rng.standard_normal((4, 6)).astype(np.float32),
            (2, 1): rng.standard_normal((3, 6)).astype(np.float32)}
    path = tmp_path / "acts.ckpt"
    save_activation_summaries(acts, path)
    out = load_activation_summaries(path)
    assert set(out) == set(acts)
    for key in acts:
        np.testing.assert_array_equal(out[key], acts[key])

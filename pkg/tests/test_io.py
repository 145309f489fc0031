import struct

import numpy as np
import pytest
import torch

from dualflow.io import (FormatError, load_records, load_tensor, parse_kv, read_ply, read_tum,
                         save_records, save_tensor, write_ply, write_tum)


def test_o4d_layout(tmp_path):
    t = torch.arange(2 * 3 * 4 * 5, dtype=torch.float32).reshape(2, 3, 4, 5)
    save_tensor(tmp_path / "a.o4d", t)
    raw = (tmp_path / "a.o4d").read_bytes()
    assert raw[:4] == b"O4DT" and raw[4] == 1
    assert struct.unpack("<4I", raw[5:21]) == (2, 3, 4, 5)
    assert np.frombuffer(raw[21:], dtype="<f4").tolist() == t.flatten().tolist()
    assert torch.equal(load_tensor(tmp_path / "a.o4d"), t)


def test_o4d_float64_version(tmp_path):
    t = torch.randn(1, 2, 3, 4, dtype=torch.float64)
    save_tensor(tmp_path / "b.o4d", t, version=2)
    assert (tmp_path / "b.o4d").read_bytes()[4] == 2
    assert torch.equal(load_tensor(tmp_path / "b.o4d"), t)


def test_o4d_bad_magic(tmp_path):
    (tmp_path / "c.o4d").write_bytes(b"XXXX" + bytes(17))
    with pytest.raises(FormatError):
        load_tensor(tmp_path / "c.o4d")


def test_records_roundtrip(tmp_path):
    recs = {"a.b": torch.randn(3, 4, dtype=torch.float64), "ünï": torch.ones(5, dtype=torch.float64)}
    save_records(tmp_path / "r.ckpt", recs, version=2)
    back = load_records(tmp_path / "r.ckpt")
    assert list(back) == list(recs)
    for k in recs:
        assert torch.equal(back[k].reshape(recs[k].shape), recs[k])


def test_tum_roundtrip(tmp_path):
    c = np.random.default_rng(0).normal(size=(4, 3))
    q = np.tile([0.0, 0.0, 0.0, 1.0], (4, 1))
    write_tum(tmp_path / "t.txt", c, q)
    idx, c2, q2 = read_tum(tmp_path / "t.txt")
    assert idx.tolist() == [0, 1, 2, 3]
    assert np.array_equal(c, c2) and np.array_equal(q, q2)


def test_ply(tmp_path):
    pts = np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]])
    write_ply(tmp_path / "p.ply", pts, [[0, 128, 255], [255, 0, 0]])
    text = (tmp_path / "p.ply").read_text()
    assert "element vertex 2" in text and "property uchar red" in text
    p, c = read_ply(tmp_path / "p.ply")
    assert np.allclose(p, pts) and c.tolist() == [[0, 128, 255], [255, 0, 0]]


def test_kv_comments():
    assert parse_kv("# hi\na = 1\n\nb=x # tail\n") == {"a": "1", "b": "x"}
    with pytest.raises(FormatError):
        parse_kv("novalue\n")

"""Checkpoint, dataset and table serialization."""

import numpy as np
import pytest

from warplab.io import (load_checkpoint, load_dataset, read_table, save_checkpoint, save_dataset,
                        write_pgm, write_table)
from warplab.nn import NetworkSpec, gen_blobs, init_params


class TestRoundTrip:
    def test_checkpoint(self, tmp_path):
        spec = NetworkSpec((4, 5, 3), "relu", 7)
        p = init_params(spec)
        save_checkpoint(tmp_path / "c.json", spec, p)
        spec2, p2 = load_checkpoint(tmp_path / "c.json")
        assert spec2 == spec
        np.testing.assert_array_equal(p2.values, p.values)

    def test_dataset(self, tmp_path):
        data = gen_blobs(2, 5, 3, 2, 0.4)
        save_dataset(tmp_path / "d.json", data)
        back = load_dataset(tmp_path / "d.json")
        np.testing.assert_array_equal(back.X, data.X)
        np.testing.assert_array_equal(back.y, data.y)
        assert back.role == data.role and back.n_classes == 2

    def test_table(self, tmp_path):
        write_table(tmp_path / "t.tsv", ("a", "b"), [(1, 0.5), (2, "x")])
        header, rows = read_table(tmp_path / "t.tsv")
        assert header == ["a", "b"] and rows[1] == ["2", "x"]
        assert float(rows[0][1]) == 0.5

    def test_pgm(self, tmp_path):
        write_pgm(tmp_path / "i.pgm", np.linspace(0, 1, 12).reshape(3, 4))
        raw = (tmp_path / "i.pgm").read_bytes()
        assert raw.startswith(b"P")

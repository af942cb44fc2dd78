"""Tests for checkpoints and run artifact files."""

import json
import struct

import numpy as np
import pandas as pd
import pytest

from mod import artifacts
from mod.errors import ContractError, DependencyError
from mod.policies import PolicyParams
from mod.ravalue import RAValueConfig, initial_table

HEADER = {'config_hash': 'abc', 'seed': 7}


class TestCheckpoints:
    """Tests for the binary checkpoint format."""

    def test_identical_inputs_identical_bytes(self):
        arrays = {'w': np.arange(6.0).reshape(2, 3), 'b': np.array([0.5])}
        assert artifacts.checkpoint_bytes('policy', arrays, HEADER) == artifacts.checkpoint_bytes('policy', arrays, HEADER)

    def test_header_and_arrays(self, tmp_path):
        path = artifacts.write_checkpoint(tmp_path / 'x.ckpt', 'thing', {'a': np.eye(2), 's': np.array(3.0)}, HEADER)
        ckpt = artifacts.read_checkpoint(path, 'thing')

        assert ckpt.kind == 'thing'
        assert artifacts.split_header(ckpt.header) == HEADER
        np.testing.assert_array_equal(ckpt.arrays['a'], np.eye(2))
        assert ckpt.arrays['s'].shape == ()

    def test_wrong_kind(self, tmp_path):
        path = artifacts.write_checkpoint(tmp_path / 'x.ckpt', 'policy', {'w': np.zeros(2)})
        with pytest.raises(ContractError, match="expected 'ra_table'"):
            artifacts.read_checkpoint(path, 'ra_table')

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(DependencyError, match="Missing checkpoint"):
            artifacts.read_checkpoint(tmp_path / 'nope.ckpt')

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'x.ckpt'
        path.write_bytes(b'not a checkpoint at all')
        with pytest.raises(ContractError, match="not a checkpoint"):
            artifacts.read_checkpoint(path)

    def test_unknown_version(self, tmp_path):
        data = bytearray(artifacts.checkpoint_bytes('policy', {'w': np.zeros(2)}))
        data[8:12] = struct.pack('<I', 99)
        path = tmp_path / 'x.ckpt'
        path.write_bytes(bytes(data))
        with pytest.raises(ContractError, match="format version 99"):
            artifacts.read_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / 'x.ckpt'
        path.write_bytes(artifacts.checkpoint_bytes('policy', {'w': np.zeros(4)})[:-8])
        with pytest.raises(ContractError, match="truncated"):
            artifacts.read_checkpoint(path)

    def test_policy_checkpoint(self, tmp_path, rng):
        params = PolicyParams(rng.normal(size=PolicyParams.zeros((3, 4, 2)).weights.size), (3, 4, 2), 0.8, 1e-3)
        loaded = artifacts.load_policy(artifacts.save_policy(tmp_path / 'agile.ckpt', params, HEADER))

        np.testing.assert_array_equal(loaded.weights, params.weights)
        assert loaded.layer_sizes == (3, 4, 2)
        assert loaded.weight_clip == 0.8

    def test_table_checkpoint(self, tmp_path, blocked_world):
        cfg = RAValueConfig(grid_x=(-1.0, 11.0, 4), grid_y=(-3.0, 3.0, 3), grid_theta=2, grid_v=(0.0, 3.5, 2),
                            mass_bins=2, friction_bins=2)
        table = initial_table(cfg.grid(), blocked_world, cfg)
        loaded = artifacts.load_table(artifacts.save_table(tmp_path / 'table.ckpt', table, HEADER))

        np.testing.assert_array_equal(loaded.values, table.values)
        assert loaded.world == blocked_world
        assert loaded.grid == table.grid
        assert loaded.gamma == table.gamma

    def test_digest_changes_with_content(self, tmp_path):
        a = artifacts.write_checkpoint(tmp_path / 'a.ckpt', 'policy', {'w': np.zeros(2)})
        b = artifacts.write_checkpoint(tmp_path / 'b.ckpt', 'policy', {'w': np.ones(2)})
        assert artifacts.file_digest(a) != artifacts.file_digest(b)
        assert artifacts.file_digest(a) == artifacts.file_digest(a)


class TestTextArtifacts:
    """Tests for JSON, CSV and PGM output."""

    def test_json_cleaning(self, tmp_path):
        path = artifacts.write_json(tmp_path / 'r.json', {'x': (1, 2), 'nan': float('nan'), 'n': np.int64(3),
                                                          'ok': np.bool_(True)})
        data = json.loads(path.read_text(encoding='utf-8'))
        assert data == {'x': [1, 2], 'nan': None, 'n': 3, 'ok': True}

    def test_missing_json(self, tmp_path):
        with pytest.raises(DependencyError):
            artifacts.read_json(tmp_path / 'none.json')

    def test_csv_crlf_and_full_precision(self, tmp_path):
        path = artifacts.write_csv(pd.DataFrame({'a': [0.1, 1 / 3], 'b': ['x', 'y']}), tmp_path / 'f.csv')
        raw = path.read_bytes()

        assert raw.count(b'\r\n') == 3
        assert float(pd.read_csv(path)['a'][1]) == 1 / 3

    def test_boolean_pgm(self, tmp_path):
        mask = np.array([[True, False, True], [False, False, True]])
        pixels = artifacts.read_pgm(artifacts.write_pgm(tmp_path / 'm.pgm', mask))
        np.testing.assert_array_equal(pixels, np.where(mask, 255, 0))

    def test_numeric_pgm(self, tmp_path):
        raster = np.array([[-1.0, 0.0], [1.0, np.nan]])
        pixels = artifacts.read_pgm(artifacts.write_pgm(tmp_path / 'v.pgm', raster, lo=-1.0, hi=1.0))
        assert pixels.tolist() == [[0, 128], [255, 0]]

    def test_pgm_needs_2d(self, tmp_path):
        with pytest.raises(ContractError):
            artifacts.write_pgm(tmp_path / 'x.pgm', np.zeros(3))

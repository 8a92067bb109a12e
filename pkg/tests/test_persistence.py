"""
Tests for report files and binary checkpoints
"""

import struct

import numpy as np
import pytest

from mixquant.core.errors import ConsistencyError, ContractError, FormatError
from mixquant.core.persistence import (CHECKPOINT_MAGIC, atomic_write_bytes, load_checkpoint, read_report,
                                       save_checkpoint, write_report)
from mixquant.models.report import MetricRow

ROWS = [
    MetricRow(model='mixer-layernorm-gelu-g4-d4', precision='W8A8', size_mb=0.0123, bops_g=0.5, top1=0.875),
    MetricRow(model='resmlp-affine-gelu-g1-d4', precision='W4A8', size_mb=1e-05, bops_g=0.25, top1=0.5),
]


@pytest.mark.parametrize("suffix", ["csv", "json"])
def test_report_round_trip(tmp_path, suffix):
    first = tmp_path / f"metrics.{suffix}"
    write_report(ROWS, first)
    loaded = read_report(first)
    assert loaded == [row.to_dict() for row in ROWS]
    second = tmp_path / f"again.{suffix}"
    write_report(loaded, second)
    assert read_report(second) == loaded


def test_csv_uses_crlf_and_header(tmp_path):
    path = write_report(ROWS, tmp_path / 'metrics.csv')
    raw = path.read_bytes()
    assert raw.startswith(b"model,precision,size_mb,bops_g,top1\r\n")
    assert raw.count(b"\r\n") == 3


def test_metric_row_from_dict():
    assert MetricRow.from_dict(ROWS[0].to_dict()) == ROWS[0]


def test_metric_row_missing_column():
    with pytest.raises(FormatError, match="size_mb"):
        MetricRow.from_dict({'model': 'mixer', 'precision': 'W8A8'})
    with pytest.raises(FormatError):
        MetricRow.from_dict({'model': 'm', 'precision': 'W8A8', 'size_mb': 'big', 'bops_g': 1, 'top1': 1})


def test_explicit_format_overrides_suffix(tmp_path):
    path = tmp_path / 'metrics.out'
    write_report(ROWS, path, fmt='json')
    assert read_report(path, fmt='json')[1]['precision'] == 'W4A8'


def test_unsupported_format(tmp_path):
    with pytest.raises(ContractError):
        write_report(ROWS, tmp_path / 'metrics.txt')


def test_empty_csv_report_cannot_be_written(tmp_path):
    with pytest.raises(ContractError):
        write_report([], tmp_path / 'metrics.csv')
    write_report([], tmp_path / 'metrics.json')
    assert read_report(tmp_path / 'metrics.json') == []


def test_rows_must_share_columns(tmp_path):
    with pytest.raises(ConsistencyError):
        write_report([{'a': 1, 'b': 2}, {'a': 1, 'c': 3}], tmp_path / 'rows.csv')


def test_empty_csv_file(tmp_path):
    path = tmp_path / 'empty.csv'
    path.write_bytes(b"")
    with pytest.raises(FormatError):
        read_report(path)


def test_ragged_csv_file(tmp_path):
    path = tmp_path / 'ragged.csv'
    path.write_bytes(b"a,b\r\n1,2\r\n3\r\n")
    with pytest.raises(FormatError, match='line 3'):
        read_report(path)


def test_json_report_must_be_an_array(tmp_path):
    path = tmp_path / 'object.json'
    path.write_text('{"a": 1}')
    with pytest.raises(FormatError):
        read_report(path)


def test_invalid_json_report(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('[{"a": 1},')
    with pytest.raises(FormatError, match='invalid JSON'):
        read_report(path)


def test_report_that_is_not_utf8(tmp_path):
    path = tmp_path / 'latin.csv'
    path.write_bytes(b"model\r\n\xff\xfe\r\n")
    with pytest.raises(FormatError, match='UTF-8'):
        read_report(path)


def test_atomic_write_creates_directories(tmp_path):
    target = tmp_path / 'nested' / 'dir' / 'file.bin'
    atomic_write_bytes(target, b"abc")
    assert target.read_bytes() == b"abc"
    assert [p.name for p in target.parent.iterdir()] == ['file.bin']


def _tensors():
    return {
        'layers.0.fc1.weight': np.arange(6, dtype=np.float32).reshape(2, 3) / 7,
        'head.fc.bias': np.array([1.5, -2.25]),
        'steps': np.array(3, dtype=np.int64),
        'codes': np.array([-128, 127], dtype=np.int32),
        'empty': np.zeros((0, 4), dtype=np.float32),
    }


def test_checkpoint_round_trip(tmp_path):
    path = tmp_path / 'model.ckpt'
    save_checkpoint(path, _tensors())
    loaded = load_checkpoint(path)
    assert list(loaded) == list(_tensors())
    for name, value in _tensors().items():
        assert loaded[name].dtype == value.dtype
        assert loaded[name].shape == value.shape
        np.testing.assert_array_equal(loaded[name], value)


def test_checkpoint_starts_with_magic(tmp_path):
    path = tmp_path / 'model.ckpt'
    save_checkpoint(path, {})
    assert path.read_bytes() == CHECKPOINT_MAGIC + b"\x00\x00\x00\x00"
    assert load_checkpoint(path) == {}


def test_checkpoint_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(ContractError):
        save_checkpoint(tmp_path / 'model.ckpt', {'mask': np.array([True, False])})


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / 'model.ckpt'
    path.write_bytes(b"NOPE\x00\x00\x00\x00")
    with pytest.raises(FormatError):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [1, 8, 40])
def test_checkpoint_truncated(tmp_path, cut):
    path = tmp_path / 'model.ckpt'
    save_checkpoint(path, _tensors())
    path.write_bytes(path.read_bytes()[:-cut])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_trailing_bytes(tmp_path):
    path = tmp_path / 'model.ckpt'
    save_checkpoint(path, _tensors())
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match='trailing'):
        load_checkpoint(path)


def test_checkpoint_name_that_is_not_utf8(tmp_path):
    path = tmp_path / 'model.ckpt'
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack('<II', 1, 2) + b"\xff\xfe" + struct.pack('<BI', 0, 0))
    with pytest.raises(FormatError, match='not UTF-8'):
        load_checkpoint(path)

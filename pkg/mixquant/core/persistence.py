"""
Persistence for result reports (CSV/JSON) and model checkpoints
"""

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import structlog

from .errors import ConsistencyError, ContractError, FormatError

logger = structlog.get_logger(__name__)

CHECKPOINT_MAGIC = b"MXQ1"

# dtype code <-> little-endian numpy dtype
_DTYPE_CODES = {
    0: np.dtype('<f4'),
    1: np.dtype('<f8'),
    2: np.dtype('<i4'),
    3: np.dtype('<i8'),
}
_CODE_FOR_DTYPE = {dtype: code for code, dtype in _DTYPE_CODES.items()}


def atomic_write_bytes(path, payload: bytes):
    """Write to a temporary file in the target directory, then rename over `path`"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.unlink(temp_path)
        raise


def _row_dict(row) -> Dict[str, Any]:
    return row.to_dict() if hasattr(row, 'to_dict') else dict(row)


def _format_cell(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def report_format_for(path, fmt: Optional[str] = None) -> str:
    fmt = (fmt or Path(path).suffix.lstrip('.')).lower()
    if fmt not in ('csv', 'json'):
        raise ContractError(f"unsupported report format '{fmt}' for {path}")
    return fmt


def write_report(rows: Sequence, path, fmt: Optional[str] = None) -> Path:
    """Write rows atomically; CSV is RFC 4180 with a header, JSON an array of objects"""
    fmt = report_format_for(path, fmt)
    records = [_row_dict(row) for row in rows]
    if fmt == 'json':
        payload = (json.dumps(records, indent=2) + "\n").encode('utf-8')
    else:
        if not records:
            raise ContractError("cannot write a CSV report without rows (no header known)")
        columns = list(records[0].keys())
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\r\n')
        writer.writerow(columns)
        for record in records:
            if list(record.keys()) != columns:
                raise ConsistencyError(f"row columns {list(record.keys())} differ from header {columns}")
            writer.writerow([_format_cell(record[c]) for c in columns])
        payload = buffer.getvalue().encode('utf-8')
    atomic_write_bytes(path, payload)
    logger.debug("Report written", path=str(path), rows=len(records), format=fmt)
    return Path(path)


def _parse_cell(text: str) -> Any:
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text in ('true', 'false'):
        return text == 'true'
    return text


def read_report(path, fmt: Optional[str] = None) -> List[Dict[str, Any]]:
    """Read a report back; numeric CSV cells become int or float"""
    fmt = report_format_for(path, fmt)
    try:
        return _read_records(path, fmt)
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: not UTF-8 text ({e.reason} at byte {e.start})") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    except csv.Error as e:
        raise FormatError(f"{path}: malformed CSV: {e}") from e


def _read_records(path, fmt: str) -> List[Dict[str, Any]]:
    with open(path, 'r', encoding='utf-8', newline='') as f:
        if fmt == 'json':
            records = json.load(f)
            if not isinstance(records, list):
                raise FormatError(f"{path}: expected a JSON array of rows")
            return records
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty report")
        rows = []
        for line_number, cells in enumerate(reader, start=2):
            if len(cells) != len(header):
                raise FormatError(f"{path}: line {line_number} has {len(cells)} cells, header has {len(header)}")
            rows.append({name: _parse_cell(cell) for name, cell in zip(header, cells)})
        return rows


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]):
    """Binary checkpoint: magic, entry count, then per entry name, dtype code, shape, data"""
    chunks = [CHECKPOINT_MAGIC, struct.pack('<I', len(tensors))]
    for name, value in tensors.items():
        value = np.asarray(value)
        dtype = value.dtype.newbyteorder('<')
        code = _CODE_FOR_DTYPE.get(dtype)
        if code is None:
            raise ContractError(f"cannot store '{name}' of dtype {value.dtype}")
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<BI', code, value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype=dtype).tobytes())
    atomic_write_bytes(path, b"".join(chunks))
    logger.debug("Checkpoint saved", path=str(path), entries=len(tensors))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, 'rb') as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    offset = 4

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        values = struct.unpack_from(fmt, data, offset)
        offset += size
        return values

    (count,) = take('<I')
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = take('<I')
        if offset + name_length > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        try:
            name = data[offset:offset + name_length].decode('utf-8')
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: tensor name at byte {offset} is not UTF-8") from e
        offset += name_length
        code, ndim = take('<BI')
        if code not in _DTYPE_CODES:
            raise FormatError(f"{path}: unknown dtype code {code} for '{name}'")
        shape = take(f"<{ndim}Q")
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: truncated data for '{name}'")
        if nbytes == 0:
            tensors[name] = np.zeros(shape, dtype=dtype.newbyteorder('='))
        else:
            tensors[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize,
                                          offset=offset).reshape(shape).astype(dtype.newbyteorder('='))
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return tensors

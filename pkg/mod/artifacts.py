"""Run artifacts: versioned binary checkpoints, CSV, JSON and PGM rasters.

Checkpoint layout (all integers little-endian):

    8 bytes   magic ``BASCKPT\\0``
    4 bytes   format version
    4 bytes   header length
    n bytes   UTF-8 JSON header, sorted keys
    ...       float64 payload of every array in header order

The header always names the artifact kind and lists the arrays with their
shapes. Identical inputs give identical bytes.
"""

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from mod.dynamics import RandomizationRanges
from mod.errors import ContractError, DependencyError
from mod.estimator import EstimatorParams
from mod.policies import PolicyParams
from mod.ravalue import GridAxis, RANet, RATable, StateGrid
from mod.world import world_from_dict

logger = logging.getLogger(__name__)

MAGIC = b'BASCKPT\x00'
FORMAT_VERSION = 1

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    kind: str
    header: Dict[str, Any]
    arrays: Dict[str, np.ndarray]


def _clean(value):
    """JSON-safe copy: tuples to lists, numpy scalars to Python, NaN/inf to None."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def dumps_json(obj: Any) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2)


def write_json(path: PathLike, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(obj) + '\n', encoding='utf-8')
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"Missing artifact: {path}")
    return json.loads(path.read_text(encoding='utf-8'))


def write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    """RFC-4180 CSV with CRLF line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator='\r\n', float_format='%.17g')
    return path


def write_pgm(path: PathLike, raster: np.ndarray, lo: Optional[float] = None,
              hi: Optional[float] = None) -> Path:
    """8-bit binary PGM. Row 0 of ``raster`` is the top image row.

    Boolean rasters map to 0/255; numeric rasters map ``[lo, hi]`` linearly
    (defaults to the finite data range) and NaN to 0.
    """
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ContractError(f"PGM rasters must be 2-D, got shape {raster.shape}")
    if raster.dtype == bool:
        pixels = np.where(raster, 255, 0).astype(np.uint8)
    else:
        data = raster.astype(float)
        finite = data[np.isfinite(data)]
        lo = float(finite.min()) if lo is None and finite.size else (0.0 if lo is None else lo)
        hi = float(finite.max()) if hi is None and finite.size else (1.0 if hi is None else hi)
        span = hi - lo if hi > lo else 1.0
        scaled = np.clip((np.nan_to_num(data, nan=lo) - lo) / span, 0.0, 1.0)
        pixels = np.round(scaled * 255).astype(np.uint8)
    height, width = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode('ascii') + pixels.tobytes())
    return path


def read_pgm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b'\n', 3)
    if parts[0] != b'P5' or len(parts) < 4:
        raise ContractError(f"Not a binary PGM: {path}")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=width * height).reshape(height, width)


def checkpoint_bytes(kind: str, arrays: Dict[str, np.ndarray], header: Optional[Dict[str, Any]] = None) -> bytes:
    meta = dict(header or {})
    meta['kind'] = kind
    meta['arrays'] = [{'name': name, 'shape': list(np.shape(values))} for name, values in arrays.items()]
    encoded = json.dumps(_clean(meta), sort_keys=True, separators=(',', ':')).encode('utf-8')
    payload = b''.join(np.ascontiguousarray(values, dtype='<f8').tobytes() for values in arrays.values())
    return MAGIC + struct.pack('<II', FORMAT_VERSION, len(encoded)) + encoded + payload


def write_checkpoint(path: PathLike, kind: str, arrays: Dict[str, np.ndarray],
                     header: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(kind, arrays, header))
    logger.debug("Wrote %s checkpoint %s", kind, path)
    return path


def read_checkpoint(path: PathLike, kind: Optional[str] = None) -> Checkpoint:
    """Read a checkpoint, optionally checking its kind.

    Raises:
        DependencyError: If the file does not exist
        ContractError: On a bad magic, version, kind or truncated payload
    """
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"Missing checkpoint: {path}")
    data = path.read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ContractError(f"{path} is not a checkpoint")
    version, length = struct.unpack_from('<II', data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ContractError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + length].decode('utf-8'))
    if kind is not None and header.get('kind') != kind:
        raise ContractError(f"{path} holds a '{header.get('kind')}' checkpoint, expected '{kind}'")
    offset = start + length
    arrays = {}
    for entry in header['arrays']:
        shape = tuple(entry['shape'])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise ContractError(f"{path} is truncated")
        arrays[entry['name']] = np.frombuffer(data[offset:end], dtype='<f8').astype(float).reshape(shape)
        offset = end
    return Checkpoint(header['kind'], header, arrays)


def file_digest(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_policy(path: PathLike, params: PolicyParams, header: Dict[str, Any]) -> Path:
    meta = dict(header, layer_sizes=list(params.layer_sizes), weight_clip=params.weight_clip,
                l2_coeff=params.l2_coeff)
    return write_checkpoint(path, 'policy', {'weights': params.weights}, meta)


def load_policy(path: PathLike) -> PolicyParams:
    ckpt = read_checkpoint(path, 'policy')
    h = ckpt.header
    return PolicyParams(ckpt.arrays['weights'], tuple(h['layer_sizes']), h['weight_clip'], h['l2_coeff'])


def save_estimator(path: PathLike, params: EstimatorParams, header: Dict[str, Any]) -> Path:
    meta = dict(header, input_dim=params.input_dim, hidden_units=params.hidden_units, l2_coeff=params.l2_coeff)
    return write_checkpoint(path, 'estimator', {'weights': params.weights}, meta)


def load_estimator(path: PathLike) -> EstimatorParams:
    ckpt = read_checkpoint(path, 'estimator')
    h = ckpt.header
    return EstimatorParams(ckpt.arrays['weights'], h['input_dim'], h['hidden_units'], h['l2_coeff'])


def save_table(path: PathLike, table: RATable, header: Dict[str, Any]) -> Path:
    meta = dict(header,
                axes=[[a.name, a.lo, a.hi, a.n, a.periodic] for a in table.grid.axes],
                fixed=list(table.grid.fixed), world=table.world.to_dict(), gamma=table.gamma,
                margin_scale=table.margin_scale, bound=table.bound)
    return write_checkpoint(path, 'ra_table', {
        'mass_values': table.mass_values,
        'friction_values': table.friction_values,
        'values': table.values,
    }, meta)


def load_table(path: PathLike) -> RATable:
    ckpt = read_checkpoint(path, 'ra_table')
    h = ckpt.header
    grid = StateGrid(tuple(GridAxis(name, lo, hi, int(n), bool(periodic)) for name, lo, hi, n, periodic in h['axes']),
                     tuple(h['fixed']))
    return RATable(grid, world_from_dict(h['world']), ckpt.arrays['mass_values'], ckpt.arrays['friction_values'],
                   ckpt.arrays['values'], h['gamma'], h['margin_scale'], h['bound'])


def save_ranet(path: PathLike, net: RANet, header: Dict[str, Any]) -> Path:
    meta = dict(header, layer_sizes=list(net.layer_sizes), gamma=net.gamma, k_obstacles=net.k_obstacles,
                margin_scale=net.margin_scale, bound=net.bound)
    return write_checkpoint(path, 'ra_net', {'weights': net.weights}, meta)


def load_ranet(path: PathLike, ranges: RandomizationRanges = RandomizationRanges()) -> RANet:
    ckpt = read_checkpoint(path, 'ra_net')
    h = ckpt.header
    return RANet(ckpt.arrays['weights'], tuple(h['layer_sizes']), h['gamma'], ranges, h['k_obstacles'],
                 h['margin_scale'], h['bound'])


def split_header(header: Dict[str, Any], keys: Tuple[str, ...] = ('config_hash', 'seed')) -> Dict[str, Any]:
    return {k: header[k] for k in keys if k in header}

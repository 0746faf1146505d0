"""
WFLD binary field dumps

Layout (little-endian): magic 'WFLD', u32 version, n, N, components,
n_times; n_times f64 times; then f64 values row-major over
(time, component, x1, ..., xn).
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .constants import DUMP_MAGIC, DUMP_VERSION
from .errors import FieldDumpError

logger = logging.getLogger('wildeuler.field_dumps')

_HEADER = np.dtype([('magic', 'S4'), ('version', '<u4'), ('n', '<u4'), ('N', '<u4'),
                    ('components', '<u4'), ('n_times', '<u4')])


@dataclass(frozen=True, eq=False)
class FieldDump:
    n: int
    N: int
    times: np.ndarray
    values: np.ndarray  # (n_times, components, N, ..., N)

    @property
    def components(self) -> int:
        return self.values.shape[1]


def write_dump(path: Path, times: np.ndarray, values: np.ndarray, n: int):
    """Write a (n_times, components, *space) family"""
    times = np.asarray(times, dtype='<f8')
    values = np.asarray(values, dtype='<f8')
    if values.ndim != n + 2 or values.shape[0] != times.size:
        raise FieldDumpError(f"Values of shape {values.shape} are not a time family on an n={n} grid")
    N = values.shape[2]
    if values.shape[2:] != (N,) * n:
        raise FieldDumpError(f"Values of shape {values.shape} are not on a square grid")
    header = np.array([(DUMP_MAGIC, DUMP_VERSION, n, N, values.shape[1], times.size)], dtype=_HEADER)
    path = Path(path)
    with open(path, 'wb') as f:
        f.write(header.tobytes())
        f.write(times.tobytes())
        f.write(np.ascontiguousarray(values).tobytes())
    logger.debug(f"Wrote {path} ({values.shape})")


def read_dump(path: Path) -> FieldDump:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise FieldDumpError(f"Cannot read dump {path}: {e}")
    if len(raw) < _HEADER.itemsize:
        raise FieldDumpError(f"{path}: truncated header")
    header = np.frombuffer(raw[:_HEADER.itemsize], dtype=_HEADER)[0]
    if bytes(header['magic']) != DUMP_MAGIC:
        raise FieldDumpError(f"{path}: bad magic {bytes(header['magic'])!r}")
    if int(header['version']) != DUMP_VERSION:
        raise FieldDumpError(f"{path}: unsupported version {int(header['version'])}")
    n, N = int(header['n']), int(header['N'])
    components, n_times = int(header['components']), int(header['n_times'])
    if n not in (2, 3) or N < 1 or components < 1:
        raise FieldDumpError(f"{path}: bad declared shape n={n}, N={N}, components={components}")

    count = n_times * components * N ** n
    expected = _HEADER.itemsize + 8 * (n_times + count)
    if len(raw) != expected:
        raise FieldDumpError(f"{path}: payload is {len(raw)} bytes, header declares {expected}")
    offset = _HEADER.itemsize
    times = np.frombuffer(raw, dtype='<f8', count=n_times, offset=offset).copy()
    values = np.frombuffer(raw, dtype='<f8', count=count, offset=offset + 8 * n_times)
    return FieldDump(n, N, times, values.reshape((n_times, components) + (N,) * n).copy())

"""CSV serialization of simulation traces.

Columns are ``t,s1,s2,s3,err,phi_1..phi_m,ns_active,sigma2``; numbers use
``%.12g`` so every value keeps at least 9 significant digits and the bytes
are a pure function of the trace.
"""

from __future__ import annotations

import io
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .simulator import Trace

__all__ = ["trace_header", "trace_rows", "write_trace_csv", "read_trace_csv"]

FMT = "%.12g"


def trace_header(m: int) -> list[str]:
    return ["t", "s1", "s2", "s3", "err"] + [f"phi_{i + 1}" for i in range(m)] + ["ns_active", "sigma2"]


def trace_rows(trace: Trace, decimation: int = 1) -> np.ndarray:
    """Decimated table, one row per kept sample (``ceil(n / decimation)`` rows)."""
    if int(decimation) != decimation or decimation < 1:
        raise ValueError(f"decimation must be a positive integer, got {decimation!r}")
    sl = slice(None, None, int(decimation))
    return np.column_stack([
        trace.t[sl],
        trace.s_out[sl],
        trace.error_norm[sl],
        trace.phi[sl],
        trace.nullspace_active[sl].astype(float),
        trace.sigma2[sl],
    ])


def _format(table: np.ndarray, m: int) -> str:
    buf = io.StringIO()
    fmt = [FMT] * (5 + m) + ["%d", FMT]
    buf.write(",".join(trace_header(m)) + "\n")
    if len(table):
        np.savetxt(buf, table, fmt=fmt, delimiter=",", newline="\n")
    return buf.getvalue()


def write_trace_csv(trace: Trace, path, decimation: int = 1) -> int:
    """Write the trace atomically; returns the number of data rows.

    The file is assembled in a temporary sibling and renamed into place, so a
    failure never leaves a partial CSV behind.
    """
    m = trace.phi.shape[1]
    table = trace_rows(trace, decimation)
    assert len(table) == math.ceil(len(trace) / decimation)
    text = _format(table, m)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(table)


def read_trace_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data

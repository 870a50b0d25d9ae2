"""Atomic, byte-reproducible text output."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

FLOAT_FMT = "%.17g"


def fmt(x) -> str:
    return FLOAT_FMT % float(x)


def atomic_write_text(path, text: str) -> Path:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def matrix_to_csv(values) -> str:
    values = np.atleast_2d(np.asarray(values, dtype=float))
    return "".join(",".join(fmt(v) for v in row) + "\n" for row in values)


def write_table(path, header, rows) -> Path:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    return atomic_write_text(path, "\n".join(lines) + "\n")


def read_table(path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:] if ln]

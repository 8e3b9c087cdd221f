"""Utilities for output directories and the CSV/JSON files written there."""
from __future__ import annotations

import csv
import json
import os
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np

SIGNIFICANT_DIGITS = 6


def format_value(value: Any) -> str:
    """Render one CSV cell.

    Floats use 6 significant digits, ``None`` becomes an empty cell and
    everything else uses ``str``.
    """
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_, int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.{SIGNIFICANT_DIGITS}g}"
    return str(value)


def write_csv(
    path: os.PathLike[str] | str,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
):
    """Write a header row and data rows with pinned number formatting."""
    with open(path, "w", encoding="utf-8", newline="") as csv_file:
        writer = csv.writer(csv_file, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(cell) for cell in row])


def read_csv(path: os.PathLike[str] | str) -> list[dict[str, str]]:
    """Read a headed CSV file into one dict per row."""
    with open(path, encoding="utf-8", newline="") as csv_file:
        return list(csv.DictReader(csv_file))


def write_json(path: os.PathLike[str] | str, content: Mapping[str, Any]):
    """Write JSON with sorted keys so reruns produce identical bytes."""
    with open(path, "w", encoding="utf-8") as json_file:
        json.dump(content, json_file, indent=2, sort_keys=True)
        json_file.write("\n")


def read_json(path: os.PathLike[str] | str) -> dict[str, Any]:
    """Read a JSON object."""
    with open(path, encoding="utf-8") as json_file:
        return json.load(json_file)


def prepare_output_dir(path: os.PathLike[str] | str, force: bool) -> Path:
    """Create ``path`` or check that it may be written into.

    Parameters
    ----------
    path
        Directory that will receive a command's outputs.

    force
        Allow writing into an existing non-empty directory. Existing files
        with the same names are overwritten, others are left alone.

    Returns
    -------
    Path
        The directory, created if needed.

    Raises
    ------
    OutputDirError
        If the directory is non-empty and ``force`` is not set, or if the
        path exists but is not a directory.
    """
    out_dir = Path(path)
    if out_dir.exists() and not out_dir.is_dir():
        msg = f"Output path {out_dir} exists and is not a directory"
        raise OutputDirError(msg)
    if out_dir.is_dir() and any(out_dir.iterdir()) and not force:
        msg = f"Output directory {out_dir} is not empty (use --force)"
        raise OutputDirError(msg)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


class OutputDirError(Exception):
    """Exception raised when an output directory cannot be used."""

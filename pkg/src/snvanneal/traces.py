"""Binned single-photon counter (SPAD) traces and their file format."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ._validation import check_positive
from .exceptions import InvalidInputError
from .spectra import SNV, SpectralWindow

DEFAULT_BIN_S = 0.02


@dataclass(frozen=True, eq=False)
class SpadTrace:
    """Photon counts per time bin.

    Parameters
    ----------
    bin_width : float
        Seconds per bin.
    counts : array-like of int
        Non-negative counts.
    window : SpectralWindow
        Spectral band reaching the detector.
    t0 : float
        Campaign time (s) at the start of bin 0.
    """

    bin_width: float
    counts: np.ndarray
    window: SpectralWindow = SNV
    t0: float = 0.0

    def __post_init__(self):
        check_positive(self.bin_width, "bin_width")
        c = np.asarray(self.counts)
        if c.ndim != 1:
            raise InvalidInputError("counts must be one-dimensional")
        if c.size and (np.any(c < 0) or np.any(c != np.round(c))):
            raise InvalidInputError("counts must be non-negative integers")
        c = c.astype(np.int64)
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    def __len__(self):
        return self.counts.size

    @property
    def times(self) -> np.ndarray:
        """Start time of each bin (s)."""
        return self.t0 + np.arange(self.counts.size) * self.bin_width

    def bin_of(self, t: float) -> int:
        return int(np.floor((t - self.t0) / self.bin_width))


def write_trace(trace: SpadTrace, path) -> None:
    """CSV ``bin_index,counts`` plus a ``.json`` sidecar with bin width, window and start time."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_index", "counts"])
        for i, c in enumerate(trace.counts):
            w.writerow([i, int(c)])
    side = {"bin_s": trace.bin_width, "t0_s": trace.t0,
            "window": {"label": trace.window.label, "lo": trace.window.lo, "hi": trace.window.hi}}
    path.with_suffix(".json").write_text(json.dumps(side, sort_keys=True, indent=2) + "\n")


def read_trace(path, bin_s: Optional[float] = None) -> SpadTrace:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["bin_index", "counts"]:
        raise InvalidInputError(f"{path}: expected header 'bin_index,counts'")
    idx = np.array([int(r[0]) for r in rows[1:] if r])
    counts = np.array([int(r[1]) for r in rows[1:] if r], dtype=np.int64)
    if idx.size and not np.array_equal(idx, np.arange(idx.size)):
        raise InvalidInputError(f"{path}: bin_index must run 0, 1, 2, ...")
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    bin_s = bin_s if bin_s is not None else meta.get("bin_s", DEFAULT_BIN_S)
    w = meta.get("window")
    window = SpectralWindow(w["label"], w["lo"], w["hi"]) if w else SNV
    return SpadTrace(bin_s, counts, window, meta.get("t0_s", 0.0))

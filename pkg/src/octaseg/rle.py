"""Binary mask run-length encoding for wire transport.

Row-major scan, alternating run lengths starting with a zero-run (the first
entry is 0 when the mask begins with foreground). Run lengths always sum to
H*W; the (H, W) header travels alongside the runs.
"""

from __future__ import annotations

import numpy as np


def encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask).astype(bool).ravel()
    if flat.size == 0:
        return []
    changes = np.nonzero(flat[1:] != flat[:-1])[0] + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def decode(runs: list[int], h: int, w: int) -> np.ndarray:
    total = sum(runs)
    if total != h * w:
        raise ValueError(f"run lengths sum to {total}, expected {h * w}")
    if any(r < 0 for r in runs):
        raise ValueError("run lengths must be non-negative")
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    value = 0
    for run in runs:
        if value:
            flat[pos : pos + run] = 1
        pos += run
        value ^= 1
    return flat.reshape(h, w)

"""Serpentine traversals of an H x W token grid.

Tokens are stored in raster order (``index = row * W + col``).  A traversal
is named by its base path and a transform of the grid:

=========================  ===========  ============  =========
rule                       major axis   start corner  reversed
=========================  ===========  ============  =========
row_serpentine             rows         top-left      no
col_serpentine             columns      top-left      no
row_serpentine_rev         rows         top-left      yes
col_serpentine_rev         columns      top-left      yes
row_serpentine_rot90       columns      bottom-left   no
col_serpentine_rot90       rows         top-right     no
row_serpentine_rot180      rows         bottom-right  no
col_serpentine_rot180      columns      bottom-right  no
=========================  ===========  ============  =========

On a square grid the ``rot90`` rules are quarter turns of the base paths:
counter-clockwise for the row path, clockwise for the column path (the
other two turns reproduce the reversed paths when the side is even).
Rectangular grids use the same (axis, corner) recipe.  With both sides even
the eight rules are pairwise distinct; odd sides make some of them coincide.

Blocks permute their scan input with ``perm`` and un-permute the scan
output, so the residual stream stays in raster order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RULES = (
    "row_serpentine",
    "col_serpentine",
    "row_serpentine_rev",
    "col_serpentine_rev",
    "row_serpentine_rot90",
    "col_serpentine_rot90",
    "row_serpentine_rot180",
    "col_serpentine_rot180",
)

_RECIPES = {
    "row_serpentine": ("row", "tl", False),
    "col_serpentine": ("col", "tl", False),
    "row_serpentine_rev": ("row", "tl", True),
    "col_serpentine_rev": ("col", "tl", True),
    "row_serpentine_rot90": ("col", "bl", False),
    "col_serpentine_rot90": ("row", "tr", False),
    "row_serpentine_rot180": ("row", "br", False),
    "col_serpentine_rot180": ("col", "br", False),
}

SUPPORTED_K = (1, 2, 4, 8)


@dataclass(frozen=True)
class ScanOrder:
    perm: np.ndarray  # perm[k] = raster index visited at step k
    inv_perm: np.ndarray
    rule: str


def _serpentine(height, width, major, corner):
    rows = range(height) if corner in ("tl", "tr") else range(height - 1, -1, -1)
    cols = range(width) if corner in ("tl", "bl") else range(width - 1, -1, -1)
    out = []
    if major == "row":
        for k, r in enumerate(rows):
            line = list(cols) if k % 2 == 0 else list(cols)[::-1]
            out.extend(r * width + c for c in line)
    else:
        for k, c in enumerate(cols):
            line = list(rows) if k % 2 == 0 else list(rows)[::-1]
            out.extend(r * width + c for r in line)
    return out


def make_order(rule: str, height: int, width: int) -> ScanOrder:
    if rule not in _RECIPES:
        raise ValueError(f"unknown scan rule {rule!r}; expected one of {RULES}")
    if height < 1 or width < 1:
        raise ValueError(f"grid must be non-empty, got {height}x{width}")
    major, corner, rev = _RECIPES[rule]
    path = _serpentine(height, width, major, corner)
    perm = np.array(path[::-1] if rev else path, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return ScanOrder(perm=perm, inv_perm=inv, rule=rule)


def assign_orders(depth: int, k: int) -> list[str]:
    """Block ``l`` gets rule ``l mod k`` from :data:`RULES`."""
    if k not in SUPPORTED_K:
        raise ValueError(f"k must be one of {SUPPORTED_K}, got {k}")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    return [RULES[i % k] for i in range(depth)]


def permute_tokens(x: np.ndarray, order: ScanOrder, direction: str = "fwd", axis: int = 0) -> np.ndarray:
    """Gather tokens along ``axis`` by ``perm`` (``fwd``) or ``inv_perm`` (``inv``)."""
    if x.shape[axis] != order.perm.size:
        raise ValueError(f"token axis has length {x.shape[axis]}, order has {order.perm.size}")
    if direction == "fwd":
        return np.take(x, order.perm, axis=axis)
    if direction == "inv":
        return np.take(x, order.inv_perm, axis=axis)
    raise ValueError("direction must be 'fwd' or 'inv'")

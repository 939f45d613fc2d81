"""Procedural 8x12 stroke glyphs for lowercase latin letters.

Each glyph is a set of polylines on an 8-wide, 12-tall grid (baseline at
row 9, x-height at row 4, descenders to row 11). Rasterisation applies an
optional shear (slant) and a stroke thickness of 1 or 2 pixels.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

CELL_W = 8
CELL_H = 12
BASELINE = 9

_STROKES: dict[str, list[list[tuple[int, int]]]] = {
    "a": [[(6, 4), (6, 9)], [(6, 5), (4, 4), (2, 4), (1, 5), (1, 8), (2, 9), (4, 9), (6, 8)]],
    "b": [[(1, 0), (1, 9)], [(1, 5), (3, 4), (5, 4), (6, 5), (6, 8), (5, 9), (3, 9), (1, 8)]],
    "c": [[(6, 5), (5, 4), (2, 4), (1, 5), (1, 8), (2, 9), (5, 9), (6, 8)]],
    "d": [[(6, 0), (6, 9)], [(6, 5), (4, 4), (2, 4), (1, 5), (1, 8), (2, 9), (4, 9), (6, 8)]],
    "e": [[(1, 7), (6, 7), (6, 5), (5, 4), (2, 4), (1, 5), (1, 8), (2, 9), (5, 9), (6, 8)]],
    "f": [[(6, 1), (5, 0), (4, 0), (3, 1), (3, 9)], [(1, 4), (5, 4)]],
    "g": [[(6, 4), (6, 10), (5, 11), (2, 11), (1, 10)], [(6, 5), (4, 4), (2, 4), (1, 5), (1, 7), (2, 8), (4, 8), (6, 7)]],
    "h": [[(1, 0), (1, 9)], [(1, 5), (3, 4), (5, 4), (6, 5), (6, 9)]],
    "i": [[(3, 4), (3, 9)], [(3, 1), (3, 2)]],
    "j": [[(5, 4), (5, 10), (4, 11), (2, 11), (1, 10)], [(5, 1), (5, 2)]],
    "k": [[(1, 0), (1, 9)], [(6, 4), (1, 7)], [(3, 6), (6, 9)]],
    "l": [[(3, 0), (3, 8), (4, 9), (5, 9)]],
    "m": [[(0, 4), (0, 9)], [(0, 5), (1, 4), (2, 4), (3, 5), (3, 9)], [(3, 5), (4, 4), (6, 4), (7, 5), (7, 9)]],
    "n": [[(1, 4), (1, 9)], [(1, 5), (3, 4), (5, 4), (6, 5), (6, 9)]],
    "o": [[(2, 4), (5, 4), (6, 5), (6, 8), (5, 9), (2, 9), (1, 8), (1, 5), (2, 4)]],
    "p": [[(1, 4), (1, 11)], [(1, 5), (3, 4), (5, 4), (6, 5), (6, 8), (5, 9), (3, 9), (1, 8)]],
    "q": [[(6, 4), (6, 11), (7, 11)], [(6, 5), (4, 4), (2, 4), (1, 5), (1, 8), (2, 9), (4, 9), (6, 8)]],
    "r": [[(1, 4), (1, 9)], [(1, 6), (3, 4), (5, 4), (6, 5)]],
    "s": [[(6, 5), (5, 4), (2, 4), (1, 5), (2, 6), (5, 7), (6, 8), (5, 9), (2, 9), (1, 8)]],
    "t": [[(3, 1), (3, 8), (4, 9), (6, 9)], [(1, 4), (6, 4)]],
    "u": [[(1, 4), (1, 8), (2, 9), (4, 9), (6, 8)], [(6, 4), (6, 9)]],
    "v": [[(0, 4), (3, 9), (4, 9), (7, 4)]],
    "w": [[(0, 4), (2, 9), (3, 6), (4, 6), (5, 9), (7, 4)]],
    "x": [[(1, 4), (6, 9)], [(6, 4), (1, 9)]],
    "y": [[(1, 4), (1, 7), (2, 8), (5, 8), (6, 7)], [(6, 4), (6, 10), (5, 11), (2, 11)]],
    "z": [[(1, 4), (6, 4), (1, 9), (6, 9)]],
}

GLYPH_CHARS = frozenset(_STROKES)


class RenderError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


def _line(x0: int, y0: int, x1: int, y1: int):
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        yield x0, y0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def max_shear(slant: float) -> int:
    return int(math.ceil(abs(slant) * BASELINE))


@lru_cache(maxsize=4096)
def _glyph(ch: str, thickness: int, slant: float) -> np.ndarray:
    pad = max_shear(slant)
    out = np.zeros((CELL_H, CELL_W + 1 + 2 * pad), dtype=bool)
    for poly in _STROKES[ch]:
        for (xa, ya), (xb, yb) in zip(poly, poly[1:]):
            for x, y in _line(xa, ya, xb, yb):
                # shear around the baseline so letters lean without moving
                xs = x + pad + int(round(slant * (BASELINE - y)))
                out[y, xs : xs + thickness] = True
    out.setflags(write=False)
    return out


def glyph_bitmap(ch: str, thickness: int = 1, slant: float = 0.0) -> np.ndarray:
    """Boolean ink mask of shape ``(12, 9 + 2*max_shear(slant))``."""
    if ch not in _STROKES:
        raise RenderError(f"no glyph for character {ch!r}")
    if thickness not in (1, 2):
        raise ValueError("thickness must be 1 or 2")
    return _glyph(ch, thickness, round(float(slant), 3))

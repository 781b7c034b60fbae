"""Zhang-Suen thinning of binary cell masks."""

from __future__ import annotations

import numpy as np

# P2..P9 clockwise from north, as (drow, dcol)
_NEIGHBORS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _ring(img: np.ndarray, r: int, c: int) -> list[int]:
    return [int(img[r + dr, c + dc]) for dr, dc in _NEIGHBORS]


def _is_simple(ring: list[int]) -> bool:
    """True if removing the center pixel leaves 8-topology unchanged.

    The 8-connected foreground within the ring must form exactly one
    component, and the 4-connected background touching the center one too.
    """
    fg = [i for i in range(8) if ring[i]]
    if not fg:
        return False
    # ring positions are adjacent (8-sense) to their ring neighbors; corners also
    # reach the next-but-one edge pixel, which the cyclic walk already covers
    seen = {fg[0]}
    stack = [fg[0]]
    while stack:
        i = stack.pop()
        for j in ((i + 1) % 8, (i - 1) % 8) + (((i + 2) % 8, (i - 2) % 8) if i % 2 == 0 else ()):
            if ring[j] and j not in seen:
                seen.add(j)
                stack.append(j)
    if len(seen) != len(fg):
        return False
    # background 4-components adjacent to the center: edge positions 0,2,4,6
    edges_bg = [i for i in (0, 2, 4, 6) if not ring[i]]
    if not edges_bg:
        return False
    seen = {edges_bg[0]}
    stack = [edges_bg[0]]
    while stack:
        i = stack.pop()
        for j in ((i + 1) % 8, (i - 1) % 8):
            if not ring[j] and j not in seen:
                seen.add(j)
                stack.append(j)
    return all(e in seen for e in edges_bg)


def zhang_suen(mask: np.ndarray) -> np.ndarray:
    """Thin a binary mask to a one-pixel-wide skeleton.

    Candidate pixels are marked with the two classic Zhang-Suen
    sub-iterations; marked pixels are then removed one at a time only while
    each is still a simple, non-end pixel, so a 2x2 block or a diagonal
    pair never vanishes and component counts are preserved.
    """
    img = np.pad(np.asarray(mask) != 0, 1).astype(np.uint8)
    rows, cols = img.shape
    changed = True
    while changed:
        changed = False
        for step in (0, 1):
            marked = []
            for r in range(1, rows - 1):
                for c in range(1, cols - 1):
                    if not img[r, c]:
                        continue
                    p = _ring(img, r, c)
                    b = sum(p)
                    if not 2 <= b <= 6:
                        continue
                    a = sum(1 for i in range(8) if p[i] == 0 and p[(i + 1) % 8] == 1)
                    if a != 1:
                        continue
                    p2, p4, p6, p8 = p[0], p[2], p[4], p[6]
                    if step == 0 and (p2 * p4 * p6 or p4 * p6 * p8):
                        continue
                    if step == 1 and (p2 * p4 * p8 or p2 * p6 * p8):
                        continue
                    marked.append((r, c))
            for r, c in marked:
                p = _ring(img, r, c)
                if sum(p) >= 2 and _is_simple(p):
                    img[r, c] = 0
                    changed = True
    return img[1:-1, 1:-1].astype(bool)

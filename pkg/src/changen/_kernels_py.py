"""Pure-Python versions of the compiled mask kernels.

Behaviour matches ``_kernels.pyx`` exactly, including component numbering.
"""
from collections import deque

import numpy as np

_N4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_N8 = _N4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


def label_components(mask, connectivity=8):
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    m = np.asarray(mask).tolist()
    h = len(m)
    w = len(m[0]) if h else 0
    lab = [[0] * w for _ in range(h)]
    steps = _N8 if connectivity == 8 else _N4
    count = 0
    for r in range(h):
        row = m[r]
        for c in range(w):
            v = row[c]
            if v == 0 or lab[r][c]:
                continue
            count += 1
            lab[r][c] = count
            queue = deque([(r, c)])
            while queue:
                y, x = queue.popleft()
                for dy, dx in steps:
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and not lab[ny][nx] and m[ny][nx] == v:
                        lab[ny][nx] = count
                        queue.append((ny, nx))
    return np.array(lab, dtype=np.int32).reshape(h, w), count


def footprint_overlaps(occupied, footprint, r0, c0):
    fh, fw = footprint.shape
    if r0 < 0 or c0 < 0 or r0 + fh > occupied.shape[0] or c0 + fw > occupied.shape[1]:
        raise ValueError("footprint out of bounds")
    occ = occupied[r0:r0 + fh, c0:c0 + fw].tolist()
    fp = footprint.tolist()
    for r in range(fh):
        for c in range(fw):
            if fp[r][c] and occ[r][c]:
                return True
    return False

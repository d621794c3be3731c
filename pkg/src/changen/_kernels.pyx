# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled mask kernels: connected-component labeling and footprint overlap."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t x) noexcept nogil:
    cdef Py_ssize_t root = x, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


cdef inline void _union(Py_ssize_t[::1] parent, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    a = _find(parent, a)
    b = _find(parent, b)
    if a < b:
        parent[b] = a
    elif b < a:
        parent[a] = b


def label_components(mask, int connectivity=8):
    """Label same-class foreground components; ids ordered by first pixel in raster order."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    cdef cnp.int64_t[:, ::1] m = np.ascontiguousarray(mask, dtype=np.int64)
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1]
    out = np.zeros((h, w), dtype=np.int32)
    cdef cnp.int32_t[:, ::1] lab = out
    parent_arr = np.arange(h * w, dtype=np.intp)
    cdef Py_ssize_t[::1] parent = parent_arr
    cdef Py_ssize_t r, c, idx, root
    cdef cnp.int64_t v
    cdef bint diag = connectivity == 8
    cdef int count = 0
    with nogil:
        for r in range(h):
            for c in range(w):
                v = m[r, c]
                if v == 0:
                    continue
                idx = r * w + c
                if c > 0 and m[r, c - 1] == v:
                    _union(parent, idx, idx - 1)
                if r > 0:
                    if m[r - 1, c] == v:
                        _union(parent, idx, idx - w)
                    if diag:
                        if c > 0 and m[r - 1, c - 1] == v:
                            _union(parent, idx, idx - w - 1)
                        if c + 1 < w and m[r - 1, c + 1] == v:
                            _union(parent, idx, idx - w + 1)
        # roots are the smallest index in each set, so raster order of roots == first-pixel order
        for r in range(h):
            for c in range(w):
                if m[r, c] == 0:
                    continue
                idx = r * w + c
                root = _find(parent, idx)
                if root == idx:
                    count += 1
                    lab[r, c] = count
                else:
                    lab[r, c] = lab[root // w, root % w]
    return out, count


def footprint_overlaps(occupied, footprint, Py_ssize_t r0, Py_ssize_t c0):
    """True if any footprint pixel placed at (r0, c0) hits an occupied pixel."""
    cdef cnp.uint8_t[:, ::1] occ = np.ascontiguousarray(occupied, dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] fp = np.ascontiguousarray(footprint, dtype=np.uint8)
    cdef Py_ssize_t fh = fp.shape[0], fw = fp.shape[1], r, c
    cdef bint hit = False
    if r0 < 0 or c0 < 0 or r0 + fh > occ.shape[0] or c0 + fw > occ.shape[1]:
        raise ValueError("footprint out of bounds")
    with nogil:
        for r in range(fh):
            for c in range(fw):
                if fp[r, c] and occ[r0 + r, c0 + c]:
                    hit = True
                    break
            if hit:
                break
    return hit

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled z-buffer triangle rasterizer.

Mirrors ``mvpose._raster_py.rasterize_screen_triangles`` exactly: pixel centers at
integer coordinates, top-left fill rule, perspective-correct depth, float32 buffer.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport ceil, floor

cnp.import_array()


cdef inline bint _top_left(double dx, double dy) nogil:
    return (dy == 0.0 and dx > 0.0) or dy < 0.0


def rasterize_screen_triangles(double[:, :, ::1] tris, int width, int height):
    """Rasterize triangles given as (T, 3, 3) arrays of (u, v, z) per vertex.

    Returns a float32 (height, width) depth buffer; 0 marks empty pixels.
    """
    depth_arr = np.zeros((height, width), dtype=np.float32)
    cdef float[:, ::1] depth = depth_arr
    cdef Py_ssize_t n = tris.shape[0]
    cdef Py_ssize_t k
    cdef int x, y, xmin, xmax, ymin, ymax
    cdef double x0, y0, z0, x1, y1, z1, x2, y2, z2, tmp
    cdef double area, inv_area, w0, w1, w2, inv_z, px, py
    cdef bint tl0, tl1, tl2
    cdef float zf

    with nogil:
        for k in range(n):
            x0 = tris[k, 0, 0]; y0 = tris[k, 0, 1]; z0 = tris[k, 0, 2]
            x1 = tris[k, 1, 0]; y1 = tris[k, 1, 1]; z1 = tris[k, 1, 2]
            x2 = tris[k, 2, 0]; y2 = tris[k, 2, 1]; z2 = tris[k, 2, 2]
            area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
            if area == 0.0:
                continue
            if area < 0.0:
                tmp = x1; x1 = x2; x2 = tmp
                tmp = y1; y1 = y2; y2 = tmp
                tmp = z1; z1 = z2; z2 = tmp
                area = -area
            inv_area = 1.0 / area

            xmin = <int>ceil(min(x0, min(x1, x2)))
            xmax = <int>floor(max(x0, max(x1, x2)))
            ymin = <int>ceil(min(y0, min(y1, y2)))
            ymax = <int>floor(max(y0, max(y1, y2)))
            if xmin < 0: xmin = 0
            if ymin < 0: ymin = 0
            if xmax > width - 1: xmax = width - 1
            if ymax > height - 1: ymax = height - 1
            if xmin > xmax or ymin > ymax:
                continue

            # edge i is opposite vertex i
            tl0 = _top_left(x2 - x1, y2 - y1)
            tl1 = _top_left(x0 - x2, y0 - y2)
            tl2 = _top_left(x1 - x0, y1 - y0)

            for y in range(ymin, ymax + 1):
                py = <double>y
                for x in range(xmin, xmax + 1):
                    px = <double>x
                    w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
                    if w0 < 0.0 or (w0 == 0.0 and not tl0):
                        continue
                    w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
                    if w1 < 0.0 or (w1 == 0.0 and not tl1):
                        continue
                    w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
                    if w2 < 0.0 or (w2 == 0.0 and not tl2):
                        continue
                    inv_z = (w0 / z0 + w1 / z1 + w2 / z2) * inv_area
                    zf = <float>(1.0 / inv_z)
                    if depth[y, x] == 0.0 or zf < depth[y, x]:
                        depth[y, x] = zf
    return depth_arr

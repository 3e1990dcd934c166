"""Pure numpy fallback for the compiled rasterizer in ``_raster.pyx``.

Same contract and the same arithmetic, vectorised per triangle over its
clipped bounding box.
"""

import numpy as np


def _top_left(dx: float, dy: float) -> bool:
    return (dy == 0.0 and dx > 0.0) or dy < 0.0


def _inside(w: np.ndarray, top_left: bool) -> np.ndarray:
    return (w > 0.0) | ((w == 0.0) & top_left)


def rasterize_screen_triangles(tris: np.ndarray, width: int, height: int) -> np.ndarray:
    tris = np.ascontiguousarray(tris, dtype=np.float64)
    depth = np.zeros((height, width), dtype=np.float32)
    for tri in tris:
        (x0, y0, z0), (x1, y1, z1), (x2, y2, z2) = tri
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        if area < 0.0:
            x1, y1, z1, x2, y2, z2 = x2, y2, z2, x1, y1, z1
            area = -area

        xmin = max(int(np.ceil(min(x0, x1, x2))), 0)
        xmax = min(int(np.floor(max(x0, x1, x2))), width - 1)
        ymin = max(int(np.ceil(min(y0, y1, y2))), 0)
        ymax = min(int(np.floor(max(y0, y1, y2))), height - 1)
        if xmin > xmax or ymin > ymax:
            continue

        px = np.arange(xmin, xmax + 1, dtype=np.float64)[None, :]
        py = np.arange(ymin, ymax + 1, dtype=np.float64)[:, None]
        w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
        w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        inside = (
            _inside(w0, _top_left(x2 - x1, y2 - y1))
            & _inside(w1, _top_left(x0 - x2, y0 - y2))
            & _inside(w2, _top_left(x1 - x0, y1 - y0))
        )
        if not inside.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_z = (w0 / z0 + w1 / z1 + w2 / z2) * (1.0 / area)
            z = (1.0 / inv_z).astype(np.float32)
        window = depth[ymin : ymax + 1, xmin : xmax + 1]
        write = inside & ((window == 0.0) | (z < window))
        window[write] = z[write]
    return depth

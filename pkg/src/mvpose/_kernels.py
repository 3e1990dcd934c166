"""Select the compiled rasterizer when available, else the numpy fallback.

Set ``MVPOSE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from mvpose import _raster_py

BACKEND = "python"
rasterize_screen_triangles = _raster_py.rasterize_screen_triangles

if os.environ.get("MVPOSE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from mvpose._raster import rasterize_screen_triangles  # noqa: F811
    except ImportError:
        pass
    else:
        BACKEND = "cython"

python_rasterize_screen_triangles = _raster_py.rasterize_screen_triangles

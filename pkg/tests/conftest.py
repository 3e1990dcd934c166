import sys

import numpy as np

from mvpose.core import RigidTransform, exp_so3
from mvpose.render import extract_contour, occlusion_filter


def observed_contours(scene, instance=0, cameras=None):
    """Occlusion-filtered contours of one instance's GT modal masks in every view."""
    out = {}
    for cam in cameras or scene.cameras:
        mask = scene.modal_masks[cam.view_id][instance]
        if mask.any():
            out[cam.view_id] = occlusion_filter(extract_contour(mask), scene.depth[cam.view_id], cam)
    return out


def perturb(pose, rng, max_deg=5.0, max_mm=10.0):
    """Uniform random axis with angle in [0, max_deg], uniform direction with length in [0, max_mm]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0.0, max_deg))
    d = rng.normal(size=3)
    d *= rng.uniform(0.0, max_mm) / np.linalg.norm(d)
    return RigidTransform(exp_so3(axis * angle) @ pose.rotation, pose.translation + d)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.REPORT:
            terminalreporter.write_line(line)

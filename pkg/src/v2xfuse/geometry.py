"""Planar rigid transforms and point sets.

Everything cross-agent gets aligned through SE(2): reference points,
trajectory anchors, and occupancy grids live in per-agent frames and
are mapped into the ego frame before fusion.
"""

import numpy as np


class RigidTransform2D:
    """Rotation (2x2 orthonormal, det +1) plus translation in meters."""

    def __init__(self, rotation, translation):
        r = np.ascontiguousarray(rotation, dtype=np.float64)
        t = np.ascontiguousarray(translation, dtype=np.float64).reshape(2)
        if r.shape != (2, 2):
            raise ValueError("rotation must be 2x2")
        if np.max(np.abs(r.T @ r - np.eye(2))) > 1e-12:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-12:
            raise ValueError("rotation must have determinant +1")
        self.rotation = r
        self.translation = t

    @staticmethod
    def identity():
        return RigidTransform2D(np.eye(2), np.zeros(2))

    @staticmethod
    def from_pose(x, y, theta):
        c, s = np.cos(theta), np.sin(theta)
        return RigidTransform2D(np.array([[c, -s], [s, c]]), np.array([x, y]))

    def __repr__(self):
        return (f"RigidTransform2D(t=({self.translation[0]:.3f}, "
                f"{self.translation[1]:.3f}))")


class PointSet2D:
    """n points, rows of (x, y) meters."""

    def __init__(self, xy):
        a = np.ascontiguousarray(xy, dtype=np.float64)
        if a.size == 0:
            a = a.reshape(0, 2)
        if a.ndim != 2 or a.shape[1] != 2:
            raise ValueError("points must be an (n, 2) array")
        if not np.all(np.isfinite(a)):
            raise ValueError("points must be finite")
        self.xy = a

    def __len__(self):
        return self.xy.shape[0]

    @staticmethod
    def empty():
        return PointSet2D(np.zeros((0, 2)))


def apply(t, pts):
    """Map every point p to R p + translation."""
    xy = pts.xy if isinstance(pts, PointSet2D) else np.asarray(pts, float)
    out = xy @ t.rotation.T + t.translation
    return PointSet2D(out) if isinstance(pts, PointSet2D) else out


def compose(a, b):
    """compose(a, b) applies b first: apply(compose(a,b), p) = apply(a, apply(b, p))."""
    return RigidTransform2D(a.rotation @ b.rotation,
                            a.rotation @ b.translation + a.translation)


def invert(t):
    rt = np.ascontiguousarray(t.rotation.T)
    return RigidTransform2D(rt, -(rt @ t.translation))


def rot_feature(t):
    """1x6 fusion feature: row-major flattened rotation then translation."""
    r, tr = t.rotation, t.translation
    return np.array([[r[0, 0], r[0, 1], r[1, 0], r[1, 1], tr[0], tr[1]]])

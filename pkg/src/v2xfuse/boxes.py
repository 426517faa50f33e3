"""Oriented BEV boxes: corners, overlap tests, exact polygon IoU.

A box is (cx, cy, length, width, heading); length runs along the
heading direction. Overlap uses the separating-axis test; IoU clips
one rectangle against the other (both convex) and applies the
shoelace formula.
"""

import numpy as np


def corners(box):
    """(4,2) corners in counter-clockwise order."""
    cx, cy, length, width, heading = box
    c, s = np.cos(heading), np.sin(heading)
    dx, dy = length / 2.0, width / 2.0
    local = np.array([[dx, dy], [-dx, dy], [-dx, -dy], [dx, -dy]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def _axes(pts):
    # Two edge normals suffice for a rectangle.
    e1 = pts[1] - pts[0]
    e2 = pts[3] - pts[0]
    return [e1, e2]


def overlap(box_a, box_b):
    """True when the boxes intersect (touching edges count)."""
    pa, pb = corners(box_a), corners(box_b)
    for axis in _axes(pa) + _axes(pb):
        proj_a = pa @ axis
        proj_b = pb @ axis
        if proj_a.max() < proj_b.min() or proj_b.max() < proj_a.min():
            return False
    return True


def _clip(poly, a, b):
    """Keep the part of poly on the left of directed edge a->b."""
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        side_p = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        side_q = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])
        if side_p >= 0.0:
            out.append(p)
            if side_q < 0.0:
                t = side_p / (side_p - side_q)
                out.append(p + t * (q - p))
        elif side_q >= 0.0:
            t = side_p / (side_p - side_q)
            out.append(p + t * (q - p))
    return out


def _area(poly):
    if len(poly) < 3:
        return 0.0
    a = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        a += x0 * y1 - x1 * y0
    return abs(a) / 2.0


def intersection_area(box_a, box_b):
    poly = list(corners(box_a))
    cb = corners(box_b)
    for i in range(4):
        poly = _clip(poly, cb[i], cb[(i + 1) % 4])
        if not poly:
            return 0.0
    return _area(poly)


def iou(box_a, box_b):
    """Exact intersection-over-union of two oriented rectangles."""
    inter = intersection_area(box_a, box_b)
    if inter == 0.0:
        return 0.0
    area_a = box_a[2] * box_a[3]
    area_b = box_b[2] * box_b[3]
    return inter / (area_a + area_b - inter)

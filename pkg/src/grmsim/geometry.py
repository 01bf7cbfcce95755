"""Planar geometry helpers: angle wrapping, convex footprint polygons, box clipping."""

from __future__ import annotations

import math

Point = tuple[float, float]


def wrap_360(deg: float) -> float:
    """Normalize an angle to [0, 360)."""
    r = deg % 360.0
    return 0.0 if r == 360.0 else r  # fmod of a tiny negative can round up to 360


def wrap_180(deg: float) -> float:
    """Normalize an angle to (-180, 180]."""
    r = deg % 360.0
    return r - 360.0 if r > 180.0 else r


def ang_dist_mod180(a_deg: float, b_deg: float) -> float:
    """Distance between two undirected axes (angles identified mod 180), in [0, 90]."""
    d = abs(a_deg - b_deg) % 180.0
    return min(d, 180.0 - d)


def polygon_area_centroid(pts: list[Point] | tuple[Point, ...]) -> tuple[float, float, float]:
    """Signed shoelace area and area centroid of a simple polygon."""
    n = len(pts)
    if n < 3:
        raise ValueError("polygon needs at least 3 vertices")
    a2 = 0.0
    cx = 0.0
    cy = 0.0
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        cross = x0 * y1 - x1 * y0
        a2 += cross
        cx += (x0 + x1) * cross
        cy += (y0 + y1) * cross
    if a2 == 0.0:
        raise ValueError("degenerate polygon (zero area)")
    area = a2 / 2.0
    return area, cx / (3.0 * a2), cy / (3.0 * a2)


def is_convex(pts: list[Point] | tuple[Point, ...]) -> bool:
    """True if the vertex loop is convex (collinear runs allowed, either winding)."""
    n = len(pts)
    if n < 3:
        return False
    sign = 0
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        x2, y2 = pts[(i + 2) % n]
        cross = (x1 - x0) * (y2 - y1) - (y1 - y0) * (x2 - x1)
        if abs(cross) < 1e-12:
            continue
        s = 1 if cross > 0 else -1
        if sign == 0:
            sign = s
        elif s != sign:
            return False
    return sign != 0


def regular_polygon(diameter: float, sides: int = 32, phase_deg: float = 0.0) -> tuple[Point, ...]:
    """Regular polygon with vertices on the circle of the given diameter, centered at origin."""
    r = diameter / 2.0
    out = []
    for k in range(sides):
        a = math.radians(phase_deg + 360.0 * k / sides)
        out.append((r * math.cos(a), r * math.sin(a)))
    return tuple(out)


def transform_polygon(pts, theta_deg: float, dx: float, dy: float) -> list[Point]:
    """Rotate by theta about the origin, then translate."""
    c = math.cos(math.radians(theta_deg))
    s = math.sin(math.radians(theta_deg))
    return [(c * x - s * y + dx, s * x + c * y + dy) for x, y in pts]


def _clip_halfplane(pts: list[Point], inside, intersect) -> list[Point]:
    out: list[Point] = []
    n = len(pts)
    for i in range(n):
        cur = pts[i]
        nxt = pts[(i + 1) % n]
        cin, nin = inside(cur), inside(nxt)
        if cin:
            out.append(cur)
            if not nin:
                out.append(intersect(cur, nxt))
        elif nin:
            out.append(intersect(cur, nxt))
    return out


def clip_polygon_box(pts, xmin: float, xmax: float, ymin: float, ymax: float) -> list[Point]:
    """Sutherland-Hodgman clip of a convex polygon against an axis-aligned box."""

    def cut_x(p, q, x):
        t = (x - p[0]) / (q[0] - p[0])
        return (x, p[1] + t * (q[1] - p[1]))

    def cut_y(p, q, y):
        t = (y - p[1]) / (q[1] - p[1])
        return (p[0] + t * (q[0] - p[0]), y)

    poly = list(pts)
    for inside, intersect in (
        (lambda p: p[0] >= xmin, lambda p, q: cut_x(p, q, xmin)),
        (lambda p: p[0] <= xmax, lambda p, q: cut_x(p, q, xmax)),
        (lambda p: p[1] >= ymin, lambda p, q: cut_y(p, q, ymin)),
        (lambda p: p[1] <= ymax, lambda p, q: cut_y(p, q, ymax)),
    ):
        if not poly:
            return []
        poly = _clip_halfplane(poly, inside, intersect)
    return poly


def extent_along_x(pts) -> float:
    """Width of a point set along x; 0 for fewer than 2 points."""
    if len(pts) < 2:
        return 0.0
    xs = [p[0] for p in pts]
    return max(xs) - min(xs)


def edge_normal_axes_deg(pts) -> list[float]:
    """Undirected outward-normal angles (mod 180, in [0, 180)) of each polygon edge."""
    out = []
    n = len(pts)
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        ex, ey = x1 - x0, y1 - y0
        if ex == 0.0 and ey == 0.0:
            continue
        # normal of edge direction; orientation is irrelevant mod 180
        out.append(math.degrees(math.atan2(ex, -ey)) % 180.0)
    return out

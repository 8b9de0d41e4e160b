"""Box geometry: calibration, projection, rotated IoU, and distance features.

All 3D boxes live in the LiDAR frame (x forward, y left, z up) and carry a
single yaw angle ``theta`` about the vertical axis; rotations about x/y are
out of scope.  The vertical convention is *center-based*: ``z`` is the center
of the vertical extent and corners span ``[z - h/2, z + h/2]``.  KITTI-style
camera-frame labels (bottom-face origin, rotation ``ry`` about the camera y
axis) are converted to this convention at ingestion via
:func:`camera_box_to_lidar`.

Rotated bird's-eye-view (BEV) overlap is computed by Sutherland-Hodgman
convex-polygon clipping with a shoelace area.  Two implementations share the
same algorithm: a scalar one (:func:`intersect_convex`) that materializes the
intersection polygon, and a batched one (:func:`iou_bev_pairs`) that
vectorizes over many box pairs for NMS and evaluation loops.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError

# Polygon-clipping tolerances: vertices closer than MERGE_EPS meters are
# merged, and intersection areas below AREA_EPS square meters count as zero,
# so sliver polygons from nearly-touching boxes do not produce noise IoUs.
MERGE_EPS = 1e-9
AREA_EPS = 1e-12

# Orthonormality tolerance for calibration rotation blocks.
ORTHO_EPS = 1e-6

# Footprint corner sign patterns, counter-clockwise when viewed from +z
# (down the vertical axis): (+l/2,+w/2), (-l/2,+w/2), (-l/2,-w/2), (+l/2,-w/2).
FOOTPRINT_SIGNS = np.array(
    [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]]
)


def normalize_angle(theta: float) -> float:
    """Map an angle in radians to the interval (-pi, pi]."""
    wrapped = math.remainder(theta, math.tau)
    if wrapped <= -math.pi:
        wrapped += math.tau
    return wrapped


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box in the LiDAR frame.

    Attributes:
        h: Height in meters (> 0).
        w: Width in meters (> 0).
        l: Length in meters (> 0).
        x: Center x in meters.
        y: Center y in meters.
        z: Center z in meters (center of the vertical extent).
        theta: Yaw about the vertical axis, normalized to (-pi, pi] at
            construction.
    """

    h: float
    w: float
    l: float
    x: float
    y: float
    z: float
    theta: float

    def __post_init__(self):
        if not (self.h > 0 and self.w > 0 and self.l > 0):
            raise ValueError(
                f"box dimensions must be positive, got "
                f"h={self.h}, w={self.w}, l={self.l}"
            )
        object.__setattr__(self, "theta", normalize_angle(self.theta))


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned 2D box in image coordinates (pixels).

    Attributes:
        x1: Left edge; must satisfy x1 < x2.
        y1: Top edge; must satisfy y1 < y2.
        x2: Right edge.
        y2: Bottom edge.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(
                f"degenerate 2D box: ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def height(self) -> float:
        return self.y2 - self.y1


@dataclass(frozen=True)
class PolygonBEV:
    """Convex polygon in the BEV plane, vertices counter-clockwise.

    Attributes:
        vertices: (n, 2) array of (x, y) meters, n >= 3, CCW order, convex.
    """

    vertices: np.ndarray

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 2 or verts.shape[0] < 3:
            raise ValueError(f"polygon needs >= 3 (x, y) vertices, got shape {verts.shape}")
        nxt = np.roll(verts, -1, axis=0)
        nxt2 = np.roll(verts, -2, axis=0)
        e1 = nxt - verts
        e2 = nxt2 - nxt
        cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(cross < -MERGE_EPS):
            raise ValueError("polygon vertices must be convex and counter-clockwise")
        object.__setattr__(self, "vertices", verts)

    @property
    def area(self) -> float:
        return float(shoelace_area(self.vertices))


@dataclass(frozen=True)
class Calibration:
    """Camera/LiDAR calibration for one frame.

    Attributes:
        P: (3, 4) camera projection matrix in pixels.
        R0: (3, 3) rectification rotation (orthonormal within 1e-6).
        Tr_velo_to_cam: (3, 4) rigid transform LiDAR -> camera; its 3x3
            rotation block is orthonormal within 1e-6.
        image_width: Image width in pixels.
        image_height: Image height in pixels.
    """

    P: np.ndarray
    R0: np.ndarray
    Tr_velo_to_cam: np.ndarray
    image_width: int
    image_height: int
    # Combined 3x4 LiDAR -> image homogeneous projection, cached because the
    # encoder applies it to every candidate corner.
    M: np.ndarray = field(init=False, repr=False, compare=False)
    # True inverses of the rotation blocks; file-sourced rotations are only
    # orthonormal to encoding precision, so transposes would lose ~1e-7.
    R0_inv: np.ndarray = field(init=False, repr=False, compare=False)
    Tr_rot_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64).reshape(3, 4)
        R0 = np.asarray(self.R0, dtype=np.float64).reshape(3, 3)
        Tr = np.asarray(self.Tr_velo_to_cam, dtype=np.float64).reshape(3, 4)
        if np.max(np.abs(R0.T @ R0 - np.eye(3))) >= ORTHO_EPS:
            raise ValueError("R0_rect rotation is not orthonormal within 1e-6")
        rot = Tr[:, :3]
        if np.max(np.abs(rot.T @ rot - np.eye(3))) >= ORTHO_EPS:
            raise ValueError(
                "Tr_velo_to_cam rotation block is not orthonormal within 1e-6"
            )
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R0", R0)
        object.__setattr__(self, "Tr_velo_to_cam", Tr)
        rect4 = np.eye(4)
        rect4[:3, :3] = R0
        tr4 = np.vstack([Tr, [0.0, 0.0, 0.0, 1.0]])
        object.__setattr__(self, "M", P @ rect4 @ tr4)
        object.__setattr__(self, "R0_inv", np.linalg.inv(R0))
        object.__setattr__(self, "Tr_rot_inv", np.linalg.inv(rot))


def identity_calibration(image_width: int = 1242, image_height: int = 375) -> Calibration:
    """Calibration whose camera frame coincides with the LiDAR frame."""
    return Calibration(
        P=np.hstack([np.eye(3), np.zeros((3, 1))]),
        R0=np.eye(3),
        Tr_velo_to_cam=np.hstack([np.eye(3), np.zeros((3, 1))]),
        image_width=image_width,
        image_height=image_height,
    )


_CALIB_KEYS = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}


def parse_calibration(text: str, image_width: int, image_height: int) -> Calibration:
    """Parse KITTI-style calibration text.

    Args:
        text: Contents of a calibration file with lines keyed ``P2:``,
            ``R0_rect:``, and ``Tr_velo_to_cam:`` followed by
            whitespace-separated decimal values (12, 9, and 12 respectively).
        image_width: Image width in pixels (image size comes from
            configuration, not the calibration file).
        image_height: Image height in pixels.

    Returns:
        Populated :class:`Calibration`.

    Raises:
        ParseError: On a missing key, wrong value count, or non-numeric
            token; the message names the offending key.
    """
    values: dict[str, np.ndarray] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        if key not in _CALIB_KEYS:
            continue
        tokens = rest.split()
        if len(tokens) != _CALIB_KEYS[key]:
            raise ParseError(
                f"calibration key {key}: expected {_CALIB_KEYS[key]} values, "
                f"got {len(tokens)}"
            )
        try:
            values[key] = np.array([float(tok) for tok in tokens])
        except ValueError as exc:
            raise ParseError(f"calibration key {key}: non-numeric value ({exc})") from None
    for key in _CALIB_KEYS:
        if key not in values:
            raise ParseError(f"calibration key {key} missing")
    try:
        return Calibration(
            P=values["P2"].reshape(3, 4),
            R0=values["R0_rect"].reshape(3, 3),
            Tr_velo_to_cam=values["Tr_velo_to_cam"].reshape(3, 4),
            image_width=image_width,
            image_height=image_height,
        )
    except ValueError as exc:
        raise ParseError(f"invalid calibration matrices: {exc}") from None


def format_calibration(calib: Calibration) -> str:
    """Serialize a calibration back to the KITTI text format."""
    lines = []
    for key, mat in (
        ("P2", calib.P),
        ("R0_rect", calib.R0),
        ("Tr_velo_to_cam", calib.Tr_velo_to_cam),
    ):
        flat = " ".join(f"{v:.12e}" for v in np.asarray(mat).ravel())
        lines.append(f"{key}: {flat}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Corners and projection
# ---------------------------------------------------------------------------


def box3d_corners(b: Box3D) -> np.ndarray:
    """Return the 8 corners of an oriented box in the LiDAR frame.

    Corner ordering is fixed: bottom face (z - h/2) counter-clockwise as seen
    from above, then the top face (z + h/2) in the same footprint order, so
    corner ``i`` and ``i + 4`` are vertically aligned.

    Args:
        b: Source box.

    Returns:
        (8, 3) float array of corner coordinates in meters.
    """
    return boxes3d_corners(np.array([[b.h, b.w, b.l, b.x, b.y, b.z, b.theta]]))[0]


def boxes3d_corners(boxes: np.ndarray) -> np.ndarray:
    """Vectorized corner generation.

    Args:
        boxes: (n, 7) array of rows ``[h, w, l, x, y, z, theta]``.

    Returns:
        (n, 8, 3) array of corners, ordered as in :func:`box3d_corners`.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    h, w, l = boxes[:, 0], boxes[:, 1], boxes[:, 2]
    cos_t, sin_t = np.cos(boxes[:, 6]), np.sin(boxes[:, 6])
    # Local footprint offsets (n, 4): signs * (l/2, w/2), rotated by theta.
    dx = FOOTPRINT_SIGNS[:, 0][None, :] * (l[:, None] / 2.0)
    dy = FOOTPRINT_SIGNS[:, 1][None, :] * (w[:, None] / 2.0)
    gx = boxes[:, 3][:, None] + cos_t[:, None] * dx - sin_t[:, None] * dy
    gy = boxes[:, 4][:, None] + sin_t[:, None] * dx + cos_t[:, None] * dy
    corners = np.empty((boxes.shape[0], 8, 3))
    corners[:, :4, 0] = gx
    corners[:, 4:, 0] = gx
    corners[:, :4, 1] = gy
    corners[:, 4:, 1] = gy
    corners[:, :4, 2] = (boxes[:, 5] - h / 2.0)[:, None]
    corners[:, 4:, 2] = (boxes[:, 5] + h / 2.0)[:, None]
    return corners


def footprint_corners(boxes: np.ndarray) -> np.ndarray:
    """BEV footprint corners (n, 4, 2), counter-clockwise from above."""
    corners = boxes3d_corners(np.asarray(boxes, dtype=np.float64).reshape(-1, 7))
    return corners[:, :4, :2]


def project_points(c: Calibration, pts: np.ndarray):
    """Project LiDAR-frame points into the image plane.

    Each point is mapped LiDAR -> camera by ``Tr_velo_to_cam``, rectified by
    ``R0``, projected by ``P``, and divided by its homogeneous depth.

    Args:
        c: Calibration.
        pts: (n, 3) array of LiDAR-frame points in meters.

    Returns:
        Tuple ``(uv, depths, behind)``: (n, 2) pixel coordinates, (n,)
        camera-frame depths before division, and an (n,) boolean mask that is
        True for points with depth <= 0 (behind the camera).  Behind-camera
        points are flagged rather than silently projected; their ``uv``
        values are not meaningful.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    hom = np.hstack([pts, np.ones((pts.shape[0], 1))])
    proj = hom @ c.M.T
    depths = proj[:, 2]
    behind = depths <= 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = proj[:, :2] / depths[:, None]
    return uv, depths, behind


def lidar_to_rect_points(c: Calibration, pts: np.ndarray) -> np.ndarray:
    """Map LiDAR-frame points to the rectified camera frame."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    cam = pts @ c.Tr_velo_to_cam[:, :3].T + c.Tr_velo_to_cam[:, 3]
    return cam @ c.R0.T


def rect_to_lidar_points(c: Calibration, pts: np.ndarray) -> np.ndarray:
    """Inverse of :func:`lidar_to_rect_points` (rigid part only)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    cam = pts @ c.R0_inv.T
    return (cam - c.Tr_velo_to_cam[:, 3]) @ c.Tr_rot_inv.T


def project_box3d(c: Calibration, b: Box3D, clip: bool = True) -> Box2D | None:
    """Axis-aligned image hull of a projected 3D box.

    Projects all 8 corners and takes the min/max of the projected pixel
    coordinates.  Corners behind the camera are excluded from the hull; this
    is an approximation for boxes straddling the image border (exact frustum
    clipping is out of scope).

    Args:
        c: Calibration.
        b: Box to project.
        clip: When True (default), intersect the hull with the image
            rectangle ``[0, W] x [0, H]``.

    Returns:
        The hull as a :class:`Box2D`, or None when every corner is behind
        the camera or the (clipped) hull is empty/degenerate.
    """
    uv, _, behind = project_points(c, box3d_corners(b))
    uv = uv[~behind]
    if uv.shape[0] == 0:
        return None
    x1, y1 = uv.min(axis=0)
    x2, y2 = uv.max(axis=0)
    if clip:
        x1, y1 = max(x1, 0.0), max(y1, 0.0)
        x2, y2 = min(x2, float(c.image_width)), min(y2, float(c.image_height))
    if x1 >= x2 or y1 >= y2:
        return None
    return Box2D(x1, y1, x2, y2)


def project_boxes3d(c: Calibration, boxes: np.ndarray, clip: bool = True):
    """Vectorized :func:`project_box3d` over (n, 7) box rows.

    Returns:
        Tuple ``(hulls, valid)``: (n, 4) array of ``[x1, y1, x2, y2]`` hulls
        and an (n,) boolean validity mask.  Rows with ``valid == False``
        contain NaN.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    n = boxes.shape[0]
    hulls = np.full((n, 4), np.nan)
    if n == 0:
        return hulls, np.zeros(0, dtype=bool)
    corners = boxes3d_corners(boxes).reshape(-1, 3)
    uv, _, behind = project_points(c, corners)
    uv = uv.reshape(n, 8, 2)
    behind = behind.reshape(n, 8)
    masked = np.where(behind[:, :, None], np.nan, uv)
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-behind rows
        mins = np.nanmin(masked, axis=1)
        maxs = np.nanmax(masked, axis=1)
    if clip:
        mins = np.maximum(mins, 0.0)
        maxs = np.minimum(maxs, [float(c.image_width), float(c.image_height)])
    valid = ~np.all(behind, axis=1)
    valid &= np.all(np.isfinite(mins), axis=1) & np.all(np.isfinite(maxs), axis=1)
    valid &= (mins[:, 0] < maxs[:, 0]) & (mins[:, 1] < maxs[:, 1])
    hulls[valid, 0] = mins[valid, 0]
    hulls[valid, 1] = mins[valid, 1]
    hulls[valid, 2] = maxs[valid, 0]
    hulls[valid, 3] = maxs[valid, 1]
    return hulls, valid


# ---------------------------------------------------------------------------
# Camera-frame (KITTI label) box conversions
# ---------------------------------------------------------------------------


def camera_box_to_lidar(
    c: Calibration, h: float, w: float, l: float,
    x: float, y: float, z: float, ry: float,
) -> Box3D:
    """Convert a camera-frame box (bottom-face origin, yaw ``ry``) to LiDAR.

    The camera-frame location ``(x, y, z)`` is the center of the bottom face
    with the camera y axis pointing down; ``ry`` is the rotation about the
    camera y axis.  The vertical center is recovered by shifting half the
    height up, and the yaw is recovered by transforming the forward direction
    vector, which stays exact for any calibration whose rotation maps the
    camera vertical onto the LiDAR vertical.
    """
    bottom_rect = np.array([[x, y, z]])
    up_rect = np.array([[0.0, -1.0, 0.0]])  # camera-frame "up" (y points down)
    center_rect = bottom_rect + (h / 2.0) * up_rect
    center = rect_to_lidar_points(c, center_rect)[0]
    forward_rect = np.array([math.cos(ry), 0.0, -math.sin(ry)])
    forward = c.Tr_rot_inv @ c.R0_inv @ forward_rect
    theta = math.atan2(forward[1], forward[0])
    return Box3D(h=h, w=w, l=l, x=center[0], y=center[1], z=center[2], theta=theta)


def lidar_box_to_camera(c: Calibration, b: Box3D):
    """Inverse of :func:`camera_box_to_lidar`.

    Returns:
        Tuple ``(h, w, l, x, y, z, ry)`` in the camera-frame label
        convention (bottom-face origin, rotation about camera y).
    """
    center_rect = lidar_to_rect_points(c, np.array([[b.x, b.y, b.z]]))[0]
    bottom_rect = center_rect + np.array([0.0, b.h / 2.0, 0.0])
    rot = c.R0 @ c.Tr_velo_to_cam[:, :3]
    forward = rot @ np.array([math.cos(b.theta), math.sin(b.theta), 0.0])
    ry = math.atan2(-forward[2], forward[0])
    return b.h, b.w, b.l, bottom_rect[0], bottom_rect[1], bottom_rect[2], ry


# ---------------------------------------------------------------------------
# IoU family
# ---------------------------------------------------------------------------


def iou_2d(a: Box2D, b: Box2D) -> float:
    """Axis-aligned intersection-over-union of two 2D boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_2d_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise axis-aligned IoU between (m, 4) and (n, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0.0, inter / union, 0.0)
    return iou


def shoelace_area(vertices: np.ndarray) -> float:
    """Signed-area magnitude of a polygon given as an (n, 2) vertex array."""
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon_halfplane(poly: list, p0, p1) -> list:
    """One Sutherland-Hodgman pass: keep the half-plane left of p0->p1."""
    ex, ey = p1[0] - p0[0], p1[1] - p0[1]
    out = []
    count = len(poly)
    for idx in range(count):
        cur = poly[idx]
        nxt = poly[(idx + 1) % count]
        cur_in = ex * (cur[1] - p0[1]) - ey * (cur[0] - p0[0]) >= 0.0
        nxt_in = ex * (nxt[1] - p0[1]) - ey * (nxt[0] - p0[0]) >= 0.0
        if cur_in:
            out.append(cur)
        if cur_in != nxt_in:
            # Edge crosses the clip line; append the intersection point.
            dcur = ex * (cur[1] - p0[1]) - ey * (cur[0] - p0[0])
            dnxt = ex * (nxt[1] - p0[1]) - ey * (nxt[0] - p0[0])
            t = dcur / (dcur - dnxt)
            out.append((cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])))
    return out


def _merge_close_vertices(poly: list) -> list:
    """Drop consecutive vertices closer than MERGE_EPS (cyclically)."""
    merged = []
    for vert in poly:
        if merged and abs(vert[0] - merged[-1][0]) < MERGE_EPS \
                and abs(vert[1] - merged[-1][1]) < MERGE_EPS:
            continue
        merged.append(vert)
    while len(merged) > 1 and abs(merged[0][0] - merged[-1][0]) < MERGE_EPS \
            and abs(merged[0][1] - merged[-1][1]) < MERGE_EPS:
        merged.pop()
    return merged


def intersect_convex(a: PolygonBEV, b: PolygonBEV) -> PolygonBEV | None:
    """Intersection polygon of two convex CCW polygons, or None when empty.

    Vertices closer than 1e-9 m are merged; results with fewer than 3
    distinct vertices or area below 1e-12 m^2 are treated as empty.
    """
    poly = [tuple(v) for v in a.vertices]
    bverts = b.vertices
    for idx in range(bverts.shape[0]):
        poly = _clip_polygon_halfplane(poly, bverts[idx], bverts[(idx + 1) % bverts.shape[0]])
        if not poly:
            return None
    poly = _merge_close_vertices(poly)
    if len(poly) < 3 or shoelace_area(np.array(poly)) < AREA_EPS:
        return None
    return PolygonBEV(np.array(poly))


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Rotated BEV IoU of two boxes' footprint rectangles."""
    row_a = np.array([[a.h, a.w, a.l, a.x, a.y, a.z, a.theta]])
    row_b = np.array([[b.h, b.w, b.l, b.x, b.y, b.z, b.theta]])
    return float(iou_bev_pairs(row_a, row_b)[0])


def bev_intersection_areas(corners_a: np.ndarray, corners_b: np.ndarray) -> np.ndarray:
    """Batched convex-clip intersection areas of paired footprints.

    Args:
        corners_a: (m, 4, 2) CCW footprint corners.
        corners_b: (m, 4, 2) CCW footprint corners, paired with corners_a.

    Returns:
        (m,) intersection areas; values below the area epsilon are zero.

    The subject polygon is clipped against each of the 4 half-planes of the
    clip rectangle with per-pair vertex counts tracked in arrays, which is
    the same Sutherland-Hodgman pass as :func:`intersect_convex` vectorized
    over pairs.
    """
    corners_a = np.asarray(corners_a, dtype=np.float64)
    corners_b = np.asarray(corners_b, dtype=np.float64)
    m = corners_a.shape[0]
    if m == 0:
        return np.zeros(0)
    max_verts = 10  # 4 starting vertices + at most one added per clip pass, padded
    poly = np.zeros((m, max_verts, 2))
    poly[:, :4] = corners_a
    count = np.full(m, 4, dtype=np.int64)
    for e in range(4):
        p0 = corners_b[:, e]
        p1 = corners_b[:, (e + 1) % 4]
        edge = p1 - p0
        rel = poly - p0[:, None, :]
        side = edge[:, None, 0] * rel[:, :, 1] - edge[:, None, 1] * rel[:, :, 0]
        slots = np.arange(max_verts)[None, :]
        valid = slots < count[:, None]
        inside = (side >= 0.0) & valid
        nxt_idx = np.where(slots + 1 < count[:, None], slots + 1, 0)
        rows = np.arange(m)[:, None]
        nxt = poly[rows, nxt_idx]
        side_nxt = side[rows, nxt_idx]
        inside_nxt = (side_nxt >= 0.0) & valid
        crossing = (inside != inside_nxt) & valid
        # Intersection parameter along cur->nxt where the edge is crossed.
        denom = side - side_nxt
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(crossing, side / np.where(denom == 0.0, 1.0, denom), 0.0)
        cross_pt = poly + t[:, :, None] * (nxt - poly)
        # Per slot, emit up to two vertices: cur (if inside) then crossing point.
        emit_flags = np.stack([inside, crossing], axis=2).reshape(m, max_verts * 2)
        emit_verts = np.stack([poly, cross_pt], axis=2).reshape(m, max_verts * 2, 2)
        new_count = emit_flags.sum(axis=1)
        positions = np.cumsum(emit_flags, axis=1) - 1
        new_poly = np.zeros((m, max_verts, 2))
        keep = emit_flags & (positions < max_verts)
        pair_idx, slot_idx = np.nonzero(keep)
        new_poly[pair_idx, positions[pair_idx, slot_idx]] = emit_verts[pair_idx, slot_idx]
        poly = new_poly
        count = np.minimum(new_count, max_verts)
    slots = np.arange(max_verts)[None, :]
    valid = slots < count[:, None]
    x = np.where(valid, poly[:, :, 0], 0.0)
    y = np.where(valid, poly[:, :, 1], 0.0)
    nxt_idx = np.where(slots + 1 < count[:, None], slots + 1, 0)
    rows = np.arange(m)[:, None]
    areas = 0.5 * np.abs(
        np.sum(x * poly[rows, nxt_idx][:, :, 1] * valid, axis=1)
        - np.sum(y * poly[rows, nxt_idx][:, :, 0] * valid, axis=1)
    )
    areas[count < 3] = 0.0
    areas[areas < AREA_EPS] = 0.0
    return areas


def iou_bev_pairs(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Element-wise rotated BEV IoU between paired (m, 7) box arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    inter = bev_intersection_areas(footprint_corners(boxes_a), footprint_corners(boxes_b))
    area_a = boxes_a[:, 1] * boxes_a[:, 2]
    area_b = boxes_b[:, 1] * boxes_b[:, 2]
    union = area_a + area_b - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0.0, inter / union, 0.0)


def iou_bev_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """All-pairs rotated BEV IoU between (m, 7) and (n, 7) box arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    m, n = boxes_a.shape[0], boxes_b.shape[0]
    if m == 0 or n == 0:
        return np.zeros((m, n))
    rep_a = np.repeat(boxes_a, n, axis=0)
    rep_b = np.tile(boxes_b, (m, 1))
    return iou_bev_pairs(rep_a, rep_b).reshape(m, n)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Full 3D IoU: rotated BEV intersection times vertical overlap."""
    row_a = np.array([[a.h, a.w, a.l, a.x, a.y, a.z, a.theta]])
    row_b = np.array([[b.h, b.w, b.l, b.x, b.y, b.z, b.theta]])
    return float(iou_3d_pairs(row_a, row_b)[0])


def iou_3d_pairs(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Element-wise 3D IoU between paired (m, 7) box arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    inter_bev = bev_intersection_areas(footprint_corners(boxes_a), footprint_corners(boxes_b))
    top = np.minimum(boxes_a[:, 5] + boxes_a[:, 0] / 2.0, boxes_b[:, 5] + boxes_b[:, 0] / 2.0)
    bot = np.maximum(boxes_a[:, 5] - boxes_a[:, 0] / 2.0, boxes_b[:, 5] - boxes_b[:, 0] / 2.0)
    inter = inter_bev * np.clip(top - bot, 0.0, None)
    vol_a = boxes_a[:, 0] * boxes_a[:, 1] * boxes_a[:, 2]
    vol_b = boxes_b[:, 0] * boxes_b[:, 1] * boxes_b[:, 2]
    union = vol_a + vol_b - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0.0, inter / union, 0.0)


def iou_3d_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """All-pairs 3D IoU between (m, 7) and (n, 7) box arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    m, n = boxes_a.shape[0], boxes_b.shape[0]
    if m == 0 or n == 0:
        return np.zeros((m, n))
    rep_a = np.repeat(boxes_a, n, axis=0)
    rep_b = np.tile(boxes_b, (m, 1))
    return iou_3d_pairs(rep_a, rep_b).reshape(m, n)


# ---------------------------------------------------------------------------
# Distance features
# ---------------------------------------------------------------------------


def distance_xy(b: Box3D) -> float:
    """Euclidean distance of the box center from the sensor in the xy plane.

    Computed as sqrt(x*x + y*y) rather than hypot so scalar and vectorized
    call sites round identically.
    """
    return math.sqrt(b.x * b.x + b.y * b.y)


def normalized_distance(b: Box3D, d_max: float) -> float:
    """Distance scaled to [0, 1] by d_max, capped at 1."""
    if d_max <= 0:
        raise ValueError(f"d_max must be positive, got {d_max}")
    return min(distance_xy(b) / d_max, 1.0)

"""Pinhole cameras on the wheelchair mast, and the synthetic corridor renderer.

Camera frame convention: X right, Y down, Z forward (optical axis), so
u = cx + f*X/Z and v = cy + f*Y/Z.  World frame: z up, ground at z = 0.
Rendering is flat-shaded grayscale with fixed intensities:

    background 255, floor 100, grid lines 80, walls 180,
    door posts and lintels 30, door-ground corner marks 10.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .world import CorridorWorld, WheelchairState, DOOR_FRAME_HEIGHT, WALL_HEIGHT

Z_NEAR = 0.05

BG = 255
FLOOR = 100
GRID = 80
WALL = 180
FRAME = 30
MARK = 10

GRID_SPACING = 0.5

# L-shaped ground corner marks at each door post: outer corner exactly on
# the ground-truth door corner, arms opening toward the corridor.
MARK_ARM = 0.30
MARK_THICK = 0.12


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_px: float
    cx: float
    cy: float
    width: int
    height: int

    def matrix(self) -> np.ndarray:
        return np.array([[self.focal_px, 0.0, self.cx],
                         [0.0, self.focal_px, self.cy],
                         [0.0, 0.0, 1.0]])


FF_INTRINSICS = CameraIntrinsics(280.0, 160.0, 120.0, 320, 240)
DF_INTRINSICS = CameraIntrinsics(140.0, 160.0, 120.0, 320, 240)


class CameraExtrinsics:
    """Rigid world-to-camera transform. rotation rows are the camera axes."""

    __slots__ = ("position", "rotation")

    def __init__(self, position, rotation):
        self.position = np.asarray(position, dtype=float)
        self.rotation = np.asarray(rotation, dtype=float)
        self.position.setflags(write=False)
        self.rotation.setflags(write=False)

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.position) @ self.rotation.T


@dataclass(frozen=True)
class MountGeometry:
    """Camera offsets from the axle center, in the body frame (x forward)."""

    ff_offset: tuple[float, float, float] = (0.2, 0.0, 0.0)
    df_offset: tuple[float, float, float] = (0.2, 0.0, 0.0)
    df_down_pitch: float = math.radians(55.0)


DEFAULT_MOUNT = MountGeometry()

# keep the optical axis off the exact nadir so the camera basis stays defined
_PITCH_FLOOR = -1.55


def rotation_yaw_pitch(yaw: float, pitch: float) -> np.ndarray:
    """World-to-camera rotation for a roll-free camera (pitch < 0 looks down)."""
    pitch = max(_PITCH_FLOOR, pitch)
    cz, sz = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    fwd = np.array([cz * cp, sz * cp, sp])
    right = np.array([sz, -cz, 0.0])
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd])


def make_extrinsics(state: WheelchairState,
                    mount: MountGeometry = DEFAULT_MOUNT) -> tuple[CameraExtrinsics, CameraExtrinsics]:
    """FF and DF extrinsics for the current pose and mast configuration."""
    th = state.pose.theta
    c, s = math.cos(th), math.sin(th)
    base = np.array([state.pose.x, state.pose.y, 0.0])

    def place(off):
        dx, dy, dz = off
        return base + np.array([c * dx - s * dy, s * dx + c * dy, state.lift + dz])

    yaw = th + state.pan
    ff = CameraExtrinsics(place(mount.ff_offset), rotation_yaw_pitch(yaw, state.tilt))
    df = CameraExtrinsics(place(mount.df_offset),
                          rotation_yaw_pitch(yaw, state.tilt - mount.df_down_pitch))
    return ff, df


def project_point(intr: CameraIntrinsics, extr: CameraExtrinsics,
                  point) -> tuple[float, float] | None:
    """Project one world point; None marks points at or behind the near plane."""
    p = extr.world_to_camera(np.asarray(point, dtype=float))
    if p[2] <= Z_NEAR:
        return None
    return (intr.cx + intr.focal_px * p[0] / p[2],
            intr.cy + intr.focal_px * p[1] / p[2])


def project_direction(intr: CameraIntrinsics, extr: CameraExtrinsics,
                      direction) -> tuple[float, float] | None:
    """Vanishing point of a world direction; None if it points behind."""
    d = extr.rotation @ np.asarray(direction, dtype=float)
    if d[2] <= 1e-12:
        return None
    return (intr.cx + intr.focal_px * d[0] / d[2],
            intr.cy + intr.focal_px * d[1] / d[2])


@dataclass(frozen=True)
class RasterFrame:
    width: int
    height: int
    pixels: np.ndarray  # uint8, shape (height, width), read-only
    camera_tag: str
    sim_time: float

    def __post_init__(self):
        assert self.pixels.shape == (self.height, self.width)
        self.pixels.setflags(write=False)


def _floor_shading(world: CorridorWorld, X: np.ndarray, Y: np.ndarray,
                   inside: np.ndarray) -> np.ndarray:
    """Per-pixel floor intensity from ground-plane hit coordinates."""
    img = np.where(inside, float(FLOOR), float(BG))

    # grid lines with a resolution-adaptive width so they stay crisp nearby
    # and fade out (rather than alias into noise) toward the horizon
    gXu = np.gradient(X, axis=1)
    gXv = np.gradient(X, axis=0)
    gYu = np.gradient(Y, axis=1)
    gYv = np.gradient(Y, axis=0)
    footX = np.hypot(gXu, gXv)
    footY = np.hypot(gYu, gYv)
    hwX = np.maximum(0.012, 0.7 * footX)
    hwY = np.maximum(0.012, 0.7 * footY)
    dX = np.abs(X - GRID_SPACING * np.round(X / GRID_SPACING))
    dY = np.abs(Y - GRID_SPACING * np.round(Y / GRID_SPACING))
    lines = ((dX <= hwX) & (footX < 0.15)) | ((dY <= hwY) & (footY < 0.15))
    img[inside & lines] = GRID

    # door-ground corner marks: mirrored L brackets hugging each post base
    for geom in world.door_geoms:
        dx, dy = geom.direction
        nx, ny = geom.normal
        for corner, sgn in ((geom.hinge, 1.0), (geom.end, -1.0)):
            # local axes: along the doorway (toward the other post) and
            # toward the corridor
            ax, ay = sgn * dx, sgn * dy
            rel_a = (X - corner[0]) * ax + (Y - corner[1]) * ay
            rel_c = -((X - corner[0]) * nx + (Y - corner[1]) * ny)
            arm1 = (rel_a >= 0) & (rel_a <= MARK_ARM) & (rel_c >= 0) & (rel_c <= MARK_THICK)
            arm2 = (rel_a >= 0) & (rel_a <= MARK_THICK) & (rel_c >= 0) & (rel_c <= MARK_ARM)
            img[inside & (arm1 | arm2)] = MARK
    return img


def _floor_mask(world: CorridorWorld, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    half = world.corridor_width / 2.0
    inside = (X >= 0.0) & (X <= world.length) & (np.abs(Y) <= half)
    # room aprons behind each doorway so entries do not hang over void
    for geom in world.door_geoms:
        xs = (geom.hinge[0], geom.end[0], geom.gap[0], geom.gap[1])
        x0, x1 = min(xs) - 0.4, max(xs) + 0.4
        if geom.wall_y > 0:
            apr = (X >= x0) & (X <= x1) & (Y >= half) & (Y <= half + 2.2)
        else:
            apr = (X >= x0) & (X <= x1) & (Y <= -half) & (Y >= -half - 2.2)
        inside |= apr
    return inside


def _clip_near(poly_cam: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a camera-frame polygon against z = Z_NEAR."""
    out = []
    n = len(poly_cam)
    for i in range(n):
        a = poly_cam[i]
        b = poly_cam[(i + 1) % n]
        ain = a[2] > Z_NEAR
        bin_ = b[2] > Z_NEAR
        if ain:
            out.append(a)
        if ain != bin_:
            t = (Z_NEAR - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return np.array(out) if out else np.empty((0, 3))


def _fill_convex(img: np.ndarray, pts: np.ndarray, value: int) -> None:
    """Rasterize a convex polygon given float vertices (pixel centers on ints)."""
    if len(pts) < 3:
        return
    h, w = img.shape
    x0 = max(0, int(math.floor(pts[:, 0].min())))
    x1 = min(w - 1, int(math.ceil(pts[:, 0].max())))
    y0 = max(0, int(math.floor(pts[:, 1].min())))
    y1 = min(h - 1, int(math.ceil(pts[:, 1].max())))
    if x1 < x0 or y1 < y0:
        return
    area = 0.0
    n = len(pts)
    for i in range(n):
        j = (i + 1) % n
        area += pts[i, 0] * pts[j, 1] - pts[j, 0] * pts[i, 1]
    if abs(area) < 1e-9:
        return
    orient = 1.0 if area > 0 else -1.0
    uu, vv = np.meshgrid(np.arange(x0, x1 + 1, dtype=float),
                         np.arange(y0, y1 + 1, dtype=float))
    mask = np.ones(uu.shape, dtype=bool)
    for i in range(n):
        j = (i + 1) % n
        ex, ey = pts[j, 0] - pts[i, 0], pts[j, 1] - pts[i, 1]
        cross = ex * (vv - pts[i, 1]) - ey * (uu - pts[i, 0])
        mask &= (orient * cross) >= 0.0
    sub = img[y0:y1 + 1, x0:x1 + 1]
    sub[mask] = value


def _world_polygons(world: CorridorWorld) -> list[tuple[np.ndarray, int]]:
    polys = []
    for (a, b) in world.walls:
        quad = np.array([[a[0], a[1], 0.0], [b[0], b[1], 0.0],
                         [b[0], b[1], WALL_HEIGHT], [a[0], a[1], WALL_HEIGHT]])
        polys.append((quad, WALL))
    pw = 0.06  # rendered post width along the doorway
    for geom in world.door_geoms:
        dx, dy = geom.direction
        for corner, sgn in ((geom.hinge, 1.0), (geom.end, -1.0)):
            px, py = corner
            qx, qy = px + sgn * pw * dx, py + sgn * pw * dy
            quad = np.array([[px, py, 0.0], [qx, qy, 0.0],
                             [qx, qy, DOOR_FRAME_HEIGHT], [px, py, DOOR_FRAME_HEIGHT]])
            polys.append((quad, FRAME))
        lintel = np.array([
            [geom.hinge[0], geom.hinge[1], DOOR_FRAME_HEIGHT],
            [geom.end[0], geom.end[1], DOOR_FRAME_HEIGHT],
            [geom.end[0], geom.end[1], DOOR_FRAME_HEIGHT + 0.12],
            [geom.hinge[0], geom.hinge[1], DOOR_FRAME_HEIGHT + 0.12]])
        polys.append((lintel, FRAME))
    return polys


def render_scene(world: CorridorWorld, state: WheelchairState, camera: str = "ff",
                 mount: MountGeometry = DEFAULT_MOUNT, sim_time: float = 0.0,
                 intrinsics: CameraIntrinsics | None = None) -> RasterFrame:
    """Render one grayscale frame with a painter's pass over scene surfaces."""
    if camera not in ("ff", "df"):
        raise ValueError("camera must be 'ff' or 'df'")
    ff, df = make_extrinsics(state, mount)
    extr = ff if camera == "ff" else df
    intr = intrinsics or (FF_INTRINSICS if camera == "ff" else DF_INTRINSICS)

    h, w = intr.height, intr.width
    img = np.full((h, w), float(BG))

    # floor by per-pixel ray casting against z = 0
    us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dirs = np.stack([(us - intr.cx) / intr.focal_px,
                     (vs - intr.cy) / intr.focal_px,
                     np.ones_like(us)], axis=-1)
    dirs_w = dirs @ extr.rotation  # == rotation.T applied to each ray
    dz = dirs_w[..., 2]
    cz = extr.position[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dz < -1e-9, -cz / dz, np.nan)
    ok = np.isfinite(t) & (t > 0.0) & (t < 1e4)
    tt = np.where(ok, t, 0.0)
    X = np.where(ok, extr.position[0] + tt * dirs_w[..., 0], 1e9)
    Y = np.where(ok, extr.position[1] + tt * dirs_w[..., 1], 1e9)
    inside = ok & _floor_mask(world, X, Y)
    shaded = _floor_shading(world, X, Y, inside)
    img = np.where(inside, shaded, img)

    # opaque surfaces, farthest first
    polys = _world_polygons(world)
    order = []
    for poly, val in polys:
        cam = extr.world_to_camera(poly)
        if np.all(cam[:, 2] <= Z_NEAR):
            continue
        centroid = poly.mean(axis=0)
        dist = float(np.linalg.norm(centroid - extr.position))
        order.append((dist, cam, val))
    order.sort(key=lambda item: -item[0])
    for _, cam, val in order:
        clipped = _clip_near(cam)
        if len(clipped) < 3:
            continue
        pts = np.stack([intr.cx + intr.focal_px * clipped[:, 0] / clipped[:, 2],
                        intr.cy + intr.focal_px * clipped[:, 1] / clipped[:, 2]], axis=-1)
        _fill_convex(img, pts, val)

    return RasterFrame(w, h, np.clip(np.rint(img), 0, 255).astype(np.uint8),
                       camera, sim_time)


def ground_truth_homography(intr_ff: CameraIntrinsics, extr_ff: CameraExtrinsics,
                            intr_df: CameraIntrinsics, extr_df: CameraExtrinsics) -> np.ndarray:
    """FF-pixel to DF-pixel map, exact when the two cameras share a center."""
    r_rel = extr_df.rotation @ extr_ff.rotation.T
    H = intr_df.matrix() @ r_rel @ np.linalg.inv(intr_ff.matrix())
    if abs(H[2, 2]) > 1e-12:
        H = H / H[2, 2]
    return H

"""Corridor world model and differential-drive kinematics.

The world lives in a 2D ground frame: x runs along the corridor axis,
y across it (left wall at +width/2 when heading +x), z is up.  Walls are
zero-thickness segments; doorways are openings in a wall with a frame
that may be rotated into the room by an offset angle.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

TICK_DT = 0.05
D_SAFE = 0.15

# Wall opening grows as the door frame rotates away from the wall so the
# entry stays physically passable at every sampled offset angle.
GAP_WIDEN = 0.8
# Past 90 degrees the upstream wall is cut back by this multiple of
# width * (-cos a) to leave room for the hook entry.
HINGE_CLEAR = 2.0

WALL_HEIGHT = 2.4
DOOR_FRAME_HEIGHT = 2.0


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    t = math.remainder(theta, math.tau)
    if t <= -math.pi:
        t += math.tau
    return t


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float

    def heading(self) -> tuple[float, float]:
        return (math.cos(self.theta), math.sin(self.theta))

    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class DriveCommand:
    v: float
    omega: float
    source: str = "operator"  # operator | assist | tracker


@dataclass(frozen=True)
class WheelchairState:
    """Immutable plant snapshot; the simulation loop is the single writer."""

    pose: Pose2D
    v: float = 0.0
    omega: float = 0.0
    pan: float = 0.0
    tilt: float = 0.0
    lift: float = 1.2
    half_width: float = 0.3
    v_max: float = 1.0
    omega_max: float = 1.0

    PAN_LIMIT = math.pi / 2
    TILT_MIN = -math.pi / 2
    LIFT_MIN = 1.0
    LIFT_MAX = 1.6

    def with_mast(self, pan: float | None = None, tilt: float | None = None,
                  lift: float | None = None) -> "WheelchairState":
        p = self.pan if pan is None else max(-self.PAN_LIMIT, min(self.PAN_LIMIT, pan))
        t = self.tilt if tilt is None else max(self.TILT_MIN, min(0.0, tilt))
        z = self.lift if lift is None else max(self.LIFT_MIN, min(self.LIFT_MAX, lift))
        return replace(self, pan=p, tilt=t, lift=z)


@dataclass(frozen=True)
class Door:
    id: int
    wall_side: str  # "left" | "right"
    s_along: float
    width: float
    offset_angle: float  # degrees, [0, 180)


@dataclass(frozen=True)
class DoorGeometry:
    """Derived placement of one doorway.

    hinge sits on the wall line; end is the far post, rotated into the
    room.  normal points through the doorway away from the corridor
    (it tilts backward past 90 degrees, which is the hook-entry case).
    gap is the (x0, x1) opening interval on the wall line.
    """

    door_id: int
    hinge: tuple[float, float]
    end: tuple[float, float]
    midpoint: tuple[float, float]
    direction: tuple[float, float]
    normal: tuple[float, float]
    gap: tuple[float, float]
    wall_y: float


class ScenarioError(ValueError):
    """Scenario document rejected; .field names the offending entry."""

    def __init__(self, message: str, field_name: str = ""):
        super().__init__(message)
        self.field = field_name


@dataclass(frozen=True)
class CorridorWorld:
    length: float
    corridor_width: float
    walls: tuple[tuple[tuple[float, float], tuple[float, float]], ...]
    doors: tuple[Door, ...]
    door_geoms: tuple[DoorGeometry, ...]
    start: Pose2D
    half_width: float = 0.3
    v_max: float = 1.0
    omega_max: float = 1.0
    rng_seed: int = 0

    def door_by_id(self, door_id: int) -> Door:
        for d in self.doors:
            if d.id == door_id:
                return d
        raise ValueError(f"unknown door id {door_id}")

    def geometry_for(self, door_id: int) -> DoorGeometry:
        for g in self.door_geoms:
            if g.door_id == door_id:
                return g
        raise ValueError(f"unknown door id {door_id}")


def door_geometry(door: Door, corridor_width: float) -> DoorGeometry:
    a = math.radians(door.offset_angle)
    sgn = 1.0 if door.wall_side == "left" else -1.0
    wall_y = sgn * corridor_width / 2.0
    hinge = (door.s_along, wall_y)
    # doorway direction, swung into the room by the offset angle
    d = (math.cos(a), sgn * math.sin(a))
    end = (hinge[0] + door.width * d[0], hinge[1] + door.width * d[1])
    mid = ((hinge[0] + end[0]) / 2.0, (hinge[1] + end[1]) / 2.0)
    # inward normal: doorway direction rotated a quarter turn roomward
    normal = (-sgn * d[1], sgn * d[0])
    gap_len = door.width * (1.0 + GAP_WIDEN * (1.0 - math.cos(a)))
    cut = door.width * HINGE_CLEAR * max(0.0, -math.cos(a))
    gap = (door.s_along - cut, door.s_along + gap_len)
    return DoorGeometry(door.id, hinge, end, mid, d, normal, gap, wall_y)


def _wall_segments(length: float, width: float,
                   geoms: list[DoorGeometry]) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    segs = []
    for sgn, side in ((1.0, "left"), (-1.0, "right")):
        y = sgn * width / 2.0
        gaps = sorted(g.gap for g in geoms if g.wall_y == y)
        x = 0.0
        for g0, g1 in gaps:
            if g0 > x:
                segs.append(((x, y), (g0, y)))
            x = max(x, min(g1, length))
        if x < length:
            segs.append(((x, y), (length, y)))
    # jamb walls close the downstream side of rotated frames (<= 90 deg only)
    for g in geoms:
        jamb_from = (g.gap[1], g.wall_y)
        if math.hypot(g.end[0] - jamb_from[0], g.end[1] - jamb_from[1]) < 0.05:
            continue
        # past 90 deg the frame leans back over the opening; leave it open
        if (g.end[0] - g.hinge[0]) < 0.0:
            continue
        segs.append((jamb_from, g.end))
    return segs


def build_world(length: float, width: float, doors: list[Door], start: Pose2D,
                half_width: float = 0.3, v_max: float = 1.0, omega_max: float = 1.0,
                rng_seed: int = 0) -> CorridorWorld:
    if width <= 2.0 * half_width:
        raise ScenarioError("corridor narrower than the wheelchair", "corridor.width_m")
    seen = set()
    for d in doors:
        if d.id in seen:
            raise ScenarioError(f"duplicate door id {d.id}", "doors")
        seen.add(d.id)
        if d.wall_side not in ("left", "right"):
            raise ScenarioError(f"door {d.id}: wall must be left or right", "doors.wall")
        if d.width <= 2.0 * half_width:
            raise ScenarioError(f"door {d.id} not passable", "doors.width_m")
        if not (0.0 <= d.offset_angle < 180.0):
            raise ScenarioError(f"door {d.id}: offset angle out of [0, 180)", "doors.offset_deg")
    geoms = [door_geometry(d, width) for d in doors]
    for g in geoms:
        if g.gap[0] < 0.0 or g.gap[1] > length:
            raise ScenarioError(f"door {g.door_id} opening leaves the corridor", "doors.s_m")
    for side_y in (width / 2.0, -width / 2.0):
        gaps = sorted((g.gap, g.door_id) for g in geoms if g.wall_y == side_y)
        for (ga, ia), (gb, ib) in zip(gaps, gaps[1:]):
            if gb[0] < ga[1]:
                raise ScenarioError(f"doors {ia} and {ib} overlap", "doors.s_m")
    walls = tuple((tuple(a), tuple(b)) for a, b in _wall_segments(length, width, geoms))
    return CorridorWorld(length, width, walls, tuple(doors), tuple(geoms), start,
                         half_width, v_max, omega_max, rng_seed)


def load_scenario(text: str) -> CorridorWorld:
    """Parse a scenario JSON document.  Pure: identical bytes, identical world."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"scenario is not valid JSON: line {e.lineno}: {e.msg}", "json") from e
    if not isinstance(doc, dict):
        raise ScenarioError("scenario root must be an object", "root")

    def need(obj, key, kind, where):
        if key not in obj:
            raise ScenarioError(f"missing field {where}.{key}", f"{where}.{key}")
        val = obj[key]
        if kind is float:
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ScenarioError(f"{where}.{key} must be a number", f"{where}.{key}")
            return float(val)
        if not isinstance(val, kind):
            raise ScenarioError(f"{where}.{key} has the wrong type", f"{where}.{key}")
        return val

    cor = need(doc, "corridor", dict, "scenario")
    length = need(cor, "length_m", float, "corridor")
    width = need(cor, "width_m", float, "corridor")
    if length <= 0 or width <= 0:
        raise ScenarioError("corridor dimensions must be positive", "corridor")

    doors = []
    for i, dd in enumerate(doc.get("doors", [])):
        if not isinstance(dd, dict):
            raise ScenarioError(f"doors[{i}] must be an object", f"doors[{i}]")
        where = f"doors[{i}]"
        doors.append(Door(
            id=int(need(dd, "id", int, where)),
            wall_side=need(dd, "wall", str, where),
            s_along=need(dd, "s_m", float, where),
            width=need(dd, "width_m", float, where),
            offset_angle=float(dd.get("offset_deg", 0.0)),
        ))

    st = doc.get("start", {})
    start = Pose2D(float(st.get("x", 1.0)), float(st.get("y", 0.0)),
                   normalize_angle(float(st.get("theta", 0.0))))
    wc = doc.get("wheelchair", {})
    half_width = float(wc.get("half_width_m", 0.3))
    v_max = float(wc.get("v_max", 1.0))
    omega_max = float(wc.get("omega_max", 1.0))
    if half_width <= 0 or v_max <= 0 or omega_max <= 0:
        raise ScenarioError("wheelchair parameters must be positive", "wheelchair")
    seed = int(doc.get("seed", 0))
    return build_world(length, width, doors, start, half_width, v_max, omega_max, seed)


def initial_state(world: CorridorWorld) -> WheelchairState:
    return WheelchairState(pose=world.start, half_width=world.half_width,
                           v_max=world.v_max, omega_max=world.omega_max)


def clamp_command(cmd: DriveCommand, state: WheelchairState) -> DriveCommand:
    v = max(-state.v_max, min(state.v_max, cmd.v))
    w = max(-state.omega_max, min(state.omega_max, cmd.omega))
    if v == cmd.v and w == cmd.omega:
        return cmd
    return DriveCommand(v, w, cmd.source)


def advance_pose(pose: Pose2D, v: float, omega: float, dt: float) -> Pose2D:
    """Exact unicycle arc step (closed form, not an Euler approximation)."""
    if abs(omega) < 1e-12:
        return Pose2D(pose.x + v * math.cos(pose.theta) * dt,
                      pose.y + v * math.sin(pose.theta) * dt,
                      normalize_angle(pose.theta))
    th1 = pose.theta + omega * dt
    r = v / omega
    return Pose2D(pose.x + r * (math.sin(th1) - math.sin(pose.theta)),
                  pose.y - r * (math.cos(th1) - math.cos(pose.theta)),
                  normalize_angle(th1))


def step_kinematics(state: WheelchairState, cmd: DriveCommand,
                    dt: float = TICK_DT) -> WheelchairState:
    if dt < 0:
        raise ValueError("dt must be non-negative")
    cmd = clamp_command(cmd, state)
    pose = advance_pose(state.pose, cmd.v, cmd.omega, dt)
    return replace(state, pose=pose, v=cmd.v, omega=cmd.omega)


def _point_segment_distance(px: float, py: float,
                            a: tuple[float, float], b: tuple[float, float]) -> float:
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 <= 0.0:
        return math.hypot(px - ax, py - ay)
    t = ((px - ax) * dx + (py - ay) * dy) / L2
    t = 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


def clearance(world: CorridorWorld, point: tuple[float, float]) -> float:
    """Distance from a ground point to the nearest wall segment."""
    px, py = float(point[0]), float(point[1])
    if not world.walls:
        return math.inf
    return min(_point_segment_distance(px, py, a, b) for a, b in world.walls)


def nearest_wall_point(world: CorridorWorld, point) -> "np.ndarray":
    """Closest point on any wall segment to the given ground point."""
    px, py = float(point[0]), float(point[1])
    best = None
    best_d = math.inf
    for a, b in world.walls:
        ax, ay = a
        bx, by = b
        dx, dy = bx - ax, by - ay
        L2 = dx * dx + dy * dy
        if L2 <= 0.0:
            qx, qy = ax, ay
        else:
            t = ((px - ax) * dx + (py - ay) * dy) / L2
            t = 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)
            qx, qy = ax + t * dx, ay + t * dy
        d = math.hypot(px - qx, py - qy)
        if d < best_d:
            best_d = d
            best = (qx, qy)
    if best is None:
        return np.array([px, py])
    return np.array(best)


def door_safe_distance(door: Door, half_width: float, d_safe: float = D_SAFE) -> float:
    """Doorway-local safety floor so narrow-but-passable doors are usable."""
    return min(d_safe, (door.width - 2.0 * half_width) / 2.0)


def effective_safe_distance(world: CorridorWorld, point: tuple[float, float],
                            d_safe: float = D_SAFE) -> float:
    """d_safe, relaxed near doorway segments."""
    out = d_safe
    for door, geom in zip(world.doors, world.door_geoms):
        if _point_segment_distance(point[0], point[1], geom.hinge, geom.end) <= door.width:
            out = min(out, door_safe_distance(door, world.half_width, d_safe))
    return out


def _segments_cross(p: tuple[float, float], q: tuple[float, float],
                    a: tuple[float, float], b: tuple[float, float]) -> bool:
    """True when pq crosses the open interior of ab."""
    rx, ry = q[0] - p[0], q[1] - p[1]
    sx, sy = b[0] - a[0], b[1] - a[1]
    den = rx * sy - ry * sx
    if abs(den) < 1e-12:
        return False
    qx, qy = a[0] - p[0], a[1] - p[1]
    t = (qx * sy - qy * sx) / den
    u = (qx * ry - qy * rx) / den
    return 0.0 <= t <= 1.0 and 1e-9 < u < 1.0 - 1e-9


PASSAGE_HEADING_TOL = math.radians(45.0)


def passage_check(world: CorridorWorld, trace: list[Pose2D], door_id: int,
                  d_safe: float = D_SAFE) -> str:
    """Classify a pose trace against one doorway.

    Returns "success", "clearance_violation", or "missed".  Clearance is
    judged as disc margin: point clearance minus half_width, against the
    (doorway-relaxed) safety floor.
    """
    geom = world.geometry_for(door_id)  # raises on unknown id
    crossed = False
    for p, q in zip(trace, trace[1:]):
        if _segments_cross(p.position(), q.position(), geom.hinge, geom.end):
            # entry direction: doorway normal oriented away from the side
            # the chair approaches from (matters when the doorway leans
            # past perpendicular and the stored normal points corridor-ward)
            rel = p.position() - geom.hinge
            side = rel[0] * geom.normal[0] + rel[1] * geom.normal[1]
            sgn = 1.0 if side < 0.0 else -1.0
            ex, ey = sgn * geom.normal[0], sgn * geom.normal[1]
            hd = normalize_angle(q.theta - math.atan2(ey, ex))
            if abs(hd) <= PASSAGE_HEADING_TOL:
                crossed = True
    if not crossed:
        return "missed"
    hw = world.half_width
    for p in trace:
        pt = p.position()
        if clearance(world, pt) - hw < effective_safe_distance(world, pt, d_safe) - 1e-9:
            return "clearance_violation"
    return "success"

"""Shared control: gesture mapping, intention, trajectories, tracking, assist.

The operator never sends raw wheel speeds.  Touch gestures become either a
virtual-joystick drive command, a door selection, or a camera-mast motion;
an intention recognizer decides when the operator is aiming for a door; a
cubic curve is planned into the doorway and tracked by pure pursuit; and a
corridor-assist filter trims any command that would predict a wall strike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .world import (CorridorWorld, DriveCommand, Pose2D, WheelchairState, advance_pose,
                    clearance, effective_safe_distance, nearest_wall_point, normalize_angle)

TRACK_POINT = (0.5, 0.85)


class NavError(Exception):
    pass


class TooCloseError(NavError):
    pass


class InfeasiblePlanError(NavError):
    pass


@dataclass(frozen=True)
class GestureEvent:
    fingers: int
    phase: str                       # begin | move | end
    p1: tuple[float, float]
    p2: tuple[float, float] | None = None
    region: str = "lower"            # upper | lower
    t: float = 0.0


@dataclass(frozen=True)
class GestureAction:
    kind: str                        # drive | select_door_at | pantilt | lift | none
    drive: DriveCommand | None = None
    point: tuple[float, float] | None = None
    dpan: float = 0.0
    dtilt: float = 0.0
    dlift: float = 0.0


@dataclass(frozen=True)
class Intention:
    kind: str                        # manual_forward | enter_door | manual_turn
    door_id: int | None = None
    confidence: float = 1.0
    since: float = 0.0

    def __post_init__(self):
        if (self.kind == "enter_door") != (self.door_id is not None):
            raise ValueError("door_id must be present exactly for enter_door")


@dataclass(frozen=True)
class AssistConfig:
    v_max: float = 1.0
    omega_max: float = 1.5
    s_max: float = 0.25
    dead_zone: float = 0.02
    kappa_max: float = 2.0
    lookahead: float = 0.5
    intent_angle_gate: float = math.radians(30.0)
    intent_hold: float = 0.5
    intent_range: float = 4.0
    pan_gain: float = 1.0
    tilt_gain: float = 1.0
    lift_gain: float = 1.0
    k_rep: float = 2.0
    predict_horizon: float = 0.5

    def __post_init__(self):
        if self.dead_zone >= self.s_max:
            raise ValueError("dead_zone must be below s_max")
        for name in ("v_max", "omega_max", "s_max", "kappa_max", "lookahead",
                     "intent_angle_gate", "intent_hold", "intent_range"):
            if getattr(self, name) <= 0:
                raise ValueError("%s must be positive" % name)


@dataclass(frozen=True)
class TrajectoryPlan:
    control_points: np.ndarray       # 4x2
    samples: np.ndarray              # 64x2
    arclength: np.ndarray            # 64
    curvature: np.ndarray            # 64
    target_door: int | None
    feasible: bool
    max_curvature: float
    min_clearance: float


@dataclass(frozen=True)
class TrackResult:
    cmd: DriveCommand
    complete: bool
    goal_index: int


def _clamp(x: float, lo: float, hi: float) -> float:
    return max(lo, min(hi, x))


def interpret_gesture(ev: GestureEvent, cfg: AssistConfig,
                      prev: GestureEvent | None = None) -> GestureAction:
    """Map one touch event to an action; malformed events map to none."""
    none = GestureAction("none")
    if ev.phase not in ("begin", "move", "end") or ev.region not in ("upper", "lower"):
        return none
    if ev.fingers == 1:
        if ev.p2 is not None:
            return none
        if ev.region == "lower":
            if ev.phase == "end":
                return GestureAction("drive", DriveCommand(0.0, 0.0))
            dx = ev.p1[0] - TRACK_POINT[0]
            dy = ev.p1[1] - TRACK_POINT[1]
            if math.hypot(dx, dy) <= cfg.dead_zone:
                return GestureAction("drive", DriveCommand(0.0, 0.0))
            v = _clamp(-dy / cfg.s_max, -1.0, 1.0) * cfg.v_max
            omega = _clamp(-dx / cfg.s_max, -1.0, 1.0) * cfg.omega_max
            return GestureAction("drive", DriveCommand(v, omega))
        if ev.phase == "end":
            return GestureAction("select_door_at", point=ev.p1)
        return none
    if ev.fingers == 2:
        if ev.p2 is None:
            return none
        if ev.phase != "move" or prev is None or prev.fingers != 2 or prev.p2 is None:
            return none
        spread = math.hypot(ev.p1[0] - ev.p2[0], ev.p1[1] - ev.p2[1])
        prev_spread = math.hypot(prev.p1[0] - prev.p2[0], prev.p1[1] - prev.p2[1])
        ds = spread - prev_spread
        if abs(ds) > 0.05:
            return GestureAction("lift", dlift=ds * cfg.lift_gain)
        mdx = 0.5 * ((ev.p1[0] - prev.p1[0]) + (ev.p2[0] - prev.p2[0]))
        mdy = 0.5 * ((ev.p1[1] - prev.p1[1]) + (ev.p2[1] - prev.p2[1]))
        return GestureAction("pantilt", dpan=-mdx * cfg.pan_gain, dtilt=-mdy * cfg.tilt_gain)
    return none


def recognize_intention(cmd_history: list[tuple[float, DriveCommand]],
                        doors: list[tuple[int, np.ndarray]],
                        pose: Pose2D, selected: int | None, cfg: AssistConfig,
                        current: Intention | None = None,
                        now: float | None = None) -> Intention:
    """Decide what the operator is trying to do.

    `doors` carries (door id, doorway midpoint) for every tracked door.
    An explicit selection wins; otherwise a door is adopted when the
    commanded steering has pointed at it long enough; contrary commands
    revoke an adopted door.
    """
    t_now = now if now is not None else (cmd_history[-1][0] if cmd_history else 0.0)
    if selected is not None and any(d[0] == selected for d in doors):
        since = current.since if current and current.door_id == selected else t_now
        return Intention("enter_door", selected, 1.0, since)

    window = [(t, c) for t, c in cmd_history if t >= t_now - cfg.intent_hold]
    sustained = bool(cmd_history) and cmd_history[0][0] <= t_now - cfg.intent_hold
    mean_v = float(np.mean([c.v for _, c in window])) if window else 0.0
    mean_om = float(np.mean([c.omega for _, c in window])) if window else 0.0
    straightish = abs(mean_om) < 0.1 * cfg.omega_max

    px, py = pose.x, pose.y

    def bearing_to(mid: np.ndarray) -> float:
        return normalize_angle(math.atan2(mid[1] - py, mid[0] - px) - pose.theta)

    if current is not None and current.kind == "enter_door":
        live = next((d for d in doors if d[0] == current.door_id), None)
        if live is not None:
            br = bearing_to(live[1])
            steering_away = (mean_om * br < 0.0 and abs(mean_om) >= 0.1 * cfg.omega_max)
            past_door = abs(br) > math.pi / 2 and mean_v > 0.0
            if not steering_away and not past_door:
                conf = max(0.0, 1.0 - abs(br) / cfg.intent_angle_gate)
                return Intention("enter_door", current.door_id,
                                 max(conf, 0.05), current.since)

    if window and sustained and mean_v >= 0.0:
        best: tuple[float, int] | None = None
        for did, mid in doors:
            rng = math.hypot(mid[0] - px, mid[1] - py)
            if rng > cfg.intent_range:
                continue
            br = bearing_to(mid)
            if abs(br) > cfg.intent_angle_gate:
                continue
            toward = (mean_om * br > 0.0) or straightish
            if not toward:
                continue
            if best is None or abs(br) < best[0]:
                best = (abs(br), did)
        if best is not None:
            conf = 1.0 - best[0] / cfg.intent_angle_gate
            return Intention("enter_door", best[1], conf, t_now)

    if straightish and mean_v > 0.0:
        return Intention("manual_forward", None,
                         1.0, current.since if current and current.kind == "manual_forward" else t_now)
    return Intention("manual_turn", None,
                     1.0, current.since if current and current.kind == "manual_turn" else t_now)


def bezier_point(cps: np.ndarray, t: float | np.ndarray) -> np.ndarray:
    """Cubic Bernstein evaluation."""
    t = np.asarray(t, dtype=np.float64)
    omt = 1.0 - t
    b = (omt ** 3)[..., None] * cps[0] + (3.0 * omt ** 2 * t)[..., None] * cps[1] \
        + (3.0 * omt * t ** 2)[..., None] * cps[2] + (t ** 3)[..., None] * cps[3]
    return b


def _bezier_derivatives(cps: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    omt = 1.0 - t
    d1 = (3.0 * omt ** 2)[..., None] * (cps[1] - cps[0]) \
        + (6.0 * omt * t)[..., None] * (cps[2] - cps[1]) \
        + (3.0 * t ** 2)[..., None] * (cps[3] - cps[2])
    d2 = (6.0 * omt)[..., None] * (cps[2] - 2.0 * cps[1] + cps[0]) \
        + (6.0 * t)[..., None] * (cps[3] - 2.0 * cps[2] + cps[1])
    return d1, d2


def generate_trajectory(pose: Pose2D, doorway: tuple[np.ndarray, np.ndarray],
                        world: CorridorWorld, cfg: AssistConfig,
                        door_id: int | None = None) -> TrajectoryPlan:
    """Plan a cubic curve from the chair into the doorway.

    The arrival direction is the doorway normal oriented away from the
    chair (through the opening); departure follows the current heading.
    """
    a = np.asarray(doorway[0], dtype=np.float64)
    b = np.asarray(doorway[1], dtype=np.float64)
    if np.linalg.norm(b - a) < 0.7:
        raise ValueError("doorway narrower than 0.7 m")
    mid = 0.5 * (a + b)
    d = (b - a) / np.linalg.norm(b - a)
    normal = np.array([-d[1], d[0]])
    p0 = np.array([pose.x, pose.y])
    if float(normal @ (mid - p0)) < 0.0:
        normal = -normal

    p3 = mid + 0.3 * normal
    dist = float(np.linalg.norm(p3 - p0))
    if dist < 0.2:
        raise TooCloseError("%.2f m from the doorway target" % dist)
    p1 = p0 + 0.4 * dist * np.array([math.cos(pose.theta), math.sin(pose.theta)])
    p2 = p3 - 0.4 * dist * normal
    cps = np.stack([p0, p1, p2, p3])

    t = np.linspace(0.0, 1.0, 64)
    samples = bezier_point(cps, t)
    samples[0] = p0
    samples[-1] = p3
    d1, d2 = _bezier_derivatives(cps, t)
    speed2 = (d1 ** 2).sum(axis=1)
    denom = np.maximum(speed2, 1e-12) ** 1.5
    curvature = np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / denom
    steps = np.sqrt(((samples[1:] - samples[:-1]) ** 2).sum(axis=1))
    arclength = np.concatenate([[0.0], np.cumsum(steps)])

    hw = world.half_width
    margins = np.array([clearance(world, s) - hw for s in samples])
    floors = np.array([effective_safe_distance(world, s) for s in samples])
    max_curv = float(curvature.max())
    feasible = bool(max_curv <= cfg.kappa_max and np.all(margins >= floors - 1e-9))
    return TrajectoryPlan(cps, samples, arclength, curvature, door_id, feasible,
                          max_curv, float(margins.min()))


def track_trajectory(state: WheelchairState, plan: TrajectoryPlan,
                     cfg: AssistConfig) -> TrackResult:
    """Pure pursuit along the planned samples."""
    if not plan.feasible:
        raise InfeasiblePlanError("cannot track an infeasible plan")
    pos = np.array([state.pose.x, state.pose.y])
    p3 = plan.control_points[3]
    if float(np.linalg.norm(pos - p3)) <= 0.15:
        return TrackResult(DriveCommand(0.0, 0.0, source="tracker"), True, len(plan.samples) - 1)

    d2 = ((plan.samples - pos) ** 2).sum(axis=1)
    idx = int(np.argmin(d2))
    s_now = plan.arclength[idx]
    goal_idx = int(np.searchsorted(plan.arclength, s_now + cfg.lookahead))
    goal_idx = min(goal_idx, len(plan.samples) - 1)
    goal = plan.samples[goal_idx]

    alpha = normalize_angle(math.atan2(goal[1] - pos[1], goal[0] - pos[0]) - state.pose.theta)
    v_cruise = 0.6 * cfg.v_max
    kappa_goal = float(plan.curvature[goal_idx])
    v = v_cruise * max(0.3, 1.0 - abs(kappa_goal) / cfg.kappa_max)
    omega = 2.0 * v * math.sin(alpha) / cfg.lookahead
    v = _clamp(v, 0.0, state.v_max)
    omega = _clamp(omega, -state.omega_max, state.omega_max)
    return TrackResult(DriveCommand(v, omega, source="tracker"), False, goal_idx)


def _predicted_margin(cmd: DriveCommand, state: WheelchairState,
                      world: CorridorWorld, horizon: float) -> tuple[float, float, np.ndarray]:
    pred = advance_pose(state.pose, cmd.v, cmd.omega, horizon)
    p = pred.position()
    c = clearance(world, p) - state.half_width
    floor = effective_safe_distance(world, p)
    return c, floor, p


def corridor_assist(cmd: DriveCommand, state: WheelchairState,
                    world: CorridorWorld, cfg: AssistConfig) -> DriveCommand:
    """Trim a command whose short-horizon prediction crowds a wall.

    Candidate commands are tried in order (steer-away + slow, slow only,
    raw) and the first that does not predict a smaller margin than the raw
    command wins, so the filter can never make things worse.
    """
    if cmd.v == 0.0 and cmd.omega == 0.0:
        return cmd
    c_raw, floor, pred = _predicted_margin(cmd, state, world, cfg.predict_horizon)
    if c_raw >= floor:
        return cmd

    q = nearest_wall_point(world, pred)
    away = pred - q
    norm = float(np.linalg.norm(away))
    heading = np.array([math.cos(state.pose.theta), math.sin(state.pose.theta)])
    if norm > 1e-9:
        away /= norm
        cross_z = heading[0] * away[1] - heading[1] * away[0]
        sign = 1.0 if cross_z >= 0.0 else -1.0
    else:
        sign = 1.0
    omega_adj = _clamp(cmd.omega + cfg.k_rep * (floor - c_raw) * sign,
                       -state.omega_max, state.omega_max)
    v_adj = cmd.v * max(0.2, c_raw / floor if floor > 1e-9 else 0.2)

    for cand in (DriveCommand(v_adj, omega_adj, source="assist"),
                 DriveCommand(v_adj, cmd.omega, source="assist")):
        c_cand, _, _ = _predicted_margin(cand, state, world, cfg.predict_horizon)
        if c_cand >= c_raw - 1e-12:
            return cand
    return cmd

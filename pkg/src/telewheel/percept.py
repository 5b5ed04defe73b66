"""Corridor perception: edge segments, vanishing point, and door hypotheses.

Doors are found by pairing near-vertical structure edges whose feet, back-
projected to the floor plane, are a door-width apart.  The feet are snapped
to detected corners (the floor markings at each door post give the exact
ground corner) so the metric localization error stays at the corner-detector
level rather than the segment level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import (CameraExtrinsics, CameraIntrinsics, FF_INTRINSICS, MountGeometry,
                     RasterFrame, make_extrinsics, project_direction, project_point)
from .stitch import FeaturePoint, detect_corners
from .world import CorridorWorld, WheelchairState

GRAD_THRESHOLD = 20.0
SPLIT_TOLERANCE_PX = 1.5
MIN_SEGMENT_PX = 10.0
VERTICAL_GATE_DEG = 10.0
VP_EXCLUDE_DEG = 20.0
DOOR_WIDTH_RANGE_M = (0.7, 1.3)
SNAP_RADIUS_PX = 3.0
CONFIDENCE_FLOOR = 0.3
NO_VP_PENALTY = 0.2
POST_MERGE_GAP_PX = 8.0
TRACK_GATE_M = 0.5
TRACK_TIMEOUT_S = 1.0


class PerceptError(Exception):
    pass


class InsufficientSegmentsError(PerceptError):
    pass


class AboveHorizonError(PerceptError):
    pass


class MissingCameraError(PerceptError):
    pass


@dataclass(frozen=True)
class LineSegment2D:
    u1: float
    v1: float
    u2: float
    v2: float
    mean_gradient: float = 0.0

    def length(self) -> float:
        return math.hypot(self.u2 - self.u1, self.v2 - self.v1)

    def deviation_from_vertical(self) -> float:
        """Absolute angle off the image vertical, radians."""
        return math.atan2(abs(self.u2 - self.u1), abs(self.v2 - self.v1))

    def bottom(self) -> tuple[float, float]:
        if self.v1 >= self.v2:
            return (self.u1, self.v1)
        return (self.u2, self.v2)

    def top(self) -> tuple[float, float]:
        if self.v1 >= self.v2:
            return (self.u2, self.v2)
        return (self.u1, self.v1)


@dataclass(frozen=True)
class VanishingPointEstimate:
    u: float
    v: float
    support_count: int
    rms_residual: float


@dataclass(frozen=True)
class DoorHypothesis:
    post_lines: tuple[LineSegment2D, LineSegment2D]
    ground_corners: tuple[tuple[float, float], tuple[float, float]]
    confidence: float
    world_doorway: tuple[np.ndarray, np.ndarray] | None = None
    door_id: int | None = None


@dataclass(frozen=True)
class PerceptionResult:
    doors: list[DoorHypothesis]
    vp: VanishingPointEstimate | None
    corridor_edges: list[LineSegment2D]
    mode: str
    sim_time: float


def extract_segments(frame: RasterFrame) -> list[LineSegment2D]:
    """Edge segments: gradient threshold, thinning, linking, split-and-merge."""
    img = frame.pixels.astype(np.float64)
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    strong = mag >= GRAD_THRESHOLD
    if not strong.any():
        return []

    h, w = img.shape
    angle = np.mod(np.arctan2(gy, gx), math.pi)
    # quantize the gradient direction into 4 bins and suppress non-ridge pixels
    bins = np.floor((angle + math.pi / 8) / (math.pi / 4)).astype(int) % 4
    offsets = {0: (0, 1), 1: (-1, 1), 2: (1, 0), 3: (1, 1)}  # (dv, du) along gradient
    thin = np.zeros_like(strong)
    pad = np.pad(mag, 1, mode="constant")
    for b, (dv, du) in offsets.items():
        sel = strong & (bins == b)
        nxt = pad[1 + dv:h + 1 + dv, 1 + du:w + 1 + du]
        prv = pad[1 - dv:h + 1 - dv, 1 - du:w + 1 - du]
        thin |= sel & (mag > prv) & (mag >= nxt)

    # break chains at junction pixels so every remaining chain is a simple path
    neigh = np.zeros(thin.shape, dtype=int)
    tp = np.pad(thin.astype(int), 1)
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            if dv == 0 and du == 0:
                continue
            neigh += tp[1 + dv:h + 1 + dv, 1 + du:w + 1 + du]
    chains_mask = thin & (neigh <= 2)

    pixset = {(int(v), int(u)) for v, u in np.argwhere(chains_mask)}
    deltas = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]

    def neighbors(p):
        return [(p[0] + dv, p[1] + du) for dv, du in deltas if (p[0] + dv, p[1] + du) in pixset]

    visited: set[tuple[int, int]] = set()
    chains: list[list[tuple[int, int]]] = []
    endpoints = sorted(p for p in pixset if len(neighbors(p)) <= 1)
    seeds = endpoints + sorted(pixset)
    for seed in seeds:
        if seed in visited:
            continue
        chain = [seed]
        visited.add(seed)
        cur = seed
        while True:
            nxt = [n for n in neighbors(cur) if n not in visited]
            if not nxt:
                break
            cur = nxt[0]
            chain.append(cur)
            visited.add(cur)
        if len(chain) >= 2:
            chains.append(chain)

    segments: list[LineSegment2D] = []
    for chain in chains:
        pts = [(float(u), float(v)) for v, u in chain]
        breaks = _split_polyline(pts, SPLIT_TOLERANCE_PX)
        for a, b in zip(breaks, breaks[1:]):
            p, q = pts[a], pts[b]
            if math.hypot(q[0] - p[0], q[1] - p[1]) < MIN_SEGMENT_PX:
                continue
            grads = [mag[int(y), int(x)] for x, y in pts[a:b + 1]]
            segments.append(LineSegment2D(p[0], p[1], q[0], q[1],
                                          float(np.mean(grads))))
    segments.sort(key=lambda s: (s.u1, s.v1, s.u2, s.v2))
    return segments


def _split_polyline(pts: list[tuple[float, float]], tol: float) -> list[int]:
    """Recursive endpoint-split; returns sorted breakpoint indices."""
    breaks = {0, len(pts) - 1}

    def recurse(i: int, j: int):
        if j - i < 2:
            return
        ax, ay = pts[i]
        bx, by = pts[j]
        dx, dy = bx - ax, by - ay
        norm = math.hypot(dx, dy)
        worst, wk = 0.0, -1
        for k in range(i + 1, j):
            px, py = pts[k]
            if norm < 1e-12:
                d = math.hypot(px - ax, py - ay)
            else:
                d = abs(dx * (py - ay) - dy * (px - ax)) / norm
            if d > worst:
                worst, wk = d, k
        if worst > tol and wk > 0:
            breaks.add(wk)
            recurse(i, wk)
            recurse(wk, j)

    recurse(0, len(pts) - 1)
    return sorted(breaks)


def _line_intersection(a: LineSegment2D, b: LineSegment2D) -> tuple[float, float] | None:
    l1 = np.cross([a.u1, a.v1, 1.0], [a.u2, a.v2, 1.0])
    l2 = np.cross([b.u1, b.v1, 1.0], [b.u2, b.v2, 1.0])
    p = np.cross(l1, l2)
    if abs(p[2]) < 1e-9:
        return None
    return (float(p[0] / p[2]), float(p[1] / p[2]))


def _geometric_median(pts: np.ndarray, iters: int = 64) -> np.ndarray:
    est = pts.mean(axis=0)
    for _ in range(iters):
        d = np.sqrt(((pts - est) ** 2).sum(axis=1))
        if (d < 1e-9).any():
            return pts[int(np.argmin(d))]
        wgt = 1.0 / d
        new = (pts * wgt[:, None]).sum(axis=0) / wgt.sum()
        if np.linalg.norm(new - est) < 1e-9:
            return new
        est = new
    return est


def estimate_vanishing_point(segments: list[LineSegment2D],
                             frame_size: tuple[int, int] = (320, 240)
                             ) -> VanishingPointEstimate:
    """Consensus intersection point of the oblique segments."""
    w, h = frame_size
    cx, cy = w / 2.0, h / 2.0
    oblique = [s for s in segments
               if s.deviation_from_vertical() > math.radians(VP_EXCLUDE_DEG)]
    if len(oblique) < 2:
        raise InsufficientSegmentsError("need 2 non-vertical segments, got %d" % len(oblique))

    pts = []
    owners = []
    for i in range(len(oblique)):
        for j in range(i + 1, len(oblique)):
            p = _line_intersection(oblique[i], oblique[j])
            if p is None:
                continue
            if abs(p[0] - cx) > w or abs(p[1] - cy) > h:
                continue
            pts.append(p)
            owners.append((i, j))
    if not pts:
        raise InsufficientSegmentsError("no in-window intersections")
    arr = np.array(pts)
    est = _geometric_median(arr)
    for _ in range(3):  # mode-seeking refinement: re-median the near cluster
        d = np.sqrt(((arr - est) ** 2).sum(axis=1))
        keep = arr[d <= 10.0]
        if len(keep) < 2:
            break
        est = _geometric_median(keep)

    d = np.sqrt(((arr - est) ** 2).sum(axis=1))
    close = d <= 3.0
    sup: set[int] = set()
    for k, (i, j) in enumerate(owners):
        if close[k]:
            sup.add(i)
            sup.add(j)
    support = len(sup) if close.any() else 2
    rms = float(np.sqrt((d[close] ** 2).mean())) if close.any() else float(d.min())
    if support < 2:
        raise InsufficientSegmentsError("no segment consensus at vanishing point")
    return VanishingPointEstimate(float(est[0]), float(est[1]), support, rms)


def pixel_to_ground(u: float, v: float, intr: CameraIntrinsics,
                    extr: CameraExtrinsics) -> np.ndarray:
    """Intersect the viewing ray of pixel (u, v) with the floor plane z=0."""
    ray_cam = np.array([(u - intr.cx) / intr.focal_px, (v - intr.cy) / intr.focal_px, 1.0])
    ray_w = extr.rotation.T @ ray_cam
    if ray_w[2] >= -1e-9:
        raise AboveHorizonError("pixel (%.1f, %.1f) views at or above the horizon" % (u, v))
    if extr.position[2] <= 0.0:
        raise AboveHorizonError("camera is not above the floor")
    t = -extr.position[2] / ray_w[2]
    p = extr.position + t * ray_w
    return p[:2].copy()


def localize_door_on_ground(hyp: DoorHypothesis, intr: CameraIntrinsics,
                            extr: CameraExtrinsics) -> tuple[np.ndarray, np.ndarray]:
    (u1, v1), (u2, v2) = hyp.ground_corners
    return (pixel_to_ground(u1, v1, intr, extr), pixel_to_ground(u2, v2, intr, extr))


def _merge_vertical_segments(verts: list[LineSegment2D]) -> list[LineSegment2D]:
    """Fuse twin edges of a thin pillar into its centerline segment."""
    used = [False] * len(verts)
    order = sorted(range(len(verts)), key=lambda i: (verts[i].u1 + verts[i].u2))
    merged: list[LineSegment2D] = []
    for oi, i in enumerate(order):
        if used[i]:
            continue
        group = [verts[i]]
        used[i] = True
        for j in order[oi + 1:]:
            if used[j]:
                continue
            a, b = verts[i], verts[j]
            du = abs((a.u1 + a.u2) / 2 - (b.u1 + b.u2) / 2)
            if du > POST_MERGE_GAP_PX:
                continue
            top = max(min(a.v1, a.v2), min(b.v1, b.v2))
            bot = min(max(a.v1, a.v2), max(b.v1, b.v2))
            short = min(abs(a.v1 - a.v2), abs(b.v1 - b.v2))
            if bot - top < 0.3 * short:
                continue
            group.append(b)
            used[j] = True
        wts = [g.length() for g in group]
        tot = sum(wts)
        tu = sum(g.top()[0] * w for g, w in zip(group, wts)) / tot
        tv = sum(g.top()[1] * w for g, w in zip(group, wts)) / tot
        bu = sum(g.bottom()[0] * w for g, w in zip(group, wts)) / tot
        bv = sum(g.bottom()[1] * w for g, w in zip(group, wts)) / tot
        mg = sum(g.mean_gradient * w for g, w in zip(group, wts)) / tot
        merged.append(LineSegment2D(tu, tv, bu, bv, mg))
    return merged


def detect_doors(frame: RasterFrame, segments: list[LineSegment2D],
                 corners: list[FeaturePoint], vp: VanishingPointEstimate | None,
                 intr: CameraIntrinsics | None = None,
                 extr: CameraExtrinsics | None = None) -> list[DoorHypothesis]:
    """Pair vertical structure edges into metric door hypotheses."""
    verts = [s for s in segments
             if s.deviation_from_vertical() <= math.radians(VERTICAL_GATE_DEG)]
    if vp is not None:
        verts = [s for s in verts if s.bottom()[1] > vp.v]
    if not verts:
        return []
    if intr is None or extr is None:
        raise MissingCameraError("camera geometry required to gate door width")
    posts = _merge_vertical_segments(verts)

    hyps: list[DoorHypothesis] = []
    for i in range(len(posts)):
        for j in range(i + 1, len(posts)):
            a, b = posts[i], posts[j]
            fa, fb = a.bottom(), b.bottom()
            try:
                ga = pixel_to_ground(fa[0], fa[1], intr, extr)
                gb = pixel_to_ground(fb[0], fb[1], intr, extr)
            except AboveHorizonError:
                continue
            width = float(np.linalg.norm(gb - ga))
            if not (DOOR_WIDTH_RANGE_M[0] <= width <= DOOR_WIDTH_RANGE_M[1]):
                continue

            snapped = []
            snap_q = []
            for foot in (fa, fb):
                best = None
                bd = SNAP_RADIUS_PX
                for c in corners:
                    d = math.hypot(c.u - foot[0], c.v - foot[1])
                    if d <= bd:
                        bd = d
                        best = c
                if best is None:
                    snapped.append(foot)
                    snap_q.append(0.45)
                else:
                    snapped.append((best.u, best.v))
                    snap_q.append(max(0.0, 1.0 - bd / SNAP_RADIUS_PX))

            dev = math.degrees(max(a.deviation_from_vertical(), b.deviation_from_vertical()))
            f_vert = max(0.0, 1.0 - dev / VERTICAL_GATE_DEG)
            f_width = max(0.0, 1.0 - abs(width - 0.9) / 0.6)
            f_snap = 0.5 * (snap_q[0] + snap_q[1])
            conf = f_vert * f_width * f_snap
            if vp is None:
                conf = max(0.0, conf - NO_VP_PENALTY)
            if conf < CONFIDENCE_FLOOR:
                continue
            world_seg = None
            try:
                p1 = pixel_to_ground(snapped[0][0], snapped[0][1], intr, extr)
                p2 = pixel_to_ground(snapped[1][0], snapped[1][1], intr, extr)
                world_seg = (p1, p2)
            except AboveHorizonError:
                pass
            hyps.append(DoorHypothesis((a, b), (tuple(snapped[0]), tuple(snapped[1])),
                                       conf, world_seg))

    hyps.sort(key=lambda hh: (-hh.confidence,
                              min(hh.ground_corners[0][0], hh.ground_corners[1][0])))
    taken: list[tuple[LineSegment2D, ...]] = []
    mids: list[np.ndarray] = []
    out: list[DoorHypothesis] = []
    for hyp in hyps:
        if any(p in t for p in hyp.post_lines for t in taken):
            continue
        if hyp.world_doorway is not None:
            mid = 0.5 * (hyp.world_doorway[0] + hyp.world_doorway[1])
            if any(np.linalg.norm(mid - m) < TRACK_GATE_M for m in mids):
                continue
            mids.append(mid)
        taken.append(hyp.post_lines)
        out.append(hyp)
    return out


def perceive(frame: RasterFrame, intr: CameraIntrinsics, extr: CameraExtrinsics,
             sim_time: float = 0.0) -> PerceptionResult:
    """Full vision pipeline over one forward frame."""
    segments = extract_segments(frame)
    corners = detect_corners(frame)
    try:
        vp = estimate_vanishing_point(segments, (frame.pixels.shape[1], frame.pixels.shape[0]))
    except InsufficientSegmentsError:
        vp = None
    doors = detect_doors(frame, segments, corners, vp, intr, extr)
    edges = [s for s in segments
             if s.deviation_from_vertical() > math.radians(VP_EXCLUDE_DEG)]
    return PerceptionResult(doors, vp, edges, "vision", sim_time)


def oracle_detect(world: CorridorWorld, state: WheelchairState, sigma_px: float = 0.0,
                  drop_prob: float = 0.0, seed: int = 0,
                  mount: MountGeometry | None = None,
                  intr: CameraIntrinsics = FF_INTRINSICS,
                  sim_time: float = 0.0) -> PerceptionResult:
    """Perception bypass: exact door-corner projections plus seeded noise."""
    mnt = mount if mount is not None else MountGeometry()
    extr, _ = make_extrinsics(state, mnt)
    rng = np.random.default_rng(seed)
    doors: list[DoorHypothesis] = []
    for door in sorted(world.doors, key=lambda d: d.id):
        geom = world.geometry_for(door.id)
        pa = project_point(intr, extr, np.array([geom.hinge[0], geom.hinge[1], 0.0]))
        pb = project_point(intr, extr, np.array([geom.end[0], geom.end[1], 0.0]))
        if pa is None or pb is None:
            continue
        if not all(0.0 <= p[0] < intr.width and 0.0 <= p[1] < intr.height for p in (pa, pb)):
            continue
        dropped = rng.random() < drop_prob
        if dropped:
            continue
        noise = rng.normal(0.0, sigma_px, 4) if sigma_px > 0.0 else np.zeros(4)
        ca = (pa[0] + noise[0], pa[1] + noise[1])
        cb = (pb[0] + noise[2], pb[1] + noise[3])
        stub_a = LineSegment2D(ca[0], ca[1] - 30.0, ca[0], ca[1])
        stub_b = LineSegment2D(cb[0], cb[1] - 30.0, cb[0], cb[1])
        doors.append(DoorHypothesis((stub_a, stub_b), (ca, cb), 1.0,
                                    (geom.hinge.copy(), geom.end.copy()), door.id))
    vp_px = project_direction(intr, extr, np.array([1.0, 0.0, 0.0]))
    vp = None
    if vp_px is not None:
        vp = VanishingPointEstimate(vp_px[0], vp_px[1], 2, 0.0)
    return PerceptionResult(doors, vp, [], "oracle", sim_time)


@dataclass
class TrackedDoor:
    track_id: int
    door_id: int | None
    endpoints: tuple[np.ndarray, np.ndarray]
    confidence: float
    hits: int
    last_seen: float

    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.endpoints[0] + self.endpoints[1])


class DoorTracker:
    """Nearest-neighbor association of door hypotheses across frames.

    Endpoint estimates are cumulative means over all associated
    observations, so localization noise averages out as a door stays
    in view.
    """

    def __init__(self, gate_m: float = TRACK_GATE_M, timeout_s: float = TRACK_TIMEOUT_S):
        self.gate_m = gate_m
        self.timeout_s = timeout_s
        self.tracks: list[TrackedDoor] = []
        self._next_id = 1

    def update(self, hyps: list[DoorHypothesis],
               measured: list[tuple[np.ndarray, np.ndarray]],
               now: float) -> list[TrackedDoor]:
        """`measured` holds the world endpoints to fuse for each hypothesis."""
        claimed: set[int] = set()
        for hyp, seg in zip(hyps, measured):
            mid = 0.5 * (seg[0] + seg[1])
            best, bd = None, self.gate_m
            for k, tr in enumerate(self.tracks):
                if k in claimed:
                    continue
                d = float(np.linalg.norm(tr.midpoint() - mid))
                if d < bd:
                    bd, best = d, k
            if best is None:
                self.tracks.append(TrackedDoor(self._next_id, hyp.door_id,
                                               (seg[0].copy(), seg[1].copy()),
                                               hyp.confidence, 1, now))
                claimed.add(len(self.tracks) - 1)
                self._next_id += 1
            else:
                tr = self.tracks[best]
                n = tr.hits
                # order the measurement to match the track's endpoint order
                d_direct = (np.linalg.norm(tr.endpoints[0] - seg[0])
                            + np.linalg.norm(tr.endpoints[1] - seg[1]))
                d_swap = (np.linalg.norm(tr.endpoints[0] - seg[1])
                          + np.linalg.norm(tr.endpoints[1] - seg[0]))
                a, b = (seg[0], seg[1]) if d_direct <= d_swap else (seg[1], seg[0])
                e0 = (tr.endpoints[0] * n + a) / (n + 1)
                e1 = (tr.endpoints[1] * n + b) / (n + 1)
                tr.endpoints = (e0, e1)
                tr.hits = n + 1
                tr.last_seen = now
                tr.confidence = hyp.confidence
                if hyp.door_id is not None:
                    tr.door_id = hyp.door_id
                claimed.add(best)
        self.tracks = [t for t in self.tracks if now - t.last_seen <= self.timeout_s]
        return list(self.tracks)

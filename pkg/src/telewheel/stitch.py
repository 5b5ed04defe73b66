"""Two-view image stitching: corners, patch matching, homography, composite.

The forward and down views are merged into one tall canvas so the operator
sees the scene ahead and the floor under the chair as a single image.  The
forward view is copied to the top of the canvas; the down view is warped
into the same pixel frame through an estimated (or fallback) homography and
blended across a short seam band.
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .camera import CameraExtrinsics, CameraIntrinsics, RasterFrame, ground_truth_homography

HARRIS_K = 0.04
HARRIS_REL_THRESHOLD = 0.01
NMS_RADIUS = 5
PATCH_HALF = 4               # 9x9 descriptor patch
RATIO_TEST = 0.8
RANSAC_ITERS = 1000
RANSAC_THRESHOLD_PX = 2.0
CANVAS_WIDTH = 320
CANVAS_HEIGHT = 420
SEAM_ROWS = 20
TRACK_POINT = (0.5, 0.85)    # normalized canvas coordinates, fixed anchor


class StitchError(Exception):
    """Base for stitching failures."""


class TooFewMatchesError(StitchError):
    pass


class DegenerateConfigurationError(StitchError):
    pass


class NonInvertibleHomographyError(StitchError):
    pass


@dataclass(frozen=True)
class FeaturePoint:
    u: float
    v: float
    response: float
    patch: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    ssd: float


@dataclass(frozen=True)
class FdfFrame:
    """Composited forward-down frame plus UI overlay payload."""

    pixels: np.ndarray
    partition_row: int
    overlays: dict
    track_point: tuple[float, float] = TRACK_POINT
    stitch_fallback: bool = False

    def pixels_b64(self) -> str:
        return base64.b64encode(self.pixels.tobytes()).decode("ascii")


def detect_corners(frame: RasterFrame) -> list[FeaturePoint]:
    """Harris corners with box-window structure tensor and subpixel peaks."""
    img = frame.pixels.astype(np.float64)
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    sxx = ndimage.uniform_filter(gx * gx, size=5, mode="nearest")
    syy = ndimage.uniform_filter(gy * gy, size=5, mode="nearest")
    sxy = ndimage.uniform_filter(gx * gy, size=5, mode="nearest")
    resp = (sxx * syy - sxy * sxy) - HARRIS_K * (sxx + syy) ** 2
    peak = float(resp.max(initial=0.0))
    if peak <= 0.0:
        return []
    thr = HARRIS_REL_THRESHOLD * peak

    yy, xx = np.mgrid[-NMS_RADIUS:NMS_RADIUS + 1, -NMS_RADIUS:NMS_RADIUS + 1]
    disk = (xx * xx + yy * yy) <= NMS_RADIUS * NMS_RADIUS
    local_max = ndimage.maximum_filter(resp, footprint=disk, mode="constant", cval=-np.inf)
    h, w = img.shape
    margin = max(NMS_RADIUS, PATCH_HALF + 1)
    cand = (resp >= thr) & (resp >= local_max)
    cand[:margin, :] = False
    cand[-margin:, :] = False
    cand[:, :margin] = False
    cand[:, -margin:] = False

    points: list[FeaturePoint] = []
    for v, u in np.argwhere(cand):
        ou, ov = _refine_corner(resp, gx, gy, int(u), int(v))
        patch = img[v - PATCH_HALF:v + PATCH_HALF + 1,
                    u - PATCH_HALF:u + PATCH_HALF + 1].copy()
        points.append(FeaturePoint(u + ou, v + ov, float(resp[v, u]), patch))
    points.sort(key=lambda p: (-p.response, p.v, p.u))
    return points


def _refine_corner(resp: np.ndarray, gx: np.ndarray, gy: np.ndarray,
                   u: int, v: int) -> tuple[float, float]:
    """Sub-pixel corner position by quadratic least squares.

    Every gradient vector near a corner is perpendicular to the offset
    from the true corner, so the corner minimizes the quadratic objective
    sum((grad(q) . (q - c))^2); its normal equations are a 2x2 solve.
    The Harris response peak sits a pixel or so inside the corner, so a
    fit on the response surface alone would be biased; this fit is not.
    """
    r = 3
    h, w = resp.shape
    v0, v1 = max(1, v - r), min(h - 1, v + r + 1)
    u0, u1 = max(1, u - r), min(w - 1, u + r + 1)
    wy, wx = np.mgrid[v0:v1, u0:u1].astype(np.float64)
    lgx = gx[v0:v1, u0:u1]
    lgy = gy[v0:v1, u0:u1]
    a11 = (lgx * lgx).sum()
    a12 = (lgx * lgy).sum()
    a22 = (lgy * lgy).sum()
    b1 = (lgx * lgx * wx + lgx * lgy * wy).sum()
    b2 = (lgx * lgy * wx + lgy * lgy * wy).sum()
    det = a11 * a22 - a12 * a12
    if abs(det) > 1e-6 * max(a11 + a22, 1.0) ** 2:
        cu = (a22 * b1 - a12 * b2) / det
        cv = (a11 * b2 - a12 * b1) / det
        if abs(cu - u) <= 2.5 and abs(cv - v) <= 2.5:
            return cu - u, cv - v
    # fallback: quadratic peak fit on the response surface
    du = 0.5 * (resp[v, u + 1] - resp[v, u - 1])
    dv = 0.5 * (resp[v + 1, u] - resp[v - 1, u])
    duu = resp[v, u + 1] - 2.0 * resp[v, u] + resp[v, u - 1]
    dvv = resp[v + 1, u] - 2.0 * resp[v, u] + resp[v - 1, u]
    duv = 0.25 * (resp[v + 1, u + 1] - resp[v + 1, u - 1]
                  - resp[v - 1, u + 1] + resp[v - 1, u - 1])
    det = duu * dvv - duv * duv
    if abs(det) > 1e-12:
        ou = -(dvv * du - duv * dv) / det
        ov = -(duu * dv - duv * du) / det
        if abs(ou) <= 1.0 and abs(ov) <= 1.0:
            return ou, ov
    return 0.0, 0.0


def match_features(feats_a: list[FeaturePoint], feats_b: list[FeaturePoint]) -> list[Match]:
    """Patch-SSD nearest neighbors with ratio test and mutual-best filtering."""
    if not feats_a or not feats_b:
        return []
    pa = np.stack([f.patch.ravel() for f in feats_a])
    pb = np.stack([f.patch.ravel() for f in feats_b])
    # ssd[i, j] = |pa_i|^2 + |pb_j|^2 - 2 pa_i . pb_j
    na = (pa * pa).sum(axis=1)[:, None]
    nb = (pb * pb).sum(axis=1)[None, :]
    ssd = np.maximum(na + nb - 2.0 * pa @ pb.T, 0.0)

    best_b_for_a = np.argmin(ssd, axis=1)
    best_a_for_b = np.argmin(ssd, axis=0)
    out: list[Match] = []
    for i, j in enumerate(best_b_for_a):
        if best_a_for_b[j] != i:
            continue
        row = ssd[i]
        best = row[j]
        if len(row) > 1:
            second = np.partition(row, 1)[1]
            if second > 0.0 and best > RATIO_TEST * second:
                continue
            if second <= 0.0 and best > 0.0:
                continue
        out.append(Match(i, int(j), float(best)))
    out.sort(key=lambda m: (m.ssd, m.index_a))
    return out


def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = pts.mean(axis=0)
    d = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        raise DegenerateConfigurationError("coincident points")
    s = math.sqrt(2.0) / d
    t = np.array([[s, 0.0, -s * centroid[0]],
                  [0.0, s, -s * centroid[1]],
                  [0.0, 0.0, 1.0]])
    ones = np.ones((len(pts), 1))
    return (t @ np.hstack([pts, ones]).T).T[:, :2], t


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear transform with Hartley normalization; raises if rank-deficient."""
    ns, ts = _normalize_points(src)
    nd, td = _normalize_points(dst)
    n = len(src)
    a = np.zeros((2 * n, 9))
    for k in range(n):
        x, y = ns[k]
        xp, yp = nd[k]
        a[2 * k] = [-x, -y, -1.0, 0.0, 0.0, 0.0, xp * x, xp * y, xp]
        a[2 * k + 1] = [0.0, 0.0, 0.0, -x, -y, -1.0, yp * x, yp * y, yp]
    _, sv, vt = np.linalg.svd(a)
    if n > 4 and sv[7] < 1e-10:
        raise DegenerateConfigurationError("rank-deficient correspondence set")
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ h @ ts
    if abs(h[2, 2]) < 1e-12:
        raise DegenerateConfigurationError("homography normalization failed")
    return h / h[2, 2]


def _sample_degenerate(pts: np.ndarray) -> bool:
    # any 3 of the 4 sample points collinear
    for skip in range(4):
        tri = np.delete(pts, skip, axis=0)
        area = abs((tri[1][0] - tri[0][0]) * (tri[2][1] - tri[0][1])
                   - (tri[2][0] - tri[0][0]) * (tri[1][1] - tri[0][1]))
        if area < 1e-9:
            return True
    return False


def _transfer_error(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    ones = np.ones((len(src), 1))
    proj = (h @ np.hstack([src, ones]).T).T
    w = proj[:, 2]
    w = np.where(np.abs(w) < 1e-12, 1e-12, w)
    return np.sqrt(((proj[:, :2] / w[:, None] - dst) ** 2).sum(axis=1))


def estimate_homography(matches: list[Match], feats_a: list[FeaturePoint],
                        feats_b: list[FeaturePoint], seed: int = 0
                        ) -> tuple[np.ndarray, list[int]]:
    """Seeded RANSAC over 4-point samples, then a normalized DLT refit.

    Returns the homography mapping view-a pixels to view-b pixels and the
    indices of inlier matches.
    """
    if len(matches) < 4:
        raise TooFewMatchesError("need at least 4 matches, got %d" % len(matches))
    src = np.array([[feats_a[m.index_a].u, feats_a[m.index_a].v] for m in matches])
    dst = np.array([[feats_b[m.index_b].u, feats_b[m.index_b].v] for m in matches])

    rng = np.random.default_rng(seed)
    n = len(matches)
    best_inliers: np.ndarray | None = None
    for _ in range(RANSAC_ITERS):
        pick = rng.choice(n, size=4, replace=False)
        if _sample_degenerate(src[pick]) or _sample_degenerate(dst[pick]):
            continue
        try:
            h = _dlt(src[pick], dst[pick])
        except DegenerateConfigurationError:
            continue
        err = _transfer_error(h, src, dst)
        inl = np.flatnonzero(err <= RANSAC_THRESHOLD_PX)
        if best_inliers is None or len(inl) > len(best_inliers):
            best_inliers = inl
    if best_inliers is None or len(best_inliers) < 4:
        raise DegenerateConfigurationError("no non-degenerate consensus found")
    h = _dlt(src[best_inliers], dst[best_inliers])
    err = _transfer_error(h, src[best_inliers], dst[best_inliers])
    rmse = float(np.sqrt((err ** 2).mean()))
    if rmse > RANSAC_THRESHOLD_PX:
        raise DegenerateConfigurationError("refit RMSE %.2f px exceeds threshold" % rmse)
    return h, [int(i) for i in best_inliers]


def composite_fdf(ff: RasterFrame, df: RasterFrame, h: np.ndarray,
                  overlays: dict | None = None, stitch_fallback: bool = False) -> FdfFrame:
    """Build the tall operator canvas: forward view on top, warped down view below.

    The canvas shares the forward view's pixel frame, so the down view is
    sampled at H * (u, v) for every canvas pixel; rows past the forward
    image extend the view toward the floor.  A linear alpha ramp over the
    last SEAM_ROWS rows of the forward image hides the seam.
    """
    if abs(np.linalg.det(h)) < 1e-12:
        raise NonInvertibleHomographyError("homography is singular")
    ffh, ffw = ff.pixels.shape
    dfh, dfw = df.pixels.shape
    canvas = np.zeros((CANVAS_HEIGHT, CANVAS_WIDTH), dtype=np.float64)
    defined_df = np.zeros((CANVAS_HEIGHT, CANVAS_WIDTH), dtype=bool)

    vv, uu = np.mgrid[0:CANVAS_HEIGHT, 0:CANVAS_WIDTH].astype(np.float64)
    ones = np.ones_like(uu)
    q = np.stack([uu, vv, ones])
    mapped = np.tensordot(h, q, axes=1)
    w = mapped[2]
    w = np.where(np.abs(w) < 1e-12, 1e-12, w)
    mu = mapped[0] / w
    mv = mapped[1] / w
    inside = (mu >= 0.0) & (mu <= dfw - 1.0) & (mv >= 0.0) & (mv <= dfh - 1.0) & (mapped[2] > 0.0)

    u0 = np.clip(np.floor(mu).astype(int), 0, dfw - 2)
    v0 = np.clip(np.floor(mv).astype(int), 0, dfh - 2)
    fu = np.clip(mu - u0, 0.0, 1.0)
    fv = np.clip(mv - v0, 0.0, 1.0)
    dfp = df.pixels.astype(np.float64)
    bil = (dfp[v0, u0] * (1 - fu) * (1 - fv) + dfp[v0, u0 + 1] * fu * (1 - fv)
           + dfp[v0 + 1, u0] * (1 - fu) * fv + dfp[v0 + 1, u0 + 1] * fu * fv)
    canvas[inside] = bil[inside]
    defined_df = inside

    ffp = ff.pixels.astype(np.float64)
    band_top = ffh - SEAM_ROWS
    for row in range(ffh):
        if row < band_top:
            alpha = 1.0
        else:
            alpha = 1.0 - (row - band_top + 1) / float(SEAM_ROWS)
        both = defined_df[row]
        canvas[row, both] = alpha * ffp[row, both] + (1.0 - alpha) * canvas[row, both]
        canvas[row, ~both] = ffp[row, ~both]
    partition_row = band_top + SEAM_ROWS // 2

    out = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    ov = overlays if overlays is not None else {}
    return FdfFrame(out, partition_row, ov, TRACK_POINT, stitch_fallback)


class StitchPipeline:
    """Per-tick stitching with keyframe reuse and a ground-truth fallback.

    The homography is re-estimated every `keyframe_interval` frames and
    reused in between; when estimation fails the previous keyframe answer
    is kept, and if none exists the camera-geometry homography is used with
    the frame flagged.
    """

    def __init__(self, seed: int = 0, keyframe_interval: int = 10,
                 estimate_every_tick: bool = False):
        self.seed = seed
        self.keyframe_interval = max(1, keyframe_interval)
        self.estimate_every_tick = estimate_every_tick
        self.tick_count = 0
        self.current_h: np.ndarray | None = None
        self.last_fallback = False

    def process(self, ff: RasterFrame, df: RasterFrame,
                intr_ff: CameraIntrinsics, extr_ff: CameraExtrinsics,
                intr_df: CameraIntrinsics, extr_df: CameraExtrinsics,
                overlays: dict | None = None) -> FdfFrame:
        due = self.estimate_every_tick or self.current_h is None \
            or (self.tick_count % self.keyframe_interval == 0)
        fallback = False
        if due:
            try:
                fa = detect_corners(ff)
                fb = detect_corners(df)
                matches = match_features(fa, fb)
                h, _ = estimate_homography(matches, fa, fb, seed=self.seed)
                self.current_h = h
            except StitchError:
                if self.current_h is None:
                    self.current_h = ground_truth_homography(intr_ff, extr_ff, intr_df, extr_df)
                    fallback = True
                # else: keep previous keyframe homography
        self.tick_count += 1
        self.last_fallback = fallback
        return composite_fdf(ff, df, self.current_h, overlays, stitch_fallback=fallback)

"""Cross-section alignment: keypoints, descriptor matching, RANSAC, warping.

Coordinates are (x, y) = (col, row) throughout; transforms are 2x3 matrices
mapping central-frame points to adjacent-frame points.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import apply_transform, invert_transform
from .errors import DegenerateConfigurationError

N_ORI_BINS = 36
DESC_CELLS = 4
DESC_BINS = 8


@dataclass
class Keypoint:
    row: float
    col: float
    response: float
    orientation: float
    scale: float
    descriptor: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class PlanarTransform:
    matrix: np.ndarray
    family: str = "similarity"

    def __post_init__(self):
        m = np.asarray(self.matrix, np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"transform must be 2x3, got {m.shape}")
        if abs(np.linalg.det(m[:, :2])) <= 1e-8:
            raise DegenerateConfigurationError("transform linear part is singular")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls, family="similarity"):
        return cls(np.hstack([np.eye(2), np.zeros((2, 1))]), family)

    def inverse(self):
        return PlanarTransform(invert_transform(self.matrix), self.family)

    def apply(self, pts):
        return apply_transform(self.matrix, pts)

    def as_list(self):
        return [float(v) for v in self.matrix.ravel()]


def to_gray(image):
    img = np.asarray(image)
    if img.ndim == 3:
        img = img.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    img = img.astype(np.float64)
    if np.asarray(image).dtype == np.uint8:
        img = img / 255.0
    return img


# -- detection ---------------------------------------------------------------

def detect_keypoints(image, max_count=500, sigma0=1.6, levels=3, contrast=0.004,
                     edge_ratio=10.0, border=3):
    """Difference-of-Gaussian extrema with orientation and 4x4x8 descriptors.

    One octave of ``levels + 3`` Gaussian images gives ``levels + 2`` DoG
    layers; extrema are searched in the inner ``levels`` layers. Positions are
    refined to sub-pixel precision by a 2-D quadratic fit; scale is not
    refined. Each orientation peak within 80% of the maximum yields its own
    keypoint. A constant image yields an empty list.
    """
    gray = to_gray(image)
    if min(gray.shape) < 16:
        raise ValueError(f"image must be at least 16x16, got {gray.shape}")
    if np.ptp(gray) == 0:
        return []
    k = 2.0 ** (1.0 / levels)
    sigmas = [sigma0 * k ** i for i in range(levels + 3)]
    gauss = np.stack([ndimage.gaussian_filter(gray, s, mode="nearest") for s in sigmas])
    dog = gauss[1:] - gauss[:-1]

    local_max = ndimage.maximum_filter(dog, size=3, mode="nearest") == dog
    local_min = ndimage.minimum_filter(dog, size=3, mode="nearest") == dog
    H, W = gray.shape
    cand = (local_max | local_min) & (np.abs(dog) > contrast)
    cand[0] = cand[-1] = False
    cand[:, :border] = cand[:, -border:] = False
    cand[:, :, :border] = cand[:, :, -border:] = False

    grads = [np.gradient(g) for g in gauss]
    kps = []
    for lvl, r, c in zip(*np.nonzero(cand)):
        d = dog[lvl]
        dxx = d[r, c + 1] - 2 * d[r, c] + d[r, c - 1]
        dyy = d[r + 1, c] - 2 * d[r, c] + d[r - 1, c]
        dxy = 0.25 * (d[r + 1, c + 1] - d[r + 1, c - 1] - d[r - 1, c + 1] + d[r - 1, c - 1])
        tr, det = dxx + dyy, dxx * dyy - dxy * dxy
        if det <= 0 or tr * tr / det >= (edge_ratio + 1) ** 2 / edge_ratio:
            continue
        dx = 0.5 * (d[r, c + 1] - d[r, c - 1])
        dy = 0.5 * (d[r + 1, c] - d[r - 1, c])
        hess = np.array([[dxx, dxy], [dxy, dyy]])
        off = -np.linalg.solve(hess, [dx, dy])
        if np.any(np.abs(off) > 0.6):
            continue
        x, y = c + off[0], r + off[1]
        response = abs(d[r, c] + 0.5 * (dx * off[0] + dy * off[1]))
        gy, gx = grads[lvl]
        scale = sigmas[lvl]
        for theta in _orientations(gx, gy, x, y, scale):
            desc = _descriptor(gx, gy, x, y, scale, theta)
            kps.append(Keypoint(float(y), float(x), float(response), float(theta), float(scale), desc))
    kps.sort(key=lambda kp: (-kp.response, kp.row, kp.col, kp.orientation))
    return kps[:max_count]


def _bilinear_points(img, xs, ys):
    H, W = img.shape
    xs = np.clip(xs, 0, W - 1)
    ys = np.clip(ys, 0, H - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx, fy = xs - x0, ys - y0
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
            + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])


def _orientations(gx, gy, x, y, scale):
    sig = 1.5 * scale
    rad = int(math.ceil(3 * sig))
    oy, ox = np.mgrid[-rad:rad + 1, -rad:rad + 1].astype(np.float64)
    inside = ox ** 2 + oy ** 2 <= rad * rad
    ox, oy = ox[inside], oy[inside]
    px, py = x + ox, y + oy
    H, W = gx.shape
    ok = (px >= 0) & (px <= W - 1) & (py >= 0) & (py <= H - 1)
    vx = _bilinear_points(gx, px[ok], py[ok])
    vy = _bilinear_points(gy, px[ok], py[ok])
    weight = np.exp(-(ox[ok] ** 2 + oy[ok] ** 2) / (2 * sig * sig)) * np.hypot(vx, vy)
    ang = np.arctan2(vy, vx) % (2 * np.pi)
    pos = ang / (2 * np.pi) * N_ORI_BINS
    lo = np.floor(pos).astype(int) % N_ORI_BINS
    frac = pos - np.floor(pos)
    hist = np.zeros(N_ORI_BINS)
    np.add.at(hist, lo, weight * (1 - frac))
    np.add.at(hist, (lo + 1) % N_ORI_BINS, weight * frac)
    for _ in range(2):
        hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3
    peak = hist.max()
    if peak <= 0:
        return [0.0]
    out = []
    for i in range(N_ORI_BINS):
        left, right = hist[i - 1], hist[(i + 1) % N_ORI_BINS]
        if hist[i] > left and hist[i] > right and hist[i] >= 0.8 * peak:
            shift = 0.5 * (left - right) / (left - 2 * hist[i] + right)
            out.append(((i + shift) / N_ORI_BINS * 2 * np.pi) % (2 * np.pi))
    return out or [float(np.argmax(hist)) / N_ORI_BINS * 2 * np.pi]


def _descriptor(gx, gy, x, y, scale, theta):
    cell = 3.0 * scale
    n = 4 * DESC_CELLS
    # sample centres in descriptor frame, spanning DESC_CELLS cells per axis
    u = (np.arange(n) + 0.5) / n * DESC_CELLS - DESC_CELLS / 2
    uu, vv = np.meshgrid(u, u, indexing="xy")
    ct, st = math.cos(theta), math.sin(theta)
    px = x + cell * (ct * uu - st * vv)
    py = y + cell * (st * uu + ct * vv)
    vx = _bilinear_points(gx, px.ravel(), py.ravel())
    vy = _bilinear_points(gy, px.ravel(), py.ravel())
    H, W = gx.shape
    inside = ((px.ravel() >= 0) & (px.ravel() <= W - 1) & (py.ravel() >= 0) & (py.ravel() <= H - 1))
    mag = np.hypot(vx, vy) * inside * np.exp(-(uu.ravel() ** 2 + vv.ravel() ** 2) / (2 * (DESC_CELLS / 2) ** 2))
    ang = (np.arctan2(vy, vx) - theta) % (2 * np.pi)
    ob = ang / (2 * np.pi) * DESC_BINS
    cx = uu.ravel() + DESC_CELLS / 2 - 0.5
    cy = vv.ravel() + DESC_CELLS / 2 - 0.5
    hist = np.zeros((DESC_CELLS + 2, DESC_CELLS + 2, DESC_BINS))
    x0, y0, o0 = np.floor(cx).astype(int), np.floor(cy).astype(int), np.floor(ob).astype(int)
    fx, fy, fo = cx - x0, cy - y0, ob - o0
    for dy_, wy in ((0, 1 - fy), (1, fy)):
        for dx_, wx in ((0, 1 - fx), (1, fx)):
            for do, wo in ((0, 1 - fo), (1, fo)):
                np.add.at(hist, (y0 + dy_ + 1, x0 + dx_ + 1, (o0 + do) % DESC_BINS), mag * wy * wx * wo)
    vec = hist[1:-1, 1:-1].ravel()
    norm = np.linalg.norm(vec)
    if norm == 0:
        vec = np.full(vec.size, 1.0 / math.sqrt(vec.size))
        return vec
    vec = np.minimum(vec / norm, 0.2)
    return vec / np.linalg.norm(vec)


# -- matching ----------------------------------------------------------------

@dataclass(frozen=True)
class Match:
    a: int
    b: int
    distance: float


def match_descriptors(a, b, ratio=0.8):
    """Mutual nearest neighbours passing Lowe's ratio test."""
    if not a or not b:
        raise ValueError("both keypoint lists must be nonempty")
    da = np.stack([k.descriptor for k in a])
    db = np.stack([k.descriptor for k in b])
    d2 = np.maximum((da ** 2).sum(1)[:, None] + (db ** 2).sum(1)[None] - 2 * da @ db.T, 0.0)
    dist = np.sqrt(d2)
    nn_ab = np.argmin(dist, axis=1)
    nn_ba = np.argmin(dist, axis=0)
    out = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] != i:
            continue
        d1 = dist[i, j]
        if len(b) > 1:
            second = np.partition(dist[i], 1)[1]
            if not d1 <= ratio * second:
                continue
        out.append(Match(i, int(j), float(d1)))
    return out


# -- robust estimation -------------------------------------------------------

def fit_transform(src, dst, family="similarity"):
    """Least-squares similarity or affine from (N, 2) point pairs."""
    src = np.asarray(src, np.float64)
    dst = np.asarray(dst, np.float64)
    n = len(src)
    if family == "similarity":
        A = np.zeros((2 * n, 4))
        A[0::2] = np.column_stack([src[:, 0], -src[:, 1], np.ones(n), np.zeros(n)])
        A[1::2] = np.column_stack([src[:, 1], src[:, 0], np.zeros(n), np.ones(n)])
        p, *_ = np.linalg.lstsq(A, dst.ravel(), rcond=None)
        a, b, tx, ty = p
        return np.array([[a, -b, tx], [b, a, ty]])
    if family == "affine":
        X = np.column_stack([src, np.ones(n)])
        p, *_ = np.linalg.lstsq(X, dst, rcond=None)
        return p.T.copy()
    raise ValueError(f"unknown transform family {family!r}")


def _collinear(pts, tol=1e-6):
    c = pts - pts.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    return s[0] == 0 or s[-1] / s[0] < tol


@dataclass
class RansacResult:
    transform: PlanarTransform
    inliers: np.ndarray
    inlier_ratio: float
    low_inlier_ratio: bool
    iterations: int


def estimate_transform_ransac(src, dst, family="similarity", inlier_threshold_px=2.0,
                              max_iters=2000, confidence=0.995, seed=0):
    """RANSAC over minimal samples, then least-squares refit on the inliers.

    The random stream is seeded from ``seed`` and the canonically sorted
    correspondences, so permuting the input does not change the estimate.
    """
    src = np.asarray(src, np.float64).reshape(-1, 2)
    dst = np.asarray(dst, np.float64).reshape(-1, 2)
    minimal = {"similarity": 2, "affine": 3}.get(family)
    if minimal is None:
        raise ValueError(f"unknown transform family {family!r}")
    n = len(src)
    if n < minimal:
        raise DegenerateConfigurationError(f"{family} needs >= {minimal} matches, got {n}")
    if _collinear(src) or _collinear(dst):
        raise DegenerateConfigurationError("all matches are collinear")

    order = np.lexsort((dst[:, 1], dst[:, 0], src[:, 1], src[:, 0]))
    s_src, s_dst = src[order], dst[order]
    digest = zlib.crc32(np.ascontiguousarray(np.hstack([s_src, s_dst])).tobytes())
    rng = np.random.default_rng([int(seed), digest])

    thr2 = inlier_threshold_px ** 2
    best_count, best_cost, best_mask = -1, math.inf, None
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(n, size=minimal, replace=False)
        ps = s_src[idx]
        if family == "affine" and _collinear(ps, 1e-3):
            continue
        if family == "similarity" and np.allclose(ps[0], ps[1]):
            continue
        M = fit_transform(ps, s_dst[idx], family)
        if abs(np.linalg.det(M[:, :2])) <= 1e-8:
            continue
        r2 = ((apply_transform(M, s_src) - s_dst) ** 2).sum(1)
        inl = r2 < thr2
        count = int(inl.sum())
        cost = float(np.minimum(r2, thr2).sum())
        if count > best_count or (count == best_count and cost < best_cost):
            best_count, best_cost, best_mask = count, cost, inl
            w = count / n
            if w >= 1.0:
                needed = it
            elif w > 0:
                denom = math.log(max(1e-12, 1 - w ** minimal))
                needed = int(math.ceil(math.log(1 - confidence) / denom)) if denom < 0 else max_iters
    if best_mask is None or best_count < minimal:
        raise DegenerateConfigurationError("no non-degenerate minimal sample found")

    mask = best_mask
    for _ in range(3):
        M = fit_transform(s_src[mask], s_dst[mask], family)
        r2 = ((apply_transform(M, s_src) - s_dst) ** 2).sum(1)
        new = r2 < thr2
        if new.sum() < minimal or np.array_equal(new, mask):
            break
        mask = new
    M = fit_transform(s_src[mask], s_dst[mask], family)
    inliers = np.zeros(n, bool)
    inliers[order[mask]] = True
    ratio = float(mask.sum()) / n
    return RansacResult(PlanarTransform(M, family), inliers, ratio, ratio < 0.2, it)


def register(central_image, adjacent_image, family="similarity", ratio=0.8, seed=0, max_keypoints=500):
    """Estimate the central -> adjacent transform from two histology images."""
    ka = detect_keypoints(central_image, max_keypoints)
    kb = detect_keypoints(adjacent_image, max_keypoints)
    if not ka or not kb:
        raise DegenerateConfigurationError("no keypoints detected")
    matches = match_descriptors(ka, kb, ratio)
    src = np.array([[ka[m.a].col, ka[m.a].row] for m in matches]).reshape(-1, 2)
    dst = np.array([[kb[m.b].col, kb[m.b].row] for m in matches]).reshape(-1, 2)
    return estimate_transform_ransac(src, dst, family, seed=seed)


# -- warping -----------------------------------------------------------------

@dataclass
class AlignedCentral:
    histology: np.ndarray  # float32 [3, H, W] in [0, 1]
    expression: np.ndarray  # float32 [G, H, W]
    validity: np.ndarray  # uint8 [H, W]
    mask: np.ndarray = None  # nearest-resampled source mask, if given


def _preimage(M, shape):
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W]
    pts = apply_transform(invert_transform(M), np.stack([xx.ravel(), yy.ravel()], 1).astype(np.float64))
    return pts[:, 0].reshape(H, W), pts[:, 1].reshape(H, W)


def bilinear_warp(img, xs, ys):
    """Sample [C, H, W] at (xs, ys); returns (values, validity)."""
    C, H, W = img.shape
    eps = 1e-9
    valid = (xs >= -eps) & (xs <= W - 1 + eps) & (ys >= -eps) & (ys <= H - 1 + eps)
    xc = np.clip(xs, 0, W - 1)
    yc = np.clip(ys, 0, H - 1)
    x0 = np.floor(xc).astype(int)
    y0 = np.floor(yc).astype(int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (xc - x0)[None]
    fy = (yc - y0)[None]
    src = img.astype(np.float64)
    out = ((1 - fx) * (1 - fy) * src[:, y0, x0] + fx * (1 - fy) * src[:, y0, x1]
           + (1 - fx) * fy * src[:, y1, x0] + fx * fy * src[:, y1, x1])
    out = np.where(valid[None], out, 0.0)
    return out.astype(img.dtype), valid.astype(np.uint8)


def nearest_warp(img, xs, ys):
    C, H, W = img.shape
    r = np.rint(ys).astype(int)
    c = np.rint(xs).astype(int)
    valid = (r >= 0) & (r < H) & (c >= 0) & (c < W)
    out = img[:, np.clip(r, 0, H - 1), np.clip(c, 0, W - 1)]
    return np.where(valid[None], out, 0).astype(img.dtype)


def warp(histology, expression, transform, mask=None):
    """Resample central maps into the adjacent frame.

    ``histology`` is float [3, H, W] (or uint8 [H, W, 3]); expression and
    histology are bilinear, the optional mask nearest-neighbour.
    """
    h = np.asarray(histology)
    if h.dtype == np.uint8:
        h = (h.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1)
    M = transform.matrix if isinstance(transform, PlanarTransform) else np.asarray(transform, np.float64)
    if abs(np.linalg.det(M[:, :2])) <= 1e-8:
        raise DegenerateConfigurationError("cannot warp with a singular transform")
    shape = h.shape[1:]
    xs, ys = _preimage(M, shape)
    wh, valid = bilinear_warp(h.astype(np.float32), xs, ys)
    we, _ = bilinear_warp(np.asarray(expression, np.float32), xs, ys)
    wm = None if mask is None else nearest_warp(np.asarray(mask)[None], xs, ys)[0]
    return AlignedCentral(wh, we, valid, wm)

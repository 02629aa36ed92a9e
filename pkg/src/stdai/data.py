"""Section/sample containers, the bundle format, normalization, and phantoms.

Bundle layout::

    manifest.json
    section_<i>/histology.ppm    binary P6, 8-bit RGB
    section_<i>/expression.f32   little-endian float32, [G][H][W]
    section_<i>/mask.u8          one byte per pixel, 0/1
    section_<i>/truth.f32        optional dense ground truth (evaluation only)
    section_<i>/truth.json       optional true transform (evaluation only)
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BundleError, ConfigError

FORMAT_TAG = "stdai-bundle"
FORMAT_VERSION = 1


@dataclass
class Section:
    histology: np.ndarray  # uint8 [H, W, 3]
    expression: np.ndarray  # float32 [G, H, W]; zeros where unobserved
    mask: np.ndarray  # uint8 [H, W]
    role: str  # "central" | "adjacent"
    index: int
    transform: Optional[np.ndarray] = None  # estimated 2x3 central->this frame
    truth: Optional[np.ndarray] = field(default=None, repr=False)
    true_transform: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        H, W = self.histology.shape[:2]
        if self.histology.shape != (H, W, 3):
            raise ValueError(f"histology must be [H, W, 3], got {self.histology.shape}")
        if self.expression.ndim != 3 or self.expression.shape[1:] != (H, W):
            raise ValueError(f"expression {self.expression.shape} does not match histology {(H, W)}")
        if self.mask.shape != (H, W):
            raise ValueError(f"mask {self.mask.shape} does not match histology {(H, W)}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be binary")
        if self.role not in ("central", "adjacent"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "central" and not self.mask.all():
            raise ValueError("central section must be fully observed")

    @property
    def shape(self):
        return self.histology.shape[:2]

    def histology_float(self):
        """Histology as float32 [3, H, W] in [0, 1]."""
        return (self.histology.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1).copy()


@dataclass
class Sample:
    sample_id: str
    sections: list
    central: int
    genes: list
    stats: Optional[dict] = None  # {"min": [...], "max": [...]} per gene

    def __post_init__(self):
        roles = [s.role for s in self.sections]
        if roles.count("central") != 1:
            raise ValueError(f"exactly one central section required, got roles {roles}")
        if self.sections[self.central].role != "central":
            raise ValueError(f"section {self.central} is not the central section")
        shape = self.sections[0].shape
        for s in self.sections:
            if s.shape != shape:
                raise ValueError(f"section {s.index} has shape {s.shape}, expected {shape}")
            if s.expression.shape[0] != len(self.genes):
                raise ValueError(f"section {s.index} has {s.expression.shape[0]} genes, panel has {len(self.genes)}")

    @property
    def shape(self):
        return self.sections[0].shape

    @property
    def central_section(self):
        return self.sections[self.central]

    def adjacent_sections(self):
        return [s for s in self.sections if s.role == "adjacent"]


# -- bundle I/O --------------------------------------------------------------

def _write_ppm(path, rgb):
    H, W, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def _read_ppm(path, H, W):
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise BundleError(path, "bad magic, expected binary PPM 'P6'")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise BundleError(path, f"only 8-bit PPM supported, maxval {maxval}")
    if (h, w) != (H, W):
        raise BundleError(path, f"image is {h}x{w}, manifest declares {H}x{W}")
    payload = raw[pos:]
    if len(payload) != H * W * 3:
        raise BundleError(path, f"truncated: {len(payload)} bytes, expected {H * W * 3}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(H, W, 3).copy()


def _read_raw(path, dtype, shape):
    path = Path(path)
    if not path.exists():
        raise BundleError(path, "missing")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise BundleError(path, f"size {len(raw)} bytes, expected {expected} for shape {tuple(shape)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def _transform_list(t):
    return None if t is None else [float(v) for v in np.asarray(t, dtype=np.float64).ravel()]


def write_bundle(sample, directory):
    """Write ``sample`` under ``directory``; returns the manifest dict."""
    if not sample.genes:
        raise BundleError(directory, "empty gene panel")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    H, W = sample.shape
    entries = []
    for pos, sec in enumerate(sample.sections):
        sub = directory / f"section_{pos}"
        sub.mkdir(exist_ok=True)
        _write_ppm(sub / "histology.ppm", sec.histology)
        (sub / "expression.f32").write_bytes(np.ascontiguousarray(sec.expression, dtype="<f4").tobytes())
        (sub / "mask.u8").write_bytes(np.ascontiguousarray(sec.mask, dtype=np.uint8).tobytes())
        if sec.truth is not None:
            (sub / "truth.f32").write_bytes(np.ascontiguousarray(sec.truth, dtype="<f4").tobytes())
        if sec.true_transform is not None:
            (sub / "truth.json").write_text(json.dumps({"transform": _transform_list(sec.true_transform)}))
        entries.append({
            "dir": sub.name,
            "index": int(sec.index),
            "role": sec.role,
            "transform": _transform_list(sec.transform),
            "has_truth": sec.truth is not None,
        })
    manifest = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "sample_id": sample.sample_id,
        "k": int(sample.central),
        "H": int(H),
        "W": int(W),
        "genes": list(sample.genes),
        "stats": sample.stats,
        "sections": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def read_manifest(directory):
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise BundleError(path, "missing manifest")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BundleError(path, f"invalid JSON: {exc}") from None
    if manifest.get("format") != FORMAT_TAG:
        raise BundleError(path, f"bad magic, format tag {manifest.get('format')!r}")
    return manifest


def read_bundle(directory, with_truth=False):
    """Load a bundle. Ground-truth sidecars are only read when asked for."""
    directory = Path(directory)
    m = read_manifest(directory)
    H, W, G = m["H"], m["W"], len(m["genes"])
    if G == 0:
        raise BundleError(directory / "manifest.json", "empty gene panel")
    sections = []
    for e in m["sections"]:
        sub = directory / e["dir"]
        truth = true_t = None
        if with_truth and e.get("has_truth"):
            truth = _read_raw(sub / "truth.f32", "<f4", (G, H, W)).astype(np.float32)
            tj = sub / "truth.json"
            if tj.exists():
                true_t = np.array(json.loads(tj.read_text())["transform"], dtype=np.float64).reshape(2, 3)
        t = e.get("transform")
        sections.append(Section(
            histology=_read_ppm(sub / "histology.ppm", H, W),
            expression=_read_raw(sub / "expression.f32", "<f4", (G, H, W)).astype(np.float32),
            mask=_read_raw(sub / "mask.u8", np.uint8, (H, W)),
            role=e["role"],
            index=e["index"],
            transform=None if t is None else np.array(t, dtype=np.float64).reshape(2, 3),
            truth=truth,
            true_transform=true_t,
        ))
    return Sample(m["sample_id"], sections, m["k"], list(m["genes"]), m.get("stats"))


# -- normalization -----------------------------------------------------------

def normalize_expression(sample):
    """Min-max scale each gene using its range on the central section.

    The same affine map is applied to every section, so adjacent values may
    fall outside [0, 1]. Unobserved pixels stay at zero. Returns a new sample
    whose ``stats`` record the per-gene (min, max).
    """
    if sample.stats is not None:
        raise ValueError(f"sample {sample.sample_id} is already normalized")
    central = sample.central_section.expression.astype(np.float64)
    lo = central.min(axis=(1, 2))
    hi = central.max(axis=(1, 2))
    flat = [g for g, a, b in zip(sample.genes, lo, hi) if not b > a]
    if flat:
        raise ValueError(f"constant gene(s) on the central section: {flat}")
    stats = {"min": lo.tolist(), "max": hi.tolist()}
    return _remap(sample, stats, forward=True)


def denormalize_expression(sample):
    if sample.stats is None:
        raise ValueError("sample is not normalized")
    return _remap(sample, sample.stats, forward=False)


def apply_stats(x, stats, mask=None):
    lo = np.asarray(stats["min"], np.float64)[:, None, None]
    span = np.asarray(stats["max"], np.float64)[:, None, None] - lo
    y = (np.asarray(x, np.float64) - lo) / span
    if mask is not None:
        y = y * mask
    return y.astype(np.float32)


def invert_stats(y, stats, mask=None):
    lo = np.asarray(stats["min"], np.float64)[:, None, None]
    span = np.asarray(stats["max"], np.float64)[:, None, None] - lo
    x = np.asarray(y, np.float64) * span + lo
    if mask is not None:
        x = x * mask
    return x.astype(np.float32)


def _remap(sample, stats, forward):
    fn = apply_stats if forward else invert_stats
    sections = []
    for s in sample.sections:
        sections.append(dataclasses.replace(
            s,
            expression=fn(s.expression, stats, s.mask),
            truth=None if s.truth is None else fn(s.truth, stats),
        ))
    return Sample(sample.sample_id, sections, sample.central, list(sample.genes),
                  stats if forward else None)


# -- transforms --------------------------------------------------------------

def similarity_matrix(rotation_deg=0.0, translation=(0.0, 0.0), scale=1.0, center=(0.0, 0.0)):
    """2x3 matrix on (x=col, y=row) rotating/scaling about ``center`` then translating."""
    th = math.radians(rotation_deg)
    c, s = scale * math.cos(th), scale * math.sin(th)
    A = np.array([[c, -s], [s, c]])
    ctr = np.asarray(center, np.float64)
    t = ctr - A @ ctr + np.asarray(translation, np.float64)
    return np.hstack([A, t[:, None]])


def invert_transform(M):
    M = np.asarray(M, np.float64)
    A = M[:, :2]
    Ai = np.linalg.inv(A)
    return np.hstack([Ai, (-Ai @ M[:, 2])[:, None]])


def apply_transform(M, pts):
    """Map (N, 2) points (x, y) through a 2x3 matrix."""
    pts = np.asarray(pts, np.float64)
    return pts @ M[:, :2].T + M[:, 2]


# -- synthetic phantom -------------------------------------------------------

@dataclass
class PhantomConfig:
    height: int = 64
    width: int = 64
    n_genes: int = 4
    n_blobs: int = 40
    n_sections: int = 2
    n_classes: int = 3
    blob_sigma: tuple = (1.5, 3.5)
    rotation_deg: float = 6.0
    translation: tuple = (4.0, -3.0)
    scale: float = 1.0
    jitter: float = 0.3
    gene_gain: tuple = (1.3,)
    gene_bias: tuple = (0.05,)
    gene_gamma: tuple = (1.3,)
    stain_shift: float = 0.1
    noise: float = 0.02
    grid_spacing: int = 2
    seed: int = 0

    def validate(self):
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"phantom must be at least 16x16, got {self.height}x{self.width}")
        if self.n_genes < 1 or self.n_blobs < 1 or self.n_sections < 2 or self.n_classes < 1:
            raise ConfigError("n_genes, n_blobs, n_classes must be >= 1 and n_sections >= 2")
        if abs(self.rotation_deg) > 45 or not 0.5 <= self.scale <= 2:
            raise ConfigError("rotation must be within 45 degrees and scale within [0.5, 2]")
        if self.noise < 0 or self.jitter < 0 or self.stain_shift < 0:
            raise ConfigError("noise, jitter and stain_shift must be nonnegative")
        for name in ("gene_gain", "gene_gamma"):
            if any(v <= 0 for v in getattr(self, name)):
                raise ConfigError(f"{name} entries must be positive (monotone shift)")
        if any(v < 0 for v in self.gene_bias):
            raise ConfigError("gene_bias entries must be nonnegative")

    def per_gene(self, name):
        vals = list(getattr(self, name))
        if len(vals) == 1:
            vals = vals * self.n_genes
        if len(vals) != self.n_genes:
            raise ConfigError(f"{name} has {len(vals)} entries for {self.n_genes} genes")
        return np.asarray(vals, np.float64)


_BACKGROUND = np.array([0.93, 0.80, 0.88])
# optical densities per class: nuclei-like, stroma-like, a third darker type
_CLASS_OD = np.array([
    [0.9, 1.2, 0.4],
    [0.2, 0.6, 0.3],
    [0.5, 0.5, 1.0],
    [1.0, 0.3, 0.8],
])


def _render(cfg, blobs, M_inv, rng_tex, noise_lattice, margin, stain=None):
    """Render histology and dense expression in a frame whose preimage is M_inv."""
    H, W = cfg.height, cfg.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    pts = apply_transform(M_inv, np.stack([xx.ravel(), yy.ravel()], axis=1))
    tx = pts[:, 0].reshape(H, W)
    ty = pts[:, 1].reshape(H, W)

    texture = np.zeros((H, W))
    for fx, fy, ph, amp in rng_tex:
        texture += amp * np.sin(fx * tx + fy * ty + ph)

    od = np.zeros((3, H, W))
    G = cfg.n_genes
    expr = np.zeros((G, H, W))
    for bx, by, sigma, cls, amp, alpha in blobs:
        d2 = (xx - bx) ** 2 + (yy - by) ** 2
        g = np.exp(-d2 / (2 * sigma * sigma))
        od += amp * _CLASS_OD[cls % len(_CLASS_OD)][:, None, None] * g
        expr += alpha[:, None, None] * amp * g[None]

    rgb = _BACKGROUND[:, None, None] * (1 + texture)[None] * np.exp(-od)
    if stain is not None:
        gain, bias = stain
        rgb = rgb * gain[:, None, None] + bias[:, None, None]

    # tissue-attached fine-scale heterogeneity: nearest lattice sample of the preimage
    r = np.clip(np.rint(ty).astype(int) + margin, 0, noise_lattice.shape[1] - 1)
    c = np.clip(np.rint(tx).astype(int) + margin, 0, noise_lattice.shape[2] - 1)
    het = noise_lattice[:, r, c]
    rgb = rgb + 0.02 * het[0][None]
    expr = np.maximum(expr + cfg.noise * het[1:], 0.0)
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0), expr


def synth_phantom(config):
    """Generate a phantom sample with hidden dense truth and true transforms.

    Adjacent sections view the same tissue through a similarity transform
    (scaled by distance from the central section), with jittered blobs, a
    histology stain shift and a per-gene monotone expression shift
    ``gain * y**gamma + bias``. Adjacent sections are grid-sampled with the
    configured spacing; their dense maps live in ``truth``.
    """
    from .sampling import apply_mask, make_grid_mask

    cfg = config
    cfg.validate()
    H, W = cfg.height, cfg.width
    rng = np.random.default_rng(cfg.seed)
    margin = int(0.5 * max(H, W))

    n_cls = cfg.n_classes
    # per (gene, class) expression coefficients; each gene marks a subset of classes
    alpha = rng.uniform(0.0, 1.0, size=(cfg.n_genes, n_cls))
    alpha[np.arange(cfg.n_genes), np.arange(cfg.n_genes) % n_cls] += 1.0
    blobs = []
    for _ in range(cfg.n_blobs):
        bx = rng.uniform(-0.25 * W, 1.25 * W)
        by = rng.uniform(-0.25 * H, 1.25 * H)
        sigma = rng.uniform(*cfg.blob_sigma)
        cls = int(rng.integers(n_cls))
        amp = rng.uniform(0.6, 1.0)
        blobs.append((bx, by, sigma, cls, amp))
    tex = [(rng.uniform(0.05, 0.6), rng.uniform(0.05, 0.6), rng.uniform(0, 2 * np.pi),
            rng.uniform(0.01, 0.04)) for _ in range(6)]
    lattice = rng.normal(size=(1 + cfg.n_genes, H + 2 * margin, W + 2 * margin))

    k = cfg.n_sections // 2
    gains = cfg.per_gene("gene_gain")
    biases = cfg.per_gene("gene_bias")
    gammas = cfg.per_gene("gene_gamma")
    sections = []
    for j in range(cfg.n_sections):
        d = abs(j - k)
        if j == k:
            M = np.hstack([np.eye(2), np.zeros((2, 1))])
            placed = [(bx, by, s, c, a, alpha[:, c]) for bx, by, s, c, a in blobs]
            stain = None
        else:
            M = similarity_matrix(cfg.rotation_deg * d, np.asarray(cfg.translation) * d,
                                  cfg.scale ** d, center=((W - 1) / 2, (H - 1) / 2))
            jit = rng.normal(scale=cfg.jitter, size=(len(blobs), 2)) if cfg.jitter > 0 else np.zeros((len(blobs), 2))
            centers = apply_transform(M, np.array([(b[0], b[1]) for b in blobs])) + jit
            sc = math.sqrt(abs(np.linalg.det(M[:, :2])))
            placed = [(cx, cy, b[2] * sc, b[3], b[4], alpha[:, b[3]])
                      for (cx, cy), b in zip(centers, blobs)]
            s = cfg.stain_shift * d
            stain = (1 + s * rng.uniform(-1, 1, size=3), s * rng.uniform(-0.5, 0.5, size=3)) if s > 0 else None
        _check_in_frame(M, H, W)
        hist, expr = _render(cfg, placed, _inverse_or_identity(M), tex, lattice, margin, stain)
        if j != k:
            shift = (gains[:, None, None] ** d) * expr ** (gammas[:, None, None] ** d) + biases[:, None, None] * d
            expr = shift
        expr = expr.astype(np.float32)
        if j == k:
            sections.append(Section(hist, expr, np.ones((H, W), np.uint8), "central", j,
                                    true_transform=M))
        else:
            grid = make_grid_mask(H, W, cfg.grid_spacing, (0, 0))
            sparse, mask = apply_mask(expr, grid)
            sections.append(Section(hist, sparse, mask, "adjacent", j, truth=expr, true_transform=M))
    sample_id = f"phantom-{H}x{W}-g{cfg.n_genes}-s{cfg.seed}"
    return Sample(sample_id, sections, k, [f"gene{g}" for g in range(cfg.n_genes)])


def _inverse_or_identity(M):
    if np.array_equal(M, np.hstack([np.eye(2), np.zeros((2, 1))])):
        return M
    return invert_transform(M)


def _check_in_frame(M, H, W):
    """Reject transforms that push more than half the frame outside the source."""
    yy, xx = np.mgrid[0:H, 0:W]
    pre = apply_transform(_inverse_or_identity(M), np.stack([xx.ravel(), yy.ravel()], 1))
    inside = (pre[:, 0] >= 0) & (pre[:, 0] <= W - 1) & (pre[:, 1] >= 0) & (pre[:, 1] <= H - 1)
    if inside.mean() < 0.5:
        raise ConfigError(f"transform moves {100 * (1 - inside.mean()):.0f}% of the frame out of view")

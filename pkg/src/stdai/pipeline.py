"""Training and inference stages: pseudo-map pretraining, dual-branch
refinement, data consistency and volume assembly."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .alignment import PlanarTransform, register, warp
from .backbone import (BackboneConfig, backbone_forward, extract_histology_features, head_forward,
                       init_params, register_params, stack_inputs)
from .csg import confidence_map
from .errors import TrainingHalted
from .metrics import evaluate
from .pdl import insert_pdls, trainable_subset
from .sampling import SamplingGrid

log = logging.getLogger(__name__)

TOGGLES = ("csa", "fmdr", "pdl", "csg", "dco")


@dataclass
class TrainConfig:
    epochs_pretrain: int = 500
    epochs_fmdr: int = 1000
    lr0: float = 1e-3
    schedule: str = "cosine"
    seed: int = 0
    literal_eq5: bool = False  # pseudo labels as adjacent targets everywhere
    per_gene_confidence: bool = False
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    extractor: str = "handcrafted"

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.epochs_pretrain < 0 or self.epochs_fmdr < 0:
            raise ValueError("epoch counts must be nonnegative")
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr(self, t, total):
        if self.schedule == "constant":
            return self.lr0
        return ag.cosine_lr(t, ag.LrSchedule(self.lr0, total))


@dataclass
class PseudoLabels:
    data: np.ndarray  # float32 [G, H, W]
    generator: str  # digest of the producing parameters

    def __post_init__(self):
        if not np.all(np.isfinite(self.data)):
            raise ValueError("pseudo labels contain non-finite values")


@dataclass
class VolumePrediction:
    volume: np.ndarray  # float32 [n, G, H, W]
    provenance: list  # per section: "measured" or "predicted+dco" / "predicted"
    genes: list


@dataclass
class LogRow:
    epoch: int
    L_central: float
    L_adj: float
    lr: float


def params_digest(params):
    h = hashlib.sha256()
    for n, t in params.tensors.items():
        h.update(n.encode())
        h.update(np.ascontiguousarray(t, "<f4").tobytes())
    return h.hexdigest()[:16]


def write_training_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "L_central", "L_adj", "lr"])
        for r in rows:
            w.writerow([r.epoch, repr(float(r.L_central)), repr(float(r.L_adj)), repr(float(r.lr))])


# -- losses ------------------------------------------------------------------

def _sq_err(out, target, tape):
    if tape is None:
        d = np.asarray(out, np.float64) - np.asarray(target, np.float64)
        return d * d
    d = tape.sub(out, tape.constant(target))
    return tape.mul(d, d)


def loss_central(out, target, validity, tape=None):
    """Squared error summed over genes, averaged over valid pixels.

    With a tape, ``out`` is a tape tensor and a scalar tape tensor is returned.
    """
    validity = np.asarray(validity, np.float32)
    shape = out.shape if tape is not None else np.shape(out)
    if np.shape(target) != tuple(shape) or validity.shape != tuple(shape[1:]):
        raise ValueError(f"shapes differ: out {tuple(shape)}, target {np.shape(target)}, "
                         f"validity {validity.shape}")
    n = float(validity.sum())
    if n == 0:
        raise ValueError("no valid pixels for the central loss")
    sq = _sq_err(out, target, tape)
    if tape is None:
        return float((sq * validity).sum() / n)
    return tape.scale(tape.sum(tape.mul(sq, tape.constant(validity[None]))), 1.0 / n)


def loss_adjacent(out, target, weights, tape=None):
    """Confidence-weighted squared error averaged over all pixels.

    ``weights`` is [H, W] (shared by genes) or [G, H, W].
    """
    weights = np.asarray(weights, np.float32)
    if np.any(weights < 0):
        raise ValueError("confidence weights must be nonnegative")
    shape = tuple(out.shape if tape is not None else np.shape(out))
    if weights.ndim == 2:
        weights = weights[None]
    if weights.shape[1:] != shape[1:] or weights.shape[0] not in (1, shape[0]):
        raise ValueError(f"weights {weights.shape} do not fit output {shape}")
    n = shape[1] * shape[2]
    sq = _sq_err(out, target, tape)
    if tape is None:
        return float((sq * weights).sum() / n)
    return tape.scale(tape.sum(tape.mul(sq, tape.constant(weights))), 1.0 / n)


# -- inputs ------------------------------------------------------------------

@dataclass
class BranchInput:
    """Network input for one section in a given frame."""

    histology: np.ndarray  # float32 [3, H, W]
    sparse: np.ndarray  # float32 [G, H, W]
    mask: np.ndarray  # float32 [H, W]
    features: np.ndarray

    def stacked(self):
        return stack_inputs(self.histology, self.sparse, self.mask)


def central_input(aligned, grid, config):
    """Warped central section sampled on the adjacent grid, restricted to valid pixels."""
    m = (grid.mask.astype(bool) & aligned.validity.astype(bool)).astype(np.float32)
    feats = extract_histology_features(aligned.histology, config.backbone, config.extractor).data
    return BranchInput(aligned.histology, aligned.expression * m[None], m, feats)


def adjacent_input(section, config):
    h = section.histology_float()
    feats = extract_histology_features(h, config.backbone, config.extractor).data
    m = section.mask.astype(np.float32)
    return BranchInput(h, section.expression * m[None], m, feats)


def forward(params, inp, tape=None):
    own = tape is None
    tape = tape or ag.Tape()
    P = register_params(tape, params)
    h = backbone_forward(tape, P, params, tape.constant(inp.stacked()), tape.constant(inp.features))
    out = head_forward(tape, P, h)
    return out.data if own else out


# -- stages ------------------------------------------------------------------

def align_central(sample, adjacent, enabled=True, seed=0, family="similarity"):
    """Register and warp the central section into ``adjacent``'s frame.

    When disabled the identity transform is used; a transform already stored
    on the adjacent section is reused.
    """
    central = sample.central_section
    if enabled and adjacent.transform is not None:
        transform = PlanarTransform(np.asarray(adjacent.transform, np.float64), family)
    elif enabled:
        res = register(central.histology, adjacent.histology, family=family, seed=seed)
        transform = res.transform
    else:
        transform = PlanarTransform.identity(family)
    return warp(central.histology, central.expression, transform), transform


def pretrain_pseudo_network(aligned, grid, config, log_rows=None):
    """Fit theta_0 on the warped central section with its grid-sampled input.

    On a non-finite loss raises ``TrainingHalted`` whose ``params`` attribute
    holds the last finite parameters.
    """
    params = init_params(config.backbone, config.seed)
    inp = central_input(aligned, grid, config)
    target = aligned.expression
    valid = aligned.validity
    state = ag.AdamState()
    T = config.epochs_pretrain
    last_good = params.copy()
    for t in range(T):
        tape = ag.Tape()
        out = forward(params, inp, tape)
        loss = loss_central(out, target, valid, tape)
        lval = float(loss.data)
        if not np.isfinite(lval):
            err = TrainingHalted(t, f"pretraining loss became {lval}")
            err.params = last_good
            raise err
        last_good = params.copy()
        lr = config.lr(t, T)
        grads = ag.backward(tape, loss)
        ag.adam_step(params.tensors, grads, state, lr)
        if log_rows is not None:
            log_rows.append(LogRow(t, lval, 0.0, lr))
    log.info("pretrained %d epochs, final L_central %.6g", T, lval if T else float("nan"))
    return params


def generate_pseudo_labels(theta0, adjacent, config):
    return PseudoLabels(forward(theta0, adjacent_input(adjacent, config)), params_digest(theta0))


def adjacent_targets(pseudo, adjacent, literal_eq5=False):
    """Measured values at observed pixels, pseudo labels elsewhere."""
    p = pseudo.data if isinstance(pseudo, PseudoLabels) else np.asarray(pseudo)
    if literal_eq5:
        return p.astype(np.float32)
    return dco(p, adjacent.expression, adjacent.mask)


@dataclass
class FmdrResult:
    theta1: object
    theta2: object
    log: list


def _frozen_snapshot(params):
    return {n: hashlib.sha256(params.tensors[n].tobytes()).digest() for n in params.names("backbone")}


def fmdr_refine(theta0, aligned, adjacent, pseudo, weights, grid, config, pdl=True):
    """Dual-branch refinement of the terminal layers (and PDLs) with a frozen backbone.

    Each step sums the central loss of the theta_1 branch and the weighted
    adjacent loss of the theta_2 branch. The branches share no trainable
    tensor, so each has its own Adam state.
    """
    before = _frozen_snapshot(theta0)
    theta1 = trainable_subset(theta0.copy(share=("backbone",)), "fmdr_central")
    theta2 = theta0.copy(share=("backbone",))
    if pdl:
        theta2 = insert_pdls(theta2)
    trainable_subset(theta2, "fmdr_adjacent")

    c_inp = central_input(aligned, grid, config)
    a_inp = adjacent_input(adjacent, config)
    # the central branch backbone is frozen: its features are fixed
    tape0 = ag.Tape()
    h_central = backbone_forward(tape0, register_params(tape0, theta1), theta1,
                                 tape0.constant(c_inp.stacked()), tape0.constant(c_inp.features)).data
    del tape0
    target_a = adjacent_targets(pseudo, adjacent, config.literal_eq5)
    s1, s2 = ag.AdamState(), ag.AdamState()
    T = config.epochs_fmdr
    rows = []
    for t in range(T):
        lr = config.lr(t, T)
        tc = ag.Tape()
        Pc = register_params(tc, theta1)
        lc = loss_central(head_forward(tc, Pc, tc.constant(h_central)), aligned.expression,
                          aligned.validity, tc)
        ta = ag.Tape()
        la = loss_adjacent(forward(theta2, a_inp, ta), target_a, weights, ta)
        total = float(lc.data) + float(la.data)
        if not np.isfinite(total):
            raise TrainingHalted(t, f"refinement loss became {total}")
        ag.adam_step(theta1.tensors, ag.backward(tc, lc), s1, lr)
        ag.adam_step(theta2.tensors, ag.backward(ta, la), s2, lr)
        rows.append(LogRow(t, float(lc.data), float(la.data), lr))
    if rows:
        log.info("refined %d epochs, final L_central %.6g L_adj %.6g", T, rows[-1].L_central, rows[-1].L_adj)
    assert _frozen_snapshot(theta1) == before, "central branch backbone changed during refinement"
    assert _frozen_snapshot(theta2) == before, "adjacent branch backbone changed during refinement"
    return FmdrResult(theta1, theta2, rows)


def dco(pred, measured, mask):
    """Replace predictions by measurements wherever ``mask`` is set."""
    pred = np.asarray(pred, np.float32)
    measured = np.asarray(measured, np.float32)
    if pred.shape != measured.shape or pred.shape[-2:] != np.shape(mask):
        raise ValueError(f"shapes differ: pred {pred.shape}, measured {measured.shape}, mask {np.shape(mask)}")
    return np.where(np.asarray(mask).astype(bool)[None], measured, pred)


def assemble_volume(sample, finals, dco_applied=True):
    """Stack per-section predictions (dict index -> [G, H, W]) in section order.

    The central slice is always the measured map.
    """
    central = sample.central_section
    missing = [s.index for s in sample.sections if s.role == "adjacent" and s.index not in finals]
    if missing:
        raise ValueError(f"no prediction for section(s) {missing}")
    slices, prov = [], []
    for s in sorted(sample.sections, key=lambda s: s.index):
        if s is central:
            slices.append(central.expression.astype(np.float32))
            prov.append("measured")
        else:
            slices.append(np.asarray(finals[s.index], np.float32))
            prov.append("predicted+dco" if dco_applied else "predicted")
    return VolumePrediction(np.stack(slices), prov, list(sample.genes))


def volume_sample(sample, volume):
    """A sample whose expression maps are the predicted volume, for bundle output."""
    sections = []
    for s, v in zip(sorted(sample.sections, key=lambda s: s.index), volume.volume):
        sections.append(dataclasses.replace(s, expression=v, mask=np.ones_like(s.mask),
                                            role=s.role, truth=None))
    return type(sample)(sample.sample_id + "-pred", sections, sample.central, list(sample.genes),
                        sample.stats)


# -- end to end ----------------------------------------------------------------

@dataclass
class SectionResult:
    index: int
    transform: np.ndarray
    final: np.ndarray
    pred: np.ndarray
    pseudo: np.ndarray
    weights: np.ndarray
    theta0: object
    theta1: Optional[object]
    theta2: Optional[object]
    pretrain_log: list
    fmdr_log: list
    report: Optional[object] = None


def normalize_toggles(toggles):
    t = {k: False for k in TOGGLES}
    if toggles:
        for k, v in dict(toggles).items():
            if k not in t:
                raise ValueError(f"unknown toggle {k!r}; expected {TOGGLES}")
            t[k] = bool(v)
    return t


def run_section(sample, adjacent, config, toggles, cache=None):
    """All stages for one adjacent section. ``cache`` may hold pretrained
    networks keyed by (section, csa) to share them across toggle settings."""
    tg = normalize_toggles(toggles)
    H, W = sample.shape
    spacing = _grid_spacing(adjacent.mask)
    grid = SamplingGrid(H, W, spacing, (0, 0))
    key = (adjacent.index, tg["csa"])
    if cache is not None and key in cache:
        aligned, transform, theta0, pre_log = cache[key]
    else:
        aligned, transform = align_central(sample, adjacent, tg["csa"], config.seed)
        pre_log = []
        theta0 = pretrain_pseudo_network(aligned, grid, config, pre_log)
        if cache is not None:
            cache[key] = (aligned, transform, theta0, pre_log)
    pseudo = generate_pseudo_labels(theta0, adjacent, config)
    if tg["csg"] and tg["fmdr"]:
        cm = confidence_map(pseudo.data, adjacent.expression, grid, adjacent.mask,
                            per_gene=config.per_gene_confidence)
        weights = cm.weights
    else:
        weights = np.ones((H, W), np.float64)
    theta1 = theta2 = None
    fmdr_log = []
    if tg["fmdr"]:
        res = fmdr_refine(theta0, aligned, adjacent, pseudo, weights, grid, config, pdl=tg["pdl"])
        theta1, theta2, fmdr_log = res.theta1, res.theta2, res.log
        pred = forward(theta2, adjacent_input(adjacent, config))
    else:
        pred = pseudo.data
    final = dco(pred, adjacent.expression, adjacent.mask) if tg["dco"] else pred.astype(np.float32)
    return SectionResult(adjacent.index, transform.matrix, final, pred, pseudo.data, weights,
                         theta0, theta1, theta2, pre_log, fmdr_log)


def _grid_spacing(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size < 2:
        return max(1, mask.shape[0])
    return int(rows[1] - rows[0])


def run_sample(sample, config, toggles, cache=None, population="unobserved"):
    """Run every adjacent section; attach metrics when truth is available."""
    tg = normalize_toggles(toggles)
    results = []
    for adj in sample.adjacent_sections():
        r = run_section(sample, adj, config, tg, cache)
        if adj.truth is not None:
            r.report = evaluate(r.final, adj.truth, adj.mask, sample.genes, population)
        results.append(r)
    volume = assemble_volume(sample, {r.index: r.final for r in results}, tg["dco"])
    return results, volume

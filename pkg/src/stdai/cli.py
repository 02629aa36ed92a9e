"""Command-line entry point: ``stdai <subcommand>``.

Every output directory is ``<out>/<sample id>-<config hash>-s<seed>[/<stage>]``.
A stage writes into ``<dir>.partial`` and renames it on success, so a failed
stage leaves its partial artifacts behind under that suffix. Existing outputs
are never replaced.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .alignment import register
from .backbone import read_checkpoint, write_checkpoint
from .csg import confidence_map, write_pgm
from .data import PhantomConfig, normalize_expression, read_bundle, synth_phantom, write_bundle
from .errors import BundleError, ConfigError, StdaiError
from .metrics import evaluate, expression_density, write_density_csv, write_error_map, write_metrics_csv
from .sampling import SamplingGrid, apply_mask

log = logging.getLogger("stdai")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

# rows of the ablation table, in order
ABLATION_ROWS = [
    ("baseline", {}),
    ("fmdr", {"fmdr": True}),
    ("csa", {"csa": True}),
    ("csa+fmdr", {"csa": True, "fmdr": True}),
    ("csa+fmdr+pdl", {"csa": True, "fmdr": True, "pdl": True}),
    ("csa+fmdr+pdl+csg", {"csa": True, "fmdr": True, "pdl": True, "csg": True}),
    ("full", {"csa": True, "fmdr": True, "pdl": True, "csg": True, "dco": True}),
]


class StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# -- configuration -------------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    train: pl.TrainConfig
    toggles: dict
    phantom: PhantomConfig
    grid_spacing: int = 2
    population: str = "unobserved"
    seed: int = 0

    def as_dict(self):
        d = dataclasses.asdict(self)
        d["phantom"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d["phantom"].items()}
        return d

    def digest(self):
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def load_config(path=None, seed=None, toggles=None, literal_eq5=False):
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    unknown = set(raw) - {"train", "toggles", "phantom", "grid_spacing", "population", "seed"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    seed = int(raw.get("seed", 0) if seed is None else seed)
    try:
        train = dict(raw.get("train", {}))
        train["seed"] = seed
        if literal_eq5:
            train["literal_eq5"] = True
        train = pl.TrainConfig(**train)
        ph = {k: (tuple(v) if isinstance(v, list) else v) for k, v in raw.get("phantom", {}).items()}
        ph.setdefault("seed", seed)
        phantom = PhantomConfig(**ph)
        phantom.validate()
        tg = {k: True for k in pl.TOGGLES}
        tg.update(raw.get("toggles", {}))
        if toggles is not None:
            names = [t for t in toggles.split(",") if t]
            tg = pl.normalize_toggles({t: True for t in names})
        tg = pl.normalize_toggles(tg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    population = raw.get("population", "unobserved")
    if population not in ("unobserved", "all"):
        raise ConfigError(f"population must be 'unobserved' or 'all', got {population!r}")
    spacing = int(raw.get("grid_spacing", phantom.grid_spacing))
    if spacing < 1:
        raise ConfigError("grid_spacing must be positive")
    return RunConfig(train, tg, phantom, spacing, population, seed)


def threads():
    try:
        return max(1, int(os.environ.get("STDAI_THREADS", "1")))
    except ValueError:
        raise ConfigError("STDAI_THREADS must be an integer") from None


# -- output handling -----------------------------------------------------------

class Output:
    """Write into ``final.partial``; rename to ``final`` on commit."""

    def __init__(self, final):
        self.final = Path(final)
        self.partial = self.final.with_name(self.final.name + ".partial")
        if self.final.exists():
            raise ConfigError(f"refusing to overwrite existing output {self.final}")
        if self.partial.exists():
            log.warning("removing stale partial output %s", self.partial)
            shutil.rmtree(self.partial)
        self.partial.mkdir(parents=True)

    def path(self, name):
        return self.partial / name

    def commit(self):
        self.partial.rename(self.final)
        return self.final


def out_dir(args, sample_id, cfg, stage=None):
    base = Path(args.out or "runs") / f"{sample_id}-{cfg.digest()}-s{cfg.seed}"
    return base / stage if stage else base


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (ConfigError, BundleError):
        raise
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        raise StageError(name, exc) from exc


def _load_sample(bundle, with_truth=True):
    if not bundle:
        raise ConfigError("--bundle is required")
    smp = read_bundle(bundle, with_truth=with_truth)
    return smp if smp.stats is not None else normalize_expression(smp)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _ckpt_extra(cfg, stage, section):
    return {"stage": stage, "config_hash": cfg.digest(), "seed": cfg.seed, "section": section}


# -- subcommands -------------------------------------------------------------------

def cmd_synth(args, cfg):
    smp = _stage("synth", synth_phantom, cfg.phantom)
    out = Output(Path(args.out or "runs") / f"{smp.sample_id}-{cfg.digest()}")
    write_bundle(smp, out.path("bundle"))
    _write_json(out.path("config.json"), cfg.as_dict())
    return out.commit()


def _resample(smp, spacing):
    """Grid-sample every adjacent section from its dense truth when present,
    otherwise intersect the grid with what was already measured."""
    grid = SamplingGrid(*smp.shape, spacing, (0, 0))
    sections = []
    for s in smp.sections:
        if s.role == "adjacent":
            if s.truth is not None:
                sparse, mask = apply_mask(s.truth, grid)
            else:
                mask = grid.mask & s.mask
                sparse = np.where(mask[None].astype(bool), s.expression, 0).astype(np.float32)
            s = dataclasses.replace(s, expression=sparse, mask=mask)
        sections.append(s)
    return type(smp)(smp.sample_id, sections, smp.central, smp.genes, smp.stats)


def cmd_sample(args, cfg):
    smp = read_bundle(args.bundle, with_truth=True)
    res = _stage("sample", _resample, smp, cfg.grid_spacing)
    out = Output(out_dir(args, smp.sample_id, cfg, "sample"))
    write_bundle(res, out.path("bundle"))
    return out.commit()


def cmd_align(args, cfg):
    smp = read_bundle(args.bundle, with_truth=True)
    out = Output(out_dir(args, smp.sample_id, cfg, "align"))
    report = {}
    sections = []
    for s in smp.sections:
        if s.role == "adjacent":
            r = _stage("align", register, smp.central_section.histology, s.histology, seed=cfg.seed)
            report[s.index] = {"transform": r.transform.as_list(), "inlier_ratio": r.inlier_ratio,
                               "low_inlier_ratio": bool(r.low_inlier_ratio), "iterations": r.iterations}
            s = dataclasses.replace(s, transform=r.transform.matrix)
        sections.append(s)
    write_bundle(type(smp)(smp.sample_id, sections, smp.central, smp.genes, smp.stats), out.path("bundle"))
    _write_json(out.path("align.json"), report)
    return out.commit()


def _grid(smp, adj):
    return SamplingGrid(*smp.shape, pl._grid_spacing(adj.mask), (0, 0))


def _align(smp, adj, cfg):
    return _stage("align", pl.align_central, smp, adj, cfg.toggles["csa"], cfg.seed)[0]


def _pretrain_section(smp, adj, cfg, out, aligned):
    grid = _grid(smp, adj)
    rows = []
    try:
        theta0 = pl.pretrain_pseudo_network(aligned, grid, cfg.train, rows)
    except Exception as exc:
        last = getattr(exc, "params", None)
        if last is not None:
            write_checkpoint(out.path(f"section_{adj.index}.theta0.last_finite.ckpt"), last,
                             _ckpt_extra(cfg, "pretrain", adj.index))
        raise
    finally:
        pl.write_training_log(out.path(f"section_{adj.index}.pretrain_log.csv"), rows)
    write_checkpoint(out.path(f"section_{adj.index}.theta0.ckpt"), theta0,
                     _ckpt_extra(cfg, "pretrain", adj.index))
    return theta0


def cmd_pretrain(args, cfg):
    smp = _load_sample(args.bundle)
    out = Output(out_dir(args, smp.sample_id, cfg, "pretrain"))
    for adj in smp.adjacent_sections():
        _stage("pretrain", _pretrain_section, smp, adj, cfg, out, _align(smp, adj, cfg))
    return out.commit()


def _require(path):
    if not Path(path).exists():
        raise ConfigError(f"missing input {path}")
    return path


def _refine_section(smp, adj, cfg, theta0, out, aligned):
    H, W = smp.shape
    grid = _grid(smp, adj)
    pseudo = pl.generate_pseudo_labels(theta0, adj, cfg.train)
    if cfg.toggles["csg"]:
        weights = confidence_map(pseudo.data, adj.expression, grid, adj.mask,
                                 per_gene=cfg.train.per_gene_confidence).weights
    else:
        weights = np.ones((H, W))
    if weights.ndim == 2:
        write_pgm(out.path(f"section_{adj.index}.confidence.pgm"), weights)
    res = pl.fmdr_refine(theta0, aligned, adj, pseudo, weights, grid, cfg.train, pdl=cfg.toggles["pdl"])
    pl.write_training_log(out.path(f"section_{adj.index}.fmdr_log.csv"), res.log)
    write_checkpoint(out.path(f"section_{adj.index}.theta1.ckpt"), res.theta1, _ckpt_extra(cfg, "fmdr", adj.index))
    write_checkpoint(out.path(f"section_{adj.index}.theta2.ckpt"), res.theta2, _ckpt_extra(cfg, "fmdr", adj.index))


def cmd_refine(args, cfg):
    smp = _load_sample(args.bundle)
    src = Path(args.source or out_dir(args, smp.sample_id, cfg, "pretrain"))
    out = Output(out_dir(args, smp.sample_id, cfg, "refine"))
    for adj in smp.adjacent_sections():
        theta0, _ = read_checkpoint(_require(src / f"section_{adj.index}.theta0.ckpt"))
        _stage("refine", _refine_section, smp, adj, cfg, theta0, out, _align(smp, adj, cfg))
    return out.commit()


def _infer(smp, cfg, model_dir):
    finals = {}
    for adj in smp.adjacent_sections():
        name = "theta2" if cfg.toggles["fmdr"] else "theta0"
        params, _ = read_checkpoint(_require(Path(model_dir) / f"section_{adj.index}.{name}.ckpt"))
        pred = pl.forward(params, pl.adjacent_input(adj, cfg.train))
        finals[adj.index] = pl.dco(pred, adj.expression, adj.mask) if cfg.toggles["dco"] else pred
    return pl.assemble_volume(smp, finals, cfg.toggles["dco"])


def _write_volume(out, smp, vol):
    write_bundle(pl.volume_sample(smp, vol), out.path("volume"))
    _write_json(out.path("provenance.json"), {"provenance": vol.provenance, "genes": vol.genes})


def cmd_infer(args, cfg):
    smp = _load_sample(args.bundle)
    stage = "refine" if cfg.toggles["fmdr"] else "pretrain"
    src = Path(args.source or out_dir(args, smp.sample_id, cfg, stage))
    out = Output(out_dir(args, smp.sample_id, cfg, "infer"))
    vol = _stage("infer", _infer, smp, cfg, src)
    _write_volume(out, smp, vol)
    return out.commit()


def _evaluate(smp, volume, population, out):
    rows = []
    for s, pred in zip(sorted(smp.sections, key=lambda s: s.index), volume):
        if s.role != "adjacent":
            continue
        if s.truth is None:
            raise ConfigError(f"section {s.index} has no ground truth to evaluate against")
        rep = evaluate(pred, s.truth, s.mask, smp.genes, population)
        rows.extend(rep.rows(s.index))
        for g, gene in enumerate(smp.genes):
            write_error_map(out.path(f"error_s{s.index}_{gene}.pgm"), pred[g], s.truth[g])
            c, hist, _ = expression_density(s.truth[g], bins=32)
            write_density_csv(out.path(f"density_truth_s{s.index}_{gene}.csv"), c, hist)
            c, hist, _ = expression_density(pred[g], bins=32)
            write_density_csv(out.path(f"density_pred_s{s.index}_{gene}.csv"), c, hist)
    write_metrics_csv(out.path("metrics.csv"), rows)
    return rows


def cmd_eval(args, cfg):
    smp = _load_sample(args.bundle)
    if not args.pred:
        raise ConfigError("--pred is required")
    pred = read_bundle(Path(args.pred))
    volume = np.stack([s.expression for s in sorted(pred.sections, key=lambda s: s.index)])
    if volume.shape[1:] != (len(smp.genes), *smp.shape):
        raise ConfigError(f"prediction volume {volume.shape} does not match the bundle")
    out = Output(out_dir(args, smp.sample_id, cfg, "eval"))
    _stage("eval", _evaluate, smp, volume, cfg.population, out)
    return out.commit()


def _run_into(out, smp, cfg):
    _write_json(out.path("config.json"), {"config": cfg.as_dict(), "config_hash": cfg.digest()})
    for adj in smp.adjacent_sections():
        aligned = _align(smp, adj, cfg)
        theta0 = _stage("pretrain", _pretrain_section, smp, adj, cfg, out, aligned)
        if cfg.toggles["fmdr"]:
            _stage("refine", _refine_section, smp, adj, cfg, theta0, out, aligned)
    vol = _stage("infer", _infer, smp, cfg, out.partial)
    _write_volume(out, smp, vol)
    if all(s.truth is not None for s in smp.adjacent_sections()):
        _stage("eval", _evaluate, smp, vol.volume, cfg.population, out)


def cmd_run(args, cfg):
    smp = _stage("synth", synth_phantom, cfg.phantom) if not args.bundle else _load_sample(args.bundle)
    smp = smp if smp.stats is not None else normalize_expression(smp)
    out = Output(out_dir(args, smp.sample_id, cfg))
    _run_into(out, smp, cfg)
    return out.commit()


def ablation_table(smp, cfg, workers=1):
    """Metric summaries for each ablation row, in table order.

    Pretrained networks are shared between rows with the same alignment
    setting; rows then run in up to ``workers`` threads.
    """
    cache = {}
    for csa in (False, True):
        pl.run_sample(smp, dataclasses.replace(cfg.train, epochs_fmdr=0), {"csa": csa}, cache)

    def one(row):
        name, tg = row
        results, _ = pl.run_sample(smp, cfg.train, tg, dict(cache), cfg.population)
        reports = [r.report for r in results]
        out = {"config": name}
        out.update({t: int(bool(tg.get(t))) for t in pl.TOGGLES})
        for m in ("psnr", "ssim", "mae", "pcc"):
            vals = [v for rep in reports for v in getattr(rep, m)]
            out[f"{m}_mean"] = float(np.mean(vals))
            out[f"{m}_sd"] = float(np.std(vals))
        return out

    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(one, ABLATION_ROWS))


def cmd_ablate(args, cfg):
    smp = _stage("synth", synth_phantom, cfg.phantom) if not args.bundle else _load_sample(args.bundle)
    smp = smp if smp.stats is not None else normalize_expression(smp)
    if any(s.truth is None for s in smp.adjacent_sections()):
        raise ConfigError("ablation needs ground truth on every adjacent section")
    out = Output(out_dir(args, smp.sample_id, cfg, "ablate"))
    rows = _stage("ablate", ablation_table, smp, cfg, threads())
    with open(out.path("ablation.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return out.commit()


COMMANDS = {
    "synth": cmd_synth, "sample": cmd_sample, "align": cmd_align, "pretrain": cmd_pretrain,
    "refine": cmd_refine, "infer": cmd_infer, "eval": cmd_eval, "run": cmd_run, "ablate": cmd_ablate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="stdai", description="2.5D sampled spatial expression imputation")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--bundle", help="input bundle directory")
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", help="output root (default ./runs)")
        s.add_argument("--toggle", default=None,
                       help="comma list of enabled stages among csa,fmdr,pdl,csg,dco (default all)")
        s.add_argument("--literal-eq5", action="store_true",
                       help="use pseudo labels as adjacent targets at observed pixels too")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("refine", "infer"):
            s.add_argument("--from", dest="source", help="directory holding the input checkpoints")
        if name == "eval":
            s.add_argument("--pred", help="predicted volume bundle")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.toggle, args.literal_eq5)
        path = COMMANDS[args.command](args, cfg)
    except (ConfigError, BundleError) as exc:
        print(f"stdai: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stdai: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except StdaiError as exc:
        print(f"stdai: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

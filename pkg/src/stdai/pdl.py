"""Channel-wise affine domain-alignment layers for the frozen backbone."""

from __future__ import annotations

import numpy as np

STAGES = ("pretrain", "fmdr_central", "fmdr_adjacent")


def pdl_apply(f, a, b):
    """``(1 + a[c]) * f[c] + b[c]`` for a [C, H, W] feature map (numpy)."""
    f = np.asarray(f)
    a = np.asarray(a)
    b = np.asarray(b)
    C = f.shape[0]
    if a.shape != (C,) or b.shape != (C,):
        raise ValueError(f"feature has {C} channels but a is {a.shape} and b is {b.shape}")
    return (1 + a)[:, None, None] * f + b[:, None, None]


def insert_pdls(params, sites=None):
    """Return params with zero-initialized (a, b) pairs after each listed block.

    ``sites`` defaults to every conv block. Backbone tensors are shared with
    the input, not copied.
    """
    channels = params.config.site_channels()
    sites = list(params.config.block_sites() if sites is None else sites)
    if len(set(sites)) != len(sites):
        raise ValueError(f"duplicate PDL site in {sites}")
    for s in sites:
        if s not in channels:
            raise ValueError(f"unknown PDL site {s!r}; valid sites {list(channels)}")
        if s in params.pdl_sites:
            raise ValueError(f"PDL already inserted at {s!r}")
    out = params.copy(share=("backbone", "head", "pdl"))
    for s in sites:
        c = channels[s]
        out.tensors[f"pdl.{s}.a"] = np.zeros(c, np.float32)
        out.tensors[f"pdl.{s}.b"] = np.zeros(c, np.float32)
        out.trainable[f"pdl.{s}.a"] = True
        out.trainable[f"pdl.{s}.b"] = True
        out.pdl_sites.append(s)
    return out


def trainable_subset(params, stage):
    """Set freeze flags in place for a training stage and return ``params``.

    pretrain: everything; fmdr_central: terminal layer only; fmdr_adjacent:
    terminal layer and PDLs.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    for n in params.tensors:
        kind = params.kind(n)
        if stage == "pretrain":
            params.trainable[n] = True
        elif stage == "fmdr_central":
            params.trainable[n] = kind == "head"
        else:
            params.trainable[n] = kind in ("head", "pdl")
    return params

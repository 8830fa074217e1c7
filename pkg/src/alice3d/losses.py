"""Reconstruction, inter-volume and intra-volume objectives plus the InfoNCE variant."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import INTER_PAIRS, INTRA_PAIRS, ForwardBundle
from .tensor import Tensor
from .volume import MaskSpec


class LossError(ValueError):
    pass


def recon_term(pred: Tensor, target: np.ndarray, masks) -> Tensor:
    """Squared error over masked-patch voxels, divided by the masked voxel count.

    ``pred`` is ``(B, N, P)`` (or ``(N, P)``); only rows listed in each mask's
    ``masked`` array are read, so visible-row predictions cannot affect the
    value.  The result is averaged over the batch.
    """
    if pred.ndim == 2:
        pred = pred.reshape(1, *pred.shape)
        target = np.asarray(target)[None]
    masks = [masks] if isinstance(masks, MaskSpec) else list(masks)
    b = pred.shape[0]
    if len(masks) != b:
        raise LossError("one mask per batch element is required")
    n_m = masks[0].n_masked
    if n_m == 0 or any(m.n_masked != n_m for m in masks):
        raise LossError("reconstruction needs the same non-zero masked count per element")
    rows = np.stack([m.masked for m in masks])
    bidx = np.repeat(np.arange(b)[:, None], n_m, axis=1)
    sel = T.index(pred, (bidx, rows))
    tgt = np.asarray(target)[bidx, rows]
    diff = sel - tgt
    return T.tsum(diff * diff) * (1.0 / (b * n_m * pred.shape[-1]))


def recon_loss(crops: Sequence[tuple[Tensor, np.ndarray, object]]) -> Tensor:
    """Sum of :func:`recon_term` over crops, each given as ``(pred, target, masks)``."""
    total = None
    for pred, target, masks in crops:
        term = recon_term(pred, target, masks)
        total = term if total is None else total + term
    return total


def inter_volume_loss(cls_uQ: Tensor, cls_vK, cls_rK: Tensor, cls_wQ) -> Tensor:
    """Cosine loss between each masked view's [cls] and the other crop's intact [cls]."""
    return T.cosine_loss(cls_uQ, cls_vK) + T.cosine_loss(cls_rK, cls_wQ)


def intra_volume_loss(S_uQ: Tensor, T_wQ, S_rK: Tensor, T_vK) -> Tensor:
    """Row-paired cosine loss between aligned student and teacher embeddings."""
    for s, t in ((S_uQ, T_wQ), (S_rK, T_vK)):
        if s.shape != T.as_tensor(t).shape:
            raise LossError(f"student/teacher shape mismatch {s.shape} vs {T.as_tensor(t).shape}")
    return T.cosine_loss(_rows(S_uQ), _rows(T_wQ)) + T.cosine_loss(_rows(S_rK), _rows(T_vK))


def _rows(x) -> Tensor:
    x = T.as_tensor(x)
    return x.reshape(-1, x.shape[-1]) if x.ndim > 2 else x


def infonce_loss(anchors: Tensor, positives, temperature: float = 0.2) -> Tensor:
    """Normalised-temperature cross-entropy over a batch.

    Row i of ``anchors`` is pulled towards row i of ``positives`` and pushed
    from every other row of ``positives``.  Positives are constants.
    """
    positives = T.as_tensor(positives).detach()
    if anchors.ndim != 2 or anchors.shape != positives.shape:
        raise LossError("anchors and positives must be matching (B, d) matrices")
    b = anchors.shape[0]
    if b < 2:
        raise LossError("InfoNCE needs a batch of at least 2 for negatives")
    if temperature <= 0:
        raise LossError("temperature must be positive")
    a = T.l2_normalize(anchors, axis=-1)
    p = T.l2_normalize(positives, axis=-1)
    logits = (a @ T.transpose(p)) * (1.0 / temperature)
    return T.cross_entropy(logits, np.arange(b), axis=-1)


@dataclass
class LossWeights:
    recon: float = 1.0
    inter: float = 1.0
    intra: float = 1.0


@dataclass
class LossReport:
    l_r: float
    l_dv: float
    l_st: float
    total: float
    step: int = 0
    grad_norms: dict[str, float] = field(default_factory=dict)
    lr: float = 0.0
    ema_m: float = 0.0

    def __post_init__(self):
        for name in ("l_r", "l_dv", "l_st", "total"):
            if not math.isfinite(getattr(self, name)):
                raise T.NonFiniteError(f"loss term {name} is not finite")


def total_loss(l_r: Tensor, l_dv: Tensor, l_st: Tensor, weights: LossWeights = LossWeights(), step: int = 0):
    """Weighted sum; returns the graph node and a :class:`LossReport`."""
    total = l_r * weights.recon + l_dv * weights.inter + l_st * weights.intra
    report = LossReport(l_r.item(), l_dv.item(), l_st.item(), total.item(), step)
    return total, report


def alice_terms(
    fb: ForwardBundle,
    targets: dict[str, np.ndarray],
    masks: dict[str, list],
    use_casa: bool = True,
    loss_kind: str = "cosine",
    temperature: float = 0.2,
) -> tuple[Tensor, Tensor, Tensor]:
    """Compute the three objectives from a forward bundle.

    ``loss_kind="infonce"`` swaps the inter-volume cosine loss for InfoNCE
    with in-batch negatives.  ``use_casa=False`` compares pooled decoder
    features with pooled target features instead of CASA embeddings.
    """
    l_r = recon_loss([(fb.recon[v], targets[v], masks[v]) for v in ("uQ", "rK")])

    if loss_kind == "cosine":
        l_dv = inter_volume_loss(fb.cls["uQ"], fb.cls["vK"], fb.cls["rK"], fb.cls["wQ"])
    elif loss_kind == "infonce":
        l_dv = sum(
            (infonce_loss(fb.cls[mv], fb.cls[iv], temperature) for mv, iv in INTER_PAIRS.items()),
            start=Tensor(0.0),
        )
    else:
        raise LossError(f"unknown loss kind {loss_kind!r}")

    if use_casa:
        l_st = intra_volume_loss(fb.S["uQ"], fb.T["wQ"], fb.S["rK"], fb.T["vK"])
    else:
        l_st = T.cosine_loss(fb.cls["uQ"], fb.cls[INTRA_PAIRS["uQ"]]) + T.cosine_loss(
            fb.cls["rK"], fb.cls[INTRA_PAIRS["rK"]]
        )
    return l_r, l_dv, l_st

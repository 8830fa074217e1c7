"""Segmentation/classification metrics, downstream fine-tuning and the ablation matrix."""

from __future__ import annotations

import copy
import csv
import dataclasses
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, stats

from . import tensor as T
from .config import RunConfig
from .model import ModelConfig, Params, encode_all, init_encoder, linear, _to_params
from .trainer import AdamState, adamw_step, clip_by_global_norm, load_encoder, pretrain_run
from .volume import PatchGrid, Volume, crop, generate_phantom, patchify, unpatchify

log = logging.getLogger(__name__)

_SIX = ndimage.generate_binary_structure(3, 1)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------
def dice_score(pred: np.ndarray, truth: np.ndarray, c: int = 1) -> float:
    """2|A & B| / (|A| + |B|) for class ``c``; 1.0 when both masks are empty."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("extents differ")
    a, b = pred == c, truth == c
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbour outside it (grid edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)


def nsd_counts(a: np.ndarray, b: np.ndarray, tolerance: float) -> tuple[int, int]:
    """(surface voxels within ``tolerance`` of the other surface, total surface voxels)."""
    sa, sb = surface(a), surface(b)
    na, nb = int(sa.sum()), int(sb.sum())
    if na == 0 or nb == 0:
        return 0, na + nb
    da = ndimage.distance_transform_edt(~sb)  # distance to the nearest surface voxel of b
    db = ndimage.distance_transform_edt(~sa)
    near = int((da[sa] <= tolerance).sum()) + int((db[sb] <= tolerance).sum())
    return near, na + nb


def nsd_score(pred: np.ndarray, truth: np.ndarray, c: int = 1, tolerance: float = 1.0) -> float:
    """Normalised surface Dice of class ``c`` at ``tolerance`` voxels."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("extents differ")
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    a, b = pred == c, truth == c
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 1.0
    if ea or eb:
        return 0.0
    near, total = nsd_counts(a, b, tolerance)
    return near / total


def auc_score(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC, ties counted one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = stats.rankdata(scores)
    return (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------
@dataclass
class EvalReport:
    per_class_dsc: list[float] = field(default_factory=list)
    per_class_nsd: list[float] = field(default_factory=list)
    mean_dsc: float = float("nan")
    mean_nsd: float = float("nan")
    auc: float | None = None
    seed: int = 0
    init: str = "random"
    flags: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def segmentation_report(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray], n_classes: int, tolerance: float = 1.0, **meta) -> EvalReport:
    """Per-class DSC and NSD pooled over a set of volumes.

    Intersections, sizes and surface counts are summed over volumes before
    the ratios are taken, so classes absent from one crop do not distort the
    mean.  A class absent from every prediction and truth scores 1.0.
    """
    dsc, nsd = [], []
    for c in range(1, n_classes + 1):
        inter = size = near = surf = 0
        one_sided = False
        for p, t in zip(preds, truths):
            a, b = p == c, t == c
            inter += int(np.logical_and(a, b).sum())
            size += int(a.sum()) + int(b.sum())
            if a.any() and b.any():
                n, s = nsd_counts(a, b, tolerance)
                near += n
                surf += s
            elif a.any() or b.any():
                surf += int(surface(a).sum()) + int(surface(b).sum())
                one_sided = True
        dsc.append(1.0 if size == 0 else 2.0 * inter / size)
        nsd.append(1.0 if surf == 0 and not one_sided else (near / surf if surf else 0.0))
    return EvalReport(dsc, nsd, float(np.mean(dsc)), float(np.mean(nsd)), **meta)


# ---------------------------------------------------------------------------
# segmentation head
# ---------------------------------------------------------------------------
def head_voxel_order(patch_extents: Sequence[int]) -> np.ndarray:
    """Map the head's (sub-block, voxel) output order to row-major patch voxels.

    The first block upsamples each token 2x per axis into 8 sub-tokens, the
    second emits the voxels of each sub-block.
    """
    px, py, pz = patch_extents
    if px % 2 or py % 2 or pz % 2:
        raise ValueError("segmentation head needs even patch extents")
    hx, hy, hz = px // 2, py // 2, pz // 2
    order = []
    for sx, sy, sz in itertools.product(range(2), repeat=3):
        for vx, vy, vz in itertools.product(range(hx), range(hy), range(hz)):
            x, y, z = sx * hx + vx, sy * hy + vy, sz * hz + vz
            order.append((x * py + y) * pz + z)
    return np.asarray(order)


def init_seg_head(dim: int, hidden: int, patch_voxels: int, n_classes: int, rng) -> dict[str, np.ndarray]:
    sub = patch_voxels // 8
    return {
        "up1.w": rng.uniform(-1, 1, size=(dim, 8 * hidden)) * np.sqrt(6.0 / (dim + 8 * hidden)),
        "up1.b": np.zeros(8 * hidden),
        "up2.w": rng.uniform(-1, 1, size=(hidden, sub * n_classes)) * np.sqrt(6.0 / (hidden + sub * n_classes)),
        "up2.b": np.zeros(sub * n_classes),
    }


def seg_logits(head: Params, feats: T.Tensor, n_classes: int) -> T.Tensor:
    """(B, N, D) token features -> (B, N, P, n_classes) logits in head voxel order."""
    b, n, _ = feats.shape
    hidden = head["up2.w"].shape[0]
    sub = head["up2.w"].shape[1] // n_classes
    x = T.gelu(linear(head, "up1", feats)).reshape(b, n * 8, hidden)
    x = linear(head, "up2", x)
    return x.reshape(b, n, 8 * sub, n_classes)


def cls_logits(head: Params, feats: T.Tensor) -> T.Tensor:
    return linear(head, "fc", T.mean(feats, axis=1))


# ---------------------------------------------------------------------------
# downstream data
# ---------------------------------------------------------------------------
def _organ_crop(vol: Volume, organ: int, crop_extents, rng, jitter: int) -> Volume:
    ext = np.asarray(crop_extents)
    ph = np.asarray(vol.extents)
    c = np.round(vol.organ_centroids[organ]).astype(int) + rng.integers(-jitter, jitter + 1, size=3)
    start = np.clip(c - ext // 2, 0, ph - ext)
    return crop(vol, start, ext)


def add_lesion(vol: Volume, rng: np.random.Generator) -> Volume:
    """Paint a small bright sphere inside a random organ (the positive class)."""
    organs = sorted(vol.present_labels())
    if not organs:
        raise ValueError("no organ to host a lesion")
    lab = organs[rng.integers(len(organs))]
    pts = np.argwhere(vol.labels == lab)
    centre = pts[rng.integers(len(pts))]
    r = rng.uniform(1.5, 2.5)
    grid = np.indices(vol.extents).transpose(1, 2, 3, 0)
    inside = ((grid - centre) ** 2).sum(-1) <= r * r
    img = vol.intensity.copy()
    img[inside] = np.clip(img[inside] + 0.3, 0.0, 1.0)
    return Volume(img, vol.labels.copy(), vol.phantom_id, dict(vol.organ_centroids))


def downstream_split(cfg: RunConfig, split: str) -> list[Volume]:
    """Labelled phantoms for fine-tuning; anatomy seeds never overlap pretraining."""
    ft, data = cfg.finetune, cfg.data
    n = ft.n_train if split == "train" else ft.n_test
    base = ft.anatomy_base + (0 if split == "train" else 10_000)
    return [generate_phantom(base + i, data.phantom_extents, data.n_organs, deform_seed=base + i) for i in range(n)]


def _test_crops(cfg: RunConfig, vols: list[Volume]) -> list[Volume]:
    rng = np.random.default_rng([cfg.finetune.anatomy_base, 9101])
    out = []
    for v in vols:
        for organ in sorted(v.present_labels()):
            out.append(_organ_crop(v, organ, cfg.data.crop_extents, rng, cfg.data.jitter))
    return out


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------
def _encoder_params(cfg: RunConfig, init: str, checkpoint: str | None, seed: int) -> Params:
    from .model import init_model

    state = init_model(cfg.model, seed)
    if init == "checkpoint":
        if not checkpoint:
            raise ValueError("init=checkpoint needs a checkpoint path")
        load_encoder(checkpoint, state)
    elif init == "encoder":
        pass
    elif init != "random":
        raise ValueError(f"unknown init {init!r}")
    return state.encoder


def finetune_seg(
    cfg: RunConfig,
    init: str = "random",
    checkpoint: str | None = None,
    seed: int | None = None,
    encoder: Params | None = None,
) -> EvalReport:
    """Train encoder + segmentation head with cross-entropy and report test DSC/NSD.

    ``encoder`` (pretrained parameters, copied) takes precedence over
    ``init``/``checkpoint``.
    """
    ft = cfg.finetune
    seed = ft.seed if seed is None else seed
    n_classes = cfg.data.n_organs + 1
    grid: PatchGrid = cfg.data.grid()
    order = head_voxel_order(grid.patch_extents)
    rng = np.random.default_rng([seed, 9201])

    enc = copy.deepcopy(encoder) if encoder is not None else _encoder_params(cfg, init, checkpoint, seed)
    for p in enc.values():
        p.requires_grad = True
    head = _to_params(init_seg_head(cfg.model.embed_dim, ft.head_hidden, grid.patch_voxels, n_classes, rng), True)
    params = {**{f"enc.{k}": v for k, v in enc.items()}, **{f"head.{k}": v for k, v in head.items()}}
    opt = AdamState()
    optim = dataclasses.replace(cfg.optim, weight_decay=ft.weight_decay)

    train_vols = downstream_split(cfg, "train")
    for step in range(1, ft.steps + 1):
        toks, labs = [], []
        for _ in range(ft.batch_size):
            v = train_vols[rng.integers(len(train_vols))]
            organ = int(rng.choice(sorted(v.present_labels())))
            c = _organ_crop(v, organ, cfg.data.crop_extents, rng, 4)
            toks.append(patchify(c, grid))
            labs.append(patchify(c.labels, grid)[:, order])
        for p in params.values():
            p.zero_grad()
        logits = seg_logits(head, encode_all(enc, cfg.model, np.stack(toks)), n_classes)
        loss = T.cross_entropy(logits, np.stack(labs).astype(np.intp), axis=-1)
        loss.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        clip_by_global_norm(grads, optim.grad_clip)
        lr = ft.lr * min(1.0, step / max(1, ft.steps // 10))
        adamw_step({k: p.data for k, p in params.items()}, grads, opt, optim, lr, [k for k, p in params.items() if p.ndim >= 2])

    preds, truths = predict_seg(cfg, enc, head, _test_crops(cfg, downstream_split(cfg, "test")))
    return segmentation_report(
        preds,
        truths,
        cfg.data.n_organs,
        cfg.eval.nsd_tolerance,
        seed=seed,
        init="pretrained" if (encoder is not None or init == "checkpoint") else "random",
        flags={"use_ldv": cfg.train.use_ldv, "use_casa": cfg.train.use_casa, "loss_kind": cfg.train.loss_kind},
    )


def predict_seg(cfg: RunConfig, enc: Params, head: Params, crops: list[Volume]):
    grid = cfg.data.grid()
    order = head_voxel_order(grid.patch_extents)
    n_classes = cfg.data.n_organs + 1
    preds, truths = [], []
    with T.no_grad():
        for i in range(0, len(crops), 8):
            chunk = crops[i : i + 8]
            logits = seg_logits(head, encode_all(enc, cfg.model, np.stack([patchify(c, grid) for c in chunk])), n_classes)
            lab = logits.data.argmax(-1)
            for c, l in zip(chunk, lab):
                tok = np.empty_like(l)
                tok[:, order] = l
                preds.append(unpatchify(tok, grid))
                truths.append(c.labels)
    return preds, truths


def finetune_cls(
    cfg: RunConfig,
    init: str = "random",
    checkpoint: str | None = None,
    seed: int | None = None,
    encoder: Params | None = None,
) -> EvalReport:
    """Lesion / no-lesion probe: pooled encoder features + linear layer; reports AUC."""
    ft = cfg.finetune
    seed = ft.seed if seed is None else seed
    grid = cfg.data.grid()
    rng = np.random.default_rng([seed, 9301])
    enc = copy.deepcopy(encoder) if encoder is not None else _encoder_params(cfg, init, checkpoint, seed)
    for p in enc.values():
        p.requires_grad = True
    d = cfg.model.embed_dim
    head = _to_params({"fc.w": rng.normal(0, 0.02, size=(d, 2)), "fc.b": np.zeros(2)}, True)
    params = {**{f"enc.{k}": v for k, v in enc.items()}, **{f"head.{k}": v for k, v in head.items()}}
    opt = AdamState()
    optim = dataclasses.replace(cfg.optim, weight_decay=ft.weight_decay)

    def sample(vols, r):
        v = vols[r.integers(len(vols))]
        organ = int(r.choice(sorted(v.present_labels())))
        c = _organ_crop(v, organ, cfg.data.crop_extents, r, 4)
        y = int(r.integers(2))
        if y:
            c = add_lesion(c, r)
        return patchify(c, grid), y

    train_vols = downstream_split(cfg, "train")
    for step in range(1, ft.steps + 1):
        batch = [sample(train_vols, rng) for _ in range(ft.batch_size)]
        for p in params.values():
            p.zero_grad()
        logits = cls_logits(head, encode_all(enc, cfg.model, np.stack([b[0] for b in batch])))
        loss = T.cross_entropy(logits, np.array([b[1] for b in batch]), axis=-1)
        loss.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        clip_by_global_norm(grads, optim.grad_clip)
        adamw_step({k: p.data for k, p in params.items()}, grads, opt, optim, ft.lr, [k for k, p in params.items() if p.ndim >= 2])

    trng = np.random.default_rng([ft.anatomy_base, 9302])
    test_vols = downstream_split(cfg, "test")
    test = [sample(test_vols, trng) for _ in range(max(16, 4 * len(test_vols)))]
    if len({y for _, y in test}) < 2:
        test[0] = (test[0][0], 1 - test[0][1])
    with T.no_grad():
        logits = cls_logits(head, encode_all(enc, cfg.model, np.stack([t[0] for t in test]))).data
    z = logits - logits.max(-1, keepdims=True)
    prob = np.exp(z[:, 1]) / np.exp(z).sum(-1)
    return EvalReport(
        auc=float(auc_score(prob, [t[1] for t in test])),
        seed=seed,
        init="pretrained" if (encoder is not None or init == "checkpoint") else "random",
    )


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------
FLAG_VALUES = {"use_ldv": (True, False), "use_casa": (True, False), "loss_kind": ("cosine", "infonce")}


@dataclass
class AblationRow:
    flags: dict
    dscs: list[float]
    seeds: list[int]
    pretrain_steps: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.dscs))

    @property
    def std(self) -> float:
        return float(np.std(self.dscs))


def flag_grid(names: Sequence[str] = ("use_ldv", "use_casa", "loss_kind")) -> list[dict]:
    return [dict(zip(names, combo)) for combo in itertools.product(*(FLAG_VALUES[n] for n in names))]


def pretrained_encoder(cfg: RunConfig, flags: dict, seed: int, steps: int) -> Params:
    """Pretrain under ``flags`` for ``steps`` steps and return the online encoder."""
    run = copy.deepcopy(cfg)
    run.train = dataclasses.replace(run.train, seed=seed, **flags)
    run.optim = dataclasses.replace(run.optim, total_steps=steps, warmup_steps=min(run.optim.warmup_steps, max(steps // 10, 1)))
    return pretrain_run(run).state.encoder


def ablation_matrix(
    cfg: RunConfig,
    grid: Sequence[dict] | None = None,
    seeds: Sequence[int] | None = None,
    pretrain_steps: int | None = None,
) -> list[AblationRow]:
    """Pretrain + fine-tune every flag combination over the same seeds and budget."""
    grid = flag_grid() if grid is None else list(grid)
    seeds = list(range(cfg.finetune.n_seeds)) if seeds is None else list(seeds)
    steps = cfg.eval.ablation_pretrain_steps if pretrain_steps is None else pretrain_steps
    rows = []
    for flags in grid:
        dscs = []
        for s in seeds:
            enc = pretrained_encoder(cfg, flags, s, steps)
            run = copy.deepcopy(cfg)
            run.train = dataclasses.replace(run.train, **flags)
            dscs.append(finetune_seg(run, seed=s, encoder=enc).mean_dsc)
            log.info("ablation %s seed %d dsc %.4f", flags, s, dscs[-1])
        rows.append(AblationRow(dict(flags), dscs, seeds, steps))
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path: str | Path) -> None:
    names = list(rows[0].flags) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["mean_dsc", "std_dsc", "n_seeds", "seeds", "pretrain_steps"])
        for r in rows:
            w.writerow([r.flags[n] for n in names] + [repr(r.mean), repr(r.std), len(r.seeds), " ".join(map(str, r.seeds)), r.pretrain_steps])

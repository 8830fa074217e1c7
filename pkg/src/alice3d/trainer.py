"""AdamW, learning-rate and momentum schedules, the pretraining loop and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .config import DataConfig, OptimizerConfig, RunConfig, TrainerConfig
from .losses import LossReport, LossWeights, alice_terms
from .model import ModelState, alice_forward, ema_update, init_model
from .volume import (
    PlacementError,
    augment_strong,
    mask_random,
    normalize_targets,
    patchify,
    random_strong_spec,
    sample_aligned_crops,
)

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "l_r", "l_dv", "l_st", "total", "lr", "ema_m")


class ArtifactMismatch(RuntimeError):
    """Checkpoint does not fit the current configuration."""


# ---------------------------------------------------------------------------
# optimiser and schedules
# ---------------------------------------------------------------------------
@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: AdamState,
    config: OptimizerConfig,
    lr: float,
    decay: Iterable[str] | None = None,
) -> bool:
    """One decoupled-weight-decay Adam update, in place.

    ``decay`` names the parameters that receive weight decay (all of them when
    ``None``).  Non-finite gradients skip the update; returns whether the step
    was applied.
    """
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("non-finite gradient, skipping optimiser step")
        return False
    decay = set(params) if decay is None else set(decay)
    moments.step += 1
    t = moments.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = moments.m.get(name)
        v = moments.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        moments.m[name], moments.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        if name in decay and config.weight_decay:
            update = update + config.weight_decay * p
        p -= lr * update
    return True


def lr_schedule(step: int, config: OptimizerConfig) -> float:
    """Linear warmup from 0 to ``peak_lr`` then cosine decay to ``min_lr``."""
    if step < 0 or step > config.total_steps:
        raise ValueError("step outside [0, total_steps]")
    if config.warmup_steps and step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    progress = (step - config.warmup_steps) / span
    return config.min_lr + (config.peak_lr - config.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def ema_schedule(step: int, total_steps: int, config: TrainerConfig) -> float:
    """Momentum ramped from its base value to 1 along a half cosine."""
    m0 = config.ema_momentum
    if config.ema_schedule == "constant":
        return m0
    return 1.0 - (1.0 - m0) * (math.cos(math.pi * min(step, total_steps) / total_steps) + 1.0) / 2.0


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = T.global_norm(grads.values())
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def decay_names(params: dict[str, T.Tensor]) -> list[str]:
    # matrices only; biases, norms, embeddings-of-one-token stay undecayed
    return [k for k, p in params.items() if p.ndim >= 2]


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------
@dataclass
class ViewBundle:
    """Token matrices of the four views for one batch.

    ``tokens`` keys are ``uQ``, ``rK`` (masked crops as given to the online
    encoder; masking is applied through ``masks``) and ``wQ``, ``vK``
    (strongly augmented crops for the target encoder).  ``targets`` holds the
    per-patch normalised reconstruction targets for ``uQ`` and ``rK``.
    """

    tokens: dict[str, np.ndarray]
    targets: dict[str, np.ndarray]
    masks: dict[str, list]
    organs: list[int]
    anatomies: list[int]


def make_view_bundle(data: DataConfig, train: TrainerConfig, step: int, anatomy_seeds: list[int] | None = None) -> ViewBundle:
    """Sample one batch, deterministically in ``(train.seed, step)``.

    Batch elements are centred on different organs where possible so that
    in-batch negatives depict different body parts.
    """
    grid = data.grid()
    anatomy_seeds = anatomy_seeds or data.anatomy_seeds()
    rng = np.random.default_rng([train.seed, step, 9001])
    organs = list(rng.permutation(np.arange(1, data.n_organs + 1)))
    views = {k: [] for k in ("uQ", "rK", "wQ", "vK")}
    targets = {"uQ": [], "rK": []}
    masks = {"uQ": [], "rK": []}
    used_organs, used_anat = [], []
    for b in range(train.batch_size):
        anat = int(anatomy_seeds[rng.integers(len(anatomy_seeds))])
        if data.n_subjects >= 2:
            subj = rng.choice(data.n_subjects, size=2, replace=False)
        else:
            subj = np.array([0, 0])
        organ = int(organs[b % len(organs)])
        crng = np.random.default_rng([train.seed, step, b, 9002])
        try:
            pair = sample_aligned_crops(
                anat, (int(subj[0]), int(subj[1])), data.crop_extents, data.jitter, data.phantom_extents, data.n_organs, organ=organ, rng=crng
            )
        except PlacementError:
            pair = sample_aligned_crops(
                anat, (int(subj[0]), int(subj[1])), data.crop_extents, data.jitter, data.phantom_extents, data.n_organs, rng=crng
            )
        seeds = rng.integers(0, 2**31 - 1, size=4)
        q_tok = patchify(pair.Q, grid)
        k_tok = patchify(pair.K, grid)
        views["uQ"].append(q_tok)
        views["rK"].append(k_tok)
        views["wQ"].append(patchify(augment_strong(pair.Q, random_strong_spec(int(seeds[0]), data.crop_extents, data.zoom_range)), grid))
        views["vK"].append(patchify(augment_strong(pair.K, random_strong_spec(int(seeds[1]), data.crop_extents, data.zoom_range)), grid))
        targets["uQ"].append(normalize_targets(q_tok))
        targets["rK"].append(normalize_targets(k_tok))
        masks["uQ"].append(mask_random(grid, train.mask_ratio, int(seeds[2])))
        masks["rK"].append(mask_random(grid, train.mask_ratio, int(seeds[3])))
        used_organs.append(pair.organ)
        used_anat.append(anat)
    return ViewBundle(
        tokens={k: np.stack(v) for k, v in views.items()},
        targets={k: np.stack(v) for k, v in targets.items()},
        masks=masks,
        organs=used_organs,
        anatomies=used_anat,
    )


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------
def loss_weights(train: TrainerConfig) -> LossWeights:
    return LossWeights(train.w_recon, train.w_inter if train.use_ldv else 0.0, train.w_intra)


def compute_loss(state: ModelState, bundle: ViewBundle, train: TrainerConfig, frozen_teacher=None):
    """Forward pass and weighted total; returns ``(total, (l_r, l_dv, l_st), forward bundle)``."""
    fb = alice_forward(state, bundle.tokens, bundle.masks, use_casa=train.use_casa, frozen_teacher=frozen_teacher)
    terms = alice_terms(fb, bundle.targets, bundle.masks, train.use_casa, train.loss_kind, train.temperature)
    w = loss_weights(train)
    l_r, l_dv, l_st = terms
    total = l_r * w.recon + l_dv * w.inter + l_st * w.intra
    return total, terms, fb


def _term_grad_norms(state: ModelState, terms, weights: LossWeights) -> dict[str, float]:
    out = {}
    params = state.online_params()
    for name, term, w in zip(("l_r", "l_dv", "l_st"), terms, (weights.recon, weights.inter, weights.intra)):
        state.zero_grad()
        if w and term.requires_grad:
            (term * w).backward()
        out[name] = T.global_norm(p.grad for p in params.values() if p.grad is not None)
    state.zero_grad()
    return out


def train_step(
    state: ModelState,
    opt: AdamState,
    bundle: ViewBundle,
    cfg: RunConfig,
    step: int,
) -> LossReport:
    """Forward, backward, EMA of target parameters, then AdamW on online parameters.

    ``state`` and ``opt`` are updated in place.  ``step`` is 1-based.
    """
    train, optim = cfg.train, cfg.optim
    state.zero_grad()
    total, terms, _ = compute_loss(state, bundle, train)
    if not np.isfinite(total.data).all():
        raise T.NonFiniteError(f"non-finite loss at step {step}")
    grad_norms = _term_grad_norms(state, terms, loss_weights(train)) if train.term_grad_norms else {}
    total.backward()

    # momentum update from the pre-step online weights, then the optimiser step
    m = ema_schedule(step, optim.total_steps, train)
    ema_update(state, m)

    online = state.online_params()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in online.items()}
    grad_norms["total"] = clip_by_global_norm(grads, optim.grad_clip)
    lr = lr_schedule(step, optim)
    arrays = {k: p.data for k, p in online.items()}
    if not adamw_step(arrays, grads, opt, optim, lr, decay_names(online)):
        grad_norms["skipped"] = 1.0

    l_r, l_dv, l_st = (t.item() for t in terms)
    report = LossReport(l_r, l_dv, l_st, total.item(), step, grad_norms)
    report.lr = lr
    report.ema_m = m
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
CKPT_MAGIC = b"ACKP"
CKPT_VERSION = 1
_DTYPE_TAG = {np.dtype("<f8"): 1, np.dtype("<f4"): 2, np.dtype("<i8"): 3}
_TAG_DTYPE = {v: k for k, v in _DTYPE_TAG.items()}


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_TAG:
        raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
    raw = name.encode()
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<BB", _DTYPE_TAG[dt], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def save_checkpoint(path: str | Path, state: ModelState, opt: AdamState, cfg: RunConfig, step: int) -> None:
    """Atomic write of parameters and optimiser moments.

    Layout (little-endian): magic ``ACKP``, u16 version, 64-byte ASCII config
    hash, u32 metadata length + UTF-8 JSON metadata, u32 record count, then
    records of (u16 name length, name, u8 dtype tag, u8 ndim, ndim x u32
    shape, raw payload).  Names are ``param/<group>.<name>``,
    ``adam.m/<name>`` and ``adam.v/<name>``.
    """
    path = Path(path)
    records: list[tuple[str, np.ndarray]] = []
    for name, p in state.all_params().items():
        records.append((f"param/{name}", p.data))
    for name in sorted(opt.m):
        records.append((f"adam.m/{name}", opt.m[name]))
        records.append((f"adam.v/{name}", opt.v[name]))
    meta = json.dumps({"step": step, "adam_step": opt.step, "config": cfg.dumps()}).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(cfg.pretrain_hash().encode("ascii"))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            _write_record(fh, name, arr)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    config_hash: str
    meta: dict
    arrays: dict[str, np.ndarray]

    @property
    def step(self) -> int:
        return int(self.meta["step"])


def read_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ArtifactMismatch(f"{path}: not a checkpoint")
    try:
        return _parse_checkpoint(raw)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ArtifactMismatch(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse_checkpoint(raw: bytes) -> Checkpoint:
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CKPT_VERSION:
        raise ArtifactMismatch(f"unsupported checkpoint version {version}")
    off = 6
    chash = raw[off : off + 64].decode("ascii")
    off += 64
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off : off + mlen].decode())
    off += mlen
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nl].decode()
        off += nl
        tag, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        dt = _TAG_DTYPE[tag]
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(shape).copy()
        off += count * dt.itemsize
    if off != len(raw):
        raise ValueError(f"{len(raw) - off} trailing bytes")
    return Checkpoint(chash, meta, arrays)


def load_into(state: ModelState, opt: AdamState | None, ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into ``state`` (and ``opt``), checking every shape."""
    params = state.all_params()
    stored = {k[len("param/") :]: v for k, v in ckpt.arrays.items() if k.startswith("param/")}
    if set(stored) != set(params):
        raise ArtifactMismatch("checkpoint parameter names differ from the model")
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise ArtifactMismatch(f"shape mismatch for {name}: {stored[name].shape} vs {p.shape}")
        p.data = stored[name].astype(np.float64)
    if opt is not None:
        opt.m = {k[len("adam.m/") :]: v for k, v in ckpt.arrays.items() if k.startswith("adam.m/")}
        opt.v = {k[len("adam.v/") :]: v for k, v in ckpt.arrays.items() if k.startswith("adam.v/")}
        opt.step = int(ckpt.meta["adam_step"])


def load_encoder(path: str | Path, state: ModelState) -> None:
    """Copy only the online encoder from a pretraining checkpoint."""
    ckpt = read_checkpoint(path)
    for name, p in state.encoder.items():
        key = f"param/encoder.{name}"
        if key not in ckpt.arrays or ckpt.arrays[key].shape != p.shape:
            raise ArtifactMismatch(f"checkpoint has no compatible {key}")
        p.data = ckpt.arrays[key].astype(np.float64)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------
@dataclass
class PretrainResult:
    state: ModelState
    opt: AdamState
    reports: list[LossReport]
    checkpoints: list[Path]
    seconds: float


def _csv_row(r: LossReport) -> list[str]:
    return [str(r.step)] + [repr(float(x)) for x in (r.l_r, r.l_dv, r.l_st, r.total, r.lr, r.ema_m)]


def read_loss_csv(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def pretrain_run(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
    progress: bool = False,
) -> PretrainResult:
    """Run the pretraining loop.

    Writes ``losses.csv`` and ``checkpoint-{step}.bin`` files under
    ``out_dir`` when given (checkpoints every ``train.checkpoint_every`` steps
    and at the last executed step).  ``resume`` continues from a checkpoint;
    its config hash must match.  ``stop_after`` ends the run early at that
    step, which is how an interruption is simulated.
    """
    t0 = time.perf_counter()
    state = init_model(cfg.model, cfg.train.seed)
    opt = AdamState()
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[list[str]] = []
    if resume is not None:
        ckpt = read_checkpoint(resume)
        if ckpt.config_hash != cfg.pretrain_hash():
            raise ArtifactMismatch("resume checkpoint was written under a different config")
        load_into(state, opt, ckpt)
        start = ckpt.step
        if out is not None and (out / "losses.csv").exists():
            with open(out / "losses.csv", newline="") as fh:
                rows = [r for r in list(csv.reader(fh))[1:] if int(r[0]) <= start]

    last = cfg.optim.total_steps if stop_after is None else min(stop_after, cfg.optim.total_steps)
    reports: list[LossReport] = []
    checkpoints: list[Path] = []
    fh = writer = None
    if out is not None:
        fh = open(out / "losses.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        writer.writerows(rows)
    try:
        for step in range(start + 1, last + 1):
            bundle = make_view_bundle(cfg.data, cfg.train, step)
            report = train_step(state, opt, bundle, cfg, step)
            reports.append(report)
            if writer is not None:
                writer.writerow(_csv_row(report))
            if progress and (step % 50 == 0 or step == last):
                log.info("step %d total %.4f (r %.4f dv %.4f st %.4f)", step, report.total, report.l_r, report.l_dv, report.l_st)
            if out is not None and (step % cfg.train.checkpoint_every == 0 or step == last):
                fh.flush()
                path = out / f"checkpoint-{step}.bin"
                save_checkpoint(path, state, opt, cfg, step)
                checkpoints.append(path)
    finally:
        if fh is not None:
            fh.close()
    return PretrainResult(state, opt, reports, checkpoints, time.perf_counter() - t0)


def state_digest(state: ModelState) -> str:
    h = hashlib.sha256()
    for name, p in sorted(state.all_params().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()

"""Online encoder, online decoder, EMA target encoder, CASA and projection heads.

All forward functions are batched: token matrices are ``(B, N, P)`` arrays,
features are ``(B, n, D)`` tensors, and every mask list has one
:class:`~alice3d.volume.MaskSpec` per batch element (same masked count).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad
from .volume import MaskSpec

Params = dict[str, Tensor]


@dataclass
class ModelConfig:
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    patch_voxels: int = 512
    n_tokens: int = 16
    decoder_dim: int = 0  # 0 -> embed_dim // 2
    decoder_depth: int = 2
    decoder_heads: int = 2
    head_hidden: int = 64
    head_bottleneck: int = 16
    casa_dim: int = 0  # 0 -> embed_dim
    casa_share_weights: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.dec_dim % self.decoder_heads:
            raise ValueError("decoder_dim must be divisible by decoder_heads")

    @property
    def dec_dim(self) -> int:
        return self.decoder_dim or max(self.embed_dim // 2, 1)

    @property
    def c_dim(self) -> int:
        return self.casa_dim or self.embed_dim


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------
def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _linear(p: dict, rng, name: str, fan_in: int, fan_out: int) -> None:
    p[f"{name}.w"] = _xavier(rng, fan_in, fan_out)
    p[f"{name}.b"] = np.zeros(fan_out)


def _norm(p: dict, name: str, dim: int) -> None:
    p[f"{name}.g"] = np.ones(dim)
    p[f"{name}.b"] = np.zeros(dim)


def _block(p: dict, rng, name: str, dim: int, mlp_ratio: float) -> None:
    hidden = int(round(dim * mlp_ratio))
    _norm(p, f"{name}.ln1", dim)
    _linear(p, rng, f"{name}.qkv", dim, 3 * dim)
    _linear(p, rng, f"{name}.proj", dim, dim)
    _norm(p, f"{name}.ln2", dim)
    _linear(p, rng, f"{name}.fc1", dim, hidden)
    _linear(p, rng, f"{name}.fc2", hidden, dim)


def init_encoder(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    _linear(p, rng, "patch_embed", cfg.patch_voxels, cfg.embed_dim)
    p["pos_embed"] = rng.normal(0.0, 0.02, size=(cfg.n_tokens, cfg.embed_dim))
    for i in range(cfg.depth):
        _block(p, rng, f"blocks.{i}", cfg.embed_dim, cfg.mlp_ratio)
    _norm(p, "norm", cfg.embed_dim)
    return p


def init_decoder(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = cfg.dec_dim
    p: dict[str, np.ndarray] = {}
    _linear(p, rng, "embed", cfg.embed_dim, d)
    p["mask_token"] = rng.normal(0.0, 0.02, size=(d,))
    p["pos_embed"] = rng.normal(0.0, 0.02, size=(cfg.n_tokens, d))
    for i in range(cfg.decoder_depth):
        _block(p, rng, f"blocks.{i}", d, cfg.mlp_ratio)
    _norm(p, "norm", d)
    _linear(p, rng, "pred", d, cfg.patch_voxels)
    # lifts decoder features to the encoder width so phi and psi are congruent
    _linear(p, rng, "feat", d, cfg.embed_dim)
    return p


def init_head(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    _linear(p, rng, "fc1", cfg.embed_dim, cfg.head_hidden)
    _linear(p, rng, "fc2", cfg.head_hidden, cfg.head_bottleneck)
    _linear(p, rng, "fc3", cfg.head_bottleneck, cfg.embed_dim)
    return p


def init_casa(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, c = cfg.embed_dim, cfg.c_dim
    p: dict[str, np.ndarray] = {}
    _norm(p, "ln_q", d)
    _norm(p, "ln_kv", d)
    p["w_q"] = _xavier(rng, d, c)
    p["w_k"] = _xavier(rng, d, c)
    p["w_v"] = _xavier(rng, d, c)
    _linear(p, rng, "zeta", c, c)
    return p


def _to_params(arrays: dict[str, np.ndarray], trainable: bool) -> Params:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=trainable) for k, v in arrays.items()}


@dataclass
class ModelState:
    config: ModelConfig
    encoder: Params
    decoder: Params
    casa: Params
    phi: Params
    target: Params
    psi: Params
    casa_teacher: Params | None = None

    # trainable groups, updated by the optimiser
    ONLINE_GROUPS = ("encoder", "decoder", "casa", "phi")
    # momentum groups, updated only by ema_update
    TARGET_GROUPS = ("target", "psi", "casa_teacher")
    # which online group each target group tracks
    EMA_SOURCE = {"target": "encoder", "psi": "phi", "casa_teacher": "casa"}

    def groups(self, names: Sequence[str]) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for g in names:
            params = getattr(self, g)
            if params is None:
                continue
            out.update({f"{g}.{k}": v for k, v in params.items()})
        return out

    def online_params(self) -> dict[str, Tensor]:
        return self.groups(self.ONLINE_GROUPS)

    def target_params(self) -> dict[str, Tensor]:
        return self.groups(self.TARGET_GROUPS)

    def all_params(self) -> dict[str, Tensor]:
        return {**self.online_params(), **self.target_params()}

    def teacher_casa(self) -> Params:
        return self.casa if self.casa_teacher is None else self.casa_teacher

    def zero_grad(self) -> None:
        for p in self.all_params().values():
            p.zero_grad()

    def clone(self) -> "ModelState":
        return copy.deepcopy(self)


def init_model(cfg: ModelConfig, seed: int) -> ModelState:
    rng = np.random.default_rng([int(seed), 8001])
    enc = init_encoder(cfg, rng)
    dec = init_decoder(cfg, rng)
    casa = init_casa(cfg, rng)
    phi = init_head(cfg, rng)
    return ModelState(
        config=cfg,
        encoder=_to_params(enc, True),
        decoder=_to_params(dec, True),
        casa=_to_params(casa, True),
        phi=_to_params(phi, True),
        target=_to_params(enc, False),
        psi=_to_params(phi, False),
        casa_teacher=None if cfg.casa_share_weights else _to_params(casa, False),
    )


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------
def linear(p: Params, name: str, x: Tensor) -> Tensor:
    return x @ p[f"{name}.w"] + p[f"{name}.b"]


def norm(p: Params, name: str, x: Tensor, eps: float) -> Tensor:
    return T.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"], eps)


def attention(p: Params, name: str, x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    qkv = linear(p, f"{name}.qkv", x).reshape(b, n, 3, heads, dh)
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, h, n, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = T.softmax((q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh)), axis=-1)
    out = T.transpose(att @ v, (0, 2, 1, 3)).reshape(b, n, d)
    return linear(p, f"{name}.proj", out)


def block(p: Params, name: str, x: Tensor, heads: int, eps: float) -> Tensor:
    x = x + attention(p, name, norm(p, f"{name}.ln1", x, eps), heads)
    h = T.gelu(linear(p, f"{name}.fc1", norm(p, f"{name}.ln2", x, eps)))
    return x + linear(p, f"{name}.fc2", h)


def _as_batch(tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    return tokens[None] if tokens.ndim == 2 else tokens


def _as_masks(masks, batch: int) -> list[MaskSpec]:
    masks = [masks] if isinstance(masks, MaskSpec) else list(masks)
    if len(masks) != batch:
        raise ValueError(f"{len(masks)} masks for a batch of {batch}")
    if len({m.n_masked for m in masks}) != 1:
        raise ValueError("all masks in a batch need the same masked count")
    return masks


def run_encoder(p: Params, cfg: ModelConfig, tokens: np.ndarray, positions: np.ndarray) -> Tensor:
    """Embed ``tokens`` (B, n, P) at token ``positions`` (B, n) and run the blocks."""
    x = linear(p, "patch_embed", T.as_tensor(tokens)) + T.index(p["pos_embed"], positions)
    for i in range(cfg.depth):
        x = block(p, f"blocks.{i}", x, cfg.heads, cfg.ln_eps)
    return norm(p, "norm", x, cfg.ln_eps)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------
def encode_visible(state: ModelState, tokens: np.ndarray, masks) -> Tensor:
    """Online encoder on the visible rows only; masked rows are never read."""
    tokens = _as_batch(tokens)
    masks = _as_masks(masks, tokens.shape[0])
    vis = np.stack([m.visible for m in masks])
    if vis.shape[1] == 0:
        raise ValueError("no visible tokens")
    visible_tokens = np.take_along_axis(tokens, vis[..., None], axis=1)
    return run_encoder(state.encoder, state.config, visible_tokens, vis)


def encode_all(params: Params, cfg: ModelConfig, tokens: np.ndarray) -> Tensor:
    tokens = _as_batch(tokens)
    b, n, _ = tokens.shape
    return run_encoder(params, cfg, tokens, np.broadcast_to(np.arange(n), (b, n)))


def decode_full(state: ModelState, V: Tensor, masks) -> tuple[Tensor, Tensor]:
    """Scatter visible features and mask tokens back to token order and decode.

    Returns the decoder features lifted to the encoder width ``(B, N, D)``
    and the per-token voxel predictions ``(B, N, P)``.
    """
    cfg, p = state.config, state.decoder
    b = V.shape[0]
    masks = _as_masks(masks, b)
    n = cfg.n_tokens
    if V.shape[1] != masks[0].n_visible or masks[0].n_tokens != n:
        raise ValueError("visible features do not match the mask")
    x = linear(p, "embed", V)
    n_m = masks[0].n_masked
    if n_m:
        fill = T.add(np.zeros((b, n_m, cfg.dec_dim)), p["mask_token"])
        x = T.concat([x, fill], axis=1)
    order = np.stack([np.concatenate([m.visible, m.masked]) for m in masks])
    restore = np.argsort(order, axis=1, kind="stable")
    x = T.gather(x, np.broadcast_to(restore[..., None], (b, n, cfg.dec_dim)), axis=1)
    x = x + p["pos_embed"]
    for i in range(cfg.decoder_depth):
        x = block(p, f"blocks.{i}", x, cfg.decoder_heads, cfg.ln_eps)
    x = norm(p, "norm", x, cfg.ln_eps)
    return linear(p, "feat", x), linear(p, "pred", x)


def encode_target(state: ModelState, tokens: np.ndarray) -> Tensor:
    """Target encoder on the whole view.  Always a constant (no graph)."""
    with no_grad():
        out = encode_all(state.target, state.config, tokens)
    return out


def ema_update(state: ModelState, momentum: float) -> None:
    """target <- m * target + (1 - m) * online, for every momentum group."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    for tgt_name, src_name in ModelState.EMA_SOURCE.items():
        tgt = getattr(state, tgt_name)
        if tgt is None:
            continue
        src = getattr(state, src_name)
        for k, t in tgt.items():
            t.data = momentum * t.data + (1.0 - momentum) * src[k].data


def project_head(head: Params, x: Tensor, return_bottleneck: bool = False):
    """Linear-GELU-Linear, l2-normalised bottleneck, then a final linear."""
    h = T.gelu(linear(head, "fc1", x))
    z = T.l2_normalize(linear(head, "fc2", h), axis=-1, eps=1e-12)
    out = linear(head, "fc3", z)
    return (out, z) if return_bottleneck else out


def global_cls(x: Tensor) -> Tensor:
    """Average over the token axis (second to last)."""
    if x.shape[-2] == 0:
        raise ValueError("global_cls of an empty token set")
    return T.mean(x, axis=-2)


def casa_align(p: Params, V: Tensor, src: Tensor, eps: float = 1e-5, return_attention: bool = False):
    """Cross-attention from query features ``V`` onto ``src`` features.

    q = LN(V) W_q, k = LN(src) W_k, v = LN(src) W_v,
    out = zeta(softmax(q k^T / sqrt(C)) v).
    """
    V, src = T.as_tensor(V), T.as_tensor(src)
    if V.shape[-2] == 0:
        raise ValueError("empty query set")
    c = p["w_q"].shape[1]
    if p["w_k"].shape[1] != c or p["w_v"].shape[1] != c:
        raise ValueError("projection dims disagree")
    q = norm(p, "ln_q", V, eps) @ p["w_q"]
    kv = norm(p, "ln_kv", src, eps)
    k = kv @ p["w_k"]
    v = kv @ p["w_v"]
    att = T.softmax((q @ T.transpose(k)) * (1.0 / math.sqrt(c)), axis=-1)
    out = linear(p, "zeta", att @ v)
    return (out, att) if return_attention else out


@dataclass
class ForwardBundle:
    """Everything the losses need from one step, keyed by view.

    View names: ``uQ`` / ``rK`` (masked, online) and ``wQ`` / ``vK``
    (augmented, target).
    """

    V: dict[str, Tensor] = field(default_factory=dict)
    H: dict[str, Tensor] = field(default_factory=dict)
    Y: dict[str, Tensor] = field(default_factory=dict)
    recon: dict[str, Tensor] = field(default_factory=dict)
    S: dict[str, Tensor] = field(default_factory=dict)
    T: dict[str, Tensor] = field(default_factory=dict)
    cls: dict[str, Tensor] = field(default_factory=dict)


# masked view -> paired intact view of the same crop
INTRA_PAIRS = {"uQ": "wQ", "rK": "vK"}
# masked view -> intact view of the other crop
INTER_PAIRS = {"uQ": "vK", "rK": "wQ"}


def alice_forward(
    state: ModelState,
    tokens: dict[str, np.ndarray],
    masks: dict[str, list[MaskSpec]],
    use_casa: bool = True,
    frozen_teacher: ForwardBundle | None = None,
) -> ForwardBundle:
    """Forward all four views.

    ``tokens`` maps view name to a ``(B, N, P)`` token array; ``masks`` holds
    the masks of the two masked views.  ``frozen_teacher`` reuses the
    teacher-side outputs (Y, intact-view [cls], T) of an earlier bundle; a
    finite-difference check needs this because the teacher embedding depends
    on the online encoder through its query, a dependence the stop-gradient
    deliberately hides from the analytic gradient.
    """
    fb = ForwardBundle()
    for view in ("uQ", "rK"):
        V = encode_visible(state, tokens[view], masks[view])
        feats, recon = decode_full(state, V, masks[view])
        fb.V[view] = V
        fb.recon[view] = recon
        fb.H[view] = project_head(state.phi, feats)
        fb.cls[view] = global_cls(fb.H[view])
    if frozen_teacher is not None:
        fb.Y = dict(frozen_teacher.Y)
        fb.T = dict(frozen_teacher.T)
        for view in ("wQ", "vK"):
            fb.cls[view] = frozen_teacher.cls[view]
    else:
        with no_grad():
            for view in ("wQ", "vK"):
                fb.Y[view] = project_head(state.psi, encode_target(state, tokens[view]))
                fb.cls[view] = global_cls(fb.Y[view])
    if use_casa:
        for mv, iv in INTRA_PAIRS.items():
            fb.S[mv] = casa_align(state.casa, fb.V[mv], fb.H[mv], state.config.ln_eps)
            if frozen_teacher is None:
                with no_grad():
                    fb.T[iv] = casa_align(state.teacher_casa(), fb.V[mv].detach(), fb.Y[iv], state.config.ln_eps)
    return fb

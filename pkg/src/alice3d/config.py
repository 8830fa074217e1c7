"""Run configuration: dataclasses, presets and the flat ``key = value`` file format.

Grammar, one assignment per line::

    # comment
    section.field = value

``section`` is one of ``data``, ``model``, ``optim``, ``train``, ``finetune``,
``eval``; the special key ``preset`` selects the base preset.  Values are
ints, floats, ``true``/``false``, bare strings, or comma-separated integer
tuples.  Unknown sections or fields are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .volume import PatchGrid


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    phantom_extents: tuple[int, int, int] = (64, 64, 32)
    crop_extents: tuple[int, int, int] = (32, 32, 16)
    patch_extents: tuple[int, int, int] = (8, 8, 16)
    n_organs: int = 4
    n_anatomies: int = 8
    n_subjects: int = 4
    anatomy_base: int = 1000
    jitter: int = 2
    zoom_range: float = 0.1

    def grid(self) -> PatchGrid:
        return PatchGrid(tuple(self.crop_extents), tuple(self.patch_extents))

    def anatomy_seeds(self) -> list[int]:
        return [self.anatomy_base + i for i in range(self.n_anatomies)]


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 2000
    min_lr: float = 1e-5
    eps: float = 1e-8
    grad_clip: float = 3.0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps must be below total_steps")


@dataclass
class TrainerConfig:
    batch_size: int = 4
    mask_ratio: float = 0.75
    ema_momentum: float = 0.996
    ema_schedule: str = "cosine"  # or "constant"
    use_ldv: bool = True
    use_casa: bool = True
    loss_kind: str = "cosine"  # or "infonce"
    temperature: float = 0.2
    w_recon: float = 1.0
    w_inter: float = 1.0
    w_intra: float = 1.0
    seed: int = 0
    checkpoint_every: int = 500
    term_grad_norms: bool = False

    def __post_init__(self):
        if self.loss_kind not in ("cosine", "infonce"):
            raise ConfigError(f"loss_kind must be cosine or infonce, got {self.loss_kind!r}")
        if self.ema_schedule not in ("cosine", "constant"):
            raise ConfigError("ema_schedule must be cosine or constant")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must be in [0, 1)")
        if self.loss_kind == "infonce" and self.batch_size < 2:
            raise ConfigError("infonce needs batch_size >= 2")


@dataclass
class FinetuneConfig:
    task: str = "seg"  # or "cls"
    init: str = "random"  # "random" or "checkpoint"
    checkpoint: str = ""
    steps: int = 400
    lr: float = 5e-3
    weight_decay: float = 0.01
    batch_size: int = 4
    n_train: int = 4
    n_test: int = 8
    anatomy_base: int = 50000
    head_hidden: int = 16
    seed: int = 0
    n_seeds: int = 5


@dataclass
class EvalConfig:
    pred_path: str = ""
    label_path: str = ""
    nsd_tolerance: float = 1.0
    ablation_pretrain_steps: int = 300
    ablation_flags: str = "use_ldv,use_casa,loss_kind"


@dataclass
class RunConfig:
    preset: str = "desk"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainerConfig = field(default_factory=TrainerConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("data", "model", "optim", "train", "finetune", "eval")

    def resolve(self) -> "RunConfig":
        """Derive the token geometry of the model from the data section."""
        grid = self.data.grid()
        self.model = dataclasses.replace(self.model, n_tokens=grid.n_tokens, patch_voxels=grid.patch_voxels)
        return self

    def dumps(self) -> str:
        lines = [f"preset = {self.preset}"]
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            for f in dataclasses.fields(obj):
                lines.append(f"{sec}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def pretrain_hash(self) -> str:
        """Hash of everything that determines a pretraining trajectory."""
        keep = [
            ln
            for ln in self.dumps().splitlines()
            if ln.split(".", 1)[0] in ("data", "model", "optim", "train") and not ln.startswith("train.checkpoint_every")
        ]
        return hashlib.sha256("\n".join(keep).encode()).hexdigest()


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(raw: str, hint, key: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if origin is tuple:
            return tuple(int(x) for x in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unsupported field type for {key}")


def preset(name: str) -> RunConfig:
    if name == "desk":
        return RunConfig(preset="desk").resolve()
    if name == "micro":
        cfg = RunConfig(
            preset="micro",
            data=DataConfig(crop_extents=(16, 16, 16), patch_extents=(8, 8, 8), phantom_extents=(48, 48, 32)),
            model=ModelConfig(embed_dim=16, depth=1, heads=2, decoder_depth=1, head_hidden=32, head_bottleneck=8),
            optim=OptimizerConfig(total_steps=40, warmup_steps=5),
            train=TrainerConfig(batch_size=2, checkpoint_every=20),
            finetune=FinetuneConfig(steps=20, n_train=2, n_test=2, n_seeds=2),
            eval=EvalConfig(ablation_pretrain_steps=10),
        )
        return cfg.resolve()
    if name == "gradcheck":
        # four tokens, D=8, one block: small enough for element-wise finite differences
        cfg = RunConfig(
            preset="gradcheck",
            data=DataConfig(crop_extents=(4, 4, 2), patch_extents=(2, 2, 2), phantom_extents=(48, 48, 32), jitter=1),
            model=ModelConfig(embed_dim=8, depth=1, heads=2, decoder_depth=1, decoder_heads=2, head_hidden=16, head_bottleneck=8),
            optim=OptimizerConfig(total_steps=20, warmup_steps=2),
            train=TrainerConfig(batch_size=2),
        )
        return cfg.resolve()
    if name == "paper-scale":
        cfg = RunConfig(
            preset="paper-scale",
            data=DataConfig(phantom_extents=(320, 320, 128), crop_extents=(192, 192, 64), patch_extents=(16, 16, 16), n_organs=8),
            model=ModelConfig(embed_dim=768, depth=12, heads=12, mlp_ratio=4.0, decoder_dim=384, decoder_depth=2, decoder_heads=12, head_hidden=2048, head_bottleneck=256),
            optim=OptimizerConfig(peak_lr=5e-5, total_steps=100_000, warmup_steps=5_000, min_lr=1e-6),
            train=TrainerConfig(batch_size=8, checkpoint_every=10_000),
        )
        return cfg.resolve()
    raise ConfigError(f"unknown preset {name!r}")


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` lines on top of ``base`` (or the preset they name)."""
    entries: list[tuple[int, str, str]] = []
    preset_name = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            preset_name = value
            continue
        entries.append((lineno, key, value))

    cfg = base if base is not None else preset(preset_name or "desk")
    if base is not None and preset_name is not None:
        cfg = preset(preset_name)
    updates: dict[str, dict] = {}
    for lineno, key, value in entries:
        if "." not in key:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        sec, name = key.split(".", 1)
        if sec not in RunConfig.SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {sec!r}")
        section_cls = type(getattr(cfg, sec))
        hints = typing.get_type_hints(section_cls)
        if name not in {f.name for f in dataclasses.fields(section_cls)}:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates.setdefault(sec, {})[name] = _coerce(value, hints[name], key)
    try:
        for sec, vals in updates.items():
            setattr(cfg, sec, dataclasses.replace(getattr(cfg, sec), **vals))
        return cfg.resolve()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None, preset_name: str | None = None) -> RunConfig:
    base = preset(preset_name) if preset_name else None
    if path is None:
        return base if base is not None else preset("desk")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return parse_config(p.read_text(), base)


def configure_determinism() -> None:
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)

"""Command-line entry point.

Every command writes its resolved configuration to ``<out>/config.resolved``;
feeding that file back through ``--config`` reproduces the run.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 artifact mismatch (bad checkpoint or volume file).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig, configure_determinism, load_config, preset
from .evaluation import (
    EvalReport,
    ablation_matrix,
    finetune_cls,
    finetune_seg,
    flag_grid,
    segmentation_report,
    write_ablation_csv,
)
from .gradcheck import grad_check
from .model import alice_forward, init_model
from .trainer import ArtifactMismatch, compute_loss, make_view_bundle, pretrain_run
from .volume import VolumeFormatError, generate_phantom, load_volume, save_volume

log = logging.getLogger("alice3d")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ARTIFACT = 0, 2, 3, 4


def _apply_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=seed)
        cfg.finetune = dataclasses.replace(cfg.finetune, seed=seed)
    return cfg


def _prepare(args) -> tuple[RunConfig, Path]:
    cfg = _apply_seed(load_config(args.config, args.preset), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.dumps())
    return cfg, out


def cmd_pretrain(args) -> int:
    cfg, out = _prepare(args)
    res = pretrain_run(cfg, out_dir=out, resume=args.resume, progress=True)
    last = res.reports[-1] if res.reports else None
    if last is not None:
        log.info("finished step %d in %.1fs, total loss %.4f", last.step, res.seconds, last.total)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, out = _prepare(args)
    ft = cfg.finetune
    ckpt = ft.checkpoint or None
    if ft.init == "checkpoint" and ckpt and not Path(ckpt).is_file():
        raise ArtifactMismatch(f"checkpoint {ckpt} not found")
    run = finetune_cls if ft.task == "cls" else finetune_seg
    if ft.task not in ("seg", "cls"):
        raise ConfigError(f"finetune.task must be seg or cls, got {ft.task!r}")
    report = run(cfg, init=ft.init, checkpoint=ckpt)
    (out / "eval.json").write_text(report.to_json())
    log.info("mean DSC %s  AUC %s", report.mean_dsc, report.auc)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, out = _prepare(args)
    ev = cfg.eval
    if not ev.pred_path or not ev.label_path:
        raise ConfigError("eval.pred_path and eval.label_path are required")
    for p in (ev.pred_path, ev.label_path):
        if not Path(p).is_file():
            raise ArtifactMismatch(f"volume file {p} not found")
    pred, truth = load_volume(ev.pred_path), load_volume(ev.label_path)
    a = pred.labels if pred.labels is not None else np.rint(pred.intensity).astype(np.uint8)
    b = truth.labels if truth.labels is not None else np.rint(truth.intensity).astype(np.uint8)
    if a.shape != b.shape:
        raise ArtifactMismatch(f"extents differ: {a.shape} vs {b.shape}")
    n_classes = max(int(a.max()), int(b.max()), 1)
    report = segmentation_report([a], [b], n_classes, ev.nsd_tolerance, seed=cfg.finetune.seed)
    (out / "eval.json").write_text(report.to_json())
    log.info("mean DSC %.4f  mean NSD %.4f", report.mean_dsc, report.mean_nsd)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, out = _prepare(args)
    names = [n.strip() for n in cfg.eval.ablation_flags.split(",") if n.strip()]
    try:
        grid = flag_grid(names)
    except KeyError as exc:
        raise ConfigError(f"unknown ablation flag {exc}") from exc
    rows = ablation_matrix(cfg, grid)
    write_ablation_csv(rows, out / "ablation.csv")
    for r in rows:
        log.info("%s  DSC %.4f +- %.4f", r.flags, r.mean, r.std)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    """Finite-difference check of the full loss graph on the gradcheck geometry."""
    cfg = _apply_seed(load_config(args.config, args.preset or "gradcheck"), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.dumps())
    seeds = [cfg.train.seed + i for i in range(args.n_seeds)]
    results = []
    ok = True
    for s in seeds:
        run = dataclasses.replace(cfg.train, seed=s)
        state = init_model(cfg.model, s)
        bundle = make_view_bundle(cfg.data, run, step=1)
        frozen = alice_forward(state, bundle.tokens, bundle.masks, use_casa=run.use_casa)
        rep = grad_check(
            lambda: compute_loss(state, bundle, run, frozen_teacher=frozen)[0],
            list(state.online_params().values()),
            eps=args.eps,
            tol=args.tol,
        )
        results.append({"seed": s, "n_checked": rep.n_checked, "max_rel_error": rep.max_rel_error, "n_flagged": len(rep.flagged)})
        log.info("seed %d: %d elements, max rel error %.3e, %d flagged", s, rep.n_checked, rep.max_rel_error, len(rep.flagged))
        ok &= rep.passed
    (out / "gradcheck.json").write_text(json.dumps(results, indent=2))
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_generate(args) -> int:
    cfg, out = _prepare(args)
    d = cfg.data
    for i, anat in enumerate(d.anatomy_seeds()[: args.count]):
        save_volume(generate_phantom(anat, d.phantom_extents, d.n_organs, deform_seed=i), out / f"phantom-{anat}.avol")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "generate": cmd_generate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alice3d", description="Masked modelling with inter/intra-volume alignment on synthetic phantoms.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--preset", help="base preset: desk, micro, gradcheck, paper-scale")
        p.add_argument("--seed", type=int, help="overrides train.seed and finetune.seed")
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--deterministic", action="store_true", help="pin BLAS to one thread")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "pretrain":
            p.add_argument("--resume", help="checkpoint to continue from")
        if name == "gradcheck":
            p.add_argument("--n-seeds", type=int, default=5)
            p.add_argument("--eps", type=float, default=1e-5)
            p.add_argument("--tol", type=float, default=1e-4)
        if name == "generate":
            p.add_argument("--count", type=int, default=2)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    if args.deterministic:
        configure_determinism()
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except T.NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ArtifactMismatch, VolumeFormatError) as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())

import csv
import json

import numpy as np
import pytest

from alice3d.cli import main
from alice3d.config import parse_config
from alice3d.volume import Volume, generate_phantom, save_volume


def _write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


MICRO = "preset = micro\noptim.total_steps = 6\noptim.warmup_steps = 2\ntrain.checkpoint_every = 3\n"


def test_missing_config_exits_2(tmp_path):
    assert main(["pretrain", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == 2


def test_bad_key_exits_2(tmp_path):
    cfg = _write(tmp_path, "train.nonsense = 1\n")
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_pretrain_artifacts_and_determinism(tmp_path):
    cfg = _write(tmp_path, MICRO)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["pretrain", "--config", cfg, "--out", str(a), "--deterministic"]) == 0
    assert main(["pretrain", "--config", cfg, "--out", str(b), "--deterministic"]) == 0
    assert (a / "losses.csv").read_bytes() == (b / "losses.csv").read_bytes()
    assert sorted(p.name for p in a.iterdir()) == ["checkpoint-3.bin", "checkpoint-6.bin", "config.resolved", "losses.csv"]
    with open(a / "losses.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 6


def test_snapshot_reproduces_run(tmp_path):
    cfg = _write(tmp_path, MICRO)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["pretrain", "--config", cfg, "--seed", "4", "--out", str(a)]) == 0
    assert main(["pretrain", "--config", str(a / "config.resolved"), "--out", str(b)]) == 0
    assert (a / "losses.csv").read_bytes() == (b / "losses.csv").read_bytes()
    assert parse_config((a / "config.resolved").read_text()).train.seed == 4


def test_resume_with_other_config_exits_4(tmp_path):
    cfg = _write(tmp_path, MICRO)
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    other = _write(tmp_path, MICRO + "optim.peak_lr = 0.5\n", "other.cfg")
    code = main(["pretrain", "--config", other, "--out", str(tmp_path / "b"), "--resume", str(tmp_path / "a" / "checkpoint-3.bin")])
    assert code == 4


def test_finetune_with_incompatible_checkpoint_exits_4(tmp_path):
    cfg = _write(tmp_path, MICRO)
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    ft = _write(
        tmp_path,
        f"preset = micro\nmodel.embed_dim = 8\nfinetune.init = checkpoint\nfinetune.checkpoint = {tmp_path / 'a' / 'checkpoint-6.bin'}\n",
        "ft.cfg",
    )
    assert main(["finetune", "--config", ft, "--out", str(tmp_path / "f")]) == 4


def test_finetune_writes_eval_json(tmp_path):
    cfg = _write(tmp_path, MICRO)
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    ft = _write(
        tmp_path,
        f"preset = micro\nfinetune.steps = 4\nfinetune.init = checkpoint\nfinetune.checkpoint = {tmp_path / 'a' / 'checkpoint-6.bin'}\n",
        "ft.cfg",
    )
    assert main(["finetune", "--config", ft, "--out", str(tmp_path / "f")]) == 0
    rep = json.loads((tmp_path / "f" / "eval.json").read_text())
    assert rep["init"] == "pretrained" and 0.0 <= rep["mean_dsc"] <= 1.0


def test_eval_identical_volumes(tmp_path):
    v = generate_phantom(3, (32, 32, 16), 3)
    save_volume(v, tmp_path / "p.avol")
    save_volume(v, tmp_path / "t.avol")
    cfg = _write(tmp_path, f"eval.pred_path = {tmp_path / 'p.avol'}\neval.label_path = {tmp_path / 't.avol'}\n")
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "e")]) == 0
    rep = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert rep["mean_dsc"] == 1.0 and rep["mean_nsd"] == 1.0


def test_eval_corrupt_volume_exits_4(tmp_path):
    (tmp_path / "p.avol").write_bytes(b"garbage")
    save_volume(Volume(np.zeros((16, 16, 16)), np.zeros((16, 16, 16), np.uint8)), tmp_path / "t.avol")
    cfg = _write(tmp_path, f"eval.pred_path = {tmp_path / 'p.avol'}\neval.label_path = {tmp_path / 't.avol'}\n")
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "e")]) == 4


def test_gradcheck_exits_0(tmp_path):
    assert main(["gradcheck", "--n-seeds", "1", "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "gradcheck.json").read_text())
    assert res[0]["n_flagged"] == 0


def test_ablate_full_grid_has_8_rows(tmp_path):
    cfg = _write(
        tmp_path,
        "preset = micro\neval.ablation_pretrain_steps = 2\nfinetune.steps = 2\nfinetune.n_seeds = 1\nfinetune.n_test = 1\n",
    )
    assert main(["ablate", "--config", cfg, "--out", str(tmp_path / "ab")]) == 0
    with open(tmp_path / "ab" / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    assert {r["pretrain_steps"] for r in rows} == {"2"} and {r["seeds"] for r in rows} == {"0"}


def test_generate_writes_volumes(tmp_path):
    assert main(["generate", "--preset", "micro", "--count", "2", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("phantom-*.avol"))) == 2

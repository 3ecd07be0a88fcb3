import json

import numpy as np
import pytest
import torch

from contrafeat import cli
from contrafeat import experiments as ex
from contrafeat.config import SEED_ENV, RunConfig
from contrafeat.experiments import load_basis, read_ppm
from contrafeat.toyworld import ToyWorld
from contrafeat.trainer import NumericalError, sample_basis

FAST = ["--pca-samples", "500", "--steps", "4", "--log-every", "2"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    report = None
    if "---BEGIN REPORT---" in out.out:
        body = out.out.split("---BEGIN REPORT---")[1].split("---END REPORT---")[0]
        report = json.loads(body)
    return code, report, out.err


def test_pca_command(tmp_path, capsys):
    code, report, _ = run(capsys, "pca", "--pca-samples", 2, "--output-dir", tmp_path)
    assert code == 0 and report["sample_count"] == 2
    code, report, _ = run(capsys, "pca", "--pca-samples", 20000, "--output-dir", tmp_path, "--seed", 5)
    assert code == 0
    assert report["top_k_explained"] > 0.99
    assert report["constructed_top_k_explained"] > 0.99
    world = ToyWorld(RunConfig().world_spec())
    again = sample_basis(world, 20000, torch.Generator().manual_seed(5))
    stored = load_basis(tmp_path / "pca")
    assert stored.components.tobytes() == again.components.tobytes()
    assert stored.eigenvalues.tobytes() == again.eigenvalues.tobytes()


def test_config_errors_exit_2(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"stepz": 3}))
    assert run(capsys, "pca", "--config", tmp_path / "bad.json")[0] == 2
    (tmp_path / "bad.json").write_text("[1, 2")
    assert run(capsys, "pca", "--config", tmp_path / "bad.json")[0] == 2
    assert run(capsys, "train", "--directions", 1)[0] == 2
    assert run(capsys, "train", "--frozen-directions", tmp_path / "nothing.json", *FAST,
               "--output-dir", tmp_path / "o")[0] == 4


def test_env_seed_override(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "11")
    code, _, _ = run(capsys, "train", *FAST, "--output-dir", tmp_path)
    assert code == 0
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 11
    monkeypatch.setenv(SEED_ENV, "x")
    assert run(capsys, "train", *FAST, "--output-dir", tmp_path)[0] == 2


def test_missing_checkpoint_exit_4(tmp_path, capsys):
    assert run(capsys, "eval", "--output-dir", tmp_path)[0] == 4
    assert run(capsys, "eval", "--checkpoint", tmp_path / "none")[0] == 4


def test_numerical_exit_3(tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise NumericalError("non-finite loss at step 3 (d=1, mode=l2mask, variant=bi)")
    monkeypatch.setattr(ex, "run_train", boom)
    code, _, err = run(capsys, "train", "--output-dir", tmp_path)
    assert code == 3 and "step 3" in err


def test_train_eval_traverse_roundtrip(tmp_path, capsys):
    code, report, _ = run(capsys, "train", *FAST, "--output-dir", tmp_path, "--variant", "pt", "--mode", "pooled")
    assert code == 0 and report["steps"] == 4
    code, _, _ = run(capsys, "train", *FAST[:2], "--steps", 6, "--log-every", 2, "--output-dir", tmp_path,
                     "--variant", "pt", "--mode", "pooled", "--resume")
    assert code == 0
    assert len((tmp_path / "loss.csv").read_text().splitlines()) == 4
    code, report, _ = run(capsys, "eval", "--output-dir", tmp_path)
    assert code == 0
    assert json.loads((tmp_path / "eval.json").read_text()) == report
    assert set(report) == {"S_disen", "N_discov", "A", "dead_rows"}
    code, report, _ = run(capsys, "traverse", "--output-dir", tmp_path, "--traverse-steps", 5)
    assert code == 0 and len(report["files"]) == 6
    first = [open(f, "rb").read() for f in report["files"]]
    run(capsys, "traverse", "--output-dir", tmp_path, "--traverse-steps", 5)
    assert first == [open(f, "rb").read() for f in report["files"]]
    pixels = read_ppm(report["files"][0])
    assert pixels.shape == (32, 5 * 32, 3)


def test_eval_oracle_and_random_baseline(tmp_path, capsys):
    code, report, _ = run(capsys, "eval", "--oracle-directions", "--random-baseline", "--output-dir", tmp_path)
    assert code == 0
    assert report["S_disen"] == pytest.approx(1.0, abs=1e-9) and report["N_discov"] == 6
    assert report["random_baseline"]["S_disen"] < report["S_disen"]
    assert report["random_baseline"]["runs"] == 5


def test_traverse_strips(tmp_path, capsys):
    code, report, _ = run(capsys, "traverse", "--oracle-directions", "--strength-range", 0, 0, "--traverse-steps", 3,
                          "--output-dir", tmp_path)
    assert code == 0
    strip = read_ppm(report["files"][2])
    cols = np.split(strip, 3, axis=1)
    assert all(np.array_equal(c, cols[0]) for c in cols)
    code, report, _ = run(capsys, "traverse", "--oracle-directions", "--strength-range", -40, 40, "--traverse-steps", 5,
                          "--output-dir", tmp_path, "--png")
    assert code == 0 and report["png"].endswith("traverse.png")
    cfg = RunConfig()
    world = ToyWorld(cfg.world_spec())
    base = world.sample_codes(1, torch.Generator().manual_seed(cfg.seed))[0]
    center = np.split(read_ppm(report["files"][3]), 5, axis=1)[2]
    assert np.array_equal(center, ex.to_bytes(world.render(base)))
    assert not np.array_equal(np.split(read_ppm(report["files"][3]), 5, axis=1)[0], center)


def test_ppm_mapping():
    img = torch.tensor([-2.0, -1.0, 0.0, 1.0, 2.0]).reshape(1, 1, 5).expand(3, 1, 5)
    assert ex.to_bytes(img)[0, :, 0].tolist() == [0, 0, 128, 255, 255]


def test_mask_experiment_command(tmp_path, capsys):
    code, report, _ = run(capsys, "mask-experiment", "--mask-samples", 20, "--output-dir", tmp_path)
    assert code == 0 and report["pairs"] == 15
    assert set(report["table"]) == {"l2mask", "pooled", "nofoc"}
    assert (tmp_path / "mask_experiment.json").exists()


def test_mask_experiment_pair_order_matters():
    cfg = RunConfig(seed=3)
    ab = ex.mask_experiment(cfg, samples=100, modes=("l2mask",), pairs=[(0, 4)])["table"]["l2mask"]["pure"]
    ab2 = ex.mask_experiment(cfg, samples=100, modes=("l2mask",), pairs=[(0, 4)])["table"]["l2mask"]["pure"]
    ba = ex.mask_experiment(cfg, samples=100, modes=("l2mask",), pairs=[(4, 0)])["table"]["l2mask"]["pure"]
    assert ab == ab2
    # the consistency term only sees a, so swapping a and b is not a symmetry
    assert abs(ab - ba) > 1e-3


def test_distill_command(tmp_path, capsys):
    code, report, _ = run(capsys, "distill", "--oracle-directions", "--output-dir", tmp_path,
                          "--distill-pairs", 64, "--vae-steps", 3, "--vae-batch", 8, "--metric-samples", 1000,
                          "--baseline")
    assert code == 0
    assert {"MIG", "FVM"} <= set(report) and {"MIG", "FVM"} <= set(report["baseline"])
    saved = json.loads((tmp_path / "distill" / "metrics.json").read_text())
    assert saved == report
    assert (tmp_path / "distill" / "pairs" / "manifest.json").exists()


def test_strength_zero_distill_is_chance(tmp_path):
    cfg = RunConfig(distill_pairs=256, distill_strength=0.0, vae_steps=30, vae_batch=16, metric_samples=2000)
    world = ToyWorld(cfg.world_spec())
    ds = ex.build_pair_dataset(world.oracle_modifications(), world, 256, 0.0, torch.Generator().manual_seed(0))
    assert torch.equal(ds.images_a, ds.images_b)
    report = ex.distill_metrics(ds, world, 6, cfg)
    assert report["MIG"] < 0.1

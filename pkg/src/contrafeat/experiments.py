"""Experiment drivers behind the CLI commands; each returns a JSON-ready report."""
from __future__ import annotations

import itertools
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .bundle import load_bundle, save_bundle
from .config import RunConfig
from .groupvae import (PairDataset, build_pair_dataset, encode_factors, train_group_vae,
                       wide_factor_sampler)
from .latent import PcaBasis
from .losses import MODES, contrast
from .metrics import attribute_change_matrix, fvm, mig
from .toyworld import ToyWorld
from .trainer import load_checkpoint, modifications_from_checkpoint, sample_basis, train

log = logging.getLogger(__name__)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def basis_arrays(basis: PcaBasis) -> dict:
    return {"components": basis.components, "eigenvalues": basis.eigenvalues, "mean": basis.mean}


def load_basis(path) -> PcaBasis:
    arrays = load_bundle(path)
    meta = json.loads((Path(path) / "basis.json").read_text())
    return PcaBasis(components=arrays["components"], eigenvalues=arrays["eigenvalues"],
                    mean=arrays["mean"], sample_count=int(meta["sample_count"]))


# -- pca ---------------------------------------------------------------------------

def run_pca(cfg: RunConfig, out_dir) -> dict:
    world = ToyWorld(cfg.world_spec())
    basis = sample_basis(world, cfg.pca_samples, torch.Generator().manual_seed(cfg.seed))
    ratio = basis.explained_variance_ratio()
    spectrum = world.singular_values ** 2
    report = {
        "sample_count": basis.sample_count,
        "eigenvalues": basis.eigenvalues.astype(float).tolist(),
        "explained_variance_ratio": ratio.astype(float).tolist(),
        "top_k_explained": float(ratio[:cfg.subspace_k].sum()),
        "constructed_spectrum": spectrum.tolist(),
        "constructed_top_k_explained": float(spectrum[:cfg.subspace_k].sum() / spectrum.sum()),
    }
    out = Path(out_dir) / "pca"
    save_bundle(out, basis_arrays(basis), {"basis.json": {"sample_count": basis.sample_count}})
    write_json(Path(out_dir) / "pca_report.json", report)
    return report


# -- train / eval --------------------------------------------------------------------

def run_train(cfg: RunConfig, out_dir, resume: bool = False) -> dict:
    out = Path(out_dir)
    state = None
    if resume and (out / "checkpoint" / "manifest.json").exists():
        state = load_checkpoint(out / "checkpoint", cfg)
    state = train(cfg, out_dir=out, state=state)
    last = state.history[-1] if state.history else None
    return {"steps": state.step, "final": dict(zip(("step", "loss", "cons", "orth", "div"), last)) if last else None,
            "checkpoint": str(out / "checkpoint")}


def evaluate_modifications(mods: torch.Tensor, world: ToyWorld, samples: int, seed: int) -> dict:
    A = attribute_change_matrix(mods, world, samples, torch.Generator().manual_seed(seed))
    return A.report()


def run_eval(cfg: RunConfig, checkpoint=None, oracle: bool = False, random_baseline: bool = False) -> dict:
    world = ToyWorld(cfg.world_spec())
    if oracle:
        mods = world.to(torch.float64).oracle_modifications(cfg.strength)
    else:
        mods = modifications_from_checkpoint(checkpoint, cfg.strength)
    report = evaluate_modifications(mods, world, cfg.eval_samples, cfg.seed)
    if random_baseline:
        report["random_baseline"] = random_baseline_scores(cfg, world)
    return report


def random_baseline_scores(cfg: RunConfig, world: ToyWorld) -> dict:
    """S_disen / N_discov of random unit directions, averaged over ``eval_runs`` seeds."""
    runs = []
    for r in range(cfg.eval_runs):
        g = torch.Generator().manual_seed(cfg.seed + 1000 + r)
        rep = evaluate_modifications(random_modifications(world, cfg.directions, g), world, cfg.eval_samples,
                                     cfg.seed + r)
        runs.append((rep["S_disen"], rep["N_discov"]))
    s, n = np.mean(runs, axis=0)
    return {"runs": cfg.eval_runs, "S_disen": float(s), "N_discov": float(n)}


def random_modifications(world: ToyWorld, m: int, generator: torch.Generator) -> torch.Tensor:
    """Unit W0 directions applied uniformly to every layer."""
    dirs = torch.randn(m, world.n, generator=generator, dtype=torch.float64)
    dirs = dirs / dirs.norm(dim=1, keepdim=True)
    att = torch.full((m, world.k_layers), 1.0 / world.k_layers, dtype=torch.float64)
    return att.unsqueeze(-1) * dirs.unsqueeze(-2)


# -- traversal grids -------------------------------------------------------------

def to_bytes(img: torch.Tensor) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8, linear map with clamping."""
    arr = img.detach().double().numpy().transpose(1, 2, 0)
    return np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_ppm(path, pixels: np.ndarray) -> Path:
    h, w, _ = pixels.shape
    path = Path(path)
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels).tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def traversal_strips(mods: torch.Tensor, world: ToyWorld, steps: int, lo: float, hi: float,
                     base: torch.Tensor) -> list[np.ndarray]:
    """One (H, steps*W, 3) uint8 strip per modification around the base code (K, n)."""
    strengths = torch.linspace(lo, hi, steps, dtype=torch.float64) if steps > 1 else torch.tensor([lo], dtype=torch.float64)
    strips = []
    with torch.no_grad():
        for mod in mods:
            codes = base.unsqueeze(0) + strengths.to(world.dtype)[:, None, None] * mod.to(world.dtype)
            imgs = world.render(codes)
            strips.append(np.concatenate([to_bytes(im) for im in imgs], axis=1))
    return strips


def run_traverse(cfg: RunConfig, out_dir, checkpoint=None, oracle: bool = False, steps: int | None = None,
                 strength_range: tuple[float, float] | None = None, png: bool = False) -> dict:
    world = ToyWorld(cfg.world_spec())
    mods = world.oracle_modifications() if oracle else modifications_from_checkpoint(checkpoint)
    steps = cfg.traverse_steps if steps is None else steps
    lo, hi = strength_range if strength_range is not None else (-cfg.traverse_strength, cfg.traverse_strength)
    base = world.sample_codes(1, torch.Generator().manual_seed(cfg.seed))[0]
    strips = traversal_strips(mods, world, steps, lo, hi, base)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [str(write_ppm(out / f"dir_{d}.ppm", strip)) for d, strip in enumerate(strips)]
    report = {"files": files, "steps": steps, "strength_range": [lo, hi]}
    if png:
        report["png"] = str(render_png(strips, out / "traverse.png", lo, hi))
    return report


def render_png(strips: list[np.ndarray], path, lo: float, hi: float) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(len(strips), 1, figsize=(8, 1.2 * len(strips)), squeeze=False)
    for d, (ax, strip) in enumerate(zip(axes[:, 0], strips)):
        ax.imshow(strip, interpolation="nearest")
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_ylabel(f"d={d}", rotation=0, labelpad=18, va="center")
    axes[-1, 0].set_xlabel(f"strength {lo:g} .. {hi:g}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


# -- mask experiment -------------------------------------------------------------

def _changes(world: ToyWorld, base_feats, z, mod):
    return [a - b for a, b in zip(world.features(z + mod), base_feats)]


def disentangle_score(f1a, f2a, f2b, mode: str, eps: float = 1e-8) -> float:
    """l_cons(z1->a, z2->a) + l_orth(z1->a, z2->b) from precomputed feature changes."""
    cons = -contrast(f1a, f2a, mode, eps).value.mean()
    orth = contrast(f1a, f2b, mode, eps).value.mean()
    return float(cons + orth)


def mask_experiment(cfg: RunConfig, samples: int | None = None, modes=MODES, chunk: int = 250,
                    pairs=None) -> dict:
    """Pure (a, b) versus mixed ((a+b)/sqrt2, (a-b)/sqrt2) oracle pairs for every mode.

    Pairs are unordered (a < b); the score contrasts a in the consistency term.
    """
    world = ToyWorld(cfg.world_spec())
    samples = cfg.mask_samples if samples is None else samples
    oracle = world.oracle_modifications(cfg.strength)
    g = torch.Generator().manual_seed(cfg.seed)
    sums = {mode: {"pure": 0.0, "mixed": 0.0} for mode in modes}
    pairs = list(itertools.combinations(range(world.p), 2)) if pairs is None else list(pairs)
    root2 = math.sqrt(2.0)
    with torch.no_grad():
        for a, b in pairs:
            settings = {"pure": (oracle[a], oracle[b]),
                        "mixed": ((oracle[a] + oracle[b]) / root2, (oracle[a] - oracle[b]) / root2)}
            done = 0
            while done < samples:
                n = min(chunk, samples - done)
                z1 = world.sample_codes(n, g)
                z2 = world.sample_codes(n, g)
                base1, base2 = world.features(z1), world.features(z2)
                for name, (mod_a, mod_b) in settings.items():
                    f1a = _changes(world, base1, z1, mod_a)
                    f2a = _changes(world, base2, z2, mod_a)
                    f2b = _changes(world, base2, z2, mod_b)
                    for mode in modes:
                        sums[mode][name] += n * disentangle_score(f1a, f2a, f2b, mode, cfg.eps_q)
                done += n
    total = samples * len(pairs)
    table = {mode: {k: v / total for k, v in row.items()} for mode, row in sums.items()}
    return {"pairs": len(pairs), "samples_per_pair": samples, "table": table}


# -- distillation ----------------------------------------------------------------

def run_distill(cfg: RunConfig, out_dir, checkpoint=None, oracle: bool = False, baseline: bool = False) -> dict:
    world = ToyWorld(cfg.world_spec())
    mods = world.oracle_modifications() if oracle else modifications_from_checkpoint(checkpoint)
    latent = cfg.vae_latent or mods.shape[0]
    g = torch.Generator().manual_seed(cfg.seed)
    dataset = build_pair_dataset(mods, world, cfg.distill_pairs, cfg.distill_strength, g)
    out = Path(out_dir)
    save_bundle(out / "pairs", dataset.arrays())
    report = distill_metrics(dataset, world, latent, cfg, out / "vae")
    if baseline:
        plain = distill_metrics(dataset, world, latent, cfg, out / "vae_plain", grouped=False)
        report["baseline"] = plain
    return report


def distill_metrics(dataset: PairDataset, world: ToyWorld, latent: int, cfg: RunConfig, save_to=None,
                    grouped: bool = True) -> dict:
    model, trace = train_group_vae(dataset, latent, cfg.vae_steps, cfg.vae_batch, cfg.vae_lr, cfg.seed, grouped,
                                   obs_std=cfg.vae_obs_std)
    rng = np.random.default_rng(cfg.seed)
    sampler = wide_factor_sampler(world)
    factors = sampler(cfg.metric_samples, rng)
    codes = encode_factors(model, world, factors)
    encode = lambda f: encode_factors(model, world, f)
    report = {"MIG": mig(codes, factors), "FVM": fvm(encode, sampler, world.p, generator=rng),
              "final_loss": float(np.mean(trace[-50:])) if trace else None}
    if save_to is not None:
        save_bundle(save_to, {k: v.detach().numpy() for k, v in model.state_dict().items()})
    return report

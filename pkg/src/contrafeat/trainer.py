"""Adam training of the navigator (and prototype bank) with checkpointing."""
from __future__ import annotations

import base64
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bundle import load_bundle, load_document, save_bundle
from .config import RunConfig
from .latent import PcaBasis, compute_pca
from .losses import Batch, LossBreakdown, total_loss
from .navigator import Navigator
from .toyworld import ToyWorld

log = logging.getLogger(__name__)

CSV_HEADER = ("step", "loss", "cons", "orth", "div")


class NumericalError(RuntimeError):
    pass


def float32_basis(basis: PcaBasis) -> PcaBasis:
    """Round a basis to float32 so in-memory and on-disk copies agree bitwise."""
    return PcaBasis(
        components=basis.components.astype(np.float32),
        eigenvalues=basis.eigenvalues.astype(np.float32),
        mean=basis.mean.astype(np.float32),
        sample_count=basis.sample_count,
    )


def sample_basis(world: ToyWorld, count: int, generator: torch.Generator) -> PcaBasis:
    w0 = world.map_latent(world.sample_z(count, generator))
    return float32_basis(compute_pca(w0.double().numpy()))


def load_directions(ref: str, basis: PcaBasis, m: int) -> np.ndarray:
    """Frozen W0 directions: ``"pca"`` for the top-m components, else a bundle/JSON path."""
    if ref == "pca":
        if m > basis.n:
            raise ValueError(f"cannot take {m} PCA components from a {basis.n}-dim basis")
        return basis.components[:, :m].T.astype(np.float64)
    path = Path(ref)
    if path.is_dir():
        arrays = load_bundle(path)
        key = "directions" if "directions" in arrays else None
        if key is None:
            raise ValueError(f"{path} has no 'directions' array")
        dirs = arrays[key].astype(np.float64)
    else:
        import json
        dirs = np.asarray(json.loads(path.read_text()), dtype=np.float64)
    if dirs.ndim != 2 or dirs.shape[0] != m:
        raise ValueError(f"frozen directions must have shape ({m}, n), got {dirs.shape}")
    return dirs


@dataclass
class TrainState:
    config: RunConfig
    world: ToyWorld
    basis: PcaBasis
    nav: Navigator
    bank: torch.nn.Parameter | None
    optimizer: torch.optim.Adam
    generator: torch.Generator
    step: int = 0
    history: list = field(default_factory=list)

    def trainable(self) -> list[torch.nn.Parameter]:
        return [p for group in self.optimizer.param_groups for p in group["params"]]


def _build_optimizer(cfg: RunConfig, nav: Navigator, bank) -> torch.optim.Adam:
    nav_params = []
    if cfg.frozen_directions is None:
        nav_params.append(nav.v_sub)
    if not cfg.freeze_attention:
        nav_params.append(nav.att_logits)
    for p in (nav.v_sub, nav.att_logits):
        p.requires_grad_(any(p is q for q in nav_params))
    groups = []
    if nav_params:
        groups.append({"params": nav_params, "lr": cfg.lr_navigator})
    if bank is not None:
        groups.append({"params": [bank], "lr": cfg.lr_prototypes})
    if not groups:
        # nothing to train (frozen directions + frozen attention, bi variant)
        groups.append({"params": [torch.nn.Parameter(torch.zeros(1))], "lr": cfg.lr_navigator})
    return torch.optim.Adam(groups, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)


def init_state(cfg: RunConfig, world: ToyWorld | None = None, basis: PcaBasis | None = None) -> TrainState:
    world = world or ToyWorld(cfg.world_spec())
    generator = torch.Generator().manual_seed(cfg.seed)
    if basis is None:
        basis = sample_basis(world, cfg.pca_samples, generator)
    nav = Navigator(cfg.directions, cfg.subspace_k, world.k_layers, basis, length=cfg.direction_length,
                    sigma=cfg.attention_sigma, generator=generator)
    if cfg.frozen_directions is not None:
        nav.set_directions(load_directions(cfg.frozen_directions, basis, cfg.directions))
    bank = None
    if cfg.variant == "pt":
        size = world.spec.image_size
        init = cfg.prototype_init_std * torch.randn(cfg.directions, 3, size, size, generator=generator,
                                                    dtype=torch.float64)
        bank = torch.nn.Parameter(init.to(torch.float32))
    optimizer = _build_optimizer(cfg, nav, bank)
    return TrainState(cfg, world, basis, nav, bank, optimizer, generator)


def sample_batch(state: TrainState) -> Batch:
    cfg, g = state.config, state.generator
    x = state.world.sample_codes(cfg.batch_size, g)
    y = state.world.sample_codes(cfg.batch_size, g)
    m = cfg.directions
    d = int(torch.randint(m, (1,), generator=g))
    other = int(torch.randint(m - 1, (1,), generator=g))
    d_prime = other if other < d else other + 1
    return Batch(x, y, d, d_prime)


def train_step(state: TrainState) -> LossBreakdown:
    cfg = state.config
    batch = sample_batch(state)
    parts = total_loss(batch, state.nav, state.world, cfg.loss_config(), state.bank, cfg.strength)
    if not torch.isfinite(parts.total):
        raise NumericalError(
            f"non-finite loss at step {state.step} (d={batch.d}, mode={cfg.mode}, variant={cfg.variant})")
    state.optimizer.zero_grad(set_to_none=True)
    if parts.total.requires_grad:
        parts.total.backward()
        torch.nn.utils.clip_grad_norm_(state.trainable(), cfg.grad_clip)
        state.optimizer.step()
    if cfg.frozen_directions is None:
        state.nav.reseed_degenerate(state.generator)
    state.step += 1
    return LossBreakdown(*(float(t.detach()) for t in parts))


def train(cfg: RunConfig, world: ToyWorld | None = None, out_dir=None,
          state: TrainState | None = None) -> TrainState:
    """Run (or continue) training up to ``cfg.steps`` total steps.

    Writes ``loss.csv`` and a final checkpoint under ``out_dir`` when given.
    """
    state = state or init_state(cfg, world)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "loss.csv"
        resuming = state.step > 0 and csv_path.exists()
        fh = open(csv_path, "a" if resuming else "w", newline="")
        writer = csv.writer(fh)
        if not resuming:
            writer.writerow(CSV_HEADER)
    window = []
    try:
        while state.step < cfg.steps:
            parts = train_step(state)
            window.append(parts)
            if state.step % cfg.log_every == 0 or state.step == cfg.steps:
                means = np.mean(np.asarray(window, dtype=np.float64), axis=0)
                row = [state.step] + [_fmt(v) for v in means]
                state.history.append(row)
                if writer is not None:
                    writer.writerow(row)
                log.debug("step %d loss %s", state.step, row[1])
                window = []
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(state, out / "checkpoint")
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_checkpoint(state, out / "checkpoint")
    return state


def _fmt(x: float) -> str:
    return repr(float(x))


# -- checkpoints --------------------------------------------------------------

def _adam_arrays(state: TrainState) -> tuple[dict, dict]:
    arrays, steps = {}, {}
    names = {id(state.nav.v_sub): "v_sub", id(state.nav.att_logits): "att_logits"}
    if state.bank is not None:
        names[id(state.bank)] = "prototypes"
    for p in state.trainable():
        name = names.get(id(p))
        st = state.optimizer.state.get(p)
        if name is None or not st:
            continue
        arrays[f"adam.{name}.exp_avg"] = st["exp_avg"].detach().numpy()
        arrays[f"adam.{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
        steps[name] = float(st["step"])
    return arrays, steps


def save_checkpoint(state: TrainState, path) -> Path:
    arrays = {
        "v_sub": state.nav.v_sub.detach().numpy(),
        "att_logits": state.nav.att_logits.detach().numpy(),
        "directions": state.nav.directions().detach().numpy(),
        "attention": state.nav.attention().detach().numpy(),
        "pca.components": state.basis.components,
        "pca.eigenvalues": state.basis.eigenvalues,
        "pca.mean": state.basis.mean,
    }
    if state.bank is not None:
        arrays["prototypes"] = state.bank.detach().numpy()
    adam, adam_steps = _adam_arrays(state)
    arrays.update(adam)
    rng = base64.b64encode(state.generator.get_state().numpy().tobytes()).decode("ascii")
    documents = {
        "config.json": state.config.to_dict(),
        "state.json": {"step": state.step, "pca_sample_count": state.basis.sample_count,
                       "rng_state": rng, "adam_steps": adam_steps},
    }
    return save_bundle(path, arrays, documents)


def load_checkpoint(path, config: RunConfig | None = None) -> TrainState:
    """Rebuild a training state; ``config`` (e.g. with more steps) overrides the echo."""
    arrays = load_bundle(path)
    meta = load_document(path, "state.json")
    cfg = config or RunConfig.from_dict(load_document(path, "config.json"))
    basis = PcaBasis(components=arrays["pca.components"], eigenvalues=arrays["pca.eigenvalues"],
                     mean=arrays["pca.mean"], sample_count=int(meta["pca_sample_count"]))
    state = init_state(cfg, basis=basis)
    with torch.no_grad():
        state.nav.v_sub.copy_(torch.from_numpy(arrays["v_sub"]))
        state.nav.att_logits.copy_(torch.from_numpy(arrays["att_logits"]))
        if state.bank is not None:
            state.bank.copy_(torch.from_numpy(arrays["prototypes"]))
    params = {"v_sub": state.nav.v_sub, "att_logits": state.nav.att_logits}
    if state.bank is not None:
        params["prototypes"] = state.bank
    trainable = {id(p) for p in state.trainable()}
    for name, step in meta.get("adam_steps", {}).items():
        p = params[name]
        if id(p) not in trainable:
            continue
        state.optimizer.state[p] = {
            "step": torch.tensor(step, dtype=torch.float32),
            "exp_avg": torch.from_numpy(arrays[f"adam.{name}.exp_avg"]),
            "exp_avg_sq": torch.from_numpy(arrays[f"adam.{name}.exp_avg_sq"]),
        }
    raw = np.frombuffer(base64.b64decode(meta["rng_state"]), dtype=np.uint8).copy()
    state.generator.set_state(torch.from_numpy(raw))
    state.step = int(meta["step"])
    return state


def modifications_from_checkpoint(path, strength: float = 1.0) -> torch.Tensor:
    """(m, K, n) modifications rebuilt from the stored directions and attention."""
    arrays = load_bundle(path)
    dirs = torch.from_numpy(arrays["directions"])
    att = torch.from_numpy(arrays["attention"])
    return strength * att.unsqueeze(-1) * dirs.unsqueeze(-2)


def loss_is_finite(x: float) -> bool:
    return math.isfinite(x)

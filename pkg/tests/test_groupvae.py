import numpy as np
import pytest
import torch

from contrafeat.bundle import load_bundle, save_bundle
from contrafeat.groupvae import (GroupVAE, PairDataset, build_pair_dataset, gaussian_kl, group_elbo,
                                 merge_posteriors, shared_mask_for, train_group_vae, vae_elbo)


def test_pair_dataset_strength_zero(world):
    ds = build_pair_dataset(world.oracle_modifications(), world, 13, 0.0, torch.Generator().manual_seed(0))
    assert torch.equal(ds.images_a, ds.images_b)
    counts = torch.bincount(ds.varied, minlength=6)
    assert int(counts.max() - counts.min()) <= 1


def test_pair_dataset_oracle_changes_one_factor(world64):
    ds = build_pair_dataset(world64.oracle_modifications(), world64, 12, 40.0, torch.Generator().manual_seed(1))
    diff = ds.factors_b - ds.factors_a
    expected = 40.0 * torch.nn.functional.one_hot(ds.varied, 6).to(diff.dtype)
    assert torch.allclose(diff, expected, atol=1e-9)


def test_pair_dataset_bundle_roundtrip(world, tmp_path):
    ds = build_pair_dataset(world.oracle_modifications(), world, 5, 10.0, torch.Generator().manual_seed(0))
    save_bundle(tmp_path / "pairs", ds.arrays())
    back = PairDataset.from_arrays(load_bundle(tmp_path / "pairs"))
    assert torch.equal(back.images_a, ds.images_a)
    assert torch.equal(back.varied, ds.varied)


def test_merge_examples():
    shared = torch.tensor([True, False])
    (ma, va), (mb, vb) = merge_posteriors(torch.tensor([0.0, 5.0]), torch.tensor([1.0, 1.0]),
                                          torch.tensor([2.0, -5.0]), torch.tensor([3.0, 2.0]), shared)
    assert ma.tolist() == [1.0, 5.0] and mb.tolist() == [1.0, -5.0]
    assert va.tolist() == [2.0, 1.0] and vb.tolist() == [2.0, 2.0]
    m, v = torch.tensor([0.3, -1.0]), torch.tensor([0.5, 2.0])
    (a, b), (c, d) = merge_posteriors(m, v, m, v, torch.tensor([True, True]))
    assert torch.equal(a, m) and torch.equal(b, v) and torch.equal(c, m) and torch.equal(d, v)
    with pytest.raises(ValueError):
        merge_posteriors(m, v, m, v, torch.tensor([True, True, True]))


def test_merge_idempotent_and_symmetric(rng):
    t = lambda *s: torch.as_tensor(rng.standard_normal(s))
    ma, mb = t(4, 3), t(4, 3)
    va, vb = t(4, 3).exp(), t(4, 3).exp()
    mask = shared_mask_for(torch.tensor([0, 1, 2, 2]), 3)
    first = merge_posteriors(ma, va, mb, vb, mask)
    second = merge_posteriors(*first[0], *first[1], mask)
    for x, y in zip(first[0] + first[1], second[0] + second[1]):
        assert torch.allclose(x, y, atol=1e-12)
    swapped = merge_posteriors(mb, vb, ma, va, mask)
    assert torch.equal(torch.where(mask, first[0][0], 0), torch.where(mask, swapped[1][0], 0))


def test_shared_mask():
    mask = shared_mask_for(torch.tensor([0, 2, 5]), 3)
    assert mask.tolist() == [[False, True, True], [True, True, False], [True, True, True]]


def test_kl_closed_form():
    assert float(gaussian_kl(torch.zeros(4), torch.ones(4))) == 0.0
    assert float(gaussian_kl(torch.tensor([1.0]), torch.tensor([1.0]))) == pytest.approx(0.5)


def _model():
    torch.manual_seed(0)
    return GroupVAE(3, 16).double()


def test_group_elbo_equals_twice_plain(rng):
    model = _model()
    x = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 16, 16)))
    noise = torch.as_tensor(rng.standard_normal((2, 3)))
    full = torch.ones(2, 3, dtype=torch.bool)
    grouped = group_elbo(model, x, x.clone(), full, noise, noise)
    plain = vae_elbo(model, x, noise)
    assert grouped.item() == pytest.approx(2.0 * plain.item(), abs=1e-6)
    sharp = group_elbo(model, x, x.clone(), full, noise, noise, obs_std=0.1)
    assert sharp.item() == pytest.approx(2.0 * vae_elbo(model, x, noise, obs_std=0.1).item(), abs=1e-6)


def test_full_mask_forces_identical_posteriors(rng):
    model = _model()
    xa = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 16, 16)))
    xb = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 16, 16)))
    ma, la = model.encode(xa)
    mb, lb = model.encode(xb)
    (m1, v1), (m2, v2) = merge_posteriors(ma, la.exp(), mb, lb.exp(), torch.ones(2, 3, dtype=torch.bool))
    assert torch.equal(m1, m2) and torch.equal(v1, v2)


def test_group_elbo_gradient_matches_fd(rng):
    model = _model()
    xa = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 16, 16)))
    xb = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 16, 16)))
    na, nb = (torch.as_tensor(rng.standard_normal((2, 3))) for _ in range(2))
    mask = shared_mask_for(torch.tensor([0, 2]), 3)
    f = lambda: group_elbo(model, xa, xb, mask, na, nb)
    f().backward()
    weight = model.encoder[0].weight
    direction = torch.as_tensor(rng.standard_normal(weight.shape))
    h = 1e-6
    with torch.no_grad():
        weight += h * direction
        hi = float(f())
        weight -= 2 * h * direction
        lo = float(f())
        weight += h * direction
    fd = (hi - lo) / (2 * h)
    assert abs(float((weight.grad * direction).sum()) - fd) / abs(fd) < 1e-3


def test_non_finite_aborts():
    model = _model()
    x = torch.full((1, 3, 16, 16), float("nan"), dtype=torch.float64)
    with pytest.raises(FloatingPointError):
        vae_elbo(model, x)


def test_training_deterministic(world):
    ds = build_pair_dataset(world.oracle_modifications(), world, 32, 20.0, torch.Generator().manual_seed(0))
    a, trace_a = train_group_vae(ds, 6, 3, 8, 1e-3, seed=4)
    b, trace_b = train_group_vae(ds, 6, 3, 8, 1e-3, seed=4)
    assert trace_a == trace_b
    for (k, v), (_, w) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(v, w), k
    with pytest.raises(ValueError):
        train_group_vae(PairDataset(ds.images_a[:0], ds.images_b[:0], ds.varied[:0]), 6, 1, 8, 1e-3, 0)

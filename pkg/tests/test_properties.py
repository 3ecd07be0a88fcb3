import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contrafeat.groupvae import merge_posteriors
from contrafeat.latent import broadcast, compute_pca, project_direction
from contrafeat.losses import contrast, diversity
from contrafeat.metrics import AttributeChangeMatrix, n_discov, s_disen
from contrafeat.navigator import compose_modification, smooth_attention

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
SETTINGS = settings(max_examples=60, deadline=None)


@SETTINGS
@given(arrays(np.float64, st.integers(1, 9), elements=finite))
def test_attention_is_a_simplex(logits):
    att = smooth_attention(torch.as_tensor(logits))
    assert torch.all(att >= 0)
    assert abs(float(att.sum()) - 1.0) < 1e-6


@SETTINGS
@given(arrays(np.float64, (2, 3, 2, 2), elements=st.floats(-5, 5)),
       arrays(np.float64, (2, 3, 2, 2), elements=st.floats(-5, 5)),
       st.sampled_from(["l2mask", "pooled", "nofoc"]))
def test_loss_bounds(fx, fy, mode):
    stacks = lambda a: [torch.as_tensor(a[0:1]), torch.as_tensor(a[1:2])]
    v = float(contrast(stacks(fx), stacks(fy), mode).value)
    assert -1e-9 <= v <= 2 + 1e-9


@SETTINGS
@given(arrays(np.float64, (3, 2, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (3, 2, 3), elements=st.floats(-5, 5)),
       st.floats(0.01, 100))
def test_contrast_scale_invariant(fx, fy, c):
    fx, fy = torch.as_tensor(fx), torch.as_tensor(fy)
    if float(fx.abs().max()) < 1e-3 or float(fy.abs().max()) < 1e-3:
        return
    a = float(contrast([fx], [fy]).value)
    b = float(contrast([c * fx], [fy]).value)
    assert abs(a - b) < 1e-6


@SETTINGS
@given(arrays(np.float64, st.tuples(st.integers(2, 5), st.integers(2, 4)), elements=st.floats(-3, 3)))
def test_diversity_range(dirs):
    d = torch.as_tensor(dirs)
    if float(d.norm(dim=1).min()) < 1e-3:
        return
    m = d.shape[0]
    v = float(diversity(d))
    assert -1e-9 <= v <= m * (m - 1) + 1e-9


@SETTINGS
@given(arrays(np.float64, (30, 5), elements=st.floats(-10, 10)), st.integers(1, 5),
       arrays(np.float64, 5, elements=st.floats(-3, 3)), st.floats(0.1, 10))
def test_projection_length_and_span(samples, k, coeffs, length):
    basis = compute_pca(samples)
    c = torch.as_tensor(coeffs[:k])
    if float(c.norm()) < 1e-3:
        return
    v = project_direction(c, basis, k, length).numpy()
    assert abs(np.linalg.norm(v) - length) < 1e-6
    top = basis.components[:, :k]
    assert np.linalg.norm(v - top @ (top.T @ v)) < 1e-6


@SETTINGS
@given(arrays(np.float64, 4, elements=finite), st.integers(1, 6))
def test_broadcast_rows(w0, k):
    w = broadcast(torch.as_tensor(w0), k)
    assert all(torch.equal(row, torch.as_tensor(w0)) for row in w)


@SETTINGS
@given(arrays(np.float64, 5, elements=st.floats(-3, 3)), arrays(np.float64, 4, elements=st.floats(-3, 3)),
       st.floats(-5, 5))
def test_modification_rank_one(v, logits, strength):
    v = torch.as_tensor(v)
    if float(v.norm()) < 1e-3 or abs(strength) < 1e-3:
        return
    delta = compose_modification(v / v.norm(), smooth_attention(torch.as_tensor(logits)), strength)
    s = torch.linalg.svdvals(delta)
    assert float(s[1:].max()) <= 1e-6 * float(s[0])


@SETTINGS
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
       arrays(np.float64, (3, 4), elements=st.floats(-2, 2)), arrays(np.float64, (3, 4), elements=st.floats(-2, 2)),
       arrays(np.bool_, (3, 4)))
def test_merge_symmetric_idempotent(ma, mb, la, lb, mask):
    ma, mb, va, vb = (torch.as_tensor(x) for x in (ma, mb, np.exp(la), np.exp(lb)))
    mask = torch.as_tensor(mask)
    (a_m, a_v), (b_m, b_v) = merge_posteriors(ma, va, mb, vb, mask)
    assert torch.all(a_v > 0) and torch.all(b_v > 0)
    (c_m, c_v), (d_m, d_v) = merge_posteriors(mb, vb, ma, va, mask)
    assert torch.allclose(torch.where(mask, a_m, 0), torch.where(mask, c_m, 0))
    assert torch.allclose(torch.where(mask, a_v, 0), torch.where(mask, d_v, 0))
    (e_m, e_v), (f_m, f_v) = merge_posteriors(a_m, a_v, b_m, b_v, mask)
    assert torch.allclose(e_m, a_m) and torch.allclose(f_v, b_v)
    assert torch.equal(torch.where(mask, ma, a_m), ma)  # varied dims untouched


@SETTINGS
@given(arrays(np.float64, (4, 5), elements=st.floats(0, 10)), arrays(np.float64, 4, elements=st.floats(0.1, 10)),
       st.permutations(range(5)))
def test_metric_invariances(raw, row_scale, perm):
    if raw.max(axis=1).min() < 1e-3:
        return
    base = AttributeChangeMatrix.from_raw(raw)
    scaled = AttributeChangeMatrix.from_raw(raw * row_scale[:, None])
    permuted = AttributeChangeMatrix.from_raw(raw[:, list(perm)])
    assert abs(s_disen(base) - s_disen(scaled)) < 1e-9
    assert abs(s_disen(base) - s_disen(permuted)) < 1e-12
    assert n_discov(base) == n_discov(permuted)
    assert 0.0 <= s_disen(base) <= 1.0
    assert 0 <= n_discov(base) <= 5

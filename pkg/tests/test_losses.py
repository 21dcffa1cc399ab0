import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from noveldec import losses as L
from noveldec.exceptions import ShapeError

# Two fixed 8x8 single-channel images; the expected loss below was computed
# with oracles.pyramid_loss (loop-based, written independently) and frozen.
IMG_A = (np.arange(64, dtype=np.float64).reshape(8, 8) % 7) / 3.0 - 1.0
IMG_B = np.cos(np.arange(64, dtype=np.float64).reshape(8, 8) * 0.37)
FROZEN_LOSS_J3 = 1.085455462635544


def test_oracle_value_is_frozen():
    assert oracles.pyramid_loss(IMG_A, IMG_B, 3) == pytest.approx(FROZEN_LOSS_J3, abs=1e-12)


def test_pyramid_loss_matches_oracle():
    a = torch.from_numpy(IMG_A)[None, None]
    b = torch.from_numpy(IMG_B)[None, None]
    got = L.laplacian_pyramid_loss(a, b, L.PyramidSpec(3)).item()
    assert got == pytest.approx(FROZEN_LOSS_J3, abs=1e-6)


@pytest.mark.parametrize("levels", [1, 2, 3, 4])
@pytest.mark.parametrize("shape", [(8, 8), (7, 5), (32, 32)])
def test_pyramid_bands_match_oracle(levels, shape):
    rng = np.random.default_rng(levels)
    img = rng.uniform(-1, 1, size=shape)
    ours = L.laplacian_pyramid(torch.from_numpy(img)[None, None], levels)
    ref = oracles.pyramid(img, levels)
    assert len(ours) == levels
    for j, (o, r) in enumerate(zip(ours, ref)):
        assert o.shape[-2:] == (math.ceil(shape[0] / 2**j), math.ceil(shape[1] / 2**j))
        np.testing.assert_allclose(o[0, 0].numpy(), r, atol=1e-12)


@pytest.mark.parametrize("levels", [1, 3, 5])
def test_pyramid_collapse_reconstructs(levels):
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64) * 2 - 1
    back = L.collapse_pyramid(L.laplacian_pyramid(x, levels))
    assert (back - x).abs().max().item() <= 1e-6


def test_pyramid_loss_identical_and_symmetric():
    x = torch.rand(4, 1, 16, 16)
    y = torch.rand(4, 1, 16, 16)
    assert L.laplacian_pyramid_loss(x, x).item() == 0.0
    assert L.laplacian_pyramid_loss(x, y).item() == L.laplacian_pyramid_loss(y, x).item()


def test_pyramid_loss_batch_mean():
    x = torch.rand(3, 1, 8, 8, dtype=torch.float64)
    y = torch.rand(3, 1, 8, 8, dtype=torch.float64)
    per = L.laplacian_pyramid_loss(x, y, reduction="none")
    for i in range(3):
        ref = oracles.pyramid_loss(x[i, 0].numpy(), y[i, 0].numpy(), 3)
        assert per[i].item() == pytest.approx(ref, abs=1e-10)
    assert L.laplacian_pyramid_loss(x, y).item() == pytest.approx(per.mean().item())


def test_pyramid_shape_mismatch():
    with pytest.raises(ShapeError):
        L.laplacian_pyramid_loss(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 4))


def test_latent_loss_values():
    assert L.latent_loss(torch.zeros(3), torch.zeros(3)).item() == 0.0
    assert L.latent_loss(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])).item() == 2.0
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=128), rng.normal(size=128)
    brute = sum((ai - bi) ** 2 for ai, bi in zip(a, b))
    assert L.latent_loss(torch.from_numpy(a), torch.from_numpy(b)).item() == pytest.approx(brute, abs=1e-9)
    with pytest.raises(ShapeError):
        L.latent_loss(torch.zeros(3), torch.zeros(4))


def test_mi_losses_at_zero_scores():
    expected = 0.5 * 2 * math.log(2)
    z = torch.zeros(7, dtype=torch.float64)
    assert L.global_mi_loss(z, z, 0.5).item() == pytest.approx(expected, abs=1e-9)
    m = torch.zeros(7, 8, 8, dtype=torch.float64)
    assert L.local_mi_loss(m, m, 0.5).item() == pytest.approx(expected, abs=1e-9)
    assert L.global_mi_loss(z + 3.0, z - 2.0, 0.0).item() == 0.0


def test_mi_loss_limits():
    big = torch.full((4,), 1e4, dtype=torch.float64)
    assert L.global_mi_loss(big, -big, 0.5).item() == pytest.approx(0.0, abs=1e-12)
    huge = torch.full((4,), 1e30)
    assert math.isfinite(L.global_mi_loss(-huge, huge, 0.5).item())


def test_local_equals_global_for_single_location():
    rng = np.random.default_rng(2)
    p, n = rng.normal(size=5), rng.normal(size=5)
    g = L.global_mi_loss(torch.from_numpy(p), torch.from_numpy(n), 0.5)
    loc = L.local_mi_loss(torch.from_numpy(p).view(5, 1, 1), torch.from_numpy(n).view(5, 1, 1), 0.5)
    assert g.item() == pytest.approx(loc.item(), abs=1e-12)


# beyond ~20 the log-sigmoid saturates below float64 resolution
finite = st.floats(-20, 20, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=2, max_size=6), st.lists(finite, min_size=2, max_size=6), st.integers(0, 1))
def test_mi_loss_monotone_and_nonnegative(pos, neg, which):
    pos = torch.tensor(pos, dtype=torch.float64)
    neg = torch.tensor(neg, dtype=torch.float64)
    base = L.global_mi_loss(pos, neg, 0.5).item()
    assert base >= 0
    if which == 0:
        bumped = pos.clone()
        bumped[0] += 1.0
        assert L.global_mi_loss(bumped, neg, 0.5).item() < base
    else:
        bumped = neg.clone()
        bumped[0] += 1.0
        assert L.global_mi_loss(pos, bumped, 0.5).item() > base


def test_prior_loss_values():
    assert L.prior_loss(torch.zeros(1, 4), torch.zeros(1, 4), 0.1).item() == 0.0
    got = L.prior_loss(torch.tensor([[1.0]], dtype=torch.float64), torch.zeros(1, 1, dtype=torch.float64), 0.1)
    assert got.item() == pytest.approx(0.05, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=8))
def test_prior_loss_nonnegative(pairs):
    mu = torch.tensor([[p[0] for p in pairs]], dtype=torch.float64)
    lv = torch.tensor([[p[1] for p in pairs]], dtype=torch.float64)
    assert L.prior_loss(mu, lv, 0.1).item() >= -1e-12


def test_mie_and_total():
    assert L.mie_loss(0.7, 0.7, 0.05) == pytest.approx(1.45)
    assert L.mie_loss(0.05, 0.7, 0.7) == L.mie_loss(0.7, 0.7, 0.05)
    ones = L.LossWeights(1.0, 1.0, 1.0)
    assert L.total_loss(1.0, 2.0, 3.0, ones) == 6.0
    assert L.total_loss(1.0, 2.0, 3.0, L.LossWeights(0.0, 0.0, 0.0)) == 0.0
    twos = L.LossWeights(2.0, 2.0, 2.0)
    assert L.total_loss(1.5, 2.5, 3.5, twos) == 2 * L.total_loss(1.5, 2.5, 3.5, ones)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        L.LossWeights(beta=-1.0)


def test_total_loss_gradient_toy_model():
    """10-parameter toy model: autograd vs central differences."""
    torch.manual_seed(0)
    theta = torch.randn(10, dtype=torch.float64, requires_grad=True)
    x = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    weights = L.LossWeights()

    def objective(t):
        img = torch.tanh(t[:4].sum() * x + t[4])
        lap = L.laplacian_pyramid_loss(img, x)
        lat = L.latent_loss(t[5:7][None], t[7:9][None])
        mie = L.mie_loss(
            L.global_mi_loss(t[:2], t[2:4], weights.beta),
            L.local_mi_loss(t[4:8].view(1, 2, 2), t[6:10].view(1, 2, 2), weights.beta),
            L.prior_loss(t[:5][None], t[5:][None], weights.gamma),
        )
        return L.total_loss(lap, lat, mie, weights)

    objective(theta).backward()
    for k in range(10):
        def f(v, k=k):
            t = theta.detach().clone()
            t[k] = v
            return objective(t).item()

        fd = oracles.central_difference(f, theta[k].item())
        assert abs(fd - theta.grad[k].item()) <= 1e-4 * max(abs(fd), 1e-3)

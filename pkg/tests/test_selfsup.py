import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cldfd.errors import ShapeError, SnapshotError
from cldfd.model import BackboneConfig, build_backbone, snapshot_params
from cldfd.numerics import Tensor, backward, grad_check, precision
from cldfd.selfsup import byol_loss, byol_target_update, simclr_loss


def _simclr_oracle(z, t):
    """Enumerate every ordered positive pair of the 2B rows."""
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    n = len(z)
    total = 0.0
    for m in range(n):
        p = m ^ 1
        num = math.exp(z[m] @ z[p] / t)
        den = sum(math.exp(z[m] @ z[q] / t) for q in range(n) if q != m)
        total += -math.log(num / den)
    return total / (n // 2)


def test_simclr_single_pair_is_zero():
    z = Tensor(np.random.default_rng(0).normal(size=(2, 5)))
    assert float(simclr_loss(z).data) == pytest.approx(0.0, abs=1e-6)


def test_simclr_two_pairs_matches_enumeration():
    z = np.random.default_rng(1).normal(size=(4, 6))
    with precision(np.float64):
        got = float(simclr_loss(Tensor(z), 0.5).data)
    assert got == pytest.approx(_simclr_oracle(z, 0.5), abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(b=st.integers(1, 5), d=st.integers(2, 6), seed=st.integers(0, 10_000), t=st.sampled_from([0.1, 0.5, 1.0]))
def test_simclr_matches_enumeration_random(b, d, seed, t):
    z = np.random.default_rng(seed).normal(size=(2 * b, d))
    with precision(np.float64):
        got = float(simclr_loss(Tensor(z), t).data)
    assert got == pytest.approx(_simclr_oracle(z, t), rel=1e-9, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_simclr_orthogonal_invariance(seed):
    r = np.random.default_rng(seed)
    z = r.normal(size=(6, 5))
    q, _ = np.linalg.qr(r.normal(size=(5, 5)))
    with precision(np.float64):
        a = float(simclr_loss(Tensor(z)).data)
        b = float(simclr_loss(Tensor(z @ q)).data)
    assert abs(a - b) < 1e-5


def test_simclr_errors_and_gradient():
    with pytest.raises(ShapeError):
        simclr_loss(Tensor(np.ones((3, 2))))
    with pytest.raises(ValueError):
        simclr_loss(Tensor(np.ones((2, 2))), 0.0)
    z = np.random.default_rng(2).normal(size=(4, 3))
    assert grad_check(lambda t: simclr_loss(t["z"], 0.5), {"z": z}, tolerance=1e-4).passed


@pytest.mark.parametrize("sign,expected", [(1.0, 0.0), (0.0, 2.0), (-1.0, 4.0)])
def test_byol_geometric_values(sign, expected):
    p = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    if sign == 0.0:
        z = np.array([[0.0, 3.0, 0.0], [0.0, 0.0, 1.0]])
    else:
        z = sign * 2.5 * p
    assert float(byol_loss(Tensor(p), z).data) == pytest.approx(expected, abs=1e-5)
    assert float(byol_loss(Tensor(p), z, reduction="sum").data) == pytest.approx(2 * expected, abs=1e-5)


def test_byol_target_gets_no_gradient():
    p = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    z = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
    backward(byol_loss(p, z))
    assert z.grad is None and p.grad is not None
    with pytest.raises(ValueError):
        byol_loss(p, z, reduction="max")


def test_byol_target_update():
    cfg = BackboneConfig(channels=(4, 4), strides=(1, 2), input_size=8)
    online, target = build_backbone(cfg, 0), build_backbone(cfg, 1)
    t0 = {k: v.copy() for k, v in snapshot_params(target).arrays.items()}
    byol_target_update(target, online, 0.9)
    for k, p in target.named_params().items():
        np.testing.assert_allclose(p.data, 0.9 * t0[k] + 0.1 * online.named_params()[k].data, rtol=1e-6)
    byol_target_update(target, online, 0.0)
    assert all(np.array_equal(p.data, online.named_params()[k].data) for k, p in target.named_params().items())
    with pytest.raises(SnapshotError):
        byol_target_update(target, build_backbone(BackboneConfig(channels=(4,), strides=(1,), input_size=8), 0))

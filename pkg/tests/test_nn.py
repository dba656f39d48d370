import numpy as np
import pytest
import torch
import torch.nn as nn

from gsdiff import nn as gnn

from oracles import ssim_scalar


# ---------------- ssim ----------------

def test_ssim_identity(rng):
    x = torch.rand(1, 3, 16, 20, dtype=torch.float64)
    assert abs(float(gnn.ssim(x, x)) - 1.0) < 1e-12


def test_ssim_matches_oracle(rng):
    x = rng.random((14, 15, 2))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    ours = gnn.ssim_hwc(x, y)
    ref = ssim_scalar(x, y)
    assert abs(ours - ref) < 1e-10


def test_ssim_orders_by_distortion(rng):
    x = rng.random((20, 24, 3))
    near = np.clip(x + rng.normal(0, 0.02, x.shape), 0, 1)
    far = np.clip(x + rng.normal(0, 0.3, x.shape), 0, 1)
    assert gnn.ssim_hwc(x, near) > gnn.ssim_hwc(x, far)


def test_ssim_validation():
    with pytest.raises(ValueError):
        gnn.ssim(torch.rand(1, 1, 16, 16), torch.rand(1, 1, 16, 17))
    with pytest.raises(ValueError):
        gnn.ssim(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 8))


def test_ssim_differentiable():
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
    y = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    (1 - gnn.ssim(x, y)).backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()


# ---------------- grad_check ----------------

def test_grad_check_passes_for_correct_module():
    torch.manual_seed(0)
    m = nn.Sequential(nn.Linear(5, 7), nn.Tanh(), nn.Linear(7, 3))
    rep = gnn.grad_check(m, torch.randn(2, 5), tol=1e-5)
    assert rep.passed, rep.max_rel_error
    assert "input" in rep.max_rel_error
    assert rep.worst() < 1e-5


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return 2 * x

    @staticmethod
    def backward(ctx, g):
        return 3 * g  # deliberately wrong (should be 2 * g)


class _Broken(nn.Module):
    def __init__(self):
        super().__init__()
        self.lin = nn.Linear(4, 4)

    def forward(self, x):
        return _WrongGrad.apply(self.lin(x))


def test_grad_check_catches_wrong_gradient():
    torch.manual_seed(0)
    rep = gnn.grad_check(_Broken(), torch.randn(2, 4), tol=1e-3)
    assert not rep.passed
    assert rep.max_rel_error["input"] > 0.2


def test_grad_check_max_elements_subsampling():
    torch.manual_seed(0)
    m = nn.Linear(10, 10)
    rep = gnn.grad_check(m, torch.randn(3, 10), tol=1e-5, max_elements=5)
    assert rep.passed


# ---------------- checkpoints ----------------

def test_checkpoint_round_trip(tmp_path, rng):
    path = str(tmp_path / "m.ckpt")
    tensors = {"a": rng.standard_normal((3, 4)),
               "b": rng.integers(0, 10, 7).astype(np.int64),
               "c": torch.randn(2, 2, dtype=torch.float32)}
    gnn.save_checkpoint(path, tensors, step=12, config={"x": 1}, extra={"note": "hi"})
    out, manifest = gnn.load_checkpoint(path)
    np.testing.assert_array_equal(out["a"], tensors["a"])
    np.testing.assert_array_equal(out["b"], tensors["b"])
    np.testing.assert_array_equal(out["c"], tensors["c"].numpy())
    assert out["b"].dtype == np.int64 and out["a"].dtype == np.float64
    assert manifest["step"] == 12
    assert manifest["config"] == {"x": 1}
    assert manifest["extra"] == {"note": "hi"}
    assert manifest["config_hash"] == gnn.config_hash({"x": 1})


def test_checkpoint_rejects_garbage(tmp_path):
    p = str(tmp_path / "bad.ckpt")
    with open(p, "wb") as f:
        f.write(b"not a checkpoint")
    with pytest.raises(ValueError):
        gnn.load_checkpoint(p)


def test_state_dict_round_trip():
    torch.manual_seed(0)
    m1 = nn.Linear(3, 3)
    m2 = nn.Linear(3, 3)
    gnn.load_state_dict_numpy(m2, gnn.state_dict_to_numpy(m1))
    x = torch.randn(2, 3)
    assert torch.equal(m1(x), m2(x))


def test_config_hash_key_order_invariant():
    assert gnn.config_hash({"a": 1, "b": [2, 3]}) == gnn.config_hash({"b": [2, 3], "a": 1})
    assert gnn.config_hash({"a": 1}) != gnn.config_hash({"a": 2})
    assert len(gnn.config_hash({})) == 16


# ---------------- seeding ----------------

def test_seed_all_reproducible():
    gnn.seed_all(123)
    a = torch.randn(4)
    b = np.random.rand(4)
    gnn.seed_all(123)
    assert torch.equal(torch.randn(4), a)
    np.testing.assert_array_equal(np.random.rand(4), b)

"""Optimizer behavior and the binary checkpoint format."""

import numpy as np
import pytest
import torch

from ldrf.checkpoint import load_checkpoint, save_checkpoint
from ldrf.optim import Adam, LrSchedule


def test_lr_schedule_log_linear():
    sched = LrSchedule(1e-2, 1e-4, 100)
    assert sched.lr_at(0) == pytest.approx(1e-2)
    assert sched.lr_at(50) == pytest.approx(1e-3)  # geometric midpoint
    assert sched.lr_at(100) == pytest.approx(1e-4)
    assert sched.lr_at(5000) == pytest.approx(1e-4)
    with pytest.raises(ValueError):
        LrSchedule(0.0, 1e-4, 10)
    with pytest.raises(ValueError):
        LrSchedule(1e-2, 1e-4, 0)


def _quadratic_params(offset):
    target = torch.tensor([1.5, -2.0, 0.25])
    p = torch.nn.Parameter(target + offset)
    return p, target


def _minimize(opt, p, target, steps):
    for _ in range(steps):
        opt.zero_grad()
        loss = ((p - target) ** 2).sum()
        loss.backward()
        opt.step()


def test_adam_converges_on_quadratic():
    p, target = _quadratic_params(torch.tensor([3.0, -1.0, 2.0]))
    opt = Adam({"p": p}, LrSchedule(1e-1, 1e-2, 200))
    _minimize(opt, p, target, 500)
    assert (p.detach() - target).abs().max() < 1e-3


def test_radam_converges_on_quadratic():
    p, target = _quadratic_params(torch.tensor([3.0, -1.0, 2.0]))
    opt = Adam({"p": p}, LrSchedule(1e-1, 1e-2, 200), radam=True)
    _minimize(opt, p, target, 800)
    assert (p.detach() - target).abs().max() < 1e-3


def test_step_skips_on_nonfinite_gradient():
    p = torch.nn.Parameter(torch.ones(3))
    opt = Adam({"p": p}, LrSchedule(1e-2, 1e-2, 10))
    before = p.detach().clone()
    p.grad = torch.tensor([0.1, float("nan"), 0.2])
    assert opt.step() is False
    torch.testing.assert_close(p.detach(), before)
    assert opt.skipped_steps == 1
    assert opt.step_count == 1  # the counter still advances
    assert (opt.m["p"] == 0).all() and (opt.v["p"] == 0).all()
    p.grad = torch.tensor([0.1, 0.1, 0.1])
    assert opt.step() is True
    assert opt.step_count == 2


def test_zero_grad_clears_to_none():
    p = torch.nn.Parameter(torch.ones(2))
    p.grad = torch.ones(2)
    opt = Adam({"p": p}, LrSchedule())
    opt.zero_grad()
    assert p.grad is None
    # a None gradient leaves the parameter untouched but the step proceeds
    before = p.detach().clone()
    assert opt.step() is True
    torch.testing.assert_close(p.detach(), before)


def test_optimizer_state_roundtrip_continues_identically():
    def fresh():
        torch.manual_seed(3)
        p = torch.nn.Parameter(torch.randn(4, 3))
        return p, Adam({"p": p}, LrSchedule(1e-2, 1e-3, 50))

    target = torch.zeros(4, 3)
    p_a, opt_a = fresh()
    _minimize(opt_a, p_a, target, 20)
    blocks = {"p": p_a.detach().numpy().copy()}
    # state_blocks returns views backed by the live moment tensors, so copy
    # before training past the snapshot
    blocks.update({k: a.copy() for k, a in opt_a.state_blocks().items()})
    steps = opt_a.step_count

    _minimize(opt_a, p_a, target, 10)  # uninterrupted reference

    p_b, opt_b = fresh()
    with torch.no_grad():
        p_b.copy_(torch.as_tensor(blocks["p"]))
    opt_b.load_state_blocks(blocks)
    opt_b.step_count = steps
    _minimize(opt_b, p_b, target, 10)
    assert torch.equal(p_a.detach(), p_b.detach())
    assert torch.equal(opt_a.m["p"], opt_b.m["p"])
    assert torch.equal(opt_a.v["p"], opt_b.v["p"])


def test_load_state_blocks_validates_shape():
    p = torch.nn.Parameter(torch.ones(3))
    opt = Adam({"p": p}, LrSchedule())
    with pytest.raises(ValueError, match="shape"):
        opt.load_state_blocks({"opt.m.p": np.zeros(4), "opt.v.p": np.zeros(3)})


# ---------------------------------------------------------------------------
# checkpoint file format


def test_checkpoint_roundtrip_bitwise(tmp_path, rng):
    blocks = {
        "a.weight": rng.normal(size=(4, 3)).astype(np.float32),
        "b.bias": rng.normal(size=(7,)).astype(np.float32),
    }
    extra = {"config": {"seed": 3}, "note": "x"}
    path = tmp_path / "ck.ldrf"
    save_checkpoint(path, blocks, step=42, config_hash="cafe", extra=extra)
    loaded, step, chash, ex = load_checkpoint(path)
    assert step == 42 and chash == "cafe" and ex == extra
    assert list(loaded.keys()) == list(blocks.keys())
    for k in blocks:
        assert loaded[k].dtype == np.float32
        np.testing.assert_array_equal(loaded[k], blocks[k])


def test_checkpoint_rejects_corruption(tmp_path, rng):
    path = tmp_path / "ck.ldrf"
    save_checkpoint(
        path, {"w": rng.normal(size=(5,)).astype(np.float32)}, 1, "h", {}
    )
    raw = path.read_bytes()

    bad_magic = tmp_path / "bad_magic.ldrf"
    bad_magic.write_bytes(b"NOTLDRF!" + raw[8:])
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(bad_magic)

    truncated = tmp_path / "trunc.ldrf"
    truncated.write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="truncat"):
        load_checkpoint(truncated)

    trailing = tmp_path / "trail.ldrf"
    trailing.write_bytes(raw + b"\x00\x00")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(trailing)

"""Self-contained invariant suite behind the ``verify`` command.

Every check re-derives its expectation from an independent construction
(loops, explicit Kronecker products, finite differences, hand counts) and
raises AssertionError on violation. The runner times each check and keeps
going so one failure does not hide another.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import attention as att
from . import data_io as dio
from . import embedding as emb
from . import hypermae as hm
from . import tensor as tc
from .attention import AttentionRatioConfig, LessBlockParams, build_perception_mask
from .embedding import TokenGrid
from .tensor import FlopCounter, Tape, Tensor

__all__ = ["run_checks", "CHECKS", "CheckResult"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    seconds: float
    detail: str = ""


def _random_grid(rng, n, c, d, grid_w):
    return TokenGrid(
        tokens=Tensor(rng.normal(size=(1, n + 1, c + 1, d))),
        grid_h=n // grid_w, grid_w=grid_w, patch=16, resolution=10.0,
        wavelengths=np.linspace(450, 2300, c),
        patch_indices=np.arange(n), channel_indices=np.arange(c),
    )


def check_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 4))
    b = rng.normal(size=(4, 6))
    got = tc.matmul(Tensor(a), Tensor(b)).data
    ref = np.zeros((5, 6))
    for i in range(5):
        for j in range(6):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.abs(got - ref).max() < 1e-13


def check_flop_counter_exactness():
    rng = np.random.default_rng(1)
    with FlopCounter() as fc:
        tc.matmul(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(3, 4))))
    assert fc.mac_count == 24
    with FlopCounter() as total:
        parts = []
        for m, k, n in [(3, 5, 7), (7, 2, 9), (4, 4, 4)]:
            with FlopCounter() as piece:
                tc.matmul(Tensor(rng.normal(size=(m, k))), Tensor(rng.normal(size=(k, n))))
            parts.append(piece.mac_count)
    assert total.mac_count == sum(parts)


def check_kron_against_four_loop():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 2))
    b = rng.normal(size=(2, 4))
    got = tc.kron(Tensor(a), Tensor(b)).data
    for i in range(3):
        for j in range(2):
            for k in range(2):
                for l in range(4):
                    assert got[i * 2 + k, j * 4 + l] == a[i, j] * b[k, l]


def check_softmax_row_stochastic():
    rng = np.random.default_rng(3)
    for _ in range(30):
        x = rng.normal(size=(5, 8)) * 20
        mask = rng.random((5, 8)) < 0.5
        mask[:, -1] = True
        y = tc.softmax(Tensor(x), mask=mask).data
        assert np.abs(y.sum(axis=-1) - 1.0).max() < 1e-9
        assert np.all(y[~mask] == 0.0)


def check_reshape_round_trip():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 6, 2))
    t = Tensor(x)
    back = tc.reshape(tc.reshape(t, (8, 6)), (4, 6, 2))
    assert np.array_equal(back.data, x)


def check_gradients_of_core_ops():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(3, 4))
    aux = rng.normal(size=(4, 3))

    def f(arr):
        xt = Tensor(arr)
        h = tc.gelu(tc.matmul(xt, Tensor(aux)))
        h = tc.layernorm(h, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        return tc.tsum(tc.mul(tc.softmax(h), Tensor(aux[:3, :])))

    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        h = tc.gelu(tc.matmul(xt, Tensor(aux)))
        h = tc.layernorm(h, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        loss = tc.tsum(tc.mul(tc.softmax(h), Tensor(aux[:3, :])))
    g = tape.backward(loss, [xt])[id(xt)]
    eps = 1e-5
    flat = x0.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        up = f(x0).item()
        flat[j] = orig - eps
        down = f(x0).item()
        flat[j] = orig
        numeric = (up - down) / (2 * eps)
        assert abs(numeric - g.reshape(-1)[j]) < 1e-8 + 1e-4 * max(abs(numeric), abs(g.reshape(-1)[j]))


def check_kron_rank1_exactness():
    rng = np.random.default_rng(6)
    for _ in range(5):
        np1, cp1, d1, d2 = 5, 3, 4, 2
        a_s = [Tensor(_softmax_np(rng.normal(size=(1, np1, np1))))]
        a_c = [Tensor(_softmax_np(rng.normal(size=(1, cp1, cp1))))]
        v_s = Tensor(rng.normal(size=(1, np1, d1)))
        v_c = Tensor(rng.normal(size=(1, cp1, d2)))
        got = att.kron_combine(a_s, a_c, v_s, v_c).data[0]
        full = np.kron(a_c[0].data[0], a_s[0].data[0]) @ np.kron(v_c.data[0], v_s.data[0])
        worst = 0.0
        for n in range(np1):
            for c in range(cp1):
                worst = max(worst, np.abs(got[n, c] - full[c * np1 + n]).max())
        scale = max(np.abs(full).max(), 1e-12)
        assert worst / scale < 1e-9, f"kron mismatch {worst / scale:.2e}"


def check_implied_map_stochasticity():
    rng = np.random.default_rng(7)
    for trial in range(40):
        np1 = int(rng.integers(2, 8))
        cp1 = int(rng.integers(2, 6))
        r = int(rng.integers(1, 4))
        masked = bool(rng.integers(0, 2))
        mask = None
        if masked and np1 >= 2:
            n = np1 - 1
            gw = max(1, math.isqrt(n))
            while n % gw:
                gw -= 1
            m = build_perception_mask(np.arange(n), gw, 10.0, 16, 200.0)
            mask = m.with_cls()
        acc = np.zeros((cp1, np1))
        for _ in range(r):
            a_s = _softmax_np(rng.normal(size=(np1, np1)), mask)
            a_c = _softmax_np(rng.normal(size=(cp1, cp1)))
            acc += np.outer(a_c @ np.ones(cp1), a_s @ np.ones(np1))
        acc /= r
        assert np.abs(acc - 1.0).max() < 1e-8


def check_mask_scale_invariance():
    counts = []
    for hw in (64, 128, 256):
        g = hw // 16
        m = build_perception_mask(np.arange(g * g), g, 10.0, 16, 200.0)
        interior = [r * g + c for r in range(1, g - 1) for c in range(1, g - 1)]
        counts.append({int(m.allowed[i].sum()) for i in interior})
    assert counts[0] == counts[1] == counts[2]


def check_resolution_compensation():
    coarse = build_perception_mask(np.arange(64), 8, 10.0, 16, 330.0)
    fine = build_perception_mask(np.arange(256), 16, 5.0, 16, 330.0)
    ci, fi = 4 * 8 + 4, 8 * 16 + 8
    for dr in range(-3, 4):
        for dc in range(-3, 4):
            assert (
                coarse.allowed[ci, (4 + dr) * 8 + (4 + dc)]
                == fine.allowed[fi, (8 + 2 * dr) * 16 + (8 + 2 * dc)]
            )


def check_positional_encoding_physics():
    a = emb.spatial_encoding(2, 10.0, 16, 64)
    b = emb.spatial_encoding(1, 20.0, 16, 64)
    assert np.array_equal(a, b)
    table = emb.channel_encodings(dio.SENTINEL2_WAVELENGTHS_NM, 32)
    for i in range(len(table)):
        for j in range(i + 1, len(table)):
            assert not np.array_equal(table[i], table[j])


def check_less_block_gradients():
    rng = np.random.default_rng(8)
    cfg = AttentionRatioConfig(dim=8, num_heads=1, ratio=2, rank=1)
    grid = _random_grid(rng, 4, 2, 8, 2)
    params = LessBlockParams.init(rng, cfg)
    weights = rng.normal(size=(1, 5, 3, 8))
    named = params.parameters()

    def loss_value():
        out = att.less_block_forward(grid, params)
        return tc.tsum(tc.mul(out.tokens, Tensor(weights)))

    with Tape() as tape:
        loss = loss_value()
    grads = tape.backward(loss, list(named.values()))
    eps = 1e-5
    for name, p in named.items():
        flat = p.data.reshape(-1)
        j = int(np.random.default_rng(hash(name) % 2**32).integers(flat.size))
        orig = flat[j]
        flat[j] = orig + eps
        up = loss_value().item()
        flat[j] = orig - eps
        down = loss_value().item()
        flat[j] = orig
        numeric = (up - down) / (2 * eps)
        analytic = grads[id(p)].reshape(-1)[j]
        assert abs(numeric - analytic) < 1e-8 + 1e-4 * max(abs(numeric), abs(analytic)), name


def check_tube_masking_accounting():
    rng = np.random.default_rng(9)
    for _ in range(60):
        n = int(rng.choice([16, 64, 196]))
        c = int(rng.choice([4, 13, 20]))
        plan = hm.sample_mask_plan(n, c, seed=int(rng.integers(2**31)))
        assert plan.masked_patches.size == int(math.floor(0.75 * n + 0.5))
        assert plan.masked_channels.size == int(math.floor(0.5 * c + 0.5))
        visible = (n - plan.masked_patches.size + 1) * (c - plan.masked_channels.size + 1)
        assert visible == (plan.visible_patches.size + 1) * (plan.visible_channels.size + 1)


def check_loss_decomposition():
    plan = hm.MaskPlan(np.array([3]), np.array([1]), 4, 2, 0)
    target = np.zeros((1, 2, 4, 4))
    recon = np.zeros((1, 2, 4, 4))
    recon[0, 1, 3, 3] = 2.0  # doubly masked pixel carries the only error
    total, sp, ch = hm.total_loss(Tensor(recon), Tensor(target), plan, grid_w=2, patch=2)
    assert abs(sp.item() - 4.0 / 8) < 1e-12
    assert abs(ch.item() - 4.0 / 16) < 1e-12
    assert abs(total.item() - (sp.item() + ch.item())) < 1e-12


def check_tile_round_trip():
    cfg = dio.SynthConfig(channels=3, height=16, width=16, mixing_rank=2, n_classes=2,
                          wavelengths=[450.0, 600.0, 900.0])
    cube, _ = dio.generate_tile(cfg, seed=0)
    with tempfile.TemporaryDirectory() as tmp:
        p1 = os.path.join(tmp, "a.ght")
        p2 = os.path.join(tmp, "b.ght")
        dio.write_tile(cube, p1)
        dio.write_tile(dio.read_tile(p1), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()


def check_channel_permutation_equivariance():
    rng = np.random.default_rng(10)
    cfg = AttentionRatioConfig(dim=8, num_heads=1, ratio=2)
    grid = _random_grid(rng, 4, 4, 8, 2)
    params = LessBlockParams.init(rng, cfg)
    base = att.less_block_forward(grid, params).tokens.data
    perm = np.array([3, 1, 0, 2])
    permuted = grid.tokens.data.copy()
    permuted[:, :, 1:, :] = permuted[:, :, 1 + perm, :]
    grid.tokens = Tensor(permuted)
    out = att.less_block_forward(grid, params).tokens.data
    assert np.abs(out[:, :, 1:, :] - base[:, :, 1 + perm, :]).max() < 1e-9


def _softmax_np(x, mask=None):
    if mask is not None:
        shifted = x - np.where(mask, x, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(shifted), 0.0)
    else:
        e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


CHECKS = [
    ("matmul-vs-triple-loop", check_matmul_against_triple_loop),
    ("flop-counter-exactness", check_flop_counter_exactness),
    ("kron-vs-four-loop", check_kron_against_four_loop),
    ("softmax-row-stochastic", check_softmax_row_stochastic),
    ("reshape-round-trip", check_reshape_round_trip),
    ("gradients-core-ops", check_gradients_of_core_ops),
    ("kron-rank1-exactness", check_kron_rank1_exactness),
    ("implied-map-stochasticity", check_implied_map_stochasticity),
    ("mask-scale-invariance", check_mask_scale_invariance),
    ("resolution-compensation", check_resolution_compensation),
    ("positional-encoding-physics", check_positional_encoding_physics),
    ("gradients-less-block", check_less_block_gradients),
    ("tube-masking-accounting", check_tube_masking_accounting),
    ("loss-decomposition", check_loss_decomposition),
    ("tile-file-round-trip", check_tile_round_trip),
    ("channel-permutation-equivariance", check_channel_permutation_equivariance),
]


def run_checks(inject_fault: str | None = None) -> list[CheckResult]:
    """Run every invariant check, timing each; failures do not stop the run."""
    if inject_fault:
        att.set_fault_injection(inject_fault, True)
    results = []
    try:
        for name, fn in CHECKS:
            start = time.perf_counter()
            try:
                fn()
                results.append(CheckResult(name, True, time.perf_counter() - start))
            except AssertionError as exc:
                results.append(CheckResult(name, False, time.perf_counter() - start, str(exc)))
    finally:
        if inject_fault:
            att.set_fault_injection(inject_fault, False)
    return results

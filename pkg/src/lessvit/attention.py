"""Low-rank spatial-spectral attention with Kronecker-factored maps.

A block never forms the (N+1)(C+1) x (N+1)(C+1) joint attention matrix.
Instead it pools the token grid down each axis, runs an N x N spatial and a
C x C spectral attention separately, and combines their outputs through the
Kronecker identity (A_C (x) A_S)(V_C (x) V_S) = (A_C V_C) (x) (A_S V_S),
at O(N^2 d1 + C^2 d2 + N C d1 d2) per head instead of O(N^2 C^2 D). Several
independent query/key pairs per axis ("rank") enrich the implied joint map
while sharing one value projection.

The brute-force block that attends over all flattened grid tokens at once
lives here too; it is the correctness oracle and the efficiency contrast,
never a training path.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .embedding import TokenGrid
from .tensor import FlopCounter, Tensor

__all__ = [
    "AttentionRatioConfig",
    "PerceptionMask",
    "LessHeadParams",
    "LessBlockParams",
    "LessStackParams",
    "VanillaBlockParams",
    "build_perception_mask",
    "atten_pool",
    "spatial_attention_maps",
    "spectral_attention_maps",
    "kron_combine",
    "less_attention",
    "less_block_forward",
    "stack_forward",
    "vanilla_spatial_spectral_block",
    "flop_report",
    "set_fault_injection",
]

# cmd-verify's negative control: deliberately mis-order the Kronecker axes
_FAULTS: set[str] = set()


def set_fault_injection(name: str, enabled: bool) -> None:
    if enabled:
        _FAULTS.add(name)
    else:
        _FAULTS.discard(name)


@dataclass(frozen=True)
class AttentionRatioConfig:
    """Factorization of one head: d1 * d2 = head_dim, d1 / d2 = ratio."""

    dim: int
    num_heads: int
    ratio: int = 16
    rank: int = 1
    combine: str = "mean"  # how rank terms merge: "mean" keeps row sums at 1

    def __post_init__(self):
        if self.dim % self.num_heads != 0:
            raise tc.DimensionError(f"dim {self.dim} not divisible by {self.num_heads} heads")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.combine not in ("mean", "sum"):
            raise ValueError("combine must be 'mean' or 'sum'")
        hd = self.dim // self.num_heads
        if hd % self.ratio != 0:
            raise tc.DimensionError(f"head_dim {hd} not divisible by ratio {self.ratio}")
        d2 = math.isqrt(hd // self.ratio)
        if d2 * d2 != hd // self.ratio or d2 < 1:
            raise tc.DimensionError(
                f"no integer split with head_dim {hd} and ratio {self.ratio}"
            )

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def d2(self) -> int:
        return math.isqrt(self.head_dim // self.ratio)

    @property
    def d1(self) -> int:
        return self.ratio * self.d2


@dataclass(frozen=True)
class PerceptionMask:
    """Boolean N x N map admitting patch pairs within a metric threshold."""

    allowed: np.ndarray
    threshold_m: float

    def with_cls(self) -> np.ndarray:
        """Extend by an always-attended row/column 0 for the global CLS."""
        n = self.allowed.shape[0]
        out = np.ones((n + 1, n + 1), dtype=bool)
        out[1:, 1:] = self.allowed
        return out


def build_perception_mask(
    patch_indices,
    grid_w: int,
    resolution: float,
    patch: int,
    threshold_m: float,
    metric: str = "euclidean",
) -> PerceptionMask:
    """Admit patch pairs whose center distance in meters is <= threshold.

    ``patch_indices`` are flat row-major positions on the original grid, so
    the mask stays physically correct on a masked (subsampled) grid.
    """
    idx = np.asarray(patch_indices, dtype=np.int64)
    rows = idx // grid_w
    cols = idx % grid_w
    pitch = patch * resolution
    dr = (rows[:, None] - rows[None, :]) * pitch
    dc = (cols[:, None] - cols[None, :]) * pitch
    if metric == "euclidean":
        dist = np.hypot(dr, dc)
    elif metric == "chebyshev":
        dist = np.maximum(np.abs(dr), np.abs(dc))
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return PerceptionMask(allowed=dist <= threshold_m, threshold_m=threshold_m)


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class LessHeadParams:
    w_pool_s: Tensor  # (D, d1)
    w_pool_c: Tensor  # (D, d2)
    w_qs: list[Tensor]  # rank x (d1, d1)
    w_ks: list[Tensor]
    w_qc: list[Tensor]  # rank x (d2, d2)
    w_kc: list[Tensor]
    w_vs: Tensor  # (d1, d1), shared across ranks
    w_vc: Tensor  # (d2, d2), shared across ranks


@dataclass
class LessBlockParams:
    cfg: AttentionRatioConfig
    heads: list[LessHeadParams]
    w_out: Tensor
    b_out: Tensor
    w_mlp1: Tensor
    b_mlp1: Tensor
    w_mlp2: Tensor
    b_mlp2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: AttentionRatioConfig, prefix: str = "block") -> "LessBlockParams":
        d, d1, d2 = cfg.dim, cfg.d1, cfg.d2

        def w(shape, name):
            # fan-in scaling keeps the doubly-multiplicative kron pathway
            # at unit signal scale even for the tiny spectral projections
            std = 1.0 / math.sqrt(shape[0])
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True,
                          name=f"{prefix}.{name}")

        heads = []
        for h in range(cfg.num_heads):
            heads.append(
                LessHeadParams(
                    w_pool_s=w((d, d1), f"head{h}.w_pool_s"),
                    w_pool_c=w((d, d2), f"head{h}.w_pool_c"),
                    w_qs=[w((d1, d1), f"head{h}.w_qs{i}") for i in range(cfg.rank)],
                    w_ks=[w((d1, d1), f"head{h}.w_ks{i}") for i in range(cfg.rank)],
                    w_qc=[w((d2, d2), f"head{h}.w_qc{i}") for i in range(cfg.rank)],
                    w_kc=[w((d2, d2), f"head{h}.w_kc{i}") for i in range(cfg.rank)],
                    w_vs=w((d1, d1), f"head{h}.w_vs"),
                    w_vc=w((d2, d2), f"head{h}.w_vc"),
                )
            )
        return cls(
            cfg=cfg,
            heads=heads,
            w_out=w((d, d), "w_out"),
            b_out=Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.b_out"),
            w_mlp1=w((d, 4 * d), "w_mlp1"),
            b_mlp1=Tensor(np.zeros(4 * d), requires_grad=True, name=f"{prefix}.b_mlp1"),
            w_mlp2=w((4 * d, d), "w_mlp2"),
            b_mlp2=Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.b_mlp2"),
            ln1_gamma=Tensor(np.ones(d), requires_grad=True, name=f"{prefix}.ln1_gamma"),
            ln1_beta=Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.ln1_beta"),
            ln2_gamma=Tensor(np.ones(d), requires_grad=True, name=f"{prefix}.ln2_gamma"),
            ln2_beta=Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.ln2_beta"),
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for t in (self.w_out, self.b_out, self.w_mlp1, self.b_mlp1, self.w_mlp2,
                  self.b_mlp2, self.ln1_gamma, self.ln1_beta, self.ln2_gamma,
                  self.ln2_beta):
            out[t.name] = t
        for head in self.heads:
            for t in (head.w_pool_s, head.w_pool_c, head.w_vs, head.w_vc):
                out[t.name] = t
            for group in (head.w_qs, head.w_ks, head.w_qc, head.w_kc):
                for t in group:
                    out[t.name] = t
        return out


@dataclass
class LessStackParams:
    """A stack of blocks with a final normalization."""

    blocks: list[LessBlockParams]
    ln_gamma: Tensor
    ln_beta: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: AttentionRatioConfig, depth: int,
             prefix: str = "enc") -> "LessStackParams":
        blocks = [LessBlockParams.init(rng, cfg, prefix=f"{prefix}.block{i}") for i in range(depth)]
        return cls(
            blocks=blocks,
            ln_gamma=Tensor(np.ones(cfg.dim), requires_grad=True, name=f"{prefix}.ln_gamma"),
            ln_beta=Tensor(np.zeros(cfg.dim), requires_grad=True, name=f"{prefix}.ln_beta"),
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for blk in self.blocks:
            out.update(blk.parameters())
        out[self.ln_gamma.name] = self.ln_gamma
        out[self.ln_beta.name] = self.ln_beta
        return out


# ---------------------------------------------------------------------------
# Forward pieces


def _pool_axis(tokens: Tensor, axis: str) -> Tensor:
    """Attention-pool the grid down one axis, in full token dimension D.

    Spatial: each position's spatial CLS queries that position's channel
    tokens. Spectral: each channel's spectral CLS queries that channel's
    position tokens. Element 0 is the global CLS attending over every token.
    Queries and keys are the raw tokens; the only learnable step is the
    per-head projection applied afterwards.
    """
    b, np1, cp1, d = tokens.shape
    scale = 1.0 / math.sqrt(d)
    interior = tokens[:, 1:, 1:, :]  # (B, N, C, D)
    if axis == "spatial":
        queries = tokens[:, 1:, 0:1, :]  # (B, N, 1, D)
        kv = interior
        length = np1 - 1
    elif axis == "spectral":
        queries = tc.transpose(tokens[:, 0:1, 1:, :], (0, 2, 1, 3))  # (B, C, 1, D)
        kv = tc.transpose(interior, (0, 2, 1, 3))  # (B, C, N, D)
        length = cp1 - 1
    else:
        raise ValueError(f"unknown axis {axis!r}")

    scores = tc.mul(tc.matmul(queries, tc.transpose(kv, (0, 1, 3, 2))), scale)
    pooled = tc.matmul(tc.softmax(scores), kv)  # (B, len, 1, D)
    pooled = tc.reshape(pooled, (b, length, d))

    all_tokens = tc.reshape(tokens, (b, np1 * cp1, d))
    g_scores = tc.mul(tc.matmul(tokens[:, 0:1, 0, :], tc.transpose(all_tokens)), scale)
    g_pooled = tc.matmul(tc.softmax(g_scores), all_tokens)  # (B, 1, D)

    return tc.concat([g_pooled, pooled], axis=1)  # (B, len+1, D)


def atten_pool(tokens: Tensor, axis: str, w_pool: Tensor) -> Tensor:
    """Pool one axis and project to that axis's attention dimension."""
    return tc.matmul(_pool_axis(tokens, axis), w_pool)


def spatial_attention_maps(
    x_s: Tensor, head: LessHeadParams, mask_ext: np.ndarray | None
) -> tuple[list[Tensor], Tensor]:
    """Rank-many row-stochastic (N+1)x(N+1) maps plus the shared values.

    The perception mask (already CLS-extended) zeroes attention between
    patches farther apart than the metric threshold.
    """
    d1 = head.w_vs.shape[0]
    scale = 1.0 / math.sqrt(d1)
    maps = []
    for w_q, w_k in zip(head.w_qs, head.w_ks):
        q = tc.matmul(x_s, w_q)
        k = tc.matmul(x_s, w_k)
        scores = tc.mul(tc.matmul(q, tc.transpose(k)), scale)
        maps.append(tc.softmax(scores, mask=mask_ext))
    return maps, tc.matmul(x_s, head.w_vs)


def spectral_attention_maps(x_c: Tensor, head: LessHeadParams) -> tuple[list[Tensor], Tensor]:
    """Rank-many row-stochastic (C+1)x(C+1) maps, unmasked, plus values."""
    d2 = head.w_vc.shape[0]
    scale = 1.0 / math.sqrt(d2)
    maps = []
    for w_q, w_k in zip(head.w_qc, head.w_kc):
        q = tc.matmul(x_c, w_q)
        k = tc.matmul(x_c, w_k)
        scores = tc.mul(tc.matmul(q, tc.transpose(k)), scale)
        maps.append(tc.softmax(scores))
    return maps, tc.matmul(x_c, head.w_vc)


def kron_combine(
    a_s: list[Tensor],
    a_c: list[Tensor],
    v_s: Tensor,
    v_c: Tensor,
    combine: str = "mean",
) -> Tensor:
    """Joint attention output without materializing the joint map.

    Per rank the result is the Kronecker product (A_C V_C) (x) (A_S V_S),
    realized as one outer product per sample: row c*(N+1)+n of the implied
    flat output lands at grid slot [n, c] with features indexed jc*d1+js.
    Rank terms are averaged by default so the implied map stays
    row-stochastic; "sum" reproduces plain accumulation.
    """
    b, np1, d1 = v_s.shape
    cp1, d2 = v_c.shape[1], v_c.shape[2]
    total = None
    for a_si, a_ci in zip(a_s, a_c):
        y_s = tc.matmul(a_si, v_s)  # (B, N+1, d1)
        y_c = tc.matmul(a_ci, v_c)  # (B, C+1, d2)
        outer = tc.matmul(
            tc.reshape(y_c, (b, cp1 * d2, 1)), tc.reshape(y_s, (b, 1, np1 * d1))
        )  # (B, (C+1)*d2, (N+1)*d1); exactly the N*C*d1*d2 MAC term
        outer = tc.reshape(outer, (b, cp1, d2, np1, d1))
        if "kron-order" in _FAULTS:
            outer = tc.transpose(outer, (0, 3, 1, 4, 2))  # wrong axis pairing
        else:
            outer = tc.transpose(outer, (0, 3, 1, 2, 4))
        term = tc.reshape(outer, (b, np1, cp1, d2 * d1))
        total = term if total is None else tc.add(total, term)
    if combine == "mean" and len(a_s) > 1:
        total = tc.mul(total, 1.0 / len(a_s))
    return total


def less_attention(tokens: Tensor, params: LessBlockParams, mask_ext: np.ndarray | None) -> Tensor:
    """Multi-head factored attention over the full token grid."""
    pooled_sp = _pool_axis(tokens, "spatial")  # (B, N+1, D)
    pooled_ch = _pool_axis(tokens, "spectral")  # (B, C+1, D)
    outs = []
    for head in params.heads:
        x_s = tc.matmul(pooled_sp, head.w_pool_s)
        x_c = tc.matmul(pooled_ch, head.w_pool_c)
        a_s, v_s = spatial_attention_maps(x_s, head, mask_ext)
        a_c, v_c = spectral_attention_maps(x_c, head)
        outs.append(kron_combine(a_s, a_c, v_s, v_c, combine=params.cfg.combine))
    stacked = outs[0] if len(outs) == 1 else tc.concat(outs, axis=-1)
    return tc.add(tc.matmul(stacked, params.w_out), params.b_out)


def less_block_forward(
    grid: TokenGrid, params: LessBlockParams, mask: PerceptionMask | None = None
) -> TokenGrid:
    """Pre-norm residual block: attention then a 4x MLP, CLS rows included."""
    x = grid.tokens
    mask_ext = mask.with_cls() if mask is not None else None
    h = tc.layernorm(x, params.ln1_gamma, params.ln1_beta)
    x = tc.add(x, less_attention(h, params, mask_ext))
    h2 = tc.layernorm(x, params.ln2_gamma, params.ln2_beta)
    mlp = tc.matmul(tc.gelu(tc.add(tc.matmul(h2, params.w_mlp1), params.b_mlp1)), params.w_mlp2)
    x = tc.add(x, tc.add(mlp, params.b_mlp2))
    return TokenGrid(
        tokens=x,
        grid_h=grid.grid_h,
        grid_w=grid.grid_w,
        patch=grid.patch,
        resolution=grid.resolution,
        wavelengths=grid.wavelengths,
        patch_indices=grid.patch_indices,
        channel_indices=grid.channel_indices,
    )


def stack_forward(
    grid: TokenGrid, stack: LessStackParams, mask: PerceptionMask | None = None
) -> TokenGrid:
    for blk in stack.blocks:
        grid = less_block_forward(grid, blk, mask)
    tokens = tc.layernorm(grid.tokens, stack.ln_gamma, stack.ln_beta)
    return TokenGrid(
        tokens=tokens,
        grid_h=grid.grid_h,
        grid_w=grid.grid_w,
        patch=grid.patch,
        resolution=grid.resolution,
        wavelengths=grid.wavelengths,
        patch_indices=grid.patch_indices,
        channel_indices=grid.channel_indices,
    )


# ---------------------------------------------------------------------------
# Brute-force oracle: full attention over all flattened grid tokens


@dataclass
class VanillaBlockParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor
    b_out: Tensor
    w_mlp1: Tensor
    b_mlp1: Tensor
    w_mlp2: Tensor
    b_mlp2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int) -> "VanillaBlockParams":
        def w(shape):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape),
                          requires_grad=True)

        return cls(
            w_q=w((dim, dim)), w_k=w((dim, dim)), w_v=w((dim, dim)),
            w_out=w((dim, dim)), b_out=Tensor(np.zeros(dim), requires_grad=True),
            w_mlp1=w((dim, 4 * dim)), b_mlp1=Tensor(np.zeros(4 * dim), requires_grad=True),
            w_mlp2=w((4 * dim, dim)), b_mlp2=Tensor(np.zeros(dim), requires_grad=True),
            ln1_gamma=Tensor(np.ones(dim), requires_grad=True),
            ln1_beta=Tensor(np.zeros(dim), requires_grad=True),
            ln2_gamma=Tensor(np.ones(dim), requires_grad=True),
            ln2_beta=Tensor(np.zeros(dim), requires_grad=True),
        )


def vanilla_spatial_spectral_block(
    x: Tensor, params: VanillaBlockParams, attn_counter: FlopCounter | None = None
) -> Tensor:
    """Full attention over all (N+1)(C+1) flattened tokens at once.

    The quadratic score and weighted-sum products optionally report into
    ``attn_counter`` so benchmarks can separate them from the linear terms.
    """
    d = x.shape[-1]
    scale = 1.0 / math.sqrt(d)
    h = tc.layernorm(x, params.ln1_gamma, params.ln1_beta)
    q = tc.matmul(h, params.w_q)
    k = tc.matmul(h, params.w_k)
    v = tc.matmul(h, params.w_v)
    if attn_counter is not None:
        with attn_counter:
            scores = tc.mul(tc.matmul(q, tc.transpose(k)), scale)
            attended = tc.matmul(tc.softmax(scores), v)
    else:
        scores = tc.mul(tc.matmul(q, tc.transpose(k)), scale)
        attended = tc.matmul(tc.softmax(scores), v)
    x = tc.add(x, tc.add(tc.matmul(attended, params.w_out), params.b_out))
    h2 = tc.layernorm(x, params.ln2_gamma, params.ln2_beta)
    mlp = tc.matmul(tc.gelu(tc.add(tc.matmul(h2, params.w_mlp1), params.b_mlp1)), params.w_mlp2)
    return tc.add(x, tc.add(mlp, params.b_mlp2))


# ---------------------------------------------------------------------------
# Measured complexity contrast


def flop_report(cfg: AttentionRatioConfig, n: int, c: int, seed: int = 0,
                threshold_m: float | None = None, resolution: float = 10.0,
                patch: int = 16) -> dict:
    """Measured MAC counts for one factored block vs one brute-force block.

    Counts come from instrumented runs on a random (N+1) x (C+1) x D grid,
    not from formulas. The brute-force attention-only figure (scores plus
    weighted sum) is reported separately from its block total because the
    linear projection terms dominate at small token counts.
    """
    gw = math.isqrt(n)
    if gw * gw != n:
        raise ValueError(f"flop_report expects a square patch count, got {n}")
    rng = np.random.default_rng(seed)
    d = cfg.dim

    tokens = Tensor(rng.normal(size=(1, n + 1, c + 1, d)))
    grid = TokenGrid(
        tokens=tokens, grid_h=gw, grid_w=gw, patch=patch, resolution=resolution,
        wavelengths=np.linspace(450.0, 2300.0, c), patch_indices=np.arange(n),
        channel_indices=np.arange(c),
    )
    mask = None
    if threshold_m is not None:
        mask = build_perception_mask(np.arange(n), gw, resolution, patch, threshold_m)

    less_params = LessBlockParams.init(rng, cfg)
    t0 = time.perf_counter()
    with FlopCounter() as less_counter:
        less_block_forward(grid, less_params, mask)
    less_seconds = time.perf_counter() - t0

    van_params = VanillaBlockParams.init(rng, d)
    flat = Tensor(rng.normal(size=(1, (n + 1) * (c + 1), d)))
    attn_counter = FlopCounter()
    t0 = time.perf_counter()
    with FlopCounter() as van_counter:
        vanilla_spatial_spectral_block(flat, van_params, attn_counter=attn_counter)
    vanilla_seconds = time.perf_counter() - t0

    return {
        "n": n,
        "c": c,
        "dim": d,
        "less_macs": less_counter.mac_count,
        "vanilla_macs": van_counter.mac_count,
        "vanilla_attention_macs": attn_counter.mac_count,
        "ratio": van_counter.mac_count / less_counter.mac_count,
        "less_seconds": less_seconds,
        "vanilla_seconds": vanilla_seconds,
    }

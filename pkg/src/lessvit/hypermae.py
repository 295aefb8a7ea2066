"""Masked-autoencoder pretraining with decoupled spatial and spectral masks.

Each sample loses 75% of its patch positions and 50% of its channels before
encoding. One spatial pattern applies to every surviving channel (tube
masking), so the model cannot copy position cues across channels. The decoder
sees the full grid again -- shared mask token plus physical encodings at the
dropped slots -- and regresses raw pixels. The loss is the sum of two mean
squared errors, one over pixels in masked positions and one over pixels in
masked channels; pixels masked both ways count in both terms on purpose.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .attention import (
    AttentionRatioConfig,
    LessStackParams,
    build_perception_mask,
    stack_forward,
)
from .embedding import (
    EmbedParams,
    TokenGrid,
    channel_encodings,
    embed_cube,
    grid_spatial_encodings,
)
from .tensor import Tape, Tensor

__all__ = [
    "MaskPlan",
    "MaskConfigError",
    "DivergenceError",
    "HyperMaeConfig",
    "HyperMaeModel",
    "PretrainConfig",
    "sample_mask_plan",
    "apply_masks",
    "reconstruct",
    "loss_spatial",
    "loss_spectral",
    "total_loss",
    "AdamW",
    "learning_rate_at",
    "pretrain_loop",
    "save_checkpoint",
    "load_checkpoint",
]


class MaskConfigError(ValueError):
    """A masking ratio leaves nothing visible."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MaskPlan:
    """One masking outcome: which patch positions and channels disappear."""

    masked_patches: np.ndarray
    masked_channels: np.ndarray
    n_patches: int
    n_channels: int
    seed: int

    @property
    def visible_patches(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_patches), self.masked_patches)

    @property
    def visible_channels(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_channels), self.masked_channels)


def sample_mask_plan(
    n_patches: int,
    n_channels: int,
    spatial_ratio: float = 0.75,
    channel_ratio: float = 0.5,
    seed: int = 0,
) -> MaskPlan:
    """Uniform without-replacement draws on both axes, half-up rounding.

    The same spatial set applies to every channel, so the plan is the whole
    story: visible tokens form the product visible_patches x visible_channels.
    """
    if not (0 <= spatial_ratio < 1 and 0 <= channel_ratio < 1):
        raise MaskConfigError("mask ratios must lie in [0, 1)")
    n_mask = _round_half_up(spatial_ratio * n_patches)
    c_mask = _round_half_up(channel_ratio * n_channels)
    if n_patches - n_mask < 1 or n_channels - c_mask < 1:
        raise MaskConfigError(
            f"ratios leave {n_patches - n_mask} patches / {n_channels - c_mask} channels visible"
        )
    rng = np.random.default_rng([int(seed), 0x3A5C])
    patches = np.sort(rng.choice(n_patches, size=n_mask, replace=False))
    channels = np.sort(rng.choice(n_channels, size=c_mask, replace=False))
    return MaskPlan(
        masked_patches=patches,
        masked_channels=channels,
        n_patches=n_patches,
        n_channels=n_channels,
        seed=seed,
    )


def apply_masks(grid: TokenGrid, plan: MaskPlan) -> TokenGrid:
    """Drop masked rows and columns; CLS row/column always survive.

    Surviving tokens keep their values bit-for-bit, embeddings included.
    """
    n, c = grid.n_positions, grid.n_channels
    if plan.masked_patches.size and (plan.masked_patches.min() < 0 or plan.masked_patches.max() >= n):
        raise tc.ContractError("masked patch index out of range")
    if plan.masked_channels.size and (plan.masked_channels.min() < 0 or plan.masked_channels.max() >= c):
        raise tc.ContractError("masked channel index out of range")
    rows = np.concatenate([[0], 1 + plan.visible_patches])
    cols = np.concatenate([[0], 1 + plan.visible_channels])
    tokens = tc.take(tc.take(grid.tokens, rows, axis=1), cols, axis=2)
    return TokenGrid(
        tokens=tokens,
        grid_h=grid.grid_h,
        grid_w=grid.grid_w,
        patch=grid.patch,
        resolution=grid.resolution,
        wavelengths=grid.wavelengths[plan.visible_channels],
        patch_indices=grid.patch_indices[plan.visible_patches],
        channel_indices=grid.channel_indices[plan.visible_channels],
    )


# ---------------------------------------------------------------------------
# Model


@dataclass
class HyperMaeConfig:
    dim: int = 768
    depth: int = 12
    num_heads: int = 12
    dec_dim: int = 512
    dec_depth: int = 8
    dec_num_heads: int = 8
    ratio: int = 16
    rank: int = 1
    combine: str = "mean"
    patch: int = 16
    spatial_mask_ratio: float = 0.75
    channel_mask_ratio: float = 0.5
    use_perception_mask: bool = True
    threshold_pitches: float = 2.0  # mask threshold = pitches * patch * resolution
    threshold_m_override: float | None = None  # absolute threshold wins when set
    mask_metric: str = "euclidean"

    def encoder_attention(self) -> AttentionRatioConfig:
        return AttentionRatioConfig(
            dim=self.dim, num_heads=self.num_heads, ratio=self.ratio,
            rank=self.rank, combine=self.combine,
        )

    def decoder_attention(self) -> AttentionRatioConfig:
        return AttentionRatioConfig(
            dim=self.dec_dim, num_heads=self.dec_num_heads, ratio=self.ratio,
            rank=self.rank, combine=self.combine,
        )

    def threshold_m(self, resolution: float) -> float:
        if self.threshold_m_override is not None:
            return self.threshold_m_override
        return self.threshold_pitches * self.patch * resolution


class HyperMaeModel:
    """Embedding + encoder stack + decoder stack + shared pixel head."""

    def __init__(self, cfg: HyperMaeConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = EmbedParams.init(rng, patch=cfg.patch, dim=cfg.dim, radar=True)
        self.encoder = LessStackParams.init(rng, cfg.encoder_attention(), cfg.depth, prefix="enc")
        self.decoder = LessStackParams.init(rng, cfg.decoder_attention(), cfg.dec_depth, prefix="dec")
        self.enc_to_dec_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(cfg.dim), size=(cfg.dim, cfg.dec_dim)),
                                   requires_grad=True, name="bridge.w")
        self.enc_to_dec_b = Tensor(np.zeros(cfg.dec_dim), requires_grad=True, name="bridge.b")
        self.mask_token = Tensor(rng.normal(0.0, 0.02, size=(cfg.dec_dim,)),
                                 requires_grad=True, name="bridge.mask_token")
        self.pixel_head_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(cfg.dec_dim), size=(cfg.dec_dim, cfg.patch ** 2)),
                                   requires_grad=True, name="head.pixel_w")
        self.pixel_head_b = Tensor(np.zeros(cfg.patch ** 2), requires_grad=True,
                                   name="head.pixel_b")

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.embed.parameters())
        out.update(self.encoder.parameters())
        out.update(self.decoder.parameters())
        for t in (self.enc_to_dec_w, self.enc_to_dec_b, self.mask_token,
                  self.pixel_head_w, self.pixel_head_b):
            out[t.name] = t
        return out

    def encoder_parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.embed.parameters())
        out.update(self.encoder.parameters())
        return out

    # ---- forward pieces

    def encode(
        self,
        pixels: np.ndarray,
        wavelengths: np.ndarray,
        n_optical: int,
        resolution: float,
        plan: MaskPlan | None = None,
    ) -> TokenGrid:
        """Embed a (B, C, H, W) batch, optionally mask, run the encoder."""
        grid = embed_cube(pixels, wavelengths, n_optical, resolution, self.embed)
        if plan is not None:
            grid = apply_masks(grid, plan)
        mask = None
        if self.cfg.use_perception_mask:
            mask = build_perception_mask(
                grid.patch_indices, grid.grid_w, resolution, self.cfg.patch,
                self.cfg.threshold_m(resolution), metric=self.cfg.mask_metric,
            )
        return stack_forward(grid, self.encoder, mask)

    def decode(self, encoded: TokenGrid, plan: MaskPlan, full_grid_w: int,
               full_wavelengths: np.ndarray, resolution: float) -> Tensor:
        """Rebuild the full grid with mask tokens and run the decoder.

        Every non-visible slot starts from the one shared mask token plus
        the physical encoding of its own axis; visible slots carry the
        projected encoder output. Returns interior pixel predictions
        (B, N, C, patch^2).
        """
        cfg = self.cfg
        b = encoded.tokens.shape[0]
        n, c = plan.n_patches, plan.n_channels
        d = cfg.dec_dim

        bridged = tc.add(tc.matmul(encoded.tokens, self.enc_to_dec_w), self.enc_to_dec_b)

        pe_sp = grid_spatial_encodings(np.arange(n), full_grid_w, resolution, cfg.patch, d)
        pe_ch = channel_encodings(full_wavelengths, d)
        base = np.zeros((1, n + 1, c + 1, d))
        base[0, 1:, 1:] = pe_sp[:, None, :] + pe_ch[None, :, :]
        base[0, 1:, 0] = pe_sp
        base[0, 0, 1:] = pe_ch
        base_t = tc.add(tc.broadcast_to(Tensor(base), (b, n + 1, c + 1, d)),
                        tc.reshape(self.mask_token, (1, 1, 1, d)))

        rows = np.concatenate([[0], 1 + plan.visible_patches])
        cols = np.concatenate([[0], 1 + plan.visible_channels])
        sub = tc.take(base_t, rows, axis=1)
        sub = tc.scatter_rows(sub, cols, bridged, axis=2)
        full_tokens = tc.scatter_rows(base_t, rows, sub, axis=1)

        full = TokenGrid(
            tokens=full_tokens,
            grid_h=n // full_grid_w,
            grid_w=full_grid_w,
            patch=cfg.patch,
            resolution=resolution,
            wavelengths=full_wavelengths,
            patch_indices=np.arange(n),
            channel_indices=np.arange(c),
        )
        mask = None
        if cfg.use_perception_mask:
            mask = build_perception_mask(
                full.patch_indices, full.grid_w, resolution, cfg.patch,
                cfg.threshold_m(resolution), metric=cfg.mask_metric,
            )
        decoded = stack_forward(full, self.decoder, mask)
        interior = decoded.tokens[:, 1:, 1:, :]
        return tc.add(tc.matmul(interior, self.pixel_head_w), self.pixel_head_b)


def _tokens_to_image(tokens: Tensor, grid_h: int, grid_w: int, patch: int) -> Tensor:
    """(B, N, C, P^2) patch predictions back to (B, C, H, W)."""
    b, n, c, _ = tokens.shape
    x = tc.reshape(tokens, (b, grid_h, grid_w, c, patch, patch))
    x = tc.transpose(x, (0, 3, 1, 4, 2, 5))
    return tc.reshape(x, (b, c, grid_h * patch, grid_w * patch))


def reconstruct(
    model: HyperMaeModel,
    pixels: np.ndarray,
    wavelengths: np.ndarray,
    n_optical: int,
    resolution: float,
    plan: MaskPlan,
) -> Tensor:
    """Encode the visible grid and predict the complete (B, C, H, W) image."""
    px = np.asarray(pixels)
    if px.ndim == 3:
        px = px[None]
    h, w = px.shape[2], px.shape[3]
    grid_w = w // model.cfg.patch
    encoded = model.encode(px, wavelengths, n_optical, resolution, plan)
    patch_preds = model.decode(encoded, plan, grid_w, np.asarray(wavelengths, dtype=np.float64),
                               resolution)
    return _tokens_to_image(patch_preds, h // model.cfg.patch, grid_w, model.cfg.patch)


# ---------------------------------------------------------------------------
# Losses over pixel images


def _as_image_batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.ndim == 3:
        t = tc.reshape(t, (1,) + t.shape)
    return t


def _patch_pixel_mask(plan: MaskPlan, grid_w: int, patch: int) -> np.ndarray:
    """(H, W) 0/1 map of pixels lying in masked patch positions."""
    grid_h = plan.n_patches // grid_w
    m = np.zeros((grid_h, grid_w))
    for p in plan.masked_patches:
        m[p // grid_w, p % grid_w] = 1.0
    return np.kron(m, np.ones((patch, patch)))


def loss_spatial(recon, target, plan: MaskPlan, grid_w: int, patch: int) -> Tensor:
    """MSE over every pixel (all channels) inside masked patch positions."""
    if plan.masked_patches.size == 0:
        raise tc.ContractError("no masked patches; spatial loss undefined")
    recon, target = _as_image_batch(recon), _as_image_batch(target)
    pix = _patch_pixel_mask(plan, grid_w, patch)
    weight = pix[None, None, :, :]
    count = recon.shape[0] * recon.shape[1] * int(pix.sum())
    diff = tc.sub(recon, target)
    return tc.mul(tc.tsum(tc.mul(tc.mul(diff, diff), Tensor(weight))), 1.0 / count)


def loss_spectral(recon, target, plan: MaskPlan) -> Tensor:
    """MSE over every pixel of masked channels."""
    if plan.masked_channels.size == 0:
        raise tc.ContractError("no masked channels; spectral loss undefined")
    recon, target = _as_image_batch(recon), _as_image_batch(target)
    weight = np.zeros((1, recon.shape[1], 1, 1))
    weight[0, plan.masked_channels] = 1.0
    count = recon.shape[0] * plan.masked_channels.size * recon.shape[2] * recon.shape[3]
    diff = tc.sub(recon, target)
    return tc.mul(tc.tsum(tc.mul(tc.mul(diff, diff), Tensor(weight))), 1.0 / count)


def total_loss(recon, target, plan: MaskPlan, grid_w: int, patch: int) -> tuple[Tensor, Tensor, Tensor]:
    """Spatial + spectral terms; doubly-masked pixels count in both.

    Empty mask sets contribute zero instead of raising, so degenerate plans
    stay evaluable. Returns (total, spatial, spectral).
    """
    zero = Tensor(0.0)
    l_sp = loss_spatial(recon, target, plan, grid_w, patch) if plan.masked_patches.size else zero
    l_ch = loss_spectral(recon, target, plan) if plan.masked_channels.size else zero
    return tc.add(l_sp, l_ch), l_sp, l_ch


# ---------------------------------------------------------------------------
# Optimization


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 5e-2):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict[int, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[id(p)]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + self.eps)


def learning_rate_at(epoch_frac: float, total_epochs: float, base_lr: float,
                     warmup_frac: float = 0.05) -> float:
    """Linear warmup for the first fraction of epochs, cosine decay after."""
    warmup = warmup_frac * total_epochs
    if warmup > 0 and epoch_frac < warmup:
        return base_lr * epoch_frac / warmup
    span = max(total_epochs - warmup, 1e-12)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch_frac - warmup) / span))


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 1.5e-4
    warmup_frac: float = 0.05
    weight_decay: float = 5e-2
    seed: int = 0
    flip_augment: bool = True  # fresh horizontal flips each epoch, seeded


def pretrain_loop(
    model: HyperMaeModel,
    pixels: np.ndarray,
    wavelengths: np.ndarray,
    n_optical: int,
    resolution: float,
    cfg: PretrainConfig,
    record_hook=None,
) -> list[dict]:
    """Optimize the reconstruction objective over a (T, C, H, W) tile stack.

    Fresh mask plans every epoch, deterministic under the seed. Returns one
    record per step plus one summary record per epoch; aborts with a
    diagnostic if the loss leaves the reals.
    """
    t_total, c, h, w = pixels.shape
    patch = model.cfg.patch
    n = (h // patch) * (w // patch)
    grid_w = w // patch
    params = model.parameters()
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    history: list[dict] = []
    steps_per_epoch = max(1, math.ceil(t_total / cfg.batch_size))

    for epoch in range(cfg.epochs):
        epoch_rng = np.random.default_rng([cfg.seed, 1 + epoch])
        order = epoch_rng.permutation(t_total)
        flips = epoch_rng.random(t_total) < 0.5 if cfg.flip_augment else None
        epoch_losses = []
        for step in range(steps_per_epoch):
            batch_idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            if batch_idx.size == 0:
                continue
            batch = pixels[batch_idx]
            if flips is not None and flips[batch_idx].any():
                batch = batch.copy()
                batch[flips[batch_idx]] = batch[flips[batch_idx], :, :, ::-1]
            plan = sample_mask_plan(
                n, c, model.cfg.spatial_mask_ratio, model.cfg.channel_mask_ratio,
                seed=int(np.random.default_rng([cfg.seed, 2 + epoch, step]).integers(2 ** 31)),
            )
            epoch_frac = epoch + step / steps_per_epoch
            lr = learning_rate_at(epoch_frac, cfg.epochs, cfg.base_lr, cfg.warmup_frac)

            with Tape() as tape:
                recon = reconstruct(model, batch, wavelengths, n_optical, resolution, plan)
                loss, l_sp, l_ch = total_loss(recon, Tensor(batch), plan, grid_w, patch)
            if not np.isfinite(loss.item()):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"total={loss.item()} spatial={l_sp.item()} spectral={l_ch.item()}"
                )
            grads = tape.backward(loss, list(params.values()))
            opt.step(grads, lr)

            rec = {
                "epoch": epoch,
                "step": step,
                "loss_spatial": l_sp.item(),
                "loss_spectral": l_ch.item(),
                "loss": loss.item(),
                "lr": lr,
            }
            history.append(rec)
            epoch_losses.append(loss.item())
            if record_hook:
                record_hook(rec)
        summary = {
            "epoch": epoch,
            "step": -1,
            "loss": float(np.mean(epoch_losses)),
            "lr": lr,
        }
        history.append(summary)
        if record_hook:
            record_hook(summary)
    return history


# ---------------------------------------------------------------------------
# Checkpoints: magic "LVCK", version u16, meta_len u32 + JSON metadata
# (config record and RNG state), count u32, then per tensor: name (u16 len +
# UTF-8), ndim u8, dims u32 each, float32 little-endian payload.

CHECKPOINT_MAGIC = b"LVCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, config: dict, params: dict[str, Tensor],
                    rng_state: dict | None = None) -> None:
    meta = json.dumps({"config": config, "rng_state": _jsonify(rng_state)}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(params)))
        for name, p in sorted(params.items()):
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", p.data.ndim))
            for d in p.data.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray], dict | None]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, 6)
    off = 10
    meta = json.loads(raw[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        params[name] = arr.astype(np.float64)
    return meta["config"], params, meta.get("rng_state")


def _jsonify(obj):
    if obj is None:
        return None
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def model_from_checkpoint(path: str) -> "HyperMaeModel":
    """Rebuild a model and load its parameter payloads."""
    config, arrays, _ = load_checkpoint(path)
    cfg = HyperMaeConfig(**config)
    model = HyperMaeModel(cfg, np.random.default_rng(0))
    params = model.parameters()
    missing = set(params) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
    for name, p in params.items():
        if tuple(arrays[name].shape) != tuple(p.data.shape):
            raise ValueError(f"shape mismatch for {name}")
        p.data = np.ascontiguousarray(arrays[name], dtype=tc.default_dtype())
    return model

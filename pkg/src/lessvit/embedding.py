"""Hyperspectral patch embedding into the (N+1) x (C+1) x D token grid.

A tile is cut into P x P patches per channel; one projection matrix per
modality is shared across all of that modality's channels, so the layer
accepts any channel count without reshaping a single parameter. Tokens are
then framed by summary tokens -- one spatial CLS per patch position, one
spectral CLS per channel, one global CLS -- and shifted by additive
encodings computed from physical metadata: patch positions enter through
their metric ground distance (grid index * resolution * patch size) and
channels through their center wavelength in nanometers. Two tiles agree in
encoding exactly when they agree physically, whatever their pixel grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import Tensor

__all__ = [
    "MetadataError",
    "EmbedParams",
    "TokenGrid",
    "spatial_encoding",
    "spatial_encoding_2d",
    "channel_encoding",
    "channel_encodings",
    "grid_spatial_encodings",
    "tied_patch_embed",
    "assemble_token_grid",
    "embed_cube",
]


class MetadataError(ValueError):
    """Tile metadata inconsistent with its pixel payload."""


def _frequencies(dim: int) -> np.ndarray:
    if dim % 2 != 0:
        raise tc.DimensionError("encoding dimension must be even")
    i = np.arange(dim // 2, dtype=np.float64)
    return np.power(10000.0, 2.0 * i / dim)


def spatial_encoding(x: float, resolution: float, patch: int, dim: int) -> np.ndarray:
    """Sinusoidal encoding of a grid index by its metric ground offset.

    The argument is x * resolution * patch (meters), so two tiles whose
    index/resolution products match get bit-identical encodings.
    """
    if resolution <= 0 or patch <= 0:
        raise ValueError("resolution and patch size must be positive")
    arg = (x * resolution * patch) / _frequencies(dim)
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(arg)
    out[1::2] = np.cos(arg)
    return out


def spatial_encoding_2d(row: float, col: float, resolution: float, patch: int, dim: int) -> np.ndarray:
    """Planar positions: first half encodes the patch row, second the column."""
    if dim % 4 != 0:
        raise tc.DimensionError("2-D spatial encoding needs dim divisible by 4")
    half = dim // 2
    return np.concatenate(
        [
            spatial_encoding(row, resolution, patch, half),
            spatial_encoding(col, resolution, patch, half),
        ]
    )


def channel_encoding(wavelength: float, dim: int) -> np.ndarray:
    """Sinusoidal encoding of a channel's center wavelength in nanometers."""
    if wavelength <= 0:
        raise ValueError("wavelength must be positive")
    arg = wavelength / _frequencies(dim)
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(arg)
    out[1::2] = np.cos(arg)
    return out


def channel_encodings(wavelengths, dim: int) -> np.ndarray:
    return np.stack([channel_encoding(float(w), dim) for w in np.asarray(wavelengths)])


def grid_spatial_encodings(
    patch_indices, grid_w: int, resolution: float, patch: int, dim: int
) -> np.ndarray:
    """Encodings for flat patch indices laid out row-major on a grid."""
    idx = np.asarray(patch_indices, dtype=np.int64)
    return np.stack(
        [
            spatial_encoding_2d(int(n) // grid_w, int(n) % grid_w, resolution, patch, dim)
            for n in idx
        ]
    )


@dataclass
class EmbedParams:
    """Per-modality shared projections plus the three CLS initializers."""

    w_optical: Tensor  # (P^2, D)
    w_radar: Tensor | None  # (P^2, D), present when radar channels may occur
    cls_global: Tensor  # (D,)
    cls_spatial: Tensor  # (D,), shared template; position identity comes from encodings
    cls_spectral: Tensor  # (D,), shared template; channel identity comes from encodings
    patch: int
    dim: int

    @classmethod
    def init(cls, rng: np.random.Generator, patch: int, dim: int, radar: bool = True) -> "EmbedParams":
        proj_std = 1.0 / patch  # fan-in P^2

        def p(shape, name, std=0.02):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)

        return cls(
            w_optical=p((patch * patch, dim), "embed.w_optical", proj_std),
            w_radar=p((patch * patch, dim), "embed.w_radar", proj_std) if radar else None,
            cls_global=p((dim,), "embed.cls_global"),
            cls_spatial=p((dim,), "embed.cls_spatial"),
            cls_spectral=p((dim,), "embed.cls_spectral"),
            patch=patch,
            dim=dim,
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {
            "embed.w_optical": self.w_optical,
            "embed.cls_global": self.cls_global,
            "embed.cls_spatial": self.cls_spatial,
            "embed.cls_spectral": self.cls_spectral,
        }
        if self.w_radar is not None:
            out["embed.w_radar"] = self.w_radar
        return out


@dataclass
class TokenGrid:
    """(B, N+1, C+1, D) tokens plus the metadata needed to locate them.

    Layout: [0,0] global CLS; [0,1..C] spectral CLS; [1..N,0] spatial CLS;
    interior [1..N,1..C] patch tokens. ``patch_indices`` maps row n >= 1
    back to the flat position on the original grid, so row n of a full grid
    sits at (n-1) // grid_w, (n-1) % grid_w.
    """

    tokens: Tensor
    grid_h: int
    grid_w: int
    patch: int
    resolution: float
    wavelengths: np.ndarray
    patch_indices: np.ndarray
    channel_indices: np.ndarray

    @property
    def n_positions(self) -> int:
        return self.tokens.shape[-3] - 1

    @property
    def n_channels(self) -> int:
        return self.tokens.shape[-2] - 1

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    def grid_coords(self, n: int) -> tuple[int, int]:
        """Row/column of token row ``n`` (n >= 1) on the original patch grid."""
        flat = int(self.patch_indices[n - 1])
        return flat // self.grid_w, flat % self.grid_w


def _patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, C, P^2) with patches in row-major grid order."""
    b, c, h, w = pixels.shape
    gh, gw = h // patch, w // patch
    x = pixels.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (B, gh, gw, C, P, P)
    return x.reshape(b, gh * gw, c, patch * patch)


def tied_patch_embed(
    pixels: np.ndarray,
    wavelengths: np.ndarray,
    n_optical: int,
    params: EmbedParams,
) -> Tensor:
    """Project every patch of every channel through its modality's matrix.

    Returns raw tokens (B, N, C, D). Optical channels come first, radar
    channels after, matching the channel order of the input cube.
    """
    px = np.asarray(pixels, dtype=tc.default_dtype())
    if px.ndim == 3:
        px = px[None]
    b, c, h, w = px.shape
    p = params.patch
    if h % p != 0 or w % p != 0:
        raise tc.DimensionError(f"tile {h}x{w} not divisible by patch size {p}")
    if len(wavelengths) != c:
        raise MetadataError(f"{len(wavelengths)} wavelengths for {c} channels")
    patches = Tensor(_patchify(px, p))  # constant input
    if n_optical == c:
        return tc.matmul(patches, params.w_optical)
    if params.w_radar is None:
        raise MetadataError("radar channels present but no radar projection")
    opt = tc.matmul(patches[:, :, :n_optical, :], params.w_optical)
    rad = tc.matmul(patches[:, :, n_optical:, :], params.w_radar)
    return tc.concat([opt, rad], axis=2)


def assemble_token_grid(
    raw_tokens: Tensor,
    params: EmbedParams,
    grid_h: int,
    grid_w: int,
    resolution: float,
    wavelengths: np.ndarray,
) -> TokenGrid:
    """Frame raw tokens with CLS tokens and add the physical encodings.

    Patch tokens receive spatial + channel encodings; spatial CLS tokens the
    spatial encoding of their position only; spectral CLS tokens the channel
    encoding only; the global CLS none.
    """
    b, n, c, d = raw_tokens.shape
    if n != grid_h * grid_w:
        raise tc.DimensionError(f"{n} patch tokens for a {grid_h}x{grid_w} grid")
    pe_sp = grid_spatial_encodings(np.arange(n), grid_w, resolution, params.patch, d)
    pe_ch = channel_encodings(wavelengths, d)
    pe_sp_t = Tensor(pe_sp)
    pe_ch_t = Tensor(pe_ch)

    interior = raw_tokens + tc.reshape(pe_sp_t, (1, n, 1, d)) + tc.reshape(pe_ch_t, (1, 1, c, d))
    spatial_cls = tc.reshape(params.cls_spatial, (1, 1, 1, d)) + tc.reshape(pe_sp_t, (1, n, 1, d))
    spatial_cls = tc.broadcast_to(spatial_cls, (b, n, 1, d))
    spectral_cls = tc.reshape(params.cls_spectral, (1, 1, 1, d)) + tc.reshape(pe_ch_t, (1, 1, c, d))
    spectral_cls = tc.broadcast_to(spectral_cls, (b, 1, c, d))
    global_cls = tc.broadcast_to(tc.reshape(params.cls_global, (1, 1, 1, d)), (b, 1, 1, d))

    top = tc.concat([global_cls, spectral_cls], axis=2)  # (B, 1, C+1, D)
    body = tc.concat([spatial_cls, interior], axis=2)  # (B, N, C+1, D)
    tokens = tc.concat([top, body], axis=1)  # (B, N+1, C+1, D)
    return TokenGrid(
        tokens=tokens,
        grid_h=grid_h,
        grid_w=grid_w,
        patch=params.patch,
        resolution=resolution,
        wavelengths=np.asarray(wavelengths, dtype=np.float64),
        patch_indices=np.arange(n),
        channel_indices=np.arange(c),
    )


def embed_cube(
    pixels: np.ndarray,
    wavelengths: np.ndarray,
    n_optical: int,
    resolution: float,
    params: EmbedParams,
) -> TokenGrid:
    """Full pipeline: patchify, project, frame with CLS, add encodings."""
    px = np.asarray(pixels)
    if px.ndim == 3:
        px = px[None]
    h, w = px.shape[2], px.shape[3]
    raw = tied_patch_embed(px, wavelengths, n_optical, params)
    return assemble_token_grid(
        raw,
        params,
        grid_h=h // params.patch,
        grid_w=w // params.patch,
        resolution=resolution,
        wavelengths=wavelengths,
    )

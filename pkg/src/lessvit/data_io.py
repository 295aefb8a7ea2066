"""Synthetic hyperspectral tiles, a bit-exact tile file format, and manifests.

A tile is a (C, H, W) float32 raster with physical metadata: meters/pixel
resolution and one center wavelength per channel. The generator produces
tiles whose channels are wavelength-dependent mixtures of a few smooth
latent fields, so spatial autocorrelation decays with metric distance and
channels are mutually predictive -- the two structures the model feeds on.
"""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = [
    "HyperCube",
    "SynthConfig",
    "DatasetStats",
    "TileFormatError",
    "BadMagicError",
    "VersionError",
    "PayloadLengthError",
    "SENTINEL2_WAVELENGTHS_NM",
    "RADAR_SURROGATE_WAVELENGTHS_NM",
    "default_wavelengths",
    "generate_tile",
    "write_tile",
    "read_tile",
    "compute_stats",
    "normalize_tile",
    "augment",
    "write_manifest",
    "read_manifest",
    "generate_dataset",
]

# Sentinel-2 band centers in nanometers, bands B0..B12.
SENTINEL2_WAVELENGTHS_NM = np.array(
    [442.7, 492.4, 559.8, 664.6, 704.1, 740.5, 782.8, 832.8, 864.7, 945.1,
     1373.5, 1613.7, 2202.4]
)

# SAR polarizations carry no optical wavelength; these stand-in indices sit
# well outside the optical range so the channel encoding cannot collide.
RADAR_SURROGATE_WAVELENGTHS_NM = np.array([100000.0, 110000.0])

MAGIC = b"GHT1"
FORMAT_VERSION = 1


class TileFormatError(ValueError):
    pass


class BadMagicError(TileFormatError):
    pass


class VersionError(TileFormatError):
    pass


class PayloadLengthError(TileFormatError):
    pass


@dataclass(frozen=True)
class HyperCube:
    """One multi-channel raster tile with physical metadata.

    Channels ``[0, n_optical)`` are optical; the remainder are radar
    polarizations with surrogate wavelength indices.
    """

    pixels: np.ndarray  # (C, H, W) float32
    resolution: float  # meters per pixel
    wavelengths: np.ndarray  # (C,) nanometers
    n_optical: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        wl = np.asarray(self.wavelengths, dtype=np.float64)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "wavelengths", wl)
        if px.ndim != 3:
            raise ValueError(f"pixels must be (C, H, W), got {px.shape}")
        if wl.shape != (px.shape[0],):
            raise ValueError(
                f"wavelength count {wl.shape} does not match {px.shape[0]} channels"
            )
        if np.any(wl <= 0):
            raise ValueError("wavelengths must be strictly positive")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if not 0 <= self.n_optical <= px.shape[0]:
            raise ValueError("n_optical out of range")

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def modality_tags(self) -> np.ndarray:
        tags = np.zeros(self.channels, dtype=np.uint8)
        tags[self.n_optical :] = 1
        return tags


def default_wavelengths(n_channels: int) -> np.ndarray:
    """Sentinel-2 band centers when they fit, otherwise an even spread."""
    if n_channels == len(SENTINEL2_WAVELENGTHS_NM):
        return SENTINEL2_WAVELENGTHS_NM.copy()
    return np.linspace(420.0, 2400.0, n_channels)


@dataclass
class SynthConfig:
    """Controls for the synthetic tile generator."""

    channels: int = 13
    height: int = 64
    width: int = 64
    resolution: float = 10.0
    wavelengths: np.ndarray | None = None
    correlation_length_m: float = 60.0  # metric scale of latent smoothness
    mixing_rank: int = 4
    n_classes: int = 4
    label_rule_seed: int = 7
    noise_level: float = 0.1
    n_radar: int = 0
    amplitude_spread: float = 1.0  # how widely field energies vary per tile
    label_margin: float = 1.25  # min top-two amplitude ratio; redraw below it

    def __post_init__(self):
        if self.wavelengths is None:
            self.wavelengths = default_wavelengths(self.channels)
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
        if self.correlation_length_m <= 0:
            raise ValueError("correlation length must be positive")
        if self.mixing_rank > self.channels:
            raise ValueError("mixing rank cannot exceed channel count")
        if self.n_classes > self.mixing_rank:
            raise ValueError("need one latent field per class")

    def all_wavelengths(self) -> np.ndarray:
        if self.n_radar == 0:
            return self.wavelengths
        radar = RADAR_SURROGATE_WAVELENGTHS_NM[: self.n_radar]
        if len(radar) < self.n_radar:
            radar = 100000.0 + 10000.0 * np.arange(self.n_radar)
        return np.concatenate([self.wavelengths, radar])


def _mixing_matrix(cfg: SynthConfig) -> np.ndarray:
    """Wavelength-dependent optical mixing, one Gaussian response per latent."""
    lam = cfg.wavelengths
    lo, hi = lam.min(), lam.max()
    span = max(hi - lo, 1.0)
    centers = np.linspace(lo, hi, cfg.mixing_rank)
    sigma = 0.8 * span / max(cfg.mixing_rank, 1)
    a = np.exp(-0.5 * ((lam[:, None] - centers[None, :]) / sigma) ** 2)
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    return a


def _radar_mixing(cfg: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.label_rule_seed, 0x5AD])
    b = rng.normal(size=(cfg.n_radar, cfg.mixing_rank))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    return b


def generate_tile(cfg: SynthConfig, seed: int) -> tuple[HyperCube, int]:
    """Draw one tile and its class label, deterministically from ``seed``.

    Latent fields are Gaussian-smoothed white noise standardized per tile,
    then scaled by per-tile amplitudes. The label is the argmax of the
    tile-pooled field energies over the first ``n_classes`` fields, a
    second-moment statistic no linear functional of the pixels exposes;
    amplitudes are redrawn until the top-two ratio reaches ``label_margin``
    so classes stay separable.
    """
    rng = np.random.default_rng([int(seed), cfg.label_rule_seed])
    h, w, k = cfg.height, cfg.width, cfg.mixing_rank
    sigma_px = cfg.correlation_length_m / cfg.resolution

    fields = np.empty((k, h, w))
    for j in range(k):
        noise = rng.normal(size=(h, w))
        if sigma_px > 1e-6:
            noise = gaussian_filter(noise, sigma=sigma_px, mode="reflect")
        std = noise.std()
        if std > 0:
            noise = (noise - noise.mean()) / std
        fields[j] = noise

    while True:
        amplitudes = np.exp(rng.normal(scale=cfg.amplitude_spread / 2, size=k))
        top2 = np.sort(amplitudes[: cfg.n_classes])[-2:]
        if cfg.n_classes < 2 or top2[1] >= cfg.label_margin * top2[0]:
            break
    fields *= amplitudes[:, None, None]
    label = int(np.argmax(amplitudes[: cfg.n_classes]))

    mix = _mixing_matrix(cfg)
    optical = np.tensordot(mix, fields, axes=(1, 0))
    if cfg.noise_level > 0:
        optical = optical + cfg.noise_level * rng.normal(size=optical.shape)

    parts = [optical]
    if cfg.n_radar > 0:
        radar = np.tensordot(_radar_mixing(cfg), fields, axes=(1, 0))
        if cfg.noise_level > 0:
            radar = radar + cfg.noise_level * rng.normal(size=radar.shape)
        parts.append(radar)

    pixels = np.concatenate(parts, axis=0).astype(np.float32)
    cube = HyperCube(
        pixels=pixels,
        resolution=cfg.resolution,
        wavelengths=cfg.all_wavelengths(),
        n_optical=cfg.channels,
    )
    return cube, label


# ---------------------------------------------------------------------------
# Tile file format: magic "GHT1", version u16, C u16, H u32, W u32,
# resolution f32, C wavelengths f32, C modality tags u8, then the payload of
# exactly C*H*W little-endian f32 values in channel-major order.

_HEADER = struct.Struct("<4sHHIIf")


def write_tile(cube: HyperCube, path: str) -> None:
    c, h, w = cube.pixels.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, c, h, w, cube.resolution))
        f.write(cube.wavelengths.astype("<f4").tobytes())
        f.write(cube.modality_tags.tobytes())
        f.write(np.ascontiguousarray(cube.pixels, dtype="<f4").tobytes())


def read_tile(path: str) -> HyperCube:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise PayloadLengthError(f"{path}: truncated header")
    magic, version, c, h, w, resolution = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    meta = 4 * c + c
    payload_len = c * h * w * 4
    if len(raw) != off + meta + payload_len:
        raise PayloadLengthError(
            f"{path}: expected {off + meta + payload_len} bytes, got {len(raw)}"
        )
    wavelengths = np.frombuffer(raw, dtype="<f4", count=c, offset=off).astype(np.float64)
    off += 4 * c
    tags = np.frombuffer(raw, dtype=np.uint8, count=c, offset=off)
    off += c
    pixels = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w)
    n_optical = int(np.sum(tags == 0))
    if np.any(tags[:n_optical] != 0) or np.any(tags[n_optical:] != 1):
        raise TileFormatError(f"{path}: modality tags must be optical block then radar block")
    return HyperCube(
        pixels=pixels.copy(),
        resolution=float(np.float32(resolution)),
        wavelengths=wavelengths,
        n_optical=n_optical,
    )


# ---------------------------------------------------------------------------
# Dataset-level normalization: clip each channel to its 3%..97% band over the
# whole dataset, then map that band affinely onto (0, 255).


@dataclass
class DatasetStats:
    lo: np.ndarray  # (C,) 3rd percentile
    hi: np.ndarray  # (C,) 97th percentile
    mean: np.ndarray
    std: np.ndarray


def compute_stats(cubes: list[HyperCube]) -> DatasetStats:
    c = cubes[0].channels
    per_channel = [np.concatenate([cu.pixels[i].reshape(-1) for cu in cubes]) for i in range(c)]
    lo = np.array([np.percentile(v, 3.0) for v in per_channel])
    hi = np.array([np.percentile(v, 97.0) for v in per_channel])
    mean = np.array([v.mean() for v in per_channel])
    std = np.array([v.std() for v in per_channel])
    return DatasetStats(lo=lo, hi=hi, mean=mean, std=std)


def normalize_tile(cube: HyperCube, stats: DatasetStats) -> HyperCube:
    out = np.empty_like(cube.pixels)
    for i in range(cube.channels):
        lo, hi = stats.lo[i], stats.hi[i]
        if hi <= lo:
            warnings.warn(f"channel {i} is constant; normalization left it unchanged")
            out[i] = cube.pixels[i]
            continue
        clipped = np.clip(cube.pixels[i], lo, hi)
        out[i] = (clipped - lo) / (hi - lo) * 255.0
    return HyperCube(
        pixels=out,
        resolution=cube.resolution,
        wavelengths=cube.wavelengths,
        n_optical=cube.n_optical,
    )


def augment(
    cube: HyperCube,
    seed: int,
    crop: int | None = None,
    force_flip: bool | None = None,
) -> HyperCube:
    """Random crop plus 50% horizontal flip, identical across all channels.

    Never resizes; the crop must fit inside the tile.
    """
    rng = np.random.default_rng(seed)
    px = cube.pixels
    if crop is not None:
        if crop > cube.height or crop > cube.width:
            raise ValueError(f"crop {crop} exceeds tile {cube.height}x{cube.width}")
        top = int(rng.integers(0, cube.height - crop + 1))
        left = int(rng.integers(0, cube.width - crop + 1))
        px = px[:, top : top + crop, left : left + crop]
    flip = bool(rng.random() < 0.5) if force_flip is None else force_flip
    if flip:
        px = px[:, :, ::-1]
    return HyperCube(
        pixels=np.ascontiguousarray(px),
        resolution=cube.resolution,
        wavelengths=cube.wavelengths,
        n_optical=cube.n_optical,
    )


# ---------------------------------------------------------------------------
# Manifests: one record per line, "path=<rel> label=<int> split=<name>"


def write_manifest(records: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            parts = [f"path={rec['path']}"]
            if rec.get("label") is not None:
                parts.append(f"label={rec['label']}")
            parts.append(f"split={rec.get('split', 'train')}")
            f.write(" ".join(parts) + "\n")


def read_manifest(path: str) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rec: dict = {"label": None}
            for tok in line.split():
                key, _, val = tok.partition("=")
                if key == "label":
                    rec[key] = int(val)
                else:
                    rec[key] = val
            records.append(rec)
    return records


def generate_dataset(
    cfg: SynthConfig,
    n_tiles: int,
    out_dir: str,
    seed: int,
    val_fraction: float = 0.1,
    test_fraction: float = 0.2,
) -> str:
    """Write ``n_tiles`` tiles plus a manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    n_test = int(round(n_tiles * test_fraction))
    n_val = int(round(n_tiles * val_fraction))
    for i in range(n_tiles):
        cube, label = generate_tile(cfg, seed=seed + i)
        name = f"tile_{i:06d}.ght"
        write_tile(cube, os.path.join(out_dir, name))
        if i < n_tiles - n_test - n_val:
            split = "train"
        elif i < n_tiles - n_test:
            split = "val"
        else:
            split = "test"
        records.append({"path": name, "label": label, "split": split})
    manifest = os.path.join(out_dir, "manifest.txt")
    write_manifest(records, manifest)
    return manifest

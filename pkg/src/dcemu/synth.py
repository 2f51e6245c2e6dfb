"""
Synthetic atmosphere used as the teacher model, plus tile and patch plumbing.

The forward model is a closed-form single-scattering style approximation::

    TOA = path + t * SR / (1 - S * SR)

with, for total optical depth ``tau = tau_R + tau_A``,

* ``path = (0.75 tau_R + 0.4 tau_A) / (4 mu_s mu_v)``
* ``t    = exp(-0.5 tau (1/mu_s + 1/mu_v))``
* ``S    = 0.3 (1 - exp(-tau))``

``tau_R`` is a per-band Rayleigh coefficient and ``tau_A = AOD * k_A`` with a
per-band aerosol coefficient ``k_A = (lambda / 0.55) ** -1.3``.  Path
reflectance grows with AOD and solar zenith, transmittance falls with both and
the spherical albedo stays in ``[0, 0.3)``.  Cloudy pixels report a bright,
smooth cloud albedo instead.
"""
from __future__ import annotations

import hashlib
import os
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, CorruptFileError, DataError, VersionMismatchError
from .model import Batch

BANDS = ("blue", "green", "red", "nir", "swir1", "swir2")
WAVELENGTHS = np.array([0.46, 0.51, 0.64, 0.86, 1.6, 2.3])
# clear-sky reflectance level and relative dispersion per band
SR_MEAN = np.array([0.064, 0.084, 0.155, 0.307, 0.327, 0.231])
SR_CV = np.array([0.88, 0.80, 0.62, 0.34, 0.38, 0.51])
RAYLEIGH = 0.0088 * WAVELENGTHS ** -4.05
AEROSOL = (WAVELENGTHS / 0.55) ** -1.3

INPUT_CHANNELS = tuple(f"toa_{b}" for b in BANDS) + ("cos_sza", "aod")
TARGET_CHANNELS = tuple(f"sr_{b}" for b in BANDS)
TILE_CHANNELS = INPUT_CHANNELS + TARGET_CHANNELS + ("clear", "class")


@dataclass
class SceneParams:
    sr: np.ndarray                  # [H, W, bands]
    aod: np.ndarray                 # [H, W]
    sza: np.ndarray                 # [H, W], degrees
    cloud: np.ndarray               # [H, W] uint8, 1 = cloud
    class_map: np.ndarray | None = None
    cloud_albedo: np.ndarray | None = None   # [H, W, bands]
    rayleigh: np.ndarray = field(default_factory=lambda: RAYLEIGH.copy())
    aerosol: np.ndarray = field(default_factory=lambda: AEROSOL.copy())
    vza: float = 0.0

    def __post_init__(self):
        if np.any(self.sr < 0) or np.any(self.sr > 1):
            raise DataError("surface reflectance outside [0, 1]")
        if np.any(self.aod < 0):
            raise DataError("negative aerosol optical depth")
        if not np.isin(self.cloud, (0, 1)).all():
            raise DataError("cloud mask must be binary")


def atmosphere(rayleigh, aerosol, aod, sza, vza=0.0):
    """Path reflectance, transmittance and spherical albedo."""
    mu_s = np.cos(np.radians(sza))
    mu_v = np.cos(np.radians(vza))
    tau_r = rayleigh
    tau_a = aod * aerosol
    tau = tau_r + tau_a
    path = (0.75 * tau_r + 0.4 * tau_a) / (4.0 * mu_s * mu_v)
    trans = np.exp(-0.5 * tau * (1.0 / mu_s + 1.0 / mu_v))
    albedo = 0.3 * (1.0 - np.exp(-tau))
    return path, trans, albedo


def toa_forward(scene, band):
    """TOA reflectance field for ``band`` (index or name)."""
    b = BANDS.index(band) if isinstance(band, str) else int(band)
    sr = scene.sr[..., b]
    path, trans, albedo = atmosphere(scene.rayleigh[b], scene.aerosol[b], scene.aod,
                                     scene.sza, scene.vza)
    toa = path + trans * sr / (1.0 - albedo * sr)
    if scene.cloud_albedo is not None:
        toa = np.where(scene.cloud > 0, scene.cloud_albedo[..., b], toa)
    return np.clip(toa, 0.0, 1.0)


def _smooth_field(rng, h, w, sigma):
    """Zero-mean, unit-variance band-limited random field."""
    f = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    return (f - f.mean()) / f.std()


@dataclass
class SceneConfig:
    cloud_coverage: float = 0.3
    smoothness: float = 4.0
    band_correlation: float = 0.7
    n_classes: int = 4
    sza_range: tuple = (10.0, 60.0)
    aod_range: tuple = (0.05, 0.5)
    vza: float = 0.0


def generate_scene(seed, height, width, config=None):
    """Deterministic random scene for ``seed``."""
    cfg = config or SceneConfig()
    if height < 50 or width < 50:
        raise ConfigError("scene must be at least 50x50 pixels")
    if not 0.0 <= cfg.cloud_coverage <= 1.0:
        raise ConfigError("cloud coverage must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    h, w = height, width
    shared = _smooth_field(rng, h, w, cfg.smoothness)
    rho = cfg.band_correlation
    sigma = np.sqrt(np.log1p(SR_CV ** 2))
    sr = np.empty((h, w, len(BANDS)))
    for b in range(len(BANDS)):
        g = np.sqrt(rho) * shared + np.sqrt(1 - rho) * _smooth_field(rng, h, w, cfg.smoothness)
        sr[..., b] = SR_MEAN[b] * np.exp(sigma[b] * g - 0.5 * sigma[b] ** 2)
    sr = np.clip(sr, 0.0, 1.0)

    aod_mean = rng.uniform(*cfg.aod_range)
    aod = aod_mean * np.exp(0.4 * _smooth_field(rng, h, w, 2 * cfg.smoothness) - 0.08)

    sza0 = rng.uniform(*cfg.sza_range)
    ramp = np.linspace(-5.0, 5.0, w)
    sza = np.broadcast_to(sza0 + ramp, (h, w)).copy()

    cloud_field = _smooth_field(rng, h, w, 1.5 * cfg.smoothness)
    if cfg.cloud_coverage <= 0:
        cloud = np.zeros((h, w), np.uint8)
    elif cfg.cloud_coverage >= 1:
        cloud = np.ones((h, w), np.uint8)
    else:
        cut = np.quantile(cloud_field, 1.0 - cfg.cloud_coverage)
        cloud = (cloud_field > cut).astype(np.uint8)
    texture = ndimage.gaussian_filter(rng.uniform(size=(h, w)), cfg.smoothness / 2, mode="wrap")
    texture = (texture - texture.min()) / max(np.ptp(texture), 1e-12)
    albedo = 0.65 + 0.25 * texture
    tint = rng.uniform(-0.02, 0.02, size=len(BANDS))
    cloud_albedo = np.clip(albedo[..., None] + tint, 0.6, 0.95)

    edges = np.quantile(shared, np.linspace(0, 1, cfg.n_classes + 1)[1:-1])
    class_map = np.digitize(shared, edges).astype(np.uint8)
    return SceneParams(sr, aod, sza, cloud, class_map, cloud_albedo, vza=cfg.vza)


def teacher_retrieval(scene, seed):
    """Teacher surface reflectance: truth plus brightness-dependent retrieval noise."""
    rng = np.random.default_rng([seed, 7])
    noise_sd = 0.003 + 0.02 * scene.sr
    sr = np.clip(scene.sr + noise_sd * rng.standard_normal(scene.sr.shape), 0.0, 1.0)
    sr[scene.cloud > 0] = np.nan
    return sr


# ---------------------------------------------------------------------------
# tiles


@dataclass
class TileDataset:
    tile_id: str
    inputs: np.ndarray          # [H, W, C]
    target: np.ndarray          # [H, W, bands], NaN where cloudy
    clear: np.ndarray           # [H, W] uint8
    class_map: np.ndarray | None = None
    acquisition: int = 0
    input_names: tuple = INPUT_CHANNELS

    @property
    def height(self):
        return self.inputs.shape[0]

    @property
    def width(self):
        return self.inputs.shape[1]

    def channels(self):
        """Channel name -> 2-D array, the on-disk layout."""
        out = {n: self.inputs[..., i] for i, n in enumerate(self.input_names)}
        out.update({n: self.target[..., i] for i, n in enumerate(TARGET_CHANNELS)})
        out["clear"] = self.clear
        if self.class_map is not None:
            out["class"] = self.class_map
        return out

    @classmethod
    def from_channels(cls, tile_id, channels, acquisition=0):
        names = tuple(n for n in channels if n.startswith("toa_")) + tuple(
            n for n in ("cos_sza", "aod") if n in channels)
        missing = [n for n in TARGET_CHANNELS + ("clear",) if n not in channels]
        if missing:
            raise DataError(f"tile {tile_id}: missing channels {missing}")
        inputs = np.stack([channels[n] for n in names], axis=-1).astype(float)
        target = np.stack([channels[n] for n in TARGET_CHANNELS], axis=-1).astype(float)
        clear = np.asarray(channels["clear"]).astype(np.uint8)
        cmap = channels.get("class")
        cmap = None if cmap is None else np.asarray(cmap).astype(np.int64)
        return cls(tile_id, inputs, target, clear, cmap, acquisition, names)


def make_tile(seed, height=100, width=100, config=None, tile_id=None):
    scene = generate_scene(seed, height, width, config)
    toa = np.stack([toa_forward(scene, b) for b in range(len(BANDS))], axis=-1)
    inputs = np.concatenate(
        [toa, np.cos(np.radians(scene.sza))[..., None], scene.aod[..., None]], axis=-1)
    # the raster format stores float32; round now so in-memory and on-disk tiles agree
    inputs = inputs.astype(np.float32).astype(float)
    target = teacher_retrieval(scene, seed).astype(np.float32).astype(float)
    return TileDataset(tile_id or f"tile{seed:05d}", inputs, target,
                       (1 - scene.cloud).astype(np.uint8), scene.class_map.astype(np.int64),
                       acquisition=seed)


TILE_MAGIC = b"GTIL"
TILE_VERSION = 1


def encode_raster(channels):
    """Serialize an ordered ``name -> 2-D array`` mapping to raster bytes."""
    names = list(channels)
    if not names:
        raise DataError("raster needs at least one channel")
    h, w = np.shape(channels[names[0]])
    parts = [TILE_MAGIC, struct.pack("<HIII", TILE_VERSION, h, w, len(names))]
    for n in names:
        if np.shape(channels[n]) != (h, w):
            raise DataError(f"channel {n!r} has shape {np.shape(channels[n])}, expected {(h, w)}")
        raw = n.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    for n in names:
        parts.append(np.ascontiguousarray(channels[n], dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_raster(blob):
    if len(blob) < 4 + 14 + 4 or blob[:4] != TILE_MAGIC:
        raise CorruptFileError("not a raster tile (bad magic or too short)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFileError("raster checksum mismatch")
    version, h, w, n = struct.unpack_from("<HIII", body, 4)
    if version != TILE_VERSION:
        raise VersionMismatchError(f"raster version {version} unsupported (expected {TILE_VERSION})")
    off = 18
    names = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", body, off)
        off += 2
        names.append(body[off:off + ln].decode("utf-8"))
        off += ln
    size = h * w * 4
    if len(body) - off != n * size:
        raise CorruptFileError("raster payload length mismatch")
    out = {}
    for name in names:
        out[name] = np.frombuffer(body, dtype="<f4", count=h * w, offset=off).reshape(h, w).astype(float)
        off += size
    return out


def atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_raster(path, channels):
    blob = encode_raster(channels)
    atomic_write(path, blob)
    return zlib.crc32(blob)


def read_raster(path):
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"raster not found: {path}") from None
    return decode_raster(blob)


def save_tile(tile, path):
    return write_raster(path, tile.channels())


def load_tile(path, tile_id=None, acquisition=0):
    path = Path(path)
    return TileDataset.from_channels(tile_id or path.stem, read_raster(path), acquisition)


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass
class ManifestEntry:
    tile_id: str
    path: str
    split: str
    seed: int


@dataclass
class Manifest:
    entries: list
    params: dict = field(default_factory=dict)

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def to_text(self):
        lines = [f"# {k}={v}" for k, v in sorted(self.params.items())]
        lines += [f"{e.tile_id}\t{e.path}\t{e.split}\t{e.seed}" for e in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        params, entries = {}, []
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                params[k] = v
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise DataError(f"bad manifest line: {line!r}")
            entries.append(ManifestEntry(fields[0], fields[1], fields[2], int(fields[3])))
        return cls(entries, params)

    def write(self, path):
        atomic_write(path, self.to_text())

    @classmethod
    def read(cls, path):
        try:
            return cls.from_text(Path(path).read_text())
        except FileNotFoundError:
            raise DataError(f"manifest not found: {path}") from None


def scene_config_params(cfg, height, width):
    return {"height": str(height), "width": str(width), "cloud_coverage": repr(cfg.cloud_coverage),
            "smoothness": repr(cfg.smoothness), "band_correlation": repr(cfg.band_correlation),
            "n_classes": str(cfg.n_classes), "vza": repr(cfg.vza)}


def scene_config_from_params(params):
    cfg = SceneConfig(cloud_coverage=float(params.get("cloud_coverage", 0.3)),
                      smoothness=float(params.get("smoothness", 4.0)),
                      band_correlation=float(params.get("band_correlation", 0.7)),
                      n_classes=int(params.get("n_classes", 4)),
                      vza=float(params.get("vza", 0.0)))
    return cfg, int(params.get("height", 100)), int(params.get("width", 100))


def build_dataset(train_seeds, test_seeds, root=None, height=100, width=100, config=None):
    """Generate train and test tiles; split is by acquisition (seed), never by pixel.

    With ``root`` the tiles and ``manifest.txt`` are written there.
    """
    train_seeds, test_seeds = list(train_seeds), list(test_seeds)
    overlap = set(train_seeds) & set(test_seeds)
    if overlap:
        raise ConfigError(f"seeds appear in both splits: {sorted(overlap)}")
    cfg = config or SceneConfig()
    train, test, entries = [], [], []
    for split, seeds, bucket in (("train", train_seeds, train), ("test", test_seeds, test)):
        for seed in seeds:
            tile = make_tile(seed, height, width, cfg)
            bucket.append(tile)
            rel = f"tiles/{tile.tile_id}.gtil"
            entries.append(ManifestEntry(tile.tile_id, rel, split, seed))
            if root is not None:
                save_tile(tile, Path(root) / rel)
    manifest = Manifest(entries, scene_config_params(cfg, height, width))
    if root is not None:
        manifest.write(Path(root) / "manifest.txt")
    return train, test, manifest


def regenerate(manifest):
    """Rebuild the tiles a manifest describes, in manifest order."""
    cfg, h, w = scene_config_from_params(manifest.params)
    return [make_tile(e.seed, h, w, cfg, tile_id=e.tile_id) for e in manifest.entries]


def load_split(root, split):
    root = Path(root)
    manifest = Manifest.read(root / "manifest.txt")
    return [load_tile(root / e.path, e.tile_id, e.seed) for e in manifest.split(split)]


def file_checksum(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# patches and normalization


def extract_patches(tile, size=50, stride=None):
    """Yield ``(row, col, Batch)`` patches in row-major scan order.

    Patches that would cross the tile edge are dropped.
    """
    stride = size if stride is None else stride
    if size > tile.height or size > tile.width:
        raise DataError(f"patch size {size} exceeds tile {tile.height}x{tile.width}")
    for r in range(0, tile.height - size + 1, stride):
        for c in range(0, tile.width - size + 1, stride):
            sl = (slice(r, r + size), slice(c, c + size))
            yield r, c, Batch(tile.inputs[sl][None], tile.target[sl][None], tile.clear[sl][None])


def stack_patches(tiles, size=50, stride=None, stats=None):
    """All patches of ``tiles`` as one :class:`Batch`, optionally normalized."""
    xs, ys, ms = [], [], []
    for tile in tiles:
        for _, _, b in extract_patches(tile, size, stride):
            xs.append(b.inputs)
            ys.append(b.target)
            ms.append(b.clear)
    if not xs:
        raise DataError("no patches extracted")
    x = np.concatenate(xs)
    if stats is not None:
        x = normalize(x, stats)
    return Batch(x, np.concatenate(ys), np.concatenate(ms))


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    names: tuple = INPUT_CHANNELS

    def to_dict(self):
        return {"names": list(self.names), "mean": [float(v) for v in self.mean],
                "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], float), np.array(d["std"], float), tuple(d["names"]))


STD_FLOOR = 1e-6


def fit_stats(tiles):
    """Per-channel mean and population std over training tiles."""
    x = np.concatenate([t.inputs.reshape(-1, t.inputs.shape[-1]) for t in tiles])
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    low = std < STD_FLOOR
    if low.any():
        names = [n for n, l in zip(tiles[0].input_names, low) if l]
        warnings.warn(f"near-constant channels {names}; std floored at {STD_FLOOR}", stacklevel=2)
        std = np.where(low, STD_FLOOR, std)
    return NormStats(mean, std, tuple(tiles[0].input_names))


def normalize(x, stats):
    return (np.asarray(x, dtype=float) - stats.mean) / stats.std


def denormalize(x, stats):
    return np.asarray(x, dtype=float) * stats.std + stats.mean

"""
Mask-and-infill counterfactual explainer.

optimize_mask() searches for the sparsest smooth mask m whose infilled
perturbation Phi(x; m) = (1 - m) * x + m * infill(x) moves the SUT decision
by at least the flip margin. decisive_map() averages the masks of seeds
1..k_cf in seed order and pools the mean to 16x16; dff_distance() is the MSE
between two pooled maps.

Maps are carried at float32 precision, the precision of the .mfdm cache, so a
map read back from disk is bit-identical to a freshly computed one.

Cache file (.mfdm): b"MFDM", 12-byte SUT id, 12-byte image id, 12-byte
config hash, u32 height, u32 width, float32 full map, 256 float32 pooled
values, trailing CRC32.
"""

import os
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from numerics import (POOL_SIDE, Rng, bilinear_matrix, check_image, mse, pearson,
                      pool_to_16x16, total_variation, total_variation_grad)
from sut import forward, input_gradient, randomize_weights
from toolkit_utils import (ConfigurationError, CorruptFileError, DimensionError,
                           NumericError, atomic_write_bytes, seal, short_hash, unseal)

MAP_MAGIC = b"MFDM"
ID_BYTES = 12
# maps held in memory by one MapCache (a 128x128 map is about 64 KiB)
MEMORY_CAPACITY = 256

# Decision-change margins when CfConfig.flip_margin is unset
DEFAULT_FLIP_MARGIN = {"steering": 0.1, "segmentation": 0.5}


class CfConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    k_cf: int = Field(80, ge=1)
    steps: int = Field(80, ge=1)
    mask_resolution: int = Field(32, ge=2)
    lambda_sparsity: float = Field(0.05, ge=0)
    lambda_tv: float = Field(0.1, ge=0)
    flip_margin: Optional[float] = Field(None, gt=0)
    infill: Literal["blur", "mean"] = "blur"
    infill_radius: int = Field(5, ge=1)
    step_size: float = Field(0.05, gt=0)
    patience: int = Field(10, ge=1)
    init_high: float = Field(0.5, ge=0, le=1)

    def margin_for(self, kind):
        return self.flip_margin if self.flip_margin is not None else DEFAULT_FLIP_MARGIN[kind]

    def config_hash(self):
        return short_hash(self.model_dump())

    def seeds(self):
        return tuple(range(1, self.k_cf + 1))

    def reduced(self):
        """Profile used inside calibration training."""
        return self.model_copy(update={"k_cf": 8, "steps": 30})


@dataclass(frozen=True)
class DecisiveMap:
    full: np.ndarray
    pooled: np.ndarray
    sut_id: str
    image_id: str
    config_hash: str
    seeds: Tuple[int, ...]


def sut_id(sut):
    return short_hash(f"{sut.name}:{sut.checksum():08x}")


def image_id(x):
    return short_hash(np.ascontiguousarray(x, dtype=np.float64).tobytes())


def to_map_precision(m):
    return np.asarray(m, dtype=np.float32).astype(np.float64)


# =============================================================================
# Mask optimisation
# =============================================================================

def infill(x, cfg):
    if cfg.infill == "mean":
        return np.broadcast_to(x.mean(axis=(0, 1), keepdims=True), x.shape).copy()
    # Gaussian blur whose kernel reaches exactly infill_radius pixels
    sigma = cfg.infill_radius / 2.0
    return ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0.0), mode="nearest", truncate=2.0)


def _flip_objective(kind, reference, margin, record):
    """Hinged flip term -min(d / margin, 1) and its gradient w.r.t. SUT outputs."""
    def objective(values):
        diff = values - reference
        if kind == "steering":
            d = float(np.abs(diff).sum())
            direction = np.where(diff >= 0, 1.0, -1.0)
        else:
            d = float(np.abs(diff).mean())
            direction = np.where(diff >= 0, 1.0, -1.0) / diff.size
        record["d"] = d
        if d >= margin:
            return -1.0, np.zeros_like(values)
        return -d / margin, -direction / margin
    return objective


def optimize_mask(sut, x, cfg, seed):
    """Counterfactual mask m* in [0, 1] for one seed (HxW, float32 precision)."""
    x = check_image(x)
    if tuple(x.shape) != sut.input_shape:
        raise DimensionError(f"image {x.shape} does not match {sut.name} input {sut.input_shape}")
    h, w, _ = x.shape
    r = cfg.mask_resolution
    up_h, up_w = bilinear_matrix(r, h), bilinear_matrix(r, w)
    delta = infill(x, cfg) - x
    margin = cfg.margin_for(sut.kind)
    reference = forward(sut, x).values

    p = Rng(seed).substream("cf-init").uniform(0.0, cfg.init_high, size=(r, r))
    best_sparsity = np.inf
    stale = 0
    for _ in range(cfg.steps):
        m = up_h @ p @ up_w.T
        record = {}
        objective = _flip_objective(sut.kind, reference, margin, record)
        grad_phi = input_gradient(sut, x + m[:, :, None] * delta, objective)
        d = record["d"]
        sparsity = float(m.mean())
        loss = -min(d / margin, 1.0) + cfg.lambda_sparsity * sparsity + cfg.lambda_tv * total_variation(m)
        if not np.isfinite(loss):
            raise NumericError(f"{sut.name}: non-finite counterfactual loss")

        if sparsity < best_sparsity:
            best_sparsity, stale = sparsity, 0
        else:
            stale += 1
        if d >= margin and stale >= cfg.patience:
            break

        grad_m = ((grad_phi * delta).sum(axis=2)
                  + cfg.lambda_sparsity / m.size
                  + cfg.lambda_tv * total_variation_grad(m))
        grad_p = up_h.T @ grad_m @ up_w
        if not np.all(np.isfinite(grad_p)):
            raise NumericError(f"{sut.name}: non-finite mask gradient")
        # projected sign step keeps every cell inside [0, 1]
        p = np.clip(p - cfg.step_size * np.sign(grad_p), 0.0, 1.0)

    return to_map_precision(np.clip(up_h @ p @ up_w.T, 0.0, 1.0))


def average_masks(masks):
    """Seed-order mean of per-seed masks, at map precision."""
    if not masks:
        raise ValueError("need at least one mask")
    total = np.zeros_like(masks[0], dtype=np.float64)
    for m in masks:
        total = total + m
    return to_map_precision(total / len(masks))


def make_map(full, sut_ident, image_ident, config_hash, seeds):
    full = to_map_precision(full)
    return DecisiveMap(full, pool_to_16x16(full), sut_ident, image_ident, config_hash, tuple(seeds))


def decisive_map(sut, x, cfg, cache=None, seeds=None, image_ident=None):
    """H(F(x)): mean of optimize_mask over seeds 1..k_cf, pooled, optionally cached."""
    seeds = tuple(seeds) if seeds is not None else cfg.seeds()
    key = (sut_id(sut), image_ident or image_id(x), cfg.config_hash())
    if cache is not None and seeds == cfg.seeds():
        hit = cache.get(key, seeds)
        if hit is not None:
            return hit
    masks = [optimize_mask(sut, x, cfg, seed) for seed in seeds]
    result = make_map(average_masks(masks), *key, seeds)
    if cache is not None and seeds == cfg.seeds():
        cache.put(result)
    return result


def dff_distance(map_r, map_s):
    """MSE between pooled maps produced by the same SUT and CF config."""
    if map_r.sut_id != map_s.sut_id:
        raise ConfigurationError(f"decisive maps from different SUTs ({map_r.sut_id} vs {map_s.sut_id})")
    if map_r.config_hash != map_s.config_hash:
        raise ConfigurationError(
            f"decisive maps from different CF configs ({map_r.config_hash} vs {map_s.config_hash})")
    return mse(map_r.pooled, map_s.pooled)


def mask_mass_fraction(m, region):
    """Share of a mask's total mass that lies inside a boolean region."""
    total = float(np.sum(m))
    return float(np.sum(m[region]) / total) if total > 0 else 0.0


def sanity_check(sut, images, cfg, rng):
    """Mean |Pearson| between pooled maps of the SUT and a weight-randomised copy.

    Values near 0 mean the explainer is sensitive to the model, not just the image.
    """
    randomized = randomize_weights(sut, rng)
    correlations = []
    for x in images:
        trained = decisive_map(sut, x, cfg)
        shuffled = decisive_map(randomized, x, cfg)
        correlations.append(abs(pearson(trained.pooled, shuffled.pooled)))
    return float(np.mean(correlations))


# =============================================================================
# Cache
# =============================================================================

def encode_map(dm):
    h, w = dm.full.shape
    body = b"".join([
        dm.sut_id.encode().ljust(ID_BYTES)[:ID_BYTES],
        dm.image_id.encode().ljust(ID_BYTES)[:ID_BYTES],
        dm.config_hash.encode().ljust(ID_BYTES)[:ID_BYTES],
        struct.pack("<II", h, w),
        dm.full.astype("<f4").tobytes(),
        dm.pooled.astype("<f4").tobytes(),
    ])
    return seal(MAP_MAGIC, body)


def decode_map(data, seeds, path="<bytes>"):
    body = unseal(data, MAP_MAGIC, path)
    header = 3 * ID_BYTES
    if len(body) < header + 8:
        raise CorruptFileError(f"{path}: truncated decisive map")
    ids = [body[i * ID_BYTES:(i + 1) * ID_BYTES].decode(errors="replace").strip() for i in range(3)]
    h, w = struct.unpack_from("<II", body, header)
    n_full, n_pooled = h * w, POOL_SIDE * POOL_SIDE
    if len(body) != header + 8 + 4 * (n_full + n_pooled):
        raise CorruptFileError(f"{path}: payload size does not match {h}x{w} map")
    full = np.frombuffer(body, dtype="<f4", count=n_full, offset=header + 8).reshape(h, w)
    stored = np.frombuffer(body, dtype="<f4", count=n_pooled, offset=header + 8 + 4 * n_full)
    dm = make_map(full, *ids, seeds)
    if not np.allclose(dm.pooled.ravel(), stored, atol=1e-6):
        raise CorruptFileError(f"{path}: pooled values disagree with full map")
    return dm


class MapCache:
    """Decisive maps keyed by (SUT id, image id, config hash), in memory and on disk.

    The memory tier keeps the capacity most recently used maps; evicted maps
    are reloaded from disk when a directory is set. Lookups and inserts are
    serialised by one lock; disk writes are atomic.
    """

    def __init__(self, directory=None, capacity=MEMORY_CAPACITY):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.directory = directory
        self.capacity = capacity
        self._memory = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.recovered = 0
        if directory:
            os.makedirs(directory, exist_ok=True)

    def _remember(self, key, dm):
        self._memory[key] = dm
        self._memory.move_to_end(key)
        while len(self._memory) > self.capacity:
            self._memory.popitem(last=False)

    def __len__(self):
        with self._lock:
            return len(self._memory)

    def _path(self, key):
        return os.path.join(self.directory, "-".join(key) + ".mfdm")

    def get(self, key, seeds=None):
        with self._lock:
            if key in self._memory:
                self._memory.move_to_end(key)
                self.hits += 1
                return self._memory[key]
        if self.directory and os.path.exists(self._path(key)):
            path = self._path(key)
            try:
                with open(path, "rb") as f:
                    dm = decode_map(f.read(), seeds or (), path)
            except CorruptFileError as e:
                print(f"  WARNING: {e}; recomputing")
                with self._lock:
                    self.recovered += 1
                return None
            with self._lock:
                self._remember(key, dm)
                self.hits += 1
            return dm
        with self._lock:
            self.misses += 1
        return None

    def put(self, dm):
        key = (dm.sut_id, dm.image_id, dm.config_hash)
        with self._lock:
            self._remember(key, dm)
        if self.directory:
            atomic_write_bytes(self._path(key), encode_map(dm))

"""
Core numerics shared by every toolkit module.

Images are numpy arrays shaped (height, width, channels) with float64
intensities in [0, 1]; decisive maps are (height, width) arrays. Everything
here is a pure function except Rng, which is single-caller: split it with
substream() instead of sharing it across threads.
"""

import numpy as np

from toolkit_utils import DimensionError, hash_to_u64

POOL_SIDE = 16
PERCEPTUAL_SCALES = 3
MASK64 = (1 << 64) - 1

# Luminance weights for RGB -> gray
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


# =============================================================================
# Deterministic randomness
# =============================================================================

class Rng:
    """Counter-based (Philox) generator with splittable substreams.

    Rng(seed) always yields the same draw sequence on every platform, and
    substream(tag, index) is a pure function of (seed, tag, index), so a
    child stream never depends on how much the parent has been consumed.
    """

    def __init__(self, seed):
        self.seed = int(seed) & MASK64
        key = hash_to_u64(f"philox:{self.seed}")
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def substream(self, tag, index=0):
        return Rng(hash_to_u64(f"{self.seed}:{tag}:{index}"))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed})"


# =============================================================================
# Images
# =============================================================================

def check_image(x, name="image"):
    """Validate an image array; returns it as float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] not in (1, 3):
        raise DimensionError(f"{name} must be HxWxC with C in (1, 3), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite intensities")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError(f"{name} intensities must lie in [0, 1]")
    return x


def to_gray(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x
    if x.shape[2] == 1:
        return x[:, :, 0]
    return x @ GRAY_WEIGHTS


def _require_same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


# =============================================================================
# Distances and map operations
# =============================================================================

def mse(a, b):
    """Mean of squared element differences between equal-shape grids."""
    a, b = _require_same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def bin_starts(n, bins=POOL_SIDE):
    """Start offsets of `bins` contiguous near-equal bins over n items.

    Remainder items go to the leading bins (np.array_split convention).
    """
    base, extra = divmod(n, bins)
    sizes = np.full(bins, base, dtype=np.int64)
    sizes[:extra] += 1
    return np.concatenate([[0], np.cumsum(sizes)[:-1]]), sizes


def pool_to_16x16(m):
    """Average-pool a per-pixel map into a 16x16 grid of bin means."""
    return pool_to_grid(m, POOL_SIDE)


def pool_to_grid(m, side):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"map must be 2-D, got shape {m.shape}")
    h, w = m.shape
    if h < side or w < side:
        raise DimensionError(f"map must be at least {side}x{side}, got {h}x{w}")
    row_starts, row_sizes = bin_starts(h, side)
    col_starts, col_sizes = bin_starts(w, side)
    sums = np.add.reduceat(np.add.reduceat(m, row_starts, axis=0), col_starts, axis=1)
    return sums / np.outer(row_sizes, col_sizes)


def total_variation(m):
    """Sum of absolute horizontal and vertical neighbour differences per pixel."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise DimensionError(f"total variation needs a 2-D map of at least 2x2, got {m.shape}")
    horizontal = np.abs(np.diff(m, axis=1)).sum()
    vertical = np.abs(np.diff(m, axis=0)).sum()
    return float((horizontal + vertical) / m.size)


def total_variation_grad(m):
    """Subgradient of total_variation with respect to every pixel."""
    m = np.asarray(m, dtype=np.float64)
    grad = np.zeros_like(m)
    sh = np.sign(np.diff(m, axis=1))
    sv = np.sign(np.diff(m, axis=0))
    grad[:, 1:] += sh
    grad[:, :-1] -= sh
    grad[1:, :] += sv
    grad[:-1, :] -= sv
    return grad / m.size


def gradient_magnitude(x):
    """Forward-difference gradient magnitude scaled into [0, 1] per channel."""
    gx = np.diff(x, axis=1, append=x[:, -1:])
    gy = np.diff(x, axis=0, append=x[-1:, :])
    return np.sqrt(gx ** 2 + gy ** 2) / np.sqrt(2.0)


def downsample2(x):
    """2x2 block average, dropping an odd trailing row/column."""
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def bilinear_matrix(n_in, n_out):
    """Resampling matrix (n_out x n_in) for half-pixel-centred bilinear interpolation.

    Rows are convex weights, so resampling a [0, 1] map stays in [0, 1].
    """
    matrix = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    low = np.floor(src).astype(np.int64)
    high = np.minimum(low + 1, n_in - 1)
    frac = src - low
    rows = np.arange(n_out)
    np.add.at(matrix, (rows, low), 1.0 - frac)
    np.add.at(matrix, (rows, high), frac)
    return matrix


def pearson(a, b):
    """Pearson correlation of two flattened arrays; 0 when either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return 0.0
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0))


def perceptual_distance(a, b):
    """Fixed multi-scale structural distance between two images, in [0, 1].

    Each of 3 dyadic scales contributes 0.5*MSE + 0.5*G, where G is the MSE
    of normalised gradient magnitudes. The scale mean is divided by 0.5, the
    value a full-range constant offset reaches, then clamped.
    """
    a, b = _require_same_shape(a, b)
    terms = []
    for scale in range(PERCEPTUAL_SCALES):
        if scale:
            if min(a.shape[0], a.shape[1]) < 2:
                break
            a, b = downsample2(a), downsample2(b)
        pixel = np.mean((a - b) ** 2)
        structure = np.mean((gradient_magnitude(a) - gradient_magnitude(b)) ** 2)
        terms.append(0.5 * pixel + 0.5 * structure)
    return float(np.clip(np.mean(terms) / 0.5, 0.0, 1.0))

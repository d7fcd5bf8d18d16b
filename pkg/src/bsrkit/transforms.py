"""Input transformations and their exact adjoints.

Every randomised transform is sampled into a list of *copies*; a copy is a
chain of linear (or affine) stages acting on one (C, H, W) image. Stages
know their transpose, so gradients computed on transformed images are
routed back to the original image exactly.

Block shuffle and rotation (BSR) splits an image into ``n`` horizontal
strips at random rows, permutes the strips, splits every strip into ``n``
blocks at random columns, permutes the blocks inside the strip and rotates
each block about its centre by an angle drawn from [-tau, tau]. Rotated
content that leaves the block is dropped and uncovered pixels are zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConfigurationError, ShapeError
from .validation import check_images, check_random_state

__all__ = [
    "BsrConfig", "TransformRecord", "sample_bsr", "apply_bsr", "backprop_bsr", "unshuffle_bsr",
    "bsr_gather_map", "discarded_pixels", "apply_dim", "make_tim_kernel", "smooth_gradient",
    "sim_scales", "admix_images", "Bsr", "Dim", "TimKernel", "Sim", "Admix", "Composite",
    "GatherMap", "Scale", "AddConstant", "apply_chain", "adjoint_chain", "parse_transform",
    "BlockShuffleRotation",
]

INTERPOLATIONS = ("nearest", "bilinear")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GatherMap:
    """Sparse spatial map: each output pixel is a weighted sum of up to K input pixels.

    ``src`` is (K, H*W) flat source indices with -1 for an absent tap;
    ``weights`` is None for single-tap maps with unit weight.
    """

    src: np.ndarray
    weights: np.ndarray | None
    shape: tuple

    def apply(self, x: np.ndarray) -> np.ndarray:
        C, H, W = x.shape
        if (H, W) != tuple(self.shape):
            raise ShapeError(f"image plane {(H, W)} does not match transform {tuple(self.shape)}")
        flat = x.reshape(C, H * W)
        valid = self.src >= 0
        safe = np.where(valid, self.src, 0)
        if self.weights is None:
            out = np.where(valid[0], flat[:, safe[0]], x.dtype.type(0))
        else:
            out = np.zeros((C, H * W), dtype=x.dtype)
            for k in range(self.src.shape[0]):
                out += np.where(valid[k], flat[:, safe[k]] * self.weights[k], x.dtype.type(0))
        return out.reshape(C, H, W)

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        C, H, W = g.shape
        if (H, W) != tuple(self.shape):
            raise ShapeError(f"gradient plane {(H, W)} does not match transform {tuple(self.shape)}")
        P = H * W
        flat = g.reshape(C, P)
        offsets = (np.arange(C) * P)[:, None]
        out = np.zeros(C * P, dtype=np.float64)
        for k in range(self.src.shape[0]):
            valid = self.src[k] >= 0
            vals = flat[:, valid] if self.weights is None else flat[:, valid] * self.weights[k][valid]
            out += np.bincount((offsets + self.src[k][valid]).ravel(), weights=vals.ravel().astype(np.float64),
                               minlength=C * P)
        return out.astype(g.dtype).reshape(C, H, W)


@dataclass(frozen=True, eq=False)
class Scale:
    factor: float

    def apply(self, x):
        return x * x.dtype.type(self.factor)

    def adjoint(self, g):
        return g * g.dtype.type(self.factor)


@dataclass(frozen=True, eq=False)
class AddConstant:
    offset: np.ndarray

    def apply(self, x):
        if x.shape != self.offset.shape:
            raise ShapeError(f"offset shape {self.offset.shape} does not match image {x.shape}")
        return x + self.offset

    def adjoint(self, g):
        return g


def apply_chain(x: np.ndarray, chain) -> np.ndarray:
    for stage in chain:
        x = stage.apply(x)
    return x


def adjoint_chain(g: np.ndarray, chain) -> np.ndarray:
    for stage in reversed(chain):
        g = stage.adjoint(g)
    return g


# ---------------------------------------------------------------------------
# block shuffle and rotation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BsrConfig:
    """Parameters of the block shuffle and rotation transform.

    ``shuffle=False`` keeps the random splits and rotations but fixes both
    permutations to the identity (rotation-only ablation); ``tau=0`` gives
    the shuffle-only ablation.
    """

    n: int = 2
    tau: float = 24.0
    copies: int = 20
    min_block_fraction: float = 0.1
    interpolation: str = "nearest"
    shuffle: bool = True

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise ConfigurationError(f"n must be an integer >= 1, got {self.n!r}")
        if not 0 <= self.tau <= 180:
            raise ConfigurationError(f"tau must lie in [0, 180], got {self.tau!r}")
        if not isinstance(self.copies, (int, np.integer)) or self.copies < 1:
            raise ConfigurationError(f"copies must be an integer >= 1, got {self.copies!r}")
        if not 0 < self.min_block_fraction <= 1.0 / self.n:
            raise ConfigurationError(
                f"min_block_fraction must lie in (0, 1/n] = (0, {1.0 / self.n:g}], got {self.min_block_fraction!r}")
        if self.interpolation not in INTERPOLATIONS:
            raise ConfigurationError(f"interpolation must be one of {INTERPOLATIONS}, got {self.interpolation!r}")


@dataclass(frozen=True)
class TransformRecord:
    """One sampled BSR instance.

    Strips and blocks are indexed by their *source* position. Output strip
    ``k`` holds source strip ``row_perm[k]``; within source strip ``i``,
    output slot ``l`` holds source block ``col_perms[i][l]``. ``angles[k][l]``
    is the rotation in degrees of the block placed at output strip ``k``,
    slot ``l``.
    """

    shape: tuple
    row_splits: tuple
    row_perm: tuple
    col_splits: tuple
    col_perms: tuple
    angles: tuple
    interpolation: str = "nearest"
    _map: GatherMap | None = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.row_perm)

    @property
    def gather_map(self) -> GatherMap:
        if self._map is None:
            object.__setattr__(self, "_map", bsr_gather_map(self))
        return self._map

    @property
    def zero_mask(self) -> np.ndarray:
        """Output pixels that receive no source content."""
        return (self.gather_map.src < 0).all(axis=0).reshape(self.shape)

    def blocks(self):
        """Yield (source_box, output_box, angle) with boxes as (row0, col0, height, width)."""
        H, W = self.shape
        rows = (0, *self.row_splits, H)
        out_row = 0
        for k, i in enumerate(self.row_perm):
            height = rows[i + 1] - rows[i]
            cols = (0, *self.col_splits[i], W)
            out_col = 0
            for slot, j in enumerate(self.col_perms[i]):
                width = cols[j + 1] - cols[j]
                yield (rows[i], cols[j], height, width), (out_row, out_col, height, width), self.angles[k][slot]
                out_col += width
            out_row += height


def _random_splits(extent: int, n: int, min_size: int, rng) -> tuple:
    free = extent - n * min_size
    cuts = np.sort(rng.integers(0, free + 1, size=n - 1))
    sizes = min_size + np.diff(np.concatenate(([0], cuts, [free])))
    return tuple(int(s) for s in np.cumsum(sizes)[:-1])


def sample_bsr(cfg: BsrConfig, image_shape, rng) -> TransformRecord:
    """Draw split points, permutations and per-block angles for one image plane.

    ``image_shape`` may be (H, W), (C, H, W) or (N, C, H, W).
    """
    rng = check_random_state(rng)
    H, W = (int(s) for s in tuple(image_shape)[-2:])
    n = cfg.n
    min_h = max(1, math.ceil(cfg.min_block_fraction * H))
    min_w = max(1, math.ceil(cfg.min_block_fraction * W))
    if n * min_h > H or n * min_w > W:
        raise ConfigurationError(
            f"image {H}x{W} too small for {n}x{n} blocks of at least {cfg.min_block_fraction:g} of each axis")
    row_splits = _random_splits(H, n, min_h, rng)
    row_perm = tuple(int(v) for v in rng.permutation(n)) if cfg.shuffle else tuple(range(n))
    col_splits, col_perms = [], []
    for _ in range(n):
        col_splits.append(_random_splits(W, n, min_w, rng))
        col_perms.append(tuple(int(v) for v in rng.permutation(n)) if cfg.shuffle else tuple(range(n)))
    angles = rng.uniform(-cfg.tau, cfg.tau, size=(n, n))
    return TransformRecord((H, W), row_splits, row_perm, tuple(col_splits), tuple(col_perms),
                           tuple(tuple(float(a) for a in row) for row in angles), cfg.interpolation)


def bsr_gather_map(record: TransformRecord) -> GatherMap:
    H, W = record.shape
    bilinear = record.interpolation == "bilinear"
    taps = 4 if bilinear else 1
    src = np.full((taps, H, W), -1, dtype=np.int64)
    weights = np.zeros((taps, H, W), dtype=np.float32) if bilinear else None
    for (sr, sc, h, w), (orow, ocol, _, _), angle in record.blocks():
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        u, v = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        du, dv = u - cy, v - cx
        if angle == 0.0:
            su, sv = u, v
        else:
            a = math.radians(angle)
            ca, sa = math.cos(a), math.sin(a)
            # inverse rotation: output pixel samples the source at R(-angle) p
            su = cy + ca * du + sa * dv
            sv = cx - sa * du + ca * dv
        out_block = (slice(orow, orow + h), slice(ocol, ocol + w))
        if not bilinear:
            iu, iv = np.floor(su + 0.5).astype(np.int64), np.floor(sv + 0.5).astype(np.int64)
            ok = (iu >= 0) & (iu < h) & (iv >= 0) & (iv < w)
            src[0][out_block] = np.where(ok, (sr + iu) * W + (sc + iv), -1)
            continue
        u0, v0 = np.floor(su).astype(np.int64), np.floor(sv).astype(np.int64)
        fu, fv = su - u0, sv - v0
        for k, (du_, dv_, wt) in enumerate((
                (0, 0, (1 - fu) * (1 - fv)), (0, 1, (1 - fu) * fv),
                (1, 0, fu * (1 - fv)), (1, 1, fu * fv))):
            iu, iv = u0 + du_, v0 + dv_
            ok = (iu >= 0) & (iu < h) & (iv >= 0) & (iv < w) & (wt > 0)
            src[k][out_block] = np.where(ok, (sr + iu) * W + (sc + iv), -1)
            weights[k][out_block] = np.where(ok, wt, 0.0)
    src = src.reshape(taps, H * W)
    if bilinear:
        weights = weights.reshape(taps, H * W)
    return GatherMap(src, weights, (H, W))


def _as_chw(image: np.ndarray):
    arr = np.asarray(image)
    if arr.ndim == 2:
        return arr[None], lambda out: out[0]
    if arr.ndim == 3:
        return arr, lambda out: out
    raise ShapeError(f"expected an (H, W) or (C, H, W) image, got shape {arr.shape}")


def _check_plane(arr, record):
    if tuple(arr.shape[-2:]) != tuple(record.shape):
        raise ShapeError(f"image plane {tuple(arr.shape[-2:])} does not match record {tuple(record.shape)}")


def apply_bsr(image, record: TransformRecord) -> np.ndarray:
    x, back = _as_chw(image)
    _check_plane(x, record)
    return back(record.gather_map.apply(x))


def backprop_bsr(grad_out, record: TransformRecord) -> np.ndarray:
    """Transpose of :func:`apply_bsr` for the same record."""
    g, back = _as_chw(grad_out)
    _check_plane(g, record)
    return back(record.gather_map.adjoint(g))


def unshuffle_bsr(image, record: TransformRecord) -> np.ndarray:
    """Move every block back to its source position, ignoring rotation."""
    x, back = _as_chw(image)
    _check_plane(x, record)
    out = np.zeros_like(x)
    for (sr, sc, h, w), (orow, ocol, _, _), _ in record.blocks():
        out[:, sr:sr + h, sc:sc + w] = x[:, orow:orow + h, ocol:ocol + w]
    return back(out)


def discarded_pixels(record: TransformRecord) -> int:
    """Source pixels that contribute to no output pixel."""
    src = record.gather_map.src
    used = np.zeros(record.shape[0] * record.shape[1], dtype=bool)
    used[src[src >= 0]] = True
    return int((~used).sum())


# ---------------------------------------------------------------------------
# baseline transforms
# ---------------------------------------------------------------------------

def _dim_map(shape, rh: int, rw: int, top: int, left: int) -> GatherMap:
    H, W = shape
    src = np.full((H, W), -1, dtype=np.int64)
    rows = np.floor((np.arange(rh) + 0.5) * H / rh).astype(np.int64)
    cols = np.floor((np.arange(rw) + 0.5) * W / rw).astype(np.int64)
    src[top:top + rh, left:left + rw] = rows[:, None] * W + cols[None, :]
    return GatherMap(src.reshape(1, H * W), None, (H, W))


def sample_dim(shape, probability: float, resize_low_fraction: float, rng) -> GatherMap | None:
    """Shrink-and-pad map for one image, or None when the coin says identity."""
    if not 0 <= probability <= 1:
        raise ConfigurationError(f"probability must lie in [0, 1], got {probability}")
    if not 0 < resize_low_fraction <= 1:
        raise ConfigurationError(f"resize_low_fraction must lie in (0, 1], got {resize_low_fraction}")
    rng = check_random_state(rng)
    H, W = (int(s) for s in tuple(shape)[-2:])
    if rng.random() >= probability:
        return None
    rh = int(rng.integers(max(1, math.floor(resize_low_fraction * H)), H + 1))
    rw = max(1, min(W, round(rh * W / H)))
    top = int(rng.integers(0, H - rh + 1))
    left = int(rng.integers(0, W - rw + 1))
    return _dim_map((H, W), rh, rw, top, left)


def apply_dim(image, probability: float = 0.5, resize_low_fraction: float = 0.9, rng=None) -> np.ndarray:
    """Random nearest-neighbour shrink followed by zero padding at a random offset."""
    x, back = _as_chw(image)
    gmap = sample_dim(x.shape, probability, resize_low_fraction, rng)
    return back(x.copy() if gmap is None else gmap.apply(x))


def make_tim_kernel(size: int = 7, sigma: float | None = None) -> np.ndarray:
    """Normalised 2-D Gaussian sampled on the integer grid; ``sigma`` defaults to size/3."""
    if not isinstance(size, (int, np.integer)) or size < 1 or size % 2 == 0:
        raise ConfigurationError(f"kernel size must be a positive odd integer, got {size!r}")
    sigma = size / 3.0 if sigma is None else sigma
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma!r}")
    r = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def smooth_gradient(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Depthwise same-size convolution with zero padding over (..., H, W)."""
    k = np.asarray(kernel)
    r = k.shape[0] // 2
    g = np.asarray(grad)
    pad = [(0, 0)] * (g.ndim - 2) + [(r, r), (r, r)]
    gp = np.pad(g.astype(np.float64), pad)
    H, W = g.shape[-2:]
    out = np.zeros(g.shape, dtype=np.float64)
    # kernel is centrally symmetric, so correlation equals convolution
    for i in range(k.shape[0]):
        for j in range(k.shape[1]):
            out += k[i, j] * gp[..., i:i + H, j:j + W]
    return out.astype(g.dtype)


def sim_scales(image, num_scales: int = 5) -> list:
    """Copies of the image divided by 1, 2, 4, ... (exact power-of-two scaling)."""
    if num_scales < 1:
        raise ConfigurationError(f"num_scales must be >= 1, got {num_scales}")
    x = np.asarray(image, dtype=np.float32)
    return [x * np.float32(1.0 / 2 ** i) for i in range(num_scales)]


def admix_images(image, pool, num_mix: int = 3, strength: float = 0.2, num_scales: int = 5, rng=None) -> list:
    """``num_mix`` admixed images x + strength * x', each expanded into ``num_scales`` scales."""
    pool = np.asarray(pool, dtype=np.float32)
    if pool.shape[0] == 0:
        raise ConfigurationError("admix pool is empty")
    rng = check_random_state(rng)
    x = np.asarray(image, dtype=np.float32)
    out = []
    for _ in range(num_mix):
        other = pool[int(rng.integers(pool.shape[0]))]
        out.extend(sim_scales(x + np.float32(strength) * other, num_scales))
    return out


# ---------------------------------------------------------------------------
# transform kinds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Bsr:
    config: BsrConfig = field(default_factory=BsrConfig)

    name = "bsr"

    def sample(self, shape, rng, pool=None, copies=None) -> list:
        return [[sample_bsr(self.config, shape, rng).gather_map]
                for _ in range(self.config.copies if copies is None else copies)]


@dataclass(frozen=True)
class Dim:
    probability: float = 0.5
    resize_low_fraction: float = 0.9

    name = "dim"

    def __post_init__(self):
        if not 0 <= self.probability <= 1 or not 0 < self.resize_low_fraction <= 1:
            raise ConfigurationError("Dim needs probability in [0, 1] and resize_low_fraction in (0, 1]")

    def sample(self, shape, rng, pool=None, copies=None) -> list:
        gmap = sample_dim(shape, self.probability, self.resize_low_fraction, rng)
        return [[] if gmap is None else [gmap]]


@dataclass(frozen=True)
class TimKernel:
    """Gradient smoothing; contributes no input stages, only a kernel."""

    size: int = 7
    sigma: float | None = None

    name = "tim"

    def __post_init__(self):
        make_tim_kernel(self.size, self.sigma)

    @property
    def kernel(self) -> np.ndarray:
        return make_tim_kernel(self.size, self.sigma)

    def sample(self, shape, rng, pool=None, copies=None) -> list:
        return [[]]


@dataclass(frozen=True)
class Sim:
    num_scales: int = 5

    name = "sim"

    def __post_init__(self):
        if self.num_scales < 1:
            raise ConfigurationError("Sim needs num_scales >= 1")

    def sample(self, shape, rng, pool=None, copies=None) -> list:
        return [[Scale(1.0 / 2 ** i)] for i in range(self.num_scales)]


@dataclass(frozen=True)
class Admix:
    num_mix: int = 3
    strength: float = 0.2
    num_scales: int = 5

    name = "admix"

    def __post_init__(self):
        if self.num_mix < 1 or self.num_scales < 1 or self.strength < 0:
            raise ConfigurationError("Admix needs num_mix >= 1, num_scales >= 1 and strength >= 0")

    def sample(self, shape, rng, pool=None, copies=None) -> list:
        if pool is None or len(pool) == 0:
            raise ConfigurationError("admix pool is empty")
        chains = []
        for _ in range(self.num_mix):
            other = np.asarray(pool[int(rng.integers(len(pool)))], dtype=np.float32)
            offset = np.float32(self.strength) * other
            chains.extend([AddConstant(offset), Scale(1.0 / 2 ** i)] for i in range(self.num_scales))
        return chains


@dataclass(frozen=True)
class Composite:
    """Transforms applied in the declared order.

    When a :class:`Bsr` part is present, the whole chain is resampled once
    per BSR copy: every copy draws its own instances of the other parts
    before its own block shuffle.
    """

    parts: tuple

    def __post_init__(self):
        if not self.parts:
            raise ConfigurationError("Composite needs at least one part")
        object.__setattr__(self, "parts", tuple(self.parts))

    @property
    def name(self) -> str:
        return "+".join(p.name for p in self.parts)

    @property
    def bsr(self) -> Bsr | None:
        return next((p for p in self.parts if isinstance(p, Bsr)), None)

    def _expand_once(self, shape, rng, pool) -> list:
        chains = [[]]
        for part in self.parts:
            pieces = part.sample(shape, rng, pool, copies=1) if isinstance(part, Bsr) else part.sample(shape, rng, pool)
            chains = [c + p for c in chains for p in pieces]
        return chains

    def sample(self, shape, rng, pool=None, copies=None) -> list:
        bsr = self.bsr
        repeats = 1 if bsr is None else (bsr.config.copies if copies is None else copies)
        out = []
        for _ in range(repeats):
            out.extend(self._expand_once(shape, rng, pool))
        return out


def tim_kernel_of(transform) -> np.ndarray | None:
    if isinstance(transform, TimKernel):
        return transform.kernel
    if isinstance(transform, Composite):
        kernels = [p.kernel for p in transform.parts if isinstance(p, TimKernel)]
        return kernels[0] if kernels else None
    return None


def parse_transform(spec: str | None, bsr: BsrConfig | None = None, dim: Dim | None = None,
                    tim: TimKernel | None = None, sim: Sim | None = None, admix: Admix | None = None):
    """Build a transform from ``"none"``, a single name or ``"dim+tim+bsr"`` (applied left to right)."""
    if spec is None or spec.strip().lower() in ("", "none"):
        return None
    table = {
        "bsr": lambda: Bsr(bsr or BsrConfig()),
        "dim": lambda: dim or Dim(),
        "tim": lambda: tim or TimKernel(),
        "sim": lambda: sim or Sim(),
        "admix": lambda: admix or Admix(),
    }
    parts = []
    for token in spec.lower().replace(",", "+").split("+"):
        token = token.strip()
        if token not in table:
            raise ConfigurationError(f"unknown transform {token!r}; expected names from {sorted(table)}")
        parts.append(table[token]())
    return parts[0] if len(parts) == 1 else Composite(tuple(parts))


class BlockShuffleRotation(TransformerMixin, BaseEstimator):
    """Apply one freshly sampled BSR instance to every image of a batch.

    The generator for image ``i`` is derived from ``(seed, i)``, so the
    result does not depend on how the batch is split. Sampled records are
    kept in ``records_`` after :meth:`transform`.
    """

    def __init__(self, n=2, tau=24.0, min_block_fraction=0.1, interpolation="nearest", shuffle=True, seed=0):
        self.n = n
        self.tau = tau
        self.min_block_fraction = min_block_fraction
        self.interpolation = interpolation
        self.shuffle = shuffle
        self.seed = seed

    def _config(self) -> BsrConfig:
        return BsrConfig(n=self.n, tau=self.tau, copies=1, min_block_fraction=self.min_block_fraction,
                         interpolation=self.interpolation, shuffle=self.shuffle)

    def fit(self, X, y=None):
        X = check_images(X)
        self._config()
        self.image_shape_ = tuple(X.shape[1:])
        return self

    def transform(self, X):
        X = check_images(X, shape=getattr(self, "image_shape_", None))
        cfg = self._config()
        self.records_ = []
        out = np.empty_like(X)
        for i, img in enumerate(X):
            rec = sample_bsr(cfg, img.shape, np.random.default_rng([int(self.seed), i]))
            self.records_.append(rec)
            out[i] = apply_bsr(img, rec)
        return out

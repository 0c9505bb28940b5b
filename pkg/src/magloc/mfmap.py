"""Magnetic field map: hash-indexed voxel grid built by local GP regression.

The map stores one field vector (microtesla, world frame) per occupied
cell of a regular grid. Cells are addressed by integer keys
``floor(p / resolution)`` and looked up through an open-addressing hash
table held in flat numpy arrays, so batches of queries are resolved with a
handful of vectorized probe rounds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    BadMagicError,
    InvalidInputError,
    MapFormatError,
    TruncatedMapError,
    VersionMismatchError,
)

DEFAULT_RESOLUTION = 0.05
MAX_FIELD_UT = 1000.0

_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1
_EMPTY = np.uint64(0xFFFFFFFFFFFFFFFF)


class MapCellKey(NamedTuple):
    ix: int
    iy: int
    iz: int


class RawMagSample(NamedTuple):
    """A survey sample already projected into the world frame."""

    position: tuple
    field: tuple


@dataclass(frozen=True)
class GpHyperparams:
    length_scale: float = 0.3
    sigma_f: float = 5.0
    sigma_n: float = 0.5
    support_radius: float = 0.5
    min_neighbors: int = 3
    max_neighbors: int = 32

    def __post_init__(self):
        if self.length_scale <= 0 or self.sigma_f <= 0 or self.sigma_n < 0:
            raise InvalidInputError("GP length scale and signal std must be positive")
        if self.support_radius <= 0:
            raise InvalidInputError("support_radius must be positive")
        if self.min_neighbors < 1 or self.max_neighbors < self.min_neighbors:
            raise InvalidInputError("need 1 <= min_neighbors <= max_neighbors")


def cell_keys(points, resolution: float) -> np.ndarray:
    """Integer cell indices of an ``(n, 3)`` array of positions."""
    if not resolution > 0:
        raise InvalidInputError("resolution must be positive")
    p = np.asarray(points, dtype=float)
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("non-finite coordinate")
    return np.floor(p / resolution).astype(np.int64)


def cell_key(p, resolution: float = DEFAULT_RESOLUTION) -> MapCellKey:
    k = cell_keys(np.reshape(p, (1, 3)), resolution)[0]
    return MapCellKey(int(k[0]), int(k[1]), int(k[2]))


def _pack(keys: np.ndarray) -> np.ndarray:
    k = keys.astype(np.int64) + _KEY_OFFSET
    k = k.astype(np.uint64)
    return (k[..., 0] << np.uint64(2 * _KEY_BITS)) | (k[..., 1] << np.uint64(_KEY_BITS)) | k[..., 2]


def _mix(packed: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    z = packed.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


class CellIndex:
    """Open-addressing (linear probing) hash table from packed cell keys to
    row indices, with vectorized insert and lookup.

    Each slot holds ``(packed_key, row)`` side by side so a probe touches a
    single cache line; the table is kept at most a quarter full.
    """

    def __init__(self, keys: np.ndarray):
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        if keys.size and np.max(np.abs(keys)) >= _KEY_OFFSET:
            raise InvalidInputError("cell index out of representable range")
        n = len(keys)
        size = 8
        while size < 4 * n:
            size <<= 1
        self._mask = np.uint64(size - 1)
        self._table = np.zeros((size, 2), dtype=np.uint64)
        self._table[:, 0] = _EMPTY
        self.max_probe = 0

        packed = _pack(keys)
        home = _mix(packed)
        pending = np.arange(n)
        probe = np.zeros(n, dtype=np.uint64)
        while pending.size:
            slot = ((home[pending] + probe[pending]) & self._mask).astype(np.int64)
            free = self._table[slot, 0] == _EMPTY
            cand = pending[free]
            uniq, first = np.unique(slot[free], return_index=True)
            winners = cand[first]
            self._table[uniq, 0] = packed[winners]
            self._table[uniq, 1] = winners.astype(np.uint64)
            if winners.size:
                self.max_probe = max(self.max_probe, int(probe[winners].max()))
            placed = np.zeros(n, dtype=bool)
            placed[winners] = True
            pending = pending[~placed[pending]]
            probe[pending] += np.uint64(1)

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Row index per key, or -1 when the cell is absent."""
        keys = np.asarray(keys, dtype=np.int64)
        shape = keys.shape[:-1]
        keys = keys.reshape(-1, 3)
        if keys.size == 0 or (keys.min() > -_KEY_OFFSET and keys.max() < _KEY_OFFSET):
            return self._find(_pack(keys)).reshape(shape)
        out = np.full(len(keys), -1, dtype=np.int64)
        valid = np.flatnonzero(np.all(np.abs(keys) < _KEY_OFFSET, axis=1))
        out[valid] = self._find(_pack(keys[valid]))
        return out.reshape(shape)

    def _find(self, packed: np.ndarray) -> np.ndarray:
        home = _mix(packed) & self._mask
        # np.take is much faster than fancy indexing for large gathers
        entry = np.take(self._table, home.astype(np.int64), axis=0)
        hit = entry[:, 0] == packed
        rows = np.where(hit, entry[:, 1].astype(np.int64), -1)
        pending = np.flatnonzero(~hit & (entry[:, 0] != _EMPTY))
        if pending.size and self.max_probe:
            # every stored key lies within max_probe slots of its home, so one
            # windowed gather settles the rest with no probe loop
            offs = np.arange(1, self.max_probe + 1, dtype=np.uint64)
            win = ((home[pending, None] + offs) & self._mask).astype(np.int64)
            cand = np.take(self._table, win, axis=0)
            match = cand[:, :, 0] == packed[pending, None]
            found = match.any(axis=1)
            j = match.argmax(axis=1)
            rows[pending[found]] = cand[found, j[found], 1].astype(np.int64)
        return rows


class MagneticMap:
    """Immutable hash-indexed grid of world-frame field vectors.

    Attributes:
        resolution: cell edge length in meters.
        keys: ``(n, 3)`` int32 cell indices, lexicographically sorted.
        values: ``(n, 3)`` field vectors in microtesla.
        bounds: ``(xmin, ymin, zmin, xmax, ymax, zmax)`` in meters.
        base_field: background field in microtesla.
    """

    def __init__(self, resolution, keys, values, bounds=None, base_field=(0.0, 0.0, 0.0)):
        if not resolution > 0:
            raise InvalidInputError("resolution must be positive")
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        values = np.asarray(values, dtype=float).reshape(-1, 3)
        if len(keys) != len(values):
            raise InvalidInputError("keys and values differ in length")
        if not np.all(np.isfinite(values)) or (
            values.size and np.max(np.linalg.norm(values, axis=1)) >= MAX_FIELD_UT
        ):
            raise InvalidInputError("field values must be finite and below %g uT" % MAX_FIELD_UT)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        keys, values = keys[order], values[order]
        if len(keys) > 1 and np.any(np.all(np.diff(keys, axis=0) == 0, axis=1)):
            raise InvalidInputError("duplicate cell keys")

        self.resolution = float(resolution)
        self.keys = keys.astype(np.int32)
        self.values = values
        self.base_field = np.asarray(base_field, dtype=float).reshape(3)
        if bounds is None:
            if len(keys):
                lo = keys.min(axis=0) * self.resolution
                hi = (keys.max(axis=0) + 1) * self.resolution
            else:
                lo = hi = np.zeros(3)
            bounds = np.concatenate([lo, hi])
        self.bounds = np.asarray(bounds, dtype=float).reshape(6)
        if len(keys):
            lo = keys.min(axis=0) * self.resolution
            hi = (keys.max(axis=0) + 1) * self.resolution
            eps = 1e-9 * max(1.0, float(np.max(np.abs(self.bounds))))
            if np.any(lo < self.bounds[:3] - eps) or np.any(hi > self.bounds[3:] + eps):
                raise InvalidInputError("stored cells extend beyond map bounds")
        self.keys.setflags(write=False)
        self.values.setflags(write=False)
        self.bounds.setflags(write=False)
        self.base_field.setflags(write=False)
        self._index = CellIndex(self.keys)

    def __len__(self):
        return len(self.keys)

    def __eq__(self, other):
        if not isinstance(other, MagneticMap):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and np.array_equal(self.bounds, other.bounds)
            and np.array_equal(self.base_field, other.base_field)
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        return "MagneticMap(resolution=%g, cells=%d)" % (self.resolution, len(self))

    def cell_center(self, key) -> np.ndarray:
        return (np.asarray(key, dtype=float) + 0.5) * self.resolution

    def lookup_keys(self, keys) -> np.ndarray:
        return self._index.lookup(keys)

    def query_many(self, points):
        """Batched lookup.

        Returns:
            ``(values, mapped)`` where ``values`` has shape ``points.shape``
            (NaN where unmapped) and ``mapped`` is a boolean mask.
        """
        points = np.asarray(points, dtype=float)
        finite = np.isfinite(points).all(axis=-1)
        if finite.all():
            rows = self._index.lookup(np.floor(points / self.resolution).astype(np.int64))
        else:
            safe = np.where(finite[..., None], points, 0.0)
            rows = np.where(finite, self._index.lookup(np.floor(safe / self.resolution).astype(np.int64)), -1)
        mapped = rows >= 0
        if len(self.values) == 0:
            return np.full(points.shape, np.nan), mapped
        values = np.take(self.values, np.maximum(rows, 0), axis=0)
        values[~mapped] = np.nan
        return values, mapped

    def query(self, p):
        """Field at ``p`` or ``None`` if the containing cell is unmapped."""
        p = np.asarray(p, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            return None
        row = int(self._index.lookup(np.floor(p / self.resolution).astype(np.int64)[None])[0])
        if row < 0:
            return None
        return self.values[row].copy()


def _as_arrays(samples):
    if isinstance(samples, tuple) and len(samples) == 2 and not isinstance(samples[0], RawMagSample):
        pos, field = samples
    else:
        samples = list(samples)
        if not samples:
            raise InvalidInputError("at least one survey sample is required")
        pos = [s.position for s in samples]
        field = [s.field for s in samples]
    pos = np.asarray(pos, dtype=float).reshape(-1, 3)
    field = np.asarray(field, dtype=float).reshape(-1, 3)
    if len(pos) == 0:
        raise InvalidInputError("at least one survey sample is required")
    if len(pos) != len(field):
        raise InvalidInputError("positions and fields differ in length")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(field))):
        raise InvalidInputError("non-finite survey sample")
    return pos, field


def _candidate_chunks(pos, resolution, radius, chunk):
    lo = np.floor((pos.min(axis=0) - radius) / resolution).astype(np.int64)
    hi = np.floor((pos.max(axis=0) + radius) / resolution).astype(np.int64)
    ix = np.arange(lo[0], hi[0] + 1)
    iy = np.arange(lo[1], hi[1] + 1)
    gx, gy = np.meshgrid(ix, iy, indexing="ij")
    plane = np.stack([gx.ravel(), gy.ravel()], axis=1)
    per_slab = max(1, chunk // max(1, len(plane)))
    zs = np.arange(lo[2], hi[2] + 1)
    for start in range(0, len(zs), per_slab):
        zz = zs[start : start + per_slab]
        keys = np.empty((len(plane) * len(zz), 3), dtype=np.int64)
        keys[:, :2] = np.tile(plane, (len(zz), 1))
        keys[:, 2] = np.repeat(zz, len(plane))
        yield keys


def gp_posterior_mean(centers, pos, resid, tree, gp: GpHyperparams):
    """Local GP posterior mean of ``resid`` at each center.

    Uses at most ``max_neighbors`` samples within ``support_radius``;
    absent neighbors are padded out of the linear system.
    """
    k = min(gp.max_neighbors, len(pos))
    dist, idx = tree.query(centers, k=k, distance_upper_bound=gp.support_radius)
    dist = dist.reshape(len(centers), k)
    idx = idx.reshape(len(centers), k)
    valid = np.isfinite(dist)
    safe_idx = np.where(valid, idx, 0)
    x = pos[safe_idx]  # (B, k, 3)
    ell2 = gp.length_scale**2
    sf2 = gp.sigma_f**2
    d2 = np.sum((x[:, :, None, :] - x[:, None, :, :]) ** 2, axis=-1)
    kmat = sf2 * np.exp(-0.5 * d2 / ell2)
    pair = valid[:, :, None] & valid[:, None, :]
    kmat = np.where(pair, kmat, 0.0)
    diag = np.where(valid, gp.sigma_n**2, 1.0)
    kmat[:, np.arange(k), np.arange(k)] += diag
    kstar = np.where(valid, sf2 * np.exp(-0.5 * dist**2 / ell2), 0.0)
    y = np.where(valid[..., None], resid[safe_idx], 0.0)
    alpha = np.linalg.solve(kmat, y)
    return np.einsum("bk,bkc->bc", kstar, alpha)


def build_map(
    samples,
    resolution: float = DEFAULT_RESOLUTION,
    gp: GpHyperparams | None = None,
    base_field=(0.0, 0.0, 0.0),
    prior_mean=None,
    chunk: int = 200_000,
) -> MagneticMap:
    """Densify survey samples into a hash-indexed map.

    A cell is stored when its center has at least ``gp.min_neighbors``
    samples within ``gp.support_radius``; its value is the posterior mean of
    independent per-axis GPs (squared-exponential kernel) at the center.
    The GP prior mean is ``prior_mean`` (defaults to ``base_field``).

    Args:
        samples: sequence of ``RawMagSample`` or a ``(positions, fields)``
            pair of ``(n, 3)`` arrays.
    """
    gp = gp or GpHyperparams()
    if not resolution > 0:
        raise InvalidInputError("resolution must be positive")
    pos, field = _as_arrays(samples)
    # canonical order makes the build independent of input permutation
    order = np.lexsort(np.column_stack([pos, field]).T[::-1])
    pos, field = pos[order], field[order]
    mean = np.asarray(base_field if prior_mean is None else prior_mean, dtype=float).reshape(3)
    resid = field - mean
    tree = cKDTree(pos)

    all_keys, all_vals = [], []
    for keys in _candidate_chunks(pos, resolution, gp.support_radius, chunk):
        centers = (keys + 0.5) * resolution
        counts = tree.query_ball_point(centers, gp.support_radius, return_length=True)
        ok = counts >= gp.min_neighbors
        if not np.any(ok):
            continue
        keys, centers = keys[ok], centers[ok]
        for s in range(0, len(keys), 4096):
            vals = gp_posterior_mean(centers[s : s + 4096], pos, resid, tree, gp) + mean
            all_vals.append(vals)
        all_keys.append(keys)
    keys = np.concatenate(all_keys) if all_keys else np.zeros((0, 3), dtype=np.int64)
    vals = np.concatenate(all_vals) if all_vals else np.zeros((0, 3))
    return MagneticMap(resolution, keys, vals, base_field=base_field)


MAGIC = b"MFMAP\x00"
VERSION = 1
_HEADER = struct.Struct("<6sId6d3dQ")
_RECORD = np.dtype(
    [("ix", "<i4"), ("iy", "<i4"), ("iz", "<i4"), ("bx", "<f8"), ("by", "<f8"), ("bz", "<f8")]
)


def save_map(m: MagneticMap, path) -> None:
    """Write ``m`` in the little-endian versioned binary format."""
    rec = np.empty(len(m), dtype=_RECORD)
    rec["ix"], rec["iy"], rec["iz"] = m.keys[:, 0], m.keys[:, 1], m.keys[:, 2]
    rec["bx"], rec["by"], rec["bz"] = m.values[:, 0], m.values[:, 1], m.values[:, 2]
    header = _HEADER.pack(MAGIC, VERSION, m.resolution, *m.bounds, *m.base_field, len(m))
    with open(path, "wb") as f:
        f.write(header)
        f.write(rec.tobytes())


def load_map(path) -> MagneticMap:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not a magnetic map file (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedMapError("header truncated")
    fields = _HEADER.unpack_from(data)
    version = fields[1]
    if version != VERSION:
        raise VersionMismatchError("unsupported map version %d" % version)
    resolution = fields[2]
    bounds = fields[3:9]
    base = fields[9:12]
    count = fields[12]
    body = memoryview(data)[_HEADER.size :]
    need = count * _RECORD.itemsize
    if len(body) < need:
        raise TruncatedMapError("expected %d records, file holds %d bytes of %d" % (count, len(body), need))
    if len(body) > need:
        raise MapFormatError("trailing bytes after %d records" % count)
    rec = np.frombuffer(body, dtype=_RECORD, count=count)
    keys = np.column_stack([rec["ix"], rec["iy"], rec["iz"]])
    vals = np.column_stack([rec["bx"], rec["by"], rec["bz"]])
    try:
        return MagneticMap(resolution, keys, vals, bounds=bounds, base_field=base)
    except InvalidInputError as e:
        raise MapFormatError(str(e)) from e


def map_from_function(fn, bounds, resolution: float = DEFAULT_RESOLUTION, base_field=(0.0, 0.0, 0.0)):
    """Sample ``fn`` (``(n, 3) -> (n, 3)``) exactly at every cell center in
    ``bounds``. Useful for tests and as an interpolation-free reference."""
    b = np.asarray(bounds, dtype=float)
    lo = np.floor(b[:3] / resolution + 1e-9).astype(np.int64)
    hi = np.ceil(b[3:] / resolution - 1e-9).astype(np.int64)
    axes = [np.arange(lo[i], hi[i]) for i in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    keys = np.stack([a.ravel() for a in g], axis=1)
    vals = fn((keys + 0.5) * resolution)
    return MagneticMap(resolution, keys, vals, base_field=base_field)


def samples_from_arrays(positions: Sequence, fields: Sequence):
    return [RawMagSample(tuple(p), tuple(f)) for p, f in zip(positions, fields)]

"""Synthetic urban path-loss maps, sampling masks, noise and map file I/O.

One pixel is one meter. Maps are stored on a normalized gray scale in
[0, 1] where 1 is the strongest received signal (smallest path loss).
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAP_KINDS = ("buildings", "tx_onehot", "pathloss", "samples")
RMAP_MAGIC = b"RMAP"
MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("region_id", "tx_row", "tx_col", "buildings_path", "gain_path")
BLOCK = 4
OMEGA_CHOICES = (20, 50, 100, 150)


class MapFormatError(ValueError):
    """A map or manifest file is malformed."""


class SamplingError(ValueError):
    """A mask cannot be drawn with the requested parameters."""


@dataclass
class GridMap:
    values: np.ndarray
    kind: str = "pathloss"
    tx_pixel: tuple[int, int] | None = None
    map_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"GridMap needs a 2-D array, got shape {self.values.shape}")
        if self.kind not in MAP_KINDS:
            raise ValueError(f"unknown map kind {self.kind!r}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1 or not np.all(np.isfinite(self.values))):
            raise ValueError("GridMap values must lie in [0, 1]")
        if self.kind == "buildings" and not np.all((self.values == 0) | (self.values == 1)):
            raise ValueError("buildings map must be binary")
        if self.kind == "tx_onehot" and np.count_nonzero(self.values) != 1:
            raise ValueError("tx_onehot map must have exactly one nonzero pixel")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def quantized(self) -> "GridMap":
        """Snap values to the 8-bit grid used on disk."""
        return GridMap(np.round(self.values * 255) / 255, self.kind, self.tx_pixel, self.map_id, dict(self.meta))


@dataclass(frozen=True)
class SimParams:
    tx_power_db: float = 23.0
    pathloss_exponent: float = 2.7
    reference_loss_db: float = 40.0
    wall_loss_db: float = 2.5
    pl_min_db: float = 40.0
    pl_max_db: float = 130.0
    bandwidth_hz: float = 20e6
    noise_psd_dbm_hz: float = -174.0
    noise_figure_db: float = 7.0

    def noise_db(self) -> float:
        """Noise floor in dBm for the configured bandwidth and PSD."""
        return noise_floor_db(self.bandwidth_hz, 10 ** (self.noise_psd_dbm_hz / 10), self.noise_figure_db)

    def __post_init__(self):
        if not self.pl_min_db < self.pl_max_db:
            raise ValueError("pl_min_db must be below pl_max_db")
        if self.pathloss_exponent <= 0:
            raise ValueError("pathloss_exponent must be positive")


# simulator ---------------------------------------------------------------

def line_pixels(start: tuple[int, int], end: tuple[int, int]) -> list[tuple[int, int]]:
    """Digital line from ``start`` to ``end`` (both inclusive).

    Steps once per pixel along the major axis and rounds the minor axis
    half-up, which is what integer Bresenham produces.
    """
    (r0, c0), (r1, c1) = start, end
    dr, dc = r1 - r0, c1 - c0
    n = max(abs(dr), abs(dc))
    if n == 0:
        return [(r0, c0)]
    out = []
    for k in range(n + 1):
        out.append((int(r0 + _round_div(k * dr, n)), int(c0 + _round_div(k * dc, n))))
    return out


def _round_div(num, den):
    """round(num / den) with halves away from zero, integers only."""
    sign = np.sign(num)
    return sign * ((2 * np.abs(num) + den) // (2 * den))


def wall_counts(buildings: np.ndarray, tx: tuple[int, int], chunk: int = 8192) -> np.ndarray:
    """Number of building pixels on the digital line from ``tx`` to each pixel."""
    occ = np.asarray(buildings, dtype=bool)
    h, w = occ.shape
    r0, c0 = tx
    rr, cc = np.divmod(np.arange(h * w), w)
    dr, dc = rr - r0, cc - c0
    n = np.maximum(np.abs(dr), np.abs(dc))
    counts = np.zeros(h * w, dtype=np.int64)
    for s in range(0, h * w, chunk):
        sl = slice(s, s + chunk)
        nn = n[sl]
        kmax = int(nn.max()) if nn.size else 0
        if kmax == 0:
            continue
        k = np.arange(1, kmax + 1)[None, :]
        valid = k <= nn[:, None]
        den = np.maximum(nn, 1)[:, None]
        pr = r0 + _round_div(k * dr[sl, None], den)
        pc = c0 + _round_div(k * dc[sl, None], den)
        pr = np.where(valid, pr, r0)
        pc = np.where(valid, pc, c0)
        counts[sl] = np.sum(occ[pr, pc] & valid, axis=1)
    return counts.reshape(h, w)


def pathloss_db(buildings: np.ndarray, tx: tuple[int, int], p: SimParams) -> np.ndarray:
    h, w = buildings.shape
    rr, cc = np.mgrid[0:h, 0:w]
    d = np.hypot(rr - tx[0], cc - tx[1])
    walls = wall_counts(buildings, tx)
    return p.reference_loss_db + 10 * p.pathloss_exponent * np.log10(np.maximum(d, 1.0)) + walls * p.wall_loss_db


def normalize_db(pl_db: np.ndarray, p: SimParams) -> np.ndarray:
    return np.clip((p.pl_max_db - pl_db) / (p.pl_max_db - p.pl_min_db), 0.0, 1.0)


def simulate_map(buildings: GridMap, tx: tuple[int, int], p: SimParams = SimParams()) -> GridMap:
    """Log-distance path loss plus a fixed loss per building pixel crossed."""
    occ = buildings.values > 0.5
    r, c = tx
    if not (0 <= r < occ.shape[0] and 0 <= c < occ.shape[1]):
        raise ValueError(f"transmitter {tx} lies outside the {occ.shape} map")
    if occ[r, c]:
        raise ValueError(f"transmitter {tx} lies inside a building")
    vals = normalize_db(pathloss_db(occ, tx, p), p)
    vals[occ] = 0.0
    return GridMap(vals, "pathloss", (int(r), int(c)), buildings.map_id)


def random_buildings(size: int, rng: np.random.Generator, coverage: float = 0.2, map_id: str = "") -> GridMap:
    """Axis-aligned rectangular blocks until roughly ``coverage`` is built up."""
    occ = np.zeros((size, size), dtype=bool)
    lo, hi = max(2, size // 16), max(3, size // 5)
    attempts = 0
    while occ.mean() < coverage and attempts < 500:
        attempts += 1
        bh, bw = rng.integers(lo, hi + 1, size=2)
        r, c = rng.integers(0, size - bh + 1), rng.integers(0, size - bw + 1)
        occ[r : r + bh, c : c + bw] = True
    return GridMap(occ.astype(np.float64), "buildings", map_id=map_id)


def random_tx(buildings: GridMap, rng: np.random.Generator) -> tuple[int, int]:
    free = np.argwhere(buildings.values < 0.5)
    r, c = free[rng.integers(len(free))]
    return int(r), int(c)


def tx_onehot(shape: tuple[int, int], tx: tuple[int, int]) -> GridMap:
    v = np.zeros(shape)
    v[tx] = 1.0
    return GridMap(v, "tx_onehot", tx)


# thresholds ---------------------------------------------------------------

def noise_floor_db(bandwidth_hz: float, noise_psd: float, noise_figure_db: float) -> float:
    """Background noise level 10*log10(W*N0) + NF (N0 in linear units per Hz)."""
    if bandwidth_hz <= 0 or noise_psd <= 0:
        raise ValueError("bandwidth and noise PSD must be positive")
    return 10 * math.log10(bandwidth_hz * noise_psd) + noise_figure_db


def pathloss_threshold(tx_power_db: float, snr_thr_db: float, noise_db: float) -> float:
    """Gain level (dB) below which the link is lost: -P_tx + SNR_thr + noise."""
    return -tx_power_db + snr_thr_db + noise_db


def threshold_to_gray(pl_thr_db: float, p: SimParams) -> float:
    """Map a gain threshold in dB onto the normalized gray scale."""
    return float(np.clip((p.pl_max_db + pl_thr_db) / (p.pl_max_db - p.pl_min_db), 0.0, 1.0))


def apply_threshold(m: GridMap, thr: float) -> GridMap:
    """Zero pixels below ``thr`` and rescale the rest onto [0, 1]."""
    if not 0 <= thr < 1:
        raise ValueError(f"threshold must lie in [0, 1), got {thr}")
    v = m.values
    # complement form keeps thr -> 0 and 1 -> 1 exact and rounds 0.6 at 0.2 to exactly 0.5
    out = np.where(v < thr, 0.0, 1.0 - (1.0 - v) / (1.0 - thr))
    return GridMap(np.clip(out, 0, 1), m.kind, m.tx_pixel, m.map_id, dict(m.meta))


# sampling masks ------------------------------------------------------------

@dataclass
class SampleMask:
    mask: np.ndarray
    points: list[tuple[int, int]]
    setting: str
    seed: int

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def parse_setting(setting) -> tuple[str, float | None]:
    """'a' | 'b' | 'c' | 'fixed:<rate>' | 'blocks:<omega>' | float rate."""
    if isinstance(setting, (int, float)) and not isinstance(setting, bool):
        return "fixed", float(setting)
    s = str(setting).strip().lower()
    if s in ("a", "b", "c"):
        return s, None
    name, _, arg = s.partition(":")
    if name in ("fixed", "blocks") and arg:
        return name, float(arg)
    raise ValueError(f"unknown sampling setting {setting!r}")


def _free_pixels(buildings: GridMap | None, shape) -> np.ndarray:
    if buildings is None:
        return np.ones(shape, dtype=bool)
    return buildings.values < 0.5


def _jittered_lattice(free: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """One random free pixel per lattice cell, cell size shrunk until >= n cells hit."""
    h, w = free.shape
    fr, fc = np.nonzero(free)
    spacing = math.sqrt(h * w / n)
    while True:
        s = max(spacing, 1.0)
        cells = (fr // s).astype(np.int64) * (w + 1) + (fc // s).astype(np.int64)
        keys = rng.random(len(fr))
        order = np.lexsort((keys, cells))
        first = np.ones(len(order), dtype=bool)
        first[1:] = cells[order][1:] != cells[order][:-1]
        picks = order[first]
        if len(picks) >= n or s == 1.0:
            break
        spacing *= 0.9
    chosen = np.sort(rng.choice(picks, size=n, replace=False))
    return np.stack([fr[chosen], fc[chosen]], axis=1)


def _points_to_mask(points: np.ndarray, shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    if len(points):
        mask[points[:, 0], points[:, 1]] = True
    return mask


def make_mask(setting, buildings: GridMap | None, seed: int, shape=None) -> SampleMask:
    """Sparse point mask on non-building pixels for settings a/b/c/fixed."""
    shape = buildings.shape if buildings is not None else tuple(shape)
    name, arg = parse_setting(setting)
    if name == "blocks":
        return make_block_mask(int(arg), buildings, seed, shape=shape)
    rng = np.random.default_rng(seed)
    h, w = shape
    if name == "a":
        rate = 0.01
    elif name in ("b", "c"):
        rate = rng.uniform(0.01, 0.10)
    else:
        rate = arg
        if not 0 < rate <= 1:
            raise SamplingError(f"sampling rate must lie in (0, 1], got {rate}")
    n = int(round(rate * h * w))
    free = _free_pixels(buildings, shape)
    if n > free.sum():
        raise SamplingError(f"requested {n} samples but only {int(free.sum())} free pixels")
    if n == 0:
        raise SamplingError("sampling rate yields zero samples")
    if name == "c":
        fr, fc = np.nonzero(free)
        idx = np.sort(rng.choice(len(fr), size=n, replace=False))
        pts = np.stack([fr[idx], fc[idx]], axis=1)
    else:
        pts = _jittered_lattice(free, n, rng)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    label = name if arg is None else f"{name}:{arg:g}"
    return SampleMask(_points_to_mask(pts, shape), [tuple(map(int, p)) for p in pts], label, seed)


def make_block_mask(
    omega: int, buildings: GridMap | None, seed: int, shape=None, max_tries: int = 50, random_tries: int = 3
) -> SampleMask:
    """``omega`` disjoint 4x4 blocks anchored on non-building pixels.

    Anchors are drawn by random sequential placement. Dense requests can
    jam that process well below full packing, so after ``random_tries``
    failures the anchors are drawn from a randomly offset 4-pixel lattice,
    which is disjoint by construction. ``points`` holds the top-left anchor
    of each block.
    """
    shape = buildings.shape if buildings is not None else tuple(shape)
    h, w = shape
    if omega < 1:
        raise SamplingError("omega must be positive")
    if omega * BLOCK * BLOCK > h * w:
        raise SamplingError(f"{omega} blocks of {BLOCK}x{BLOCK} do not fit in {h}x{w}")
    free = _free_pixels(buildings, shape)
    anchors = np.argwhere(free[: h - BLOCK + 1, : w - BLOCK + 1])
    rng = np.random.default_rng(seed)
    for attempt in range(max_tries):
        if attempt < random_tries:
            chosen = _sequential_blocks(anchors, omega, shape, rng)
        else:
            chosen = _lattice_blocks(anchors, omega, rng)
        if chosen is not None:
            occ = np.zeros(shape, dtype=bool)
            for r, c in chosen:
                occ[r : r + BLOCK, c : c + BLOCK] = True
            return SampleMask(occ, sorted(chosen), f"blocks:{omega}", seed)
    raise SamplingError(f"could not place {omega} disjoint blocks after {max_tries} attempts ({len(anchors)} anchors)")


def _sequential_blocks(anchors: np.ndarray, omega: int, shape, rng: np.random.Generator):
    occ = np.zeros(shape, dtype=bool)
    chosen = []
    for i in rng.permutation(len(anchors)):
        r, c = anchors[i]
        if occ[r : r + BLOCK, c : c + BLOCK].any():
            continue
        occ[r : r + BLOCK, c : c + BLOCK] = True
        chosen.append((int(r), int(c)))
        if len(chosen) == omega:
            return chosen
    return None


def _lattice_blocks(anchors: np.ndarray, omega: int, rng: np.random.Generator):
    dr, dc = rng.integers(0, BLOCK, size=2)
    on = anchors[(anchors[:, 0] % BLOCK == dr) & (anchors[:, 1] % BLOCK == dc)]
    if len(on) < omega:
        return None
    pick = rng.choice(len(on), size=omega, replace=False)
    return [(int(r), int(c)) for r, c in on[pick]]


def sample_map(truth: GridMap, mask: SampleMask) -> GridMap:
    """Observed values at masked pixels, zero elsewhere."""
    return GridMap(np.where(mask.mask, truth.values, 0.0), "samples", truth.tx_pixel, truth.map_id)


def add_gaussian_noise(samples: GridMap, mask: SampleMask, sigma_gray: float, seed: int) -> GridMap:
    """Measurement noise with std ``sigma_gray`` on the 0-255 scale, masked pixels only."""
    if sigma_gray < 0:
        raise ValueError("sigma must be non-negative")
    if sigma_gray == 0:
        return GridMap(samples.values.copy(), samples.kind, samples.tx_pixel, samples.map_id)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma_gray / 255.0, size=samples.shape)
    out = np.where(mask.mask, np.clip(samples.values + noise, 0.0, 1.0), samples.values)
    return GridMap(out, samples.kind, samples.tx_pixel, samples.map_id)


# file I/O -------------------------------------------------------------------

def _to_bytes(m: GridMap) -> bytes:
    return np.round(m.values * 255).astype(np.uint8).tobytes()


def write_map(m: GridMap, path) -> Path:
    """RMAP (default) or binary PGM when the suffix is ``.pgm``."""
    path = Path(path)
    h, w = m.shape
    if path.suffix.lower() == ".pgm":
        header = f"P5\n{w} {h}\n255\n".encode()
    else:
        header = RMAP_MAGIC + struct.pack("<II", w, h)
    path.write_bytes(header + _to_bytes(m))
    return path


def _parse_pgm(raw: bytes, path) -> tuple[int, int, bytes]:
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MapFormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise MapFormatError(f"{path}: non-numeric PGM header {tokens}") from None
    if maxval != 255:
        raise MapFormatError(f"{path}: only 8-bit PGM (maxval 255) is supported, got {maxval}")
    return w, h, raw[pos:]


def read_map(path, kind: str = "pathloss") -> GridMap:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == RMAP_MAGIC:
        if len(raw) < 12:
            raise MapFormatError(f"{path}: truncated RMAP header")
        w, h = struct.unpack("<II", raw[4:12])
        payload = raw[12:]
    elif raw[:2] == b"P5":
        w, h, payload = _parse_pgm(raw, path)
    else:
        raise MapFormatError(f"{path}: unknown magic {raw[:4]!r}")
    if len(payload) != w * h:
        raise MapFormatError(f"{path}: expected {w * h} payload bytes for {w}x{h}, found {len(payload)}")
    vals = np.frombuffer(payload, dtype=np.uint8).reshape(h, w) / 255.0
    if kind == "buildings":
        vals = (vals > 0.5).astype(np.float64)
    return GridMap(vals, kind, map_id=path.stem)


@dataclass(frozen=True)
class ManifestEntry:
    region_id: int
    tx_row: int
    tx_col: int
    buildings_path: str
    gain_path: str


def write_manifest(entries: Iterable[ManifestEntry], directory) -> Path:
    path = Path(directory) / MANIFEST_NAME
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for e in entries:
            writer.writerow([e.region_id, e.tx_row, e.tx_col, e.buildings_path, e.gain_path])
    return path


def load_manifest(directory) -> list[ManifestEntry]:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise MapFormatError(f"no {MANIFEST_NAME} in {directory}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_FIELDS:
            raise MapFormatError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}, got {header}")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_FIELDS):
                raise MapFormatError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields, got {len(row)}")
            try:
                entries.append(ManifestEntry(int(row[0]), int(row[1]), int(row[2]), row[3], row[4]))
            except ValueError as exc:
                raise MapFormatError(f"{path}:{lineno}: {exc}") from None
    return entries


# dataset --------------------------------------------------------------------

@dataclass
class Sample:
    region_id: int
    tx: tuple[int, int]
    buildings: GridMap
    gain: GridMap

    @property
    def map_id(self) -> str:
        if self.tx is None:
            return f"r{self.region_id:04d}_{self.gain.map_id or 'unknown'}"
        return f"r{self.region_id:04d}_t{self.tx[0]:03d}_{self.tx[1]:03d}"


def synthesize_region(region: int, tx_per_region: int, size: int, seed: int = 0, params: SimParams = SimParams()):
    """Building map plus ``tx_per_region`` simulated gain maps for one region."""
    rng = np.random.default_rng([seed, region])
    b = random_buildings(size, rng, map_id=f"{region}")
    out = []
    for _ in range(tx_per_region):
        tx = random_tx(b, rng)
        out.append((tx, simulate_map(b, tx, params)))
    return b, out


def synthesize(regions: int, tx_per_region: int, size: int, seed: int = 0, params: SimParams = SimParams()) -> list[Sample]:
    """In-memory dataset, quantized exactly as :func:`generate_dataset` stores it."""
    samples = []
    for region in range(regions):
        b, maps = synthesize_region(region, tx_per_region, size, seed, params)
        for tx, gain in maps:
            samples.append(Sample(region, tx, b, gain.quantized()))
    return samples


def generate_dataset(
    out_dir,
    regions: int,
    tx_per_region: int,
    size: int,
    seed: int = 0,
    params: SimParams = SimParams(),
) -> list[ManifestEntry]:
    """Write building maps, per-transmitter gain maps and the manifest."""
    out = Path(out_dir)
    (out / "buildings").mkdir(parents=True, exist_ok=True)
    (out / "gain").mkdir(parents=True, exist_ok=True)
    entries = []
    for region in range(regions):
        b, maps = synthesize_region(region, tx_per_region, size, seed, params)
        bpath = f"buildings/{region}.rmap"
        write_map(b, out / bpath)
        for t, (tx, gain) in enumerate(maps):
            gpath = f"gain/{region}_{t}.rmap"
            write_map(gain, out / gpath)
            entries.append(ManifestEntry(region, tx[0], tx[1], bpath, gpath))
    write_manifest(entries, out)
    return entries


def load_dataset(directory, regions: Sequence[int] | None = None) -> list[Sample]:
    directory = Path(directory)
    wanted = None if regions is None else set(regions)
    cache: dict[str, GridMap] = {}
    samples = []
    for e in load_manifest(directory):
        if wanted is not None and e.region_id not in wanted:
            continue
        if e.buildings_path not in cache:
            cache[e.buildings_path] = read_map(directory / e.buildings_path, kind="buildings")
        gain = read_map(directory / e.gain_path)
        gain.tx_pixel = (e.tx_row, e.tx_col)
        samples.append(Sample(e.region_id, (e.tx_row, e.tx_col), cache[e.buildings_path], gain))
    return samples


def split_regions(region_ids: Iterable[int], ratios=(500, 100, 100), seed: int = 0) -> dict[str, list[int]]:
    """Disjoint train/val/test region lists with sizes proportional to ``ratios``."""
    ids = sorted(set(region_ids))
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    total = sum(ratios)
    n_train = int(round(len(ids) * ratios[0] / total))
    n_val = int(round(len(ids) * ratios[1] / total))
    return {
        "train": sorted(perm[:n_train]),
        "val": sorted(perm[n_train : n_train + n_val]),
        "test": sorted(perm[n_train + n_val :]),
    }

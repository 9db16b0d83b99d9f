"""Synthetic raw radar data: chirp echoes of shape-outline targets.

A point scatterer at range delay ``tau0`` and closest-approach time ``t0``
returns ``sigma * exp(j pi K_r (tau - tau0)^2) * exp(-j pi K_a (t - t0)^2)``.
Rows of a raw matrix are range samples (``tau = m / f_sr``) and columns are
azimuth samples (``t = n / prf``).
"""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

CLASS_NAMES = ("circle", "square", "triangle")

# Largest random scale times largest deformation; keeps outlines inside the footprint.
_MAX_GROWTH = 1.3 * 1.1


class ParameterError(ValueError):
    pass


class PlacementError(ValueError):
    pass


class DatasetFormatError(ValueError):
    """Malformed dataset file; the message names the byte offset."""


@dataclass(frozen=True)
class RadarParams:
    carrier_freq: float = 5e9          # Hz
    f_sr: float = 600e6                # range sampling rate, Hz
    pulse_duration: float = 10e-6      # s
    range_bandwidth: float = 500e6     # Hz
    range_distance: float = 5000.0     # m
    target_speed: float = 100.0        # m/s
    prf: float = 1000.0                # Hz
    raw_size: int = 512                # samples per side
    filter_size: int = 64              # matched-filter taps per side
    footprint: int = 64                # target outline extent, samples per side

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq

    @property
    def k_r(self) -> float:
        return derive_rates(self)[0]

    @property
    def k_a(self) -> float:
        return derive_rates(self)[1]

    @property
    def support_half_width(self) -> float:
        """Half the chirp extent in samples; also used for the azimuth window."""
        return 0.5 * self.pulse_duration * self.f_sr

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "RadarParams":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ParameterError(f"unknown radar parameter {key!r}")
            kwargs[key] = int(value) if types[key] in (int, "int") else float(value)
        return cls(**kwargs)


def derive_rates(params: RadarParams) -> tuple[float, float]:
    """``(K_r, K_a)``: ``B / T`` and ``2 v^2 / (lambda R)``."""
    for name in ("carrier_freq", "f_sr", "pulse_duration", "range_bandwidth",
                 "range_distance", "target_speed", "prf"):
        if not getattr(params, name) > 0:
            raise ParameterError(f"{name} must be positive, got {getattr(params, name)}")
    k_r = params.range_bandwidth / params.pulse_duration
    wavelength = SPEED_OF_LIGHT / params.carrier_freq
    k_a = 2.0 * params.target_speed ** 2 / (wavelength * params.range_distance)
    return k_r, k_a


def table1_params() -> RadarParams:
    """Full-scale profile: 512x512 raw data, 64x64 filter."""
    return RadarParams()


def desk_params() -> RadarParams:
    """128x128 raw data and a 16x16 filter.

    Sampling rates are the full-scale ones divided by four. The pulse is
    shortened to span exactly ``filter_size`` range samples and the range
    bandwidth keeps the full-scale ratio ``B / f_sr = 5/6``; the PRF is chosen
    so the azimuth chirp over ``filter_size`` pulses also sweeps 5/6 of the
    PRF. Both chirps are then fully compressible by a 16x16 filter.
    """
    full = table1_params()
    n = 16
    f_sr = full.f_sr / 4
    k_a = derive_rates(full)[1]
    frac = full.range_bandwidth / full.f_sr
    return replace(
        full,
        f_sr=f_sr,
        pulse_duration=n / f_sr,
        range_bandwidth=frac * f_sr,
        prf=float(np.sqrt(k_a * n / frac)),
        raw_size=128,
        filter_size=n,
    )


def literal_desk_params() -> RadarParams:
    """Full-scale chirps with both sampling rates divided by four (128/16)."""
    full = table1_params()
    return replace(full, f_sr=full.f_sr / 4, prf=full.prf / 4, raw_size=128, filter_size=16)


PROFILES = {
    "desk": desk_params,
    "full": table1_params,
    "desk-literal": literal_desk_params,
}


@dataclass(frozen=True)
class Scatterer:
    sigma: float
    tau0: float   # s
    t0: float     # s


@dataclass
class Sample:
    raw: np.ndarray
    label: int


def _echo_factors(scatterers, params: RadarParams):
    """Separable range/azimuth factors, each of shape (raw_size, n_scatterers)."""
    size = params.raw_size
    k_r, k_a = derive_rates(params)
    m0 = np.array([s.tau0 for s in scatterers]) * params.f_sr
    n0 = np.array([s.t0 for s in scatterers]) * params.prf
    half = params.support_half_width * (1 + 1e-12)
    idx = np.arange(size, dtype=np.float64)[:, None]
    dm = idx - m0[None, :]
    dn = idx - n0[None, :]
    rng_f = np.where(np.abs(dm) <= half, np.exp(1j * np.pi * k_r * (dm / params.f_sr) ** 2), 0)
    az_f = np.where(np.abs(dn) <= half, np.exp(-1j * np.pi * k_a * (dn / params.prf) ** 2), 0)
    return rng_f, az_f


def _check_placement(sc: Scatterer, params: RadarParams) -> None:
    m0 = sc.tau0 * params.f_sr
    n0 = sc.t0 * params.prf
    limit = params.raw_size - 1
    if not (0 <= m0 <= limit and 0 <= n0 <= limit):
        raise PlacementError(
            f"scatterer at sample ({m0:.3f}, {n0:.3f}) outside {params.raw_size}x{params.raw_size} matrix")


def point_echo(sc: Scatterer, params: RadarParams) -> np.ndarray:
    """Raw matrix of a single scatterer, zero outside its chirp support."""
    _check_placement(sc, params)
    r, a = _echo_factors([sc], params)
    return sc.sigma * np.outer(r[:, 0], a[:, 0])


def echo_sum(scatterers, params: RadarParams) -> np.ndarray:
    for sc in scatterers:
        _check_placement(sc, params)
    r, a = _echo_factors(scatterers, params)
    sigma = np.array([s.sigma for s in scatterers])
    return (r * sigma[None, :]) @ a.T


def support_mask(scatterers, params: RadarParams) -> np.ndarray:
    """Union of the echo supports as a boolean raw-size matrix."""
    r, a = _echo_factors(scatterers, params)
    return ((np.abs(r) > 0).astype(np.int64) @ (np.abs(a) > 0).astype(np.int64).T) > 0


def _outline(label: int, n_points: int, radius: float, jitter, offset: float) -> np.ndarray:
    """Points (row, col) evenly spaced along a shape outline centred on 0."""
    t = (np.arange(n_points) + offset) / n_points
    if label == 0:
        rr, rc = radius * (1 + jitter[0]), radius * (1 + jitter[1])
        ang = 2 * np.pi * t
        return np.stack([rr * np.sin(ang), rc * np.cos(ang)], axis=1)
    if label == 1:
        angles = np.deg2rad([45, 135, 225, 315])
    elif label == 2:
        angles = np.deg2rad([90, 210, 330])
    else:
        raise ValueError(f"unknown class label {label}")
    verts = radius * np.stack([np.sin(angles), np.cos(angles)], axis=1)
    verts = verts + radius * np.asarray(jitter)[: len(verts)]
    closed = np.vstack([verts, verts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = t * cum[-1]
    i = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = ((s - cum[i]) / seg[i])[:, None]
    return closed[i] * (1 - frac) + closed[i + 1] * frac


def render_shape(label: int, params: RadarParams, rng: np.random.Generator,
                 deform: bool = True) -> list[Scatterer]:
    """Scatterers along a circle, square or triangle outline.

    With ``deform`` the outline gets a random scale in [0.7, 1.3] and random
    vertex jitter of at most 10% of the radius (per-axis radius change for the
    circle); amplitudes are always uniform in [0.5, 1.5]. Points snap to the
    sample grid and duplicates are dropped.
    """
    radius = params.footprint / 2 / _MAX_GROWTH
    n_points = int(rng.integers(30, 81))
    if deform:
        radius *= rng.uniform(0.7, 1.3)
        if label == 0:
            jitter = rng.uniform(-0.1, 0.1, size=2)
        else:
            # uniform in a disc of radius 0.1
            r = 0.1 * np.sqrt(rng.uniform(size=4))
            phi = rng.uniform(0, 2 * np.pi, size=4)
            jitter = np.stack([r * np.sin(phi), r * np.cos(phi)], axis=1)
    else:
        jitter = np.zeros((4, 2)) if label else np.zeros(2)
    offset = rng.uniform()
    pts = np.rint(_outline(label, n_points, radius, jitter, offset)).astype(np.int64)
    _, first = np.unique(pts, axis=0, return_index=True)
    pts = pts[np.sort(first)]

    margin = params.filter_size // 2
    half = params.footprint // 2
    lo, hi = margin + half, params.raw_size - margin - half
    if hi < lo:
        raise PlacementError(f"footprint {params.footprint} does not fit in raw size {params.raw_size}")
    centre = rng.integers(lo, hi + 1, size=2)
    pts = pts + centre
    amps = rng.uniform(0.5, 1.5, size=len(pts))
    return [Scatterer(float(a), p[0] / params.f_sr, p[1] / params.prf) for a, p in zip(amps, pts)]


def noise_variance(signal: np.ndarray, mask: np.ndarray, snr_db: float) -> float:
    """Per-sample noise power giving ``snr_db`` against the in-support signal power."""
    p_signal = float(np.mean(np.abs(signal[mask]) ** 2))
    return p_signal / 10 ** (snr_db / 10)


def synthesize(label: int, params: RadarParams, snr_db: float, rng: np.random.Generator,
               deform: bool = True) -> Sample:
    scatterers = render_shape(label, params, rng, deform=deform)
    raw = echo_sum(scatterers, params)
    if np.isfinite(snr_db):
        var = noise_variance(raw, support_mask(scatterers, params), snr_db)
        noise = rng.standard_normal(raw.shape) + 1j * rng.standard_normal(raw.shape)
        raw = raw + np.sqrt(var / 2) * noise
    elif snr_db < 0:
        raise ParameterError("snr_db = -inf is not allowed")
    return Sample(raw, label)


@dataclass
class Dataset:
    """Labelled raw matrices stored at on-disk precision (complex64)."""

    raw: np.ndarray          # (n, rows, cols) complex64
    labels: np.ndarray       # (n,) uint8
    params: RadarParams
    seed: int
    snr_db: float = float("inf")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(self.raw[i], int(self.labels[i]))

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=len(CLASS_NAMES)).tolist()


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, index)))


def generate_dataset(n: int, params: RadarParams, snr_db: float, seed: int,
                     threads: int = 1) -> Dataset:
    """Stratified dataset; a pure function of its arguments (``threads`` excluded)."""
    if n < 1:
        raise ParameterError(f"n must be at least 1, got {n}")
    if seed < 0:
        raise ParameterError(f"seed must be non-negative, got {seed}")
    label_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    labels = label_rng.permutation(np.arange(n) % len(CLASS_NAMES)).astype(np.uint8)

    def make(i: int) -> np.ndarray:
        return synthesize(int(labels[i]), params, snr_db, _sample_rng(seed, i)).raw.astype(np.complex64)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            raws = list(pool.map(make, range(n)))
    else:
        raws = [make(i) for i in range(n)]
    return Dataset(np.stack(raws), labels, params, seed, snr_db)


# Dataset file "HRD1": magic, u32 n, u32 rows, u32 cols, u64 seed, then per sample
# u8 label + rows*cols little-endian complex64 (re, im interleaved).
DATASET_MAGIC = b"HRD1"
_HEADER = struct.Struct("<4sIIIQ")


def dataset_bytes(ds: Dataset) -> bytes:
    n, rows, cols = ds.raw.shape
    rec = np.dtype([("label", "u1"), ("raw", "<c8", (rows, cols))])
    body = np.empty(n, dtype=rec)
    body["label"] = ds.labels
    body["raw"] = ds.raw
    return _HEADER.pack(DATASET_MAGIC, n, rows, cols, ds.seed) + body.tobytes()


def params_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".params")


def write_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dataset_bytes(ds))
    tmp.replace(path)
    text = ds.params.to_text() + f"snr_db={ds.snr_db!r}\n"
    params_path(path).write_text(text)


def parse_dataset(data: bytes, params: RadarParams | None = None, snr_db: float = float("inf")) -> Dataset:
    if len(data) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: file ends at byte offset {len(data)}")
    magic, n, rows, cols, seed = _HEADER.unpack_from(data)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at byte offset 0")
    rec_size = 1 + 8 * rows * cols
    expected = _HEADER.size + n * rec_size
    if len(data) != expected:
        complete = (len(data) - _HEADER.size) // rec_size if len(data) > _HEADER.size else 0
        offset = _HEADER.size + min(complete, n) * rec_size
        raise DatasetFormatError(
            f"dataset size {len(data)} bytes, expected {expected}: "
            f"sample {min(complete, n)} at byte offset {offset} is "
            f"{'truncated' if len(data) < expected else 'followed by trailing bytes'}")
    rec = np.dtype([("label", "u1"), ("raw", "<c8", (rows, cols))])
    body = np.frombuffer(data, dtype=rec, count=n, offset=_HEADER.size)
    labels = body["label"].copy()
    bad = np.nonzero(labels >= len(CLASS_NAMES))[0]
    if len(bad):
        raise DatasetFormatError(
            f"invalid label {labels[bad[0]]} at byte offset {_HEADER.size + bad[0] * rec_size}")
    if params is None:
        params = replace(table1_params(), raw_size=rows)
    return Dataset(body["raw"].astype(np.complex64), labels, params, seed, snr_db)


def read_dataset(path) -> Dataset:
    path = Path(path)
    params, snr_db = None, float("inf")
    side = params_path(path)
    if side.exists():
        lines = side.read_text().splitlines()
        snr_lines = [l for l in lines if l.startswith("snr_db=")]
        if snr_lines:
            snr_db = float(snr_lines[-1].partition("=")[2])
        params = RadarParams.from_text("\n".join(l for l in lines if not l.startswith("snr_db=")))
    return parse_dataset(path.read_bytes(), params, snr_db)


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()

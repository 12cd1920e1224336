"""Spectral cube container, MSC binary I/O and the per-pixel forward model.

A cube is stored as a C-contiguous ``(height, width, bands)`` float64 array,
so each pixel's spectrum is contiguous (pixel-major / band-interleaved-by-
pixel). Pixel ``(i, j)`` has flat index ``i * width + j``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MSC1"
_HEADER = struct.Struct("<4sIIIB")


class CubeFormatError(ValueError):
    """Malformed MSC file."""


class CubeValidationError(ValueError):
    """Cube payload violates an invariant (non-finite or negative values)."""


@dataclass(frozen=True, eq=False)
class SpectralCube:
    data: np.ndarray
    wavelengths: np.ndarray | None = field(default=None)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"cube data must be 3-D (H, W, K), got shape {data.shape}")
        _check_values(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.wavelengths is not None:
            wl = np.asarray(self.wavelengths, dtype=np.float64).ravel()
            if wl.shape[0] != data.shape[2]:
                raise ValueError(
                    f"{wl.shape[0]} wavelengths given for {data.shape[2]} bands"
                )
            if wl.size > 1 and not np.all(np.diff(wl) > 0):
                raise ValueError("wavelengths must be strictly increasing")
            wl.setflags(write=False)
            object.__setattr__(self, "wavelengths", wl)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def pixels(self) -> np.ndarray:
        """View of the data as an ``(N, K)`` matrix of spectra."""
        return self.data.reshape(-1, self.bands)

    def spectrum(self, i: int, j: int) -> np.ndarray:
        return self.data[i, j]

    def with_data(self, data) -> "SpectralCube":
        return SpectralCube(np.asarray(data).reshape(self.shape), self.wavelengths)

    def select_bands(self, stride: int = 1, start: int = 0) -> "SpectralCube":
        """Keep every ``stride``-th band starting at ``start``."""
        if stride < 1:
            raise ValueError("band stride must be >= 1")
        sl = slice(start, None, stride)
        wl = None if self.wavelengths is None else self.wavelengths[sl]
        return SpectralCube(self.data[:, :, sl], wl)

    def same_grid(self, other: "SpectralCube") -> bool:
        return self.shape == other.shape

    def __eq__(self, other):
        if not isinstance(other, SpectralCube):
            return NotImplemented
        if self.shape != other.shape or not np.array_equal(self.data, other.data):
            return False
        if (self.wavelengths is None) != (other.wavelengths is None):
            return False
        return self.wavelengths is None or np.array_equal(self.wavelengths, other.wavelengths)

    __hash__ = None


def _check_values(data: np.ndarray) -> None:
    bad = ~np.isfinite(data) | (data < 0)
    if bad.any():
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        raise CubeValidationError(
            f"invalid value {data[idx]!r} at index {idx}; cube values must be finite and >= 0"
        )


def _require_same_shape(a: SpectralCube, b: SpectralCube) -> None:
    if a.shape != b.shape:
        raise ValueError(f"cube dimensions differ: {a.shape} vs {b.shape}")


def elementwise_mul(s: SpectralCube, r: SpectralCube) -> SpectralCube:
    """Forward model: per-pixel, per-band product of shading and reflectance."""
    _require_same_shape(s, r)
    return SpectralCube(s.data * r.data, s.wavelengths)


def safe_divide(l: SpectralCube, r: SpectralCube, eps: float | None = None) -> SpectralCube:
    """``l / max(r, eps)``; ``eps`` defaults to 1e-6 times the max of ``r``."""
    _require_same_shape(l, r)
    if eps is None:
        eps = 1e-6 * float(r.data.max()) if r.data.size else 1e-6
        if eps <= 0:
            eps = 1e-6
    if not eps > 0:
        raise ValueError("eps must be positive")
    return SpectralCube(l.data / np.maximum(r.data, eps), l.wavelengths)


def pseudo_rgb(cube: SpectralCube, response: np.ndarray) -> np.ndarray:
    """Project spectra through a 3xK response and min-max normalize to [0, 1].

    Each channel is normalized over the image on its own. A channel that is
    constant across the image maps to zeros.
    """
    response = np.asarray(response, dtype=np.float64)
    if response.shape != (3, cube.bands):
        raise ValueError(
            f"response must have shape (3, {cube.bands}), got {response.shape}"
        )
    rgb = cube.data @ response.T
    lo = rgb.min(axis=(0, 1))
    span = rgb.max(axis=(0, 1)) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (rgb - lo) / safe, 0.0)
    return np.clip(out, 0.0, 1.0)


def save_png(rgb: np.ndarray, path) -> None:
    from PIL import Image

    img = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


# -- MSC binary format ---------------------------------------------------------


def encode_cube(cube: SpectralCube) -> bytes:
    payload32 = cube.data.astype("<f4")
    _check_values(payload32.astype(np.float64))
    has_wl = cube.wavelengths is not None
    parts = [_HEADER.pack(MAGIC, cube.height, cube.width, cube.bands, 1 if has_wl else 0)]
    if has_wl:
        parts.append(cube.wavelengths.astype("<f4").tobytes())
    parts.append(payload32.tobytes(order="C"))
    return b"".join(parts)


def decode_cube(buf: bytes) -> SpectralCube:
    if len(buf) < _HEADER.size:
        raise CubeFormatError(f"file too short for MSC header ({len(buf)} bytes)")
    magic, h, w, k, flags = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CubeFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if flags & ~1:
        raise CubeFormatError(f"unknown flag bits 0x{flags:02x}")
    off = _HEADER.size
    wl = None
    if flags & 1:
        end = off + 4 * k
        if len(buf) < end:
            raise CubeFormatError("truncated wavelength block")
        wl = np.frombuffer(buf, dtype="<f4", count=k, offset=off).astype(np.float64)
        off = end
    n = h * w * k
    if len(buf) != off + 4 * n:
        raise CubeFormatError(
            f"payload size mismatch: expected {4 * n} bytes, found {len(buf) - off}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float64)
    return SpectralCube(data.reshape(h, w, k), wl)


def load_cube(path) -> SpectralCube:
    return decode_cube(Path(path).read_bytes())


def save_cube(cube: SpectralCube, path) -> None:
    """Write ``cube`` as MSC. Values are stored as float32."""
    Path(path).write_bytes(encode_cube(cube))


# -- spectrum CSVs ---------------------------------------------------------------


def load_spectrum_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``wavelength,value`` lines. Returns ``(wavelengths, values)``."""
    wl, vals = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                a, b = float(row[0]), float(row[1])
            except ValueError:
                if not wl:  # header line
                    continue
                raise
            wl.append(a)
            vals.append(b)
    if not vals:
        raise ValueError(f"{path}: no spectrum rows")
    return np.array(wl), np.array(vals)


def save_spectrum_csv(path, wavelengths, values) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for a, b in zip(wavelengths, values):
            writer.writerow([repr(float(a)), repr(float(b))])


def default_wavelengths(bands: int, lo: float = 450.0, hi: float = 700.0) -> np.ndarray:
    if bands == 1:
        return np.array([lo])
    return np.linspace(lo, hi, bands)


def resample_spectra(values: np.ndarray, src_wl, dst_wl) -> np.ndarray:
    """Linear interpolation of spectra (last axis) from ``src_wl`` to ``dst_wl``."""
    values = np.asarray(values, dtype=np.float64)
    src_wl = np.asarray(src_wl, dtype=np.float64)
    dst_wl = np.asarray(dst_wl, dtype=np.float64)
    if src_wl.shape == dst_wl.shape and np.allclose(src_wl, dst_wl):
        return values.copy()
    flat = values.reshape(-1, values.shape[-1])
    out = np.stack([np.interp(dst_wl, src_wl, row) for row in flat])
    return out.reshape(values.shape[:-1] + (len(dst_wl),))


def load_response(wavelengths=None, bands: int | None = None, path=None) -> np.ndarray:
    """3xK pseudo-RGB response sampled at ``wavelengths``.

    Reads the shipped ``data/rgb_response.csv`` (``wavelength,r,g,b``) unless
    ``path`` is given. Without wavelengths, ``bands`` samples spread
    uniformly over 450-700 nm are used.
    """
    if path is None:
        path = Path(__file__).with_name("data") / "rgb_response.csv"
    table = np.loadtxt(path, delimiter=",", skiprows=1)
    if wavelengths is None:
        if bands is None:
            raise ValueError("need wavelengths or a band count")
        wavelengths = default_wavelengths(bands)
    return resample_spectra(table[:, 1:].T, table[:, 0], wavelengths)

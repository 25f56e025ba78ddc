"""Image grids, the seeded generator and on-disk formats shared by every stage.

Images live in memory as 2D ``float64`` arrays indexed ``[row, col]``;
multichannel fields are ``(channels, rows, cols)`` arrays. The VMTF layout::

    offset  size  field
    0       4     magic b"VMTF"
    4       2     version (u16 LE) = 1
    6       2     channels (u16 LE)
    8       4     height (u32 LE)
    12      4     width (u32 LE)
    16      ...   channels*height*width float32 LE, channel-major then row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

VMTF_MAGIC = b"VMTF"
VMTF_VERSION = 1
_VMTF_HEADER = struct.Struct("<4sHHII")

# 2**32 * 2**32 floats would overflow any sane allocation; cap the payload.
_MAX_VMTF_VALUES = 1 << 31

CHANNELS = ("gray", "green", "red", "blue")


class FormatError(ValueError):
    """Raised for malformed or unsupported files."""


# --------------------------------------------------------------------------
# Rng: SplitMix64
# --------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 generator.

    The state is a 64-bit counter. Each draw advances it by the golden-ratio
    constant ``0x9E3779B97F4A7C15`` (mod 2**64) and returns the mixed value::

        z = state
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        out = z ^ (z >> 31)

    Uniform reals are ``(out >> 11) * 2**-53`` so they lie in ``[0, 1)``.
    Because the state update is additive, a block of ``n`` draws is computed
    in one vectorised pass and is identical to ``n`` scalar draws.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _GOLDEN
            out = _splitmix(z)
        self.state = (self.state + n * 0x9E3779B97F4A7C15) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def next_uniform(self) -> float:
        return float(self.uniform(1)[0])

    def normal(self, n: int) -> np.ndarray:
        """Standard normal draws by Box-Muller, two uniforms per value."""
        u = self.uniform(2 * n).reshape(n, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return r * np.cos(2.0 * np.pi * u[:, 1])

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by our own stream so the order is platform independent.
        perm = np.arange(n)
        u = self.uniform(max(n - 1, 0))
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream keyed by ``tag``; does not advance self."""
        with np.errstate(over="ignore"):
            mixed = _splitmix(np.array([self.state ^ (int(tag) & _MASK64)], dtype=np.uint64))
        return Rng(int(mixed[0]))


def rng_next_uniform(rng: Rng) -> float:
    return rng.next_uniform()


# --------------------------------------------------------------------------
# Intensity helpers
# --------------------------------------------------------------------------


def as_image(x, name="image") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    return arr


def as_mask(y, name="mask") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be strictly binary")
    return arr.astype(np.uint8)


def normalize(x) -> np.ndarray:
    """Min-max rescale to [0, 1]; constant images become all zeros."""
    x = as_image(x)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    out = (x - lo) / (hi - lo)
    # guard against 1 ulp overshoot so idempotence holds
    return np.clip(out, 0.0, 1.0)


def negate(x) -> np.ndarray:
    return 1.0 - as_image(x)


# --------------------------------------------------------------------------
# Raster I/O
# --------------------------------------------------------------------------


def _png_is_16bit_color(path: Path) -> bool:
    with open(path, "rb") as fh:
        head = fh.read(26)
    if head[:8] != b"\x89PNG\r\n\x1a\n" or head[12:16] != b"IHDR":
        return False
    bit_depth, color_type = head[24], head[25]
    return bit_depth == 16 and color_type in (2, 6)


def _read_raw(path: Path) -> tuple[np.ndarray, float]:
    """Return (array, full-scale value). Color arrays come back as HxWx3 RGB."""
    if _png_is_16bit_color(path):
        import cv2

        arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if arr is None:
            raise FormatError(f"{path}: could not decode 16-bit color PNG")
        return arr[..., 2::-1].copy(), 65535.0

    try:
        im = PILImage.open(path)
        im.load()
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: not a readable PNG/PGM ({exc})") from exc
    mode = im.mode
    if mode == "L":
        return np.asarray(im), 255.0
    if mode.startswith("I;16"):
        return np.asarray(im).astype(np.uint16), 65535.0
    if mode == "I" and im.format in ("PNG", "PPM"):
        # Pillow widens 16-bit PGM/PNG to mode I; reject anything outside 16 bits.
        arr = np.asarray(im)
        if arr.min() < 0 or arr.max() > 65535:
            raise FormatError(f"{path}: 32-bit integer images are not supported")
        return arr.astype(np.uint16), 65535.0
    if mode in ("RGB", "RGBA"):
        return np.asarray(im)[..., :3], 255.0
    raise FormatError(
        f"{path}: unsupported color mode {mode!r}; expected 8/16-bit grayscale or RGB"
    )


def load_image(path, channel_select="gray", negate=False) -> np.ndarray:
    """Read a PNG/PGM into a [0, 1] image.

    Values are scaled by the full range of the stored bit depth (255 or
    65535), so 8-bit 255 maps to exactly 1. For RGB input ``channel_select``
    picks a plane; ``"gray"`` on RGB uses the ITU-R 601 luma weights. With
    ``negate`` the result is ``1 - value``.
    """
    path = Path(path)
    if channel_select not in CHANNELS:
        raise ValueError(f"channel_select must be one of {CHANNELS}, got {channel_select!r}")
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    arr, full = _read_raw(path)
    if arr.size == 0 or 0 in arr.shape[:2]:
        raise FormatError(f"{path}: zero-sized image")
    arr = arr.astype(np.float64)
    if arr.ndim == 3:
        if channel_select == "gray":
            arr = 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]
        else:
            arr = arr[..., {"red": 0, "green": 1, "blue": 2}[channel_select]]
    out = arr / full
    return 1.0 - out if negate else out


def save_image(x, path, bit_depth=8) -> None:
    """Write a [0, 1] image as 8- or 16-bit grayscale PNG/PGM (values are clipped)."""
    x = np.clip(as_image(x), 0.0, 1.0)
    if bit_depth == 8:
        PILImage.fromarray(np.round(x * 255.0).astype(np.uint8), mode="L").save(path)
    elif bit_depth == 16:
        PILImage.fromarray(np.round(x * 65535.0).astype(np.uint16)).save(path)
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")


def save_rgb(rgb, path) -> None:
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    PILImage.fromarray(np.round(rgb * 255.0).astype(np.uint8), mode="RGB").save(path)


# --------------------------------------------------------------------------
# VMTF fields
# --------------------------------------------------------------------------


def write_field(field, path) -> None:
    arr = np.asarray(field)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"field must be (channels, height, width), got shape {arr.shape}")
    c, h, w = arr.shape
    if c > 0xFFFF or h > 0xFFFFFFFF or w > 0xFFFFFFFF:
        raise ValueError(f"field dimensions {arr.shape} do not fit the VMTF header")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_VMTF_HEADER.pack(VMTF_MAGIC, VMTF_VERSION, c, h, w))
        fh.write(payload.tobytes())


def read_field(path) -> np.ndarray:
    """Read a VMTF file into a ``(channels, height, width)`` float32 array."""
    data = Path(path).read_bytes()
    if len(data) < _VMTF_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, c, h, w = _VMTF_HEADER.unpack_from(data)
    if magic != VMTF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {VMTF_MAGIC!r}")
    if version != VMTF_VERSION:
        raise FormatError(f"{path}: unsupported VMTF version {version}")
    n = c * h * w
    if n > _MAX_VMTF_VALUES:
        raise FormatError(f"{path}: header declares {c}x{h}x{w} values, too large")
    expected = _VMTF_HEADER.size + 4 * n
    if len(data) != expected:
        kind = "truncated payload" if len(data) < expected else "trailing bytes after payload"
        raise FormatError(
            f"{path}: {kind}: header declares {c}x{h}x{w} "
            f"({expected} bytes), file has {len(data)}"
        )
    return np.frombuffer(data, dtype="<f4", offset=_VMTF_HEADER.size).reshape(c, h, w).copy()


def read_any_image(path, channel_select="gray", negate=False) -> np.ndarray:
    """1-channel VMTF or PNG/PGM, whichever the suffix says."""
    path = Path(path)
    if path.suffix.lower() == ".vmtf":
        if not path.exists():
            raise FileNotFoundError(f"no such image: {path}")
        field = read_field(path)
        if field.shape[0] != 1:
            raise FormatError(f"{path}: expected a 1-channel field, got {field.shape[0]}")
        x = field[0].astype(np.float64)
        return 1.0 - x if negate else x
    return load_image(path, channel_select, negate)

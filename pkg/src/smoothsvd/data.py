"""Image / IDX ingestion and deterministic synthetic datasets."""

import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


# ---------------------------------------------------------------------------
# PGM / PNG


def _pgm_tokens(raw, start, count, path):
    """Read ``count`` whitespace-separated ASCII tokens (skipping comments)."""
    tokens = []
    pos = start
    n = len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise DataFormatError(path, pos, "unexpected end of file in PGM header")
        tok_start = pos
        while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        tok = raw[tok_start:pos]
        if not tok.isdigit():
            raise DataFormatError(path, tok_start, f"expected an integer, got {tok[:16]!r}")
        tokens.append((int(tok), tok_start))
    return tokens, pos


def parse_pgm(raw, path="<bytes>"):
    magic = raw[:2]
    if magic not in (b"P2", b"P5"):
        raise DataFormatError(path, 0, f"not a PGM file (magic {magic!r})")
    header, pos = _pgm_tokens(raw, 2, 3, path)
    (w, _), (h, _), (maxval, mv_off) = header
    if w < 1 or h < 1:
        raise DataFormatError(path, header[0][1], "image dimensions must be positive")
    if not 0 < maxval < 65536:
        raise DataFormatError(path, mv_off, f"invalid maxval {maxval}")
    if magic == b"P2":
        vals, _ = _pgm_tokens(raw, pos, w * h, path)
        pixels = np.array([v for v, _ in vals], dtype=np.float64)
        for v, off in vals:
            if v > maxval:
                raise DataFormatError(path, off, f"pixel value {v} exceeds maxval {maxval}")
    else:
        pos += 1  # single whitespace byte after maxval
        width = 1 if maxval < 256 else 2
        need = w * h * width
        if len(raw) - pos < need:
            raise DataFormatError(path, len(raw), f"expected {need} pixel bytes, found {len(raw) - pos}")
        dtype = np.uint8 if width == 1 else np.dtype(">u2")
        pixels = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).astype(np.float64)
    return (pixels / maxval).reshape(1, h, w)


def write_pgm(path, image, binary=True):
    """Write a single-channel image in [0, 1] as 8-bit PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if binary:
        data = f"P5\n{w} {h}\n255\n".encode() + q.tobytes()
    else:
        rows = "\n".join(" ".join(str(int(v)) for v in row) for row in q)
        data = f"P2\n{w} {h}\n255\n{rows}\n".encode()
    Path(path).write_bytes(data)


def ingest_image(path):
    """Decode a PNG or PGM (P2/P5) file into a ``c x h x w`` float tensor in [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] in (b"P2", b"P5"):
        return parse_pgm(raw, path)
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        try:
            with Image.open(path) as im:
                im.load()
                if im.mode not in ("L", "RGB"):
                    im = im.convert("RGBA" if "A" in im.mode else "RGB")
                arr = np.asarray(im)
        except OSError as exc:
            raise DataFormatError(path, 8, f"PNG decode failed: {exc}") from exc
        maxval = 65535.0 if arr.dtype == np.uint16 else 255.0
        arr = arr.astype(np.float64) / maxval
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = arr[..., :3].transpose(2, 0, 1)
        return np.ascontiguousarray(arr)
    raise DataFormatError(path, 0, "unrecognized image format (expected PNG or PGM)")


def write_png(path, image):
    from PIL import Image

    img = np.asarray(image, dtype=np.float64)
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if q.shape[0] == 1:
        Image.fromarray(q[0], mode="L").save(path)
    else:
        Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path)


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, magic):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise DataFormatError(path, 0, "file too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(path, 0, f"bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError(path, len(raw), "truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) - header_end != count:
        raise DataFormatError(path, header_end,
                              f"expected {count} data bytes, found {len(raw) - header_end}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def ingest_idx(images_path, labels_path):
    """Load an IDX image/label pair; images become ``n x 1 x h x w`` in [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(labels_path, 4, f"{labels.shape[0]} labels for {images.shape[0]} images")
    x = images.astype(np.float64)[:, None] / 255.0
    return x, labels.astype(np.int64)


def write_idx(images_path, labels_path, x, y):
    q = np.clip(np.round(np.asarray(x).reshape(len(x), *np.asarray(x).shape[-2:]) * 255.0), 0, 255)
    n, h, w = q.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w)
                                  + q.astype(np.uint8).tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n)
                                  + np.asarray(y, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic data


def gradient_image(h=32, w=32):
    """Single-channel diagonal ramp: pixel (y, x) = (x + y) / (h + w - 2)."""
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx + yy) / max(h + w - 2, 1)).astype(np.float64)[None]


def blob_image(size=64, seed=0, channels=3, n_blobs=12):
    """Sum of random anisotropic Gaussian blobs per channel, rescaled to [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.zeros((channels, size, size))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.05, 0.95, 2)
        sy, sx = rng.uniform(0.05, 0.2, 2)
        amp = rng.uniform(0.2, 1.0, channels)
        g = np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
        img += amp[:, None, None] * g
    img -= img.min()
    return img / img.max()


def ring_dataset(n=512, size=16, seed=0, noise=0.25):
    """Two-class images of rings: class 0 small radius, class 1 large radius."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    y = np.arange(n) % 2
    rng.shuffle(y)
    x = np.empty((n, 1, size, size))
    mid = (size - 1) / 2.0
    for i in range(n):
        cy, cx = mid + rng.uniform(-1.5, 1.5, 2)
        radius = rng.uniform(2.0, 3.6) if y[i] == 0 else rng.uniform(3.4, 5.0)
        dist = np.hypot(yy - cy, xx - cx)
        img = np.exp(-0.5 * ((dist - radius) / 0.6) ** 2)
        x[i, 0] = img + noise * rng.standard_normal((size, size))
    return np.clip(x, 0.0, 1.0), y.astype(np.int64)


def synth_dataset(kind, seed=0, size=None, n=None):
    if kind == "gradient":
        s = size or 32
        return gradient_image(s, s)
    if kind == "blobs":
        return blob_image(size or 64, seed)
    if kind == "rings":
        return ring_dataset(n or 512, size or 16, seed)
    raise ValueError(f"unknown synthetic dataset {kind!r}")


# ---------------------------------------------------------------------------
# coordinate datasets for INR fitting


def coordinate_grid(h, w):
    """``(h*w) x 2`` coordinates in [-1, 1], row-major, as (row, col)."""
    rows = np.linspace(-1.0, 1.0, h)
    cols = np.linspace(-1.0, 1.0, w)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def inr_training_set(image, subsample=2):
    """Coordinates/values on every ``subsample``-th row and column of the full grid."""
    c, h, w = image.shape
    grid = coordinate_grid(h, w).reshape(h, w, 2)[::subsample, ::subsample].reshape(-1, 2)
    values = image[:, ::subsample, ::subsample].reshape(c, -1).T
    return grid, values


def inr_full_set(image):
    c, h, w = image.shape
    return coordinate_grid(h, w), image.reshape(c, -1).T

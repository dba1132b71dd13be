"""Patch-level color histogram extraction.

Images are numpy ``uint8`` arrays of shape ``(height, width, 3)`` in sRGB.
Weight masks are float arrays of shape ``(height, width)`` with values in
``[0, 1]``; a pixel's mask value is its contribution weight to the histogram
of every patch containing it.

Patches come in two 16x16 layers: layer 1 tiles the image from (0, 0) with
stride 16, layer 2 starts at (8, 8) with the same stride so that its patches
sit on the corners of layer-1 patches. Every patch yields one histogram per
color space (HS, RGB, Lab), 64 bins each.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COLORSPACES = ("hs", "rgb", "lab")

PATCH_SIZE = 16
OVERLAP_OFFSET = 8
HIST_DIM = 64

# sRGB -> XYZ (D65) and the matching reference white.
_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65_WHITE = np.array([0.95047, 1.0, 1.08883])


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"empty image: shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {img.dtype}")
    return img


def validate_mask(mask: np.ndarray, img: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != img.shape[:2]:
        raise ValueError(
            f"mask shape {mask.shape} does not match image {img.shape[:2]}"
        )
    if mask.min() < 0.0 or mask.max() > 1.0:
        raise ValueError("mask weights must lie in [0, 1]")
    return mask


def _bilinear(arr: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Bilinear resample with pixel-center alignment; returns float64."""
    src_h, src_w = arr.shape[:2]
    scale_x = src_w / target_w
    scale_y = src_h / target_h
    # Same-size axes map each output center exactly onto a source pixel.
    xs = (np.arange(target_w) + 0.5) * scale_x - 0.5
    ys = (np.arange(target_h) + 0.5) * scale_y - 0.5
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, src_w - 1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    fx = np.clip(xs - x0, 0.0, 1.0)
    fy = np.clip(ys - y0, 0.0, 1.0)

    a = arr.astype(np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    top = a[y0][:, x0] * (1 - fx)[None, :, None] + a[y0][:, x1] * fx[None, :, None]
    bot = a[y1][:, x0] * (1 - fx)[None, :, None] + a[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    if arr.ndim == 2:
        return out[:, :, 0]
    return out


def resize_image(img: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Bilinear resize of an sRGB image to ``(target_h, target_w, 3)``."""
    img = validate_image(img)
    if target_w < 1 or target_h < 1:
        raise ValueError(f"invalid resize target {target_w}x{target_h}")
    if (img.shape[1], img.shape[0]) == (target_w, target_h):
        return img.copy()
    out = _bilinear(img, target_w, target_h)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_mask(mask: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Bilinear resize of a weight mask, clamped back to [0, 1]."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ValueError(f"expected 2-D mask, got shape {mask.shape}")
    if target_w < 1 or target_h < 1:
        raise ValueError(f"invalid resize target {target_w}x{target_h}")
    if mask.shape == (target_h, target_w):
        return mask.copy()
    return np.clip(_bilinear(mask, target_w, target_h), 0.0, 1.0)


def rgb_to_hsv(pixel) -> tuple[float, float, float]:
    """Hexcone HSV of one sRGB byte triple: H in [0, 360), S and V in [0, 1]."""
    h, s, v = hsv_channels(np.asarray(pixel, dtype=np.uint8).reshape(1, 1, 3))
    return float(h[0, 0]), float(s[0, 0]), float(v[0, 0])


def hsv_channels(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rgb = np.asarray(img, dtype=np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc

    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)

    with np.errstate(invalid="ignore", divide="ignore"):
        safe = np.where(delta > 0, delta, 1.0)
        hr = ((g - b) / safe) % 6.0
        hg = (b - r) / safe + 2.0
        hb = (r - g) / safe + 4.0
    h = np.where(maxc == r, hr, np.where(maxc == g, hg, hb))
    h = np.where(delta > 0, h * 60.0, 0.0)
    h = np.where(h >= 360.0, h - 360.0, h)
    return h, s, v


def rgb_to_lab(pixel) -> tuple[float, float, float]:
    """CIELAB (D65) of one sRGB byte triple."""
    L, a, b = lab_channels(np.asarray(pixel, dtype=np.uint8).reshape(1, 1, 3))
    return float(L[0, 0]), float(a[0, 0]), float(b[0, 0])


def lab_channels(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = np.asarray(img, dtype=np.float64) / 255.0
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _SRGB_TO_XYZ.T
    t = xyz / _D65_WHITE

    eps = (6.0 / 29.0) ** 3
    f = np.where(t > eps, np.cbrt(t), t / (3.0 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    L = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    return L, a, b


@dataclass(frozen=True)
class PatchLayout:
    """Two-layer 16x16 patch grid over an image of a given size."""

    image_width: int
    image_height: int
    patch_size: int = PATCH_SIZE
    overlap_offset: int = OVERLAP_OFFSET
    include_overlap: bool = True

    def layer1_count(self) -> int:
        return (self.image_width // self.patch_size) * (
            self.image_height // self.patch_size
        )

    def layer2_count(self) -> int:
        if not self.include_overlap:
            return 0
        nx = max(0, (self.image_width - self.overlap_offset) // self.patch_size)
        ny = max(0, (self.image_height - self.overlap_offset) // self.patch_size)
        return nx * ny

    def patch_count(self) -> int:
        return self.layer1_count() + self.layer2_count()


def patch_grid(layout: PatchLayout) -> list[tuple[int, int, int, int]]:
    """Patch rectangles ``(x, y, w, h)``: layer 1 row-major, then layer 2."""
    p = layout.patch_size
    rects = []
    for y in range(0, layout.image_height - p + 1, p):
        for x in range(0, layout.image_width - p + 1, p):
            rects.append((x, y, p, p))
    if layout.include_overlap:
        off = layout.overlap_offset
        for y in range(off, layout.image_height - p + 1, p):
            for x in range(off, layout.image_width - p + 1, p):
                rects.append((x, y, p, p))
    return rects


def patch_centers(layout: PatchLayout) -> np.ndarray:
    """Patch centers normalized by image width/height, shape (P, 2)."""
    rects = patch_grid(layout)
    centers = np.array(
        [(x + w / 2.0, y + h / 2.0) for x, y, w, h in rects], dtype=np.float64
    ).reshape(-1, 2)
    centers[:, 0] /= layout.image_width
    centers[:, 1] /= layout.image_height
    return centers


def _hs_bin_map(img: np.ndarray) -> np.ndarray:
    h, s, _ = hsv_channels(img)
    hb = np.clip((h / 45.0).astype(np.int64), 0, 7)
    sb = np.clip((s * 8.0).astype(np.int64), 0, 7)
    return hb * 8 + sb


def _rgb_bin_map(img: np.ndarray) -> np.ndarray:
    q = (img >> 6).astype(np.int64)
    return q[..., 0] * 16 + q[..., 1] * 4 + q[..., 2]


def _lab_bin_map(img: np.ndarray) -> np.ndarray:
    L, a, b = lab_channels(img)
    lb = np.clip(np.floor(L / 25.0).astype(np.int64), 0, 3)
    ab = np.clip(np.floor((a + 128.0) / 64.0).astype(np.int64), 0, 3)
    bb = np.clip(np.floor((b + 128.0) / 64.0).astype(np.int64), 0, 3)
    return lb * 16 + ab * 4 + bb


_BIN_MAPS = {"hs": _hs_bin_map, "rgb": _rgb_bin_map, "lab": _lab_bin_map}


def _rect_histogram(
    bin_map: np.ndarray, mask: np.ndarray, rect: tuple[int, int, int, int]
) -> np.ndarray:
    x, y, w, h = rect
    bins = bin_map[y : y + h, x : x + w].ravel()
    weights = mask[y : y + h, x : x + w].ravel()
    hist = np.bincount(bins, weights=weights, minlength=HIST_DIM)
    total = hist.sum()
    if total > 0.0:
        hist /= total
    return hist


def patch_histogram(
    img: np.ndarray,
    mask: np.ndarray,
    rect: tuple[int, int, int, int],
    colorspace: str,
    spatial: bool = False,
) -> np.ndarray:
    """Mask-weighted 64-bin histogram of one patch.

    Each pixel adds its mask weight to exactly one bin; the result is
    L1-normalized, or all-zero when the patch carries zero total weight.
    With ``spatial`` the normalized patch center (cx, cy) is appended,
    giving a 66-D vector (zeroed as well for zero-weight patches).
    """
    img = validate_image(img)
    mask = validate_mask(mask, img)
    if colorspace not in _BIN_MAPS:
        raise ValueError(f"unknown colorspace {colorspace!r}")
    x, y, w, h = rect
    if x < 0 or y < 0 or w < 1 or h < 1 or x + w > img.shape[1] or y + h > img.shape[0]:
        raise ValueError(f"rect {rect} outside image {img.shape[1]}x{img.shape[0]}")

    hist = _rect_histogram(_BIN_MAPS[colorspace](img), mask, rect)
    if not spatial:
        return hist
    if hist.sum() == 0.0:
        return np.zeros(HIST_DIM + 2)
    cx = (x + w / 2.0) / img.shape[1]
    cy = (y + h / 2.0) / img.shape[0]
    return np.concatenate([hist, [cx, cy]])


def extract_features(
    img: np.ndarray,
    mask: np.ndarray | None = None,
    *,
    spatial: bool = False,
    include_overlap: bool = True,
) -> dict[str, np.ndarray]:
    """Per-colorspace patch feature matrices in grid order.

    Returns ``{"hs": F, "rgb": F, "lab": F}`` with F of shape (P, 64) or
    (P, 66) when ``spatial`` is set. Rows for zero-weight patches are
    all-zero.
    """
    img = validate_image(img)
    if mask is None:
        mask = np.ones(img.shape[:2], dtype=np.float64)
    mask = validate_mask(mask, img)

    layout = PatchLayout(
        image_width=img.shape[1],
        image_height=img.shape[0],
        include_overlap=include_overlap,
    )
    rects = patch_grid(layout)
    centers = patch_centers(layout)

    out: dict[str, np.ndarray] = {}
    for cs in COLORSPACES:
        bin_map = _BIN_MAPS[cs](img)
        if rects:
            rows = np.stack([_rect_histogram(bin_map, mask, r) for r in rects])
        else:
            rows = np.zeros((0, HIST_DIM))
        if spatial:
            coords = np.where(rows.sum(axis=1, keepdims=True) > 0.0, centers, 0.0)
            rows = np.hstack([rows, coords])
        out[cs] = rows
    return out

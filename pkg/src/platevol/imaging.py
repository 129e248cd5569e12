"""Classical image primitives: Canny edges, circle Hough, 5x5 median, SLIC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from scipy import ndimage as ndi
from skimage.color import rgb2lab

from .errors import ConfigError, NoCircleFound
from .model import BinaryMask, HeightMap, RasterImage

# EdgeMap is just a boolean raster
EdgeMap = BinaryMask


@dataclass(frozen=True)
class PlateCircle:
    cx: float
    cy: float
    r_hat: float
    votes: float = 0.0  # fraction of the ring's pixels that were edges

    def __post_init__(self):
        if not self.r_hat > 0:
            raise ValueError(f"circle radius must be positive, got {self.r_hat}")

    def inside(self, shape) -> np.ndarray:
        """Pixels whose centre lies within the circle."""
        yy, xx = np.indices(shape)
        return (xx - self.cx) ** 2 + (yy - self.cy) ** 2 <= self.r_hat**2

    def shifted(self, dx: float, dy: float) -> "PlateCircle":
        return PlateCircle(self.cx + dx, self.cy + dy, self.r_hat, self.votes)


# ---------------------------------------------------------------- canny


def _gray(image) -> np.ndarray:
    if isinstance(image, RasterImage):
        return image.luminance()
    a = np.asarray(image, dtype=np.float64)
    return a if a.ndim == 2 else RasterImage(a.astype(np.uint8)).luminance()


def canny(image, sigma: float = 3.0, low: float = 10.0, high: float = 50.0) -> EdgeMap:
    """Canny edges on a [0, 255] image.

    Thresholds apply to the Sobel gradient magnitude of the blurred image.
    """
    if not sigma > 0:
        raise ConfigError(f"canny sigma must be positive, got {sigma}")
    if not high >= low > 0:
        raise ConfigError(f"need high >= low > 0, got low={low}, high={high}")
    gray = _gray(image)
    smooth = ndi.gaussian_filter(gray, sigma, mode="nearest")
    gx = ndi.sobel(smooth, axis=1, mode="nearest")
    gy = ndi.sobel(smooth, axis=0, mode="nearest")
    # quantised so that NMS ties do not depend on float round-off
    mag = np.round(np.hypot(gx, gy), 6)

    # gradient direction binned to 0/45/90/135 degrees
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}

    h, w = mag.shape
    padded = np.pad(mag, 1, mode="constant")
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in offsets.items():
        fwd = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        bwd = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        sel = sector == s
        keep |= sel & (mag >= bwd) & (mag > fwd)
    nms = np.where(keep, mag, 0.0)

    strong = nms >= high
    weak = nms >= low
    labels, n = ndi.label(weak, structure=np.ones((3, 3), bool))
    if n == 0:
        return EdgeMap(np.zeros_like(weak))
    has_strong = np.zeros(n + 1, bool)
    has_strong[np.unique(labels[strong])] = True
    has_strong[0] = False
    return EdgeMap(has_strong[labels])


# ---------------------------------------------------------------- hough


def ring_offsets(r: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer offsets whose distance from the origin rounds to ``r``."""
    k = np.arange(-r - 1, r + 2)
    dy, dx = np.meshgrid(k, k, indexing="ij")
    d = np.hypot(dx, dy)
    sel = (d >= r - 0.5) & (d < r + 0.5)
    return dy[sel], dx[sel]


def hough_accumulator(edges, radii) -> np.ndarray:
    """Vote fractions, shape (len(radii), H, W).

    Entry [k, y, x] is the fraction of the ring of radius ``radii[k]``
    centred at (x, y) that falls on edge pixels.
    """
    e = np.asarray(edges.data if isinstance(edges, BinaryMask) else edges, dtype=np.float32)
    h, w = e.shape
    rmax = int(max(radii))
    # zeros after the image absorb the wrap-around of offsets up to rmax either way
    fshape = [sfft.next_fast_len(s + rmax + 1, real=True) for s in (h, w)]
    E = sfft.rfft2(e, fshape)
    acc = np.empty((len(radii), h, w))
    for k, r in enumerate(radii):
        dy, dx = ring_offsets(int(r))
        kern = np.zeros(fshape, np.float32)
        # correlation: kernel is the ring mirrored, wrapped to the origin
        kern[(-dy) % fshape[0], (-dx) % fshape[1]] = 1.0
        votes = sfft.irfft2(E * sfft.rfft2(kern), fshape)
        acc[k] = np.rint(votes[:h, :w]).astype(np.float64) / len(dy)
    return acc


def hough_circle(
    edges,
    r_min: int,
    r_max: int,
    min_vote_fraction: float = 0.25,
    fit_margin: float = 2.0,
) -> PlateCircle:
    """Best-supported circle with radius in [r_min, r_max].

    Candidates whose circle would extend more than ``fit_margin`` pixels
    outside the image are not considered.
    """
    r_min, r_max = int(round(r_min)), int(round(r_max))
    if r_min < 1 or r_min > r_max:
        raise ConfigError(f"bad radius range [{r_min}, {r_max}]")
    e = edges.data if isinstance(edges, BinaryMask) else np.asarray(edges, bool)
    if not e.any():
        raise NoCircleFound("no edge pixels")
    radii = np.arange(r_min, r_max + 1)
    acc = hough_accumulator(e, radii)
    h, w = e.shape
    yy, xx = np.indices((h, w))
    for k, r in enumerate(radii):
        fits = (xx - r >= -fit_margin) & (xx + r <= w - 1 + fit_margin)
        fits &= (yy - r >= -fit_margin) & (yy + r <= h - 1 + fit_margin)
        acc[k][~fits] = -1.0
    # argmax returns the first maximum: smallest radius, then lowest (cy, cx)
    k, py, px = np.unravel_index(int(np.argmax(acc)), acc.shape)
    best = acc[k, py, px]
    if best < min_vote_fraction:
        raise NoCircleFound(f"peak vote fraction {best:.3f} below {min_vote_fraction}")

    win = acc[k, max(py - 1, 0) : py + 2, max(px - 1, 0) : px + 2].clip(min=0)
    wy, wx = np.indices(win.shape)
    total = win.sum()
    cy = max(py - 1, 0) + (wy * win).sum() / total
    cx = max(px - 1, 0) + (wx * win).sum() / total

    r_hat = float(radii[k])
    if 0 < k < len(radii) - 1:
        a, b, c = acc[k - 1, py, px], best, acc[k + 1, py, px]
        denom = a - 2 * b + c
        if a >= 0 and c >= 0 and denom < 0:
            r_hat += float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))
    return PlateCircle(float(cx), float(cy), r_hat, float(best))


# ---------------------------------------------------------------- median


def median_filter_5x5(hm: HeightMap) -> HeightMap:
    h, w = hm.shape
    if h < 5 or w < 5:
        raise ValueError(f"height map {h}x{w} is smaller than the 5x5 kernel")
    return HeightMap(ndi.median_filter(hm.data, size=5, mode="nearest"), hm.valid)


# ---------------------------------------------------------------- SLIC


@dataclass(frozen=True)
class SlicConfig:
    n_segments: int = 250
    compactness: float = 20.0
    smoothing_sigma: float = 2.0
    max_iter: int = 10
    min_shift_px: float = 1.0

    def __post_init__(self):
        if self.n_segments < 1:
            raise ConfigError("n_segments must be >= 1")
        if not self.compactness > 0:
            raise ConfigError("compactness must be positive")


@dataclass(frozen=True)
class SuperpixelMap:
    labels: np.ndarray
    n_segments: int

    def __post_init__(self):
        lab = np.ascontiguousarray(self.labels, dtype=np.int32)
        lab.flags.writeable = False
        object.__setattr__(self, "labels", lab)

    @property
    def shape(self):
        return self.labels.shape

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def _lab_image(image: RasterImage, sigma: float) -> np.ndarray:
    rgb = image.as_rgb().astype(np.float64) / 255.0
    if sigma > 0:
        rgb = ndi.gaussian_filter(rgb, sigma=(sigma, sigma, 0), mode="nearest")
    return rgb2lab(rgb)


def _grid_centres(h: int, w: int, n: int) -> tuple[np.ndarray, float]:
    step = np.sqrt(h * w / n)
    ny = max(1, int(round(h / step)))
    nx = max(1, int(round(w / step)))
    ys = (np.arange(ny) + 0.5) * h / ny - 0.5
    xs = (np.arange(nx) + 0.5) * w / nx - 0.5
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    return np.column_stack([cy.ravel(), cx.ravel()]), step


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep each label's largest 4-connected piece; merge the rest into neighbours."""
    four = ndi.generate_binary_structure(2, 1)
    out = labels.copy()
    orphan = np.zeros(labels.shape, bool)
    for lab, sl in enumerate(ndi.find_objects(labels + 1)):
        if sl is None:
            continue
        region = labels[sl] == lab
        comp, n = ndi.label(region, structure=four)
        if n > 1:
            sizes = np.bincount(comp.ravel())[1:]
            largest = 1 + int(np.argmax(sizes))
            orphan[sl] |= region & (comp != largest)
    out[orphan] = -1

    h, w = labels.shape
    while orphan.any():
        comp, n = ndi.label(orphan, structure=four)
        progressed = False
        for c, sl in enumerate(ndi.find_objects(comp), start=1):
            y0, y1 = max(sl[0].start - 1, 0), min(sl[0].stop + 1, h)
            x0, x1 = max(sl[1].start - 1, 0), min(sl[1].stop + 1, w)
            piece = comp[y0:y1, x0:x1] == c
            ring = ndi.binary_dilation(piece, structure=four) & ~piece
            neigh = out[y0:y1, x0:x1][ring]
            neigh = neigh[neigh >= 0]
            if neigh.size == 0:
                continue
            # most shared boundary wins; ties go to the lower label
            target = int(np.argmax(np.bincount(neigh)))
            out[y0:y1, x0:x1][piece] = target
            orphan[y0:y1, x0:x1][piece] = False
            progressed = True
        if not progressed:  # pragma: no cover - every orphan touches a kept pixel eventually
            raise RuntimeError("connectivity enforcement stalled")

    _, relabelled = np.unique(out, return_inverse=True)
    return relabelled.reshape(labels.shape)


def slic(image: RasterImage, cfg: SlicConfig = SlicConfig()) -> SuperpixelMap:
    """Simple linear iterative clustering in CIELAB + xy."""
    h, w = image.shape
    if cfg.n_segments > h * w:
        raise ConfigError(f"n_segments {cfg.n_segments} exceeds pixel count {h * w}")
    lab = _lab_image(image, cfg.smoothing_sigma)
    centres_yx, step = _grid_centres(h, w, cfg.n_segments)
    k = len(centres_yx)
    iy = np.clip(np.rint(centres_yx[:, 0]).astype(int), 0, h - 1)
    ix = np.clip(np.rint(centres_yx[:, 1]).astype(int), 0, w - 1)
    centres = np.column_stack([centres_yx, lab[iy, ix]])

    spatial_w = (cfg.compactness / step) ** 2
    labels = np.zeros((h, w), dtype=np.int64)
    win = int(np.ceil(step))
    yy, xx = np.indices((h, w), dtype=np.float64)

    for _ in range(cfg.max_iter):
        dist = np.full((h, w), np.inf)
        for j in range(k):
            cy, cx = centres[j, 0], centres[j, 1]
            y0, y1 = max(int(cy) - win, 0), min(int(cy) + win + 2, h)
            x0, x1 = max(int(cx) - win, 0), min(int(cx) + win + 2, w)
            dc = ((lab[y0:y1, x0:x1] - centres[j, 2:]) ** 2).sum(axis=2)
            ds = (yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2
            d = dc + spatial_w * ds
            sub = dist[y0:y1, x0:x1]
            better = d < sub
            sub[better] = d[better]
            labels[y0:y1, x0:x1][better] = j

        flat = labels.ravel()
        counts = np.bincount(flat, minlength=k).astype(np.float64)
        new = centres.copy()
        occupied = counts > 0
        feats = [yy.ravel(), xx.ravel(), *(lab[..., c].ravel() for c in range(3))]
        for f, values in enumerate(feats):
            sums = np.bincount(flat, weights=values, minlength=k)
            new[occupied, f] = sums[occupied] / counts[occupied]
        shift = np.hypot(new[:, 0] - centres[:, 0], new[:, 1] - centres[:, 1]).max()
        centres = new
        if shift < cfg.min_shift_px:
            break

    final = _enforce_connectivity(labels)
    return SuperpixelMap(final, int(final.max()) + 1)


def superpixel_boundaries(sp: SuperpixelMap) -> np.ndarray:
    lab = sp.labels
    b = np.zeros(lab.shape, bool)
    b[:, 1:] |= lab[:, 1:] != lab[:, :-1]
    b[1:, :] |= lab[1:, :] != lab[:-1, :]
    return b

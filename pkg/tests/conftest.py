import numpy as np
import pytest

from platevol import synth
from platevol.model import BinaryMask, RasterImage


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def disk_image(shape, cx, cy, r, inside=230, outside=40):
    """Anti-aliased bright disk on a dark background (gray)."""
    h, w = shape
    ss = 4
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    ys = (np.arange(h)[:, None] + sub).ravel()
    xs = (np.arange(w)[:, None] + sub).ravel()
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    cover = (np.hypot(xx - cx, yy - cy) <= r).reshape(h, ss, w, ss).mean(axis=(1, 3))
    return RasterImage(np.rint(outside + (inside - outside) * cover).astype(np.uint8))


def ring_mask(shape, cx, cy, r):
    yy, xx = np.indices(shape)
    d = np.hypot(xx - cx, yy - cy)
    return BinaryMask((d >= r - 0.5) & (d < r + 0.5))


@pytest.fixture(scope="session")
def cylinder_scene():
    return synth.render(synth.default_spec("cylinder"))


@pytest.fixture(scope="session")
def mixed_sequence():
    spec = synth.default_spec("mixed", noise_sigma_mm=1.0, tilt=(0.02, -0.01), calib_offset_px=(3.0, -2.0), seed=7)
    return synth.render_portion_sequence(spec, (0, 0.25, 0.5, 0.75, 1.0))

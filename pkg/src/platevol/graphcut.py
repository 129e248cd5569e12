"""Seeded binary graph cut (Boykov-Jolly energy, BFS augmenting-path solver)."""

from __future__ import annotations

from collections import deque
from dataclasses import InitVar, dataclass
from typing import Optional

import numpy as np

from .errors import DataError
from .imaging import PlateCircle
from .model import BinaryMask, RasterImage, check_same_shape
from .refine import clip_to_plate

HIST_BINS = 16  # per RGB channel


class SeedError(DataError, ValueError):
    pass


@dataclass(frozen=True)
class ScribbleSet:
    fg: BinaryMask
    bg: BinaryMask
    validate: InitVar[bool] = True

    def __post_init__(self, validate):
        check_same_shape(self.fg, self.bg)
        if validate:
            for problem in self.problems():
                raise SeedError(problem)

    def problems(self) -> list[str]:
        out = []
        if not self.fg.data.any():
            out.append("foreground scribble is empty")
        if not self.bg.data.any():
            out.append("background scribble is empty")
        overlap = int((self.fg.data & self.bg.data).sum())
        if overlap:
            out.append(f"foreground and background scribbles overlap on {overlap} pixels")
        return out


@dataclass(frozen=True)
class CutGraph:
    """4-connected grid graph with terminal links.

    ``right[y, x]`` joins (y, x)-(y, x+1); ``down[y, x]`` joins (y, x)-(y+1, x).
    N-links are undirected. ``source``/``sink`` are the t-link capacities.
    """

    right: np.ndarray
    down: np.ndarray
    source: np.ndarray
    sink: np.ndarray
    fg_seeds: Optional[np.ndarray] = None
    bg_seeds: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.source.shape


def make_cut_graph(right, down, source, sink, fg_seeds=None, bg_seeds=None) -> CutGraph:
    """Assemble a CutGraph, giving seeded pixels hard terminal links.

    A seed's own terminal link gets capacity K = 1 + (largest n-link sum
    at any pixel), which no minimum cut can afford to sever.
    """
    right = np.asarray(right, dtype=np.float64)
    down = np.asarray(down, dtype=np.float64)
    source = np.array(source, dtype=np.float64)
    sink = np.array(sink, dtype=np.float64)
    h, w = source.shape
    if right.shape != (h, w - 1) or down.shape != (h - 1, w) or sink.shape != (h, w):
        raise ValueError("inconsistent capacity array shapes")
    for name, a in (("right", right), ("down", down), ("source", source), ("sink", sink)):
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ValueError(f"{name} capacities must be finite and non-negative")
    fg = np.zeros((h, w), bool) if fg_seeds is None else np.asarray(fg_seeds, bool)
    bg = np.zeros((h, w), bool) if bg_seeds is None else np.asarray(bg_seeds, bool)
    if np.any(fg & bg):
        raise SeedError("a pixel cannot be both a foreground and a background seed")
    nsum = np.zeros((h, w))
    nsum[:, :-1] += right
    nsum[:, 1:] += right
    nsum[:-1, :] += down
    nsum[1:, :] += down
    k = 1.0 + float(nsum.max(initial=0.0))
    source[fg], sink[fg] = k, 0.0
    source[bg], sink[bg] = 0.0, k
    return CutGraph(right, down, source, sink, fg, bg)


def _seed_masks(seeds: ScribbleSet):
    return seeds.fg.data, seeds.bg.data


def _colour_bins(rgb: np.ndarray) -> np.ndarray:
    q = (rgb.astype(np.int64) * HIST_BINS) // 256
    return (q[..., 0] * HIST_BINS + q[..., 1]) * HIST_BINS + q[..., 2]


def _neg_log_hist(bins: np.ndarray, sel: np.ndarray) -> np.ndarray:
    nbins = HIST_BINS**3
    counts = np.bincount(bins[sel], minlength=nbins).astype(np.float64)
    prob = (counts + 1.0) / (counts.sum() + nbins)  # Laplace smoothing
    return -np.log(prob)[bins]


def build_graph(image: RasterImage, seeds: ScribbleSet, lam: float = 1.0, sigma: float = 30.0) -> CutGraph:
    fg, bg = _seed_masks(seeds)
    if not fg.any() or not bg.any():
        raise SeedError("graph cut needs non-empty foreground and background seeds")
    check_same_shape(image, seeds.fg)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    rgb = image.as_rgb().astype(np.float64)
    two_s2 = 2.0 * sigma * sigma
    right = np.exp(-((rgb[:, 1:] - rgb[:, :-1]) ** 2).sum(axis=2) / two_s2)
    down = np.exp(-((rgb[1:, :] - rgb[:-1, :]) ** 2).sum(axis=2) / two_s2)
    bins = _colour_bins(image.as_rgb())
    cost_fg = _neg_log_hist(bins, fg)  # cost of calling the pixel food
    cost_bg = _neg_log_hist(bins, bg)
    # cutting the source link labels a pixel background, so it carries that cost
    return make_cut_graph(right, down, lam * cost_bg, lam * cost_fg, fg, bg)


class _Residual:
    """Residual network in flat arrays; arc ``a`` and ``a ^ 1`` are a pair."""

    def __init__(self, n_nodes: int):
        self.adj = [[] for _ in range(n_nodes)]
        self.to: list[int] = []
        self.cap: list[float] = []

    def add(self, u: int, v: int, c_uv: float, c_vu: float) -> None:
        a = len(self.to)
        self.to += [v, u]
        self.cap += [c_uv, c_vu]
        self.adj[u].append(a)
        self.adj[v].append(a + 1)


def _build_residual(g: CutGraph):
    h, w = g.shape
    n = h * w
    s, t = n, n + 1
    source = g.source.ravel()
    sink = g.sink.ravel()
    # route the shared part of each pixel's two t-links straight through
    direct = np.minimum(source, sink)
    base_flow = float(np.sort(direct).sum())
    src = source - direct
    snk = sink - direct
    net = _Residual(n + 2)
    idx = np.arange(n).reshape(h, w)
    for p in np.flatnonzero(src > 0):
        net.add(s, int(p), float(src[p]), 0.0)
    for p in np.flatnonzero(snk > 0):
        net.add(int(p), t, float(snk[p]), 0.0)
    for (ys, xs), (yd, xd), caps in (
        ((slice(None), slice(0, w - 1)), (slice(None), slice(1, w)), g.right),
        ((slice(0, h - 1), slice(None)), (slice(1, h), slice(None)), g.down),
    ):
        for u, v, c in zip(idx[ys, xs].ravel(), idx[yd, xd].ravel(), caps.ravel()):
            if c > 0:
                net.add(int(u), int(v), float(c), float(c))
    return net, s, t, base_flow


def max_flow(g: CutGraph) -> tuple[float, BinaryMask]:
    """Minimum s-t cut by Dinic's algorithm (shortest augmenting paths in BFS layers).

    Returns the cut value and the source side as a mask. The source side is
    the set reachable from the source in the final residual network, i.e.
    the smallest minimum-cut source set.
    """
    net, s, t, flow = _build_residual(g)
    adj, to, cap = net.adj, net.to, net.cap
    n_nodes = len(adj)
    scale = max(max(cap, default=0.0), 1.0)
    eps = 1e-12 * scale

    while True:
        level = [-1] * n_nodes
        level[s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for a in adj[u]:
                v = to[a]
                if level[v] < 0 and cap[a] > eps:
                    level[v] = level[u] + 1
                    q.append(v)
        if level[t] < 0:
            break
        it = [0] * n_nodes
        stack: list[int] = []
        u = s
        while True:
            if u == t:
                f = min(cap[a] for a in stack)
                cut_at = None
                for i, a in enumerate(stack):
                    cap[a] -= f
                    cap[a ^ 1] += f
                    if cut_at is None and cap[a] <= eps:
                        cut_at = i
                flow += f
                del stack[cut_at:]
                u = to[stack[-1]] if stack else s
                continue
            arcs = adj[u]
            i = it[u]
            lu = level[u] + 1
            while i < len(arcs):
                a = arcs[i]
                if cap[a] > eps and level[to[a]] == lu:
                    break
                i += 1
            it[u] = i
            if i < len(arcs):
                stack.append(arcs[i])
                u = to[arcs[i]]
                continue
            if u == s:
                break
            level[u] = -1  # dead end for the rest of this phase
            a = stack.pop()
            u = to[a ^ 1]
            it[u] += 1

    h, w = g.shape
    seen = np.zeros(n_nodes, bool)
    seen[s] = True
    q = deque([s])
    while q:
        u = q.popleft()
        for a in adj[u]:
            v = to[a]
            if not seen[v] and cap[a] > eps:
                seen[v] = True
                q.append(v)
    return flow, BinaryMask(seen[: h * w].reshape(h, w))


def cut_cost(g: CutGraph, source_side: np.ndarray) -> float:
    """Capacity of the cut that puts ``source_side`` with the source."""
    m = np.asarray(source_side, bool)
    cost = g.sink[m].sum() + g.source[~m].sum()
    cost += g.right[m[:, :-1] != m[:, 1:]].sum()
    cost += g.down[m[:-1, :] != m[1:, :]].sum()
    return float(cost)


def graphcut_segment(
    image: RasterImage,
    seeds: ScribbleSet,
    circle: Optional[PlateCircle] = None,
    lam: float = 1.0,
    sigma: float = 30.0,
) -> BinaryMask:
    g = build_graph(image, seeds, lam, sigma)
    _, fg = max_flow(g)
    return clip_to_plate(fg, circle) if circle is not None else fg

"""Connected-component analysis and the scribble-shrink procedure.

Shrinking simulates sparser annotation for sensitivity studies: per class a
target number of pixels is removed by consuming whole components in a
deterministic order and trimming the final component from one end so the
survivors stay connected.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .grids import ClassConfig

_NEIGHBORS8 = tuple(
    (dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)
)


@dataclass(frozen=True)
class Component:
    """One 8-connected region of a single scribble class.

    `pixels` are ordered along the stroke when the region is a simple path,
    otherwise in breadth-first spanning-tree order from the anchor.
    """

    class_code: int
    pixels: tuple

    @property
    def anchor(self):
        return min(self.pixels)

    def __len__(self):
        return len(self.pixels)


def _adjacency(pixel_set):
    adj = {}
    for (r, c) in pixel_set:
        nbrs = [
            (r + dr, c + dc) for dr, dc in _NEIGHBORS8 if (r + dr, c + dc) in pixel_set
        ]
        adj[(r, c)] = nbrs
    return adj


def _path_order(pixel_set, adj):
    """Pixels from one stroke end to the other, or None if not a simple path."""
    if len(pixel_set) == 1:
        return list(pixel_set)
    ends = [p for p, nbrs in adj.items() if len(nbrs) == 1]
    if len(ends) != 2 or any(len(n) > 2 for n in adj.values()):
        return None
    order = [min(ends)]
    prev = None
    while True:
        nxt = [p for p in adj[order[-1]] if p != prev]
        if not nxt:
            break
        prev = order[-1]
        order.append(nxt[0])
    return order if len(order) == len(pixel_set) else None


def connected_components(scr: np.ndarray, class_code: int) -> list[Component]:
    """8-connected components of one class, ordered by raster anchor."""
    scr = np.asarray(scr)
    if scr.ndim != 2:
        raise DataError(f"expected a 2D annotation, got shape {scr.shape}")
    rows, cols = np.nonzero(scr == class_code)
    remaining = set(zip(rows.tolist(), cols.tolist()))
    comps = []
    while remaining:
        seed = min(remaining)
        seen = {seed}
        queue = deque([seed])
        order = []
        while queue:
            p = queue.popleft()
            order.append(p)
            r, c = p
            for dr, dc in _NEIGHBORS8:
                q = (r + dr, c + dc)
                if q in remaining and q not in seen:
                    seen.add(q)
                    queue.append(q)
        remaining -= seen
        adj = _adjacency(seen)
        path = _path_order(seen, adj)
        comps.append(Component(class_code, tuple(path if path else order)))
    comps.sort(key=lambda comp: comp.anchor)
    return comps


def _trim_order(comp: Component, width: int) -> list:
    """Pixels of `comp` in removal order; any prefix leaves the remainder
    8-connected."""
    pixel_set = set(comp.pixels)
    adj = _adjacency(pixel_set)
    path = _path_order(pixel_set, adj)
    raster = lambda p: p[0] * width + p[1]
    if path is not None:
        # Trim from the stroke end with the larger raster index inward.
        if raster(path[0]) > raster(path[-1]):
            path = path[::-1]
        return path[::-1]
    # General case: peel leaves of a BFS spanning tree, largest raster index
    # first.  Removing a leaf never disconnects the remaining tree.
    root = comp.anchor
    parent = {root: None}
    children = {p: 0 for p in pixel_set}
    queue = deque([root])
    while queue:
        p = queue.popleft()
        for q in sorted(adj[p]):
            if q not in parent:
                parent[q] = p
                children[p] += 1
                queue.append(q)
    order = []
    leaves = {p for p, n in children.items() if n == 0}
    while leaves:
        leaf = max(leaves, key=raster)
        leaves.discard(leaf)
        order.append(leaf)
        up = parent[leaf]
        if up is not None:
            children[up] -= 1
            if children[up] == 0:
                leaves.add(up)
    return order


def shrink_scribble(scr: np.ndarray, ratio: float,
                    classes: ClassConfig | None = None) -> np.ndarray:
    """Remove round(ratio * count) pixels per foreground class.

    Components are consumed whole in anchor order while the running total
    stays at or below the target; the final component is trimmed from one
    end so its survivors remain one 8-connected set.  Removed pixels become
    UNLABELED.  Background and GC strokes are left untouched.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"shrink ratio must be in [0, 1], got {ratio}")
    if classes is None:
        classes = ClassConfig()
    scr = np.asarray(scr)
    out = scr.copy()
    if ratio == 0.0:
        return out
    width = scr.shape[1]
    for code in range(1, classes.num_foreground + 1):
        comps = connected_components(scr, code)
        total = sum(len(c) for c in comps)
        target = round(ratio * total)
        removed = 0
        for comp in comps:
            if removed >= target:
                break
            if removed + len(comp) <= target:
                for (r, c) in comp.pixels:
                    out[r, c] = classes.unlabeled_code
                removed += len(comp)
            else:
                need = target - removed
                for (r, c) in _trim_order(comp, width)[:need]:
                    out[r, c] = classes.unlabeled_code
                removed = target
    return out


def scribble_stats(scr: np.ndarray, classes: ClassConfig | None = None) -> dict:
    """Per-class pixel and component counts, keyed by class code."""
    if classes is None:
        classes = ClassConfig()
    scr = np.asarray(scr)
    codes = [classes.bg_code] + list(range(1, classes.num_foreground + 1))
    codes.append(classes.gc_code)
    stats = {}
    for code in codes:
        comps = connected_components(scr, code)
        stats[code] = {
            "pixels": int((scr == code).sum()),
            "components": len(comps),
        }
    return stats

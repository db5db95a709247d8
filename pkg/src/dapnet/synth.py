"""Deterministic labelled ALS-like scenes for tests and smoke runs.

Each class is a simple solid with its own intensity and return-count
signature. The geometry is crude on purpose: labels are exact by
construction, which is all the training and pipeline checks need.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pipeline import PointCloud

CLASSES = ("ground", "roof", "facade", "tree", "car", "powerline")

# Layout knobs, in metres unless stated otherwise.
ROOF_SIZE = (6.0, 10.0)  # side length range of a building footprint
ROOF_HEIGHT = (4.0, 9.0)
BUILDING_FRACTION = 0.25  # share of the area covered by roofs
TREE_RADIUS = (1.5, 3.0)
TREE_HEIGHT = (5.0, 12.0)
TREES_PER_100M2 = 0.6
TRUNK_POINTS_PER_M = 2.0
CAR_SIZE = (4.0, 1.8, 1.5)
CARS_PER_100M2 = 0.4
POWERLINE_HEIGHT = 12.0
POWERLINE_SAG = 1.5
POWERLINE_POINTS_PER_M = 2.0

# (intensity mean, intensity sd, max returns)
SIGNATURE = {
    "ground": (40.0, 4.0, 1),
    "roof": (65.0, 5.0, 1),
    "facade": (30.0, 4.0, 2),
    "tree": (20.0, 6.0, 4),
    "car": (85.0, 6.0, 1),
    "powerline": (10.0, 3.0, 3),
}


@dataclass(frozen=True)
class SceneSpec:
    extent: float = 30.0
    classes: tuple = ("ground", "roof", "tree", "car")
    density: float = 3.0  # points per square metre of sampled surface
    noise: float = 0.05  # sd of coordinate jitter, clipped at 3 sd
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.extent <= 0 or self.density <= 0 or self.noise < 0:
            raise ValueError("extent and density must be positive, noise non-negative")
        if not self.classes:
            raise ValueError("scene needs at least one class")
        unknown = set(self.classes) - set(CLASSES)
        if unknown:
            raise ValueError(f"unknown classes {sorted(unknown)}; choose from {CLASSES}")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("duplicate class names")


def _place_boxes(rng, extent, sizes, count, taken, gap=1.0):
    """Drop axis-aligned rectangles that overlap neither each other nor ``taken``."""
    placed = []
    for _ in range(count * 20):
        if len(placed) == count:
            break
        w, d = sizes()
        if w + 2 * gap > extent or d + 2 * gap > extent:
            continue
        x0 = rng.uniform(gap, extent - w - gap)
        y0 = rng.uniform(gap, extent - d - gap)
        box = (x0, y0, x0 + w, y0 + d)
        if all(box[2] + gap <= o[0] or o[2] + gap <= box[0] or box[3] + gap <= o[1]
               or o[3] + gap <= box[1] for o in placed + taken):
            placed.append(box)
    return placed


def _inside(xy, boxes):
    hit = np.zeros(len(xy), dtype=bool)
    for x0, y0, x1, y1 in boxes:
        hit |= (xy[:, 0] >= x0) & (xy[:, 0] < x1) & (xy[:, 1] >= y0) & (xy[:, 1] < y1)
    return hit


def roof_boxes(spec: SceneSpec) -> list:
    """Building footprints for ``spec`` (empty without a roof class)."""
    rng = np.random.default_rng([spec.seed, 1])
    if "roof" not in spec.classes:
        return []
    target = BUILDING_FRACTION * spec.extent ** 2
    mean_area = np.mean(ROOF_SIZE) ** 2
    count = max(1, int(round(target / mean_area)))
    return _place_boxes(rng, spec.extent, lambda: rng.uniform(*ROOF_SIZE, size=2), count, [])


def generate(spec: SceneSpec) -> PointCloud:
    """Sample a labelled scene; labels index into ``spec.classes``."""
    rng = np.random.default_rng(spec.seed)
    e, rho = spec.extent, spec.density
    label_of = {c: i for i, c in enumerate(spec.classes)}
    parts = []  # (xyz, class name)

    roofs = roof_boxes(spec)
    heights = np.random.default_rng([spec.seed, 2]).uniform(*ROOF_HEIGHT, size=len(roofs))
    cars = []
    if "car" in spec.classes:
        crng = np.random.default_rng([spec.seed, 3])
        n_cars = max(1, int(round(CARS_PER_100M2 * e * e / 100)))
        cars = _place_boxes(crng, e, lambda: np.array(CAR_SIZE[:2])[crng.permutation(2)], n_cars, roofs)

    # one horizontal sweep over the area: roofs occlude the ground
    n_top = rng.poisson(rho * e * e)
    xy = rng.uniform(0, e, size=(n_top, 2))
    on_roof = _inside(xy, roofs)
    on_car = _inside(xy, cars) & ~on_roof
    ground_xy = xy[~on_roof & ~on_car]
    if "ground" in spec.classes:
        parts.append((np.column_stack([ground_xy, np.zeros(len(ground_xy))]), "ground"))
    if roofs:
        z = np.zeros(on_roof.sum())
        rxy = xy[on_roof]
        for (x0, y0, x1, y1), h in zip(roofs, heights):
            z[_inside(rxy, [(x0, y0, x1, y1)])] = h
        parts.append((np.column_stack([rxy, z]), "roof"))
    if cars:
        parts.append((np.column_stack([xy[on_car], np.full(on_car.sum(), CAR_SIZE[2])]), "car"))

    if "facade" in spec.classes:
        for (x0, y0, x1, y1), h in zip(roofs, heights):
            for (ax, ay, bx, by) in ((x0, y0, x1, y0), (x1, y0, x1, y1), (x1, y1, x0, y1), (x0, y1, x0, y0)):
                length = np.hypot(bx - ax, by - ay)
                n = rng.poisson(rho * length * h * 0.5)
                t, z = rng.uniform(0, 1, n), rng.uniform(0.2, h - 0.2, n)
                parts.append((np.column_stack([ax + t * (bx - ax), ay + t * (by - ay), z]), "facade"))

    if "tree" in spec.classes:
        trng = np.random.default_rng([spec.seed, 4])
        n_trees = max(1, int(round(TREES_PER_100M2 * e * e / 100)))
        for _ in range(n_trees * 20):
            if n_trees == 0:
                break
            r = trng.uniform(*TREE_RADIUS)
            cx, cy = trng.uniform(r, e - r, size=2)
            if roofs and _inside(np.array([[cx, cy]]), [(a - r, b - r, c + r, d + r) for a, b, c, d in roofs])[0]:
                continue
            n_trees -= 1
            top = trng.uniform(*TREE_HEIGHT)
            half = max(1.0, (top - 2.0) / 2)
            n = rng.poisson(rho * np.pi * r * r * 1.5)
            # upper half of an ellipsoid shell over a vertical trunk
            u = rng.normal(size=(n, 3))
            u[:, 2] = np.abs(u[:, 2])
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            shell = np.column_stack([cx + r * u[:, 0], cy + r * u[:, 1], top - half + half * u[:, 2]])
            shell[:, 2] *= rng.uniform(0.85, 1.0, n)
            base = top - half
            trunk_n = rng.poisson(TRUNK_POINTS_PER_M * base)
            trunk = np.column_stack([np.full(trunk_n, cx), np.full(trunk_n, cy),
                                     rng.uniform(0.3, base, trunk_n)])
            parts.append((np.concatenate([shell, trunk]), "tree"))

    if "powerline" in spec.classes:
        n = rng.poisson(POWERLINE_POINTS_PER_M * e * 2)
        t = rng.uniform(0, 1, n)
        y = np.where(rng.uniform(size=n) < 0.5, 0.45 * e, 0.55 * e)
        z = POWERLINE_HEIGHT - 4 * POWERLINE_SAG * t * (1 - t)
        parts.append((np.column_stack([t * e, y, z]), "powerline"))

    parts = [(p, c) for p, c in parts if len(p) and c in label_of]
    if not parts:
        raise ValueError("scene came out empty; raise density or extent")
    xyz = np.concatenate([p for p, _ in parts])
    # jitter is clipped at 3 sd so every point stays within 3 sd of its surface
    xyz = xyz + np.clip(rng.normal(size=xyz.shape), -3, 3) * spec.noise
    names = [c for p, c in parts for _ in range(len(p))]
    labels = np.array([label_of[c] for c in names], dtype=np.int64)
    mean = np.array([SIGNATURE[c][0] for c in names])
    sd = np.array([SIGNATURE[c][1] for c in names])
    intensity = np.clip(np.round(rng.normal(mean, sd)), 0, None)
    maxret = np.array([SIGNATURE[c][2] for c in names])
    num = rng.integers(1, maxret + 1)
    ret = rng.integers(1, num + 1)
    return PointCloud(xyz, intensity, ret, num, labels)


def expected_counts(spec: SceneSpec) -> dict:
    """Expected point counts of the horizontal classes (ground, roof, car)."""
    e, rho = spec.extent, spec.density
    roofs = roof_boxes(spec)
    roof_area = sum((x1 - x0) * (y1 - y0) for x0, y0, x1, y1 in roofs)
    out = {"roof": rho * roof_area} if roofs else {}
    if "ground" in spec.classes:
        out["ground"] = rho * e * e - rho * roof_area
    return out

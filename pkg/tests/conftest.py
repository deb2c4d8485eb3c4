# conftest.py — shared fixtures and brute-force oracles

from __future__ import annotations

import os
import sys
import xml.etree.ElementTree as ET

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import numpy as np
import pytest

import data
import sae


# ---------- oracles ----------
def jacobi_singular_values(a: np.ndarray, sweeps: int = 60) -> np.ndarray:
    """One-sided Jacobi: orthogonalize column pairs until all are mutually orthogonal."""
    u = np.array(a, dtype=np.float64, copy=True)
    if u.shape[1] > u.shape[0]:
        u = u.T.copy()
    n = u.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                gamma = u[:, p] @ u[:, q]
                if gamma == 0.0:
                    continue
                off = max(off, abs(gamma) / np.sqrt(alpha * beta))
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                up, uq = u[:, p].copy(), u[:, q].copy()
                u[:, p] = c * up - s * uq
                u[:, q] = s * up + c * uq
        if off < 1e-15:
            break
    return np.sort(np.linalg.norm(u, axis=0))[::-1]


def layered_fronts(points) -> list:
    """O(n^2) per layer: repeatedly strip everything nobody remaining dominates."""
    pts = [tuple(p) for p in points]
    remaining = set(range(len(pts)))
    fronts = []

    def dom(a, b):
        return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))

    while remaining:
        layer = sorted(i for i in remaining if not any(dom(pts[j], pts[i]) for j in remaining if j != i))
        fronts.append(tuple(layer))
        remaining -= set(layer)
    return fronts


def svg_point_count(path) -> int:
    """Markers drawn inside the `points` group: <use> references, or plain <path> when unoptimized."""
    root = ET.parse(path).getroot()
    group = next(el for el in root.iter() if el.get("id") == "points")
    tags = [el.tag.rsplit("}", 1)[-1] for el in group.iter() if el is not group]
    uses = tags.count("use")
    return uses if uses else tags.count("path")


# ---------- fixtures ----------
def randomize_biases(model: sae.SaeModel, rng: np.random.Generator, scale: float) -> sae.SaeModel:
    for name, p in model.named_matrices():
        if name.endswith("bias"):
            p[:] = rng.normal(0.0, scale, size=p.shape)
    return model


@pytest.fixture
def small_model() -> sae.SaeModel:
    """Untrained 6-(5,4,3) model with non-trivial biases."""
    model = sae.init_model(sae.SaeConfig(input_dim=6, encoder_widths=(5, 4, 3), seed=3))
    return randomize_biases(model, np.random.default_rng(11), 0.1)


@pytest.fixture(scope="session")
def fixture_splits() -> data.Splits:
    d = data.generate_synthetic(dims=8, n=1500, anomaly_rate=0.1, seed=7)
    return data.prepare_splits(d, train_frac=0.8, calib_frac=0.25, seed=7)


@pytest.fixture(scope="session")
def trained_model(fixture_splits) -> sae.SaeModel:
    """Every exit sits behind a bottleneck narrower than the 8 input features."""
    cfg = sae.SaeConfig(input_dim=8, encoder_widths=(6, 4, 3), epochs=50, batch_size=32,
                        learning_rate=0.01, momentum=0.9, seed=5)
    model = sae.init_model(cfg)
    sae.train(model, data.normals(fixture_splits.train))
    return model

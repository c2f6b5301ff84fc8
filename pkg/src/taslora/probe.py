"""Diagnostics: feature and expert similarity, routing heatmaps, accuracy tables."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import TasLoraModel, accuracy
from .molekit import ExpertBank
from .routerkit import RouterState, route
from .spacekit import SearchSpace, SubnetConfig, sample_subnet
from .supernet import SupernetWeights, forward, slice_for, classifier_view


@dataclass
class SimilarityMatrix:
    labels: list[str]
    values: np.ndarray

    def mean_off_diagonal(self) -> float:
        n = len(self.labels)
        mask = ~np.eye(n, dtype=bool)
        return float(self.values[mask].mean())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([""] + self.labels)
            for label, row in zip(self.labels, self.values):
                w.writerow([label] + [f"{x:.6f}" for x in row])


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, 1e-12)


def paired_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over samples of cos(a_i, b_i), truncating to the shared leading coordinates."""
    d = min(a.shape[-1], b.shape[-1])
    sims = (_unit_rows(a[..., :d]) * _unit_rows(b[..., :d])).sum(-1)
    return float(np.clip(sims, -1.0, 1.0).mean())


def similarity_matrix(labels: Sequence[str], features: Sequence[np.ndarray]) -> SimilarityMatrix:
    n = len(features)
    vals = np.eye(n)
    for i, j in itertools.combinations(range(n), 2):
        vals[i, j] = vals[j, i] = paired_cosine(features[i], features[j])
    return SimilarityMatrix(list(labels), vals)


def subnet_feature_similarity(subnets: Sequence[SubnetConfig], model: TasLoraModel,
                              images: np.ndarray) -> SimilarityMatrix:
    """Pairwise per-sample cosine of penultimate features, averaged over the batch."""
    if len(subnets) < 2:
        raise ValueError("need at least two subnets")
    if len(images) == 0:
        raise ValueError("empty probe batch")
    feats = [model.predict(s, images)[0] for s in subnets]
    return similarity_matrix([s.text() for s in subnets], feats)


def capture_layer_inputs(weights: SupernetWeights, subnet: SubnetConfig, images: np.ndarray) -> dict:
    capture: dict = {}
    forward(weights, subnet, images, capture=capture)
    return capture


def expert_similarity_by_layer(bank: ExpertBank, weights: SupernetWeights, subnet: SubnetConfig,
                               images: np.ndarray) -> np.ndarray:
    """Mean pairwise cosine between expert outputs E_k x, per active MoLE layer.

    Layer inputs x are captured from the frozen supernet on a fixed probe
    batch; each expert is applied alone, so routing weights play no part.
    Returns one value per layer in the order of the subnet's layers
    (4 per active block, then the classifier).
    """
    K = bank.num_experts
    if K < 2:
        raise ValueError("expert similarity needs at least two experts")
    inputs = capture_layer_inputs(weights, subnet, images)
    views = [v for b in range(subnet.depth) for v in slice_for(weights, subnet, b)]
    views.append(classifier_view(weights, subnet))
    out = []
    for view in views:
        x = inputs[view.layer].reshape(-1, view.in_dim).astype(np.float64)
        U = bank.U(view.layer).data[:, : view.out_dim, :].astype(np.float64)
        D = bank.D(view.layer).data[:, :, : view.in_dim].astype(np.float64)
        ys = [(x @ D[k].T @ U[k].T) / bank.rank for k in range(K)]
        sims = [paired_cosine(ys[i], ys[j]) for i, j in itertools.combinations(range(K), 2)]
        out.append(float(np.mean(sims)))
    return np.asarray(out)


def expert_similarity_matrix(bank: ExpertBank, weights: SupernetWeights, subnet: SubnetConfig,
                             images: np.ndarray, layer: int) -> SimilarityMatrix:
    """K x K cosine similarity of expert outputs at one layer."""
    inputs = capture_layer_inputs(weights, subnet, images)
    views = {v.layer: v for b in range(subnet.depth) for v in slice_for(weights, subnet, b)}
    head = classifier_view(weights, subnet)
    views[head.layer] = head
    view = views[layer]
    x = inputs[layer].reshape(-1, view.in_dim).astype(np.float64)
    ys = []
    for k in range(bank.num_experts):
        U = bank.U(layer).data[k, : view.out_dim].astype(np.float64)
        D = bank.D(layer).data[k, :, : view.in_dim].astype(np.float64)
        ys.append(x @ D.T @ U.T / bank.rank)
    return similarity_matrix([f"expert{k}" for k in range(bank.num_experts)], ys)


def assignment_heatmap(router: RouterState, space: SearchSpace, rng: np.random.Generator,
                       samples: int = 100) -> np.ndarray:
    """Average mixture row per block group over sampled subnets (groups x experts)."""
    K = router.num_experts
    sums = np.zeros((router.num_heads, K))
    counts = np.zeros(router.num_heads)
    for _ in range(samples):
        subnet = sample_subnet(space, rng)
        P = route(router, subnet).probs.data.astype(np.float64)
        for b, g in enumerate(router.grouping.groups_for(subnet)):
            sums[g] += P[4 * b: 4 * b + 4].sum(axis=0)
            counts[g] += 4
    seen = counts > 0
    out = np.full_like(sums, 1.0 / K)
    out[seen] = sums[seen] / counts[seen, None]
    return out


def mixture_rows(router: RouterState, subnet: SubnetConfig) -> list[dict]:
    """CSV-ready rows (block, layer_in_block, expert, weight, group) for one subnet."""
    P = route(router, subnet).probs.data
    groups = router.grouping.groups_for(subnet)
    rows = []
    for b in range(subnet.depth):
        for s in range(4):
            for k in range(router.num_experts):
                rows.append({"block": b, "layer_in_block": s, "expert": k,
                             "weight": float(P[4 * b + s, k]), "group": groups[b]})
    for k in range(router.num_experts):
        rows.append({"block": "classifier", "layer_in_block": 0, "expert": k,
                     "weight": float(P[-1, k]), "group": ""})
    return rows


def accuracy_table(subnets: Sequence[SubnetConfig], variants: dict, images: np.ndarray,
                   labels: np.ndarray) -> dict[str, dict[str, float]]:
    """Top-1 accuracy per subnet per variant.

    ``variants`` maps a name to either a TasLoraModel shared by all subnets
    or a dict subnet-text -> TasLoraModel (standalone "independent" models).
    """
    table: dict[str, dict[str, float]] = {}
    for s in subnets:
        row = {}
        for name, model in variants.items():
            m = model[s.text()] if isinstance(model, dict) else model
            _, logits = m.predict(s, images)
            row[name] = accuracy(logits, labels)
        table[s.text()] = row
    return table


# -- file outputs ---------------------------------------------------------------

def write_rows(path, rows: list[dict]):
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def write_matrix_csv(path, matrix: np.ndarray, row_label: str = "group", col_label: str = "expert"):
    rows = [{row_label: i, col_label: j, "weight": f"{matrix[i, j]:.6f}"}
            for i in range(matrix.shape[0]) for j in range(matrix.shape[1])]
    write_rows(path, rows)


def write_accuracy_csv(path, table: dict[str, dict[str, float]]):
    rows = [{"subnet": s, **{k: f"{v:.2f}" for k, v in row.items()}} for s, row in table.items()]
    write_rows(path, rows)


def heatmap_svg(matrix: np.ndarray, path, cell: int = 28, title: str = "",
                row_labels: Sequence[str] | None = None, col_labels: Sequence[str] | None = None,
                vmin: float | None = None, vmax: float | None = None):
    """Write a self-contained SVG heatmap (white to dark blue)."""
    m = np.asarray(matrix, dtype=float)
    lo = m.min() if vmin is None else vmin
    hi = m.max() if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    rows, cols = m.shape
    left, top = 90, 30 if title else 10
    width, height = left + cols * cell + 10, top + rows * cell + 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="10">']
    if title:
        parts.append(f'<text x="{left}" y="18" font-size="12">{title}</text>')
    for i in range(rows):
        label = row_labels[i] if row_labels else str(i)
        parts.append(f'<text x="{left - 4}" y="{top + i * cell + cell * 0.65:.1f}" text-anchor="end">{label}</text>')
        for j in range(cols):
            t = (m[i, j] - lo) / span
            r, g, b = (int(255 - t * (255 - c)) for c in (8, 48, 107))
            parts.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb({r},{g},{b})"><title>{m[i, j]:.4f}</title></rect>')
    for j in range(cols):
        label = col_labels[j] if col_labels else str(j)
        parts.append(f'<text x="{left + j * cell + cell / 2:.1f}" y="{top + rows * cell + 14}" '
                     f'text-anchor="middle">{label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))

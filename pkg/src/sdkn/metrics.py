"""Test-set metrics and activation-profile export."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .exceptions import UsageError
from .model import ActivationKernelLayer, ModelGraph, layer_inputs
from .trainer import predict

HISTOGRAM_BINS = 50


def cross_correlation(pred, target) -> float | None:
    """Pearson correlation over all entries pooled (population form).

    Returns ``None`` when either side has zero variance.
    """
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise UsageError(f"cross_correlation: {p.size} predictions vs {t.size} targets")
    if p.size < 2:
        raise UsageError("cross_correlation needs at least two values")
    dp = p - p.mean()
    dt = t - t.mean()
    denom = np.sqrt(np.dot(dp, dp) * np.dot(dt, dt))
    if denom == 0.0 or not np.isfinite(denom):
        return None
    return float(np.clip(np.dot(dp, dt) / denom, -1.0, 1.0))


@dataclass
class EvalReport:
    mse: float
    cross_correlation: float | None
    mse_per_component: list
    cross_correlation_per_component: list
    n_samples: int
    model_id: str = ""
    dataset_id: str = ""
    split: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate_predictions(pred, target, *, model_id="", dataset_id="", split="") -> EvalReport:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if len(target) == 0:
        raise UsageError("cannot evaluate on an empty split")
    if pred.shape != target.shape:
        raise UsageError(f"prediction shape {pred.shape} != target shape {target.shape}")
    pred = pred.reshape(len(pred), -1)
    target = target.reshape(len(target), -1)
    err = pred - target
    per_mse = (err * err).mean(axis=0)
    per_corr = [cross_correlation(pred[:, j], target[:, j]) if len(target) > 1 else None
                for j in range(target.shape[1])]
    pooled = cross_correlation(pred, target) if target.size > 1 else None
    return EvalReport(
        mse=float(np.sum(err * err) / len(err)),
        cross_correlation=pooled,
        mse_per_component=[float(v) for v in per_mse],
        cross_correlation_per_component=per_corr,
        n_samples=len(target),
        model_id=model_id,
        dataset_id=dataset_id,
        split=split,
    )


def evaluate(graph: ModelGraph, params: ParamStore, X, Y, **ids) -> EvalReport:
    """MSE (unregularized loss) and cross-correlation of the model on ``(X, Y)``."""
    if len(X) == 0:
        raise UsageError("cannot evaluate on an empty split")
    return evaluate_predictions(predict(graph, params, X), Y, **ids)


@dataclass
class ActivationProfile:
    layer: int
    dim: int
    grid: np.ndarray
    before: np.ndarray
    after: np.ndarray
    hist_edges: np.ndarray
    hist_counts: np.ndarray = field(repr=False)

    def rows(self):
        n = max(len(self.grid), len(self.hist_counts))
        for r in range(n):
            row = [repr(float(self.grid[r])), repr(float(self.before[r])), repr(float(self.after[r]))] \
                if r < len(self.grid) else ["", "", ""]
            if r < len(self.hist_counts):
                row += [repr(float(self.hist_edges[r])), str(int(self.hist_counts[r]))]
            else:
                row += ["", ""]
            yield row


def _values(params: ParamStore, layer: int):
    return {"C": params[f"{layer}.C"], "A": params[f"{layer}.A"]}


def export_activation_profiles(graph: ModelGraph, params_before: ParamStore,
                               params_after: ParamStore, train_inputs,
                               grid=None, n_grid: int = 101) -> list[ActivationProfile]:
    """Tabulate every activation dimension before and after training.

    The histogram (and, without an explicit ``grid``, the grid range)
    comes from the layer's inputs when the training set is propagated
    with ``params_after``.
    """
    layers = graph.activation_layers()
    if not layers:
        raise UsageError("graph has no activation-kernel layer")
    profiles = []
    for li in layers:
        block: ActivationKernelLayer = graph.blocks[li]
        inputs = layer_inputs(graph, params_after, train_inputs, li)
        for d in range(block.dim):
            col = inputs[:, d]
            lo, hi = float(col.min()), float(col.max())
            if hi <= lo:
                lo, hi = lo - 1.0, hi + 1.0
            g = np.linspace(lo, hi, n_grid) if grid is None else np.asarray(grid, dtype=np.float64)
            counts, edges = np.histogram(col, bins=HISTOGRAM_BINS, range=(lo, hi))
            profiles.append(ActivationProfile(
                li, d, g,
                block.profile(_values(params_before, li), d, g),
                block.profile(_values(params_after, li), d, g),
                edges[:-1], counts,
            ))
    return profiles


def write_profiles(profiles, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for prof in profiles:
        path = out_dir / f"layer_{prof.layer}_dim_{prof.dim}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["grid", "before", "after", "hist_left_edge", "hist_count"])
            w.writerows(prof.rows())
        paths.append(path)
    return paths

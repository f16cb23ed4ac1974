"""Activation replacement: swap a layer's output for a rescaled On-Off
pattern or path-count map, finish inference unchanged, measure accuracy.

Both scaled forms preserve the layer's total activation mass: the replaced
tensor sums to the same value as the activation it displaces. No weights are
touched and nothing is fine-tuned.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ArgumentError
from .model import ForwardTrace, ModelSpec, forward, forward_from_layer, model_digest, resolve
from .parallel import pmap
from .pathcount import ClipConfig, PathCountMap, extract_onoff, on_ratio, pathcount_forward

REPLACEMENT_KINDS = ("identity", "scaled_onoff", "scaled_pathcount", "signed_scaled_pathcount")

_NEEDS_COUNTS = ("scaled_pathcount", "signed_scaled_pathcount")


def scaled_onoff(activation: np.ndarray, pattern: np.ndarray) -> np.ndarray:
    """Binary pattern rescaled so its sum equals the activation's sum.

    With mu_a the activation total and mu_o the number of on neurons, the
    output is pattern * mu_a/mu_o; an all-off layer maps to all zeros.
    """
    if activation.shape != pattern.shape:
        raise ArgumentError(f"shape mismatch: {activation.shape} vs {pattern.shape}")
    mu_o = float(pattern.sum())
    if mu_o == 0.0:
        return np.zeros_like(activation, dtype=np.float64)
    mu_a = float(activation.sum(dtype=np.float64))
    return pattern.astype(np.float64) * (mu_a / mu_o)


def scaled_pathcount(activation: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Path counts rescaled so their sum equals the activation's sum."""
    if activation.shape != counts.shape:
        raise ArgumentError(f"shape mismatch: {activation.shape} vs {counts.shape}")
    mu_pc = float(counts.sum(dtype=np.float64))
    if mu_pc == 0.0:
        return np.zeros_like(activation, dtype=np.float64)
    mu_a = float(activation.sum(dtype=np.float64))
    return counts.astype(np.float64) * (mu_a / mu_pc)


def signed_scaled_pathcount(pre_activation: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """scaled_pathcount of |pre-activation|, re-signed entry by entry."""
    return np.sign(pre_activation) * scaled_pathcount(np.abs(pre_activation), counts)


def replaceable_layers(spec: ModelSpec) -> list[str]:
    """Layers the sweep covers: every ReLU output."""
    return [r.name for r in resolve(spec) if r.spec.kind == "relu"]


def _layer_kind(spec: ModelSpec, layer: str) -> str:
    for r in resolve(spec):
        if r.name == layer:
            return r.spec.kind
    raise ArgumentError(
        f"no layer named {layer!r}; known: {', '.join(r.name for r in resolve(spec))}"
    )


def _replaced_activation(
    trace: ForwardTrace, layer: str, kind: str, counts: PathCountMap | None
) -> np.ndarray:
    act = trace.output(layer)
    if kind == "identity":
        return act
    if kind == "scaled_onoff":
        return scaled_onoff(act, (act > 0).astype(np.float64))
    if kind == "scaled_pathcount":
        return scaled_pathcount(act, counts.layer(layer))
    if kind == "signed_scaled_pathcount":
        return signed_scaled_pathcount(act, counts.layer(layer))
    raise ArgumentError(f"unknown replacement kind {kind!r}; choose from {REPLACEMENT_KINDS}")


def _check_site(spec: ModelSpec, layer: str, kind: str) -> None:
    if kind not in REPLACEMENT_KINDS:
        raise ArgumentError(f"unknown replacement kind {kind!r}; choose from {REPLACEMENT_KINDS}")
    lk = _layer_kind(spec, layer)
    if kind == "identity":
        return
    if kind in ("scaled_onoff", "scaled_pathcount") and lk != "relu":
        raise ArgumentError(f"{kind} replaces ReLU outputs only; {layer} is a {lk} layer")
    if kind == "signed_scaled_pathcount" and lk not in ("relu", "conv"):
        raise ArgumentError(f"{kind} replaces ReLU or conv outputs; {layer} is a {lk} layer")


def replace_and_infer(
    weights: dict[str, np.ndarray],
    spec: ModelSpec,
    x: np.ndarray,
    layer: str,
    kind: str,
    clip: ClipConfig = ClipConfig(),
) -> np.ndarray:
    """Forward to `layer`, substitute its output per `kind`, finish forward."""
    _check_site(spec, layer, kind)
    trace = forward(weights, spec, x)
    counts = pathcount_forward(weights, spec, trace, clip) if kind in _NEEDS_COUNTS else None
    replaced = _replaced_activation(trace, layer, kind, counts)
    return forward_from_layer(weights, spec, layer, replaced.astype(trace.output(layer).dtype))


@dataclass(frozen=True)
class SweepRow:
    layer: str
    kind: str
    accuracy: float
    baseline_accuracy: float
    mean_on_ratio: float


@dataclass(frozen=True)
class SweepReport:
    rows: list[SweepRow]
    metadata: dict

    def row(self, layer: str, kind: str) -> SweepRow:
        for r in self.rows:
            if r.layer == layer and r.kind == kind:
                return r
        raise ArgumentError(f"no sweep row for ({layer}, {kind})")


def _sweep_one(x, *, weights, spec, layers, kinds, clip):
    """Per-image worker: baseline prediction, per-(layer, kind) prediction,
    per-layer on-ratio."""
    trace = forward(weights, spec, x)
    base_pred = int(np.argmax(trace.logits))
    needs_counts = any(k in _NEEDS_COUNTS for k in kinds)
    counts = pathcount_forward(weights, spec, trace, clip) if needs_counts else None
    pattern = extract_onoff(trace)
    preds = {}
    for layer in layers:
        for kind in kinds:
            replaced = _replaced_activation(trace, layer, kind, counts)
            logits = forward_from_layer(
                weights, spec, layer, replaced.astype(trace.output(layer).dtype)
            )
            preds[(layer, kind)] = int(np.argmax(logits))
    ratios = {layer: on_ratio(pattern, layer) for layer in layers}
    return base_pred, preds, ratios


def sweep(
    weights: dict[str, np.ndarray],
    spec: ModelSpec,
    dataset: Dataset,
    kinds=REPLACEMENT_KINDS,
    clip: ClipConfig = ClipConfig(),
    workers: int = 1,
) -> SweepReport:
    """Replacement accuracy for every ReLU layer and every requested kind."""
    if len(dataset) == 0:
        raise ArgumentError("cannot sweep an empty dataset")
    kinds = tuple(kinds)
    layers = replaceable_layers(spec)
    for kind in kinds:
        for layer in layers:
            _check_site(spec, layer, kind)
    worker = functools.partial(
        _sweep_one, weights=weights, spec=spec, layers=layers, kinds=kinds, clip=clip
    )
    results = pmap(worker, list(dataset.images), workers=workers)
    n = len(dataset)
    labels = dataset.labels
    base_acc = sum(int(r[0] == labels[i]) for i, r in enumerate(results)) / n
    rows = []
    for layer in layers:
        ratio = sum(r[2][layer] for r in results) / n
        for kind in kinds:
            correct = sum(int(r[1][(layer, kind)] == labels[i]) for i, r in enumerate(results))
            rows.append(SweepRow(layer, kind, correct / n, base_acc, ratio))
    meta = {
        "model_sha256": model_digest(weights, spec),
        "samples": n,
        "kinds": list(kinds),
        "clip_mode": clip.mode,
        "clip_threshold": clip.threshold,
        "layers": layers,
    }
    return SweepReport(rows, meta)


SWEEP_CSV_HEADER = ["layer_name", "kind", "accuracy", "baseline_accuracy", "mean_on_ratio"]


def sweep_csv_rows(report: SweepReport) -> list[list]:
    return [[r.layer, r.kind, r.accuracy, r.baseline_accuracy, r.mean_on_ratio]
            for r in report.rows]

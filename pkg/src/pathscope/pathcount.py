"""On-Off patterns and active-path counting.

A neuron is "on" iff its post-ReLU activation is strictly positive. The path
count of a neuron is the number of active paths reaching it from all input
elements, where a path is active iff every intermediate neuron it visits is
on and every weight it crosses is nonzero (fully-connected weights must
additionally survive the clip threshold).

`pathcount_forward` computes all counts at once by propagating an all-ones
input through binarized weights, gating at ReLUs and routing through pool
argmax winners. `pathcount_bruteforce` enumerates complete paths one by one
(no memoization) and exists to cross-check the forward recurrence.

Counts are float64: integer-exact below 2**53, with an exactness flag beyond.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, SizeError
from .model import ForwardTrace, ModelSpec, resolve

_EXACT_LIMIT = float(2**53)


@dataclass(frozen=True)
class ClipConfig:
    """Threshold test applied to fully-connected weights during counting.

    mode "absolute": keep |w| > threshold.
    mode "mean": keep |w| > mean(|w|) of that layer; `threshold` is ignored.
    Convolution weights are never clipped (plain |w| > 0 test).
    """

    mode: str = "absolute"
    threshold: float = 0.0

    def __post_init__(self):
        if self.mode not in ("absolute", "mean"):
            raise ArgumentError(f"clip mode must be 'absolute' or 'mean', got {self.mode!r}")
        if self.threshold < 0:
            raise ArgumentError(f"clip threshold must be >= 0, got {self.threshold}")

    def resolve_threshold(self, weights: np.ndarray) -> float:
        if self.mode == "mean":
            return float(np.abs(weights).mean())
        return self.threshold


@dataclass(frozen=True)
class OnOffPattern:
    """Binary (0/1) tensors, one per traced layer, congruent with activations."""

    layers: dict[str, np.ndarray]

    def layer(self, name: str) -> np.ndarray:
        if name not in self.layers:
            raise ArgumentError(f"no layer named {name!r}; known: {', '.join(self.layers)}")
        return self.layers[name]


@dataclass(frozen=True)
class PathCountMap:
    """Per-layer path counts in float64; `exact` is False once any count
    exceeds 2**53 (float64 can no longer represent it exactly)."""

    layers: dict[str, np.ndarray]
    exact: bool

    def layer(self, name: str) -> np.ndarray:
        if name not in self.layers:
            raise ArgumentError(f"no layer named {name!r}; known: {', '.join(self.layers)}")
        return self.layers[name]


def extract_onoff(trace: ForwardTrace) -> OnOffPattern:
    """1 where the traced value is strictly positive, 0 elsewhere, per layer."""
    return OnOffPattern({name: (out > 0).astype(np.float64)
                         for name, out in trace.outputs.items()})


def clip_fc_weights(weights: np.ndarray, clip: ClipConfig) -> np.ndarray:
    """Binary mask of fully-connected weights surviving the clip threshold."""
    tau = clip.resolve_threshold(weights)
    return (np.abs(weights) > tau).astype(np.float64)


def on_ratio(pattern: OnOffPattern, layer: str) -> float:
    return float(pattern.layer(layer).mean())


def pathcount_forward(
    weights: dict[str, np.ndarray],
    spec: ModelSpec,
    trace: ForwardTrace,
    clip: ClipConfig = ClipConfig(),
) -> PathCountMap:
    """All-ones propagation: every input element contributes one path.

    Convolution/fc layers sum counts over surviving weights; ReLU layers zero
    the counts of off neurons; pools forward the argmax winner's count;
    padding positions contribute nothing; dropout and flatten are identity.
    """
    from . import ops  # local import keeps module load light

    pattern = extract_onoff(trace)
    counts: dict[str, np.ndarray] = {}
    cur = np.ones(spec.input_shape, dtype=np.float64)
    for r in resolve(spec):
        s = r.spec
        if s.kind == "conv":
            ones_w = (np.abs(weights[r.name]) > 0).astype(np.float64)
            cur = ops.conv2d_forward(cur, ones_w, s.stride, s.padding)
        elif s.kind == "relu":
            cur = cur * pattern.layer(r.name)
        elif s.kind == "maxpool":
            routing = trace.routings[r.name]
            cur = np.take(cur.reshape(-1), routing)
        elif s.kind == "flatten":
            cur = cur.reshape(-1)
        elif s.kind == "fc":
            mask = clip_fc_weights(weights[r.name], clip)
            cur = ops.fc_forward(cur, mask)
        # dropout: identity
        counts[r.name] = cur
    exact = all(float(c.max(initial=0.0)) <= _EXACT_LIMIT for c in counts.values())
    return PathCountMap(counts, exact)


_PATH_LIMIT = 10_000_000
_VISIT_LIMIT = 50_000_000


def pathcount_bruteforce(
    weights: dict[str, np.ndarray],
    spec: ModelSpec,
    trace: ForwardTrace,
    clip: ClipConfig,
    target: tuple[str, int],
) -> int:
    """Depth-first enumeration of complete active paths to one neuron.

    Deliberately unmemoized — every complete path is walked individually —
    so it is an independent oracle for pathcount_forward. Guards against
    blowup with SizeError once 10^7 paths (or 5x10^7 expansions) are seen.
    """
    resolved = resolve(spec)
    names = [r.name for r in resolved]
    layer_name, neuron = target
    if layer_name not in names:
        raise ArgumentError(f"no layer named {layer_name!r}; known: {', '.join(names)}")
    li = names.index(layer_name)
    if not 0 <= neuron < int(np.prod(resolved[li].out_shape)):
        raise ArgumentError(f"neuron {neuron} out of range for {layer_name} {resolved[li].out_shape}")

    fc_masks = {r.name: clip_fc_weights(weights[r.name], clip) > 0
                for r in resolved if r.spec.kind == "fc"}
    on = {name: (out > 0).reshape(-1) for name, out in trace.outputs.items()}

    paths = 0
    visits = 0

    def walk(i: int, idx: int) -> None:
        # Count complete paths from layer i's output neuron `idx` back to input.
        nonlocal paths, visits
        visits += 1
        if visits > _VISIT_LIMIT:
            raise SizeError(f"path enumeration exceeded {_VISIT_LIMIT} expansions")
        if i < 0:
            paths += 1
            if paths > _PATH_LIMIT:
                raise SizeError(f"more than {_PATH_LIMIT} paths to {layer_name}[{neuron}]")
            return
        r = resolved[i]
        s = r.spec
        if s.kind == "conv":
            co, oy, ox = np.unravel_index(idx, r.out_shape)
            c_in, h_in, w_in = r.in_shape
            w = weights[r.name]
            for ci in range(c_in):
                for ky in range(s.kernel):
                    iy = oy * s.stride - s.padding + ky
                    if not 0 <= iy < h_in:
                        continue
                    for kx in range(s.kernel):
                        ix = ox * s.stride - s.padding + kx
                        if not 0 <= ix < w_in:
                            continue
                        if w[co, ci, ky, kx] != 0:
                            walk(i - 1, int(ci * h_in * w_in + iy * w_in + ix))
        elif s.kind == "relu":
            if on[r.name][idx]:
                walk(i - 1, idx)
        elif s.kind == "maxpool":
            walk(i - 1, int(trace.routings[r.name].reshape(-1)[idx]))
        elif s.kind == "fc":
            row = fc_masks[r.name][idx]
            for k in np.nonzero(row)[0]:
                walk(i - 1, int(k))
        else:  # dropout / flatten: same flat position
            walk(i - 1, idx)

    walk(li, int(neuron))
    return paths

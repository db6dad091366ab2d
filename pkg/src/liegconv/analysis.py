"""Kernel-redundancy measurement, equivariance-error sweeps, and
factorization benchmarks.

All analyses are pure numpy computations over sampled kernels or model
outputs; benchmark timings are pinned single-threaded by default (the
``LIEGCONV_THREADS`` environment variable overrides the cap).
"""

from __future__ import annotations

import csv
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import gconv as G
from . import kernelnet as kn
from . import model as M
from . import tensor as T

TWO_PI = 2.0 * math.pi

GCONV_LAYERS = ("block1.conv1", "block1.conv2", "block2.conv1", "block2.conv2")


# ---------------------------------------------------------------------------
# PCA redundancy of kernel stacks


def _first_pc_ratios(stacks: np.ndarray) -> np.ndarray:
    """(B, n_h, d) batches -> lambda_1 / sum(lambda) per batch.

    Computed on the (n_h, n_h) Gram matrix of the H-centered rows,
    whose nonzero eigenvalues match the covariance spectrum. A stack
    whose rows are all equal is perfectly redundant: ratio 1.
    """
    centered = stacks - stacks.mean(axis=1, keepdims=True)
    gram = centered @ np.swapaxes(centered, 1, 2)
    eig = np.linalg.eigvalsh(gram)
    total = eig.sum(axis=1)
    top = eig[:, -1]
    out = np.ones(len(stacks))
    live = total > 0
    out[live] = top[live] / total[live]
    # round-off can leave slightly negative trailing eigenvalues
    return np.clip(out, 0.0, 1.0)


def pca_redundancy(kernel_stack: np.ndarray) -> float:
    """First-PC explained-variance ratio of |H| flattened spatial kernels.

    ``kernel_stack`` is (n_h, k, k) (or (n_h, d)); the rows are centered
    across the H axis before the eigendecomposition.
    """
    stack = np.asarray(kernel_stack, dtype=np.float64)
    if stack.ndim < 2:
        raise ValueError(f"kernel stack must be (n_h, ...), got shape {stack.shape}")
    n_h = stack.shape[0]
    if n_h < 2:
        raise ValueError(f"need at least 2 kernels along the H axis, got {n_h}")
    return float(_first_pc_ratios(stack.reshape(1, n_h, -1))[0])


def kh_variance(values: np.ndarray, axis: int = 0) -> dict:
    """Population variance of subgroup-factor values along the H axis.

    Returns per-kernel variances (input shape with ``axis`` removed)
    plus their mean/min/max.
    """
    values = np.asarray(values, dtype=np.float64)
    per_kernel = values.var(axis=axis)
    flat = np.atleast_1d(per_kernel)
    return {
        "per_kernel": per_kernel,
        "mean": float(flat.mean()),
        "min": float(flat.min()),
        "max": float(flat.max()),
    }


@dataclass
class RedundancyReport:
    """Per-layer first-PC ratios, grouped by phase (e.g. init/trained)."""

    ratios: dict = field(default_factory=dict)  # phase -> layer -> np.ndarray

    def add(self, phase: str, layer: str, values: np.ndarray):
        vals = np.asarray(values, dtype=np.float64)
        self.ratios.setdefault(phase, {})[layer] = vals

    def mean_ratio(self, phase: str, layer: str) -> float:
        return float(self.ratios[phase][layer].mean())

    def histogram(self, phase: str, layer: str, bins: int = 10):
        """(frequencies, edges) over [0, 1]; frequencies sum to 1."""
        vals = self.ratios[phase][layer]
        if len(vals) == 0:
            raise ValueError(f"no ratios recorded for {phase}/{layer}")
        counts, edges = np.histogram(vals, bins=bins, range=(0.0, 1.0))
        return counts / counts.sum(), edges

    def rows(self) -> list[tuple]:
        """(layer, kernel_id, ratio, phase) rows for the CSV schema."""
        out = []
        for phase in self.ratios:
            for layer, vals in self.ratios[phase].items():
                out.extend(
                    (layer, i, float(v), phase) for i, v in enumerate(vals)
                )
        return out


def _sample_layer(model: M.Model, name: str) -> kn.SampledKernel:
    bundle = model.bundles[name]
    return kn.sample_kernel_grid(
        bundle,
        model.cfg.stencil,
        model.base_grids,
        model.base_grids,
        model.cfg.scale_support,
    )


def model_redundancy(
    model: M.Model, phase: str, report: RedundancyReport | None = None
) -> RedundancyReport:
    """First-PC ratios for every group-conv layer of a model.

    Each (output h, input channel, output channel) triple contributes
    one stack of |H| spatial kernels taken from the materialized
    kernel's input-H axis.
    """
    report = report if report is not None else RedundancyReport()
    for name in GCONV_LAYERS:
        sk = _sample_layer(model, name)
        with T.suspend_macs():
            full = kn.materialize_full_kernel(sk).data
        n_out, n_in, k, _, ci, co = full.shape
        if n_in < 2:
            raise ValueError(
                f"layer {name} has |H|={n_in}; redundancy needs at least 2"
            )
        stacks = full.transpose(0, 4, 5, 1, 2, 3).reshape(n_out * ci * co, n_in, k * k)
        report.add(phase, name, _first_pc_ratios(stacks))
    return report


def model_kh_variance(model: M.Model) -> dict[str, float]:
    """Mean variance along the input-H axis of each layer's H factor."""
    out = {}
    for name in GCONV_LAYERS:
        sk = _sample_layer(model, name)
        if "subgroup" in sk.factors:
            arrs = [sk.factors["subgroup"].data]
        elif "rotation" in sk.factors:
            arrs = [sk.factors["rotation"].data, sk.factors["scale"].data]
        else:  # Nonseparable: variance of the full kernel along input H
            arrs = [sk.factors["full"].data]
        out[name] = float(np.mean([kh_variance(a, axis=1)["mean"] for a in arrs]))
    return out


# ---------------------------------------------------------------------------
# equivariance error


def rotate_planes(planes: np.ndarray, angle: float) -> np.ndarray:
    """Bilinear rotation about the center of each (..., H, W) plane.

    Unlike the image pipeline this keeps dtype and value range
    unconstrained so it applies to feature maps.
    """
    planes = np.asarray(planes, dtype=np.float64)
    hh, ww = planes.shape[-2:]
    lead = planes.shape[:-2]
    flat = planes.reshape(-1, hh, ww)
    cy, cx = (hh - 1) / 2.0, (ww - 1) / 2.0
    yy, xx = np.mgrid[0:hh, 0:ww].astype(np.float64)
    c, s = math.cos(-angle), math.sin(-angle)
    sx = c * (xx - cx) - s * (yy - cy) + cx
    sy = s * (xx - cx) + c * (yy - cy) + cy
    out = np.empty_like(flat)
    for i, img in enumerate(flat):
        out[i] = D._bilinear(img, sy, sx)
    return out.reshape(*lead, hh, ww)


def _roll_h(arr: np.ndarray, shift: float, axis: int) -> np.ndarray:
    """Circular shift along a rotation axis; fractional shifts blend."""
    base = math.floor(shift)
    frac = shift - base
    if abs(frac) < 1e-9:
        return np.roll(arr, base, axis=axis)
    if abs(1.0 - frac) < 1e-9:
        return np.roll(arr, base + 1, axis=axis)
    return (1.0 - frac) * np.roll(arr, base, axis=axis) + frac * np.roll(
        arr, base + 1, axis=axis
    )


def transform_feature_rotation(f: G.GFeatureMap, angle: float) -> np.ndarray:
    """Apply the rotation action to a feature map's raw array.

    Spatial planes rotate about their center; the rotation axis of the
    grid shifts circularly by angle / grid spacing.
    """
    if not f.grids or f.grids[0].tag != "SO2":
        raise ValueError("feature map must carry a leading SO2 grid")
    n = len(f.grids[0].elements)
    arr = rotate_planes(f.data.data, angle)
    return _roll_h(arr, angle / (TWO_PI / n), axis=2)


def layer_equivariance_errors(
    model: M.Model, images: np.ndarray, angle: float
) -> dict[str, float]:
    """Relative commutation error per feature stage for one rotation.

    For each stage Phi reports |Phi(L_g x) - L_g Phi(x)| / |Phi(x)|
    (Frobenius norms), with L_g acting on images by bilinear rotation
    and on features by bilinear rotation plus a circular shift along
    the rotation axis.
    """
    cfg = model.cfg
    x = np.asarray(images, dtype=model.np_dtype)
    x_rot = D.rotate_images(x, angle).astype(model.np_dtype)

    def stages(inp):
        draw = lambda: model.base_grids
        f = G.lift_conv(
            T.constant(inp), model.bundles["lift"], model.base_grids, cfg.stencil, cfg.padding
        )
        f = G.GFeatureMap(T.relu(M._bn(model, "bn_lift", f.data, False)), f.grids)
        yield "lift", f
        f = M._residual_block(model, "block1", f, False, draw)
        yield "block1", f
        f = M._spatial_pool(f, 2)
        f = M._residual_block(model, "block2", f, False, draw)
        yield "block2", f

    errors = {}
    with T.no_grad():
        for (name, f_plain), (_, f_rot) in zip(stages(x), stages(x_rot)):
            moved = transform_feature_rotation(f_plain, angle)
            ref = np.linalg.norm(f_plain.data.data)
            errors[name] = float(np.linalg.norm(f_rot.data.data - moved) / (ref + 1e-30))
    return errors


def equivariance_sweep(
    model: M.Model,
    dataset,
    transform: str = "rotation",
    transform_range: tuple[float, float] | None = None,
    n_steps: int = 100,
    batch_size: int = 256,
) -> list[tuple[float, float]]:
    """Test error versus transform parameter.

    Rotation sweeps cover [0, 2pi) on an endpoint-free grid (the curve
    is periodic by construction); scale sweeps include both endpoints.
    """
    images, labels = M._images_labels(dataset)
    if transform == "rotation":
        lo, hi = transform_range if transform_range else (0.0, TWO_PI)
        values = np.linspace(lo, hi, n_steps, endpoint=False)
        apply = lambda v: D.rotate_images(images, v)
    elif transform == "scale":
        lo, hi = transform_range if transform_range else (0.3, 1.0)
        values = np.linspace(lo, hi, n_steps)
        apply = lambda v: D.scale_images(images, v)
    else:
        raise ValueError(f"unknown transform {transform!r}; use rotation or scale")
    curve = []
    for v in values:
        acc = M.evaluate(model, (apply(float(v)), labels), batch_size=batch_size)
        curve.append((float(v), 1.0 - acc))
    return curve


# ---------------------------------------------------------------------------
# benchmarks


def thread_cap() -> int:
    return max(1, int(os.environ.get("LIEGCONV_THREADS", "1")))


@contextmanager
def _limited_threads():
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=thread_cap()):
            yield
    except ImportError:  # pragma: no cover - best effort without the helper
        yield


_EXECUTORS = {
    "Nonseparable": G.group_conv,
    "Separable": G.separable_group_conv,
    "Gseparable": G.separable_group_conv,
    "DGseparable": G.separable_group_conv,
    "Dseparable": G.separable_group_conv,
    "HSeparable": G.h_separable_conv,
}

BENCH_FIELDS = ("factorization", "n_h", "k", "macs", "seconds")


def benchmark(
    configs: list[dict], repeats: int = 5, warmup: int = 1, seed: int = 0
) -> list[dict]:
    """Median wall-clock and multiply counts per executor configuration.

    Each config dict may set factorization, n_h, k, c_in, c_out, batch,
    height, width, hidden, and group_tag; counts are taken from one
    counted run, seconds as the median of ``repeats`` timed runs after
    ``warmup`` discarded ones.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rows = []
    rng = np.random.default_rng(seed)
    with _limited_threads():
        for cfg in configs:
            kind = cfg.get("factorization", "Separable")
            if kind not in _EXECUTORS:
                raise ValueError(f"unknown factorization {kind!r}")
            n_h = cfg.get("n_h", 8)
            k = cfg.get("k", 5)
            ci, co = cfg.get("c_in", 8), cfg.get("c_out", 8)
            batch = cfg.get("batch", 1)
            hh, ww = cfg.get("height", 16), cfg.get("width", 16)
            group_tag = cfg.get("group_tag", "Sim2" if kind == "HSeparable" else "SE2")
            if group_tag == "Sim2":
                nt, ns = (n_h, n_h) if isinstance(n_h, int) else n_h
                grids = G.make_h_grids(group_tag, n_rot=nt, n_scale=ns)
            elif group_tag == "R2xRplus":
                grids = G.make_h_grids(group_tag, n_scale=n_h)
            else:
                grids = G.make_h_grids(group_tag, n_rot=n_h)
            bundle = kn.make_kernel_bundle(
                kind, group_tag, ci, co,
                hidden=tuple(cfg.get("hidden", (32, 32))), rng=rng,
            )
            f = G.GFeatureMap(
                T.constant(
                    rng.standard_normal((batch, ci, *(len(g.elements) for g in grids), hh, ww))
                ),
                grids,
            )
            run = lambda: _EXECUTORS[kind](f, bundle, grids, stencil=k)
            for _ in range(warmup):
                run()
            _, counted = G.measure_cost(run)
            seconds = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                run()
                seconds.append(time.perf_counter() - t0)
            rows.append(
                {
                    "factorization": kind,
                    "n_h": n_h if isinstance(n_h, int) else f"{nt}x{ns}",
                    "k": k,
                    "macs": counted.macs,
                    "seconds": float(np.median(seconds)),
                }
            )
    return rows


# ---------------------------------------------------------------------------
# CSV emission (schemas shared with the command-line entry point)


REDUNDANCY_FIELDS = ("layer", "kernel_id", "ratio", "phase")
EQUIVARIANCE_FIELDS = ("param", "value", "test_error")


def write_csv(path, fieldnames, rows, header: dict | None = None):
    """CSV with '# key=value' provenance comments before the header row."""
    with open(path, "w", newline="") as fh:
        for key, val in (header or {}).items():
            fh.write(f"# {key}={val}\n")
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            if isinstance(row, dict):
                writer.writerow([row[f] for f in fieldnames])
            else:
                writer.writerow(list(row))


def sweep_rows(curve: list[tuple[float, float]], param: str) -> list[tuple]:
    return [(param, v, e) for v, e in curve]

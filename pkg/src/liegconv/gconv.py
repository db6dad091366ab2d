"""Group-convolution executors on the affine groups R^2 ⋊ H.

A feature map lives on the group: one value per (batch, channel,
subgroup element, pixel).  :func:`lift_conv` takes a plain image onto
the group, :func:`group_conv` runs the direct double sum over offsets
and subgroup elements with the materialized (dense) kernel, and
:func:`separable_group_conv` / :func:`h_separable_conv` run the
factorized two- and three-stage paths that contract one axis at a
time.  All executors divide by the determinant of the output element's
2x2 action so that enlarging kernels do not inflate responses.

:func:`flop_estimate` gives closed-form multiply-accumulate counts;
the executors are instrumented (via :mod:`.tensor` tallies) to report
exactly those counts.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernelnet as kn
from . import lie
from . import tensor as T

SEPARABLE_KINDS = ("Separable", "Dseparable", "Gseparable", "DGseparable")


@dataclass
class GFeatureMap:
    """Array of shape (batch, channels, |H_1|[, |H_2|], height, width).

    ``grids`` holds one :class:`~.lie.SubgroupGrid` per H axis, in axis
    order.  A plain image is the degenerate case with no H axes.
    """

    data: T.DiffTensor
    grids: tuple[lie.SubgroupGrid, ...] = ()

    def __post_init__(self):
        if not isinstance(self.data, T.DiffTensor):
            self.data = T.constant(self.data)
        self.grids = tuple(self.grids)
        expect = 4 + len(self.grids)
        if self.data.ndim != expect:
            raise ValueError(
                f"feature data has {self.data.ndim} axes, expected {expect} "
                f"for {len(self.grids)} subgroup grid(s)"
            )
        for axis, grid in enumerate(self.grids, start=2):
            if self.data.shape[axis] != len(grid):
                raise ValueError(
                    f"axis {axis} extent {self.data.shape[axis]} does not match "
                    f"grid size {len(grid)} ({grid.tag})"
                )

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[-2:]

    @property
    def n_h(self) -> int:
        return kn.flat_h_count(self.grids)


@dataclass
class CostReport:
    """Arithmetic cost of one convolution: MAC count, optional timing."""

    macs: int
    seconds: float | None = None
    config: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# plumbing


def _expected_tags(group_tag: str) -> tuple[str, ...]:
    return {"SE2": ("SO2",), "R2xRplus": ("Rplus",), "Sim2": ("SO2", "Rplus")}[group_tag]


def _check_grids(group_tag: str, grids: tuple[lie.SubgroupGrid, ...], role: str) -> None:
    tags = tuple(g.tag for g in grids)
    if tags != _expected_tags(group_tag):
        raise ValueError(f"{role} grids {tags} do not match group {group_tag}")
    if any(len(g) == 0 for g in grids):
        raise ValueError(f"{role} grid is empty")


def _check_feature(f: GFeatureMap, bundle: kn.KernelBundle) -> None:
    _check_grids(bundle.group_tag, f.grids, "input")
    if f.channels != bundle.c_in:
        raise ValueError(
            f"feature has {f.channels} channels, kernel expects {bundle.c_in}"
        )


def _flat_h(f: GFeatureMap) -> T.DiffTensor:
    """Merge the H axes: (N, C, n_flat, H, W)."""
    n, c = f.data.shape[:2]
    hh, ww = f.data.shape[-2:]
    return f.data.reshape((n, c, f.n_h, hh, ww))


def _wrap_out(out5: T.DiffTensor, out_grids: tuple[lie.SubgroupGrid, ...]) -> GFeatureMap:
    """(N, C, n_flat, H, W) -> GFeatureMap with per-grid H axes."""
    n, c, _, hh, ww = out5.shape
    sizes = tuple(len(g) for g in out_grids)
    return GFeatureMap(out5.reshape((n, c) + sizes + (hh, ww)), out_grids)


def _fold_inv_dets(x: T.DiffTensor, dets: np.ndarray, axis: int = 0) -> T.DiffTensor:
    """Multiply factor ``x`` by 1/|h| along its output-grid axis."""
    if np.all(dets == 1.0):
        return x
    shape = [1] * x.ndim
    shape[axis] = len(dets)
    return T.mul(x, T.constant((1.0 / dets).reshape(shape).astype(x.dtype)))


def make_h_grids(
    group_tag: str,
    n_rot: int = 1,
    n_scale: int = 1,
    truncation: float = math.sqrt(3.0),
) -> tuple[lie.SubgroupGrid, ...]:
    """Per-axis uniform subgroup grids for a group tag."""
    if group_tag == "SE2":
        return (lie.uniform_grid("SO2", n_rot),)
    if group_tag == "R2xRplus":
        return (lie.uniform_grid("Rplus", n_scale, truncation),)
    if group_tag == "Sim2":
        return (
            lie.uniform_grid("SO2", n_rot),
            lie.uniform_grid("Rplus", n_scale, truncation),
        )
    raise ValueError(f"unknown group tag {group_tag!r}")


def perturb_h_grids(
    grids: tuple[lie.SubgroupGrid, ...],
    rng: np.random.Generator,
    allow_noncompact: bool = False,
) -> tuple[lie.SubgroupGrid, ...]:
    """Randomly left-translate each grid axis (continuous sampling).

    Compact axes always move; dilation axes stay on the uniform grid
    unless ``allow_noncompact`` opts in to a one-cell log-scale offset.
    """
    out = []
    for g in grids:
        if g.tag == "Rplus" and not allow_noncompact:
            out.append(g)
        else:
            out.append(lie.random_perturb(g, rng, allow_noncompact=allow_noncompact))
    return tuple(out)


# ---------------------------------------------------------------------------
# executors


def lift_conv(
    image,
    bundle: kn.KernelBundle,
    out_grids: tuple[lie.SubgroupGrid, ...],
    stencil: int,
    padding: str = "zero",
) -> GFeatureMap:
    """Convolve a plain image with the h-transformed spatial kernels.

    One stride-1 convolution with |H| stacked kernel transforms; output
    channel (j, a) holds f * (1/|h_a|) k(h_a^-1 ·) for channel j.
    """
    if isinstance(image, GFeatureMap):
        if image.grids:
            raise ValueError("lift_conv expects an image with no H axes")
        image = image.data
    data = image if isinstance(image, T.DiffTensor) else T.constant(image)
    if data.ndim != 4:
        raise ValueError(f"image must be (N, C, H, W), got {data.shape}")
    if bundle.kind != "lift":
        raise ValueError(f"lift_conv needs a 'lift' kernel bundle, got {bundle.kind!r}")
    _check_grids(bundle.group_tag, out_grids, "output")
    if data.shape[1] != bundle.c_in:
        raise ValueError(f"image has {data.shape[1]} channels, kernel expects {bundle.c_in}")

    sk = kn.sample_kernel_grid(bundle, stencil, out_grids, ())
    sp = _fold_inv_dets(sk.factors["spatial"], sk.dets)  # (n_out, k, k, ci, co)
    n_out, k = sp.shape[0], sp.shape[1]
    ci, co = bundle.c_in, bundle.c_out
    w = sp.transpose(4, 0, 3, 1, 2).reshape((co * n_out, ci, k, k))
    out = T.conv2d(data, w, padding=padding)
    n, _, hh, ww = out.shape
    return _wrap_out(out.reshape((n, co, n_out, hh, ww)), out_grids)


def group_conv_dense(
    f: GFeatureMap,
    dense: T.DiffTensor,
    out_grids: tuple[lie.SubgroupGrid, ...],
    dets: np.ndarray,
    padding: str = "zero",
) -> GFeatureMap:
    """Direct double sum with a dense kernel (n_out, n_in, k, k, ci, co).

    The reference path every factorized executor is checked against:
    flatten (channel, subgroup) pairs and run one stride-1 convolution.
    """
    n_out, n_in, k, _, ci, co = dense.shape
    x = _flat_h(f)
    if x.shape[1] != ci or x.shape[2] != n_in:
        raise ValueError(
            f"feature ({x.shape[1]} ch, {x.shape[2]} grid) incompatible with "
            f"kernel ({ci} ch, {n_in} grid)"
        )
    n, _, _, hh, ww = x.shape
    w = _fold_inv_dets(dense, dets)
    w = w.transpose(5, 0, 4, 1, 2, 3).reshape((co * n_out, ci * n_in, k, k))
    out = T.conv2d(x.reshape((n, ci * n_in, hh, ww)), w, padding=padding)
    return _wrap_out(out.reshape((n, co, n_out, hh, ww)), out_grids)


def group_conv(
    f: GFeatureMap,
    bundle: kn.KernelBundle,
    out_grids: tuple[lie.SubgroupGrid, ...],
    stencil: int,
    padding: str = "zero",
    scale_support: int | None = 2,
) -> GFeatureMap:
    """Group convolution via the dense (non-factorized) execution path.

    The kernel bundle may use any factorization; its factor product is
    materialized into a dense kernel first, so this is the reference
    executor as well as the Nonseparable one.
    """
    if bundle.kind == "lift":
        raise ValueError("group_conv needs a feature-map kernel; use lift_conv for images")
    _check_feature(f, bundle)
    _check_grids(bundle.group_tag, out_grids, "output")
    sk = kn.sample_kernel_grid(bundle, stencil, out_grids, f.grids, scale_support)
    dense = kn.materialize_full_kernel(sk)
    return group_conv_dense(f, dense, out_grids, sk.dets, padding)


def separable_group_conv(
    f: GFeatureMap,
    bundle: kn.KernelBundle,
    out_grids: tuple[lie.SubgroupGrid, ...],
    stencil: int,
    padding: str = "zero",
    scale_support: int | None = 2,
) -> GFeatureMap:
    """Two-stage factorized group convolution.

    Stage 1 contracts the input subgroup axis (and, depending on the
    factorization, the channel axis) pointwise in space; stage 2 is a
    per-(channel, h) spatial convolution with the transformed planar
    factor scaled by 1/|h|.
    """
    if bundle.kind not in SEPARABLE_KINDS:
        raise ValueError(f"unsupported factorization {bundle.kind!r} for separable path")
    _check_feature(f, bundle)
    _check_grids(bundle.group_tag, out_grids, "output")
    sk = kn.sample_kernel_grid(bundle, stencil, out_grids, f.grids, scale_support)
    x = _flat_h(f)
    exec_fn = {
        "Separable": _exec_separable,
        "Gseparable": _exec_gseparable,
        "DGseparable": _exec_dgseparable,
        "Dseparable": _exec_dseparable,
    }[bundle.kind]
    return _wrap_out(exec_fn(x, sk, padding), out_grids)


def _spatial_depthwise(s1: T.DiffTensor, sk: kn.SampledKernel, padding: str) -> T.DiffTensor:
    """Per-(channel, h) conv of (N, co, n_out, H, W) with (n_out, k, k, co)."""
    n, co, n_out, hh, ww = s1.shape
    k = sk.stencil
    w = _fold_inv_dets(sk.factors["spatial"], sk.dets)
    w = w.transpose(3, 0, 1, 2).reshape((co * n_out, 1, k, k))
    out = T.conv2d_grouped(s1.reshape((n, co * n_out, 1, hh, ww)), w, padding=padding)
    return out.reshape((n, co, n_out, hh, ww))


def _channel_mix(x: T.DiffTensor, channel: T.DiffTensor) -> T.DiffTensor:
    """1x1 channel mixing: (N, ci, n_in, H, W) @ (ci, co) -> (N, co, n_in, H, W)."""
    n, ci, n_in, hh, ww = x.shape
    co = channel.shape[1]
    xt = x.transpose(0, 2, 3, 4, 1).reshape((n * n_in * hh * ww, ci))
    mixed = T.matmul(xt, channel)
    return mixed.reshape((n, n_in, hh, ww, co)).transpose(0, 4, 1, 2, 3)


def _exec_separable(x: T.DiffTensor, sk: kn.SampledKernel, padding: str) -> T.DiffTensor:
    sub = sk.factors["subgroup"]  # (n_out, n_in, ci, co)
    n, ci, n_in, hh, ww = x.shape
    n_out, co = sub.shape[0], sub.shape[3]
    xt = x.transpose(0, 3, 4, 1, 2).reshape((n * hh * ww, ci * n_in))
    kh = sub.transpose(2, 1, 3, 0).reshape((ci * n_in, co * n_out))
    s1 = T.matmul(xt, kh).reshape((n, hh, ww, co, n_out)).transpose(0, 3, 4, 1, 2)
    return _spatial_depthwise(s1, sk, padding)


def _exec_gseparable(x: T.DiffTensor, sk: kn.SampledKernel, padding: str) -> T.DiffTensor:
    sub = sk.factors["subgroup"]  # (n_out, n_in, ci, co)
    n, ci, n_in, hh, ww = x.shape
    n_out, co = sub.shape[0], sub.shape[3]
    k = sk.stencil
    xt = x.transpose(1, 0, 3, 4, 2).reshape((ci, n * hh * ww, n_in))
    kh = sub.transpose(2, 1, 3, 0).reshape((ci, n_in, co * n_out))
    s1 = T.matmul(xt, kh).reshape((ci, n, hh, ww, co, n_out)).transpose(1, 4, 5, 0, 2, 3)
    w = _fold_inv_dets(sk.factors["spatial"], sk.dets)  # (n_out, k, k, ci, co)
    w = w.transpose(4, 0, 3, 1, 2).reshape((co * n_out, ci, k, k))
    out = T.conv2d_grouped(s1.reshape((n, co * n_out, ci, hh, ww)), w, padding=padding)
    return out.reshape((n, co, n_out, hh, ww))


def _exec_dgseparable(x: T.DiffTensor, sk: kn.SampledKernel, padding: str) -> T.DiffTensor:
    sub = sk.factors["subgroup"]  # (n_out, n_in, co)
    n, _, n_in, hh, ww = x.shape
    n_out, co = sub.shape[0], sub.shape[2]
    a1 = _channel_mix(x, sk.factors["channel"])
    xt = a1.transpose(1, 0, 3, 4, 2).reshape((co, n * hh * ww, n_in))
    kh = sub.transpose(2, 1, 0)  # (co, n_in, n_out)
    s1 = T.matmul(xt, kh).reshape((co, n, hh, ww, n_out)).transpose(1, 0, 4, 2, 3)
    return _spatial_depthwise(s1, sk, padding)


def _exec_dseparable(x: T.DiffTensor, sk: kn.SampledKernel, padding: str) -> T.DiffTensor:
    full = sk.factors["full"]  # (n_out, n_in, k, k, co)
    n_out, co = full.shape[0], full.shape[4]
    a1 = _channel_mix(x, sk.factors["channel"])  # (N, co, n_in, H, W)
    w = _fold_inv_dets(full, sk.dets)
    outs = []
    for a in range(n_out):
        wa = T.index_axis0(w, a).transpose(3, 0, 1, 2)  # (co, n_in, k, k)
        outs.append(T.conv2d_grouped(a1, wa, padding=padding))  # (N, co, H, W)
    return T.stack(outs, axis=2)


def h_separable_conv(
    f: GFeatureMap,
    bundle: kn.KernelBundle,
    out_grids: tuple[lie.SubgroupGrid, ...],
    stencil: int,
    padding: str = "zero",
    scale_support: int | None = 2,
) -> GFeatureMap:
    """Three-stage factorized convolution for the rotation-dilation group.

    Contract the dilation axis (channel-mixing, support-windowed), then
    the rotation axis (per channel), then convolve spatially per
    (channel, rotation, dilation) with 1/|h| = 1/s^2.
    """
    if bundle.kind != "HSeparable":
        raise ValueError(f"h_separable_conv needs 'HSeparable', got {bundle.kind!r}")
    if bundle.group_tag != "Sim2":
        raise ValueError("the three-stage path exists only on the rotation-dilation group")
    _check_feature(f, bundle)
    _check_grids(bundle.group_tag, out_grids, "output")
    sk = kn.sample_kernel_grid(bundle, stencil, out_grids, f.grids, scale_support)

    x = f.data  # (N, ci, nt_i, ns_i, H, W)
    n, ci, nt_i, ns_i, hh, ww = x.shape
    scale = sk.factors["scale"]  # (ns_o, ns_i, ci, co)
    rot = sk.factors["rotation"]  # (nt_o, nt_i, co)
    ns_o, nt_o = scale.shape[0], rot.shape[0]
    co = bundle.c_out

    xt = x.transpose(0, 2, 4, 5, 1, 3).reshape((n * nt_i * hh * ww, ci * ns_i))
    ks = scale.transpose(2, 1, 3, 0).reshape((ci * ns_i, co * ns_o))
    s1 = T.matmul(xt, ks).reshape((n, nt_i, hh, ww, co, ns_o)).transpose(0, 4, 1, 5, 2, 3)
    # (N, co, nt_i, ns_o, H, W)

    xt2 = s1.transpose(1, 0, 3, 4, 5, 2).reshape((co, n * ns_o * hh * ww, nt_i))
    kr = rot.transpose(2, 1, 0)  # (co, nt_i, nt_o)
    s2 = T.matmul(xt2, kr).reshape((co, n, ns_o, hh, ww, nt_o)).transpose(1, 0, 5, 2, 3, 4)
    # (N, co, nt_o, ns_o, H, W)

    s3 = _spatial_depthwise(s2.reshape((n, co, nt_o * ns_o, hh, ww)), sk, padding)
    return _wrap_out(s3, out_grids)


def shortcut_conv(
    f: GFeatureMap,
    bundle: kn.KernelBundle,
    out_grids: tuple[lie.SubgroupGrid, ...],
    scale_support: int | None = 2,
) -> GFeatureMap:
    """1x1 group convolution: subgroup-and-channel contraction only."""
    if bundle.kind != "shortcut":
        raise ValueError(f"shortcut_conv needs a 'shortcut' bundle, got {bundle.kind!r}")
    _check_feature(f, bundle)
    _check_grids(bundle.group_tag, out_grids, "output")
    sk = kn.sample_kernel_grid(bundle, 1, out_grids, f.grids, scale_support)
    sub = _fold_inv_dets(sk.factors["subgroup"], sk.dets)  # (n_out, n_in, ci, co)
    x = _flat_h(f)
    n, ci, n_in, hh, ww = x.shape
    n_out, co = sub.shape[0], sub.shape[3]
    xt = x.transpose(0, 3, 4, 1, 2).reshape((n * hh * ww, ci * n_in))
    kh = sub.transpose(2, 1, 3, 0).reshape((ci * n_in, co * n_out))
    s1 = T.matmul(xt, kh).reshape((n, hh, ww, co, n_out)).transpose(0, 3, 4, 1, 2)
    return _wrap_out(s1, out_grids)


def invariant_project(f: GFeatureMap, mode: str = "max", axes: str = "h+spatial") -> T.DiffTensor:
    """Reduce the H axes (and optionally space) to H-invariant features."""
    if not f.grids:
        raise ValueError("feature map has no H axis to project over")
    if axes not in ("h", "h+spatial"):
        raise ValueError(f"axes must be 'h' or 'h+spatial', got {axes!r}")
    nd = f.data.ndim
    h_axes = tuple(range(2, nd - 2))
    reduce_axes = h_axes if axes == "h" else h_axes + (nd - 2, nd - 1)
    try:
        op = {"max": T.reduce_max, "mean": T.reduce_mean, "sum": T.reduce_sum}[mode]
    except KeyError:
        raise ValueError(f"mode must be max|mean|sum, got {mode!r}") from None
    return op(f.data, axes=reduce_axes)


# ---------------------------------------------------------------------------
# cost model


def flop_estimate(
    kind: str,
    batch: int = 1,
    c_in: int = 1,
    c_out: int = 1,
    n_h_in: int | tuple[int, int] = 1,
    n_h_out: int | tuple[int, int] = 1,
    stencil: int = 1,
    height: int = 1,
    width: int = 1,
    seconds: float | None = None,
) -> CostReport:
    """Closed-form multiply-accumulate count of one convolution.

    ``n_h_in``/``n_h_out`` are flat subgroup-grid sizes; pass
    (n_rotations, n_dilations) pairs for the three-stage factorization.
    The instrumented executors report exactly these counts.
    """
    p = batch * height * width
    if kind == "HSeparable":
        nt_i, ns_i = n_h_in
        nt_o, ns_o = n_h_out
        macs = (
            p * nt_i * c_in * ns_i * c_out * ns_o
            + p * c_out * ns_o * nt_i * nt_o
            + p * c_out * nt_o * ns_o * stencil**2
        )
        n_h_in, n_h_out = nt_i * ns_i, nt_o * ns_o
    else:
        n_i = int(np.prod(n_h_in))
        n_o = int(np.prod(n_h_out))
        k2 = stencil**2
        if kind == "lift":
            macs = p * c_out * n_o * c_in * k2
        elif kind == "Nonseparable":
            macs = p * c_out * n_o * c_in * n_i * k2
        elif kind == "Separable":
            macs = p * c_out * n_o * (c_in * n_i + k2)
        elif kind == "Gseparable":
            macs = p * c_out * n_o * c_in * (n_i + k2)
        elif kind == "DGseparable":
            macs = p * (n_i * c_in * c_out + c_out * n_i * n_o + c_out * n_o * k2)
        elif kind == "Dseparable":
            macs = p * (n_i * c_in * c_out + n_o * c_out * n_i * k2)
        elif kind == "shortcut":
            macs = p * c_in * n_i * c_out * n_o
        else:
            raise ValueError(f"unknown factorization {kind!r}")
        n_h_in, n_h_out = n_i, n_o
    config = {
        "factorization": kind,
        "batch": batch,
        "c_in": c_in,
        "c_out": c_out,
        "n_h_in": n_h_in,
        "n_h_out": n_h_out,
        "stencil": stencil,
        "height": height,
        "width": width,
    }
    return CostReport(macs=int(macs), seconds=seconds, config=config)


def measure_cost(fn, *args, **kwargs) -> tuple[GFeatureMap, CostReport]:
    """Run an executor once, returning its output and measured cost."""
    with T.count_macs() as tally:
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        dt = time.perf_counter() - t0
    return out, CostReport(macs=tally.total, seconds=dt)

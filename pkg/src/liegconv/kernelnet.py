"""Continuous convolution kernels as small sinusoidal networks.

A kernel on the group is a function of Lie algebra coordinates: spatial
offsets (scaled to [-1, 1] over the stencil half-width) and per-subgroup
logarithms (raw, unnormalized).  Transformed kernels are obtained by
re-sampling the network at transformed coordinates h^-1 u, never by
interpolating a sampled array.

The factorization rows decide which networks a layer owns and which
channel indices each factor carries:

===============  ======================================================
Nonseparable     k^{ij}(x, h)
Dseparable       k_C^{ij} * k^j(x, h)
Separable        k_H^{ij}(h) * k_R2^j(x)
Gseparable       k_H^{ij}(h) * k_R2^{ij}(x)
DGseparable      k_C^{ij} * k_H^j(h) * k_R2^j(x)
HSeparable       k_Rplus^{ij}(s) * k_SO2^j(theta) * k_R2^j(x)   (Sim2)
===============  ======================================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import lie
from . import tensor as T

ACTIVATIONS = ("sine", "relu", "leaky_relu", "swish")
FACTORIZATIONS = (
    "Nonseparable",
    "Dseparable",
    "Separable",
    "Gseparable",
    "DGseparable",
    "HSeparable",
)
KINDS = FACTORIZATIONS + ("lift", "shortcut")

_H_DIM = {"SE2": 1, "R2xRplus": 1, "Sim2": 2}


class Siren:
    """MLP with activation(omega0 * (x W + b)) hidden layers and affine output.

    First layer weights are uniform in [-1/fan_in, 1/fan_in], later ones
    uniform in [-sqrt(6/fan_in)/omega0, +sqrt(6/fan_in)/omega0].
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        hidden: tuple[int, ...] = (64, 64),
        omega0: float = 10.0,
        activation: str = "sine",
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.omega0 = float(omega0)
        self.activation = activation
        self.layers: list[tuple[T.DiffTensor, T.DiffTensor]] = []
        dims = (in_dim,) + tuple(hidden) + (out_dim,)
        for li, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            if li == 0:
                bound = 1.0 / fan_in
            else:
                bound = math.sqrt(6.0 / fan_in) / self.omega0
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-1.0, 1.0, size=(fan_out,)) / math.sqrt(fan_in)
            self.layers.append((T.parameter(w, dtype=dtype), T.parameter(b, dtype=dtype)))

    def _act(self, z: T.DiffTensor) -> T.DiffTensor:
        if self.activation == "sine":
            return T.sin(z)
        if self.activation == "relu":
            return T.relu(z)
        if self.activation == "leaky_relu":
            return T.leaky_relu(z)
        return T.swish(z)

    def __call__(self, coords: np.ndarray) -> T.DiffTensor:
        """Evaluate at (m, in_dim) coordinates; returns (m, out_dim)."""
        coords = np.asarray(coords)
        if coords.ndim != 2 or coords.shape[1] != self.in_dim:
            raise ValueError(f"expected (m, {self.in_dim}) coordinates, got {coords.shape}")
        h = T.constant(coords.astype(self.layers[0][0].dtype))
        omega = self.layers[0][0].dtype.type(self.omega0)
        for w, b in self.layers[:-1]:
            h = self._act(T.mul(T.linear(h, w, b), omega))
        w, b = self.layers[-1]
        return T.linear(h, w, b)

    def parameters(self) -> dict[str, T.DiffTensor]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out


@dataclass
class KernelBundle:
    """The networks of one convolution layer, per factorization row."""

    kind: str
    group_tag: str
    c_in: int
    c_out: int
    nets: dict[str, Siren]
    channel: T.DiffTensor | None = None

    def parameters(self) -> dict[str, T.DiffTensor]:
        out = {}
        for key, net in self.nets.items():
            for pname, p in net.parameters().items():
                out[f"{key}.{pname}"] = p
        if self.channel is not None:
            out["channel"] = self.channel
        return out


def make_kernel_bundle(
    kind: str,
    group_tag: str,
    c_in: int,
    c_out: int,
    hidden: tuple[int, ...] = (64, 64),
    omega0: float = 10.0,
    activation: str = "sine",
    rng: np.random.Generator | None = None,
    dtype=np.float64,
) -> KernelBundle:
    if kind not in KINDS:
        raise ValueError(f"unknown kernel kind {kind!r}")
    if group_tag not in _H_DIM:
        raise ValueError(f"unknown group tag {group_tag!r}")
    if kind == "HSeparable" and group_tag != "Sim2":
        raise ValueError("HSeparable requires the Sim2 group")
    rng = rng or np.random.default_rng()
    dh = _H_DIM[group_tag]
    cc = c_in * c_out

    def net(in_dim, out_dim):
        return Siren(in_dim, out_dim, hidden, omega0, activation, rng, dtype)

    nets: dict[str, Siren] = {}
    channel = None
    if kind == "lift":
        nets["spatial"] = net(2, cc)
    elif kind == "Nonseparable":
        nets["full"] = net(2 + dh, cc)
    elif kind == "Dseparable":
        channel = _channel_matrix(c_in, c_out, rng, dtype)
        nets["full"] = net(2 + dh, c_out)
    elif kind == "Separable":
        nets["subgroup"] = net(dh, cc)
        nets["spatial"] = net(2, c_out)
    elif kind == "Gseparable":
        nets["subgroup"] = net(dh, cc)
        nets["spatial"] = net(2, cc)
    elif kind == "DGseparable":
        channel = _channel_matrix(c_in, c_out, rng, dtype)
        nets["subgroup"] = net(dh, c_out)
        nets["spatial"] = net(2, c_out)
    elif kind == "HSeparable":
        nets["scale"] = net(1, cc)
        nets["rotation"] = net(1, c_out)
        nets["spatial"] = net(2, c_out)
    elif kind == "shortcut":
        nets["subgroup"] = net(dh, cc)
    return KernelBundle(kind, group_tag, c_in, c_out, nets, channel)


def _channel_matrix(c_in, c_out, rng, dtype) -> T.DiffTensor:
    bound = math.sqrt(6.0 / (c_in + c_out))
    return T.parameter(rng.uniform(-bound, bound, size=(c_in, c_out)), dtype=dtype)


# -- grids and coordinates ---------------------------------------------------

def stencil_offsets(k: int) -> np.ndarray:
    """(k*k, 2) plane offsets (ux, uy) in kernel index order [dy, dx]."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"stencil size must be odd and positive, got {k}")
    r = k // 2
    dy, dx = np.mgrid[0:k, 0:k]
    return np.stack([dx.reshape(-1) - r, dy.reshape(-1) - r], axis=1).astype(np.float64)


def flat_h_elements(grids: tuple[lie.SubgroupGrid, ...]) -> list[lie.GroupElement]:
    """Flattened combined H elements, rotation-major for Sim2 axis pairs."""
    if len(grids) == 0:
        return [None]
    if len(grids) == 1:
        return list(grids[0].elements)
    rot, scale = grids
    return [
        lie.GroupElement("Sim2", (0.0, 0.0, r.angle, s.scale))
        for r in rot.elements
        for s in scale.elements
    ]


def flat_h_count(grids: tuple[lie.SubgroupGrid, ...]) -> int:
    n = 1
    for g in grids:
        n *= len(g)
    return n


def h_determinants(grids: tuple[lie.SubgroupGrid, ...]) -> np.ndarray:
    els = flat_h_elements(grids)
    if els == [None]:
        return np.ones(1)
    return np.array([lie.determinant(e) for e in els])


def scale_window_mask(
    out_grid: lie.SubgroupGrid, in_grid: lie.SubgroupGrid, support: int
) -> np.ndarray:
    """1 where the relative scale index lies in {0, ..., support-1}.

    Kernel support on the dilation axis is clipped to ``support``
    upward neighbours; pairs outside the window contribute zero.
    """
    step = max(out_grid.spacing[0], in_grid.spacing[0])
    rel = in_grid.algebra[None, :, 0] - out_grid.algebra[:, None, 0]
    if step == 0.0:
        return np.ones_like(rel)
    idx = rel / step
    return ((idx > -0.5) & (idx < support - 0.5)).astype(np.float64)


def _pair_mask(
    out_grids: tuple[lie.SubgroupGrid, ...],
    in_grids: tuple[lie.SubgroupGrid, ...],
    support: int | None,
) -> np.ndarray | None:
    """(n_out, n_in) mask over flattened H pairs, or None when unmasked."""
    if support is None or not in_grids:
        return None
    tags = [g.tag for g in out_grids]
    if tags == ["Rplus"]:
        return scale_window_mask(out_grids[0], in_grids[0], support)
    if tags == ["SO2", "Rplus"]:
        m = scale_window_mask(out_grids[1], in_grids[1], support)
        n_rot_o, n_rot_i = len(out_grids[0]), len(in_grids[0])
        full = np.ones((n_rot_o, m.shape[0], n_rot_i, m.shape[1]))
        full *= m[None, :, None, :]
        return full.reshape(n_rot_o * m.shape[0], n_rot_i * m.shape[1])
    return None


def _relative_coords(
    out_grids: tuple[lie.SubgroupGrid, ...], in_grids: tuple[lie.SubgroupGrid, ...]
) -> np.ndarray:
    """(n_out, n_in, dim_h) algebra coordinates of h_out^-1 h_in."""
    outs = flat_h_elements(out_grids)
    ins = flat_h_elements(in_grids)
    rows = []
    for a in outs:
        rows.append([lie._h_algebra(lie.product(lie.inverse(a), b)) for b in ins])
    return np.asarray(rows)


def _transformed_offsets(h: lie.GroupElement | None, offsets: np.ndarray, k: int) -> np.ndarray:
    r = max(k // 2, 1)
    if h is None:
        return offsets / r
    return lie.act_on_point(lie.inverse(h), offsets) / r


@dataclass
class SampledKernel:
    """Kernel factors evaluated on concrete grids, ready for an executor.

    Factor shapes (n_out/n_in are flattened H sizes):

    * ``spatial``   (n_out, k, k, [c_in,] c_out)
    * ``subgroup``  (n_out, n_in, [c_in,] c_out)
    * ``full``      (n_out, n_in, k, k, [c_in,] c_out)
    * ``scale``     (n_s, n_s, c_in, c_out);  ``rotation`` (n_t, n_t, c_out)
    * ``channel``   (c_in, c_out)
    """

    kind: str
    group_tag: str
    stencil: int
    c_in: int
    c_out: int
    out_grids: tuple[lie.SubgroupGrid, ...]
    in_grids: tuple[lie.SubgroupGrid, ...]
    factors: dict[str, T.DiffTensor]
    dets: np.ndarray
    mask: np.ndarray | None = None


_PAIRED_FACTORS = {
    ("lift", "spatial"),
    ("Gseparable", "spatial"),
    ("Separable", "subgroup"),
    ("Gseparable", "subgroup"),
    ("shortcut", "subgroup"),
    ("Nonseparable", "full"),
    ("HSeparable", "scale"),
}


def _factor_channels(kind: str, name: str, c_in: int, c_out: int) -> tuple[int, ...]:
    """Channel axes a factor carries: (c_in, c_out) or c_out alone."""
    return (c_in, c_out) if (kind, name) in _PAIRED_FACTORS else (c_out,)


def sample_kernel_grid(
    bundle: KernelBundle,
    stencil: int,
    out_grids: tuple[lie.SubgroupGrid, ...],
    in_grids: tuple[lie.SubgroupGrid, ...],
    scale_support: int | None = 2,
) -> SampledKernel:
    """Evaluate the bundle's networks for every output grid element.

    Spatial factors are sampled at h^-1 u over the stencil, subgroup
    factors at log(h^-1 h~) over grid pairs; dilation axes are clipped
    to the scale-support window.
    """
    k = stencil
    offs = stencil_offsets(k)
    outs = flat_h_elements(out_grids)
    n_out = len(outs)
    n_in = flat_h_count(in_grids)
    ci, co = bundle.c_in, bundle.c_out
    factors: dict[str, T.DiffTensor] = {}
    mask = _pair_mask(out_grids, in_grids, scale_support)
    with T.suspend_macs():
        if "spatial" in bundle.nets:
            coords = np.concatenate([_transformed_offsets(h, offs, k) for h in outs])
            out = bundle.nets["spatial"](coords)
            ch = _factor_channels(bundle.kind, "spatial", ci, co)
            factors["spatial"] = out.reshape((n_out, k, k) + ch)
        if "subgroup" in bundle.nets:
            rel = _relative_coords(out_grids, in_grids)
            out = bundle.nets["subgroup"](rel.reshape(n_out * n_in, -1))
            ch = _factor_channels(bundle.kind, "subgroup", ci, co)
            sub = out.reshape((n_out, n_in) + ch)
            if mask is not None:
                sub = T.mul(
                    sub,
                    T.constant(
                        mask.reshape((n_out, n_in) + (1,) * len(ch)).astype(sub.dtype)
                    ),
                )
            factors["subgroup"] = sub
        if "full" in bundle.nets:
            rel = _relative_coords(out_grids, in_grids)
            sp = np.stack([_transformed_offsets(h, offs, k) for h in outs])
            joint = np.concatenate(
                [
                    np.broadcast_to(sp[:, None, :, :], (n_out, n_in, k * k, 2)),
                    np.broadcast_to(rel[:, :, None, :], (n_out, n_in, k * k, rel.shape[-1])),
                ],
                axis=-1,
            )
            out = bundle.nets["full"](joint.reshape(n_out * n_in * k * k, -1))
            ch = _factor_channels(bundle.kind, "full", ci, co)
            full = out.reshape((n_out, n_in, k, k) + ch)
            if mask is not None:
                full = T.mul(
                    full,
                    T.constant(
                        mask.reshape((n_out, n_in, 1, 1) + (1,) * len(ch)).astype(
                            full.dtype
                        )
                    ),
                )
            factors["full"] = full
        if "scale" in bundle.nets:
            rot_o, sc_o = out_grids
            rot_i, sc_i = in_grids
            rel_s = sc_i.algebra[None, :, 0] - sc_o.algebra[:, None, 0]
            ns_o, ns_i = len(sc_o), len(sc_i)
            out = bundle.nets["scale"](rel_s.reshape(-1, 1))
            sc = out.reshape(ns_o, ns_i, ci, co)
            smask = scale_window_mask(sc_o, sc_i, scale_support) if scale_support else None
            if smask is not None:
                sc = T.mul(sc, T.constant(smask[:, :, None, None].astype(sc.dtype)))
            factors["scale"] = sc
            rel_t = (rot_i.algebra[None, :, 0] - rot_o.algebra[:, None, 0]) % lie.TWO_PI
            out = bundle.nets["rotation"](rel_t.reshape(-1, 1))
            factors["rotation"] = out.reshape(len(rot_o), len(rot_i), co)
        if bundle.channel is not None:
            factors["channel"] = bundle.channel
    return SampledKernel(
        bundle.kind,
        bundle.group_tag,
        k,
        ci,
        co,
        out_grids,
        in_grids,
        factors,
        h_determinants(out_grids),
        mask,
    )


def sample_kernel(
    bundle: KernelBundle,
    stencil: int,
    in_grids: tuple[lie.SubgroupGrid, ...],
    transform: lie.GroupElement,
    scale_support: int | None = 2,
) -> SampledKernel:
    """Factors for a single output transform h; no leading n_out axis."""
    out_grids = _singleton_grids(transform, in_grids)
    sk = sample_kernel_grid(bundle, stencil, out_grids, in_grids, scale_support)
    squeezed = {}
    for name, f in sk.factors.items():
        if name != "channel" and f.shape[0] == 1:
            squeezed[name] = f.reshape(f.shape[1:])
        else:
            squeezed[name] = f
    sk.factors = squeezed
    return sk


def _singleton_grids(
    transform: lie.GroupElement, in_grids: tuple[lie.SubgroupGrid, ...]
) -> tuple[lie.SubgroupGrid, ...]:
    if len(in_grids) == 1:
        g = in_grids[0]
        el = transform
        if el.tag != g.tag:
            raise ValueError(f"transform tag {el.tag} does not match grid tag {g.tag}")
        return (
            lie.SubgroupGrid(
                g.tag, (el,), lie._h_algebra(el)[None, :], g.spacing, g.truncation
            ),
        )
    rot, scale = in_grids
    r_el = lie.GroupElement("SO2", (transform.angle,))
    s_el = lie.GroupElement("Rplus", (transform.scale,))
    return (
        lie.SubgroupGrid("SO2", (r_el,), np.array([[r_el.angle]]), rot.spacing),
        lie.SubgroupGrid(
            "Rplus",
            (s_el,),
            np.array([[math.log(s_el.scale)]]),
            scale.spacing,
            scale.truncation,
        ),
    )


def materialize_full_kernel(sk: SampledKernel) -> T.DiffTensor:
    """Dense (n_out, n_in, k, k, c_in, c_out) kernel from the factor product.

    Test-oracle path: the factorized executors never build this tensor.
    """
    n_out = flat_h_count(sk.out_grids) if sk.out_grids else 1
    n_in = flat_h_count(sk.in_grids) if sk.in_grids else 1
    k, ci, co = sk.stencil, sk.c_in, sk.c_out
    f = sk.factors
    kind = sk.kind
    if kind == "Nonseparable":
        return f["full"]
    if kind == "Dseparable":
        full = f["full"].reshape((n_out, n_in, k, k, 1, co))
        return T.mul(full, f["channel"].reshape((1, 1, 1, 1, ci, co)))
    if kind == "Separable":
        sub = f["subgroup"].reshape((n_out, n_in, 1, 1, ci, co))
        sp = f["spatial"].reshape((n_out, 1, k, k, 1, co))
        return T.mul(sub, sp)
    if kind == "Gseparable":
        sub = f["subgroup"].reshape((n_out, n_in, 1, 1, ci, co))
        sp = f["spatial"].reshape((n_out, 1, k, k, ci, co))
        return T.mul(sub, sp)
    if kind == "DGseparable":
        sub = f["subgroup"].reshape((n_out, n_in, 1, 1, 1, co))
        sp = f["spatial"].reshape((n_out, 1, k, k, 1, co))
        return T.mul(T.mul(sub, sp), f["channel"].reshape((1, 1, 1, 1, ci, co)))
    if kind == "HSeparable":
        nt_o, ns_o = len(sk.out_grids[0]), len(sk.out_grids[1])
        nt_i, ns_i = len(sk.in_grids[0]), len(sk.in_grids[1])
        sc = f["scale"].reshape((1, ns_o, 1, ns_i, 1, 1, ci, co))
        rot = f["rotation"].reshape((nt_o, 1, nt_i, 1, 1, 1, 1, co))
        sp = f["spatial"].reshape((nt_o, ns_o, 1, 1, k, k, 1, co))
        dense = T.mul(T.mul(sc, rot), sp)
        return dense.reshape((nt_o * ns_o, nt_i * ns_i, k, k, ci, co))
    if kind == "shortcut":
        return f["subgroup"].reshape((n_out, n_in, 1, 1, ci, co))
    raise ValueError(f"cannot materialize kind {kind!r}")

"""Affine Lie groups acting on the plane.

Supported groups are the plane R2, the circle SO2, the dilations Rplus,
and the three semidirect products built from them:

* ``SE2``      roto-translations  (x, y, theta)
* ``R2xRplus`` dilation-translations  (x, y, s)
* ``Sim2``     similarities  (x, y, theta, s)

Elements are stored in canonical coordinates: angles in [0, 2*pi),
scales strictly positive.  The exponential and logarithmic maps are
taken per subgroup (identity on R2, angle on SO2, log-scale on Rplus),
so algebra coordinates of a product group are the concatenation of the
factor coordinates.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

_PARAM_NAMES: dict[str, tuple[str, ...]] = {
    "R2": ("x", "y"),
    "SO2": ("theta",),
    "Rplus": ("s",),
    "SE2": ("x", "y", "theta"),
    "R2xRplus": ("x", "y", "s"),
    "Sim2": ("x", "y", "theta", "s"),
}

GROUP_TAGS = tuple(_PARAM_NAMES)

_HAS_ANGLE = frozenset({"SO2", "SE2", "Sim2"})
_HAS_SCALE = frozenset({"Rplus", "R2xRplus", "Sim2"})
_HAS_TRANSLATION = frozenset({"R2", "SE2", "R2xRplus", "Sim2"})


def _canonical_angle(theta: float) -> float:
    theta = math.fmod(theta, TWO_PI)
    if theta < 0.0:
        theta += TWO_PI
    if theta >= TWO_PI:
        theta = 0.0
    return theta


@dataclass(frozen=True)
class GroupElement:
    """A group element tagged with the group it belongs to.

    ``params`` holds the canonical coordinates in the order given by
    the tag: translation first, then angle, then scale.
    """

    tag: str
    params: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.tag not in _PARAM_NAMES:
            raise ValueError(f"unknown group tag {self.tag!r}")
        names = _PARAM_NAMES[self.tag]
        if len(self.params) != len(names):
            raise ValueError(
                f"{self.tag} expects {len(names)} parameters {names}, "
                f"got {len(self.params)}"
            )
        params = [float(p) for p in self.params]
        for name, value in zip(names, params):
            if not math.isfinite(value):
                raise ValueError(f"{self.tag} parameter {name} is not finite")
        if self.tag in _HAS_ANGLE:
            i = names.index("theta")
            params[i] = _canonical_angle(params[i])
        if self.tag in _HAS_SCALE:
            i = names.index("s")
            if params[i] <= 0.0:
                raise ValueError(f"{self.tag} scale must be positive, got {params[i]}")
        object.__setattr__(self, "params", tuple(params))

    @property
    def translation(self) -> np.ndarray:
        if self.tag in _HAS_TRANSLATION:
            return np.asarray(self.params[:2], dtype=np.float64)
        return np.zeros(2, dtype=np.float64)

    @property
    def angle(self) -> float:
        if self.tag in _HAS_ANGLE:
            return self.params[_PARAM_NAMES[self.tag].index("theta")]
        return 0.0

    @property
    def scale(self) -> float:
        if self.tag in _HAS_SCALE:
            return self.params[_PARAM_NAMES[self.tag].index("s")]
        return 1.0


def identity(tag: str) -> GroupElement:
    """Identity element of the tagged group."""
    vals = {"x": 0.0, "y": 0.0, "theta": 0.0, "s": 1.0}
    return GroupElement(tag, tuple(vals[n] for n in _PARAM_NAMES[tag]))


def _assemble(tag: str, x: np.ndarray, theta: float, s: float) -> GroupElement:
    vals = {"x": float(x[0]), "y": float(x[1]), "theta": theta, "s": s}
    return GroupElement(tag, tuple(vals[n] for n in _PARAM_NAMES[tag]))


def linear_part(g: GroupElement) -> np.ndarray:
    """2x2 matrix of the element's action on the plane (scale times rotation)."""
    c, si = math.cos(g.angle), math.sin(g.angle)
    return g.scale * np.array([[c, -si], [si, c]], dtype=np.float64)


def product(g1: GroupElement, g2: GroupElement) -> GroupElement:
    """Group product g1 * g2.

    For the semidirect products the translation of ``g2`` is first
    transformed by the rotation/dilation part of ``g1``:
    (x1, h1) * (x2, h2) = (h1 x2 + x1, h1 h2).
    """
    if g1.tag != g2.tag:
        raise ValueError(f"cannot multiply {g1.tag} by {g2.tag}")
    x = linear_part(g1) @ g2.translation + g1.translation
    theta = _canonical_angle(g1.angle + g2.angle)
    s = g1.scale * g2.scale
    return _assemble(g1.tag, x, theta, s)


def inverse(g: GroupElement) -> GroupElement:
    """Group inverse: (x, h)^-1 = (-h^-1 x, h^-1)."""
    theta = _canonical_angle(-g.angle)
    s = 1.0 / g.scale
    c, si = math.cos(-g.angle), math.sin(-g.angle)
    minv = (1.0 / g.scale) * np.array([[c, -si], [si, c]], dtype=np.float64)
    x = -(minv @ g.translation)
    return _assemble(g.tag, x, theta, s)


def algebra_dim(tag: str) -> int:
    """Dimension of the Lie algebra coordinate vector for the tag."""
    return len(_PARAM_NAMES[tag])


def exp_map(tag: str, v: np.ndarray) -> GroupElement:
    """Per-subgroup exponential: identity on R2, angle on SO2, exp on Rplus.

    ``v`` is the algebra coordinate vector in tag order (translation,
    angle, log-scale).
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    names = _PARAM_NAMES[tag]
    if v.shape[0] != len(names):
        raise ValueError(f"{tag} algebra vector needs {len(names)} entries, got {v.shape[0]}")
    vals: dict[str, float] = {"x": 0.0, "y": 0.0, "theta": 0.0, "s": 1.0}
    for name, vi in zip(names, v):
        if name == "theta":
            vals["theta"] = float(vi)
        elif name == "s":
            vals["s"] = math.exp(float(vi))
        else:
            vals[name] = float(vi)
    return GroupElement(tag, tuple(vals[n] for n in names))


def log_map(g: GroupElement) -> np.ndarray:
    """Per-subgroup logarithm, inverse of :func:`exp_map` on canonical elements."""
    out = []
    for name, value in zip(_PARAM_NAMES[g.tag], g.params):
        if name == "s":
            out.append(math.log(value))
        else:
            out.append(value)
    return np.asarray(out, dtype=np.float64)


def act_on_point(g: GroupElement, p: np.ndarray) -> np.ndarray:
    """Affine action on plane points: p -> M_g p + x_g.

    ``p`` has shape (..., 2); the result has the same shape.  Pure
    subgroup elements (SO2, Rplus) act linearly, translations shift.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 2:
        raise ValueError(f"points must have a trailing axis of size 2, got shape {p.shape}")
    return p @ linear_part(g).T + g.translation


def determinant(g: GroupElement) -> float:
    """Determinant of the 2x2 linear action; the Jacobian of x -> M_g x."""
    return g.scale * g.scale


def relative_algebra(out_el: GroupElement, in_el: GroupElement) -> np.ndarray:
    """Algebra coordinates of out^-1 * in, the kernel argument h^-1 h~."""
    return log_map(product(inverse(out_el), in_el))


@dataclass(frozen=True)
class SubgroupGrid:
    """A finite grid on a subgroup H, with cached algebra coordinates.

    ``spacing`` is the step between neighbouring algebra coordinates
    (radians for SO2, log-scale units for Rplus).  For Sim2 grids the
    per-factor grids are kept in ``factors`` (rotation, scale) and the
    elements enumerate the Cartesian product rotation-major.
    """

    tag: str
    elements: tuple[GroupElement, ...]
    algebra: np.ndarray
    spacing: tuple[float, ...]
    truncation: float | None = None
    factors: tuple["SubgroupGrid", ...] = ()

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def n(self) -> int:
        return len(self.elements)


def _so2_grid(n: int) -> SubgroupGrid:
    step = TWO_PI / n
    coords = np.arange(n, dtype=np.float64) * step
    elems = tuple(GroupElement("SO2", (float(t),)) for t in coords)
    return SubgroupGrid("SO2", elems, coords[:, None].copy(), (step,))


def _rplus_grid(n: int, truncation: float) -> SubgroupGrid:
    if n == 1:
        coords = np.zeros(1, dtype=np.float64)
        step = 0.0
    else:
        if truncation is None or truncation <= 1.0:
            raise ValueError("Rplus grids with n > 1 need a truncation > 1")
        step = math.log(truncation) / (n - 1)
        coords = np.arange(n, dtype=np.float64) * step
    elems = tuple(GroupElement("Rplus", (math.exp(float(v)),)) for v in coords)
    return SubgroupGrid("Rplus", elems, coords[:, None].copy(), (step,), truncation)


def uniform_grid(tag: str, n: int | tuple[int, int], truncation: float | None = None) -> SubgroupGrid:
    """Grid of n equidistant Lie algebra points mapped through exp.

    SO2 grids cover the full circle starting at 0.  Rplus grids start
    at scale 1 and extend upward in log-space to ``truncation``.  Sim2
    grids are the Cartesian product of the two; ``n`` may then be a
    (n_rotations, n_scales) pair.
    """
    if tag == "SO2":
        if not isinstance(n, int) or n < 1:
            raise ValueError("SO2 grid size must be a positive int")
        return _so2_grid(n)
    if tag == "Rplus":
        if not isinstance(n, int) or n < 1:
            raise ValueError("Rplus grid size must be a positive int")
        return _rplus_grid(n, truncation)
    if tag == "Sim2":
        if isinstance(n, int):
            n_rot, n_scale = n, n
        else:
            n_rot, n_scale = n
        rot = _so2_grid(n_rot)
        scale = _rplus_grid(n_scale, truncation)
        elems = []
        coords = []
        for re_, rv in zip(rot.elements, rot.algebra):
            for se, sv in zip(scale.elements, scale.algebra):
                elems.append(GroupElement("Sim2", (0.0, 0.0, re_.angle, se.scale)))
                coords.append([rv[0], sv[0]])
        return SubgroupGrid(
            "Sim2",
            tuple(elems),
            np.asarray(coords, dtype=np.float64),
            (rot.spacing[0], scale.spacing[0]),
            truncation,
            (rot, scale),
        )
    raise ValueError(f"no subgroup grid for tag {tag!r}")


def _left_translate(grid: SubgroupGrid, h_eps: GroupElement) -> tuple[GroupElement, ...]:
    return tuple(product(h_eps, el) for el in grid.elements)


def random_perturb(
    grid: SubgroupGrid,
    rng: np.random.Generator,
    allow_noncompact: bool = False,
) -> SubgroupGrid:
    """Left-multiply every grid element by one shared random h_eps.

    For SO2 the perturbation is uniform over the circle.  Dilations are
    not compact, so perturbing an Rplus grid (or the scale factor of a
    Sim2 grid) is refused unless ``allow_noncompact`` is set; the
    override draws a log-scale offset uniformly from one grid cell.
    """
    if grid.tag == "SO2":
        h_eps = GroupElement("SO2", (float(rng.uniform(0.0, TWO_PI)),))
    elif grid.tag == "Rplus":
        if not allow_noncompact:
            raise ValueError("random perturbation of a noncompact Rplus grid needs allow_noncompact=True")
        h_eps = GroupElement("Rplus", (math.exp(float(rng.uniform(0.0, grid.spacing[0]))),))
    elif grid.tag == "Sim2":
        theta = float(rng.uniform(0.0, TWO_PI))
        if allow_noncompact and grid.spacing[1] > 0.0:
            s = math.exp(float(rng.uniform(0.0, grid.spacing[1])))
        else:
            s = 1.0
        h_eps = GroupElement("Sim2", (0.0, 0.0, theta, s))
    else:
        raise ValueError(f"cannot perturb grid with tag {grid.tag!r}")
    elems = _left_translate(grid, h_eps)
    algebra = np.stack([_h_algebra(el) for el in elems])
    factors = tuple(
        dataclasses.replace(
            f,
            elements=tuple(product(_factor_eps(f.tag, h_eps), el) for el in f.elements),
            algebra=np.stack([_h_algebra(product(_factor_eps(f.tag, h_eps), el)) for el in f.elements]),
        )
        for f in grid.factors
    )
    return dataclasses.replace(grid, elements=elems, algebra=algebra, factors=factors)


def _factor_eps(tag: str, h_eps: GroupElement) -> GroupElement:
    if tag == "SO2":
        return GroupElement("SO2", (h_eps.angle,))
    return GroupElement("Rplus", (h_eps.scale,))


def _h_algebra(el: GroupElement) -> np.ndarray:
    """Algebra coordinates of the non-translation part of an element."""
    coords = []
    for name, value in zip(_PARAM_NAMES[el.tag], el.params):
        if name == "theta":
            coords.append(value)
        elif name == "s":
            coords.append(math.log(value))
    return np.asarray(coords, dtype=np.float64)

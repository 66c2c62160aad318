"""Ultraweak first-order formulations: Poisson, Stokes (velocity-gradient-
pressure), and linearized Navier-Stokes.

A formulation is a flat list of scalar-component terms:

* ``VolumeTerm(field, fc, test, tc, deriv, coeff)`` contributes
  ``(coeff * field_fc, D_deriv test_tc)`` to the bilinear form.  Because the
  trial fields carry no derivatives, the very same records read as the
  adjoint ``L*``: grouping them by (field, fc) yields the graph-norm
  integrand ``|L* v|^2 + beta |v|^2``.
* ``FaceTerm`` pairs a trace component with a test component on element
  boundaries; ``signed`` traces are stored against the global face normal,
  ``normal_axis`` terms pick up the outward normal component.
* ``trace_defs`` record what combination of fields each trace variable is a
  trace of; multigrid prolongation uses them to fill the traces on faces
  that only exist on the fine grid.

Coefficients are constants or background-field samples (``BgValue``,
``BgProduct``), which is how the Newton linearization enters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "FieldVar", "TraceVar", "TestVar",
    "VolumeTerm", "FaceTerm", "LoadTerm", "BgLoadTerm",
    "BgValue", "BgProduct",
    "FormDescriptor", "ProblemSpec",
    "poisson_form", "stokes_vgp_form", "navier_stokes_linearized_form",
    "graph_gram_integrand", "manufactured_solution",
    "cavity_problem", "kovasznay_lambda",
]


@dataclass(frozen=True)
class FieldVar:
    name: str
    ncomp: int


@dataclass(frozen=True)
class TraceVar:
    name: str
    kind: str          # 'h1' (order k+1) or 'flux' (order k)
    ncomp: int

    def order(self, k: int) -> int:
        return k + 1 if self.kind == "h1" else k


@dataclass(frozen=True)
class TestVar:
    name: str
    ncomp: int


@dataclass(frozen=True)
class BgValue:
    """Background field component sampled at quadrature points, times scale."""
    var: str
    comp: int
    scale: float = 1.0


@dataclass(frozen=True)
class BgProduct:
    """Product of two background components, times scale."""
    var1: str
    comp1: int
    var2: str
    comp2: int
    scale: float = 1.0


Coeff = Union[float, BgValue, BgProduct]


@dataclass(frozen=True)
class VolumeTerm:
    field: str
    fcomp: int
    test: str
    tcomp: int
    deriv: Optional[int]      # None: value pairing; int: d/dx_axis on the test
    coeff: Coeff = 1.0


@dataclass(frozen=True)
class FaceTerm:
    trace: str
    trcomp: int
    test: str
    tcomp: int
    normal_axis: Optional[int]   # multiply by outward normal component
    signed: bool                 # trace stored against the global face normal
    coeff: float = 1.0


@dataclass(frozen=True)
class LoadTerm:
    test: str
    tcomp: int
    value: Union[float, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class BgLoadTerm:
    test: str
    tcomp: int
    coeff: Coeff


@dataclass(frozen=True)
class FormDescriptor:
    name: str
    dim: int
    fields: tuple[FieldVar, ...]
    traces: tuple[TraceVar, ...]
    tests: tuple[TestVar, ...]
    volume_terms: tuple[VolumeTerm, ...]
    face_terms: tuple[FaceTerm, ...]
    load_terms: tuple[LoadTerm, ...] = ()
    bg_load_terms: tuple[BgLoadTerm, ...] = ()
    subtract_background_rhs: bool = False
    trace_defs: dict = field(default_factory=dict)
    beta: float = 1.0
    needs_background: bool = False

    @property
    def adjoint_terms(self) -> tuple[VolumeTerm, ...]:
        """Terms of L*, obtained by transposing the volume terms."""
        return self.volume_terms

    def field_var(self, name: str) -> FieldVar:
        return next(v for v in self.fields if v.name == name)

    def trace_var(self, name: str) -> TraceVar:
        return next(v for v in self.traces if v.name == name)

    def test_order(self, k: int, delta_k: int) -> int:
        return k + 1 + delta_k

    @property
    def cacheable(self) -> bool:
        """Element matrices depend only on (cell size, order)."""
        if self.needs_background:
            return False
        return all(not callable(t.value) for t in self.load_terms)


def graph_gram_integrand(form: FormDescriptor):
    """Adjoint terms grouped per trial field component, plus the beta weight.

    The Gram integrand is sum_fc |L*_fc v|^2 + beta |v|^2, where each group
    lists (test, tcomp, deriv, coeff) contributions to L*_fc.
    """
    if form.beta <= 0:
        raise ValueError("graph norm requires beta > 0")
    groups: dict[tuple[str, int], list[VolumeTerm]] = {}
    for t in form.adjoint_terms:
        groups.setdefault((t.field, t.fcomp), []).append(t)
    for fv in form.fields:
        for c in range(fv.ncomp):
            if (fv.name, c) not in groups:
                raise ValueError(f"adjoint terms do not cover field "
                                 f"{fv.name}[{c}]; Gram would be singular")
    return groups, form.beta


# ----------------------------------------------------------------------
# concrete formulations
# ----------------------------------------------------------------------

def poisson_form(dim: int, forcing: Union[float, Callable] = 1.0) -> FormDescriptor:
    """Ultraweak Poisson: fields (u, sigma), traces (u_hat, sigma_n)."""
    if dim not in (1, 2):
        raise ValueError("dim must be 1 or 2")
    vol = []
    face = []
    for i in range(dim):
        vol.append(VolumeTerm("sigma", i, "v", 0, deriv=i))
        vol.append(VolumeTerm("sigma", i, "tau", i, deriv=None))
        vol.append(VolumeTerm("u", 0, "tau", i, deriv=i))
        face.append(FaceTerm("u_hat", 0, "tau", i, normal_axis=i,
                             signed=False, coeff=-1.0))
    face.append(FaceTerm("sigma_n", 0, "v", 0, normal_axis=None,
                         signed=True, coeff=-1.0))
    trace_defs = {
        "u_hat": [[("u", 0, None, 1.0)]],
        "sigma_n": [[("sigma", j, j, 1.0) for j in range(dim)]],
    }
    return FormDescriptor(
        name="poisson", dim=dim,
        fields=(FieldVar("u", 1), FieldVar("sigma", dim)),
        traces=(TraceVar("u_hat", "h1", 1), TraceVar("sigma_n", "flux", 1)),
        tests=(TestVar("v", 1), TestVar("tau", dim)),
        volume_terms=tuple(vol), face_terms=tuple(face),
        load_terms=(LoadTerm("v", 0, forcing),),
        trace_defs=trace_defs,
    )


def _stokes_terms(dim: int, mu: float):
    vol = []
    face = []
    for i in range(dim):
        for j in range(dim):
            ij = i * dim + j
            vol.append(VolumeTerm("sigma", ij, "v", i, deriv=j))
            vol.append(VolumeTerm("sigma", ij, "tau", ij, deriv=None))
            vol.append(VolumeTerm("u", i, "tau", ij, deriv=j, coeff=mu))
            # u_hat is the unweighted velocity trace, so the face pairing of
            # the constitutive row carries the viscosity weight
            face.append(FaceTerm("u_hat", i, "tau", ij, normal_axis=j,
                                 signed=False, coeff=-mu))
        vol.append(VolumeTerm("p", 0, "v", i, deriv=i, coeff=-1.0))
        vol.append(VolumeTerm("u", i, "q", 0, deriv=i))
        face.append(FaceTerm("t_n", i, "v", i, normal_axis=None,
                             signed=True, coeff=-1.0))
        face.append(FaceTerm("u_hat", i, "q", 0, normal_axis=i,
                             signed=False, coeff=-1.0))
    trace_defs = {
        "u_hat": [[("u", i, None, 1.0)] for i in range(dim)],
        "t_n": [[("sigma", i * dim + j, j, 1.0) for j in range(dim)]
                + [("p", 0, i, -1.0)] for i in range(dim)],
    }
    return vol, face, trace_defs


def stokes_vgp_form(mu: float, dim: int = 2,
                    forcing: Sequence = (0.0, 0.0)) -> FormDescriptor:
    """Velocity-gradient-pressure Stokes; sigma is the mu-weighted velocity
    gradient, t_n the trace of (sigma - p I) n."""
    if mu <= 0:
        raise ValueError("viscosity must be positive")
    vol, face, trace_defs = _stokes_terms(dim, mu)
    loads = tuple(LoadTerm("v", i, forcing[i]) for i in range(dim)
                  if callable(forcing[i]) or forcing[i] != 0.0)
    return FormDescriptor(
        name="stokes", dim=dim,
        fields=(FieldVar("u", dim), FieldVar("sigma", dim * dim),
                FieldVar("p", 1)),
        traces=(TraceVar("u_hat", "h1", dim), TraceVar("t_n", "flux", dim)),
        tests=(TestVar("v", dim), TestVar("tau", dim * dim), TestVar("q", 1)),
        volume_terms=tuple(vol), face_terms=tuple(face),
        load_terms=loads, trace_defs=trace_defs,
    )


def navier_stokes_linearized_form(re: float, background, dim: int = 2,
                                  forcing: Sequence = (0.0, 0.0)) -> FormDescriptor:
    """Stokes form at mu = 1/Re plus the Newton coupling terms about the
    background flow; the right-hand side carries the full nonlinear residual.

    ``background`` may be None (zero flow), in which case the extra terms
    vanish and the form reduces to Stokes.
    """
    if re <= 0:
        raise ValueError("Reynolds number must be positive")
    mu = 1.0 / re
    vol, face, trace_defs = _stokes_terms(dim, mu)
    bg_loads = []
    for i in range(dim):
        for j in range(dim):
            ij = i * dim + j
            # Re (du . sigma_b, v) and Re (u_b . dsigma, v)
            vol.append(VolumeTerm("u", j, "v", i, deriv=None,
                                  coeff=BgValue("sigma", ij, re)))
            vol.append(VolumeTerm("sigma", ij, "v", i, deriv=None,
                                  coeff=BgValue("u", j, re)))
            # rhs correction: the two linearization terms double-count the
            # background convection once
            bg_loads.append(BgLoadTerm("v", i, BgProduct("u", j, "sigma", ij, re)))
    loads = tuple(LoadTerm("v", i, forcing[i]) for i in range(dim)
                  if callable(forcing[i]) or forcing[i] != 0.0)
    return FormDescriptor(
        name="navier_stokes", dim=dim,
        fields=(FieldVar("u", dim), FieldVar("sigma", dim * dim),
                FieldVar("p", 1)),
        traces=(TraceVar("u_hat", "h1", dim), TraceVar("t_n", "flux", dim)),
        tests=(TestVar("v", dim), TestVar("tau", dim * dim), TestVar("q", 1)),
        volume_terms=tuple(vol), face_terms=tuple(face),
        load_terms=loads, bg_load_terms=tuple(bg_loads),
        subtract_background_rhs=True, trace_defs=trace_defs,
        needs_background=True,
    )


# ----------------------------------------------------------------------
# problems
# ----------------------------------------------------------------------

@dataclass
class ProblemSpec:
    name: str
    dim: int
    domain: tuple[tuple[float, ...], tuple[float, ...]]
    form_factory: Callable          # (background) -> FormDescriptor
    dirichlet: dict                 # trace var -> g(points) -> (n, ncomp)
    exact_fields: Optional[dict] = None
    pressure_pin: Optional[tuple[str, tuple[float, ...]]] = None
    nonlinear: bool = False
    params: dict = field(default_factory=dict)

    def form(self, background=None) -> FormDescriptor:
        if self.nonlinear:
            return self.form_factory(background)
        return self.form_factory()


def kovasznay_lambda(re: float) -> float:
    return re / 2.0 - math.sqrt((re / 2.0) ** 2 + (2.0 * math.pi) ** 2)


def _poisson_exact_1d():
    return {
        "u": lambda p: (0.5 * p[:, 0] * (1.0 - p[:, 0]))[:, None],
        "sigma": lambda p: (0.5 - p[:, 0])[:, None],
    }


def _stokes_exact(mu: float):
    """Smooth non-polynomial Stokes solution on (-1,1)^2 (exponential/
    trigonometric divergence-free velocity with p = 2 mu e^x sin y)."""
    def u(p):
        x, y = p[:, 0], p[:, 1]
        return np.column_stack([
            -np.exp(x) * (y * np.cos(y) + np.sin(y)),
            np.exp(x) * y * np.sin(y),
        ])

    def sigma(p):
        x, y = p[:, 0], p[:, 1]
        ex = np.exp(x)
        return mu * np.column_stack([
            -ex * (y * np.cos(y) + np.sin(y)),          # d(u1)/dx
            -ex * (2.0 * np.cos(y) - y * np.sin(y)),    # d(u1)/dy
            ex * y * np.sin(y),                          # d(u2)/dx
            ex * (np.sin(y) + y * np.cos(y)),            # d(u2)/dy
        ])

    def pressure(p):
        x, y = p[:, 0], p[:, 1]
        return (2.0 * mu * np.exp(x) * np.sin(y))[:, None]

    return {"u": u, "sigma": sigma, "p": pressure}


def _kovasznay_exact(re: float):
    lam = kovasznay_lambda(re)
    mu = 1.0 / re
    two_pi = 2.0 * math.pi
    c = 0.5 * math.exp(2.0 * lam * 0.5)    # p = 0 at (0.5, 1)

    def u(p):
        x, y = p[:, 0], p[:, 1]
        e = np.exp(lam * x)
        return np.column_stack([
            1.0 - e * np.cos(two_pi * y),
            (lam / two_pi) * e * np.sin(two_pi * y),
        ])

    def sigma(p):
        x, y = p[:, 0], p[:, 1]
        e = np.exp(lam * x)
        return mu * np.column_stack([
            -lam * e * np.cos(two_pi * y),
            two_pi * e * np.sin(two_pi * y),
            (lam ** 2 / two_pi) * e * np.sin(two_pi * y),
            lam * e * np.cos(two_pi * y),
        ])

    def pressure(p):
        x = p[:, 0]
        return (-0.5 * np.exp(2.0 * lam * x) + c)[:, None]

    return {"u": u, "sigma": sigma, "p": pressure}


def manufactured_solution(problem: str, **params) -> ProblemSpec:
    """Problem definitions used in the experiments.

    poisson: unit forcing, homogeneous trace BC on [0,1]^dim.
    stokes: smooth exponential solution on (-1,1)^2, f = 0, p pinned at the
            origin.
    kovasznay: steady Navier-Stokes benchmark on (-0.5,1.5)x(0,2), Re = 40
            by default, p pinned at (0.5, 1).
    """
    if problem == "poisson":
        dim = int(params.get("dim", 2))
        exact = _poisson_exact_1d() if dim == 1 else None
        zero = lambda p: np.zeros((len(p), 1))
        return ProblemSpec(
            name="poisson", dim=dim,
            domain=((0.0,) * dim, (1.0,) * dim),
            form_factory=lambda: poisson_form(dim),
            dirichlet={"u_hat": zero},
            exact_fields=exact,
        )
    if problem == "stokes":
        mu = float(params.get("mu", 1.0))
        exact = _stokes_exact(mu)
        return ProblemSpec(
            name="stokes", dim=2,
            domain=((-1.0, -1.0), (1.0, 1.0)),
            form_factory=lambda: stokes_vgp_form(mu),
            dirichlet={"u_hat": exact["u"]},
            exact_fields=exact,
            pressure_pin=("p", (0.0, 0.0)),
            params={"mu": mu},
        )
    if problem == "kovasznay":
        re = float(params.get("re", 40.0))
        exact = _kovasznay_exact(re)
        return ProblemSpec(
            name="kovasznay", dim=2,
            domain=((-0.5, 0.0), (1.5, 2.0)),
            form_factory=lambda bg: navier_stokes_linearized_form(re, bg),
            dirichlet={"u_hat": exact["u"]},
            exact_fields=exact,
            pressure_pin=("p", (0.5, 1.0)),
            nonlinear=True,
            params={"re": re},
        )
    raise ValueError(f"unsupported problem tag {problem!r}")


def cavity_problem(kind: str = "stokes", re: float = 100.0,
                   eps: float = 1.0 / 64.0) -> ProblemSpec:
    """Lid-driven cavity on [0,1]^2 with a linear lid transition of width eps."""

    def lid(p):
        x, y = p[:, 0], p[:, 1]
        ramp = np.minimum(1.0, np.minimum(x / eps, (1.0 - x) / eps))
        ramp = np.maximum(ramp, 0.0)
        g = np.zeros((len(p), 2))
        g[:, 0] = np.where(y >= 1.0 - 1e-12, ramp, 0.0)
        return g

    if kind == "stokes":
        return ProblemSpec(
            name="cavity-stokes", dim=2,
            domain=((0.0, 0.0), (1.0, 1.0)),
            form_factory=lambda: stokes_vgp_form(1.0),
            dirichlet={"u_hat": lid},
            pressure_pin=("p", (0.0, 0.0)),
            params={"eps": eps},
        )
    if kind == "navier-stokes":
        return ProblemSpec(
            name="cavity-ns", dim=2,
            domain=((0.0, 0.0), (1.0, 1.0)),
            form_factory=lambda bg: navier_stokes_linearized_form(re, bg),
            dirichlet={"u_hat": lid},
            pressure_pin=("p", (0.0, 0.0)),
            nonlinear=True,
            params={"re": re, "eps": eps},
        )
    raise ValueError(f"unsupported cavity kind {kind!r}")

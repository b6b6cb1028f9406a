"""Finite-difference ground truth for the Heat and Poisson tasks.

Grids are node-based on the unit square: row ``i`` sits at ``i / (H - 1)``
and column ``j`` at ``j / (W - 1)``.  Row 0 is the top edge, column 0 the
left edge.  Both solvers assemble sparse symmetric positive definite systems
and solve them with :func:`conjugate_gradient` (or a sparse LU factorization
when ``method="direct"``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from mfrnp.errors import ConfigurationError, InputError

BUILTIN_RESOLUTIONS = (16, 32, 64, 96, 128)
TASK_INPUT_DIMS = {"heat": 3, "poisson": 5}

HEAT_HORIZON = 1.0
HEAT_STEPS = 100
ALPHA_MIN = 0.01

CG_TOL = 1e-12


@dataclass
class GridField:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InputError("GridField values must be a 2-D array")
        if not np.all(np.isfinite(self.values)):
            raise InputError("GridField values must be finite")

    @property
    def resolution(self):
        return self.values.shape

    def flat(self):
        return self.values.reshape(-1)


@dataclass(frozen=True)
class FidelitySpec:
    level: int
    resolution: tuple
    cost: float | None = None

    @property
    def size(self):
        return self.resolution[0] * self.resolution[1]


@dataclass(frozen=True)
class SamplingScope:
    intervals: tuple

    def __post_init__(self):
        ivs = tuple((float(lo), float(hi)) for lo, hi in self.intervals)
        for lo, hi in ivs:
            if not lo < hi:
                raise InputError(f"scope interval ({lo}, {hi}) is empty")
        object.__setattr__(self, "intervals", ivs)

    @property
    def dim(self):
        return len(self.intervals)

    @property
    def low(self):
        return np.array([lo for lo, _ in self.intervals])

    @property
    def high(self):
        return np.array([hi for _, hi in self.intervals])

    def contains(self, X):
        X = np.atleast_2d(X)
        return np.all((X >= self.low) & (X <= self.high), axis=1)


@dataclass
class FidelityDataset:
    """Inputs ``X`` (N, d_x) and flattened row-major outputs ``Y`` (N, H*W)."""

    X: np.ndarray
    Y: np.ndarray
    spec: FidelitySpec
    scope: SamplingScope | None = None
    task: str | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim != 2:
            self.X = self.X.reshape(len(self.X), -1)
        if self.Y.ndim != 2:
            self.Y = self.Y.reshape(len(self.Y), -1)
        if len(self.X) != len(self.Y):
            raise InputError(f"|X| = {len(self.X)} but |Y| = {len(self.Y)}")
        if len(self.Y) and self.Y.shape[1] != self.spec.size:
            raise InputError(
                f"outputs have {self.Y.shape[1]} values, resolution {self.spec.resolution} needs {self.spec.size}"
            )

    def __len__(self):
        return len(self.X)

    def fields(self):
        return [GridField(y.reshape(self.spec.resolution)) for y in self.Y]

    def subset(self, idx):
        return FidelityDataset(self.X[idx], self.Y[idx], self.spec, self.scope, self.task, self.seed, dict(self.meta))


# linear algebra ---------------------------------------------------------------

def conjugate_gradient(A, b, x0=None, tol=CG_TOL, maxiter=None):
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Iterates until ``||r||_2 <= tol * max(1, ||b||_2)``.  Raises
    :class:`RuntimeError` if that does not happen within ``maxiter`` steps.
    """
    n = b.shape[0]
    maxiter = maxiter or 10 * n
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - A @ x
    p = r.copy()
    rs = r @ r
    threshold = tol * max(1.0, np.linalg.norm(b))
    if np.sqrt(rs) <= threshold:
        return x
    for _ in range(maxiter):
        Ap = A @ p
        alpha = rs / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rs_new = r @ r
        if np.sqrt(rs_new) <= threshold:
            return x
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise RuntimeError(f"CG did not converge in {maxiter} iterations (residual {np.sqrt(rs):.3e})")


def _check_resolution(resolution):
    h, w = (int(v) for v in resolution)
    if h != w or h < 3:
        raise InputError(f"built-in solvers need a square grid with >= 3 nodes per side, got {resolution}")
    return h, w


def _check_input(x, dim):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape != (dim,):
        raise InputError(f"expected {dim} inputs, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise InputError("solver inputs must be finite")
    return x


def _second_difference(n, neumann=False):
    """1-D second difference (without 1/h^2) on ``n`` nodes.

    Dirichlet: the ``n`` nodes are interior and neighbours outside are known.
    Neumann: mirror ghost nodes, with end rows halved so the result is symmetric.
    """
    main = -2.0 * np.ones(n)
    off = np.ones(n - 1)
    D = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    if neumann:
        D[0, 0], D[-1, -1] = -1.0, -1.0
    return D.tocsr()


# heat -------------------------------------------------------------------------

def heat_diffusivity(x0):
    """Map the first heat input from [0, 1] to a diffusivity in [0.01, 1.01]."""
    return ALPHA_MIN + float(x0)


def heat_system(x, resolution):
    """Backward-Euler system ``(M - dt*alpha*S) u_new = M u_old + dt*alpha*b``.

    Unknowns are all rows of columns ``1 .. W-2``, flattened row-major.  ``M``
    holds the half weights of the insulated top and bottom rows, ``S`` the
    symmetrized Laplacian and ``b`` the Dirichlet contribution of the left and
    right edges.  Returns ``(A, mass, rhs_const, dt)``.
    """
    x = _check_input(x, 3)
    H, W = _check_resolution(resolution)
    alpha = heat_diffusivity(x[0])
    hx, hy = 1.0 / (W - 1), 1.0 / (H - 1)
    nc = W - 2
    weights = np.ones(H)
    weights[0] = weights[-1] = 0.5
    Wr = sp.diags(weights)
    Dx = _second_difference(nc) / hx**2
    Dy = _second_difference(H, neumann=True) / hy**2
    S = sp.kron(Wr, Dx) + sp.kron(Dy, sp.identity(nc))
    mass = np.repeat(weights, nc)
    bx = np.zeros((H, nc))
    bx[:, 0] += x[1] / hx**2
    bx[:, -1] += x[2] / hx**2
    b = (weights[:, None] * bx).reshape(-1)
    dt = HEAT_HORIZON / HEAT_STEPS
    A = (sp.diags(mass) - dt * alpha * S).tocsr()
    return A, mass, dt * alpha * b, dt


def _heat_assemble(x, interior, H, W):
    u = np.empty((H, W))
    u[:, 0] = x[1]
    u[:, -1] = x[2]
    u[:, 1:-1] = interior.reshape(H, W - 2)
    return u


def solve_heat(x, resolution, method="direct", return_history=False):
    """Transient heat field at t = 1 for input ``x = (diffusivity control, left, right)``.

    Left and right edges are held at ``x[1]`` and ``x[2]``, top and bottom are
    insulated and the initial field is zero.  With ``return_history`` the
    interior state after every step is returned as well (row 0 is t = 0).
    """
    x = _check_input(x, 3)
    H, W = _check_resolution(resolution)
    A, mass, rhs_const, _ = heat_system(x, (H, W))
    u = np.zeros(A.shape[0])
    history = [u.copy()]
    if method == "direct":
        lu = spla.splu(A.tocsc())
        solve = lambda rhs, guess: lu.solve(rhs)  # noqa: E731
    elif method == "cg":
        solve = lambda rhs, guess: conjugate_gradient(A, rhs, x0=guess)  # noqa: E731
    else:
        raise ConfigurationError(f"unknown solver method {method!r}")
    for _ in range(HEAT_STEPS):
        u = solve(mass * u + rhs_const, u)
        if return_history:
            history.append(u.copy())
    field_ = GridField(_heat_assemble(x, u, H, W))
    if return_history:
        return field_, np.array(history)
    return field_


# poisson ----------------------------------------------------------------------

def point_source_weights(n):
    """Bilinear hat-function weights of the point 0.5 on ``n`` nodes spanning [0, 1]."""
    pos = 0.5 * (n - 1)
    lo = int(np.floor(pos))
    frac = pos - lo
    w = np.zeros(n)
    w[lo] += 1.0 - frac
    if frac > 0:
        w[lo + 1] += frac
    return w


def poisson_boundary(x, H, W):
    """Grid with Dirichlet edges filled (left, right, top, bottom) and zeros inside.

    Corners take the mean of the two edges meeting there.
    """
    left, right, top, bottom = x[:4]
    u = np.zeros((H, W))
    u[0, :] = top
    u[-1, :] = bottom
    u[:, 0] = left
    u[:, -1] = right
    u[0, 0] = 0.5 * (top + left)
    u[0, -1] = 0.5 * (top + right)
    u[-1, 0] = 0.5 * (bottom + left)
    u[-1, -1] = 0.5 * (bottom + right)
    return u


def poisson_source(x, H, W):
    """Nodal source density: magnitude ``x[4]`` spread over the centre cell, divided by cell area."""
    hx, hy = 1.0 / (W - 1), 1.0 / (H - 1)
    return x[4] * np.outer(point_source_weights(H), point_source_weights(W)) / (hx * hy)


def poisson_system(x, resolution):
    """Interior system ``A u = rhs`` for ``-lap(u) = f``, scaled by ``hx * hy``.

    Returns ``(A, rhs)`` over the ``(H-2) * (W-2)`` interior nodes (row-major).
    """
    x = _check_input(x, 5)
    H, W = _check_resolution(resolution)
    hx, hy = 1.0 / (W - 1), 1.0 / (H - 1)
    ny, nx = H - 2, W - 2
    # scale by hx*hy keeps entries O(1)
    Dx = -_second_difference(nx) * (hy / hx)
    Dy = -_second_difference(ny) * (hx / hy)
    A = (sp.kron(sp.identity(ny), Dx) + sp.kron(Dy, sp.identity(nx))).tocsr()
    g = poisson_boundary(x, H, W)
    rhs = poisson_source(x, H, W)[1:-1, 1:-1] * hx * hy
    rhs[:, 0] += g[1:-1, 0] * hy / hx
    rhs[:, -1] += g[1:-1, -1] * hy / hx
    rhs[0, :] += g[0, 1:-1] * hx / hy
    rhs[-1, :] += g[-1, 1:-1] * hx / hy
    return A, rhs.reshape(-1)


def solve_poisson(x, resolution, method="cg"):
    """Poisson field for ``x = (left, right, top, bottom, source magnitude)``."""
    x = _check_input(x, 5)
    H, W = _check_resolution(resolution)
    A, rhs = poisson_system(x, (H, W))
    if method == "cg":
        interior = conjugate_gradient(A, rhs)
    elif method == "direct":
        interior = spla.spsolve(A.tocsc(), rhs)
    else:
        raise ConfigurationError(f"unknown solver method {method!r}")
    u = poisson_boundary(x, H, W)
    u[1:-1, 1:-1] = interior.reshape(H - 2, W - 2)
    return GridField(u)


SOLVERS = {"heat": solve_heat, "poisson": solve_poisson}


def solve(task, x, resolution):
    try:
        solver = SOLVERS[task]
    except KeyError:
        raise InputError(f"unknown task {task!r}") from None
    return solver(x, resolution)


# scopes and sampling ---------------------------------------------------------

_OOD_SCOPES = {
    "heat": {
        "ood_train": ((0.0, 0.8), (-1.0, 0.0), (0.01, 0.1)),
        "ood_test": ((0.8, 1.0), (-1.0, 0.0), (0.01, 0.1)),
    },
    "poisson": {
        "ood_train": ((0.1, 0.74),) * 3 + ((0.1, 0.9),) * 2,
        "ood_test": ((0.74, 0.9),) * 3 + ((0.1, 0.9),) * 2,
    },
}

REGIMES = ("full", "ood_train", "ood_test")


def builtin_scopes(task, regime):
    """Sampling scope for a built-in task; ``full`` is the union of the OOD pair."""
    if task not in _OOD_SCOPES:
        raise InputError(f"unknown task {task!r}")
    if regime not in REGIMES:
        raise InputError(f"unknown regime {regime!r}")
    scopes = _OOD_SCOPES[task]
    if regime != "full":
        return SamplingScope(scopes[regime])
    union = tuple(
        (min(a[0], b[0]), max(a[1], b[1]))
        for a, b in zip(scopes["ood_train"], scopes["ood_test"])
    )
    return SamplingScope(union)


def split_dimensions(task):
    """Indices where the OOD train and test scopes differ."""
    tr = builtin_scopes(task, "ood_train").intervals
    te = builtin_scopes(task, "ood_test").intervals
    return [i for i, (a, b) in enumerate(zip(tr, te)) if a != b]


def sample_dataset(task, spec, n, scope, seed):
    """Draw ``n`` inputs uniformly over ``scope`` and solve each at ``spec.resolution``.

    ``seed`` may be an int or a :class:`numpy.random.Generator`.  ``n = 0``
    yields an empty dataset.
    """
    if task not in TASK_INPUT_DIMS:
        raise InputError(f"unknown task {task!r}")
    if n < 0:
        raise InputError("sample count must be non-negative")
    dim = TASK_INPUT_DIMS[task]
    if scope.dim != dim:
        raise InputError(f"{task} takes {dim} inputs but scope has {scope.dim} intervals")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    X = rng.uniform(scope.low, scope.high, size=(n, dim))
    Y = np.empty((n, spec.size))
    for i, x in enumerate(X):
        Y[i] = solve(task, x, spec.resolution).flat()
    return FidelityDataset(X, Y, spec, scope, task, seed if isinstance(seed, int) else None)


# dataset directories ---------------------------------------------------------

def save_dataset(ds, directory):
    """Write ``meta.json``, ``x.csv`` and ``y.csv`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "task": ds.task,
        "spec": {"level": ds.spec.level, "resolution": list(ds.spec.resolution), "cost": ds.spec.cost},
        "scope": [list(iv) for iv in ds.scope.intervals] if ds.scope else None,
        "seed": ds.seed,
        "n": len(ds),
    }
    meta.update({k: v for k, v in ds.meta.items() if k not in meta})
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    np.savetxt(d / "x.csv", ds.X, delimiter=",", fmt="%.17g")
    np.savetxt(d / "y.csv", ds.Y, delimiter=",", fmt="%.17g")


def load_dataset(directory):
    """Inverse of :func:`save_dataset`; also the ingestion path for external data."""
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    spec_meta = meta["spec"]
    spec = FidelitySpec(int(spec_meta["level"]), tuple(spec_meta["resolution"]), spec_meta.get("cost"))
    n = int(meta["n"])
    d_x = len(meta["scope"]) if meta.get("scope") else 0
    X = np.loadtxt(d / "x.csv", delimiter=",", ndmin=2) if n else np.zeros((0, d_x))
    Y = np.loadtxt(d / "y.csv", delimiter=",", ndmin=2) if n else np.zeros((0, spec.size))
    scope = SamplingScope(meta["scope"]) if meta.get("scope") else None
    extra = {k: v for k, v in meta.items() if k not in ("task", "spec", "scope", "seed", "n")}
    ds = FidelityDataset(X.reshape(n, -1) if n else X, Y.reshape(n, -1) if n else Y, spec, scope, meta.get("task"), meta.get("seed"), extra)
    if scope is not None and n and not np.all(scope.contains(ds.X)):
        raise InputError(f"dataset in {d} has inputs outside its declared scope")
    return ds

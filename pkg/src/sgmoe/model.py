"""Core model objects for softmax-gated Gaussian mixture-of-experts.

A model with K experts on D-dimensional covariates is parameterized by
atoms (omega0_k, omega1_k, a_k, b_k, sigma_k).  Given covariate x, the
response density is

    p(y | x) = sum_k softmax_k(omega1 . x + omega0) * N(y | a_k . x + b_k, sigma_k)

where ``sigma_k`` is the component *variance*, not the standard deviation.
The collection of atoms is also treated as an (unnormalized) mixing measure
sum_k exp(omega0_k) * delta_{(omega1_k, a_k, b_k, sigma_k)}; the exp(omega0)
values act as weights and need not sum to one.

Gating parameters are only identified up to a common shift (adding (t0, t1)
to every (omega0_k, omega1_k) leaves the density unchanged), so models are
usually reported in baseline form with the last atom's gating parameters
pinned to zero.  See :func:`normalize_baseline` and :func:`translate`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InputError, NumericError

_MAX_LOG = math.log(np.finfo(float).max)  # ~709.78

__all__ = [
    "ExpertAtom",
    "MixingMeasure",
    "Dataset",
    "UnderflowWarning",
    "gating_probs",
    "conditional_density",
    "avg_log_likelihood",
    "responsibilities",
    "responsibility_matrix",
    "log_density_vector",
    "normalize_baseline",
    "translate",
]

# Densities below this are floored before taking logs so that a single
# far-out observation cannot poison a whole likelihood with -inf.
DENSITY_FLOOR = 1e-300
LOG_DENSITY_FLOOR = math.log(DENSITY_FLOOR)

LOG_2PI = math.log(2.0 * math.pi)


class UnderflowWarning(RuntimeWarning):
    """Some density evaluations underflowed and were floored."""


def _as_float(value, name: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{name} must be a real scalar, got {value!r}") from exc
    if not math.isfinite(out):
        raise InputError(f"{name} must be finite, got {out}")
    return out


def _as_vector(value, name: str, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise InputError(f"{name} must be a 1-d vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise InputError(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} must be finite")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ExpertAtom:
    """One expert: gating parameters (omega0, omega1) and a Gaussian regression.

    ``sigma`` is the variance of the expert's Gaussian and must be strictly
    positive.  ``exp(omega0)`` is the atom's weight in the mixing measure.
    """

    omega0: float
    omega1: np.ndarray  # gating slope, shape (dim,)
    a: np.ndarray       # regression slope, shape (dim,)
    b: float            # regression intercept
    sigma: float        # regression variance (not standard deviation)

    def __post_init__(self):
        object.__setattr__(self, "omega0", _as_float(self.omega0, "omega0"))
        omega1 = _as_vector(self.omega1, "omega1")
        a = _as_vector(self.a, "a", dim=omega1.shape[0])
        object.__setattr__(self, "omega1", omega1)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", _as_float(self.b, "b"))
        object.__setattr__(self, "sigma", _as_float(self.sigma, "sigma"))
        if self.sigma <= 0.0:
            raise InputError(f"sigma must be > 0, got {self.sigma}")

    @property
    def dim(self) -> int:
        return self.omega1.shape[0]

    @property
    def weight(self) -> float:
        # exp(omega0) must stay inside double range to be usable as a weight
        if self.omega0 > _MAX_LOG:
            raise NumericError(
                f"atom weight exp({self.omega0:.6g}) overflows; "
                "gating bias too large")
        return math.exp(self.omega0)

    def theta(self) -> np.ndarray:
        """Non-gating-bias parameter vector (omega1, a, b, sigma), length 2*dim+2."""
        return np.concatenate([self.omega1, self.a, [self.b, self.sigma]])

    def to_dict(self) -> dict:
        return {
            "omega0": self.omega0,
            "omega1": [float(v) for v in self.omega1],
            "a": [float(v) for v in self.a],
            "b": self.b,
            "sigma": self.sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertAtom":
        try:
            return cls(omega0=d["omega0"], omega1=d["omega1"], a=d["a"],
                       b=d["b"], sigma=d["sigma"])
        except KeyError as exc:
            raise InputError(f"atom record missing field {exc}") from exc


@dataclass(frozen=True)
class MixingMeasure:
    """A finite collection of expert atoms over covariates of dimension ``dim``."""

    atoms: tuple[ExpertAtom, ...]
    dim: int

    def __post_init__(self):
        atoms = tuple(self.atoms)
        object.__setattr__(self, "atoms", atoms)
        if len(atoms) == 0:
            raise InputError("a mixing measure needs at least one atom")
        if not all(isinstance(at, ExpertAtom) for at in atoms):
            raise InputError("atoms must be ExpertAtom instances")
        dim = int(self.dim)
        object.__setattr__(self, "dim", dim)
        if dim < 1:
            raise InputError(f"dim must be >= 1, got {dim}")
        for i, at in enumerate(atoms):
            if at.dim != dim:
                raise InputError(
                    f"atom {i} has dim {at.dim}, expected {dim}")

    @classmethod
    def from_atoms(cls, atoms) -> "MixingMeasure":
        atoms = tuple(atoms)
        if not atoms:
            raise InputError("a mixing measure needs at least one atom")
        return cls(atoms=atoms, dim=atoms[0].dim)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    # Stacked parameter views.  K is small in every use here, so these are
    # recomputed on demand instead of cached.
    def omega0s(self) -> np.ndarray:
        return np.array([at.omega0 for at in self.atoms])

    def omega1s(self) -> np.ndarray:
        return np.stack([at.omega1 for at in self.atoms])

    def slopes(self) -> np.ndarray:
        return np.stack([at.a for at in self.atoms])

    def intercepts(self) -> np.ndarray:
        return np.array([at.b for at in self.atoms])

    def sigmas(self) -> np.ndarray:
        return np.array([at.sigma for at in self.atoms])

    def weights(self) -> np.ndarray:
        """Atom weights exp(omega0); unnormalized, each > 0."""
        return np.exp(self.omega0s())

    def to_dict(self) -> dict:
        return {"dim": self.dim, "atoms": [at.to_dict() for at in self.atoms]}

    @classmethod
    def from_dict(cls, d: dict) -> "MixingMeasure":
        try:
            atoms = tuple(ExpertAtom.from_dict(rec) for rec in d["atoms"])
            return cls(atoms=atoms, dim=int(d["dim"]))
        except KeyError as exc:
            raise InputError(f"model record missing field {exc}") from exc


@dataclass(frozen=True)
class Dataset:
    """Paired covariates and scalar responses."""

    xs: np.ndarray  # (n, dim)
    ys: np.ndarray  # (n,)

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        ys = np.asarray(self.ys, dtype=float)
        if xs.ndim != 2:
            raise InputError(f"xs must be 2-d (n, dim), got shape {xs.shape}")
        if ys.ndim != 1:
            raise InputError(f"ys must be 1-d, got shape {ys.shape}")
        if xs.shape[0] != ys.shape[0]:
            raise InputError(
                f"xs and ys disagree on n: {xs.shape[0]} vs {ys.shape[0]}")
        if xs.shape[0] == 0:
            raise InputError("dataset must be non-empty")
        if xs.shape[1] < 1:
            raise InputError("covariate dimension must be >= 1")
        if not np.all(np.isfinite(xs)) or not np.all(np.isfinite(ys)):
            raise InputError("dataset contains non-finite values")
        xs = xs.copy()
        ys = ys.copy()
        xs.setflags(write=False)
        ys.setflags(write=False)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    @property
    def dim(self) -> int:
        return self.xs.shape[1]


# ---------------------------------------------------------------------------
# density machinery

def _check_x(measure: MixingMeasure, x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.shape != (measure.dim,):
        raise InputError(
            f"covariate must have shape ({measure.dim},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError("covariate must be finite")
    return arr


def log_gates_matrix(measure: MixingMeasure, xs: np.ndarray) -> np.ndarray:
    """Log softmax gate probabilities, shape (n, K)."""
    logits = xs @ measure.omega1s().T + measure.omega0s()
    return logits - logsumexp(logits, axis=1, keepdims=True)


def log_joint_matrix(measure: MixingMeasure, xs: np.ndarray,
                     ys: np.ndarray) -> np.ndarray:
    """log(gate_k(x_n) * N(y_n | mean_k(x_n), sigma_k)), shape (n, K)."""
    means = xs @ measure.slopes().T + measure.intercepts()
    sig = measure.sigmas()
    log_norm = -0.5 * (LOG_2PI + np.log(sig) + (ys[:, None] - means) ** 2 / sig)
    return log_gates_matrix(measure, xs) + log_norm


def log_density_vector(measure: MixingMeasure, xs: np.ndarray,
                       ys: np.ndarray) -> np.ndarray:
    """Per-point log conditional density, floored at log(1e-300).

    Emits :class:`UnderflowWarning` with the number of floored points; the
    floor keeps far-out observations from dragging averages to -inf.
    """
    logp = logsumexp(log_joint_matrix(measure, xs, ys), axis=1)
    floored = logp < LOG_DENSITY_FLOOR
    n_floor = int(np.count_nonzero(floored))
    if n_floor:
        warnings.warn(
            f"{n_floor} of {logp.shape[0]} density values underflowed; "
            f"floored at {DENSITY_FLOOR:g}",
            UnderflowWarning, stacklevel=2)
        logp = np.where(floored, LOG_DENSITY_FLOOR, logp)
    return logp


def gating_probs(measure: MixingMeasure, x) -> np.ndarray:
    """Softmax gate probabilities at covariate x; sums to 1, all in [0, 1]."""
    x = _check_x(measure, x)
    return np.exp(log_gates_matrix(measure, x[None, :]))[0]


def conditional_density(measure: MixingMeasure, x, y) -> float:
    """Mixture density of the response y given covariate x (always > 0)."""
    x = _check_x(measure, x)
    y = _as_float(y, "y")
    logp = log_density_vector(measure, x[None, :], np.array([y]))[0]
    return float(math.exp(logp))


def avg_log_likelihood(measure: MixingMeasure, data: Dataset) -> float:
    """Average log conditional density of the dataset under the model."""
    if data.dim != measure.dim:
        raise InputError(
            f"dataset dim {data.dim} does not match model dim {measure.dim}")
    out = float(np.mean(log_density_vector(measure, data.xs, data.ys)))
    if not math.isfinite(out):
        raise NumericError(f"average log-likelihood is non-finite: {out}")
    return out


def responsibility_matrix(measure: MixingMeasure, data: Dataset) -> np.ndarray:
    """Posterior component memberships for every observation, shape (n, K)."""
    if data.dim != measure.dim:
        raise InputError(
            f"dataset dim {data.dim} does not match model dim {measure.dim}")
    lj = log_joint_matrix(measure, data.xs, data.ys)
    # Row-wise softmax with a guard: a fully underflowed row becomes uniform.
    mx = np.max(lj, axis=1, keepdims=True)
    dead = ~np.isfinite(mx[:, 0])
    if np.any(dead):
        lj = lj.copy()
        lj[dead] = 0.0
        mx = np.max(lj, axis=1, keepdims=True)
    r = np.exp(lj - mx)
    return r / np.sum(r, axis=1, keepdims=True)


def responsibilities(measure: MixingMeasure, x, y) -> np.ndarray:
    """Posterior membership probabilities of one observation, shape (K,)."""
    x = _check_x(measure, x)
    y = _as_float(y, "y")
    data = Dataset(xs=x[None, :], ys=np.array([y]))
    return responsibility_matrix(measure, data)[0]


# ---------------------------------------------------------------------------
# gating gauge

def translate(measure: MixingMeasure, t0, t1) -> MixingMeasure:
    """Shift every atom's gating parameters by (t0, t1).

    The conditional density is invariant under this shift; the atom weights
    exp(omega0) all scale by exp(t0).
    """
    t0 = _as_float(t0, "t0")
    t1 = _as_vector(t1, "t1", dim=measure.dim)
    atoms = tuple(
        ExpertAtom(omega0=at.omega0 + t0, omega1=at.omega1 + t1,
                   a=at.a, b=at.b, sigma=at.sigma)
        for at in measure.atoms)
    return MixingMeasure(atoms=atoms, dim=measure.dim)


def normalize_baseline(measure: MixingMeasure) -> MixingMeasure:
    """Return the gauge-equivalent model whose last atom has zero gating parameters.

    Idempotent; the conditional density is unchanged.
    """
    last = measure.atoms[-1]
    return translate(measure, -last.omega0, -last.omega1)

"""EM fitting of softmax-gated mixture-of-experts models.

The E-step computes posterior responsibilities; the M-step solves the
experts in closed form (weighted least squares per expert, weighted
residual variance) and improves the gating network with damped Newton
steps on the multinomial-logistic objective.  Damping (step halving)
makes this a generalized EM: the observed-data average log-likelihood
never decreases, which the fit records as a per-iteration trace.

Initialization options: k-means clustering of the joined (x, y) points,
perturbation of a known reference model (round-robin atom assignment plus
Gaussian noise, log-space for variances), or a data-scaled random draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InputError, NumericError
from .model import (
    LOG_2PI,
    LOG_DENSITY_FLOOR,
    Dataset,
    ExpertAtom,
    MixingMeasure,
    normalize_baseline,
)

__all__ = [
    "FitConfig",
    "FitResult",
    "em_fit",
    "gating_newton_step",
    "init_kmeans",
    "init_perturbed",
    "init_random",
    "make_init",
]


@dataclass(frozen=True)
class FitConfig:
    K: int = 2                    # number of experts to fit
    tol: float = 1e-6             # stop when avg loglik moves less than this
    max_iter: int = 2000
    init: str = "kmeans"          # kmeans | perturbed_truth | random
    init_scale: float = 0.5       # perturbation std dev for perturbed_truth
    # gating perturbation std dev; None follows init_scale.  0 with a
    # positive init_scale starts duplicates split in expert space but with
    # identical gates, which keeps the gating likelihood ridge unseeded.
    init_gate_scale: float | None = None
    newton_max_iter: int = 25     # inner gating Newton cap per M-step
    newton_tol: float = 1e-8
    ridge: float = 1e-8           # gating Hessian regularizer
    sigma_floor: float = 1e-8
    # optional compact constraint on the gating parameters, stated in the
    # baseline gauge (last atom at zero): ((lo0, hi0), (lo1, hi1)) bounds
    # omega0 and each omega1 coordinate.  None fits unconstrained.
    gate_box: tuple[tuple[float, float], tuple[float, float]] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise InputError(f"K must be >= 1, got {self.K}")
        if self.tol <= 0:
            raise InputError("tol must be > 0")
        if self.max_iter < 0:
            # 0 means evaluate the initial model without any update
            raise InputError("max_iter must be >= 0")
        if self.sigma_floor <= 0:
            raise InputError("sigma_floor must be > 0")
        if self.newton_max_iter < 1 or self.newton_tol <= 0:
            raise InputError("newton settings must be positive")
        if self.ridge < 0:
            raise InputError("ridge must be >= 0")
        if self.init not in ("kmeans", "perturbed_truth", "random"):
            raise InputError(f"unknown init scheme {self.init!r}")
        if self.init_gate_scale is not None and self.init_gate_scale < 0:
            raise InputError("init_gate_scale must be >= 0")
        if self.gate_box is not None:
            box = tuple((float(lo), float(hi)) for lo, hi in self.gate_box)
            for lo, hi in box:
                # the baseline atom sits at zero, so zero must be feasible
                if not (lo <= 0.0 <= hi) or lo >= hi:
                    raise InputError(
                        f"gate_box intervals must contain 0, got {box}")
            object.__setattr__(self, "gate_box", box)


@dataclass(frozen=True)
class FitResult:
    model: MixingMeasure          # baseline-normalized
    loglik_trace: tuple[float, ...]
    iterations: int
    converged: bool

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "loglik_trace": list(self.loglik_trace),
            "iterations": self.iterations,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        try:
            return cls(model=MixingMeasure.from_dict(d["model"]),
                       loglik_trace=tuple(d["loglik_trace"]),
                       iterations=int(d["iterations"]),
                       converged=bool(d["converged"]))
        except KeyError as exc:
            raise InputError(f"fit record missing field {exc}") from exc


# ---------------------------------------------------------------------------
# gating M-step

def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def _gate_objective(gates: np.ndarray, resp: np.ndarray, z: np.ndarray) -> float:
    # sum_n sum_k r_nk log softmax_k(gates @ z_n); rows of resp sum to 1
    logits = z @ gates.T
    return float(np.sum(resp * logits)
                 - np.sum(logsumexp(logits, axis=1)))


def _box_project(gates: np.ndarray, box) -> np.ndarray:
    """Bring gates into the compact box, stated in the baseline gauge.

    Subtracting the last row is a softmax gauge shift and leaves every
    gate value unchanged; only the clipping can move the model.
    """
    (lo0, hi0), (lo1, hi1) = box
    g = gates - gates[-1]
    out = np.empty_like(g)
    out[:, :-1] = np.clip(g[:, :-1], lo1, hi1)
    out[:, -1] = np.clip(g[:, -1], lo0, hi0)
    return out


def gating_newton_step(gates: np.ndarray, resp: np.ndarray, xs: np.ndarray,
                       ridge: float = 1e-8,
                       box=None) -> tuple[np.ndarray, float]:
    """One damped Newton update of the gating parameters.

    ``gates`` is (K, D+1): row k holds (omega1_k, omega0_k).  Returns the
    updated gates and the new objective value; the objective never
    decreases (step halving, up to 20 halvings, falls back to no move).
    The softmax translation direction is flat, so the Hessian needs the
    ridge to be solvable; the update then stays in a fixed gauge section.
    When ``box`` is given, each candidate is projected into the compact
    gate region before the acceptance test, so iterates stay feasible
    and the objective still never decreases.
    """
    n, d = xs.shape
    k = gates.shape[0]
    if resp.shape != (n, k):
        raise InputError("responsibility matrix shape mismatch")
    z = np.hstack([xs, np.ones((n, 1))])          # (N, D+1)
    obj0 = _gate_objective(gates, resp, z)
    pi = _softmax_rows(z @ gates.T)               # (N, K)
    grad = (resp - pi).T @ z                      # (K, D+1)

    # Fisher-style Hessian blocks: H[k,l] = sum_n (diag(pi)-pi pi^T)_{kl} z z^T
    h1 = np.einsum("nk,nd,ne->kde", pi, z, z)
    h2 = np.einsum("nk,nl,nd,ne->klde", pi, pi, z, z)
    p = d + 1
    hess = -h2.transpose(0, 2, 1, 3).reshape(k * p, k * p)
    for kk in range(k):
        hess[kk * p:(kk + 1) * p, kk * p:(kk + 1) * p] += h1[kk]
    hess[np.diag_indices_from(hess)] += ridge

    try:
        step = np.linalg.solve(hess, grad.reshape(-1)).reshape(k, p)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"gating Hessian singular despite ridge: {exc}") from exc
    if not np.all(np.isfinite(step)):
        raise NumericError("gating Newton step is non-finite")

    scale = 1.0
    for _ in range(20):
        cand = gates + scale * step
        if box is not None:
            cand = _box_project(cand, box)
        obj = _gate_objective(cand, resp, z)
        if obj >= obj0:
            return cand, obj
        scale *= 0.5
    return gates, obj0


def _gate_mstep(gates: np.ndarray, resp: np.ndarray, xs: np.ndarray,
                cfg: FitConfig) -> np.ndarray:
    obj = None
    for _ in range(cfg.newton_max_iter):
        gates, new_obj = gating_newton_step(gates, resp, xs, ridge=cfg.ridge,
                                            box=cfg.gate_box)
        if obj is not None and new_obj - obj < cfg.newton_tol:
            break
        obj = new_obj
    return gates


# ---------------------------------------------------------------------------
# EM core

def _loglik_rows(omega: np.ndarray, omega0: np.ndarray, slopes: np.ndarray,
                 intercepts: np.ndarray, sigmas: np.ndarray,
                 xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    logits = xs @ omega.T + omega0
    log_gates = logits - logsumexp(logits, axis=1, keepdims=True)
    means = xs @ slopes.T + intercepts
    log_norm = -0.5 * (LOG_2PI + np.log(sigmas)
                       + (ys[:, None] - means) ** 2 / sigmas)
    return log_gates + log_norm


def em_fit(data: Dataset, cfg: FitConfig, init: MixingMeasure) -> FitResult:
    """Fit a cfg.K expert model by generalized EM from the given start.

    Stops when the average log-likelihood changes by less than cfg.tol or
    after cfg.max_iter iterations; the returned model is baseline-normalized
    and every variance respects cfg.sigma_floor.
    """
    if init.n_atoms != cfg.K:
        raise InputError(f"init has {init.n_atoms} atoms, config wants {cfg.K}")
    if init.dim != data.dim:
        raise InputError(f"init dim {init.dim} != data dim {data.dim}")

    xs, ys = data.xs, data.ys
    n, d = xs.shape
    k = cfg.K
    z = np.hstack([xs, np.ones((n, 1))])

    omega0 = init.omega0s()
    omega = init.omega1s()
    slopes = init.slopes()
    intercepts = init.intercepts()
    sigmas = np.maximum(init.sigmas(), cfg.sigma_floor)
    if cfg.gate_box is not None:
        # the fit starts from the projected model; the trace is then
        # monotone over what the algorithm actually iterates
        start = _box_project(np.hstack([omega, omega0[:, None]]),
                             cfg.gate_box)
        omega = start[:, :d].copy()
        omega0 = start[:, d].copy()

    def current_loglik(iteration: int) -> tuple[np.ndarray, float]:
        lj = _loglik_rows(omega, omega0, slopes, intercepts, sigmas, xs, ys)
        row_ll = logsumexp(lj, axis=1)
        avg = float(np.mean(np.maximum(row_ll, LOG_DENSITY_FLOOR)))
        if not math.isfinite(avg):
            raise NumericError("average log-likelihood became non-finite",
                               iteration=iteration)
        return lj, avg

    lj, avg_ll = current_loglik(0)
    trace: list[float] = [avg_ll]
    converged = False
    iteration = 0
    for iteration in range(1, cfg.max_iter + 1):
        # E-step: responsibilities; fully-underflowed rows become uniform
        mx = np.max(lj, axis=1, keepdims=True)
        resp = np.exp(lj - np.where(np.isfinite(mx), mx, 0.0))
        bad = ~np.isfinite(resp).all(axis=1)
        if np.any(bad):
            resp[bad] = 1.0
        resp /= np.sum(resp, axis=1, keepdims=True)

        # M-step, experts: weighted least squares and residual variance
        for j in range(k):
            w = resp[:, j]
            sw = float(np.sum(w))
            if sw <= 0.0 or not math.isfinite(sw):
                raise NumericError(
                    f"expert {j} lost all responsibility mass",
                    iteration=iteration)
            zw = z * w[:, None]
            gram = z.T @ zw
            rhs = zw.T @ ys
            try:
                beta = np.linalg.solve(gram, rhs)
            except np.linalg.LinAlgError:
                beta, *_ = np.linalg.lstsq(gram, rhs, rcond=None)
            resid = ys - z @ beta
            slopes[j] = beta[:d]
            intercepts[j] = beta[d]
            sigmas[j] = max(float(np.sum(w * resid ** 2) / sw),
                            cfg.sigma_floor)

        # M-step, gates
        gates = np.hstack([omega, omega0[:, None]])
        gates = _gate_mstep(gates, resp, xs, cfg)
        omega = gates[:, :d]
        omega0 = gates[:, d]

        params = np.concatenate([omega0, omega.ravel(), slopes.ravel(),
                                 intercepts, sigmas])
        if not np.all(np.isfinite(params)):
            raise NumericError("model parameters became non-finite",
                               iteration=iteration)

        lj, avg_ll = current_loglik(iteration)
        trace.append(avg_ll)
        if abs(trace[-1] - trace[-2]) < cfg.tol:
            converged = True
            break

    atoms = tuple(
        ExpertAtom(omega0=float(omega0[j]), omega1=omega[j].copy(),
                   a=slopes[j].copy(), b=float(intercepts[j]),
                   sigma=float(sigmas[j]))
        for j in range(k))
    model = normalize_baseline(MixingMeasure(atoms=atoms, dim=d))
    return FitResult(model=model, loglik_trace=tuple(trace),
                     iterations=iteration, converged=converged)


# ---------------------------------------------------------------------------
# initialization schemes

def _cluster_atom(xs: np.ndarray, ys: np.ndarray, proportion: float,
                  sigma_floor: float) -> ExpertAtom:
    """Least-squares expert for one cluster; falls back to a flat fit when
    the cluster design is singular (too few or collinear points)."""
    n, d = xs.shape
    z = np.hstack([xs, np.ones((n, 1))])
    gram = z.T @ z
    if n >= d + 1 and np.linalg.matrix_rank(gram) == d + 1:
        beta = np.linalg.solve(gram, z.T @ ys)
        a, b = beta[:d], float(beta[d])
        resid = ys - z @ beta
        sigma = max(float(np.mean(resid ** 2)), sigma_floor)
    else:
        a = np.zeros(d)
        b = float(np.mean(ys))
        sigma = max(float(np.var(ys)), sigma_floor)
    return ExpertAtom(omega0=math.log(proportion), omega1=np.zeros(d),
                      a=a, b=b, sigma=sigma)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator,
               n_iter: int = 50) -> np.ndarray:
    """Plain k-means with k-means++ seeding; returns integer labels."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(np.sum(d2))
        if total <= 0.0:
            centers[j:] = points[rng.integers(n, size=k - j)]
            break
        centers[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    labels = np.zeros(n, dtype=int)
    for sweep in range(n_iter):
        dist = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(dist, axis=1)
        if sweep > 0 and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            mask = labels == j
            if np.any(mask):
                centers[j] = np.mean(points[mask], axis=0)
            else:
                # re-seed an empty cluster at the farthest point
                far = int(np.argmax(np.min(dist, axis=1)))
                centers[j] = points[far]
                labels[far] = j
    return labels


def init_kmeans(data: Dataset, k: int, seed: int,
                sigma_floor: float = 1e-8) -> MixingMeasure:
    """Cluster joined (x, y) points and fit one expert per cluster."""
    if k < 1:
        raise InputError(f"K must be >= 1, got {k}")
    if data.n < k:
        raise InputError(f"need at least K={k} points, got {data.n}")
    rng = np.random.default_rng(seed)
    if k == 1:
        labels = np.zeros(data.n, dtype=int)
    else:
        points = np.hstack([data.xs, data.ys[:, None]])
        labels = _kmeans_pp(points, k, rng)
    atoms = []
    for j in range(k):
        mask = labels == j
        count = int(np.count_nonzero(mask))
        if count == 0:
            raise NumericError(f"k-means produced an empty cluster {j}")
        atoms.append(_cluster_atom(data.xs[mask], data.ys[mask],
                                   proportion=count / data.n,
                                   sigma_floor=sigma_floor))
    return MixingMeasure(atoms=tuple(atoms), dim=data.dim)


def init_perturbed(reference: MixingMeasure, k: int, scale: float,
                   seed: int, gate_scale: float | None = None) -> MixingMeasure:
    """K atoms drawn around the reference atoms, round-robin assigned.

    Atom j copies reference atom (j mod K0) plus Gaussian noise of scale
    ``gate_scale`` (default: ``scale``) on (omega0, omega1) and of scale
    ``scale`` on (a, b) and log(sigma); scale 0 reproduces the reference
    values exactly.  The draw sequence per atom is fixed, so changing one
    scale never reshuffles the other blocks' noise.
    """
    k0 = reference.n_atoms
    if k < k0:
        raise InputError(f"K={k} must be >= the reference atom count {k0}")
    if scale < 0:
        raise InputError("scale must be >= 0")
    if gate_scale is None:
        gate_scale = scale
    if gate_scale < 0:
        raise InputError("gate_scale must be >= 0")
    rng = np.random.default_rng(seed)
    d = reference.dim
    atoms = []
    for j in range(k):
        src = reference.atoms[j % k0]
        # normal(0, 0) is exactly 0, so scale=0 copies the reference atoms
        atoms.append(ExpertAtom(
            omega0=src.omega0 + float(rng.normal(0.0, gate_scale)),
            omega1=src.omega1 + rng.normal(0.0, gate_scale, size=d),
            a=src.a + rng.normal(0.0, scale, size=d),
            b=src.b + float(rng.normal(0.0, scale)),
            sigma=float(src.sigma * np.exp(rng.normal(0.0, scale))),
        ))
    return MixingMeasure(atoms=tuple(atoms), dim=d)


def init_random(data: Dataset, k: int, seed: int) -> MixingMeasure:
    """Data-scaled random start: gates near zero, experts around the
    response mean with the response variance."""
    if k < 1:
        raise InputError(f"K must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    d = data.dim
    y_mean = float(np.mean(data.ys))
    y_sd = float(np.std(data.ys)) or 1.0
    atoms = []
    for _ in range(k):
        atoms.append(ExpertAtom(
            omega0=float(rng.normal(0.0, 0.1)),
            omega1=rng.normal(0.0, 0.1, size=d),
            a=rng.normal(0.0, y_sd / 2.0, size=d),
            b=y_mean + float(rng.normal(0.0, y_sd)),
            sigma=y_sd ** 2,
        ))
    return MixingMeasure(atoms=tuple(atoms), dim=d)


def make_init(data: Dataset, cfg: FitConfig,
              reference: MixingMeasure | None = None) -> MixingMeasure:
    """Build the starting model named by cfg.init."""
    if cfg.init == "kmeans":
        return init_kmeans(data, cfg.K, cfg.seed, sigma_floor=cfg.sigma_floor)
    if cfg.init == "perturbed_truth":
        if reference is None:
            raise InputError("perturbed_truth init needs a reference model")
        return init_perturbed(reference, cfg.K, cfg.init_scale, cfg.seed,
                              gate_scale=cfg.init_gate_scale)
    return init_random(data, cfg.K, cfg.seed)

"""Shared test utilities: tiny builders and slow reference implementations.

The reference code here is deliberately naive (per-point python loops,
textbook formulas) so that the vectorized library code is checked against
something written independently.
"""

from __future__ import annotations

import math

import numpy as np

from sgmoe.model import Dataset, ExpertAtom, MixingMeasure


def make_atom(omega0=0.0, omega1=(0.0,), a=(0.0,), b=0.0, sigma=1.0) -> ExpertAtom:
    return ExpertAtom(omega0=omega0, omega1=np.asarray(omega1, dtype=float),
                      a=np.asarray(a, dtype=float), b=b, sigma=sigma)


def make_measure(rows, dim=None) -> MixingMeasure:
    """rows: iterable of (omega0, omega1, a, b, sigma) with vector entries."""
    atoms = tuple(make_atom(*row) for row in rows)
    return MixingMeasure(atoms=atoms, dim=dim if dim is not None else atoms[0].dim)


def g0_two_expert() -> MixingMeasure:
    """Well-separated two-expert truth used across the studies (dim 1)."""
    return make_measure([
        (-8.0, (25.0,), (-20.0,), 15.0, 0.3),
        (0.0, (0.0,), (20.0,), -5.0, 0.4),
    ])


def g0_three_expert() -> MixingMeasure:
    """Three-expert truth used across the studies (dim 1)."""
    return make_measure([
        (-2.0, (3.0,), (1.0,), 0.0, 1.0),
        (1.0, (-3.5,), (8.0,), 7.0, 0.8),
        (0.0, (0.0,), (3.0,), 5.0, 0.6),
    ])


def random_measure(rng: np.random.Generator, k: int, dim: int,
                   scale: float = 1.0) -> MixingMeasure:
    rows = []
    for _ in range(k):
        rows.append((
            float(rng.normal(0.0, scale)),
            rng.normal(0.0, scale, size=dim),
            rng.normal(0.0, scale, size=dim),
            float(rng.normal(0.0, scale)),
            float(np.exp(rng.normal(0.0, 0.5))),
        ))
    return make_measure(rows, dim=dim)


def random_dataset(rng: np.random.Generator, n: int, dim: int) -> Dataset:
    return Dataset(xs=rng.uniform(-1.0, 1.0, size=(n, dim)),
                   ys=rng.normal(0.0, 2.0, size=n))


# ---------------------------------------------------------------------------
# naive reference implementations

def naive_gates(measure: MixingMeasure, x: np.ndarray) -> list[float]:
    scores = [float(np.dot(at.omega1, x)) + at.omega0 for at in measure.atoms]
    mx = max(scores)
    es = [math.exp(s - mx) for s in scores]
    tot = sum(es)
    return [e / tot for e in es]


def naive_density(measure: MixingMeasure, x: np.ndarray, y: float) -> float:
    gates = naive_gates(measure, x)
    dens = 0.0
    for g, at in zip(gates, measure.atoms):
        mean = float(np.dot(at.a, x)) + at.b
        dens += g * math.exp(-0.5 * (y - mean) ** 2 / at.sigma) / math.sqrt(
            2.0 * math.pi * at.sigma)
    return dens


def naive_avg_loglik(measure: MixingMeasure, data: Dataset) -> float:
    total = 0.0
    for i in range(data.n):
        total += math.log(max(naive_density(measure, data.xs[i], float(data.ys[i])),
                              1e-300))
    return total / data.n


# ---------------------------------------------------------------------------
# brute-force loss oracle (dim 1 only)
#
# Re-derives the loss integrand from scratch: hand canonicalization, loop
# partition, plain-formula terms; the only vectorization is over the (t0, t1)
# evaluation mesh.

def _exponent_for(m: int) -> int:
    return {1: 1, 2: 4, 3: 6}.get(m, 7)


def naive_loss_objective(fitted: MixingMeasure, reference: MixingMeasure,
                         order: int):
    assert fitted.dim == 1 and reference.dim == 1
    lastF, lastR = fitted.atoms[-1], reference.atoms[-1]
    wF = [math.exp(at.omega0 - lastF.omega0) for at in fitted.atoms]
    oF = [float(at.omega1[0] - lastF.omega1[0]) for at in fitted.atoms]
    wR = [math.exp(at.omega0 - lastR.omega0) for at in reference.atoms]
    oR = [float(at.omega1[0] - lastR.omega1[0]) for at in reference.atoms]

    def theta_f(l):
        at = fitted.atoms[l]
        return (oF[l], float(at.a[0]), at.b, at.sigma)

    def theta_r(k):
        at = reference.atoms[k]
        return (oR[k], float(at.a[0]), at.b, at.sigma)

    cells: dict[int, list[int]] = {k: [] for k in range(reference.n_atoms)}
    for l in range(fitted.n_atoms):
        dists = [sum((u - v) ** 2 for u, v in zip(theta_f(l), theta_r(k)))
                 for k in range(reference.n_atoms)]
        cells[min(range(reference.n_atoms), key=lambda k: (dists[k], k))].append(l)

    def evaluate(t0, t1):
        t0 = np.asarray(t0, dtype=float)
        t1 = np.asarray(t1, dtype=float)
        total = np.zeros(np.broadcast(t0, t1).shape)
        for k in range(reference.n_atoms):
            members = cells[k]
            ref = reference.atoms[k]
            with np.errstate(over="ignore"):
                total += np.abs(sum(wF[l] for l in members) - wR[k] * np.exp(t0))
            do = [oF[l] - oR[k] for l in members]
            da = [float(fitted.atoms[l].a[0] - ref.a[0]) for l in members]
            db = [fitted.atoms[l].b - ref.b for l in members]
            ds = [fitted.atoms[l].sigma - ref.sigma for l in members]
            m = len(members)
            if m == 1:
                total += wF[members[0]] * np.sqrt(
                    (do[0] - t1) ** 2 + da[0] ** 2 + db[0] ** 2 + ds[0] ** 2)
            elif m >= 2:
                if order >= 1:
                    r = _exponent_for(m)
                    for i, l in enumerate(members):
                        fast = np.sqrt((do[i] - t1) ** 2 + db[i] ** 2)
                        slow = math.sqrt(da[i] ** 2 + ds[i] ** 2)
                        total += wF[l] * (fast ** r + slow ** (r / 2.0))
                if order >= 2:
                    ws = [wF[l] for l in members]
                    total += abs(sum(w * d for w, d in zip(ws, db)))
                    total += np.abs(sum(w * (d - t1) for w, d in zip(ws, do)))
                    total += abs(sum(w * (d ** 2 + s)
                                     for w, d, s in zip(ws, db, ds)))
                    total += np.abs(sum(w * ((d - t1) * e + f)
                                        for w, d, e, f in zip(ws, do, db, da)))
                    total += np.abs(sum(w * (d - t1) ** 2
                                        for w, d in zip(ws, do)))
        return total

    return evaluate


def grid_loss_oracle(fitted: MixingMeasure, reference: MixingMeasure,
                     order: int, span: float = 3.0, coarse: int = 2001,
                     zooms: int = 2, zoom_res: int = 401) -> float:
    """Minimize the naive objective on a dense (t0, t1) grid, then refine."""
    f = naive_loss_objective(fitted, reference, order)
    lo0, hi0, lo1, hi1 = -span, span, -span, span
    res = coarse
    best = math.inf
    for stage in range(zooms + 1):
        g0 = np.linspace(lo0, hi0, res)
        g1 = np.linspace(lo1, hi1, res)
        vals = f(g0[:, None], g1[None, :])
        idx = np.unravel_index(int(np.argmin(vals)), vals.shape)
        best = min(best, float(vals[idx]))
        c0, c1 = float(g0[idx[0]]), float(g1[idx[1]])
        s0 = (hi0 - lo0) / (res - 1)
        s1 = (hi1 - lo1) / (res - 1)
        lo0, hi0 = c0 - 2 * s0, c0 + 2 * s0
        lo1, hi1 = c1 - 2 * s1, c1 + 2 * s1
        res = zoom_res
    return best


def perturbed_copy(measure: MixingMeasure, rng: np.random.Generator,
                   scale: float, extra: int = 0) -> MixingMeasure:
    """Noisy copy with optional duplicated atoms, handy for loss tests.

    Extra duplicates go in front so the original last atom stays last;
    losses canonicalize on the last atom, so keeping it aligned with the
    reference keeps the optimal translation near the origin.
    """
    rows = []
    src = [measure.atoms[rng.integers(measure.n_atoms)]
           for _ in range(extra)] + list(measure.atoms)
    for at in src:
        rows.append((
            at.omega0 + float(rng.normal(0.0, scale)),
            np.asarray(at.omega1) + rng.normal(0.0, scale, size=measure.dim),
            np.asarray(at.a) + rng.normal(0.0, scale, size=measure.dim),
            at.b + float(rng.normal(0.0, scale)),
            at.sigma * float(np.exp(rng.normal(0.0, scale))),
        ))
    return make_measure(rows, dim=measure.dim)

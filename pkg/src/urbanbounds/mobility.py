"""Displacement and radius-of-gyration statistics with piecewise MLE fits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

import numpy as np
from scipy import integrate, optimize

from .ingest import Trajectory, TrajectorySet

MODELS = ("exponential", "stretched_exponential", "power_law", "truncated_power_law")
MIN_SAMPLES = 30
INF = math.inf

# (range, model) defaults for displacements, the double power law split at 4 km
# and the radius of gyration.
DISPLACEMENT_SEGMENTS = (((10.0, 70.0), "exponential"),
                         ((100.0, 70_000.0), "stretched_exponential"),
                         ((70_000.0, INF), "power_law"))
DISPLACEMENT_TWO_POWER = (((70.0, 4_000.0), "power_law"),
                          ((4_000.0, 100_000.0), "power_law"))
GYRATION_SEGMENTS = (((10.0, 30.0), "exponential"),
                     ((50.0, 10_000.0), "stretched_exponential"),
                     ((10_000.0, 100_000.0), "power_law"))
LOCATION_COUNT_SEGMENTS = (((1.0, INF), "truncated_power_law"),)


class FitError(RuntimeError):
    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


class Displacement(NamedTuple):
    user_id: str
    src: tuple
    dst: tuple
    d: float
    t_from: float
    t_to: float


def displacements(traj: Trajectory, min_d: float = 0.0) -> list[Displacement]:
    """One displacement per consecutive pair with ``d >= min_d``."""
    d = np.hypot(np.diff(traj.x), np.diff(traj.y))
    out = []
    for i in np.flatnonzero(d >= min_d):
        out.append(Displacement(traj.user_id, (float(traj.x[i]), float(traj.y[i])),
                                (float(traj.x[i + 1]), float(traj.y[i + 1])), float(d[i]),
                                float(traj.t[i]), float(traj.t[i + 1])))
    return out


@dataclass
class DisplacementArrays:
    """Columnar displacements of a whole :class:`TrajectorySet`."""

    user: np.ndarray
    x0: np.ndarray
    y0: np.ndarray
    x1: np.ndarray
    y1: np.ndarray
    d: np.ndarray

    def __len__(self):
        return len(self.d)

    def take(self, idx) -> "DisplacementArrays":
        return DisplacementArrays(self.user[idx], self.x0[idx], self.y0[idx],
                                  self.x1[idx], self.y1[idx], self.d[idx])


def displacement_arrays(trajs: TrajectorySet) -> DisplacementArrays:
    uidx = trajs.user_index()
    same = uidx[1:] == uidx[:-1]
    i = np.flatnonzero(same)
    x0, y0, x1, y1 = trajs.x[i], trajs.y[i], trajs.x[i + 1], trajs.y[i + 1]
    return DisplacementArrays(uidx[i], x0, y0, x1, y1, np.hypot(x1 - x0, y1 - y0))


def radius_of_gyration(traj: Trajectory) -> float:
    cx, cy = traj.x.mean(), traj.y.mean()
    return math.sqrt(float(np.mean((traj.x - cx) ** 2 + (traj.y - cy) ** 2)))


def gyration_radii(trajs: TrajectorySet) -> np.ndarray:
    n = np.diff(trajs.offsets).astype(float)
    if len(n) == 0:
        return np.zeros(0)
    uidx = trajs.user_index()
    cx = np.bincount(uidx, trajs.x, len(n)) / n
    cy = np.bincount(uidx, trajs.y, len(n)) / n
    dev = (trajs.x - cx[uidx]) ** 2 + (trajs.y - cy[uidx]) ** 2
    return np.sqrt(np.bincount(uidx, dev, len(n)) / n)


def location_counts(trajs: TrajectorySet) -> np.ndarray:
    """Number of distinct recorded locations per user."""
    uidx = trajs.user_index()
    if len(uidx) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((trajs.y, trajs.x, uidx))
    u, x, y = uidx[order], trajs.x[order], trajs.y[order]
    new = np.concatenate(([True], (u[1:] != u[:-1]) | (x[1:] != x[:-1]) | (y[1:] != y[:-1])))
    return np.bincount(u[new], minlength=len(trajs))


def empirical_ccdf(samples) -> tuple[np.ndarray, np.ndarray]:
    """Distinct sample values and P(X >= x) at each."""
    s = np.sort(np.asarray(samples, dtype=float))
    if len(s) == 0:
        raise ValueError("empirical_ccdf needs at least one sample")
    xs, first = np.unique(s, return_index=True)
    return xs, 1.0 - first / len(s)


# -- likelihoods -------------------------------------------------------------
# Each family is a density on [lo, hi) normalised over that range. The 2-D
# fits rescale samples by lo so the optimiser works on O(1) numbers;
# log-likelihoods are reported for the original units.

def _ll_exponential(lam, x, lo, hi):
    if lam <= 0:
        return -INF
    n = len(x)
    z = 1.0 if hi == INF else -math.expm1(-lam * (hi - lo))
    if z <= 0:
        return -INF
    return n * math.log(lam) - lam * float(np.sum(x - lo)) - n * math.log(z)


def _ll_stretched(lam, beta, x, lo, hi, sumlog):
    if lam <= 0 or beta <= 0:
        return -INF
    n = len(x)
    lob = lo ** beta
    z = 1.0 if hi == INF else -math.expm1(-lam * (hi ** beta - lob))
    if not z > 0:
        return -INF
    return (n * math.log(beta * lam) + (beta - 1) * sumlog
            - lam * float(np.sum(x ** beta - lob)) - n * math.log(z))


def _power_norm(alpha, lo, hi):
    """log of the integral of x^-alpha over [lo, hi]."""
    a = 1.0 - alpha
    if hi == INF:
        if a >= 0:
            return INF
        return a * math.log(lo) - math.log(-a)
    lh, ll = math.log(hi), math.log(lo)
    if abs(a) < 1e-12:
        return math.log(lh - ll)
    # lo^a * (exp(a (lh - ll)) - 1) / a, computed in log space
    e = math.expm1(a * (lh - ll)) / a
    return a * ll + math.log(e)


def _ll_power(alpha, n, sumlog, lo, hi):
    z = _power_norm(alpha, lo, hi)
    if z == INF:
        return -INF
    return -alpha * sumlog - n * z


def _tpl_norm(alpha, lam, lo, hi):
    """log of the integral of x^-alpha e^(-lam x) over [lo, hi] (lo > 0)."""
    # substitute x = lo * e^v; integrand e^{(1-alpha)(v + ln lo) - lam lo e^v} lo
    a = 1.0 - alpha
    c = lam * lo
    vmax = math.log(hi / lo) if hi != INF else INF
    if c <= 0 and (vmax == INF and a >= 0):
        return INF
    if c > 0:
        # beyond this the integrand is below e^-60 of its peak value
        cap = math.log(max(1.0, (60.0 + abs(a) * 40.0) / c)) + 2.0
        vmax = min(vmax, cap)
    g = lambda v: (a * v - c * math.exp(v))
    peak_v = min(max(math.log(a / c), 0.0), vmax) if (a > 0 and c > 0) else 0.0
    shift = g(peak_v)
    f = lambda v: math.exp(g(v) - shift)
    pts = [p for p in (peak_v,) if 0 < p < vmax]
    val, _ = integrate.quad(f, 0.0, vmax, points=pts or None, limit=400,
                            epsabs=0.0, epsrel=1e-12)
    if not val > 0:
        return INF
    return math.log(val) + shift + a * math.log(lo)


def _ll_tpl(alpha, lam, n, sumlog, sumx, lo, hi):
    if lam <= 0 or alpha <= 0:
        return -INF
    z = _tpl_norm(alpha, lam, lo, hi)
    if z == INF:
        return -INF
    return -alpha * sumlog - lam * sumx - n * z


@dataclass
class FitResult:
    model: str
    params: dict
    range: tuple
    n_samples: int
    log_likelihood: float
    fraction_of_population: float

    def to_dict(self) -> dict:
        lo, hi = self.range
        return {"model": self.model, "params": dict(sorted(self.params.items())),
                "range": [lo, None if hi == INF else hi], "n": self.n_samples,
                "log_likelihood": self.log_likelihood,
                "fraction": self.fraction_of_population}


def log_likelihood(model: str, params: dict, samples, rng: tuple) -> float:
    """Log-likelihood of in-range samples under a parameterised family."""
    lo, hi = rng
    x = _in_range(np.asarray(samples, dtype=float), lo, hi)
    if model == "exponential":
        return _ll_exponential(params["lambda"], x, lo, hi)
    if model == "stretched_exponential":
        return _ll_stretched(params["lambda"], params["beta"], x, lo, hi, float(np.sum(np.log(x))))
    if model == "power_law":
        return _ll_power(params["alpha"], len(x), float(np.sum(np.log(x))), lo, hi)
    if model == "truncated_power_law":
        return _ll_tpl(params["alpha"], params["lambda"], len(x), float(np.sum(np.log(x))),
                       float(np.sum(x)), lo, hi)
    raise ValueError(f"unknown model {model!r}")


def _in_range(x, lo, hi):
    if hi == INF:
        return x[x >= lo]
    return x[(x >= lo) & (x < hi)]


def fit_distribution(samples, model: str, rng: tuple = (0.0, INF)) -> FitResult:
    """Maximum-likelihood fit of ``model`` to the samples inside ``rng``.

    ``rng`` is ``[lo, hi)`` (``hi`` may be ``inf``); ``x_min`` is ``lo``.
    """
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    lo, hi = float(rng[0]), float(rng[1])
    if not lo < hi:
        raise ValueError("range needs lo < hi")
    if model != "exponential" and lo <= 0:
        raise ValueError(f"{model} needs lo > 0")
    allx = np.asarray(samples, dtype=float)
    x = _in_range(allx, lo, hi)
    n = len(x)
    if n < MIN_SAMPLES:
        raise FitError(f"{model} fit on [{lo}, {hi}) has {n} samples, need {MIN_SAMPLES}")
    frac = n / len(allx)

    if model == "exponential":
        mean_excess = float(np.mean(x - lo))
        if hi == INF:
            if not mean_excess > 0:
                raise FitError("degenerate sample: all values at lo")
            lam = 1.0 / mean_excess
        else:
            u0 = math.log(1.0 / max(mean_excess, 1e-300))
            lam = math.exp(_max1d(lambda u: _ll_exponential(math.exp(u), x, lo, hi),
                                  (u0 - 30.0, u0 + 30.0), "exponential"))
        params = {"lambda": lam}
        ll = _ll_exponential(lam, x, lo, hi)

    elif model == "power_law":
        sumlog = float(np.sum(np.log(x)))
        slog = float(np.sum(np.log(x / lo)))
        if hi == INF:
            if not slog > 0:
                raise FitError("degenerate sample: all values at lo")
            alpha = 1.0 + n / slog
        else:
            alpha = _max1d(lambda a: _ll_power(a, n, sumlog, lo, hi), (1e-9, 50.0), "power_law")
        params = {"alpha": alpha}
        ll = _ll_power(alpha, n, sumlog, lo, hi)

    elif model == "stretched_exponential":
        s = lo
        xs = x / s
        sumlog = float(np.sum(np.log(xs)))
        his = hi / s
        f = lambda p: -_ll_stretched(math.exp(p[0]), math.exp(p[1]), xs, 1.0, his, sumlog)
        p0 = [math.log(1.0 / max(float(np.mean(xs)) - 1.0, 1e-6)), math.log(0.5)]
        p = _nelder_mead(f, p0, model)
        lam_s, beta = math.exp(p[0]), math.exp(p[1])
        params = {"lambda": lam_s * s ** (-beta), "beta": beta}
        ll = _ll_stretched(params["lambda"], beta, x, lo, hi, float(np.sum(np.log(x))))

    else:  # truncated_power_law
        s = lo
        xs = x / s
        sumlog = float(np.sum(np.log(xs)))
        sumx = float(np.sum(xs))
        his = hi / s
        f = lambda p: -_ll_tpl(p[0], math.exp(p[1]), n, sumlog, sumx, 1.0, his)
        a0 = 1.0 + n / max(sumlog, 1e-9)
        p0 = [min(a0, 5.0), math.log(1.0 / float(np.mean(xs)))]
        p = _nelder_mead(f, p0, model)
        params = {"alpha": float(p[0]), "lambda": math.exp(p[1]) / s}
        ll = _ll_tpl(params["alpha"], params["lambda"], n, float(np.sum(np.log(x))),
                     float(np.sum(x)), lo, hi)

    params["x_min"] = lo
    if not math.isfinite(ll):
        raise FitError(f"{model} fit did not reach a finite likelihood", params)
    return FitResult(model, params, (lo, hi), n, float(ll), frac)


def _max1d(fn, bounds, model):
    """Maximise a 1-D log-likelihood over ``bounds`` (bounded Brent)."""
    def g(v):
        ll = fn(v)
        return -ll if math.isfinite(ll) else 1e300
    res = optimize.minimize_scalar(g, bounds=bounds, method="bounded",
                                   options={"xatol": 1e-12, "maxiter": 2000})
    if not res.success:
        raise FitError(f"{model} fit did not converge", res.x)
    return float(res.x)


def _nelder_mead(f, p0, model):
    p = np.asarray(p0, dtype=float)
    f0 = f(p)
    if not math.isfinite(f0):
        raise FitError(f"{model} fit: infeasible starting point", p)
    # log-likelihoods scale with n; an absolute fatol below float noise never converges
    opts = {"xatol": 1e-9, "fatol": 1e-13 * max(1.0, abs(f0)), "maxiter": 4000, "adaptive": True}
    best = optimize.minimize(f, p, method="Nelder-Mead", options=opts)
    # one restart from the optimum guards against a collapsed simplex
    again = optimize.minimize(f, best.x, method="Nelder-Mead", options=opts)
    if again.fun < best.fun:
        best = again
    if not (best.success and math.isfinite(best.fun)):
        raise FitError(f"{model} fit did not converge: {best.message}", best.x)
    return best.x


@dataclass
class SegmentedFit:
    fits: list
    breakpoints: list = field(default_factory=list)

    def covered_fraction(self) -> float:
        return float(sum(f.fraction_of_population for f in self.fits))

    def to_dict(self) -> dict:
        return {"segments": [f.to_dict() for f in self.fits],
                "breakpoints": [None if b == INF else b for b in self.breakpoints],
                "covered_fraction": self.covered_fraction()}


def segmented_fit(samples, segments: Iterable) -> SegmentedFit:
    """Fit each ``((lo, hi), model)`` segment separately."""
    segments = [((float(r[0]), float(r[1])), m) for r, m in segments]
    for (a, b), (c, _) in zip(segments, segments[1:]):
        if not (a[1] <= c[0]):
            raise ValueError("segments must be ordered and non-overlapping")
    fits = [fit_distribution(samples, m, r) for r, m in segments]
    bps = sorted({v for r, _ in segments for v in r})
    return SegmentedFit(fits, bps)


def gyration_cell_size(fit: SegmentedFit) -> float:
    """Breakpoint between the stretched-exponential and power-law regimes."""
    for a, b in zip(fit.fits, fit.fits[1:]):
        if a.model == "stretched_exponential" and b.model == "power_law":
            return b.range[0]
    raise ValueError("no stretched-exponential -> power-law transition in the fit")


def ccdf_csv(samples) -> str:
    xs, ps = empirical_ccdf(samples)
    lines = ["x,ccdf"] + [f"{a!r},{b!r}" for a, b in zip(xs.tolist(), ps.tolist())]
    return "\n".join(lines) + "\n"


def fit_or_error(samples, segments) -> dict:
    """Segment-wise fit report that records failures instead of raising."""
    out = []
    n = len(samples)
    for r, m in segments:
        try:
            out.append(fit_distribution(samples, m, r).to_dict())
        except FitError as e:
            lo, hi = r
            out.append({"model": m, "range": [lo, None if hi == INF else hi],
                        "error": str(e), "n_total": n})
    return {"segments": out}

"""Closed-loop LTI identification (shared third-order denominator) and pole-zero checks."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, signal

AXES = ("x", "y", "z")

# reference closed-loop model: shared denominator and per-axis numerators (s^2, s, 1)
REFERENCE_DENOMINATOR = (1.0, 3.554, 6.438, 2.809)
REFERENCE_NUMERATORS = (
    (49.89, 164.9, 26.27),
    (-0.09798, -10.07, -24.67),
    (1.006, 1.020, 3.836),
)

DEFAULT_MSE_THRESHOLD = 0.05  # normalized held-out MSE above which a fit is flagged poor


class IdentificationError(ValueError):
    """Regression is rank deficient or the data are unusable."""


@dataclass
class TransferFunctionFit:
    numerators: np.ndarray  # (axes, 3) coefficients of s^2, s, 1
    denominator: np.ndarray  # (4,) monic, s^3 first
    sample_rate: float
    mse: float  # raw held-out simulation MSE, m^2
    mse_normalized: float  # held-out MSE divided by output variance, averaged over axes
    train_fraction: float = 0.75
    poor_fit: bool = False
    per_axis_mse: np.ndarray | None = None
    axes: tuple = AXES
    discrete: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    def simulate(self, u):
        """Zero-initial-state response to a piecewise-constant input (ZOH), shape like ``u``."""
        return simulate_tf(self.numerators, self.denominator, u, self.dt)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "axes": list(self.axes),
            "numerators": np.asarray(self.numerators).tolist(),
            "denominator": np.asarray(self.denominator).tolist(),
            "sample_rate_hz": self.sample_rate,
            "mse_m2": self.mse,
            "mse_normalized": self.mse_normalized,
            "per_axis_mse_m2": None if self.per_axis_mse is None else np.asarray(self.per_axis_mse).tolist(),
            "train_fraction": self.train_fraction,
            "poor_fit": bool(self.poor_fit),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransferFunctionFit":
        return cls(
            numerators=np.asarray(d["numerators"], dtype=float),
            denominator=np.asarray(d["denominator"], dtype=float),
            sample_rate=float(d["sample_rate_hz"]),
            mse=float(d["mse_m2"]),
            mse_normalized=float(d["mse_normalized"]),
            train_fraction=float(d.get("train_fraction", 0.75)),
            poor_fit=bool(d.get("poor_fit", False)),
            per_axis_mse=None if d.get("per_axis_mse_m2") is None else np.asarray(d["per_axis_mse_m2"]),
            axes=tuple(d.get("axes", AXES)),
        )


def simulate_tf(numerators, denominator, u, dt):
    """Simulate each axis' ``num/den`` on column ``u[:, i]`` with zero initial state."""
    u = np.asarray(u, dtype=float)
    nums = np.atleast_2d(np.asarray(numerators, dtype=float))
    if u.ndim == 1:
        u = u[:, None]
    out = np.empty((u.shape[0], nums.shape[0]))
    for i, num in enumerate(nums):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", signal.BadCoefficients)
            bd, ad, _ = signal.cont2discrete((num, np.asarray(denominator, dtype=float)), dt, method="zoh")
        out[:, i] = signal.lfilter(np.ravel(bd), ad, u[:, i])
    return out


def synthesize(numerators=REFERENCE_NUMERATORS, denominator=REFERENCE_DENOMINATOR, duration=60.0, sample_rate=50.0, seed=0, noise_std=0.0, hold=5):
    """Random piecewise-constant input (held ``hold`` samples) and the exact ZOH response."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    nums = np.atleast_2d(numerators)
    levels = rng.standard_normal((n // hold + 1, nums.shape[0]))
    u = np.repeat(levels, hold, axis=0)[:n]
    y = simulate_tf(nums, denominator, u, 1.0 / sample_rate)
    if noise_std:
        y = y + noise_std * rng.standard_normal(y.shape)
    return u, y


def _arx_regression(u, y, order=3, shared=True):
    """Discrete least squares: y[k] + a1 y[k-1] + ... = b1 u[k-1] + ... + b_order u[k-order]."""
    n, m = y.shape
    k = np.arange(order, n)
    rows, rhs = [], []
    for i in range(m):
        Y = np.column_stack([-y[k - j, i] for j in range(1, order + 1)])
        U = np.column_stack([u[k - j, i] for j in range(1, order + 1)])
        block = np.zeros((len(k), order + m * order))
        block[:, :order] = Y
        block[:, order + i * order : order + (i + 1) * order] = U
        rows.append(block)
        rhs.append(y[k, i])
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    if np.linalg.matrix_rank(A) < A.shape[1]:
        raise IdentificationError("rank-deficient regression; the input is not persistently exciting")
    theta, *_ = np.linalg.lstsq(A, b, rcond=None)
    a = np.concatenate([[1.0], theta[:order]])
    bs = theta[order:].reshape(m, order)
    return a, bs


def _d2c(a, bs, dt):
    """Exact inverse of ZOH discretization through the matrix logarithm."""
    order = len(a) - 1
    nums_c = []
    den_c = None
    for b in bs:
        Ad, Bd, Cd, Dd = signal.tf2ss(np.concatenate([[0.0], b]), a)
        n = Ad.shape[0]
        big = np.zeros((n + 1, n + 1))
        big[:n, :n] = Ad
        big[:n, n:] = Bd
        big[n, n] = 1.0
        L = linalg.logm(big) / dt
        if np.iscomplexobj(L):
            if np.max(np.abs(L.imag)) > 1e-6 * max(1.0, np.max(np.abs(L.real))):
                raise IdentificationError("discrete model has no real continuous-time equivalent")
            L = L.real
        Ac, Bc = L[:n, :n], L[:n, n:]
        num, den = signal.ss2tf(Ac, Bc, Cd, np.zeros_like(Dd))
        num = np.ravel(num)[-order:]
        den_c = den if den_c is None else den_c
        nums_c.append(num)
    return np.asarray(nums_c), np.asarray(den_c)


def fit_lti(u, y, sample_rate=50.0, train_fraction=0.75, common_denominator=True, refine=True, mse_threshold=DEFAULT_MSE_THRESHOLD, min_duration=30.0) -> TransferFunctionFit:
    """Fit per-axis ``(b2 s^2 + b1 s + b0) / (s^3 + a2 s^2 + a1 s + a0)`` with a shared denominator.

    ``u`` and ``y`` are (N, axes) deviations sampled at ``sample_rate`` with
    a zero initial state.  The first ``train_fraction`` of the record is used
    for fitting; the reported MSE is the simulation error on the remainder.
    With ``common_denominator=False`` each axis gets its own denominator and
    the stored denominator is that of the first axis (see ``fits`` in
    ``discrete``).
    """
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    if u.ndim == 1:
        u, y = u[:, None], y[:, None]
    if u.shape != y.shape:
        raise ValueError(f"input and output shapes differ: {u.shape} vs {y.shape}")
    n, m = y.shape
    dt = 1.0 / sample_rate
    if n * dt < min_duration - 1e-9:
        raise IdentificationError(f"need at least {min_duration} s of data, got {n * dt:.2f} s")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
        raise IdentificationError("non-finite samples")
    n_train = int(round(train_fraction * n))
    if not common_denominator and m > 1:
        fits = [fit_lti(u[:, [i]], y[:, [i]], sample_rate, train_fraction, True, refine, mse_threshold, min_duration) for i in range(m)]
        nums = np.vstack([f.numerators for f in fits])
        pred = np.column_stack([f.simulate(u[:, [i]])[:, 0] for i, f in enumerate(fits)])
        return _finish(nums, fits[0].denominator, u, y, pred, n_train, sample_rate, train_fraction, mse_threshold, {"per_axis_denominators": [f.denominator.tolist() for f in fits]})

    a, bs = _arx_regression(u[:n_train], y[:n_train])
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", signal.BadCoefficients)
            nums, den = _d2c(a, bs, dt)
    except (IdentificationError, ValueError, np.linalg.LinAlgError):
        # fall back to the bilinear map when the discrete poles have no real logarithm
        pairs = [_inverse_bilinear(np.concatenate([[0.0], b]), a, dt) for b in bs]
        nums, den = np.asarray([p[0] for p in pairs]), pairs[0][1]
    nums, den = nums / den[0], den / den[0]
    if refine:
        nums, den = _refine(u[:n_train], y[:n_train], dt, nums, den)
    pred = simulate_tf(nums, den, u, dt)
    return _finish(nums, den, u, y, pred, n_train, sample_rate, train_fraction, mse_threshold, {"arx_denominator": a.tolist(), "arx_numerators": bs.tolist()})


# generic stable starting denominators for the output-error search
_START_POLES = ([-1.0, -1.0, -1.0], [-0.5, -1.0, -2.0], [-2.0, -3.0, -5.0], [-0.5, -1 + 1j, -1 - 1j], [-0.2, -0.5, -1.0])


def _basis(den, u, dt):
    """Responses of s^2/den, s/den and 1/den to every input column, shape (N, axes, 3)."""
    out = np.empty(u.shape + (3,))
    for j, num in enumerate(([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0])):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", signal.BadCoefficients)
            bd, ad, _ = signal.cont2discrete((num, den), dt, method="zoh")
        out[..., j] = signal.lfilter(np.ravel(bd), ad, u, axis=0)
    return out


def _project(den, u, y, dt):
    """Best numerators for a fixed denominator (variable projection) and the residual."""
    G = _basis(den, u, dt)
    nums = np.empty((y.shape[1], 3))
    res = np.empty_like(y)
    for i in range(y.shape[1]):
        nums[i], *_ = np.linalg.lstsq(G[:, i, :], y[:, i], rcond=None)
        res[:, i] = G[:, i, :] @ nums[i] - y[:, i]
    return nums, res


def _refine(u, y, dt, nums0, den0):
    """Continuous-time output-error polish over the three denominator coefficients."""
    scale = np.sqrt(np.mean(y**2)) or 1.0

    def resid(theta):
        den = np.concatenate([[1.0], theta])
        if not np.all(np.isfinite(theta)) or not np.all(np.roots(den).real < 0):
            return np.full(y.size, 1e3)
        with np.errstate(all="ignore"):
            r = _project(den, u, y, dt)[1].ravel() / scale
        return r if np.all(np.isfinite(r)) else np.full(y.size, 1e3)

    starts = [np.poly(p).real for p in _START_POLES]
    if np.all(np.isfinite(den0)) and np.all(np.roots(den0).real < 0):
        starts.insert(0, np.asarray(den0, dtype=float))
    best_cost = np.inf
    best = np.asarray(den0, dtype=float)
    for d0 in starts:
        r0 = resid(d0[1:])
        if np.max(np.abs(r0)) >= 1e3:
            continue
        sol = optimize.least_squares(resid, d0[1:], method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=400)
        cost = float(np.sum(sol.fun**2))
        if cost < best_cost:
            best_cost, best = cost, np.concatenate([[1.0], sol.x])
        if best_cost < 1e-20:
            break
    if not np.isfinite(best_cost):
        return nums0, den0
    nums, _ = _project(best, u, y, dt)
    return nums, best


def _inverse_bilinear(bz, az, dt):
    """Continuous ``num/den`` whose Tustin discretization is ``bz/az`` (z^-1 polynomials)."""
    order = len(az) - 1
    # substitute z = (1 + s dt/2) / (1 - s dt/2) in z^-k polynomials
    p = np.poly1d([dt / 2, 1.0])  # 1 + s dt/2
    q = np.poly1d([-dt / 2, 1.0])  # 1 - s dt/2

    def conv(c):
        out = np.poly1d([0.0])
        for k, ck in enumerate(c):
            out = out + (q**k * p ** (order - k)) * float(ck)
        return out
    num, den = conv(bz), conv(az)
    lead = den.coeffs[0]
    num_c = (num.coeffs / lead)[-order:]
    return num_c, den.coeffs / lead


def _finish(nums, den, u, y, pred, n_train, sample_rate, train_fraction, mse_threshold, extra):
    err = pred[n_train:] - y[n_train:]
    if err.size == 0:
        err = pred - y
        held = y
    else:
        held = y[n_train:]
    per_axis = np.mean(err**2, axis=0)
    var = np.var(held, axis=0)
    norm = float(np.mean(per_axis / np.where(var > 0, var, 1.0)))
    return TransferFunctionFit(
        numerators=np.asarray(nums, dtype=float),
        denominator=np.asarray(den, dtype=float),
        sample_rate=float(sample_rate),
        mse=float(np.mean(per_axis)),
        mse_normalized=norm,
        train_fraction=train_fraction,
        poor_fit=bool(not np.isfinite(norm) or norm > mse_threshold),
        per_axis_mse=per_axis,
        axes=AXES[: nums.shape[0]] if nums.shape[0] <= 3 else tuple(f"axis{i}" for i in range(nums.shape[0])),
        discrete=extra,
    )


def heldout_mse(fit: TransferFunctionFit, u, y) -> float:
    """Recompute the held-out raw MSE of ``fit`` on the data it was fitted to."""
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    pred = fit.simulate(np.asarray(u, dtype=float).reshape(len(u), -1))
    n_train = int(round(fit.train_fraction * len(y)))
    return float(np.mean(np.mean((pred[n_train:] - y[n_train:]) ** 2, axis=0)))


# pole-zero analysis --------------------------------------------------------


@dataclass
class PoleZeroReport:
    poles: np.ndarray
    zeros: list  # per axis
    bibo_stable: bool
    minimum_phase: list  # per axis
    axes: tuple = AXES

    def to_dict(self) -> dict:
        c = lambda z: [[float(np.real(v)), float(np.imag(v))] for v in np.atleast_1d(z)]
        return {
            "poles": c(self.poles),
            "zeros": {a: c(z) for a, z in zip(self.axes, self.zeros)},
            "bibo_stable": bool(self.bibo_stable),
            "minimum_phase": {a: bool(v) for a, v in zip(self.axes, self.minimum_phase)},
        }


def polynomial_roots(coeffs):
    """Roots from the eigenvalues of the companion matrix; leading zeros are an error."""
    c = np.asarray(coeffs, dtype=float)
    if c.size == 0 or c[0] == 0.0 or not np.all(np.isfinite(c)):
        raise ValueError("degenerate polynomial: leading coefficient must be finite and nonzero")
    if c.size == 1:
        return np.zeros(0, dtype=complex)
    comp = np.zeros((c.size - 1, c.size - 1))
    comp[0, :] = -c[1:] / c[0]
    comp[1:, :-1] = np.eye(c.size - 2)
    return np.linalg.eigvals(comp).astype(complex)


def _strip_leading_zeros(c):
    c = np.asarray(c, dtype=float)
    nz = np.flatnonzero(c != 0.0)
    if nz.size == 0:
        raise ValueError("zero polynomial")
    return c[nz[0] :]


def classify(numerators, denominator, axes=AXES) -> PoleZeroReport:
    poles = polynomial_roots(denominator)
    zeros = [polynomial_roots(_strip_leading_zeros(n)) for n in np.atleast_2d(numerators)]
    return PoleZeroReport(
        poles=poles,
        zeros=zeros,
        bibo_stable=bool(np.all(poles.real < 0)),
        minimum_phase=[bool(np.all(z.real < 0)) for z in zeros],
        axes=tuple(axes)[: len(zeros)],
    )


def poles_zeros_classify(fit: TransferFunctionFit) -> PoleZeroReport:
    return classify(fit.numerators, fit.denominator, fit.axes)


def save_report(path, fit: TransferFunctionFit, report: PoleZeroReport, meta=None) -> None:
    out = {"fit": fit.to_dict(), "pole_zero": report.to_dict(), "meta": meta or {}}
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)

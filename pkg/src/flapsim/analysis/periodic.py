"""Flapping periodicity: dominant frequency, spectral energy share and phase-portrait closure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NO_MODE_FRACTION = 0.10
CLOSURE_THRESHOLD = 0.05


@dataclass
class SpectrumResult:
    fundamental_hz: float
    energy_fraction: float
    freqs: np.ndarray  # bins of the periodogram used for the energy split
    power: np.ndarray  # one-sided power per bin; sums to the AC power
    total_power: float
    dominant: bool

    def band_power(self, lo, hi) -> float:
        sel = (self.freqs >= lo) & (self.freqs <= hi)
        return float(np.sum(self.power[sel]))


def _one_sided_power(x):
    """Periodogram normalized so that the bins sum to mean(x**2) (Parseval)."""
    n = len(x)
    X = np.fft.rfft(x)
    p = np.abs(X) ** 2 / n**2
    p[1:] *= 2.0
    if n % 2 == 0:
        p[-1] /= 2.0
    return p


def spectral_analysis(x, sample_rate: float, fmin: float = 1.0, fmax: float = 20.0, pad: int = 8) -> SpectrumResult:
    """Dominant frequency in [fmin, fmax] and the share of AC power within +-1 bin of it.

    The peak is located on a zero-padded Hann spectrum with parabolic
    interpolation.  The energy split then uses an integer number of periods
    of that frequency so a pure tone falls on a single bin.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a 1-D series")
    dt = 1.0 / sample_rate
    if len(x) * dt < 2.0 / fmin:
        raise ValueError(f"series of {len(x) * dt:.3f} s is shorter than two periods of {fmin} Hz")
    ac = x - x.mean()
    total = float(np.mean(ac**2))
    if not np.isfinite(total) or total <= 1e-24 * max(1.0, float(np.mean(x**2))):
        raise ValueError("signal has no AC content; no fundamental")
    n = len(ac)
    nfft = int(2 ** np.ceil(np.log2(n * pad)))
    spec = np.abs(np.fft.rfft(ac * np.hanning(n), nfft))
    f = np.fft.rfftfreq(nfft, dt)
    band = np.flatnonzero((f >= fmin) & (f <= fmax))
    if band.size == 0:
        raise ValueError("no spectral bins inside the search band")
    k = band[np.argmax(spec[band])]
    if 0 < k < len(spec) - 1:
        a, b, c = np.log(spec[k - 1 : k + 2] + 1e-300)
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
    else:
        shift = 0.0
    f0 = float((k + shift) * sample_rate / nfft)

    # energy on a window holding a whole number of periods
    periods = int(np.floor(n * dt * f0))
    m = int(round(periods / f0 * sample_rate)) if periods >= 1 else n
    m = min(max(m, 2), n)
    seg = x[n - m :]
    seg = seg - seg.mean()
    p = _one_sided_power(seg)
    freqs = np.fft.rfftfreq(m, dt)
    j = int(round(f0 * m * dt))
    lo, hi = max(j - 1, 1), min(j + 1, len(p) - 1)
    seg_total = float(np.sum(p[1:]))
    frac = float(np.sum(p[lo : hi + 1]) / seg_total) if seg_total > 0 else 0.0
    return SpectrumResult(f0, frac, freqs, p, seg_total, frac >= NO_MODE_FRACTION)


@dataclass
class PhasePortrait:
    period: float  # s, mean cycle duration
    period_std: float
    cycles: int
    position_range: tuple  # (min, max) rad
    velocity_range: tuple  # (min, max) rad/s
    closure: float  # mean distance between successive loops / orbit diameter
    periodic: bool
    orbit: np.ndarray  # (phase samples, 2) mean loop in (q, qd)

    @property
    def position_span(self) -> float:
        return self.position_range[1] - self.position_range[0]

    @property
    def velocity_span(self) -> float:
        return self.velocity_range[1] - self.velocity_range[0]


def _upward_crossings(q, qd, dt, level, band=0.0):
    """Times where q crosses ``level`` upward, refined with a cubic Hermite segment.

    A crossing only counts after q has dropped below ``level - band`` since
    the previous one, so noise near the level cannot split a cycle.
    """
    d = q - level
    cand = np.flatnonzero((d[:-1] < 0) & (d[1:] >= 0))
    idx = []
    armed = True
    below = np.flatnonzero(d < -band)
    for i in cand:
        if idx:
            armed = np.any((below > idx[-1]) & (below <= i))
        if armed:
            idx.append(i)
    times = []
    for i in idx:
        y0, y1 = d[i], d[i + 1]
        m0, m1 = qd[i] * dt, qd[i + 1] * dt
        # Newton on the Hermite cubic over s in [0, 1], starting from the secant
        s = y0 / (y0 - y1)
        for _ in range(20):
            h00 = 2 * s**3 - 3 * s**2 + 1
            h10 = s**3 - 2 * s**2 + s
            h01 = -2 * s**3 + 3 * s**2
            h11 = s**3 - s**2
            val = h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1
            der = (6 * s**2 - 6 * s) * y0 + (3 * s**2 - 4 * s + 1) * m0 + (-6 * s**2 + 6 * s) * y1 + (3 * s**2 - 2 * s) * m1
            if der == 0:
                break
            step = val / der
            s = min(max(s - step, 0.0), 1.0)
            if abs(step) < 1e-15:
                break
        times.append((i + s) * dt)
    return np.asarray(times)


def _cycle_fit(t, q, qd, t0, t1, harmonics, phases):
    """Least-squares Fourier fit of one cycle, evaluated at common phases."""
    sel = (t >= t0) & (t <= t1)
    T = t1 - t0
    th = 2 * np.pi * (t[sel] - t0) / T
    cols = [np.ones_like(th)]
    for h in range(1, harmonics + 1):
        cols += [np.cos(h * th), np.sin(h * th)]
    B = np.column_stack(cols)
    cq, *_ = np.linalg.lstsq(B, q[sel], rcond=None)
    cd, *_ = np.linalg.lstsq(B, qd[sel], rcond=None)
    cols = [np.ones_like(phases)]
    for h in range(1, harmonics + 1):
        cols += [np.cos(h * phases), np.sin(h * phases)]
    E = np.column_stack(cols)
    return np.column_stack([E @ cq, E @ cd])


def phase_portrait(q, qd, sample_rate: float, min_cycles: int = 10, harmonics: int = 5, phase_samples: int = 64, hysteresis: float = 0.2) -> PhasePortrait:
    """Orbit statistics of a joint's (q, qd) trajectory.

    Cycles are cut at upward crossings of the mean position.  Each cycle is
    represented by a truncated Fourier series so loops can be compared at
    equal phase; the closure metric is the mean distance between successive
    loops in range-normalized (q, qd) coordinates divided by the orbit
    diameter in the same coordinates.
    """
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    if q.shape != qd.shape or q.ndim != 1:
        raise ValueError("q and qd must be 1-D series of equal length")
    dt = 1.0 / sample_rate
    t = np.arange(len(q)) * dt
    cross = _upward_crossings(q, qd, dt, float(np.mean(q)), hysteresis * float(np.ptp(q)))
    n_cycles = len(cross) - 1
    if n_cycles < min_cycles:
        raise ValueError(f"found {max(n_cycles, 0)} cycles, need at least {min_cycles}")
    periods = np.diff(cross)
    qr = (float(q.min()), float(q.max()))
    vr = (float(qd.min()), float(qd.max()))
    sq = max(qr[1] - qr[0], 1e-300)
    sv = max(vr[1] - vr[0], 1e-300)
    # at most 2 * harmonics + 1 coefficients per cycle; keep the fit overdetermined
    samples_per_cycle = np.min(periods) / dt
    h = int(min(harmonics, max(1, (samples_per_cycle - 2) // 2)))
    phases = np.linspace(0, 2 * np.pi, phase_samples, endpoint=False)
    loops = []
    for a, b in zip(cross[:-1], cross[1:]):
        loop = _cycle_fit(t, q, qd, a, b, h, phases)
        loops.append(np.column_stack([loop[:, 0] / sq, loop[:, 1] / sv]))
    loops = np.asarray(loops)
    mean_loop = loops.mean(axis=0)
    diam = float(np.max(np.linalg.norm(mean_loop[:, None, :] - mean_loop[None, :, :], axis=-1)))
    dists = np.linalg.norm(loops[1:] - loops[:-1], axis=-1).mean(axis=-1)
    closure = float(np.mean(dists) / diam) if diam > 0 else np.inf
    orbit = np.column_stack([mean_loop[:, 0] * sq, mean_loop[:, 1] * sv])
    return PhasePortrait(
        period=float(np.mean(periods)),
        period_std=float(np.std(periods)),
        cycles=n_cycles,
        position_range=qr,
        velocity_range=vr,
        closure=closure,
        periodic=bool(closure < CLOSURE_THRESHOLD),
        orbit=orbit,
    )

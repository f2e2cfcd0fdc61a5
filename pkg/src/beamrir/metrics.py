"""Room-acoustics evaluation metrics: loudness error, C50, EDT, T60.

Conventions (ISO-3382 style): the direct-arrival onset is the first sample
exceeding -20 dB of the absolute peak; decay times come from least-squares
line fits on the Schroeder backward-integration curve, with the integration
truncated at the last sample above a noise floor estimated from the final
10% of the signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import ImpulseResponse

ONSET_DB = -20.0
C50_CLAMP_DB = 60.0


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    loudness_err: float        # dB
    c50_err: float             # dB
    edt_err: float             # ms
    t60_err: float             # percent
    n_pairs: int
    n_invalid: int


def _samples(h):
    if isinstance(h, ImpulseResponse):
        return h.samples, h.sample_rate
    raise MetricError("expected an ImpulseResponse")


def _onset(x):
    peak = np.max(np.abs(x))
    if peak <= 0:
        raise MetricError("silent signal")
    thresh = peak * 10.0 ** (ONSET_DB / 20.0)
    return int(np.argmax(np.abs(x) >= thresh))


def loudness_error(pred: ImpulseResponse, gt: ImpulseResponse) -> float:
    """|10 log10(E_pred / E_gt)| with E the time-integrated squared signal."""
    e_p = pred.energy()
    e_g = gt.energy()
    if e_g <= 0:
        raise MetricError("ground truth has zero energy")
    if e_p <= 0:
        return float("inf")
    return abs(10.0 * np.log10(e_p / e_g))


def c50(h: ImpulseResponse) -> float:
    """Clarity: early (first 50 ms from onset) vs late energy ratio in dB."""
    x, sr = _samples(h)
    n0 = _onset(x)
    split = n0 + int(round(0.05 * sr))
    early = float(np.sum(x[n0:split] ** 2))
    late = float(np.sum(x[split:] ** 2))
    if late <= 0 and early <= 0:
        raise MetricError("no energy after onset")
    if late <= 0:
        return C50_CLAMP_DB
    if early <= 0:
        return -C50_CLAMP_DB
    return float(np.clip(10.0 * np.log10(early / late),
                         -C50_CLAMP_DB, C50_CLAMP_DB))


def schroeder_db(h: ImpulseResponse):
    """(times, decay curve in dB) from truncated backward integration."""
    x, sr = _samples(h)
    n0 = _onset(x)
    x = x[n0:]
    e = x * x
    tail = e[int(0.9 * len(e)):]
    floor = float(tail.mean()) if len(tail) else 0.0
    above = np.flatnonzero(e > 2.0 * floor)
    end = int(above[-1]) + 1 if len(above) else len(e)
    e = e[:end]
    sch = np.flip(np.cumsum(np.flip(e)))
    if sch[0] <= 0:
        raise MetricError("no energy after onset")
    db = 10.0 * np.log10(np.maximum(sch / sch[0], 1e-30))
    return np.arange(len(db)) / sr, db


def _fit_decay(times, db, lo, hi):
    """Slope-fit decay time over the [lo, hi] dB window, or None."""
    mask = (db <= lo) & (db >= hi)
    if mask.sum() < 2 or db[-1] > hi:
        return None
    a, b = np.polyfit(times[mask], db[mask], 1)
    if a >= 0:
        return None
    return -60.0 / a


def t60(h: ImpulseResponse) -> float | None:
    """Reverberation time via T30 (-5 to -35 dB), T20 fallback; None if the
    decay range is insufficient."""
    times, db = schroeder_db(h)
    t = _fit_decay(times, db, -5.0, -35.0)
    if t is not None:
        return t
    return _fit_decay(times, db, -5.0, -25.0)


def edt(h: ImpulseResponse) -> float | None:
    """Early decay time: 6x the 0 to -10 dB fit; None if range insufficient."""
    times, db = schroeder_db(h)
    return _fit_decay(times, db, 0.0, -10.0)


def evaluate(preds, gts) -> MetricReport:
    """Mean metric errors over matched (pred, gt) pairs.

    Pairs where a decay time cannot be estimated on either side are excluded
    from the corresponding mean and counted in n_invalid.
    """
    if len(preds) != len(gts) or not preds:
        raise MetricError("need matched non-empty prediction/target sets")
    loud, c50s, edts, t60s = [], [], [], []
    invalid = 0
    for p, g in zip(preds, gts):
        loud.append(loudness_error(p, g))
        c50s.append(abs(c50(p) - c50(g)))
        tp, tg = t60(p), t60(g)
        ep, eg = edt(p), edt(g)
        ok = None not in (tp, tg, ep, eg) and tg > 0
        if ok:
            t60s.append(abs(tp - tg) / tg * 100.0)
            edts.append(abs(ep - eg) * 1000.0)
        else:
            invalid += 1
    if not t60s:
        t60_err = float("nan")
        edt_err = float("nan")
    else:
        t60_err = float(np.mean(t60s))
        edt_err = float(np.mean(edts))
    return MetricReport(loudness_err=float(np.mean(loud)),
                        c50_err=float(np.mean(c50s)),
                        edt_err=edt_err, t60_err=t60_err,
                        n_pairs=len(preds), n_invalid=invalid)

"""Frequency- and time-domain machinery for RIR assembly.

Key-frequency interpolation, the real-cepstrum minimum-phase transform, the
propagation operator (spreading loss, air absorption, fractional delay) and
the summation of per-path kernels.  The heavy transforms are registered as
differentiable ops so the whole chain back-propagates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
import scipy.signal

from . import autodiff as ad

MAG_FLOOR_REL = 1e-8   # magnitude floor relative to the row max, before log
FRAC_DELAY_TAPS = 64   # Kaiser-windowed sinc width for non-integer delays
_KAISER_BETA = 8.0     # keeps fractional-delay spectra within -60 dB to 0.9 Nyquist

_FFT_WORKERS = 1


def set_fft_workers(n: int):
    """Worker threads for the large FFTs (minimum-phase transform)."""
    global _FFT_WORKERS
    _FFT_WORKERS = max(1, int(n))


class DspError(ValueError):
    pass


@dataclass(frozen=True)
class FrequencyGrid:
    key_freqs: np.ndarray  # (F,) strictly increasing, below Nyquist
    fft_size: int
    sample_rate: float

    def __post_init__(self):
        kf = np.asarray(self.key_freqs, dtype=np.float64)
        if len(kf) < 2 or np.any(np.diff(kf) <= 0):
            raise DspError("key_freqs must be >= 2 strictly increasing values")
        if kf[-1] >= self.sample_rate / 2:
            raise DspError("key frequencies must stay below Nyquist")
        object.__setattr__(self, "key_freqs", kf)

    @property
    def n_keys(self):
        return len(self.key_freqs)

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1


def default_grid(sample_rate=16000.0, fft_size=4096, n_keys=16,
                 f_lo=12.0, f_hi=7800.0) -> FrequencyGrid:
    """16 log-spaced key frequencies from 12 to 7800 Hz."""
    return FrequencyGrid(np.geomspace(f_lo, f_hi, n_keys), fft_size, sample_rate)


@dataclass
class ImpulseResponse:
    samples: np.ndarray
    sample_rate: float
    t0: float = 0.0  # absolute time of sample 0, seconds

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise DspError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise DspError("non-finite samples")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    def energy(self):
        return float(np.sum(self.samples**2)) / self.sample_rate


_INTERP_CACHE: dict = {}


def interp_matrix(grid: FrequencyGrid) -> np.ndarray:
    """(n_bins, F) piecewise-linear interpolation matrix with flat tails."""
    key = (tuple(grid.key_freqs), grid.fft_size, grid.sample_rate)
    w = _INTERP_CACHE.get(key)
    if w is not None:
        return w
    bins = np.arange(grid.n_bins) * grid.sample_rate / grid.fft_size
    kf = grid.key_freqs
    w = np.zeros((grid.n_bins, grid.n_keys))
    seg = np.clip(np.searchsorted(kf, bins) - 1, 0, grid.n_keys - 2)
    frac = (bins - kf[seg]) / (kf[seg + 1] - kf[seg])
    frac = np.clip(frac, 0.0, 1.0)  # flat extrapolation outside the keys
    rows = np.arange(grid.n_bins)
    w[rows, seg] = 1.0 - frac
    w[rows, seg + 1] += frac
    _INTERP_CACHE[key] = w
    return w


def interp_to_bins(grid: FrequencyGrid, key_values):
    """Map key-frequency gains (..., F) to a magnitude half-spectrum (..., n_bins)."""
    kv = ad.value(key_values)
    if kv.shape[-1] != grid.n_keys:
        raise DspError(f"expected {grid.n_keys} key values, got {kv.shape[-1]}")
    w = interp_matrix(grid)
    return ad.matmul(key_values, w.T)


# ---------------------------------------------------------------------------
# minimum-phase transform (real cepstrum method), with custom VJP
# ---------------------------------------------------------------------------


def _fold_weights(n):
    w = np.zeros(n)
    w[0] = 1.0
    w[1:n // 2] = 2.0
    w[n // 2] = 1.0
    return w


def _min_phase_fwd(mag, fft_size=None):
    n = int(fft_size)
    nh = n // 2 + 1
    if mag.shape[-1] != nh:
        raise DspError(f"magnitude must have {nh} bins for fft_size {n}")
    peak = np.max(mag, axis=-1, keepdims=True)
    if np.any(peak <= 0):
        raise DspError("all-zero magnitude has no minimum-phase response")
    floor = MAG_FLOOR_REL * peak
    mask = mag >= floor
    mf = np.maximum(mag, floor)
    # the full log-magnitude is real and even, so its DFT is real and even:
    # one half-spectrum rfft replaces each full complex transform
    lh = np.log(mf)
    logm = np.concatenate([lh, lh[..., -2:0:-1]], axis=-1)
    f = sfft.rfft(logm, axis=-1, workers=_FFT_WORKERS).real
    c = np.concatenate([f, f[..., -2:0:-1]], axis=-1) * (1.0 / n)
    w = _fold_weights(n)
    ch = c * w
    bh_half = np.exp(sfft.rfft(ch, axis=-1, workers=_FFT_WORKERS))
    h = sfft.irfft(bh_half, n, axis=-1, workers=_FFT_WORKERS)
    return h, (mask, mf, bh_half, w, n)


def _big_h(bh_half):
    return np.concatenate([bh_half, np.conj(bh_half[..., -2:0:-1])], axis=-1)


def _min_phase_adj(cot, saved):
    mask, mf, bh_half, w, n = saved
    big_h = _big_h(bh_half)
    nh = n // 2 + 1
    cot_bh = sfft.fft(cot, axis=-1, workers=_FFT_WORKERS) / n
    cot_bc = np.conj(big_h) * cot_bh
    cot_ch = (n * sfft.ifft(cot_bc, axis=-1, workers=_FFT_WORKERS)).real
    cot_c = w * cot_ch
    cot_full = (sfft.fft(cot_c, axis=-1, workers=_FFT_WORKERS) / n).real
    cot_half = np.empty(mf.shape)
    cot_half[..., 0] = cot_full[..., 0]
    cot_half[..., nh - 1] = cot_full[..., n // 2]
    cot_half[..., 1:nh - 1] = cot_full[..., 1:nh - 1] + cot_full[..., :nh - 1:-1]
    return (np.where(mask, cot_half / mf, 0.0),)


def _min_phase_jvp(tangents, saved):
    mask, mf, bh_half, w, n = saved
    big_h = _big_h(bh_half)
    dm = np.where(mask, tangents[0] / mf, 0.0)
    dfull = np.concatenate([dm, dm[..., -2:0:-1]], axis=-1)
    dc = sfft.ifft(dfull, axis=-1, workers=_FFT_WORKERS).real
    dbc = sfft.fft(dc * w, axis=-1, workers=_FFT_WORKERS)
    return sfft.ifft(big_h * dbc, axis=-1, workers=_FFT_WORKERS).real


ad.register_op("min_phase", _min_phase_fwd, _min_phase_adj, jvp=_min_phase_jvp)


def min_phase(magnitude, fft_size: int):
    """Minimum-phase FIR (length fft_size) matching a magnitude half-spectrum.

    Batched over leading axes.  The magnitude is floored at 1e-8 of its row
    maximum before the log.
    """
    return ad.apply("min_phase", magnitude, fft_size=int(fft_size))


def min_phase_ir(magnitude, grid: FrequencyGrid) -> ImpulseResponse:
    h = ad.value(min_phase(ad.value(magnitude), grid.fft_size))
    return ImpulseResponse(h, grid.sample_rate)


# ---------------------------------------------------------------------------
# propagation operator and path summation
# ---------------------------------------------------------------------------


def frac_delay_kernel(delay_samples: float):
    """(offset, taps): FIR placing a signal at a possibly fractional delay.

    Integer delays reduce to a single unit tap, which keeps the integer-delay
    laws exact; otherwise a Kaiser-windowed sinc of FRAC_DELAY_TAPS taps.
    """
    nearest = round(delay_samples)
    if abs(delay_samples - nearest) < 1e-9:
        return int(nearest), np.array([1.0])
    half = FRAC_DELAY_TAPS // 2
    n0 = int(np.floor(delay_samples))
    offsets = np.arange(n0 - half + 1, n0 + half + 1)
    x = offsets - delay_samples  # in (-half, half)
    win = (np.i0(_KAISER_BETA * np.sqrt(np.clip(1.0 - (x / half) ** 2, 0.0, 1.0)))
           / np.i0(_KAISER_BETA))
    taps = np.sinc(x) * win
    return int(offsets[0]), taps


def frac_delay_kernels(delays):
    """Batched fractional-delay FIRs: (offsets (P,), taps (P, FRAC_DELAY_TAPS)).

    Near-integer delays snap to an exact unit tap so integer-delay laws hold
    bit-exactly; row p places a signal at delays[p] when convolved and shifted
    to offsets[p].
    """
    delays = np.atleast_1d(np.asarray(delays, dtype=np.float64))
    half = FRAC_DELAY_TAPS // 2
    n0 = np.floor(delays).astype(np.int64)
    offsets = n0 - half + 1
    x = (offsets[:, None] + np.arange(FRAC_DELAY_TAPS)[None, :]) - delays[:, None]
    win = (np.i0(_KAISER_BETA * np.sqrt(np.clip(1.0 - (x / half) ** 2, 0.0, 1.0)))
           / np.i0(_KAISER_BETA))
    taps = np.sinc(x) * win
    snap = np.abs(delays - np.round(delays)) < 1e-9
    if snap.any():
        taps[snap] = 0.0
        center = (np.round(delays[snap]).astype(np.int64) - offsets[snap])
        taps[snap, center] = 1.0
    return offsets, taps


def _row_convolve(a, b):
    """Row-wise full convolution of matching (P, *) arrays via threaded FFTs."""
    n = a.shape[-1] + b.shape[-1] - 1
    nfft = sfft.next_fast_len(n, real=True)
    fa = sfft.rfft(a, nfft, axis=-1, workers=_FFT_WORKERS)
    fb = sfft.rfft(b, nfft, axis=-1, workers=_FFT_WORKERS)
    return sfft.irfft(fa * fb, nfft, axis=-1, workers=_FFT_WORKERS)[..., :n]


def _place_rows(rows, offsets, out_len):
    """Sum each row into a length-out_len buffer starting at its offset."""
    out_len = int(out_len)
    width = rows.shape[1]
    out = np.zeros(out_len)
    for row, off in zip(rows, offsets):
        lo = max(0, int(off))
        hi = min(out_len, int(off) + width)
        if hi > lo:
            out[lo:hi] += row[lo - off: hi - off]
    return out


def _convolve_taps(sig, taps, exact_rows):
    """Row-wise convolution of (P, L) signals with (P, T) taps.

    Rows flagged exact (single unit tap at the centre) are copied directly so
    integer delays avoid FFT rounding entirely.
    """
    n_sig, sig_len = sig.shape
    width = sig_len + taps.shape[1] - 1
    out = np.zeros((n_sig, width))
    frac = ~exact_rows
    if frac.any():
        out[frac] = _row_convolve(sig[frac], taps[frac])
    if exact_rows.any():
        centers = np.argmax(taps[exact_rows], axis=1)
        for r, c in zip(np.flatnonzero(exact_rows), centers):
            out[r, c: c + sig_len] = sig[r]
    return out


def _delay_sum_fwd(signals, delays=None, scales=None, out_len=None):
    sig = np.atleast_2d(signals)
    offsets, taps = frac_delay_kernels(delays)
    exact = np.abs(np.asarray(delays, float)
                   - np.round(np.asarray(delays, float))) < 1e-9
    placed = _convolve_taps(sig, taps, exact) * np.asarray(scales)[:, None]
    out = _place_rows(placed, offsets, out_len)
    return out, (offsets, taps, exact, sig.shape, np.asarray(scales, float),
                 signals.ndim, int(out_len))


def _delay_sum_adj(cot, saved):
    offsets, taps, exact, shape, scales, in_ndim, out_len = saved
    n_sig, sig_len = shape
    width = sig_len + taps.shape[1] - 1
    # gather the cotangent windows, then correlate with each tap row
    idx = offsets[:, None] + np.arange(width)[None, :]
    full = np.zeros((n_sig, width))
    valid = (idx >= 0) & (idx < out_len)
    full[valid] = cot[idx[valid]]
    g = np.zeros(shape)
    frac = ~exact
    if frac.any():
        corr = _row_convolve(full[frac], taps[frac, ::-1])
        g[frac] = corr[:, taps.shape[1] - 1: taps.shape[1] - 1 + sig_len]
    if exact.any():
        centers = np.argmax(taps[exact], axis=1)
        for r, c in zip(np.flatnonzero(exact), centers):
            g[r] = full[r, c: c + sig_len]
    g *= scales[:, None]
    return (g if in_ndim > 1 else g[0],)


def _delay_sum_jvp(tangents, saved):
    offsets, taps, exact, shape, scales, in_ndim, out_len = saved
    t = np.atleast_2d(tangents[0])
    placed = _convolve_taps(t, taps, exact) * scales[:, None]
    return _place_rows(placed, offsets, out_len)


ad.register_op("delay_sum", _delay_sum_fwd, _delay_sum_adj, jvp=_delay_sum_jvp)


def delay_sum(signals, delays, scales, out_len):
    """Sum of per-path signals, each scaled and fractionally delayed.

    delays are in samples; signals is (P, L) (or (L,) for a single path).
    """
    return ad.apply("delay_sum", signals, delays=np.atleast_1d(delays),
                    scales=np.atleast_1d(scales), out_len=int(out_len))


def propagation_scale(tau, a0, v):
    return np.exp(-a0 * np.asarray(tau)) / (v * np.asarray(tau))


def propagate(h: ImpulseResponse, tau: float, a0: float = 0.0,
              v: float = 343.0) -> ImpulseResponse:
    """Apply the propagation operator: delay tau, 1/(v tau) spreading,
    exp(-a0 tau) air absorption."""
    if tau <= 0:
        raise DspError("tau must be positive")
    delay = tau * h.sample_rate
    out_len = len(h.samples) + int(np.ceil(delay)) + FRAC_DELAY_TAPS
    out = ad.value(delay_sum(h.samples, [delay], [propagation_scale(tau, a0, v)],
                             out_len))
    return ImpulseResponse(out, h.sample_rate, t0=h.t0)


def assemble_rir(kernels, toas, sample_rate, out_len, a0=0.0, v=343.0):
    """R(t) = sum_k S_{toa_k} kernel_k, truncated/padded to out_len samples.

    kernels: (P, L) array or Var; differentiable in the kernels.
    """
    toas = np.asarray(toas, dtype=float)
    if np.any(toas <= 0):
        raise DspError("all arrival times must be positive")
    delays = toas * sample_rate
    scales = propagation_scale(toas, a0, v)
    return delay_sum(kernels, delays, scales, out_len)


def assemble_R(kernels: list[ImpulseResponse], toas, a0=0.0, v=343.0,
               out_len=None) -> ImpulseResponse:
    """ImpulseResponse-level wrapper over assemble_rir."""
    if not kernels:
        raise DspError("no kernels to assemble")
    sr = kernels[0].sample_rate
    if any(k.sample_rate != sr for k in kernels):
        raise DspError("kernels must share a sample rate")
    max_len = max(len(k.samples) for k in kernels)
    stack = np.zeros((len(kernels), max_len))
    for i, k in enumerate(kernels):
        stack[i, : len(k.samples)] = k.samples
    if out_len is None:
        out_len = int(np.ceil(max(toas) * sr)) + max_len + FRAC_DELAY_TAPS
    out = ad.value(assemble_rir(stack, toas, sr, out_len, a0=a0, v=v))
    return ImpulseResponse(out, sr)


# ---------------------------------------------------------------------------
# short-time Fourier magnitude
# ---------------------------------------------------------------------------


_WINDOW_CACHE: dict = {}


def _hann(win):
    w = _WINDOW_CACHE.get(win)
    if w is None:
        w = scipy.signal.get_window("hann", win, fftbins=True)
        _WINDOW_CACHE[win] = w
    return w


def _stft_mag_fwd(x, win=256, hop=None):
    hop = win // 4 if hop is None else int(hop)
    n = len(x)
    if n < win:
        x = np.concatenate([x, np.zeros(win - n)])
    starts = np.arange(0, len(x) - win + 1, hop)
    idx = starts[:, None] + np.arange(win)[None, :]
    w = _hann(win)
    frames = x[idx] * w
    spec = sfft.rfft(frames, axis=-1)
    mag = np.abs(spec)
    unit = spec / np.maximum(mag, 1e-300)
    return mag, (idx, w, unit, n, win)


def _stft_mag_adj(cot, saved):
    idx, w, unit, n, win = saved
    # d|S|/dS followed by the adjoint of the real FFT and of the framing
    cot_spec = cot * unit
    full = np.zeros(idx.shape[:1] + (win,), dtype=complex)
    full[..., : win // 2 + 1] = cot_spec
    cot_frames = (win * sfft.ifft(full, axis=-1)).real * w
    g = np.zeros(max(n, idx.max() + 1))
    np.add.at(g, idx, cot_frames)
    return (g[:n],)


def _stft_mag_jvp(tangents, saved):
    idx, w, unit, n, win = saved
    t = tangents[0]
    if len(t) < idx.max() + 1:
        t = np.concatenate([t, np.zeros(idx.max() + 1 - len(t))])
    dspec = sfft.rfft(t[idx] * w, axis=-1)
    return (np.conj(unit) * dspec).real


ad.register_op("stft_mag", _stft_mag_fwd, _stft_mag_adj, jvp=_stft_mag_jvp)


def stft_mag(x, win, hop=None):
    """Hann-windowed STFT magnitude, shape (n_frames, win//2 + 1).

    Differentiable; hop defaults to win/4, the tail that does not fill a
    frame is dropped, signals shorter than one window are zero-padded.
    """
    return ad.apply("stft_mag", x, win=int(win), hop=hop)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _fft_convolve_fwd(a, b):
    return scipy.signal.fftconvolve(a, b), (a, b)


def _fft_convolve_adj(cot, saved):
    a, b = saved
    ga = scipy.signal.fftconvolve(cot, b[::-1])[len(b) - 1: len(b) - 1 + len(a)]
    gb = scipy.signal.fftconvolve(cot, a[::-1])[len(a) - 1: len(a) - 1 + len(b)]
    return ga, gb


def _fft_convolve_jvp(tangents, saved):
    a, b = saved
    da, db = tangents
    out = 0.0
    if da is not None:
        out = out + scipy.signal.fftconvolve(da, b)
    if db is not None:
        out = out + scipy.signal.fftconvolve(a, db)
    return out


ad.register_op("fft_convolve", _fft_convolve_fwd, _fft_convolve_adj,
               jvp=_fft_convolve_jvp)


def convolve_samples(a, b):
    """Full linear convolution, differentiable in both arguments."""
    return ad.apply("fft_convolve", a, b)


def convolve(a: ImpulseResponse, b: ImpulseResponse) -> ImpulseResponse:
    if a.sample_rate != b.sample_rate:
        raise DspError("sample-rate mismatch in convolve")
    out = ad.value(convolve_samples(a.samples, b.samples))
    return ImpulseResponse(out, a.sample_rate, t0=a.t0 + b.t0)


def path_kernel(path, refl_per_hit, directivity, grid: FrequencyGrid):
    """kappa = MinPhase(interp(D o prod_j Refl_j)) for one specular path."""
    refl = [np.asarray(ad.value(r), float) for r in refl_per_hit]
    if len(refl) != path.order:
        raise DspError("one reflection vector per hit required")
    mag = np.asarray(ad.value(directivity), float).copy()
    for r in refl:
        mag = mag * r
    h = ad.value(min_phase(interp_to_bins(grid, mag), grid.fft_size))
    return ImpulseResponse(h, grid.sample_rate)

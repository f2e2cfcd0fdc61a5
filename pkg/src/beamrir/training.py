"""Losses, the Adam optimizer, and the fitting loop.

The objective compares rendered and measured RIRs with three terms: a
multi-scale log-magnitude STFT distance, an energy-decay (backward
integration) distance, and an octave-band spectral-balance distance.  The
specular order grows progressively during training so early epochs fit the
direct sound and first reflections before higher-order structure.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dsp
from .beams import trace_paths
from .dsp import ImpulseResponse
from .params import ParameterStore
from .source import RenderConfig, RirModel

LOG_EPS = 1e-5        # floor inside every log-compressed loss term
STFT_SCALES = (64, 256, 1024)


@dataclass(frozen=True)
class MeasurementRecord:
    """One sparse measurement: emitter pose, listener position, recorded RIR."""

    source: np.ndarray
    orientation: np.ndarray
    listener: np.ndarray
    rir: ImpulseResponse


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_mag(pred, target, scales=STFT_SCALES):
    """Mean L1 distance between log STFT magnitudes over several scales."""
    total = None
    tgt = ad.value(target)
    for win in scales:
        pm = dsp.stft_mag(pred, win)
        tm = ad.value(dsp.stft_mag(tgt, win))
        term = ad.mean(ad.absolute(ad.log(pm + LOG_EPS) - np.log(tm + LOG_EPS)))
        total = term if total is None else total + term
    return total * (1.0 / len(scales))


def loss_decay(pred, target, floor_db=-60.0):
    """L1 distance between log10 Schroeder energy-decay curves.

    Each curve is backward-integrated squared signal normalized to its own
    t=0 value; the comparison is restricted to the range where the target
    curve stays above floor_db.  A silent target yields 0.
    """
    tgt = ad.value(target)
    et = np.flip(np.cumsum(np.flip(np.square(tgt))))
    if et[0] <= 0:
        logging.getLogger("beamrir").warning("silent target in decay loss")
        return ad.value(pred).sum() * 0.0 if not isinstance(pred, ad.Var) \
            else ad.asum(pred * 0.0)
    et_norm = et / et[0]
    keep = np.flatnonzero(10.0 * np.log10(np.maximum(et_norm, 1e-30))
                          >= floor_db)
    ep = ad.revcumsum(ad.square(pred))
    ep = ep / ad.clip_min(ep[0], LOG_EPS)
    ln10 = np.log(10.0)
    dp = ad.log(ad.clip_min(ep[keep], LOG_EPS)) * (1.0 / ln10)
    dt = np.log10(np.maximum(et_norm[keep], LOG_EPS))
    return ad.mean(ad.absolute(dp - dt))


def pink_noise(n, seed):
    """Unit-power pink (1/f amplitude) noise sample of length n."""
    rng = np.random.default_rng(seed)
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n)
    spec[1:] /= np.sqrt(f[1:] / f[1])
    x = np.fft.irfft(spec, n)
    return x / np.sqrt(np.mean(x * x))


def loss_pink(pred, target, pink):
    """Magnitude loss after exciting both RIRs with the same pink noise."""
    pc = dsp.convolve_samples(pred, pink)
    tc = np.convolve(ad.value(target), pink)
    return loss_mag(pc, tc)


def total_loss(pred, target, pink=None, w_mag=1.0, w_decay=1.0, w_pink=1.0):
    if pink is None and w_pink != 0.0:
        pink = pink_noise(len(ad.value(target)), 0)
    terms = {}
    loss = None
    for name, w, fn in (("mag", w_mag, lambda: loss_mag(pred, target)),
                        ("decay", w_decay, lambda: loss_decay(pred, target)),
                        ("pink", w_pink, lambda: loss_pink(pred, target, pink))):
        if w == 0.0:
            terms[name] = 0.0
            continue
        t = fn()
        terms[name] = float(ad.value(t))
        loss = t * w if loss is None else loss + t * w
    return loss, terms


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with per-group learning rates, global-norm clipping, and a skip
    on non-finite gradients."""

    def __init__(self, store: ParameterStore, lr=5e-4, betas=(0.9, 0.999),
                 eps=1e-8, clip_norm=10.0, group_lrs=None):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.group_lrs = dict(group_lrs or {})
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in store.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in store.items()}
        self.skipped = 0

    def _lr_for(self, name):
        for prefix, lr in self.group_lrs.items():
            if name.startswith(prefix):
                return lr
        return self.lr

    def step(self):
        """Apply one update from the accumulated .grad buffers.

        Returns False (and updates nothing) if any gradient is non-finite.
        """
        grads = self.store.grads()
        flat_sq = sum(float(np.sum(g * g)) for g in grads.values())
        if not np.isfinite(flat_sq):
            self.skipped += 1
            return False
        norm = np.sqrt(flat_sq)
        scale = min(1.0, self.clip_norm / max(norm, 1e-12)) \
            if self.clip_norm else 1.0
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            g = g * scale
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            self.store[name].data -= self._lr_for(name) * mhat / \
                (np.sqrt(vhat) + self.eps)
        return True


# ---------------------------------------------------------------------------
# fitting loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 600
    lr: float = 5e-4
    lr_residual: float = 1e-4
    batch_size: int = 128
    clip_norm: float = 10.0
    order_step_epochs: int = 100   # epochs per +1 of specular order
    max_order: int = 6
    w_mag: float = 1.0
    w_decay: float = 1.0
    w_pink: float = 1.0
    pink_seed: int = 0
    seed: int = 0
    log_path: str | None = None
    log_every: int = 10


def fit(model: RirModel, records, geom, render_cfg: RenderConfig,
        train_cfg: TrainConfig = TrainConfig(), bank=None, basis=None,
        store: ParameterStore | None = None, callback=None):
    """Fit the model parameters to measured RIRs.

    Returns (store, history); history rows are dicts with epoch, loss and
    per-term values.  Specular paths are traced once per record and reused;
    the allowed reflection order grows by one every order_step_epochs.
    """
    if store is None:
        store = model.init_params(seed=train_cfg.seed)
    basis_pts = None if basis is None else np.asarray(
        getattr(basis, "points", basis), dtype=np.float64)
    rng = np.random.default_rng(train_cfg.seed)
    cache = [trace_paths(geom, r.source, r.listener, render_cfg.beams,
                         v_sound=render_cfg.v_sound,
                         n_threads=render_cfg.n_threads) for r in records]
    targets = []
    n_out = render_cfg.n_samples
    for r in records:
        if r.rir.sample_rate != render_cfg.sample_rate:
            raise ValueError("record sample rate differs from render config")
        t = np.zeros(n_out)
        m = min(n_out, len(r.rir.samples))
        t[:m] = r.rir.samples[:m]
        targets.append(t)
    opt = Adam(store, lr=train_cfg.lr, clip_norm=train_cfg.clip_norm,
               group_lrs={"residual.": train_cfg.lr_residual})
    pink = pink_noise(n_out, train_cfg.pink_seed) if train_cfg.w_pink else None
    history = []
    writer = None
    log_file = None
    t_start = time.monotonic()
    if train_cfg.log_path:
        log_file = open(train_cfg.log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["epoch", "loss", "loss_mag", "loss_pink",
                        "loss_decay", "order", "wall_time"])
    try:
        for epoch in range(train_cfg.epochs):
            order = min(1 + epoch // train_cfg.order_step_epochs,
                        train_cfg.max_order)
            perm = rng.permutation(len(records))
            epoch_terms = {"mag": 0.0, "decay": 0.0, "pink": 0.0}
            epoch_loss = 0.0
            # one pass over the records, minibatches without replacement
            for start in range(0, len(perm), train_cfg.batch_size):
                idx = perm[start: start + train_cfg.batch_size]
                store.zero_grads()
                with ad.Tape() as tape:
                    fused = None
                    if bank is not None:
                        fused = model.reflection.aggregate_all(
                            bank, basis_pts, store)
                    total = None
                    for i in idx:
                        r = records[i]
                        pred = model.render(
                            r.source, r.orientation, r.listener, geom, store,
                            render_cfg, bank=bank, basis=basis_pts,
                            paths=cache[i], fused=fused, max_order=order)
                        loss_i, terms = total_loss(
                            pred, targets[i], pink=pink,
                            w_mag=train_cfg.w_mag, w_decay=train_cfg.w_decay,
                            w_pink=train_cfg.w_pink)
                        total = loss_i if total is None else total + loss_i
                        for k, v in terms.items():
                            epoch_terms[k] += v / len(records)
                    total = total * (1.0 / len(idx))
                    epoch_loss += float(ad.value(total)) * len(idx) / len(records)
                    tape.backward(total)
                opt.step()
            row = {"epoch": epoch, "order": order, "loss": epoch_loss,
                   **epoch_terms}
            history.append(row)
            if writer and (epoch % train_cfg.log_every == 0
                           or epoch == train_cfg.epochs - 1):
                writer.writerow([epoch, epoch_loss, epoch_terms["mag"],
                                 epoch_terms["pink"], epoch_terms["decay"],
                                 order, time.monotonic() - t_start])
                log_file.flush()
            if callback is not None:
                callback(epoch, row, store)
    finally:
        if log_file:
            log_file.close()
    return store, history

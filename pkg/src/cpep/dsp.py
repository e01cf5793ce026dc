"""Signal conditioning for raw multichannel recordings.

EMG recordings are band-pass filtered (2-250 Hz, 4th-order Butterworth)
and notch-filtered at 60 Hz (biquad, Q=30), both applied forward-backward
so the output stays time-aligned with the paired pose stream. Filtering
happens on whole recordings, before windowing, to keep filter transients
away from window edges. Pose streams are left untouched.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy import signal

logger = logging.getLogger(__name__)

BAND_LOW_HZ = 2.0
BAND_HIGH_HZ = 250.0
NOTCH_HZ = 60.0
NOTCH_Q = 30.0
BAND_ORDER = 4


class DspError(ValueError):
    pass


def bandpass_notch(samples, sample_rate, band=(BAND_LOW_HZ, BAND_HIGH_HZ),
                   notch_hz=NOTCH_HZ, notch_q=NOTCH_Q, order=BAND_ORDER):
    """Zero-phase band-pass + notch cascade, applied per channel.

    samples: (channels, timesteps). Requires sample_rate > 2 * band[1].
    """
    samples = np.asarray(samples)
    if samples.ndim != 2:
        raise DspError(f"expected (channels, timesteps), got shape {samples.shape}")
    lo, hi = band
    if sample_rate <= 2.0 * hi:
        raise DspError(
            f"sample rate {sample_rate} Hz too low for band edge {hi} Hz "
            f"(need > {2.0 * hi} Hz)"
        )
    sos = signal.butter(order, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
    b, a = signal.iirnotch(notch_hz, notch_q, fs=sample_rate)
    out = signal.sosfiltfilt(sos, samples, axis=-1)
    out = signal.filtfilt(b, a, out, axis=-1)
    return out.astype(samples.dtype, copy=False)


def instance_normalize(data, eps=1e-8):
    """Zero-mean, unit-variance per channel within one window.

    Uses population variance; constant channels map to all zeros via the
    epsilon guard.
    """
    data = np.asarray(data)
    mu = data.mean(axis=-1, keepdims=True)
    sigma = data.std(axis=-1, keepdims=True)
    out = (data - mu) / (sigma + eps)
    return out.astype(data.dtype, copy=False)


def make_windows(samples, sample_rate, window_s=2.0):
    """Cut (channels, timesteps) into non-overlapping fixed-length windows.

    Returns (n_windows, channels, window_len); the trailing remainder is
    dropped. A too-short recording yields an empty array and a warning.
    """
    samples = np.asarray(samples)
    if samples.ndim != 2:
        raise DspError(f"expected (channels, timesteps), got shape {samples.shape}")
    window_len = int(round(window_s * sample_rate))
    if window_len <= 0:
        raise DspError(f"window of {window_s} s at {sample_rate} Hz has no samples")
    channels, timesteps = samples.shape
    n = timesteps // window_len
    if n == 0:
        logger.warning(
            "recording of %d samples shorter than one %d-sample window; no windows produced",
            timesteps, window_len,
        )
        return np.empty((0, channels, window_len), dtype=samples.dtype)
    used = samples[:, : n * window_len]
    return np.ascontiguousarray(
        used.reshape(channels, n, window_len).transpose(1, 0, 2)
    )


def rotate_channels(data, offset, modality="emg"):
    """Circularly shift the channel axis by `offset` electrode positions.

    This models band-placement shift and only makes sense for EMG
    electrodes; pose joints have no circular order, so modality "pose"
    is rejected.
    """
    if modality != "emg":
        raise DspError(f"channel rotation is an EMG-only augmentation, got modality {modality!r}")
    data = np.asarray(data)
    if data.ndim < 2:
        raise DspError(f"expected at least (channels, timesteps), got shape {data.shape}")
    return np.roll(data, offset, axis=-2)


def rotate_channels_batch(windows, offsets):
    """Per-window channel rotation; offsets has one entry per window."""
    windows = np.asarray(windows)
    offsets = np.asarray(offsets)
    if offsets.shape != (windows.shape[0],):
        raise DspError(
            f"offsets shape {offsets.shape} != ({windows.shape[0]},)"
        )
    out = windows.copy()
    for off in np.unique(offsets):
        if off == 0:
            continue
        sel = offsets == off
        out[sel] = np.roll(windows[sel], int(off), axis=-2)
    return out

"""Spectral transforms, separation metrics, and SNR-controlled mixing.

Everything here is a pure function over numpy arrays except ``neg_si_snr``,
which runs on autodiff tensors so it can drive training.
"""

from dataclasses import dataclass

import numpy as np

import sepkit.tensor as T
from sepkit.errors import ConfigError, ShapeError
from sepkit.tensor import Tensor

SNR_CAP_DB = 60.0
_WINDOWS = ("hann", "rect")


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis parameters. Constructing a non-COLA config raises."""

    frame_length: int = 256
    hop_length: int = 64
    window: str = "hann"

    def __post_init__(self):
        if self.frame_length <= 0 or self.hop_length <= 0:
            raise ConfigError("frame and hop must be positive")
        if self.frame_length % self.hop_length != 0:
            raise ConfigError(
                f"hop {self.hop_length} does not divide frame {self.frame_length}; "
                "overlap-add would not be constant"
            )
        if self.window not in _WINDOWS:
            raise ConfigError(f"unknown window {self.window!r}, expected one of {_WINDOWS}")

    @property
    def num_bins(self) -> int:
        return self.frame_length // 2 + 1


def make_window(name: str, frame_length: int) -> np.ndarray:
    """Periodic analysis window of the given length."""
    if name == "hann":
        n = np.arange(frame_length)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_length)
    if name == "rect":
        return np.ones(frame_length)
    raise ConfigError(f"unknown window {name!r}")


def frame_count(num_samples: int, cfg: StftConfig) -> int:
    if num_samples < cfg.frame_length:
        raise ShapeError(
            f"signal length {num_samples} shorter than one frame ({cfg.frame_length})"
        )
    return 1 + (num_samples - cfg.frame_length) // cfg.hop_length


def stft(wave: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Windowed DFT of overlapping frames; returns complex (bins, frames)."""
    x = np.asarray(wave, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-d waveform, got shape {x.shape}")
    n = frame_count(x.shape[0], cfg)
    w = make_window(cfg.window, cfg.frame_length)
    starts = np.arange(n) * cfg.hop_length
    frames = x[starts[:, None] + np.arange(cfg.frame_length)[None, :]] * w
    return np.fft.rfft(frames, axis=-1).T


def istft(spec: np.ndarray, cfg: StftConfig, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of ``stft``.

    Frames are inverse-transformed, windowed again, overlap-added, and
    normalized by the summed squared window, which reconstructs unmodified
    spectra exactly at every sample the frames cover. ``length`` trims or
    zero-pads the result; default is the covered span.
    """
    z = np.asarray(spec)
    if z.ndim != 2 or z.shape[0] != cfg.num_bins:
        raise ShapeError(
            f"expected ({cfg.num_bins}, frames) spectrogram, got shape {z.shape}"
        )
    n = z.shape[1]
    covered = (n - 1) * cfg.hop_length + cfg.frame_length
    total = covered if length is None else length
    w = make_window(cfg.window, cfg.frame_length)
    frames = np.fft.irfft(z.T, n=cfg.frame_length, axis=-1) * w

    out = np.zeros(max(total, covered))
    norm = np.zeros(max(total, covered))
    idx = (np.arange(n) * cfg.hop_length)[:, None] + np.arange(cfg.frame_length)[None, :]
    np.add.at(out, idx.reshape(-1), frames.reshape(-1))
    np.add.at(norm, idx.reshape(-1), np.tile(w * w, n))
    live = norm > 1e-8
    out = np.where(live, out / np.where(live, norm, 1.0), 0.0)
    return out[:total]


# -- metrics ---------------------------------------------------------------------


def _paired(est, ref) -> tuple[np.ndarray, np.ndarray]:
    e = np.asarray(est, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if e.shape != r.shape or e.ndim != 1:
        raise ShapeError(f"signals must be equal-length 1-d, got {e.shape} vs {r.shape}")
    return e, r


def si_snr(est, ref) -> float:
    """Scale-invariant SNR in dB, capped at +60.

    Both signals are zero-meaned, the estimate is projected onto the
    reference, and the energy ratio of projection to residual is returned.
    """
    e, r = _paired(est, ref)
    r = r - r.mean()
    e = e - e.mean()
    ref_pow = float(r @ r)
    if ref_pow == 0.0:
        raise ValueError("reference has zero variance")
    target = (float(e @ r) / ref_pow) * r
    tgt_pow = float(target @ target)
    residual = e - target
    err_pow = float(residual @ residual)
    if err_pow < 1e-12 * tgt_pow:
        return SNR_CAP_DB
    return min(10.0 * np.log10(tgt_pow / err_pow), SNR_CAP_DB)


def si_snri(est, ref, mixture) -> float:
    return si_snr(est, ref) - si_snr(mixture, ref)


def sdr(est, ref) -> float:
    """Plain energy-ratio signal-to-distortion in dB, capped at +60."""
    e, r = _paired(est, ref)
    ref_pow = float(r @ r)
    if ref_pow == 0.0:
        raise ValueError("reference has zero energy")
    d = r - e
    err_pow = float(d @ d)
    if err_pow < 1e-12 * ref_pow:
        return SNR_CAP_DB
    return min(10.0 * np.log10(ref_pow / err_pow), SNR_CAP_DB)


def sdri(est, ref, mixture) -> float:
    return sdr(est, ref) - sdr(mixture, ref)


def neg_si_snr(est, ref) -> Tensor:
    """Differentiable negative SI-SNR of a 1-d estimate (training loss)."""
    if not isinstance(est, Tensor):
        est = Tensor(np.asarray(est, dtype=np.float64))
    r = np.asarray(ref, dtype=np.float64)
    r = r - r.mean()
    ref_pow = float(r @ r)
    if ref_pow == 0.0:
        raise ValueError("reference has zero variance")
    e = est - est.mean()
    rt = Tensor(r)
    scale = (e * rt).sum() * (1.0 / ref_pow)
    target = rt * scale
    residual = e - target
    tgt_pow = T.square(target).sum()
    err_pow = T.square(residual).sum()
    log10 = float(np.log(10.0))
    eps = 1e-12
    return (T.log(err_pow + eps) - T.log(tgt_pow + eps)) * (10.0 / log10)


def pit_loss(estimates, references, per_pair_loss):
    """Minimum assignment loss over the two pairings of two sources.

    Returns ``(loss, permutation)`` where the permutation maps estimate index
    to reference index. Ties go to the identity. Works with float- or
    tensor-valued ``per_pair_loss``.
    """
    e0, e1 = estimates
    r0, r1 = references

    def value(x):
        return float(x.data) if isinstance(x, Tensor) else float(x)

    straight = (per_pair_loss(e0, r0) + per_pair_loss(e1, r1)) * 0.5
    swapped = (per_pair_loss(e0, r1) + per_pair_loss(e1, r0)) * 0.5
    if value(swapped) < value(straight):
        return swapped, (1, 0)
    return straight, (0, 1)


# -- mixing -----------------------------------------------------------------------


def snr_gain(signal, noise, snr_db: float) -> float:
    """Gain g so that signal vs g*noise sits at exactly ``snr_db``."""
    s, n = _paired(signal, noise)
    noise_pow = float(n @ n)
    if noise_pow == 0.0:
        raise ValueError("noise has zero power")
    sig_pow = float(s @ s)
    return float(np.sqrt(sig_pow / (noise_pow * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(signal, noise, snr_db: float) -> np.ndarray:
    s, n = _paired(signal, noise)
    return s + snr_gain(s, n, snr_db) * n

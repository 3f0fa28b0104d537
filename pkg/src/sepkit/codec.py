"""Neural audio codec with residual vector quantization.

A small strided-convolution autoencoder (64x downsampling, so 125 tokens/s
at 8 kHz) whose latent frames are quantized by a greedy multi-level residual
VQ. Codebooks are not gradient-trained: they follow EMA k-means statistics,
with dead entries reseeded from live batch latents. The decoder is trained
through the quantizer with a straight-through estimator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import dsp
from . import nn
from . import tensor as T
from .errors import ConfigError, DecodingError, FormatError, StageOrderError, TrainingDivergence
from .tensor import Tensor

DOWNSAMPLE = 64  # samples per latent frame: three stride-4 convolutions

# (frame, hop) pairs for the multi-scale magnitude term
_STFT_SCALES = ((256, 64), (128, 32), (64, 16))


@dataclass(frozen=True)
class CodecConfig:
    levels: int = 4
    codebook_size: int = 64
    latent_dim: int = 64
    channels: tuple = (32, 48)

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.codebook_size < 2:
            raise ConfigError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")

    @property
    def mask_id(self) -> int:
        return self.codebook_size


def _nearest(residual: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the L2-nearest codeword per row.

    Computed as explicit squared differences (not the expanded-gemm form) so
    the result is bitwise identical to a per-codeword exhaustive search.
    """
    if codebook.shape[0] == 0:
        raise ConfigError("empty codebook")
    d2 = ((residual[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1)


def rvq_encode(latents: np.ndarray, codebooks: list) -> tuple:
    """Greedy residual quantization of latent rows.

    latents (N, D), codebooks Q arrays of (B, D). Returns (tokens (N, Q),
    quantized (N, D), residual (N, D)); each level runs nearest-neighbor on
    the residual left by the levels before it.
    """
    latents = np.asarray(latents, dtype=np.float64)
    residual = latents.copy()
    quantized = np.zeros_like(latents)
    tokens = np.zeros((latents.shape[0], len(codebooks)), dtype=np.int64)
    for q, cb in enumerate(codebooks):
        ids = _nearest(residual, cb)
        chosen = cb[ids]
        tokens[:, q] = ids
        quantized += chosen
        residual -= chosen
    return tokens, quantized, residual


def rvq_quantize(frame: np.ndarray, codebooks: list) -> tuple:
    """Single-vector form of rvq_encode: (Q ids, quantized vector, residual)."""
    tokens, quantized, residual = rvq_encode(frame[None, :], codebooks)
    return tokens[0], quantized[0], residual[0]


def rvq_decode(tokens: np.ndarray, codebooks: list) -> np.ndarray:
    """Sum the chosen codewords: (N, q) ids -> (N, D), q <= len(codebooks)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] > len(codebooks):
        raise DecodingError(
            f"token grid shape {tokens.shape} incompatible with {len(codebooks)} levels"
        )
    out = np.zeros((tokens.shape[0], codebooks[0].shape[1]))
    for q in range(tokens.shape[1]):
        ids = tokens[:, q]
        if ids.size and (ids.min() < 0 or ids.max() >= codebooks[q].shape[0]):
            raise DecodingError(
                f"level {q} token id out of range [0, {codebooks[q].shape[0]})"
            )
        out += codebooks[q][ids]
    return out


def _kmeans(frames: np.ndarray, k: int, rng: np.random.Generator, iters: int = 10) -> tuple:
    """Plain Lloyd iterations; empty clusters are reseeded from the batch.

    Returns (centroids (k, D), counts (k,), sums (k, D)) of the final
    assignment, ready to seed the EMA statistics.
    """
    n = frames.shape[0]
    if n == 0:
        raise ConfigError("k-means on an empty batch")
    pick = rng.choice(n, size=k, replace=n < k)
    centroids = frames[pick].copy()
    assign = None
    for _ in range(iters):
        assign = _nearest(frames, centroids)
        for j in range(k):
            members = frames[assign == j]
            if members.shape[0] == 0:
                centroids[j] = frames[rng.integers(0, n)]
            else:
                centroids[j] = members.mean(axis=0)
    assign = _nearest(frames, centroids)
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    sums = np.zeros((k, frames.shape[1]))
    np.add.at(sums, assign, frames)
    return centroids, counts, sums


class Codec(nn.Module):
    """Strided conv encoder, residual VQ, mirrored transposed-conv decoder."""

    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        c1, c2 = cfg.channels
        d = cfg.latent_dim
        self.cfg = cfg
        self.enc1 = nn.Conv1d(1, c1, 8, rng, stride=4, padding=2)
        self.enc2 = nn.Conv1d(c1, c2, 8, rng, stride=4, padding=2)
        self.enc3 = nn.Conv1d(c2, d, 8, rng, stride=4, padding=2)
        self.dec1 = nn.ConvTranspose1d(d, c2, 8, rng, stride=4, padding=2)
        self.dec2 = nn.ConvTranspose1d(c2, c1, 8, rng, stride=4, padding=2)
        self.dec3 = nn.ConvTranspose1d(c1, 1, 8, rng, stride=4, padding=2)
        self.codebooks = [
            Tensor(np.zeros((cfg.codebook_size, d)), requires_grad=False)
            for _ in range(cfg.levels)
        ]
        self.ema_counts = [
            Tensor(np.zeros(cfg.codebook_size), requires_grad=False)
            for _ in range(cfg.levels)
        ]
        self.ema_sums = [
            Tensor(np.zeros((cfg.codebook_size, d)), requires_grad=False)
            for _ in range(cfg.levels)
        ]
        # 1.0 once codebooks hold trained statistics; persisted in checkpoints
        self.trained_mark = Tensor(np.zeros(1), requires_grad=False)

    @property
    def is_trained(self) -> bool:
        return bool(self.trained_mark.data[0] > 0.5)

    def codebook_arrays(self) -> list:
        return [cb.data for cb in self.codebooks]

    def encode_latents(self, x: Tensor) -> Tensor:
        """(B, 1, T) waveform, T a multiple of 64 -> (B, D, T/64) latents."""
        h = T.relu(self.enc1(x))
        h = T.relu(self.enc2(h))
        return self.enc3(h)

    def decode_latents(self, z: Tensor) -> Tensor:
        """(B, D, L) latents -> (B, 1, 64*L) waveform."""
        h = T.relu(self.dec1(z))
        h = T.relu(self.dec2(h))
        return self.dec3(h)


def _pad_to_multiple(w: np.ndarray, factor: int) -> np.ndarray:
    pad = (-len(w)) % factor
    if pad:
        return np.concatenate([w, np.zeros(pad)])
    return w


def encode_tokens(w: np.ndarray, codec: Codec) -> np.ndarray:
    """Waveform -> (T', Q) token grid with the trained codec."""
    if not codec.is_trained:
        raise StageOrderError("codec is untrained; train it or load a checkpoint first")
    w = _pad_to_multiple(np.asarray(w, dtype=np.float64), DOWNSAMPLE)
    with T.no_grad():
        z = codec.encode_latents(Tensor(w[None, None, :]))
    frames = z.data[0].T  # (L, D)
    tokens, _, _ = rvq_encode(frames, codec.codebook_arrays())
    return tokens


def decode_tokens(grid: np.ndarray, codec: Codec, length: int | None = None) -> np.ndarray:
    """(T', q) token grid -> waveform of 64*T' samples (or trimmed/padded).

    Accepts truncated grids (q < Q levels): the missing residual levels are
    simply omitted from the codeword sum.
    """
    if not codec.is_trained:
        raise StageOrderError("codec is untrained; train it or load a checkpoint first")
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise DecodingError(f"token grid must be 2-D, got shape {grid.shape}")
    quantized = rvq_decode(grid, codec.codebook_arrays())  # (L, D)
    with T.no_grad():
        y = codec.decode_latents(Tensor(quantized.T[None, :, :]))
    w = y.data[0, 0]
    if length is not None:
        if len(w) >= length:
            w = w[:length]
        else:
            w = np.concatenate([w, np.zeros(length - len(w))])
    return w


def _spectral_mag(x: Tensor, frame: int, hop: int) -> Tensor:
    spec = T.wave_to_spec(x, frame, hop, dsp.make_window("hann", frame))
    re = spec[:, 0, :, :]
    im = spec[:, 1, :, :]
    return T.sqrt(T.square(re) + T.square(im) + 1e-9)


def _recon_loss(y: Tensor, x: Tensor) -> tuple:
    """Time-domain L2 plus multi-scale STFT magnitude L1."""
    time_l2 = T.square(y - x).mean()
    mag = None
    for frame, hop in _STFT_SCALES:
        dm = T.tabs(_spectral_mag(y, frame, hop) - _spectral_mag(x, frame, hop)).mean()
        mag = dm if mag is None else mag + dm
    return time_l2, mag * (1.0 / len(_STFT_SCALES))


def _ema_update(codec: Codec, level: int, residual: np.ndarray, ids: np.ndarray,
                rng: np.random.Generator, decay: float = 0.99) -> None:
    """Fold one batch's assignments into the level's EMA codebook."""
    b = codec.cfg.codebook_size
    counts = np.bincount(ids, minlength=b).astype(np.float64)
    sums = np.zeros((b, residual.shape[1]))
    np.add.at(sums, ids, residual)
    codec.ema_counts[level].data = decay * codec.ema_counts[level].data + (1 - decay) * counts
    codec.ema_sums[level].data = decay * codec.ema_sums[level].data + (1 - decay) * sums
    live = codec.ema_counts[level].data > 1e-3
    cb = codec.codebooks[level].data
    cb[live] = codec.ema_sums[level].data[live] / codec.ema_counts[level].data[live, None]
    dead = np.flatnonzero(~live)
    if dead.size:
        # re-seed dead entries from the batch so every code stays reachable
        picks = rng.integers(0, residual.shape[0], size=dead.size)
        cb[dead] = residual[picks]
        codec.ema_counts[level].data[dead] = 1.0
        codec.ema_sums[level].data[dead] = residual[picks]


def _kmeans_init(codec: Codec, latents: np.ndarray, rng: np.random.Generator) -> None:
    """Seed every level's codebook by k-means on the first batch's residuals."""
    residual = latents.copy()
    for q in range(codec.cfg.levels):
        centroids, counts, sums = _kmeans(residual, codec.cfg.codebook_size, rng)
        codec.codebooks[q].data = centroids
        codec.ema_counts[q].data = counts
        codec.ema_sums[q].data = sums
        ids = _nearest(residual, centroids)
        residual = residual - centroids[ids]


def quantize_with_update(codec: Codec, latents: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Quantize a batch of latent rows, updating EMA statistics level by level."""
    residual = latents.copy()
    quantized = np.zeros_like(latents)
    for q in range(codec.cfg.levels):
        ids = _nearest(residual, codec.codebooks[q].data)
        _ema_update(codec, q, residual, ids, rng)
        chosen = codec.codebooks[q].data[ids]
        quantized += chosen
        residual -= chosen
    return quantized


def train_codec(
    clean_utterances,
    cfg: CodecConfig,
    epochs: int = 6,
    batch_size: int = 8,
    lr: float = 1e-3,
    crop: int = 4096,
    commitment: float = 0.25,
    seed: int = 0,
    warmup_steps: int = 50,
    log=None,
):
    """EMA-codebook RVQ training on clean renders.

    Gradient loss = time L2 + multi-scale STFT magnitude L1 + commitment
    (straight-through through the quantizer); codebooks follow EMA k-means
    statistics instead of gradients. Returns (codec, history) where history
    holds per-step losses and the per-epoch mean time-domain L2.
    """
    if not clean_utterances:
        raise ValueError("training utterance set must be non-empty")
    rng = np.random.default_rng(seed)
    codec = Codec(cfg, rng)
    opt = nn.AdamW(codec.parameters(), lr=lr, warmup_steps=warmup_steps)
    history = {"train_loss": [], "time_l2": [], "epoch_time_l2": []}
    initialized = False

    for epoch in range(epochs):
        order = rng.permutation(len(clean_utterances))
        epoch_l2 = []
        for lo in range(0, len(order) - batch_size + 1, batch_size):
            idx = order[lo : lo + batch_size]
            crops = np.zeros((len(idx), crop))
            for row, j in enumerate(idx):
                w = clean_utterances[j]
                if len(w) <= crop:
                    crops[row, : len(w)] = w
                else:
                    start = int(rng.integers(0, len(w) - crop + 1))
                    crops[row] = w[start : start + crop]
            x = Tensor(crops[:, None, :])
            z = codec.encode_latents(x)  # (B, D, L)
            bsz, d, l = z.data.shape
            flat = np.ascontiguousarray(z.data.transpose(0, 2, 1)).reshape(-1, d)
            if not initialized:
                _kmeans_init(codec, flat, rng)
                initialized = True
            qflat = quantize_with_update(codec, flat, rng)
            qlat = qflat.reshape(bsz, l, d).transpose(0, 2, 1)
            # straight-through: forward sees the quantized latents, the
            # encoder receives the decoder's gradient unchanged
            zq = z + Tensor(qlat - z.data)
            y = codec.decode_latents(zq)
            time_l2, mag_l1 = _recon_loss(y[:, 0, :], x[:, 0, :])
            commit = T.square(z - Tensor(qlat)).mean()
            loss = time_l2 * 10.0 + mag_l1 + commit * commitment
            if not np.isfinite(loss.data):
                raise TrainingDivergence(
                    f"codec loss non-finite at epoch {epoch + 1}, step {len(history['train_loss'])}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            history["train_loss"].append(float(loss.data))
            history["time_l2"].append(float(time_l2.data))
            epoch_l2.append(float(time_l2.data))
        history["epoch_time_l2"].append(float(np.mean(epoch_l2)))
        if log is not None:
            log(f"epoch {epoch + 1}/{epochs}: time L2 {history['epoch_time_l2'][-1]:.5f}")

    codec.trained_mark.data = np.ones(1)
    return codec, history


# -- token grid serialization --------------------------------------------------

# layout: u32 T', u32 Q, u32 B little-endian, then T'*Q u16 ids row-major


def token_grid_bytes(grid: np.ndarray, codebook_size: int) -> bytes:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise FormatError(f"token grid must be 2-D, got shape {grid.shape}")
    if grid.size and (grid.min() < 0 or grid.max() > codebook_size):
        raise FormatError(
            f"token ids must lie in [0, {codebook_size}] (sentinel {codebook_size} allowed)"
        )
    head = struct.pack("<III", grid.shape[0], grid.shape[1], codebook_size)
    return head + grid.astype("<u2").tobytes()


def parse_token_grid(blob: bytes) -> tuple:
    """Bytes -> (grid (T', Q), codebook_size). Sentinel ids pass through."""
    if len(blob) < 12:
        raise FormatError("token grid blob shorter than its header")
    t, q, b = struct.unpack("<III", blob[:12])
    need = 12 + t * q * 2
    if len(blob) != need:
        raise FormatError(f"token grid blob has {len(blob)} bytes, expected {need}")
    grid = np.frombuffer(blob[12:], dtype="<u2").reshape(t, q).astype(np.int64)
    if grid.size and grid.max() > b:
        raise FormatError(f"token id {grid.max()} exceeds sentinel {b}")
    return grid, b


def write_token_grid(path, grid: np.ndarray, codebook_size: int) -> None:
    with open(path, "wb") as fh:
        fh.write(token_grid_bytes(grid, codebook_size))


def read_token_grid(path) -> tuple:
    with open(path, "rb") as fh:
        return parse_token_grid(fh.read())

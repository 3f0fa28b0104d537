"""Mask-based separation: conv encoder, dual-path transformer core, conv decoder.

The core alternates attention within fixed-size chunks of encoder frames and
attention across chunk positions, so long inputs never hit quadratic cost in
the full frame count. Two sigmoid mask heads gate the shared latents and a
transposed convolution returns each source to the time domain. Training
minimizes permutation-invariant negative SI-SNR on random crops.
"""

from dataclasses import dataclass

import numpy as np

import sepkit.tensor as T
from sepkit import dsp, nn
from sepkit.errors import ConfigError, ShapeError
from sepkit.tensor import Tensor


@dataclass(frozen=True)
class SeparatorConfig:
    channels: int = 64
    kernel: int = 16
    stride: int = 8
    chunk: int = 50
    chunk_hop: int = 25
    heads: int = 4
    ff: int = 128
    repeats: int = 2
    intra_blocks: int = 2
    inter_blocks: int = 2

    def __post_init__(self):
        if self.kernel % self.stride != 0:
            raise ConfigError(f"stride {self.stride} must divide kernel {self.kernel}")
        if self.chunk_hop > self.chunk:
            raise ConfigError(f"chunk hop {self.chunk_hop} exceeds chunk size {self.chunk}")


def chunk_frames(latents: Tensor, chunk: int, hop: int) -> tuple[Tensor, int]:
    """(B, C, F) -> (B, C, N, chunk) overlapping chunks, zero-padded to fit."""
    frames = latents.data.shape[-1]
    n = 1 + max(0, -(-(frames - chunk) // hop))
    padded_len = (n - 1) * hop + chunk
    padded = T.pad_axis(latents, -1, 0, padded_len - frames) if padded_len > frames else latents
    return T.unfold(padded, chunk, hop, axis=-1), frames


def unchunk_frames(chunks: Tensor, hop: int, frames: int) -> Tensor:
    """Overlap-add inverse of ``chunk_frames`` with coverage normalization."""
    n, chunk = chunks.data.shape[-2], chunks.data.shape[-1]
    padded_len = (n - 1) * hop + chunk
    counts = np.zeros(padded_len)
    idx = (np.arange(n) * hop)[:, None] + np.arange(chunk)[None, :]
    np.add.at(counts, idx.reshape(-1), 1.0)
    folded = T.fold(chunks, hop, padded_len, axis=-2)
    return (folded * (1.0 / counts))[..., :frames]


class Separator(nn.Module):
    def __init__(self, cfg: SeparatorConfig, rng):
        self.cfg = cfg
        c = cfg.channels
        self.encoder = nn.Conv1d(1, c, cfg.kernel, rng, stride=cfg.stride)
        kinds = (["intra"] * cfg.intra_blocks + ["inter"] * cfg.inter_blocks) * cfg.repeats
        self.block_kinds = kinds
        self.blocks = [nn.TransformerBlock(c, cfg.heads, cfg.ff, rng) for _ in kinds]
        self.final_ln = nn.LayerNorm(c)
        self.mask1 = nn.Linear(c, c, rng)
        self.mask2 = nn.Linear(c, c, rng)
        self.decoder = nn.ConvTranspose1d(c, 1, cfg.kernel, rng, stride=cfg.stride)
        self._pe_cache: dict[int, np.ndarray] = {}

    def _positions(self, length: int) -> np.ndarray:
        if length not in self._pe_cache:
            self._pe_cache[length] = nn.sinusoid_positions(length, self.cfg.channels)
        return self._pe_cache[length]

    def encode(self, x: Tensor) -> Tensor:
        """(B, T) -> nonnegative latents (B, C, F); F = 1 + (T - kernel)//stride."""
        if x.data.shape[-1] < self.cfg.kernel:
            raise ShapeError(
                f"input length {x.data.shape[-1]} shorter than kernel {self.cfg.kernel}"
            )
        return T.relu(self.encoder(x.reshape((x.data.shape[0], 1, x.data.shape[1]))))

    def dual_path_mask(self, latents: Tensor) -> tuple[Tensor, Tensor]:
        """(B, C, F) -> two sigmoid masks of the same shape."""
        cfg = self.cfg
        b, c = latents.data.shape[0], latents.data.shape[1]
        chunks, frames = chunk_frames(latents, cfg.chunk, cfg.chunk_hop)
        n = chunks.data.shape[-2]
        # (B, C, N, K) -> (B, N, K, C)
        y = chunks.transpose((0, 2, 3, 1))
        prev = None
        for kind, block in zip(self.block_kinds, self.blocks):
            if kind == "intra":
                seq = y.reshape((b * n, cfg.chunk, c))
                if prev != kind:
                    seq = seq + Tensor(self._positions(cfg.chunk))
                y = block(seq).reshape((b, n, cfg.chunk, c))
            else:
                seq = y.transpose((0, 2, 1, 3)).reshape((b * cfg.chunk, n, c))
                if prev != kind:
                    seq = seq + Tensor(self._positions(n))
                y = block(seq).reshape((b, cfg.chunk, n, c)).transpose((0, 2, 1, 3))
            prev = kind
        y = self.final_ln(y)
        rebuilt = unchunk_frames(y.transpose((0, 3, 1, 2)), cfg.chunk_hop, frames)
        flat = rebuilt.transpose((0, 2, 1))  # (B, F, C)
        m1 = T.sigmoid(self.mask1(flat)).transpose((0, 2, 1))
        m2 = T.sigmoid(self.mask2(flat)).transpose((0, 2, 1))
        return m1, m2

    def _decode(self, masked: Tensor, length: int) -> Tensor:
        out = self.decoder(masked)  # (B, 1, L')
        out = out.reshape((out.data.shape[0], out.data.shape[2]))
        produced = out.data.shape[-1]
        if produced >= length:
            return out[:, :length]
        return T.pad_axis(out, -1, 0, length - produced)

    def separate_batch(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(B, T) -> two (B, T) source estimates."""
        length = x.data.shape[-1]
        latents = self.encode(x)
        m1, m2 = self.dual_path_mask(latents)
        return self._decode(m1 * latents, length), self._decode(m2 * latents, length)


def separate(wave: np.ndarray, model: Separator) -> tuple[np.ndarray, np.ndarray]:
    """Single-waveform inference; outputs match the input length exactly."""
    x = np.asarray(wave, dtype=np.float64)[None, :]
    with T.no_grad():
        s1, s2 = model.separate_batch(Tensor(x))
    return s1.data[0].copy(), s2.data[0].copy()


# -- training ---------------------------------------------------------------------


def _crop(wave: np.ndarray, start: int, size: int) -> np.ndarray:
    out = np.asarray(wave[start : start + size], dtype=np.float64)
    if out.shape[0] < size:
        out = np.pad(out, (0, size - out.shape[0]))
    return out


def _batch_pit_loss(model: Separator, mixes: np.ndarray, refs: np.ndarray) -> Tensor:
    est1, est2 = model.separate_batch(Tensor(mixes))
    total = None
    for i in range(mixes.shape[0]):
        loss, _ = dsp.pit_loss(
            (est1[i], est2[i]), (refs[i, 0], refs[i, 1]), dsp.neg_si_snr
        )
        total = loss if total is None else total + loss
    return total * (1.0 / mixes.shape[0])


def validation_si_snri(model: Separator, examples, limit: int | None = None) -> float:
    """Mean PIT-resolved SI-SNR improvement over full-length utterances."""
    scores = []
    for ex in examples[:limit]:
        s1, s2 = separate(ex.mixture, model)
        refs = (ex.s1.astype(np.float64), ex.s2.astype(np.float64))
        _, perm = dsp.pit_loss((s1, s2), refs, dsp.neg_si_snr)
        ests = (s1, s2)
        improvement = np.mean([
            dsp.si_snri(ests[i], refs[perm[i]], ex.mixture.astype(np.float64))
            for i in range(2)
        ])
        scores.append(float(improvement))
    return float(np.mean(scores))


def train_separator(
    train_set,
    val_set,
    cfg: SeparatorConfig,
    epochs: int = 20,
    batch_size: int = 8,
    lr: float = 1e-3,
    crop: int = 2048,
    seed: int = 0,
    val_subset: int = 32,
    warmup_steps: int = 100,
    log=None,
):
    """PIT SI-SNR training on random crops; returns best-validation weights.

    History records per-step training loss and per-epoch validation SI-SNRi.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(seed)
    model = Separator(cfg, rng)
    opt = nn.AdamW(model.parameters(), lr=lr, warmup_steps=warmup_steps)
    history = {"train_loss": [], "val_si_snri": []}
    best = {"score": -np.inf, "arrays": None}

    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        for lo in range(0, len(order) - batch_size + 1, batch_size):
            idx = order[lo : lo + batch_size]
            mixes = np.zeros((len(idx), crop))
            refs = np.zeros((len(idx), 2, crop))
            for row, j in enumerate(idx):
                ex = train_set[j]
                # keep the window where both sources are live, or the padded
                # tail of the shorter one would feed SI-SNR a silent reference
                active = min(np.flatnonzero(ex.s1)[-1], np.flatnonzero(ex.s2)[-1]) + 1
                start = int(rng.integers(0, max(1, active - crop + 1)))
                mixes[row] = _crop(ex.mixture, start, crop)
                refs[row, 0] = _crop(ex.s1, start, crop)
                refs[row, 1] = _crop(ex.s2, start, crop)
            opt.zero_grad()
            loss = _batch_pit_loss(model, mixes, refs)
            loss.backward()
            opt.step()
            history["train_loss"].append(float(loss.data))
        score = validation_si_snri(model, val_set, limit=val_subset)
        history["val_si_snri"].append(score)
        if log is not None:
            log(f"epoch {epoch + 1}/{epochs}: val si-snri {score:.2f} dB")
        if score > best["score"]:
            best = {"score": score, "arrays": {k: t.data.copy() for k, t in model.tensors().items()}}

    if best["arrays"] is not None:
        model.load_arrays(best["arrays"])
    return model, history

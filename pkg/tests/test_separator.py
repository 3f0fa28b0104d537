"""Separator architecture and smoke-training tests."""

import numpy as np
import pytest

import sepkit.tensor as T
from sepkit import corpus, dsp, separator
from sepkit.errors import ConfigError, ShapeError
from sepkit.tensor import Tensor

TINY = separator.SeparatorConfig(
    channels=8, kernel=4, stride=2, chunk=6, chunk_hop=3,
    heads=2, ff=16, repeats=1, intra_blocks=1, inter_blocks=1,
)


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_config_validation():
    with pytest.raises(ConfigError, match="divide"):
        separator.SeparatorConfig(kernel=16, stride=5)
    with pytest.raises(ConfigError, match="hop"):
        separator.SeparatorConfig(chunk=50, chunk_hop=60)


def test_encode_frame_arithmetic():
    model = separator.Separator(separator.SeparatorConfig(), _rng(0))
    with T.no_grad():
        latents = model.encode(Tensor(_rng(1).normal(size=(1, 8000))))
    assert latents.data.shape == (1, 64, 999)


def test_encode_zero_input_zero_latents():
    model = separator.Separator(separator.SeparatorConfig(), _rng(0))
    with T.no_grad():
        latents = model.encode(Tensor(np.zeros((1, 400))))
    assert np.all(latents.data == 0.0)  # conv bias starts at zero, relu keeps it


def test_encode_rejects_short_input():
    model = separator.Separator(separator.SeparatorConfig(), _rng(0))
    with pytest.raises(ShapeError, match="kernel"):
        model.encode(Tensor(np.zeros((1, 10))))


def test_encode_impulse_reads_kernel_column():
    # an impulse at the start of frame j reproduces weight[:, 0, 0] at frame j
    model = separator.Separator(separator.SeparatorConfig(), _rng(0))
    x = np.zeros((1, 400))
    x[0, 3 * 8] = 1.0
    with T.no_grad():
        latents = model.encode(Tensor(x))
    expected = np.maximum(model.encoder.weight.data[:, 0, 0], 0.0)
    assert np.allclose(latents.data[0, :, 3], expected, atol=1e-12)


def test_chunk_round_trip_identity():
    x = Tensor(_rng(2).normal(size=(2, 8, 37)))
    chunks, frames = separator.chunk_frames(x, 6, 3)
    back = separator.unchunk_frames(chunks, 3, frames)
    assert back.data.shape == x.data.shape
    assert np.abs(back.data - x.data).max() <= 1e-10


@pytest.mark.parametrize("frames", [40, 75, 128])
def test_mask_shapes_cover_partial_chunks(frames):
    model = separator.Separator(TINY, _rng(3))
    latents = Tensor(_rng(4).uniform(0, 1, size=(2, 8, frames)))
    with T.no_grad():
        m1, m2 = model.dual_path_mask(latents)
    for m in (m1, m2):
        assert m.data.shape == (2, 8, frames)
        assert m.data.min() >= 0.0 and m.data.max() <= 1.0


def test_separate_matches_input_length():
    model = separator.Separator(TINY, _rng(5))
    for length in (100, 255, 1024):
        wave = _rng(6).normal(size=length)
        s1, s2 = separator.separate(wave, model)
        assert s1.shape == (length,) and s2.shape == (length,)
        assert np.all(np.isfinite(s1)) and np.all(np.isfinite(s2))


def test_separate_operator_norm_bound():
    # per-sample Cauchy-Schwarz bound from the decoder weights and latents
    model = separator.Separator(TINY, _rng(7))
    wave = _rng(8).normal(size=500)
    with T.no_grad():
        latents = model.encode(Tensor(wave[None, :]))
    s1, s2 = separator.separate(wave, model)
    w_norm = np.linalg.norm(model.decoder.weight.data)
    bias_reach = np.abs(model.decoder.bias.data).max()
    bound = 2.0 * (w_norm * np.linalg.norm(latents.data) + bias_reach)
    assert np.abs(s1 + s2).max() <= bound + 1e-9


def test_pit_loss_invariant_to_reference_order():
    model = separator.Separator(TINY, _rng(9))
    rng = _rng(10)
    mixes = rng.normal(size=(2, 300))
    refs = rng.normal(size=(2, 2, 300))
    with T.no_grad():
        a = separator._batch_pit_loss(model, mixes, refs)
        b = separator._batch_pit_loss(model, mixes, refs[:, ::-1])
    assert float(a.data) == float(b.data)


def _tiny_dataset(n, seed, params=None):
    params = params or corpus.CorpusParams(length_range=(2, 3), noise_kind="white")
    return corpus.generate_examples(n, seed, params)


def test_training_smoke_loss_decreases():
    # crop equals the shortest utterance so every step sees the same windows
    train = _tiny_dataset(10, 100)
    model, history = separator.train_separator(
        train, train, TINY, epochs=10, batch_size=10, lr=2e-3,
        crop=1280, seed=0, val_subset=2, warmup_steps=0,
    )
    losses = history["train_loss"]
    assert len(losses) == 10
    assert all(np.isfinite(losses))
    drops = sum(b < a for a, b in zip(losses, losses[1:]))
    assert drops >= 7


def test_training_rejects_empty_sets():
    with pytest.raises(ValueError, match="non-empty"):
        separator.train_separator([], [], TINY)


def test_validation_uses_pit_pairing():
    # swapped references must not change the reported improvement
    model = separator.Separator(TINY, _rng(11))
    examples = _tiny_dataset(3, 200)
    swapped = [
        corpus.MixtureExample(
            mixture=ex.mixture, s1=ex.s2, s2=ex.s1, noise=ex.noise,
            transcripts=ex.transcripts[::-1], snr_db=ex.snr_db, seed=ex.seed,
        )
        for ex in examples
    ]
    a = separator.validation_si_snri(model, examples)
    b = separator.validation_si_snri(model, swapped)
    assert a == pytest.approx(b, abs=1e-9)

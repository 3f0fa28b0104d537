"""Flat key = value configuration with typed coercion and a stable hash."""

import hashlib
from dataclasses import dataclass, fields

from sepkit.errors import ConfigError


@dataclass
class PipelineConfig:
    seed: int = 0
    sample_rate: int = 8000

    # corpus
    vocab_size: int = 16
    length_min: int = 8
    length_max: int = 16
    snr_min: float = -6.0
    snr_max: float = 3.0
    pitch_min: float = 0.8
    pitch_max: float = 1.25
    tilt_min: float = -3.0
    tilt_max: float = 3.0
    noise_kind: str = "mixed"
    grammar_seed: int = 7
    train_examples: int = 2000
    val_examples: int = 200
    test_examples: int = 200

    # stft
    stft_frame: int = 256
    stft_hop: int = 64

    # separator
    sep_channels: int = 64
    sep_kernel: int = 16
    sep_stride: int = 8
    sep_chunk: int = 50
    sep_chunk_hop: int = 25
    sep_heads: int = 4
    sep_ff: int = 128
    sep_repeats: int = 2
    sep_intra: int = 2
    sep_inter: int = 2
    sep_epochs: int = 20
    sep_batch: int = 8
    sep_lr: float = 1e-3
    sep_crop: int = 2048
    sep_val_subset: int = 32

    # codec
    codec_levels: int = 4
    codec_codebook: int = 64
    codec_latent: int = 64
    codec_epochs: int = 6
    codec_batch: int = 8
    codec_lr: float = 1e-3
    codec_commitment: float = 0.25
    codec_crop: int = 4096

    # teacher
    teacher_hidden: int = 64
    teacher_steps: int = 400
    teacher_lr: float = 3e-3

    # corrector
    corr_layers: int = 4
    corr_dim: int = 128
    corr_heads: int = 4
    corr_ff: int = 512
    corr_lr: float = 1e-3
    corr_pretrain_steps: int = 1500
    corr_finetune_steps: int = 800
    corr_batch: int = 16
    lora_rank: int = 8
    decode_temperature: float = 1.0
    decode_top_k: int = 0
    decode_top_p: float = 1.0

    # synthesizer
    synth_layers: int = 3
    synth_dim: int = 96
    synth_heads: int = 4
    synth_ff: int = 384
    synth_lr: float = 1e-3
    synth_steps: int = 1500
    synth_batch: int = 8
    mask_steps: int = 25
    cfg_gamma: float = 1.5
    cfg_drop: float = 0.1
    synthesis_mode: str = "mask"

    # aligner
    aligner_hidden: int = 16
    aligner_cap: float = 10.0
    aligner_lr: float = 1e-3
    aligner_steps: int = 12
    aligner_subset: int = 256
    aligner_batch: int = 8

    # evaluation
    eval_utterances: int = 200


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "int" or kind is int:
        return int(raw)
    if kind == "float" or kind is float:
        return float(raw)
    if kind == "bool" or kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: cannot read {raw!r} as a boolean")
    return raw


def parse_config_text(text: str) -> PipelineConfig:
    """Parse `key = value` lines; `#` starts a comment; unknown keys reject."""
    cfg = PipelineConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, _coerce(key, raw))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return cfg


def load_config(path) -> PipelineConfig:
    with open(path) as f:
        return parse_config_text(f.read())


def apply_overrides(cfg: PipelineConfig, overrides: dict) -> PipelineConfig:
    """String overrides (e.g. from CLI flags) coerced like file values."""
    for key, raw in overrides.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, str(raw)))
    return cfg


def config_text(cfg: PipelineConfig) -> str:
    """Canonical serialization: sorted keys, one per line."""
    lines = []
    for name in sorted(_FIELD_TYPES):
        value = getattr(cfg, name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()[:12]

"""Run configuration: a flat key=value text file with dotted keys
(e.g. `training.lr=3e-4`). Unknown keys are rejected; the only environment
override is SLMF_SEED.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    d_speech: int = 128
    d_model: int = 128
    n_speech_layers: int = 4
    n_adapter_layers: int = 2
    n_lm_enc_layers: int = 3
    n_lm_dec_layers: int = 3
    n_heads: int = 4
    downsample_factor: int = 2
    max_frames: int = 512
    max_len: int = 256


@dataclass
class SynthSection:
    frame_dim: int = 16
    dup_min: int = 2
    dup_max: int = 5
    noise_sigma: float = 0.3
    store_frames: bool = False


@dataclass
class DataSection:
    n_train_dialogs: int = 200
    n_eval_dialogs: int = 50
    n_heldout_dialogs: int = 40
    n_train_entities: int = 250
    n_eval_entities: int = 700
    n_asr_train: int = 1200
    n_asr_eval: int = 150
    turns_min: int = 2
    turns_max: int = 4


# (steps, batch_size, lr) used when the training section leaves them at 0.
STAGE_DEFAULTS = {
    "lm": (700, 16, 1.5e-3),
    "ctc": (700, 8, 1.5e-3),
    "adapter": (700, 8, 1.5e-3),
    "retriever": (300, 16, 1e-3),
    "slm": (500, 8, 5e-4),
}


@dataclass
class TrainingSection:
    steps: int = 0          # 0 -> per-stage default
    batch_size: int = 0     # 0 -> per-stage default
    lr: float = 0.0         # 0 -> per-stage default
    policy: str = "WholeLM"
    mode: str = "SLM"
    adapter_pretrained: bool = True
    dropout: float = 0.1
    checkpoint_every: int = 0
    d_r: int = 64
    temperature: float = 0.05

    def resolve(self, stage: str) -> tuple[int, int, float]:
        d_steps, d_batch, d_lr = STAGE_DEFAULTS[stage]
        return (
            self.steps or d_steps,
            self.batch_size or d_batch,
            self.lr or d_lr,
        )


@dataclass
class RetrievalSection:
    k: int = 10
    sim_threshold: float = -1.0
    auto_threshold: bool = True  # calibrate so median survivor count ~ k


@dataclass
class EvalSection:
    max_len: int = 64
    stage: str = "auto"  # asr eval: auto | adapter | slm


@dataclass
class PathsSection:
    corpus_dir: str = "corpus"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    synth: SynthSection = field(default_factory=SynthSection)
    data: DataSection = field(default_factory=DataSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)


_SECTIONS = {f.name for f in dataclasses.fields(RunConfig) if f.name != "seed"}


def _coerce(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config(path) -> RunConfig:
    """Parse the flat config file; env SLMF_SEED overrides `seed`."""
    cfg = RunConfig()
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key == "seed":
            cfg.seed = _coerce(raw, int, key)
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        sec_obj = getattr(cfg, section)
        fields = {f.name: f.type for f in dataclasses.fields(sec_obj)}
        if name not in fields:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        typ = type(getattr(sec_obj, name))
        setattr(sec_obj, name, _coerce(raw, typ, key))
    env_seed = os.environ.get("SLMF_SEED")
    if env_seed is not None:
        cfg.seed = _coerce(env_seed, int, "SLMF_SEED")
    return cfg


def expand_grid(cfg: RunConfig) -> list[dict]:
    """Ordered runs over {freeze policy} x {mode} x {adapter pretrained}.

    Mirrors the joint-training comparison grid: adapter-pretrained runs
    after from-scratch, plain mode before retrieval-augmented, policies in
    declaration order.
    """
    from .pipeline import FreezePolicy, Mode

    runs = []
    for adapter_pretrained in (False, True):
        for mode in (Mode.SLM, Mode.RESLM):
            for policy in (
                FreezePolicy.WHOLE_LM,
                FreezePolicy.ENCODER_AND_EMBEDDING,
                FreezePolicy.ENCODER_ONLY,
            ):
                runs.append(
                    {
                        "stage": "slm",
                        "policy": policy.value,
                        "mode": mode.value,
                        "adapter_pretrained": adapter_pretrained,
                        "name": f"slm_{mode.value}_{policy.value}"
                        + ("" if adapter_pretrained else "_scratch"),
                    }
                )
    return runs

"""Experiment configuration: one flat, typed key=value text format that
round-trips losslessly and expands into the component configs (dataset,
networks, optimizers, loss weights)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_args, get_origin, get_type_hints

from .datagen import (LayoutConfig, ModalityProfile, default_layout,
                      default_profiles)
from .losses import LossWeights
from .nets import NetworkConfig
from .training import OptimizerConfig

_DEF_A, _DEF_B = default_profiles()


@dataclass
class ExperimentConfig:
    """Everything one experiment run depends on.

    Fields are primitives so the whole object maps 1:1 onto the flat
    config-file format; accessor methods build the structured configs.
    """

    # dataset
    image_size: int = 64
    n_prior: int = 40
    n_mirror: int = 40
    test_fraction: float = 0.2
    direction: str = "a2b"          # a2b: prior trains on modality A
    unseen_classes: tuple[int, ...] = (1,)
    data_seed: int = 11
    profile_a_base: tuple[float, ...] = _DEF_A.base_intensity
    profile_a_gamma: float = _DEF_A.gamma
    profile_a_gain: float = _DEF_A.gain
    profile_a_offset: float = _DEF_A.offset
    profile_a_bias: float = _DEF_A.bias_field_amplitude
    profile_a_noise: float = _DEF_A.noise_sigma
    profile_b_base: tuple[float, ...] = _DEF_B.base_intensity
    profile_b_gamma: float = _DEF_B.gamma
    profile_b_gain: float = _DEF_B.gain
    profile_b_offset: float = _DEF_B.offset
    profile_b_bias: float = _DEF_B.bias_field_amplitude
    profile_b_noise: float = _DEF_B.noise_sigma

    # networks
    base_width: int = 16
    feat_channels: int = 32
    seg_hidden: int = 32
    disc_width: int = 32
    norm_groups: int = 4
    disc_input: str = "probs"
    init_seed: int = 0

    # stage-1 optimizer (desk-scale defaults; see OptimizerConfig for the
    # full-scale stock values)
    prior_lr: float = 0.2
    prior_momentum: float = 0.9
    prior_weight_decay: float = 5e-4
    prior_epochs: int = 150
    prior_batch_size: int = 8
    prior_schedule: str = "poly"

    # stage-2 optimizer
    zs_lr: float = 0.02
    zs_momentum: float = 0.9
    zs_weight_decay: float = 5e-4
    zs_epochs: int = 150
    zs_batch_size: int = 8
    zs_schedule: str = "poly"
    disc_lr: float = 2.5e-4
    disc_beta1: float = 0.9
    disc_beta2: float = 0.99
    clip_grad_norm: float | None = 1.0
    disc_noise: float = 0.1

    # loss weights
    lambda_weights: tuple[float, ...] = (3.0, 1.0, 1.0, 1.0)
    omega_weights: tuple[float, ...] = (0.5, 1.0, 0.01, 1.0)

    # run
    setting: str = "g"
    train_seed: int = 5
    augment: bool = False
    checkpoint_every: int = 10
    dice_mode: str = "pooled"
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        if self.direction not in ("a2b", "b2a"):
            raise ValueError("direction must be 'a2b' or 'b2a'")
        if len(self.lambda_weights) != 4 or len(self.omega_weights) != 4:
            raise ValueError("lambda/omega need exactly four weights")

    # -- structured views ---------------------------------------------------

    def layout(self) -> LayoutConfig:
        return default_layout(self.image_size)

    def profiles(self) -> tuple[ModalityProfile, ModalityProfile]:
        """Profiles in (prior-modality, zero-shot-modality) order; the
        b2a direction swaps the roles of the two appearances."""
        a = ModalityProfile(self.profile_a_base, self.profile_a_gamma,
                            self.profile_a_gain, self.profile_a_offset,
                            self.profile_a_bias, self.profile_a_noise)
        b = ModalityProfile(self.profile_b_base, self.profile_b_gamma,
                            self.profile_b_gain, self.profile_b_offset,
                            self.profile_b_bias, self.profile_b_noise)
        return (a, b) if self.direction == "a2b" else (b, a)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            image_size=self.image_size,
            num_classes=self.layout().num_classes,
            base_width=self.base_width,
            feat_channels=self.feat_channels,
            seg_hidden=self.seg_hidden,
            disc_width=self.disc_width,
            norm_groups=self.norm_groups,
            disc_input=self.disc_input,
            init_seed=self.init_seed,
        )

    def prior_opt(self) -> OptimizerConfig:
        return OptimizerConfig(
            model_lr=self.prior_lr, model_momentum=self.prior_momentum,
            weight_decay=self.prior_weight_decay, epochs=self.prior_epochs,
            batch_size=self.prior_batch_size, lr_schedule=self.prior_schedule)

    def zs_opt(self) -> OptimizerConfig:
        return OptimizerConfig(
            model_lr=self.zs_lr, model_momentum=self.zs_momentum,
            weight_decay=self.zs_weight_decay, epochs=self.zs_epochs,
            batch_size=self.zs_batch_size, lr_schedule=self.zs_schedule,
            disc_lr=self.disc_lr,
            disc_betas=(self.disc_beta1, self.disc_beta2),
            clip_grad_norm=self.clip_grad_norm, disc_noise=self.disc_noise)

    def loss_weights(self) -> LossWeights:
        return LossWeights(lam=tuple(self.lambda_weights),
                           omega=tuple(self.omega_weights))

    def replaced(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)


# ---------------------------------------------------------------------------
# flat key=value text format
# ---------------------------------------------------------------------------

def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v)
                        for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, ftype):
    text = text.strip()
    if get_origin(ftype) is type(int | None) or str(ftype).startswith("typing.Optional") \
            or "None" in str(ftype):
        if text.lower() == "none":
            return None
        # fall through with the non-None member type
        args = [a for a in get_args(ftype) if a is not type(None)]
        if args:
            ftype = args[0]
    if get_origin(ftype) is tuple:
        if not text:
            return ()
        elem = get_args(ftype)[0]
        return tuple(elem(v) for v in text.split(","))
    if ftype is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if ftype is int:
        return int(text)
    if ftype is float:
        return float(text)
    return text


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = ["# protoseg experiment configuration"]
    for f in fields(cfg):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ExperimentConfig:
    hints = get_type_hints(ExperimentConfig)
    known = {f.name: hints[f.name] for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', "
                             f"got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(val, known[key])
    return ExperimentConfig(**values)


def write_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config_to_text(cfg))
    return path


def read_config(path: str | Path) -> ExperimentConfig:
    return config_from_text(Path(path).read_text())

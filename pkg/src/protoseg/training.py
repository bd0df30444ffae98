"""Two-stage training: supervised prior-model training on modality A, then
inheritance training of the zero-shot model on modality B.

Stage 2 executes, per batch: prior forward, zero-shot backbone, attention
fusion, zero-shot segmentor, feature swap between the two segmentors,
pseudo-background extraction, then the alternating adversarial update
(discriminator first, with the zero-shot model frozen; zero-shot model
second, against the pre-update discriminator).  The prior model's weights
never change during stage 2.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import losses, nets
from .datagen import DatasetBundle, LabeledSample, augment
from .losses import LossBundle, LossWeights
from .nets import (Backbone, FusionAttention, NetworkConfig,
                   PatchDiscriminator, Segmentor, inheritance_guidance,
                   softmax_probs)

ABLATION_SETTINGS = ("a", "b", "c", "d", "e", "f", "g")


@dataclass(frozen=True)
class OptimizerConfig:
    """Optimization hyperparameters for both stages.

    Model updates use SGD (lr 2.5e-4, weight decay 5e-4); the discriminator
    uses Adam (lr 1e-4, betas 0.9/0.99).  The stock values suit the
    full-scale setting; the desk-scale harness overrides the model learning
    rate and epoch count.
    """

    model_lr: float = 2.5e-4
    model_momentum: float = 0.9
    weight_decay: float = 5e-4
    disc_lr: float = 1e-4
    disc_betas: tuple[float, float] = (0.9, 0.99)
    epochs: int = 250
    batch_size: int = 8
    lr_schedule: str = "constant"   # constant | poly
    poly_power: float = 0.9
    clip_grad_norm: float | None = None   # cap on model/discriminator grads
    disc_noise: float = 0.0               # instance noise on D inputs
    rpa_warmup_epochs: int = 0            # supervised-only epochs before
                                          # adversarial updates start

    def __post_init__(self):
        if self.model_lr <= 0 or self.disc_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "poly"):
            raise ValueError("lr_schedule must be 'constant' or 'poly'")


@dataclass(frozen=True)
class AblationSwitches:
    """Module on/off pattern of one ablation setting."""

    setting: str
    use_bg: bool
    use_rpa: bool
    use_cma: bool
    use_ia: bool
    warm_start: bool


def configure_ablation(setting: str,
                       base: LossWeights | None = None
                       ) -> tuple[AblationSwitches, LossWeights]:
    """Map an ablation setting a-g to module switches and loss weights.

    Disabling the background loss zeroes omega_2; disabling the adversarial
    module zeroes omega_3 and skips discriminator updates; disabling the
    feature swap zeroes omega_0; disabling attention bypasses the fusion
    block.  Setting (a) is the fine-tuning baseline warm-started from the
    prior model; all other settings train the zero-shot model from scratch.
    """
    base = base or LossWeights()
    w0, w1, w2, w3 = base.omega
    table = {
        "a": AblationSwitches("a", use_bg=False, use_rpa=False,
                              use_cma=False, use_ia=False, warm_start=True),
        "b": AblationSwitches("b", use_bg=False, use_rpa=False,
                              use_cma=False, use_ia=False, warm_start=False),
        "c": AblationSwitches("c", use_bg=True, use_rpa=False,
                              use_cma=False, use_ia=False, warm_start=False),
        "d": AblationSwitches("d", use_bg=True, use_rpa=True,
                              use_cma=True, use_ia=False, warm_start=False),
        "e": AblationSwitches("e", use_bg=True, use_rpa=True,
                              use_cma=False, use_ia=True, warm_start=False),
        "f": AblationSwitches("f", use_bg=True, use_rpa=False,
                              use_cma=True, use_ia=True, warm_start=False),
        "g": AblationSwitches("g", use_bg=True, use_rpa=True,
                              use_cma=True, use_ia=True, warm_start=False),
    }
    if setting not in table:
        raise ValueError(f"unknown ablation setting {setting!r}; "
                         f"expected one of {ABLATION_SETTINGS}")
    sw = table[setting]
    weights = LossWeights(
        lam=base.lam,
        omega=(w0 if sw.use_cma else 0.0,
               w1,
               w2 if sw.use_bg else 0.0,
               w3 if sw.use_rpa else 0.0),
    )
    return sw, weights


@dataclass
class TrainState:
    """Mutable stage-2 state: all modules, both optimizers and counters."""

    prior_backbone: Backbone
    prior_segmentor: Segmentor
    zs_backbone: Backbone
    zs_segmentor: Segmentor
    fusion: FusionAttention | None
    discriminator: PatchDiscriminator | None
    model_opt: torch.optim.Optimizer
    disc_opt: torch.optim.Optimizer | None
    switches: AblationSwitches
    opt_cfg: OptimizerConfig = field(default_factory=OptimizerConfig)
    noise_gen: torch.Generator = field(default_factory=torch.Generator)
    epoch: int = 0
    step: int = 0

    def zero_shot_modules(self) -> dict[str, nn.Module]:
        out: dict[str, nn.Module] = {"zs_backbone": self.zs_backbone,
                                     "zs_segmentor": self.zs_segmentor}
        if self.fusion is not None:
            out["fusion"] = self.fusion
        if self.discriminator is not None:
            out["discriminator"] = self.discriminator
        return out


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------

def images_to_tensor(samples: Sequence[LabeledSample]) -> torch.Tensor:
    arr = np.stack([s.image for s in samples])[:, None]
    return torch.from_numpy(arr.astype(np.float32))


def labels_to_tensor(samples: Sequence[LabeledSample]) -> torch.Tensor:
    arr = np.stack([s.label.grid.transpose(2, 0, 1) for s in samples])
    return torch.from_numpy(arr.astype(np.float32))


def seen_labels_to_tensor(samples: Sequence[LabeledSample],
                          seen_indices: tuple[int, ...]) -> torch.Tensor:
    arr = np.stack([s.label.grid[..., list(seen_indices)].transpose(2, 0, 1)
                    for s in samples])
    return torch.from_numpy(arr.astype(np.float32))


def _iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield [int(i) for i in order[start:start + batch_size]]


def _schedule_lr(opt: torch.optim.Optimizer, cfg: OptimizerConfig,
                 base_lr: float, step: int, total_steps: int) -> None:
    if cfg.lr_schedule == "poly" and total_steps > 0:
        factor = (1.0 - step / total_steps) ** cfg.poly_power
        for group in opt.param_groups:
            group["lr"] = base_lr * max(factor, 0.0)


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def train_prior(samples: Sequence[LabeledSample], net_cfg: NetworkConfig,
                opt_cfg: OptimizerConfig, seed: int,
                augment_seed: int | None = None
                ) -> tuple[Backbone, Segmentor, list[float]]:
    """Stage 1: fully supervised cross-entropy training on modality A.

    Returns the trained backbone and segmentor plus the per-step loss
    history.  Zero epochs returns the freshly initialized model.
    """
    backbone, segmentor = nets.build_segmentation_model(
        net_cfg, net_cfg.init_seed)
    params = list(backbone.parameters()) + list(segmentor.parameters())
    opt = torch.optim.SGD(params, lr=opt_cfg.model_lr,
                          momentum=opt_cfg.model_momentum,
                          weight_decay=opt_cfg.weight_decay)
    rng = np.random.default_rng(seed)
    total_steps = opt_cfg.epochs * max(1, -(-len(samples) // opt_cfg.batch_size))
    history: list[float] = []
    step = 0
    for epoch in range(opt_cfg.epochs):
        for batch_idx in _iter_batches(len(samples), opt_cfg.batch_size, rng):
            batch = [samples[i] for i in batch_idx]
            if augment_seed is not None:
                batch = [augment(s, augment_seed + 997 * step + k)
                         for k, s in enumerate(batch)]
            x = images_to_tensor(batch)
            y = labels_to_tensor(batch)
            probs = softmax_probs(segmentor(backbone(x)))
            loss = losses.loss_stage1(probs, y)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"stage-1 loss diverged at step {step}: {loss.item()}")
            _schedule_lr(opt, opt_cfg, opt_cfg.model_lr, step, total_steps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(float(loss.item()))
            step += 1
    return backbone, segmentor, history


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------

def cma_swap(f_p: torch.Tensor, f_s: torch.Tensor,
             segmentor_zs: Segmentor, segmentor_prior: Segmentor
             ) -> tuple[torch.Tensor, torch.Tensor]:
    """Swap features between the two segmentors.

    Returns (m_ps, m_sp) logits: the zero-shot segmentor reading the prior
    features and the prior segmentor reading the zero-shot features.  The
    prior segmentor's parameters receive no gradient, but gradients flow
    through it into ``f_s``.
    """
    if f_p.shape != f_s.shape:
        raise ValueError("swapped feature maps must share one shape")
    return segmentor_zs(f_p), segmentor_prior(f_s)


def make_train_state(prior_backbone: Backbone, prior_segmentor: Segmentor,
                     net_cfg: NetworkConfig, opt_cfg: OptimizerConfig,
                     switches: AblationSwitches, seed: int) -> TrainState:
    """Assemble stage-2 state: freeze the prior, build the zero-shot model
    (warm-started for the baseline setting), fusion and discriminator."""
    prior_backbone = nets.freeze(prior_backbone.eval())
    prior_segmentor = nets.freeze(prior_segmentor.eval())

    zs_backbone, zs_segmentor = nets.build_segmentation_model(
        net_cfg, net_cfg.init_seed + 100 + seed)
    if switches.warm_start:
        zs_backbone.load_state_dict(copy.deepcopy(prior_backbone.state_dict()))
        zs_segmentor.load_state_dict(copy.deepcopy(prior_segmentor.state_dict()))

    fusion = (nets.build_fusion(net_cfg, net_cfg.init_seed + 300 + seed)
              if switches.use_ia else None)
    discriminator = (nets.build_discriminator(net_cfg,
                                              net_cfg.init_seed + 200 + seed)
                     if switches.use_rpa else None)

    model_params = list(zs_backbone.parameters()) + list(zs_segmentor.parameters())
    if fusion is not None:
        model_params += list(fusion.parameters())
    model_opt = torch.optim.SGD(model_params, lr=opt_cfg.model_lr,
                                momentum=opt_cfg.model_momentum,
                                weight_decay=opt_cfg.weight_decay)
    disc_opt = (torch.optim.Adam(discriminator.parameters(),
                                 lr=opt_cfg.disc_lr, betas=opt_cfg.disc_betas)
                if discriminator is not None else None)
    noise_gen = torch.Generator().manual_seed(seed + 7919)
    return TrainState(prior_backbone, prior_segmentor, zs_backbone,
                      zs_segmentor, fusion, discriminator, model_opt,
                      disc_opt, switches, opt_cfg, noise_gen)


def stage2_step(images: torch.Tensor, seen_onehot: torch.Tensor,
                seen_indices: tuple[int, ...], state: TrainState,
                weights: LossWeights, rpa_active: bool = True) -> LossBundle:
    """One inheritance-training step on a batch of modality-B samples.

    Both losses are computed from a single forward pass; the discriminator
    update is applied first and the zero-shot model is updated against the
    pre-update discriminator outputs.  ``rpa_active`` is dropped to False
    during the warm-up epochs, leaving a purely supervised step.
    """
    sw = state.switches
    use_rpa = sw.use_rpa and rpa_active
    disc_input = state.zs_backbone.cfg.disc_input

    with torch.no_grad():
        f_p = state.prior_backbone(images)
        m_p_logits = state.prior_segmentor(f_p)
        m_p_probs = softmax_probs(m_p_logits)

    f = state.zs_backbone(images)
    if sw.use_ia:
        guidance = inheritance_guidance(m_p_logits)
        f_s = state.fusion(f, guidance)
    else:
        f_s = f
    m_s_logits = state.zs_segmentor(f_s)
    m_s_probs = softmax_probs(m_s_logits)

    if sw.use_cma:
        m_ps_logits, m_sp_logits = cma_swap(
            f_p, f_s, state.zs_segmentor, state.prior_segmentor)
        m_ps_probs = softmax_probs(m_ps_logits)
        m_sp_probs = softmax_probs(m_sp_logits)
        l_cross = losses.loss_cross(m_ps_probs, m_sp_probs,
                                    seen_onehot, seen_indices)
    else:
        m_ps_probs = m_sp_probs = None
        m_ps_logits = m_sp_logits = None
        l_cross = 0.0

    l_seen = losses.loss_seen(m_s_probs, seen_onehot, seen_indices)
    l_bg = (losses.loss_bg(losses.pseudo_background(m_p_probs),
                           m_s_probs[:, :1])
            if sw.use_bg else 0.0)

    l_d = 0.0
    l_adv = 0.0
    if use_rpa:
        def disc_view(probs, logits):
            return probs if disc_input == "probs" else logits

        def jitter(t):
            # instance noise keeps D from separating by sharpness alone
            if t is None or state.opt_cfg.disc_noise <= 0:
                return t
            noise = torch.randn(t.shape, generator=state.noise_gen,
                                dtype=t.dtype)
            return t + state.opt_cfg.disc_noise * noise

        pos = disc_view(m_p_probs, m_p_logits)
        neg_s = disc_view(m_s_probs, m_s_logits)
        neg_sp = disc_view(m_sp_probs, m_sp_logits) if sw.use_cma else None
        neg_ps = disc_view(m_ps_probs, m_ps_logits) if sw.use_cma else None

        # discriminator loss: generator outputs detached
        d_p = state.discriminator(jitter(pos))
        d_s = state.discriminator(jitter(neg_s.detach()))
        d_sp = (state.discriminator(jitter(neg_sp.detach()))
                if neg_sp is not None else None)
        d_ps = (state.discriminator(jitter(neg_ps.detach()))
                if neg_ps is not None else None)
        l_d = losses.loss_discriminator(d_p, d_sp, d_ps, d_s, weights)

        # adversarial loss: discriminator frozen, gradients to the model
        nets.set_requires_grad(state.discriminator, False)
        a_s = state.discriminator(jitter(neg_s))
        a_sp = state.discriminator(jitter(neg_sp)) if neg_sp is not None else None
        a_ps = state.discriminator(jitter(neg_ps)) if neg_ps is not None else None
        nets.set_requires_grad(state.discriminator, True)
        l_adv = losses.loss_adversarial(a_sp, a_ps, a_s)

    l_seg = losses.loss_seg(l_cross, l_seen, l_bg, l_adv, weights)

    for name, value in (("l_cross", l_cross), ("l_seen", l_seen),
                        ("l_bg", l_bg), ("l_adv", l_adv),
                        ("l_d", l_d), ("l_seg", l_seg)):
        if torch.is_tensor(value) and not torch.isfinite(value):
            raise RuntimeError(f"{name} is not finite at step {state.step}")

    clip = state.opt_cfg.clip_grad_norm
    if use_rpa:
        state.disc_opt.zero_grad()
        l_d.backward()
        if clip is not None:
            nn.utils.clip_grad_norm_(state.discriminator.parameters(), clip)
    state.model_opt.zero_grad()
    l_seg.backward()
    if clip is not None:
        for group in state.model_opt.param_groups:
            nn.utils.clip_grad_norm_(group["params"], clip)
    if use_rpa:
        state.disc_opt.step()
    state.model_opt.step()
    state.step += 1

    def val(x):
        return float(x.item()) if torch.is_tensor(x) else float(x)

    return LossBundle.from_components(weights, val(l_cross), val(l_seen),
                                      val(l_bg), val(l_adv), val(l_d))


def train_zeroshot(bundle: DatasetBundle, prior_backbone: Backbone,
                   prior_segmentor: Segmentor, net_cfg: NetworkConfig,
                   opt_cfg: OptimizerConfig, switches: AblationSwitches,
                   weights: LossWeights, seed: int,
                   checkpoint_dir: str | Path | None = None,
                   checkpoint_every: int = 10,
                   augment_seed: int | None = None
                   ) -> tuple[TrainState, list[LossBundle]]:
    """Stage 2: run the inheritance training loop over the modality-B
    training split, checkpointing every ``checkpoint_every`` epochs."""
    state = make_train_state(prior_backbone, prior_segmentor, net_cfg,
                             opt_cfg, switches, seed)
    train_samples = bundle.train_samples()
    seen_indices = bundle.seen_classes
    rng = np.random.default_rng(seed)
    total_steps = opt_cfg.epochs * max(1, -(-len(train_samples) // opt_cfg.batch_size))
    history: list[LossBundle] = []

    for epoch in range(opt_cfg.epochs):
        for batch_idx in _iter_batches(len(train_samples),
                                       opt_cfg.batch_size, rng):
            batch = [train_samples[i] for i in batch_idx]
            if augment_seed is not None:
                batch = [augment(s, augment_seed + 997 * state.step + k)
                         for k, s in enumerate(batch)]
            x = images_to_tensor(batch)
            y_seen = seen_labels_to_tensor(batch, seen_indices)
            _schedule_lr(state.model_opt, opt_cfg, opt_cfg.model_lr,
                         state.step, total_steps)
            bundle_losses = stage2_step(
                x, y_seen, seen_indices, state, weights,
                rpa_active=epoch >= opt_cfg.rpa_warmup_epochs)
            history.append(bundle_losses)
        state.epoch = epoch + 1
        if checkpoint_dir is not None and (
                (epoch + 1) % checkpoint_every == 0
                or epoch + 1 == opt_cfg.epochs):
            nets.save_checkpoint(
                Path(checkpoint_dir) / f"zeroshot_epoch{epoch + 1:04d}.npz",
                state.zero_shot_modules(), net_cfg, state.step)
    return state, history


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def make_predictor(backbone: Backbone, segmentor: Segmentor,
                   fusion: FusionAttention | None = None,
                   prior_backbone: Backbone | None = None,
                   prior_segmentor: Segmentor | None = None):
    """Build an image -> class-index-map callable mirroring the training
    composition (attention fusion uses the frozen prior's guidance when
    present)."""
    if fusion is not None and (prior_backbone is None or prior_segmentor is None):
        raise ValueError("fusion inference needs the prior model for guidance")

    def predict(image: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.asarray(image, dtype=np.float32))[None, None]
        with torch.no_grad():
            f = backbone(x)
            if fusion is not None:
                m_p = prior_segmentor(prior_backbone(x))
                f = fusion(f, inheritance_guidance(m_p))
            logits = segmentor(f)
            return logits.argmax(dim=1)[0].numpy()

    return predict


def loss_history_rows(history: Sequence[LossBundle], batches_per_epoch: int
                      ) -> list[dict]:
    """Flatten a loss history to CSV-ready dicts (step, epoch, losses)."""
    rows = []
    for step, item in enumerate(history):
        rows.append({
            "step": step,
            "epoch": step // max(1, batches_per_epoch),
            "L_Cross": item.l_cross,
            "L_Seen": item.l_seen,
            "L_Bg": item.l_bg,
            "L_Adv": item.l_adv,
            "L_Seg": item.l_seg,
            "L_D": item.l_d,
        })
    return rows

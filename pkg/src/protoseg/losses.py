"""Differentiable scalar losses of the two-stage training scheme.

All probability inputs are channel-softmax maps of shape (N, C, H, W);
discriminator scores are patch grids of shape (N, 1, h, w) strictly inside
(0, 1).  Every loss reduces with an arithmetic mean over the batch.  A fixed
epsilon of 1e-8 is added inside every logarithm; tests account for it.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Relative weights: ``lam`` scales the four discriminator terms,
    ``omega`` combines the four segmentation objectives."""

    lam: tuple[float, float, float, float] = (3.0, 1.0, 1.0, 1.0)
    omega: tuple[float, float, float, float] = (0.5, 1.0, 0.01, 1.0)

    def __post_init__(self):
        if any(v < 0 for v in self.lam) or any(v < 0 for v in self.omega):
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossBundle:
    """Named scalar losses of one training step.

    ``l_seg`` always equals the omega-weighted sum of its four components
    (recomputed in float64 at construction, so the identity is exact).
    """

    l_cross: float
    l_seen: float
    l_bg: float
    l_adv: float
    l_seg: float
    l_d: float

    @staticmethod
    def from_components(weights: LossWeights, l_cross: float, l_seen: float,
                        l_bg: float, l_adv: float, l_d: float) -> "LossBundle":
        w0, w1, w2, w3 = weights.omega
        l_seg = w0 * float(l_cross) + w1 * float(l_seen) \
            + w2 * float(l_bg) + w3 * float(l_adv)
        return LossBundle(float(l_cross), float(l_seen), float(l_bg),
                          float(l_adv), l_seg, float(l_d))


def _check_same_shape(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch between loss inputs: {shapes}")


def _check_scores(*tensors) -> None:
    for t in tensors:
        if t is None:
            continue
        if torch.any(t <= 0) or torch.any(t >= 1):
            raise ValueError("discriminator scores must lie strictly in (0,1)")


def loss_stage1(probs: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    """Fully supervised cross-entropy over all classes.

    Mean over every location and channel of -y * log(m + eps); zero when
    the probability mass sits exactly on the true channels.
    """
    _check_same_shape(probs, onehot)
    return (-(onehot * torch.log(probs + EPS))).mean()


def _seen_term(probs: torch.Tensor, seen_onehot: torch.Tensor,
               seen_indices: tuple[int, ...]) -> torch.Tensor:
    if len(seen_indices) == 0:
        raise ValueError("no seen classes: supervision undefined")
    sel = probs[:, list(seen_indices)]
    _check_same_shape(sel, seen_onehot)
    return -(seen_onehot * torch.log(sel + EPS))


def loss_cross(m_ps: torch.Tensor, m_sp: torch.Tensor,
               seen_onehot: torch.Tensor,
               seen_indices: tuple[int, ...]) -> torch.Tensor:
    """Supervision of both feature-swapped outputs on the seen channels.

    ``m_ps`` and ``m_sp`` are full-C probability maps; ``seen_onehot``
    (N, C_s, H, W) selects the seen structure channels listed in
    ``seen_indices``.  Normalized by K_s = H * W * C_s per sample.
    """
    terms = _seen_term(m_ps, seen_onehot, seen_indices) \
        + _seen_term(m_sp, seen_onehot, seen_indices)
    k_s = seen_onehot[0].numel()
    return terms.reshape(terms.shape[0], -1).sum(dim=1).mean() / k_s


def loss_seen(m_s: torch.Tensor, seen_onehot: torch.Tensor,
              seen_indices: tuple[int, ...]) -> torch.Tensor:
    """Supervised loss of the zero-shot output on the seen channels only."""
    terms = _seen_term(m_s, seen_onehot, seen_indices)
    k_s = seen_onehot[0].numel()
    return terms.reshape(terms.shape[0], -1).sum(dim=1).mean() / k_s


def pseudo_background(m_p: torch.Tensor) -> torch.Tensor:
    """Binary pseudo background label from the prior model's probabilities.

    A pixel is background iff the background channel attains the per-pixel
    maximum (ties therefore resolve toward the background, the lowest
    channel index).  Shape (N, 1, H, W); no gradient flows through it.
    """
    with torch.no_grad():
        top = m_p.max(dim=1, keepdim=True).values
        return (m_p[:, :1] >= top).to(m_p.dtype)


def loss_bg(y_hat_bg: torch.Tensor, m_s_bg: torch.Tensor) -> torch.Tensor:
    """Background awareness: mean squared error between the pseudo
    background label and the background probability channel."""
    _check_same_shape(y_hat_bg, m_s_bg)
    return ((y_hat_bg - m_s_bg) ** 2).mean()


def loss_discriminator(d_p: torch.Tensor,
                       d_sp: torch.Tensor | None,
                       d_ps: torch.Tensor | None,
                       d_s: torch.Tensor,
                       weights: LossWeights) -> torch.Tensor:
    """Discrimination loss: the prior output is the positive sample, all
    zero-shot-side outputs are negatives.

    ``d_sp``/``d_ps`` may be None when the feature swap is disabled; their
    terms are then omitted.
    """
    _check_scores(d_p, d_sp, d_ps, d_s)
    l0, l1, l2, l3 = weights.lam
    total = -l0 * torch.log(d_p + EPS) - l3 * torch.log(1.0 - d_s + EPS)
    if d_sp is not None:
        total = total - l1 * torch.log(1.0 - d_sp + EPS)
    if d_ps is not None:
        total = total - l2 * torch.log(1.0 - d_ps + EPS)
    return total.mean()


def loss_adversarial(d_sp: torch.Tensor | None,
                     d_ps: torch.Tensor | None,
                     d_s: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss pulling all zero-shot-side outputs
    toward the discriminator's positive decision."""
    _check_scores(d_sp, d_ps, d_s)
    total = -torch.log(d_s + EPS)
    if d_sp is not None:
        total = total - torch.log(d_sp + EPS)
    if d_ps is not None:
        total = total - torch.log(d_ps + EPS)
    return total.mean()


def loss_seg(l_cross, l_seen, l_bg, l_adv, weights: LossWeights):
    """Overall training objective: the omega-weighted sum of components."""
    w0, w1, w2, w3 = weights.omega
    return w0 * l_cross + w1 * l_seen + w2 * l_bg + w3 * l_adv

"""Per-block supervision: pooled targets, losses and block-importance weights.

Targets for a block at resolution level i come from average-pooling the
one-hot mask by 2^i, which yields soft per-pixel class mass.  Each supervised
block contributes a pixel-wise cross-entropy term; a trainable simplex of
block weights mixes the terms into the learner loss and (in the default
mode) mixes the block probability maps into the learner prediction.

Three weighting modes exist:

* ``unconstrained`` - weights are a plain softmax; the prediction is the
  single block map with the largest weight.
* ``bounded`` - the softmax is squashed into
  [1/(2(d+1)), (d+2)/(2(d+1))] so no block's weight can vanish; prediction
  as above.
* ``bounded_sum`` (default) - bounded weights, and the prediction is their
  weighted sum over all block maps.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .model import blocks_for_depth

ETA_MODES = ("unconstrained", "bounded", "bounded_sum")

LOG_CLAMP = 1e-12


class SupervisionError(ValueError):
    pass


def downsample_mask(onehot_mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Average-pool a one-hot mask (..., C, H, W) by a power-of-two factor.

    Every output pixel is the mean of its factor x factor window, so entries
    are multiples of 1/factor^2 and each pixel's channel vector still sums
    to 1.
    """
    if factor < 1 or factor & (factor - 1):
        raise SupervisionError(f"factor must be a power of two, got {factor}")
    h, w = onehot_mask.shape[-2:]
    if h % factor or w % factor:
        raise SupervisionError(f"mask {h}x{w} not divisible by factor {factor}")
    flat = onehot_mask.reshape(-1, *onehot_mask.shape[-3:])
    if not torch.logical_or(flat == 0, flat == 1).all():
        raise SupervisionError("mask is not one-hot (entries outside {0,1})")
    if not torch.allclose(flat.sum(dim=-3), torch.ones(()), atol=1e-6):
        raise SupervisionError("mask is not one-hot (channel sums differ from 1)")
    if factor == 1:
        return onehot_mask.clone()
    pooled = F.avg_pool2d(flat, factor)
    return pooled.reshape(*onehot_mask.shape[:-2], h // factor, w // factor)


def block_loss(
    probs: torch.Tensor,
    target: torch.Tensor,
    class_weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Pixel-wise cross entropy -1/N sum_n sum_c w_c y log(p).

    probs and target are (..., C, H, W); returns a scalar for unbatched
    input or a per-sample vector for (N, C, H, W).  Probabilities are
    clamped at 1e-12 before the log.
    """
    if probs.shape != target.shape:
        raise SupervisionError(
            f"prediction shape {tuple(probs.shape)} != target shape {tuple(target.shape)}"
        )
    log_p = torch.log(probs.clamp_min(LOG_CLAMP))
    term = target * log_p
    if class_weights is not None:
        cw = torch.as_tensor(class_weights, dtype=term.dtype, device=term.device)
        if cw.numel() != probs.shape[-3]:
            raise SupervisionError("class_weights length differs from class count")
        term = term * cw.view(-1, 1, 1)
    n_pixels = probs.shape[-1] * probs.shape[-2]
    return -term.sum(dim=(-3, -2, -1)) / n_pixels


class EtaWeights(nn.Module):
    """Trainable block-importance weights for a depth-d learner.

    Raw logits start at zero so the softmax begins uniform at 1/(d+1).
    ``tilde`` applies the bounded reparameterization
    eta/2 + 1/(2(d+1)), which keeps each weight inside
    [1/(2(d+1)), (d+2)/(2(d+1))] while preserving the unit sum.
    """

    def __init__(self, depth: int, mode: str = "bounded_sum"):
        super().__init__()
        if mode not in ETA_MODES:
            raise SupervisionError(f"unknown eta mode {mode!r}")
        self.depth = depth
        self.mode = mode
        self.raw_logits = nn.Parameter(torch.zeros(depth + 1, dtype=torch.float64))

    @property
    def block_order(self) -> list[tuple[int, int]]:
        return blocks_for_depth(self.depth)

    def eta(self) -> torch.Tensor:
        return torch.softmax(self.raw_logits, dim=0)

    def tilde(self) -> torch.Tensor:
        d = self.depth
        return self.eta() / 2 + 1.0 / (2 * (d + 1))

    def loss_weights(self) -> torch.Tensor:
        return self.eta() if self.mode == "unconstrained" else self.tilde()

    def prediction_weights(self) -> torch.Tensor:
        return self.eta() if self.mode == "unconstrained" else self.tilde()

    def bounds(self) -> tuple[float, float]:
        d = self.depth
        return 1.0 / (2 * (d + 1)), (d + 2) / (2 * (d + 1))


def constrain_eta(eta: EtaWeights) -> torch.Tensor:
    """Bounded weights of an EtaWeights module (bounded modes only)."""
    if eta.mode == "unconstrained":
        raise SupervisionError("constrain_eta is defined for bounded modes only")
    return eta.tilde()


def combined_loss(block_losses: torch.Tensor, eta: EtaWeights) -> torch.Tensor:
    """Weighted sum of per-block losses with the mode's loss weights."""
    weights = eta.loss_weights()
    if block_losses.shape[-1] != weights.shape[0]:
        raise SupervisionError(
            f"expected {weights.shape[0]} block losses, got {block_losses.shape[-1]}"
        )
    return (block_losses * weights.to(block_losses.dtype)).sum(dim=-1)


def combined_prediction(
    block_probs: dict[tuple[int, int], torch.Tensor],
    eta: EtaWeights,
    target_size: tuple[int, int],
) -> torch.Tensor:
    """Learner probability map at target_size from per-block maps.

    In bounded_sum mode the maps are bilinearly upsampled and mixed with the
    bounded weights; in the other modes the single map with the largest
    weight is returned (upsampled).
    """
    order = eta.block_order
    missing = [b for b in order if b not in block_probs]
    if missing:
        raise SupervisionError(f"missing block map(s) {missing}")
    weights = eta.prediction_weights()
    if eta.mode == "bounded_sum":
        total = None
        for w, key in zip(weights, order):
            up = _to_size(block_probs[key], target_size)
            total = w.to(up.dtype) * up if total is None else total + w.to(up.dtype) * up
        return total
    top = order[int(torch.argmax(weights).item())]
    return _to_size(block_probs[top], target_size)


def _to_size(prob: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if prob.shape[-2:] == tuple(size):
        return prob
    squeeze = prob.ndim == 3
    if squeeze:
        prob = prob[None]
    prob = F.interpolate(prob, size=size, mode="bilinear", align_corners=False)
    return prob[0] if squeeze else prob


def block_probabilities(
    logits: dict[tuple[int, int], torch.Tensor]
) -> dict[tuple[int, int], torch.Tensor]:
    """Per-pixel softmax of every supervision head output."""
    return {key: torch.softmax(v, dim=-3) for key, v in logits.items()}

"""Negative cosine similarity and the symmetric stop-gradient loss."""

from __future__ import annotations

import torch

from ..errors import DegenerateVectorError

_NORM_FLOOR = 1e-12


def neg_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """-cos(a, b), averaged over the batch for 2-D inputs.

    Raises:
        DegenerateVectorError: any row of either argument has zero norm.
    """
    if a.ndim == 1:
        a = a.unsqueeze(0)
    if b.ndim == 1:
        b = b.unsqueeze(0)
    na = a.norm(dim=1)
    nb = b.norm(dim=1)
    if bool((na <= _NORM_FLOOR).any()) or bool((nb <= _NORM_FLOOR).any()):
        raise DegenerateVectorError("cosine similarity of a zero-norm vector is undefined")
    cos = (a / na.unsqueeze(1) * (b / nb.unsqueeze(1))).sum(dim=1)
    return -cos.mean()


def simsiam_loss(
    p1: torch.Tensor, p2: torch.Tensor, z1: torch.Tensor, z2: torch.Tensor
) -> torch.Tensor:
    """Symmetric prediction loss with stop-gradient on the target branch.

    L = 1/2 * negcos(p1, detach(z2)) + 1/2 * negcos(p2, detach(z1)),
    so gradients flow only through the predictor branch of each term.
    The value lies in [-1, 1].
    """
    return 0.5 * neg_cosine(p1, z2.detach()) + 0.5 * neg_cosine(p2, z1.detach())

"""Vector quantization: codebook lookup, straight-through gradients, losses.

One :class:`Codebook` per pyramid level.  Lookups snap each spatial vector
to its nearest table row (squared Euclidean distance, ties to the lowest
index); the straight-through wrapper makes the snap transparent to
gradients flowing back into the encoder.  The codebook itself learns only
through the dedicated loss terms, never through the straight-through path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

__all__ = ["Codebook", "QuantizationResult", "quantize", "vq_loss", "straight_through_apply"]

COMMITMENT_WEIGHT = 0.25  # weight on the encoder-side commitment term


class Codebook(nn.Module):
    """A K x c embedding table, rows initialized uniform in [-1/K, 1/K]."""

    def __init__(self, K: int, c: int, generator: torch.Generator | None = None):
        super().__init__()
        if K < 1 or c < 1:
            raise ValueError("codebook needs K >= 1 rows and c >= 1 dims")
        self.K = K
        self.c = c
        table = torch.empty(K, c)
        table.uniform_(-1.0 / K, 1.0 / K, generator=generator)
        self.table = nn.Parameter(table)

    def extra_repr(self) -> str:
        return f"K={self.K}, c={self.c}"


@dataclass
class QuantizationResult:
    indices: torch.Tensor  # integer map, spatial shape
    quantized: torch.Tensor  # same shape as the input, rows gathered from the table
    residual_sq: float  # mean squared quantization error


def _nearest_indices(flat: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    # ||z - e||^2 = ||z||^2 - 2 z.e + ||e||^2; argmin over rows.  The
    # tie-break to the lowest index is made explicit (argmin alone leaves
    # tie order undocumented): mask the minimizers, then take the smallest
    # masked column index.
    d = (
        flat.pow(2).sum(dim=1, keepdim=True)
        - 2.0 * flat @ table.t()
        + table.pow(2).sum(dim=1).unsqueeze(0)
    )
    K = table.shape[0]
    cols = torch.arange(K, device=flat.device)
    is_min = d == d.min(dim=1, keepdim=True).values
    idx = torch.where(is_min, cols, K).min(dim=1).values
    if bool((idx == K).any()):
        raise RuntimeError(
            "non-finite distances in codebook lookup; encoder output or codebook diverged"
        )
    return idx


def _lookup(z: torch.Tensor, book: Codebook) -> tuple[torch.Tensor, torch.Tensor]:
    """Indices and gathered rows for a [B,c,h,w] tensor."""
    B, c, h, w = z.shape
    flat = z.detach().permute(0, 2, 3, 1).reshape(-1, c)
    idx = _nearest_indices(flat, book.table.detach())
    q = book.table[idx].reshape(B, h, w, c).permute(0, 3, 1, 2)
    return idx.reshape(B, h, w), q


def _as_batched(z_e: torch.Tensor, book: Codebook) -> tuple[torch.Tensor, bool]:
    if z_e.dim() not in (3, 4):
        raise ValueError(f"expected [c,h,w] or [B,c,h,w], got shape {tuple(z_e.shape)}")
    if z_e.shape[-3] != book.c:
        raise ValueError(f"channel dim {z_e.shape[-3]} != codebook dim {book.c}")
    batched = z_e.dim() == 4
    return (z_e if batched else z_e.unsqueeze(0)), batched


def quantize(z_e: torch.Tensor, book: Codebook) -> QuantizationResult:
    """Snap each spatial vector of ``z_e`` ([c,h,w] or [B,c,h,w]) to the codebook.

    The returned ``quantized`` tensor is differentiable with respect to the
    table (a gather); ``indices`` are not differentiable.
    """
    z, batched = _as_batched(z_e, book)
    idx, q = _lookup(z, book)
    residual = float((z.detach() - q.detach()).pow(2).mean())
    if not batched:
        q, idx = q.squeeze(0), idx.squeeze(0)
    return QuantizationResult(indices=idx, quantized=q, residual_sq=residual)


def vq_loss(z_e: torch.Tensor, quantized: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(codebook_loss, commitment_loss) for one level.

    codebook_loss moves table rows toward the (detached) encoder output;
    commitment_loss moves the encoder toward the (detached) rows.  The
    combined contribution is ``codebook + COMMITMENT_WEIGHT * commitment``.
    """
    if z_e.shape != quantized.shape:
        raise ValueError("z_e and quantized must share a shape")
    codebook_loss = (z_e.detach() - quantized).pow(2).mean()
    commitment_loss = (z_e - quantized.detach()).pow(2).mean()
    return codebook_loss, commitment_loss


class _StraightThrough(torch.autograd.Function):
    """Forward returns the quantized value; both AD modes treat the op as
    the identity on ``z_e`` (reverse passes the gradient through unchanged,
    forward-mode propagates the tangent of ``z_e``)."""

    generate_vmap_rule = True

    @staticmethod
    def forward(z_e, quantized):
        return quantized

    @staticmethod
    def setup_context(ctx, inputs, output):
        pass

    @staticmethod
    def backward(ctx, grad_out):
        return grad_out, None

    @staticmethod
    def jvp(ctx, tangent_z, tangent_q):
        return tangent_z


def straight_through_apply(z_e: torch.Tensor, book: Codebook) -> torch.Tensor:
    """Quantize with an identity backward: forward is the snapped value
    bitwise, the incoming gradient passes to ``z_e`` unchanged, and the
    codebook receives no gradient through this path."""
    z, batched = _as_batched(z_e, book)
    _, q = _lookup(z, book)
    if not batched:
        q = q.squeeze(0)
    return _StraightThrough.apply(z_e, q.detach())

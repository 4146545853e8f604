"""Neighbor-shift operators, additive interpolation, and data-dependent decay.

Images get a quad-directional shift: the four channel quartiles of each grid
cell are taken from the cells above, below, left, and right. Text gets a
bidirectional shift: the first channel half comes from the previous position,
the second half from the next one. Out-of-range neighbors contribute zeros,
and padded text positions are never used as shift sources.

The decay path turns the shifted stream into a per-token, per-channel decay
factor w = exp(-exp(w_tilde)) in (0, 1), where w_tilde comes from a low-rank
learned map phi(x) = base + tanh(x @ down) @ up applied twice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError, _accum, _emit, exp_op, neg, tanh_op, matmul

__all__ = [
    "ImageLayout",
    "TextLayout",
    "TokenGrid",
    "LerpParams",
    "DecayParams",
    "quad_shift",
    "bi_shift",
    "token_shift",
    "lerp",
    "phi",
    "decay_path",
]

LERP_TARGETS_SPATIAL = ("g", "r", "k", "v", "w")
LERP_TARGETS_CHANNEL = ("r", "k")


@dataclass(frozen=True)
class ImageLayout:
    h_tokens: int
    w_tokens: int


@dataclass(frozen=True)
class TextLayout:
    pad_mask: np.ndarray  # bool (B, T), True at padding

    def __post_init__(self):
        mask = np.asarray(self.pad_mask, dtype=bool)
        object.__setattr__(self, "pad_mask", mask)
        if mask.ndim != 2:
            raise ShapeError("pad_mask must be (B, T)")
        # padding must be trailing: once padded, padded to the end
        if mask.shape[1] > 1 and np.any(mask[:, :-1] & ~mask[:, 1:]):
            raise ValueError("pad_mask must mark trailing padding only")


class TokenGrid:
    """A batch of token sequences plus modality metadata."""

    def __init__(self, tokens: Tensor, layout):
        if tokens.ndim != 3:
            raise ShapeError(f"tokens must be (B, T, C), got {tokens.shape}")
        b, t, c = tokens.shape
        if isinstance(layout, ImageLayout):
            if layout.h_tokens * layout.w_tokens != t:
                raise ShapeError(
                    f"image layout {layout.h_tokens}x{layout.w_tokens} != T={t}")
            if c % 4 != 0:
                raise ShapeError("image token channels must be divisible by 4")
        elif isinstance(layout, TextLayout):
            if layout.pad_mask.shape != (b, t):
                raise ShapeError("pad_mask shape must match (B, T)")
            if c % 2 != 0:
                raise ShapeError("text token channels must be divisible by 2")
        else:
            raise TypeError(f"unknown layout {layout!r}")
        self.tokens = tokens
        self.layout = layout

    @property
    def is_image(self) -> bool:
        return isinstance(self.layout, ImageLayout)

    @property
    def is_text(self) -> bool:
        return isinstance(self.layout, TextLayout)

    def with_tokens(self, tokens: Tensor) -> "TokenGrid":
        return TokenGrid(tokens, self.layout)


@dataclass
class LerpParams:
    """One learnable per-channel mixing vector per interpolation target."""

    eta: dict[str, Tensor]

    def __getitem__(self, target: str) -> Tensor:
        return self.eta[target]


@dataclass
class DecayParams:
    """Low-rank parameters of phi(x) = base + tanh(x @ down) @ up."""

    base: Tensor      # (C,)
    down: Tensor      # (C, r)
    up: Tensor        # (r, C)

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    def __post_init__(self):
        c = self.base.shape[0]
        if self.down.shape != (c, self.rank) or self.up.shape != (self.rank, c):
            raise ShapeError("decay parameter shapes disagree")
        if self.rank > c:
            raise ShapeError("decay rank must not exceed channel count")


def quad_shift(grid: TokenGrid) -> Tensor:
    """Quad-directional image shift over channel quartiles.

    Output quartile q at cell (h, w) equals input quartile q at the neighbor
    above / below / left / right respectively; missing neighbors give zeros.
    """
    if not grid.is_image:
        raise ShapeError("quad_shift requires an image layout")
    x = grid.tokens
    b, t, c = x.shape
    hh, ww = grid.layout.h_tokens, grid.layout.w_tokens
    q = c // 4
    xg = x.data.reshape(b, hh, ww, c)
    out = np.zeros_like(xg)
    out[:, 1:, :, 0:q] = xg[:, :-1, :, 0:q]
    out[:, :-1, :, q:2 * q] = xg[:, 1:, :, q:2 * q]
    out[:, :, 1:, 2 * q:3 * q] = xg[:, :, :-1, 2 * q:3 * q]
    out[:, :, :-1, 3 * q:] = xg[:, :, 1:, 3 * q:]

    def pull(g):
        if not x.requires_grad:
            return
        gg = g.reshape(b, hh, ww, c)
        gx = np.zeros_like(gg)
        gx[:, :-1, :, 0:q] += gg[:, 1:, :, 0:q]
        gx[:, 1:, :, q:2 * q] += gg[:, :-1, :, q:2 * q]
        gx[:, :, :-1, 2 * q:3 * q] += gg[:, :, 1:, 2 * q:3 * q]
        gx[:, :, 1:, 3 * q:] += gg[:, :, :-1, 3 * q:]
        _accum(x, gx.reshape(b, t, c))

    return _emit(out.reshape(b, t, c), "quad_shift", (x,), pull)


def bi_shift(grid: TokenGrid) -> Tensor:
    """Bidirectional text shift over channel halves.

    The first half at position t comes from t-1, the second half from t+1.
    Padded positions contribute zeros and are excluded as sources.
    """
    if not grid.is_text:
        raise ShapeError("bi_shift requires a text layout")
    x = grid.tokens
    b, t, c = x.shape
    half = c // 2
    src = (~grid.layout.pad_mask).astype(np.float64)[:, :, None]
    xm = x.data * src
    out = np.zeros_like(x.data)
    if t > 1:
        out[:, 1:, :half] = xm[:, :-1, :half]
        out[:, :-1, half:] = xm[:, 1:, half:]

    def pull(g):
        if not x.requires_grad or t <= 1:
            if x.requires_grad:
                _accum(x, np.zeros_like(x.data))
            return
        gx = np.zeros_like(x.data)
        gx[:, :-1, :half] += g[:, 1:, :half]
        gx[:, 1:, half:] += g[:, :-1, half:]
        _accum(x, gx * src)

    return _emit(out, "bi_shift", (x,), pull)


def token_shift(grid: TokenGrid) -> Tensor:
    return quad_shift(grid) if grid.is_image else bi_shift(grid)


def lerp(x: Tensor, x_shift: Tensor, eta: Tensor) -> Tensor:
    """Additive interpolation x + (1 - eta) * x_shift.

    Deliberately not a convex blend; the shift term is an additive offset
    scaled by (1 - eta) per channel.
    """
    if x.shape != x_shift.shape:
        raise ShapeError(f"lerp shapes differ: {x.shape} vs {x_shift.shape}")
    return x + (1.0 - eta) * x_shift


def phi(x: Tensor, p: DecayParams) -> Tensor:
    """base + tanh(x @ down) @ up, broadcast over leading axes."""
    return p.base + matmul(tanh_op(matmul(x, p.down)), p.up)


def decay_path(x: Tensor, x_shift: Tensor, eta_w: Tensor, p: DecayParams,
               p_inner: DecayParams | None = None) -> tuple[Tensor, Tensor]:
    """Data-dependent decay from the token stream and its shift.

    Returns (w_tilde, w) where
        w_hat   = x + (1 - phi(lerp(x, x_shift, eta_w))) * x_shift
        w_tilde = phi(w_hat)
        w       = exp(-exp(w_tilde))
    Both phi applications share one parameter set unless ``p_inner`` is
    given. The double exponential pins w strictly inside (0, 1).
    """
    inner = phi(lerp(x, x_shift, eta_w), p_inner if p_inner is not None else p)
    w_hat = x + (1.0 - inner) * x_shift
    w_tilde = phi(w_hat, p)
    w = exp_op(neg(exp_op(w_tilde)))
    return w_tilde, w

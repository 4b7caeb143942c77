"""Channel deduction network and the pilot-only mixer baseline.

All complex weights are stored as separate real and imaginary float64
parameters, so every real degree of freedom is an ordinary autograd leaf.
Channel tensors are complex128 of shape ``(batch, N_t, N_c)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import Tensor, nn
from torch.nn import functional as F

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelConfig:
    n_t: int
    n_c: int
    n_t0: int
    n_c0: int
    kind: str = "gcd"          # "gcd" or "cmixer" (pilot-only baseline)
    K: int = 3
    L: int = 6
    hidden: int | None = None  # None -> n_t * n_c // 2
    heads: int = 4
    ff_mult: int = 2
    baseline_layers: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gcd", "cmixer"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.width % self.heads:
            raise ValueError("hidden width must be divisible by heads")
        if self.K < 1 or self.L < 0 or self.baseline_layers < 1:
            raise ValueError("layer counts must be positive")

    @property
    def width(self) -> int:
        return self.hidden if self.hidden is not None else self.n_t * self.n_c // 2

    def to_dict(self) -> dict:
        return asdict(self)


def split_act(x: Tensor) -> Tensor:
    """GELU applied separately to real and imaginary parts."""
    return torch.complex(F.gelu(x.real), F.gelu(x.imag))


class ComplexLinear(nn.Module):
    """y = W x + b along one axis of a complex matrix (axis 1 or 2 of the batch)."""

    def __init__(self, n_in: int, n_out: int, axis: int, gen: torch.Generator):
        super().__init__()
        self.axis = axis
        bound = 1.0 / math.sqrt(2.0 * n_in)
        def u(*shape):
            return nn.Parameter((torch.rand(*shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        self.w_re, self.w_im = u(n_out, n_in), u(n_out, n_in)
        self.b_re, self.b_im = u(n_out), u(n_out)

    def forward(self, x: Tensor) -> Tensor:
        w = torch.complex(self.w_re, self.w_im)
        b = torch.complex(self.b_re, self.b_im)
        if self.axis == 1:
            return torch.einsum("oi,bij->boj", w, x) + b[None, :, None]
        return torch.einsum("oj,bij->bio", w, x) + b[None, None, :]


class MixerLayer(nn.Module):
    """Antenna-axis map then subcarrier-axis map.

    A lifting layer changes the matrix shape and is purely linear; other layers
    are residual with a split-complex nonlinearity after each map. ``linear_out``
    drops the nonlinearity after the final map so outputs are unconstrained.
    """

    def __init__(self, shape_in, shape_out, gen, lifting=False, linear_out=False):
        super().__init__()
        self.lifting = lifting
        self.linear_out = linear_out
        self.ant = ComplexLinear(shape_in[0], shape_out[0], 1, gen)
        self.sub = ComplexLinear(shape_in[1], shape_out[1], 2, gen)

    def forward(self, x: Tensor) -> Tensor:
        if self.lifting:
            return self.sub(self.ant(x))
        x = x + split_act(self.ant(x))
        y = self.sub(x)
        return x + (y if self.linear_out else split_act(y))


def mixer_stack(n_layers, shape_in, shape_out, gen, lift=True, linear_out=False):
    layers = []
    for i in range(n_layers):
        first = i == 0 and lift
        layers.append(MixerLayer(shape_in if first else shape_out, shape_out, gen,
                                 lifting=first,
                                 linear_out=linear_out and i == n_layers - 1))
    return nn.Sequential(*layers)


def _linear(n_in, n_out, gen) -> nn.Linear:
    lin = nn.Linear(n_in, n_out, dtype=DTYPE)
    bound = 1.0 / math.sqrt(n_in)
    with torch.no_grad():
        lin.weight.copy_((torch.rand(n_out, n_in, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        lin.bias.copy_((torch.rand(n_out, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
    return lin


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block with a 2-layer feed-forward."""

    def __init__(self, width, heads, ff_mult, gen):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width, dtype=DTYPE)
        self.qkv = _linear(width, 3 * width, gen)
        self.proj = _linear(width, width, gen)
        self.norm2 = nn.LayerNorm(width, dtype=DTYPE)
        self.ff1 = _linear(width, ff_mult * width, gen)
        self.ff2 = _linear(ff_mult * width, width, gen)

    def forward(self, x: Tensor, pad: Tensor | None) -> Tensor:
        b, t, w = x.shape
        q, k, v = self.qkv(self.norm1(x)).split(w, dim=-1)
        def heads(z):
            return z.view(b, t, self.heads, w // self.heads).transpose(1, 2)
        q, k, v = heads(q), heads(k), heads(v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(w // self.heads)
        if pad is not None:
            scores = scores.masked_fill(pad[:, None, None, :], float("-inf"))
        att = torch.softmax(scores, dim=-1) @ v
        x = x + self.proj(att.transpose(1, 2).reshape(b, t, w))
        return x + self.ff2(F.gelu(self.ff1(self.norm2(x))))


def to_real(h: Tensor) -> Tensor:
    """(B, N_t, N_c) complex -> (B, 2 N_t N_c) as [real block, imag block]."""
    flat = h.reshape(h.shape[0], -1)
    return torch.cat([flat.real, flat.imag], dim=-1)


def to_complex(x: Tensor, shape) -> Tensor:
    half = x.shape[-1] // 2
    return torch.complex(x[..., :half], x[..., half:]).reshape(x.shape[0], *shape)


class DeductionNet(nn.Module):
    """Mixer front end, attention fusion over (partial + pseudo) tokens, mixer back end.

    With ``kind="cmixer"`` the network is a plain mixer stack that only sees
    the partial channel.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        full, part = (cfg.n_t, cfg.n_c), (cfg.n_t0, cfg.n_c0)
        if cfg.kind == "cmixer":
            self.mixer = mixer_stack(cfg.baseline_layers, part, full, gen, linear_out=True)
            return
        w = cfg.width
        d = 2 * cfg.n_t * cfg.n_c
        self.front = mixer_stack(cfg.K, part, full, gen)
        self.embed = _linear(d, w, gen)
        self.type_embed = nn.Parameter(torch.randn(2, w, generator=gen, dtype=DTYPE) * 0.02)
        self.encoder = nn.ModuleList(EncoderLayer(w, cfg.heads, cfg.ff_mult, gen)
                                     for _ in range(cfg.L))
        self.out_norm = nn.LayerNorm(w, dtype=DTYPE)
        self.unembed = _linear(w, d, gen)
        self.back = mixer_stack(cfg.K, full, full, gen, lift=False, linear_out=True)

    def forward(self, h_partial: Tensor, pseudos: Tensor | None = None,
                present: Tensor | None = None) -> Tensor:
        """``pseudos``: (B, n, N_t, N_c) complex; ``present``: (B, n) bool mask."""
        if h_partial.shape[1:] != (self.cfg.n_t0, self.cfg.n_c0):
            raise ValueError(f"partial channel shape {tuple(h_partial.shape[1:])} does not "
                             f"match ({self.cfg.n_t0}, {self.cfg.n_c0})")
        if self.cfg.kind == "cmixer":
            return self.mixer(h_partial)
        lifted = self.front(h_partial)
        b = lifted.shape[0]
        tokens = self.embed(to_real(lifted))[:, None, :] + self.type_embed[0]
        pad = None
        if pseudos is not None and pseudos.shape[1] > 0:
            n = pseudos.shape[1]
            if pseudos.shape[2:] != (self.cfg.n_t, self.cfg.n_c):
                raise ValueError("pseudo channel shape mismatch")
            pt = self.embed(to_real(pseudos.reshape(b * n, self.cfg.n_t, self.cfg.n_c)))
            tokens = torch.cat([tokens, pt.view(b, n, -1) + self.type_embed[1]], dim=1)
            if present is not None:
                pad = torch.cat([torch.zeros(b, 1, dtype=torch.bool), ~present], dim=1)
        for layer in self.encoder:
            tokens = layer(tokens, pad)
        fused = self.unembed(self.out_norm(tokens[:, 0]))
        return self.back(lifted + to_complex(fused, (self.cfg.n_t, self.cfg.n_c)))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(cfg: ModelConfig) -> DeductionNet:
    return DeductionNet(cfg)


def channel_loss(h_true: Tensor, h_out: Tensor) -> Tensor:
    """Mean over samples of ||H - H_hat||_F^2 / (N_t N_c)."""
    return (h_true - h_out).abs().square().mean()


def backward(model: DeductionNet, h_partial: Tensor, pseudos: Tensor | None,
             present: Tensor | None, upstream: Tensor) -> dict[str, Tensor]:
    """Vector-Jacobian product of the network output with ``upstream``.

    ``upstream`` follows torch's complex convention: dL/dRe(H) + j dL/dIm(H)
    for a real loss L. Returns the gradient for every named parameter.
    """
    params = dict(model.named_parameters())
    out = model(h_partial, pseudos, present)
    grads = torch.autograd.grad(out, list(params.values()), grad_outputs=upstream,
                                allow_unused=True)
    return {k: (torch.zeros_like(p) if g is None else g)
            for (k, p), g in zip(params.items(), grads)}

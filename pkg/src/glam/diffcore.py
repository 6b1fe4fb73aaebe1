"""Differentiable operators shared by the global and local networks.

The reverse-mode tape is torch autograd; every operator here validates its
preconditions and fixes the conventions (tie-breaking, index rounding) that
torch leaves implementation-defined. Operators accept a single example
``[C, H, W]`` or a batch ``[N, C, H, W]`` and return the same rank.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence, Union

import torch
import torch.nn.functional as F

Tensor = torch.Tensor
Scalar = Union[int, float]


class PreconditionError(ValueError):
    """An operator was called with inputs violating its contract."""


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.dim() == 4:
        return x, True
    if x.dim() == 3:
        return x.unsqueeze(0), False
    raise PreconditionError(f"expected [C,H,W] or [N,C,H,W], got shape {tuple(x.shape)}")


def _restore(x: Tensor, batched: bool) -> Tensor:
    return x if batched else x.squeeze(0)


def conv2d(input: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation with zero padding."""
    x, batched = _as_batch(input)
    if kernel.dim() != 4:
        raise PreconditionError(f"kernel must be [C_out,C_in,kH,kW], got {tuple(kernel.shape)}")
    if stride < 1 or padding < 0:
        raise PreconditionError(f"invalid stride={stride} / padding={padding}")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[1] != c_in:
        raise PreconditionError(f"input has {x.shape[1]} channels, kernel expects {c_in}")
    h, w = x.shape[-2:]
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise PreconditionError(f"padded input {h}x{w} (+{padding}) smaller than kernel {kh}x{kw}")
    out = F.conv2d(x, kernel, bias, stride=stride, padding=padding)
    return _restore(out, batched)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)


def _check_operands(a, b) -> None:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dim() > 0 and b.dim() > 0 and a.shape != b.shape:
            raise PreconditionError(
                f"operand shapes {tuple(a.shape)} and {tuple(b.shape)} differ "
                "(only scalar-with-tensor broadcasting is supported)")


def add(a: Tensor | Scalar, b: Tensor | Scalar) -> Tensor:
    _check_operands(a, b)
    return a + b


def mul(a: Tensor | Scalar, b: Tensor | Scalar) -> Tensor:
    _check_operands(a, b)
    return a * b


def scale(x: Tensor, factor: Scalar) -> Tensor:
    return x * factor


_ELEMENTWISE: dict[str, Callable] = {
    "relu": relu, "sigmoid": sigmoid, "tanh": tanh,
    "add": add, "mul": mul, "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise PreconditionError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def channel_norm(input: Tensor, gain: Tensor, shift: Tensor, mode: str = "instance",
                 eps: float = 1e-5, running_mean: Tensor | None = None,
                 running_var: Tensor | None = None, training: bool = False,
                 momentum: float = 0.1) -> Tensor:
    """Per-channel standardization followed by an affine gain/shift.

    ``instance`` mode standardizes each sample with its own spatial
    statistics. ``batch`` mode uses mini-batch statistics when ``training``
    (updating the running buffers in place) and the running averages
    otherwise. Variance is the biased (population) estimate.
    """
    if eps <= 0:
        raise PreconditionError("eps must be positive")
    x, batched = _as_batch(input)
    c = x.shape[1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise PreconditionError(f"gain/shift must have shape ({c},)")
    if mode == "instance":
        out = F.instance_norm(x, weight=gain, bias=shift, eps=eps)
    elif mode == "batch":
        if running_mean is None or running_var is None:
            raise PreconditionError("batch mode needs running_mean and running_var buffers")
        out = F.batch_norm(x, running_mean, running_var, weight=gain, bias=shift,
                           training=training, momentum=momentum, eps=eps)
    else:
        raise PreconditionError(f"unknown norm mode {mode!r}")
    return _restore(out, batched)


def max_pool2d(input: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    x, batched = _as_batch(input)
    if padding * 2 > kernel:
        raise PreconditionError("padding must be at most half the kernel size")
    return _restore(F.max_pool2d(x, kernel, stride, padding), batched)


def spatial_max(input: Tensor) -> Tensor:
    """Per-channel maximum over the spatial dimensions.

    Returns ``[C]`` (or ``[N, C]``). The gradient is routed to exactly one
    location per channel: the first maximum in row-major order.
    """
    x, batched = _as_batch(input)
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise PreconditionError("empty spatial map")
    flat = x.flatten(-2)
    idx = flat.argmax(dim=-1, keepdim=True)
    out = flat.gather(-1, idx).squeeze(-1)
    return out if batched else out.squeeze(0)


def nearest_indices(source: int, target: int, device=None) -> Tensor:
    return torch.div(torch.arange(target, device=device) * source, target, rounding_mode="floor")


def resample_nearest(map: Tensor, target_h: int, target_w: int) -> Tensor:
    """Nearest-neighbour resampling on the trailing two dimensions.

    Source index is ``floor(i * source / target)``, computed in integers so
    integer-factor upsampling is exact block replication.
    """
    if target_h < 1 or target_w < 1:
        raise PreconditionError("target dims must be >= 1")
    h, w = map.shape[-2:]
    if (h, w) == (target_h, target_w):
        return map
    rows = nearest_indices(h, target_h, map.device)
    cols = nearest_indices(w, target_w, map.device)
    return map.index_select(-2, rows).index_select(-1, cols)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def grad_check(function: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-6, floor: float = 1e-3) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``function`` maps the inputs to a scalar. The relative error of each
    component is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``;
    the floor keeps near-zero gradient components from dominating on
    round-off alone.
    """
    if eps <= 0:
        raise PreconditionError("eps must be positive")
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = function(*leaves)
    if out.numel() != 1:
        raise PreconditionError("function must return a scalar")
    if not torch.isfinite(out).all():
        raise FloatingPointError("non-finite function value")
    grads = torch.autograd.grad(out, leaves, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        probes = [x.detach().clone() for x in inputs]
        for i, probe in enumerate(probes):
            analytic = grads[i]
            if analytic is None:
                analytic = torch.zeros_like(probe)
            if not torch.isfinite(analytic).all():
                raise FloatingPointError(f"non-finite analytic gradient for input {i}")
            flat = probe.view(-1)
            an = analytic.reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                f_plus = function(*probes).item()
                flat[j] = orig - eps
                f_minus = function(*probes).item()
                flat[j] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise FloatingPointError("non-finite value during finite differencing")
                numeric = (f_plus - f_minus) / (2 * eps)
                a = an[j].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst

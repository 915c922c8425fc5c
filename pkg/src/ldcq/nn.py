"""Small differentiable building blocks on top of torch.

Everything downstream (VAE, denoiser, Q-networks, world model) is assembled
from the pieces here: dense stacks described by a :class:`NetworkSpec`, a
stacked bidirectional GRU encoder, sinusoidal time embeddings, a hand-rolled
Adam step and a central finite-difference gradient checker.
"""
from __future__ import annotations

import io
import json
import math
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError, TrainingDivergenceError

CHECKPOINT_VERSION = 1

ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": F.relu,
    "gelu": F.gelu,
    "softplus": F.softplus,
    "linear": lambda x: x,
}


def make_generator(seed: int | torch.Generator) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


class ParameterBundle(dict):
    """Named parameter arrays. Shapes are fixed once created."""

    @classmethod
    def of(cls, module: nn.Module) -> "ParameterBundle":
        """Live view of a module's parameters (no copies)."""
        return cls(module.named_parameters())

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.items()}

    def clone(self) -> "ParameterBundle":
        return ParameterBundle({k: v.detach().clone() for k, v in self.items()})

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.values())

    def assign(self, other: Mapping[str, torch.Tensor]) -> None:
        """Copy values from ``other`` into this bundle's tensors in place."""
        if set(other) != set(self):
            raise ShapeError(f"bundle keys differ: {sorted(set(other) ^ set(self))}")
        with torch.no_grad():
            for k, v in self.items():
                src = torch.as_tensor(other[k])
                if tuple(src.shape) != tuple(v.shape):
                    raise ShapeError(f"{k}: shape {tuple(src.shape)} != {tuple(v.shape)}")
                v.copy_(src)

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.items()}


@dataclass(frozen=True)
class NetworkSpec:
    """Dense stack: ``widths[0]`` inputs through ``len(widths) - 1`` affine layers.

    ``activations[i]`` follows layer ``i``. With ``layer_norm`` set, a LayerNorm
    is inserted before every non-linear activation.
    """

    widths: tuple[int, ...]
    activations: tuple[str, ...]
    layer_norm: bool = False

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigError("a network needs at least an input and an output width")
        if len(self.activations) != len(self.widths) - 1:
            raise ConfigError("one activation per layer is required")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        unknown = set(self.activations) - set(ACTIVATIONS)
        if unknown:
            raise ConfigError(f"unknown activations {sorted(unknown)}")

    @classmethod
    def mlp(cls, n_in: int, hidden: Iterable[int], n_out: int, act: str = "relu",
            out_act: str = "linear", layer_norm: bool = False) -> "NetworkSpec":
        hidden = tuple(hidden)
        return cls((n_in, *hidden, n_out), (act,) * len(hidden) + (out_act,), layer_norm)

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]


def _uniform_(t: torch.Tensor, bound: float, g: torch.Generator) -> None:
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound)


def init_dense(spec: NetworkSpec, seed: int | torch.Generator = 0,
               dtype: torch.dtype = torch.float64) -> ParameterBundle:
    """He-uniform weights before ReLU, Glorot-uniform elsewhere; zero biases."""
    g = make_generator(seed)
    params = ParameterBundle()
    for i, act in enumerate(spec.activations):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        w = torch.empty(fan_out, fan_in, dtype=dtype)
        bound = math.sqrt(6.0 / fan_in) if act == "relu" else math.sqrt(6.0 / (fan_in + fan_out))
        _uniform_(w, bound, g)
        params[f"w{i}"] = w
        params[f"b{i}"] = torch.zeros(fan_out, dtype=dtype)
        if spec.layer_norm and act != "linear":
            params[f"ln_w{i}"] = torch.ones(fan_out, dtype=dtype)
            params[f"ln_b{i}"] = torch.zeros(fan_out, dtype=dtype)
    return params


def dense_forward(spec: NetworkSpec, params: Mapping[str, torch.Tensor], x) -> torch.Tensor:
    w0 = params["w0"]
    x = torch.as_tensor(x, dtype=w0.dtype)
    if x.shape[-1] != spec.n_in:
        raise ShapeError(f"expected input width {spec.n_in}, got {x.shape[-1]}")
    h = x
    for i, act in enumerate(spec.activations):
        h = F.linear(h, params[f"w{i}"], params[f"b{i}"])
        if spec.layer_norm and act != "linear":
            h = F.layer_norm(h, (h.shape[-1],), params[f"ln_w{i}"], params[f"ln_b{i}"])
        h = ACTIVATIONS[act](h)
    return h


class Dense(nn.Module):
    def __init__(self, spec: NetworkSpec, seed: int | torch.Generator = 0,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.spec = spec
        self.params = nn.ParameterDict(
            {k: nn.Parameter(v) for k, v in init_dense(spec, seed, dtype).items()})

    def forward(self, x):
        return dense_forward(self.spec, self.params, x)


class BiGRUEncoder(nn.Module):
    """Stacked bidirectional GRU; returns the last layer's final states.

    The feature is ``[h_forward, h_backward]`` of width ``2 * hidden``. The
    gate layout is torch's standard reset/update formulation.
    """

    def __init__(self, n_in: int, hidden: int, num_layers: int = 2,
                 seed: int | torch.Generator = 0, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.n_in, self.hidden = n_in, hidden
        self.gru = nn.GRU(n_in, hidden, num_layers=num_layers, bidirectional=True,
                          batch_first=True, dtype=dtype)
        g = make_generator(seed)
        bound = 1.0 / math.sqrt(hidden)
        for p in self.gru.parameters():
            _uniform_(p, bound, g)

    @property
    def n_out(self) -> int:
        return 2 * self.hidden

    def forward(self, seq: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """``seq`` is ``(batch, time, n_in)``; ``lengths`` marks valid prefixes."""
        if seq.dim() != 3 or seq.shape[-1] != self.n_in:
            raise ShapeError(f"expected (batch, time, {self.n_in}), got {tuple(seq.shape)}")
        if seq.shape[1] == 0:
            raise ShapeError("cannot encode an empty sequence")
        if lengths is not None and bool((lengths < seq.shape[1]).any()):
            packed = nn.utils.rnn.pack_padded_sequence(
                seq, lengths.cpu(), batch_first=True, enforce_sorted=False)
            _, h_n = self.gru(packed)
        else:
            _, h_n = self.gru(seq)
        return torch.cat([h_n[-2], h_n[-1]], dim=-1)


def bigru_encode(encoder: BiGRUEncoder, seq) -> torch.Tensor:
    """Encode one sequence (list of equal-width vectors) to a fixed-width feature."""
    rows = [np.asarray(v, dtype=np.float64).ravel() for v in seq]
    if not rows:
        raise ShapeError("cannot encode an empty sequence")
    if len({r.shape for r in rows}) != 1:
        raise ShapeError("sequence elements must share one width")
    dtype = next(encoder.parameters()).dtype
    x = torch.as_tensor(np.stack(rows), dtype=dtype).unsqueeze(0)
    return encoder(x)[0]


def sinusoidal_embed(t, dim: int, base: float = 10000.0) -> torch.Tensor:
    """``[sin(t f_0), ..., sin(t f_{k-1}), cos(t f_0), ..., cos(t f_{k-1})]``.

    ``f_i = base ** (-i / k)`` with ``k = dim // 2``. Scalar ``t`` gives shape
    ``(dim,)``; a vector of times gives ``(len(t), dim)``.
    """
    if dim <= 0 or dim % 2:
        raise ConfigError(f"embedding dim must be a positive even number, got {dim}")
    t_arr = torch.as_tensor(t, dtype=torch.float64)
    if bool((t_arr < 0).any()):
        raise ShapeError("diffusion time must be non-negative")
    half = dim // 2
    freqs = base ** (-torch.arange(half, dtype=torch.float64) / half)
    ang = t_arr.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def backprop(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> ParameterBundle:
    """Gradients of a scalar loss; parameters it does not reach get zeros."""
    if loss.numel() != 1:
        raise ShapeError("backprop needs a scalar loss")
    if not bool(torch.isfinite(loss)):
        raise TrainingDivergenceError(f"non-finite loss {loss.item()}")
    names = [k for k, v in params.items() if v.requires_grad]
    grads = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True)
    out = ParameterBundle()
    for k in params:
        out[k] = torch.zeros_like(params[k])
    for k, g in zip(names, grads):
        if g is not None:
            out[k] = g
    return out


def clip_grad_norm(grads: ParameterBundle, max_norm: float | None) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


@dataclass
class OptState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, torch.Tensor], lr: float, **kw) -> "OptState":
        st = cls(lr=lr, **kw)
        for k, p in params.items():
            st.m[k] = torch.zeros_like(p, requires_grad=False)
            st.v[k] = torch.zeros_like(p, requires_grad=False)
        return st


def adam_step(opt: OptState, params: Mapping[str, torch.Tensor],
              grads: Mapping[str, torch.Tensor]) -> Mapping[str, torch.Tensor]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for k, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise TrainingDivergenceError(f"non-finite gradient for {k!r}")
        if tuple(g.shape) != tuple(params[k].shape):
            raise ShapeError(f"{k}: gradient shape {tuple(g.shape)} != {tuple(params[k].shape)}")
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    with torch.no_grad():
        for k, g in grads.items():
            m, v = opt.m[k], opt.v[k]
            m.mul_(opt.beta1).add_(g, alpha=1.0 - opt.beta1)
            v.mul_(opt.beta2).addcmul_(g, g, value=1.0 - opt.beta2)
            denom = (v / c2).sqrt_().add_(opt.eps)
            params[k].addcdiv_(m, denom, value=-opt.lr / c1)
    return params


class Trainer:
    """Pairs a module with its Adam state."""

    def __init__(self, module: nn.Module, lr: float, max_grad_norm: float | None = None):
        self.module = module
        self.params = ParameterBundle.of(module)
        self.opt = OptState.for_params(self.params, lr)
        self.max_grad_norm = max_grad_norm

    def step(self, loss: torch.Tensor) -> float:
        grads = backprop(loss, self.params)
        clip_grad_norm(grads, self.max_grad_norm)
        adam_step(self.opt, self.params, grads)
        return float(loss.detach())


def finite_difference_check(loss_fn: Callable[[], torch.Tensor],
                            params: Mapping[str, torch.Tensor], *, eps: float = 1e-5,
                            max_entries: int = 40, seed: int = 0,
                            floor: float = 1e-6) -> float:
    """Largest relative error between autograd and central differences.

    Checks up to ``max_entries`` randomly chosen entries of every tensor.
    The default step sits near the cube root of float64 epsilon.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    grads = backprop(loss_fn(), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for k, p in params.items():
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if idx.size > max_entries:
                idx = rng.choice(idx, max_entries, replace=False)
            ga = grads[k].reshape(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                num = (up - down) / (2 * eps)
                ana = float(ga[i])
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst


# checkpoints ---------------------------------------------------------------

def save_checkpoint(path, bundles: Mapping[str, Mapping[str, torch.Tensor]],
                    meta: Mapping | None = None) -> Path:
    """Write named bundles plus JSON metadata to one ``.npz`` container."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, bundle in bundles.items():
        for k, v in bundle.items():
            arrays[f"{name}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
    header = {"version": CHECKPOINT_VERSION, "meta": dict(meta or {})}
    arrays["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[dict[str, ParameterBundle], dict]:
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["__meta__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {header.get('version')}")
        bundles: dict[str, ParameterBundle] = {}
        for key in data.files:
            if key == "__meta__":
                continue
            name, _, pname = key.partition("/")
            bundles.setdefault(name, ParameterBundle())[pname] = torch.from_numpy(data[key].copy())
    return bundles, header["meta"]


def save_modules(path, modules: Mapping[str, nn.Module], meta: Mapping | None = None) -> Path:
    """Checkpoint modules that expose ``hparams`` so they can be rebuilt."""
    meta = dict(meta or {})
    meta["modules"] = {name: {"class": type(m).__name__, "hparams": m.hparams}
                       for name, m in modules.items()}
    return save_checkpoint(path, {n: dict(m.state_dict()) for n, m in modules.items()}, meta)


def load_modules(path, registry: Mapping[str, type]) -> tuple[dict[str, nn.Module], dict]:
    bundles, meta = load_checkpoint(path)
    out = {}
    for name, info in meta["modules"].items():
        cls = registry[info["class"]]
        m = cls(**info["hparams"])
        m.load_state_dict(bundles[name])
        out[name] = m
    return out, meta

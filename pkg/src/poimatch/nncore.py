"""Numeric substrate: transformer blocks, loss primitives, gradient checking, checkpoints.

Tensors and reverse-mode gradients come from torch; a model's parameter
store is its ``nn.Module`` parameter set, initialized deterministically from
a seed. Models train in float32; gradient checks use float64 builds.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

INIT_STD = 0.02
MASK_FILL = -1e9


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 4
    hidden: int = 256
    heads: int = 4
    ffn_mult: int = 4
    max_seq: int = 64

    def __post_init__(self) -> None:
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.layers < 0 or self.max_seq < 1:
            raise ValueError("layers must be >= 0 and max_seq >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.out = nn.Linear(hidden, hidden)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        b, t, h = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, h // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(h // self.heads)
        scores = scores + (~mask)[:, None, None, :].to(x.dtype) * MASK_FILL
        attn = scores.softmax(dim=-1) * mask[:, None, :, None].to(x.dtype)
        ctx = (attn @ v).transpose(1, 2).reshape(b, t, h)
        return self.out(ctx)


class EncoderLayer(nn.Module):
    def __init__(self, hidden: int, heads: int, ffn_mult: int):
        super().__init__()
        self.attn = MultiHeadSelfAttention(hidden, heads)
        self.norm1 = nn.LayerNorm(hidden)
        self.ffn = nn.Sequential(nn.Linear(hidden, ffn_mult * hidden), nn.GELU(), nn.Linear(ffn_mult * hidden, hidden))
        self.norm2 = nn.LayerNorm(hidden)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        x = self.norm1(x + self.attn(x, mask))
        return self.norm2(x + self.ffn(x))


class TransformerEncoder(nn.Module):
    """Post-norm bidirectional encoder stack; ``mask`` is True at real positions."""

    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(EncoderLayer(cfg.hidden, cfg.heads, cfg.ffn_mult) for _ in range(cfg.layers))

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        if x.shape[1] > self.cfg.max_seq:
            raise ValueError(f"sequence length {x.shape[1]} exceeds max_seq {self.cfg.max_seq}")
        if mask is None:
            mask = torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
        for layer in self.layers:
            x = layer(x, mask)
        return x


def init_parameters(module: nn.Module, seed: int) -> None:
    """Truncated-normal weights (std 0.02), zero biases, unit LayerNorm gains."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
            if isinstance(owner, nn.LayerNorm):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            else:
                nn.init.trunc_normal_(p, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=gen)


def transformer_encode(encoder: TransformerEncoder, inputs: Tensor, attention_mask: Tensor | None = None) -> Tensor:
    """Encode one unbatched (T, H) sequence or a (B, T, H) batch."""
    if inputs.dim() == 2:
        m = None if attention_mask is None else attention_mask[None]
        return encoder(inputs[None], m)[0]
    return encoder(inputs, attention_mask)


# -- loss primitives ---------------------------------------------------------


def softmax_xent(logits: Tensor, target: Tensor | int) -> Tensor:
    """``-log softmax(logits)[target]``; batched over leading dims."""
    target = torch.as_tensor(target, device=logits.device)
    n = logits.shape[-1]
    if bool(((target < 0) | (target >= n)).any()):
        raise IndexError(f"target out of range for {n} classes")
    logp = logits.log_softmax(dim=-1)
    return -logp.gather(-1, target.unsqueeze(-1).long()).squeeze(-1)


def kl_divergence(p: Tensor, q: Tensor, atol: float = 1e-6) -> Tensor:
    """``sum p ln(p/q)`` over the last axis, for strictly positive distributions."""
    for name, d in (("p", p), ("q", q)):
        if bool((d <= 0).any()) or bool(((d.sum(-1) - 1).abs() > atol).any()):
            raise ValueError(f"{name} is not a strictly positive distribution")
    return (p * (p.log() - q.log())).sum(-1)


def kl_from_logits(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """KL(softmax(p_logits) || softmax(q_logits)) over the last axis, computed in log space."""
    logp = p_logits.log_softmax(-1)
    logq = q_logits.log_softmax(-1)
    return (logp.exp() * (logp - logq)).sum(-1)


def listwise_loss(scores: Tensor, gold: Tensor) -> Tensor:
    """Mean softmax cross-entropy over candidate lists; ``scores`` is (queries, candidates)."""
    return softmax_xent(scores, gold).mean()


# -- gradient check ----------------------------------------------------------


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, nn.Module):
        return [(n, p) for n, p in params.named_parameters() if p.requires_grad]
    if isinstance(params, Mapping):
        return list(params.items())
    return list(params)


def grad_check(
    loss_fn: Callable[[], Tensor], params, eps: float = 1e-5, floor: float = 1e-6,
    max_per_tensor: int | None = None, seed: int = 0,
) -> float:
    """Max elementwise relative error between reverse-mode and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. ``max_per_tensor``
    optionally checks a seeded random subset of each tensor's entries.
    """
    named = _named(params)
    for _, p in named:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    loss.backward()
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in named}
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, p in named:
            flat = p.view(-1)
            entries = np.arange(flat.numel())
            if max_per_tensor is not None and flat.numel() > max_per_tensor:
                entries = np.sort(rng.choice(flat.numel(), size=max_per_tensor, replace=False))
            a_flat = analytic[name].view(-1)
            for i in entries.tolist():
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise FloatingPointError(f"non-finite loss while perturbing {name}[{i}]")
                num = (up - down) / (2 * eps)
                a = a_flat[i].item()
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
    return worst


# -- optimizer ---------------------------------------------------------------


def make_optimizer(module: nn.Module, lr: float, weight_decay: float) -> torch.optim.AdamW:
    params = [p for p in module.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay, fused=True)


def optimizer_step(optimizer: torch.optim.Optimizer) -> None:
    """Apply one decoupled-weight-decay Adam update, then clear gradients.

    Parameters without a gradient (unused by this step's loss) are left alone.
    """
    if all(p.grad is None for g in optimizer.param_groups for p in g["params"]):
        raise RuntimeError("optimizer_step called with missing gradients")
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def seed_everything(seed: int, threads: int | None = 1) -> None:
    torch.manual_seed(seed)
    if threads is not None:
        torch.set_num_threads(threads)


# -- checkpoints -------------------------------------------------------------
#
# Layout (all integers little-endian):
#   bytes 0..3    magic b"PMCK"
#   bytes 4..7    uint32 format version (1)
#   bytes 8..15   uint64 header length H
#   next H bytes  UTF-8 JSON header:
#                   {"seed": int, "meta": {...},
#                    "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
#   remainder     raw C-order little-endian tensor data; "offset" counts from
#                 the first payload byte, tensors appear in header order.

CKPT_MAGIC = b"PMCK"
CKPT_VERSION = 1
_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor], seed: int, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"seed": seed, "meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], int, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(data[16 : 16 + hlen])
    base = 16 + hlen
    out = {}
    for e in header["tensors"]:
        raw = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(e["dtype"]))
    return out, header["seed"], header["meta"]


def load_into(module: nn.Module, tensors: Mapping[str, Tensor]) -> None:
    """Copy checkpoint tensors into ``module`` after validating every name and shape."""
    state = module.state_dict()
    missing = sorted(set(state) - set(tensors))
    extra = sorted(set(tensors) - set(state))
    if missing or extra:
        raise CheckpointError(f"checkpoint mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    for name, t in tensors.items():
        if tuple(t.shape) != tuple(state[name].shape):
            raise CheckpointError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(state[name].shape)}")
    module.load_state_dict({n: t.to(state[n].dtype) for n, t in tensors.items()})


def module_tensors(modules: Mapping[str, nn.Module]) -> dict[str, Tensor]:
    out = {}
    for prefix, m in modules.items():
        for name, t in m.state_dict().items():
            out[f"{prefix}.{name}"] = t
    return out


def iter_params(modules: Iterable[nn.Module]) -> list[nn.Parameter]:
    return [p for m in modules for p in m.parameters() if p.requires_grad]

"""Tiny decoder-only transformer with arbitrary boolean attention masks.

The forward pass records per-layer, per-head attention matrices and hidden
states (needed by rollout and distillation) and computes LM-head logits for
every position; the restriction of the LM loss to original positions happens
in lm_loss. Masked attention entries are exactly zero because blocked logits
are set to -inf before the softmax.

By default the LM head weight is tied to the token embedding table (the head
is then x @ E^T + b); an untied head is available via
ModelConfig(tie_embeddings=False). Training runs in float32; verification
code converts a copy to float64.
"""

from __future__ import annotations

import io
import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import AugmentedSequence
from .errors import CheckpointError, ConfigError, NumericalError

CHECKPOINT_MAGIC = b"HJBRIDG1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 16
    max_positions: int = 128
    seed: int = 0
    tie_embeddings: bool = True

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must cover the special tokens")


@dataclass(frozen=True)
class LossConfig:
    lambda_kd: float = 0.1
    reduction: str = "mean"

    def __post_init__(self):
        if self.lambda_kd < 0:
            raise ConfigError("lambda_kd must be >= 0")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError("reduction must be 'mean' or 'sum'")


@dataclass
class ForwardTrace:
    attn: list[torch.Tensor]          # per layer: (H, L, L) or (B, H, L, L)
    hidden: list[torch.Tensor]        # per layer post-block: (L, D) or (B, L, D)
    final_hidden: torch.Tensor        # post final LayerNorm; feeds the LM head


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d, h = config.d_model, config.n_heads
        self.n_heads = h
        self.head_dim = d // h
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.attn_out = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff_in = nn.Linear(d, config.d_ff)
        self.ff_out = nn.Linear(config.d_ff, d)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, L, D = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(D, dim=2)
        shape = (B, L, self.n_heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = scores.softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(B, L, D)
        x = x + self.attn_out(y)
        x = x + self.ff_out(F.gelu(self.ff_in(self.ln2(x))))
        return x, attn


class TinyLM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.max_positions, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        if config.tie_embeddings:
            self.head_bias = nn.Parameter(torch.zeros(config.vocab_size))
        else:
            self.head = nn.Linear(config.d_model, config.vocab_size)

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.weight.dtype

    def head_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        if self.config.tie_embeddings:
            return hidden @ self.tok_emb.weight.t() + self.head_bias
        return self.head(hidden)

    def forward(self, ids, mask) -> tuple[torch.Tensor, ForwardTrace]:
        """ids: (L,) or (B, L) int; mask: (L, L), (B, L, L) boolean (numpy or
        torch). Returns logits for every position plus the trace; for 1-D
        input the batch dimension is squeezed away."""
        ids_t = torch.as_tensor(np.asarray(ids), dtype=torch.long)
        single = ids_t.dim() == 1
        if single:
            ids_t = ids_t.unsqueeze(0)
        B, L = ids_t.shape
        if L > self.config.max_positions:
            raise ConfigError(f"sequence length {L} exceeds max_positions {self.config.max_positions}")
        mask_t = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
        if mask_t.dim() == 2:
            mask_t = mask_t.unsqueeze(0).expand(B, L, L)
        if mask_t.shape != (B, L, L):
            raise ConfigError(f"mask shape {tuple(mask_t.shape)} does not match ids {(B, L)}")
        mask_t = mask_t.unsqueeze(1)  # broadcast over heads

        pos = torch.arange(L)
        x = self.tok_emb(ids_t) + self.pos_emb(pos)[None, :, :]
        attns: list[torch.Tensor] = []
        hiddens: list[torch.Tensor] = []
        for block in self.blocks:
            x, attn = block(x, mask_t)
            attns.append(attn)
            hiddens.append(x)
        final = self.ln_f(x)
        logits = self.head_logits(final)
        if single:
            logits = logits.squeeze(0)
            attns = [a.squeeze(0) for a in attns]
            hiddens = [h.squeeze(0) for h in hiddens]
            final = final.squeeze(0)
        return logits, ForwardTrace(attn=attns, hidden=hiddens, final_hidden=final)


def init_model(config: ModelConfig) -> TinyLM:
    """Deterministic from config.seed: matrix weights ~ N(0, 0.02), biases
    zero, LayerNorm gains one."""
    model = TinyLM(config)
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif p.dim() >= 2:
                p.normal_(0.0, 0.02, generator=gen)
            else:
                p.fill_(1.0)
    return model


def grow_vocab(model: TinyLM, new_vocab_size: int) -> TinyLM:
    """Extend the vocabulary: rows for existing ids are copied bit-for-bit,
    new rows get a fresh deterministic init; everything else is copied."""
    old_cfg = model.config
    if new_vocab_size < old_cfg.vocab_size:
        raise ConfigError("cannot shrink the vocabulary")
    new_cfg = replace(old_cfg, vocab_size=new_vocab_size)
    grown = init_model(new_cfg).to(model.dtype)
    old_state = model.state_dict()
    with torch.no_grad():
        for name, p in grown.state_dict().items():
            old = old_state[name]
            if p.shape == old.shape:
                p.copy_(old)
            else:
                p[: old.shape[0]].copy_(old)
    return grown


def lm_loss(logits: torch.Tensor, aug: AugmentedSequence, labels=None, reduction: str = "mean") -> torch.Tensor:
    """Next-ORIGINAL-token cross-entropy: original position t predicts the
    next original token; inserted candidate positions are skipped both as
    predictors and as targets, so their labels never touch the value."""
    chain = aug.original_positions
    if len(chain) < 2:
        warnings.warn("sequence has fewer than 2 original tokens; LM loss is 0", stacklevel=2)
        return torch.zeros((), dtype=logits.dtype)
    labels_vec = aug.ids if labels is None else labels
    preds = logits[list(chain[:-1])]
    targets = torch.tensor([labels_vec[t] for t in chain[1:]], dtype=torch.long)
    return F.cross_entropy(preds, targets, reduction=reduction)


def lm_loss_batch(logits: torch.Tensor, augs, reduction: str = "mean") -> tuple[torch.Tensor, int]:
    """Pooled over every contributing position in the batch."""
    rows, cols, targets = [], [], []
    for b, aug in enumerate(augs):
        chain = aug.original_positions
        for t, nxt in zip(chain[:-1], chain[1:]):
            rows.append(b)
            cols.append(t)
            targets.append(aug.ids[nxt])
    if not rows:
        warnings.warn("batch has no contributing positions; LM loss is 0", stacklevel=2)
        return torch.zeros((), dtype=logits.dtype), 0
    preds = logits[rows, cols]
    target_t = torch.tensor(targets, dtype=torch.long)
    return F.cross_entropy(preds, target_t, reduction=reduction), len(rows)


FREEZE_GROUPS = ("all", "embeddings", "head", "block:<i>", "blocks:<i>..<j>")


def _freeze_match(spec_item: str, n_layers: int) -> list[str]:
    if spec_item == "all":
        return ["tok_emb", "pos_emb", "head", "ln_f"] + [f"blocks.{i}" for i in range(n_layers)]
    if spec_item == "embeddings":
        return ["tok_emb", "pos_emb"]
    if spec_item == "head":
        return ["head"]
    if spec_item.startswith("block:"):
        return [f"blocks.{int(spec_item.split(':')[1])}"]
    if spec_item.startswith("blocks:"):
        lo, hi = spec_item.split(":")[1].split("..")
        return [f"blocks.{i}" for i in range(int(lo), int(hi) + 1)]
    raise ConfigError(f"unknown freeze group {spec_item!r}; expected one of {FREEZE_GROUPS}")


def apply_freeze(model: TinyLM, freeze_spec) -> list[str]:
    """Set requires_grad=False on the named groups. With tied embeddings the
    'embeddings' group also pins the LM head matrix (one shared tensor);
    'head' then covers only the bias."""
    prefixes: list[str] = []
    for item in freeze_spec or ():
        prefixes.extend(_freeze_match(item, model.config.n_layers))
    frozen = []
    for name, p in model.named_parameters():
        if any(name == pre or name.startswith(pre + ".") or name.startswith(pre + "_") for pre in prefixes):
            p.requires_grad_(False)
            frozen.append(name)
    return frozen


def trainable_parameters(model: TinyLM):
    return [p for p in model.parameters() if p.requires_grad]


class NullOptimizer:
    """Stands in when every parameter is frozen; stepping changes nothing."""

    param_groups: list = []
    state: dict = {}

    def zero_grad(self, set_to_none: bool = True) -> None:
        pass

    def step(self) -> None:
        pass


def make_optimizer(model: TinyLM, lr: float = 3e-4, betas=(0.9, 0.999)):
    params = trainable_parameters(model)
    if not params:
        return NullOptimizer()
    return torch.optim.Adam(params, lr=lr, betas=betas)


def train_step(model: TinyLM, optimizer, ids, mask, augs, loss_config: LossConfig, distill_term=None) -> dict:
    """One step on L_total = L_LM + lambda * L_KD. distill_term is a callable
    ForwardTrace -> scalar tensor, invoked only when lambda > 0; with
    lambda = 0 the step is computationally identical to a distillation-free
    loop. Raises NumericalError on a non-finite loss."""
    optimizer.zero_grad(set_to_none=True)
    logits, trace = model.forward(ids, mask)
    l_lm, n_terms = lm_loss_batch(logits, augs, reduction=loss_config.reduction)
    if loss_config.lambda_kd > 0 and distill_term is not None:
        l_kd = distill_term(trace)
        total = l_lm + loss_config.lambda_kd * l_kd
        kd_value = float(l_kd.detach())
    else:
        total = l_lm
        kd_value = 0.0
    lm_value, total_value = float(l_lm.detach()), float(total.detach())
    if not math.isfinite(total_value):
        raise NumericalError(
            f"non-finite loss: lm={lm_value!r} kd={kd_value!r} over {n_terms} positions"
        )
    if total.requires_grad:  # everything-frozen steps are a no-op
        total.backward()
        optimizer.step()
    return {"lm_loss": lm_value, "kd_loss": kd_value, "total_loss": total_value, "positions": n_terms}


def grad_check(model: TinyLM, loss_fn, epsilon: float = 1e-4) -> float:
    """Max relative error between analytic gradients of loss_fn(model) and
    central finite differences, parameter-wise. Call with a float64 model;
    loss_fn must be a pure function of the parameters."""
    if model.dtype != torch.float64:
        raise ConfigError("grad_check requires a float64 model")
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    max_rel = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = float(loss_fn(model))
                flat[i] = orig - epsilon
                down = float(loss_fn(model))
                flat[i] = orig
                fd = (up - down) / (2.0 * epsilon)
                a = gflat[i].item()
                rel = abs(a - fd) / max(abs(a) + abs(fd), 1e-8)
                max_rel = max(max_rel, rel)
    model.zero_grad(set_to_none=True)
    return max_rel


def _optimizer_tensors(model: TinyLM, optimizer) -> tuple[dict[str, torch.Tensor], dict]:
    param_names = {id(p): name for name, p in model.named_parameters()}
    tensors: dict[str, torch.Tensor] = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            base = f"optim.{param_names[id(p)]}"
            for key, value in state.items():
                if isinstance(value, torch.Tensor):
                    tensors[f"{base}.{key}"] = value
                else:
                    tensors[f"{base}.{key}"] = torch.tensor(float(value))
    hparams = {
        "type": "adam",
        "lr": optimizer.param_groups[0]["lr"],
        "betas": list(optimizer.param_groups[0]["betas"]),
    }
    return tensors, hparams


def save_checkpoint(path, model: TinyLM, step: int = 0, optimizer=None, extra: dict | None = None) -> None:
    """Versioned header (magic, version, config JSON) + little-endian
    float32 payload with a named-tensor index."""
    tensors = {name: t for name, t in model.state_dict().items()}
    opt_hparams = None
    if optimizer is not None:
        opt_tensors, opt_hparams = _optimizer_tensors(model, optimizer)
        tensors.update(opt_tensors)
    index = []
    payload = io.BytesIO()
    offset = 0
    for name, t in tensors.items():
        if t.dtype != torch.float32:
            raise CheckpointError(f"checkpoint payload is float32; {name} has dtype {t.dtype}")
        raw = t.detach().cpu().numpy().astype("<f4", copy=False).tobytes()
        index.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        payload.write(raw)
        offset += len(raw)
    header = {
        "format": "hanjabridge-checkpoint",
        "step": int(step),
        "config": asdict(model.config),
        "tensors": index,
        "optimizer": opt_hparams,
        "extra": extra or {},
    }
    blob = json.dumps(header, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload.getvalue())


@dataclass
class CheckpointBundle:
    model: TinyLM
    step: int
    optimizer_state: dict[str, torch.Tensor] = field(default_factory=dict)
    optimizer_hparams: dict | None = None
    extra: dict = field(default_factory=dict)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> CheckpointBundle:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: version {version} unsupported (expected {CHECKPOINT_VERSION})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    config = ModelConfig(**header["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"{path}: config mismatch: {config} != {expected_config}")
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)
    model = TinyLM(config)
    state = {name: t for name, t in tensors.items() if not name.startswith("optim.")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: tensor shape mismatch: {exc}") from None
    opt_state = {name: t for name, t in tensors.items() if name.startswith("optim.")}
    return CheckpointBundle(
        model=model,
        step=header["step"],
        optimizer_state=opt_state,
        optimizer_hparams=header.get("optimizer"),
        extra=header.get("extra", {}),
    )


def restore_optimizer(model: TinyLM, bundle: CheckpointBundle) -> torch.optim.Adam:
    """Rebuild an Adam whose state continues the checkpointed run exactly."""
    hp = bundle.optimizer_hparams or {}
    optimizer = make_optimizer(model, lr=hp.get("lr", 3e-4), betas=tuple(hp.get("betas", (0.9, 0.999))))
    by_param: dict[str, dict[str, torch.Tensor]] = {}
    for full, t in bundle.optimizer_state.items():
        rest = full[len("optim."):]
        pname, key = rest.rsplit(".", 1)
        by_param.setdefault(pname, {})[key] = t
    name_to_param = dict(model.named_parameters())
    for pname, state in by_param.items():
        optimizer.state[name_to_param[pname]] = dict(state)
    return optimizer

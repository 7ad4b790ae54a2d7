"""Decoder-only transformer that predicts error corrections in context.

Pre-norm residual blocks with masked scaled dot-product attention; the mask
comes from :func:`odecorrect.tokenizer.build_mask`.  A small MLP head maps the
final hidden state of every query token to a (padded) correction vector.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Corpus, DemoPair, PromptInstance, build_prompt, check_provenance, prompt_groups
from .integrators import Grid, IntegrationError, Trajectory, increment, node_times
from .tokenizer import EmbeddingConfig, Normalizer, TokenEmbedding, TokenSequence, build_mask, tokenize

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    max_dim: int = 3
    head_hidden: tuple[int, ...] = (64,)
    head_dim: int | None = None
    dropout: float = 0.0
    positional: str = "category"
    demo_queries: bool = True
    supervise: str = "all"
    dtype: str = "float32"
    prompt_scale: bool = True

    def __post_init__(self):
        object.__setattr__(self, "head_hidden", tuple(self.head_hidden))
        if self.head_dim is None and self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.supervise not in ("all", "final"):
            raise ValueError("supervise must be 'all' or 'final'")

    @property
    def attn_head_dim(self) -> int:
        return self.head_dim if self.head_dim is not None else self.d_model // self.n_heads

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_hidden"] = list(self.head_hidden)
        return d


PRESETS = {
    "desk": ModelConfig(),
    # 256 is not divisible by 6 heads, so this preset uses full-width heads.
    "paper": ModelConfig(n_layers=6, n_heads=6, d_model=256, d_ff=1024, head_hidden=(256,), head_dim=256),
    "small": ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, head_hidden=(8,), dtype="float64"),
}


class MaskedSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, head_dim: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads, self.head_dim, self.dropout = n_heads, head_dim, dropout
        self.qkv = nn.Linear(d_model, 3 * n_heads * head_dim)
        self.out = nn.Linear(n_heads * head_dim, d_model)

    def forward(self, x, mask, past=None):
        B, T, _ = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        new_kv = (k, v)
        if past is not None:
            pk, pv = past
            k = torch.cat([pk.expand(B, -1, -1, -1), k], dim=2)
            v = torch.cat([pv.expand(B, -1, -1, -1), v], dim=2)
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask,
                                           dropout_p=self.dropout if self.training else 0.0)
        return self.out(y.transpose(1, 2).reshape(B, T, -1)), new_kv


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = MaskedSelfAttention(cfg.d_model, cfg.n_heads, cfg.attn_head_dim, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = nn.Sequential(nn.Linear(cfg.d_model, cfg.d_ff), nn.GELU(), nn.Linear(cfg.d_ff, cfg.d_model),
                                nn.Dropout(cfg.dropout))

    def forward(self, x, mask, past=None):
        a, kv = self.attn(self.ln1(x), mask, past)
        x = x + a
        return x + self.ff(self.ln2(x)), kv


class CorrectorTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig = PRESETS["desk"], seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.embedding = TokenEmbedding(EmbeddingConfig(cfg.max_dim, cfg.d_model, cfg.positional))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        layers, width = [], cfg.d_model
        for h in cfg.head_hidden:
            layers += [nn.Linear(width, h), nn.GELU()]
            width = h
        layers.append(nn.Linear(width, cfg.max_dim))
        self.head = nn.Sequential(*layers)
        torch.random.set_rng_state(gen_state)
        self.to(cfg.torch_dtype)

    def forward(self, keys, values, category, node, mask, past=None, return_kv: bool = False):
        """Predictions for every token, shape ``(B, T, max_dim)``.

        ``mask`` is ``(T, T)``, or ``(T, T_past + T)`` when ``past`` holds the
        cached keys/values of a shared prefix.
        """
        x = self.embedding(keys, values, category, node)
        kvs = []
        for i, blk in enumerate(self.blocks):
            x, kv = blk(x, mask, None if past is None else past[i])
            kvs.append(kv)
        out = self.head(self.ln_f(x))
        return (out, kvs) if return_kv else out

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


@dataclass
class Batch:
    keys: torch.Tensor
    values: torch.Tensor
    category: torch.Tensor
    node: torch.Tensor
    mask: torch.Tensor
    targets: torch.Tensor
    target_mask: torch.Tensor
    query_index: torch.Tensor = None   # final-block query token indices

    def run(self, model: CorrectorTransformer) -> torch.Tensor:
        return model(self.keys, self.values, self.category, self.node, self.mask)


def collate(seqs: Sequence[TokenSequence], dtype=torch.float32, supervise: str = "all") -> Batch:
    """Stack sequences that share one token layout (and hence one mask)."""
    ref = seqs[0]
    for s in seqs[1:]:
        if s.layout_key() != ref.layout_key():
            raise ValueError("sequences in a batch must share a token layout")
    tmask = np.stack([s.target_mask for s in seqs])
    if supervise == "final":
        tmask = tmask & (ref.demo == ref.d)[None, :, None]
    as_t = lambda a: torch.as_tensor(np.stack(a), dtype=dtype)
    return Batch(
        keys=as_t([s.keys for s in seqs]),
        values=as_t([s.values for s in seqs]),
        category=torch.as_tensor(ref.category, dtype=torch.long),
        node=torch.as_tensor(ref.node, dtype=torch.long),
        mask=torch.as_tensor(build_mask(ref)),
        targets=as_t([s.targets for s in seqs]),
        target_mask=torch.as_tensor(tmask),
        query_index=torch.as_tensor(ref.final_queries, dtype=torch.long),
    )


def forward_queries(model: CorrectorTransformer, seq: TokenSequence, mask: np.ndarray | None = None) -> torch.Tensor:
    """Predicted error vectors at the query block's query tokens, ``(n_q, max_dim)``."""
    dtype = model.cfg.torch_dtype
    mask = build_mask(seq) if mask is None else mask
    t = lambda a: torch.as_tensor(a, dtype=dtype)[None]
    out = model(t(seq.keys), t(seq.values), torch.as_tensor(seq.category), torch.as_tensor(seq.node),
                torch.as_tensor(mask))
    if not torch.isfinite(out).all():
        raise FloatingPointError("non-finite activations in forward pass")
    return out[0, seq.final_queries]


def loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the unmasked entries."""
    m = mask.to(pred.dtype)
    count = m.sum()
    if count == 0:
        raise ValueError("loss mask selects no entries")
    return (((pred - target) ** 2) * m).sum() / count


def batch_loss(model: CorrectorTransformer, batch: Batch) -> torch.Tensor:
    return loss(batch.run(model), batch.targets, batch.target_mask)


def grad(model: CorrectorTransformer, batch: Batch, scale: float = 1.0) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``scale * loss`` for every named parameter."""
    model.zero_grad(set_to_none=True)
    (scale * batch_loss(model, batch)).backward()
    out = {}
    for name, p in model.named_parameters():
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
        out[name] = g
    model.zero_grad(set_to_none=True)
    return out


# --- training -------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    peak_lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    warmup_frac: float = 0.05
    d: int = 5
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def warmup_cosine(step: int, total: int, peak: float, warmup_frac: float = 0.05) -> float:
    """Linear warmup to ``peak`` then cosine decay to zero at ``total``."""
    warm = int(math.ceil(warmup_frac * total))
    if step < warm:
        return peak * (step + 1) / warm
    span = max(total - warm, 1)
    return 0.5 * peak * (1.0 + math.cos(math.pi * min(step - warm, span) / span))


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good_state: dict):
        super().__init__(message)
        self.last_good_state = last_good_state


def tokenize_for(model: CorrectorTransformer, instance: PromptInstance, normalizer: Normalizer,
                 **kw) -> TokenSequence:
    """Tokenize with the layout and scaling options the model was built with."""
    mc = model.cfg
    return tokenize(instance, mc.max_dim, normalizer, demo_queries=mc.demo_queries, prompt_scale=mc.prompt_scale,
                    **kw)


def decode(normalizer: Normalizer, seq: TokenSequence, pred: np.ndarray) -> np.ndarray:
    """Model output rows ``(n, max_dim)`` back to raw label units ``(n, dim)``."""
    p = pred[:, : seq.dim]
    if seq.err_factor is not None:
        p = p * seq.err_factor
    return normalizer.errors_inv(p)


def make_instance(group, d: int) -> PromptInstance:
    return build_prompt([r.demo() for r in group[:d]], group[d].demo(), d)


class Trainer:
    """AdamW + warmup-cosine training on prompt groups drawn per epoch.

    Each epoch partitions every variation's trajectories into groups of
    ``d + 1`` (with an epoch-specific seed), so the run stays reproducible and
    resumable from any epoch boundary.
    """

    def __init__(self, model: CorrectorTransformer, normalizer: Normalizer, corpus: Corpus,
                 cfg: TrainConfig = TrainConfig(), val_corpus: Corpus | None = None):
        self.model, self.normalizer, self.corpus, self.cfg = model, normalizer, corpus, cfg
        self.val_corpus = val_corpus
        self.epoch = 0
        self.step = 0
        self.history: list[dict] = []
        self.opt = torch.optim.AdamW(model.parameters(), lr=cfg.peak_lr, betas=cfg.betas,
                                     weight_decay=cfg.weight_decay)
        groups = self._groups(self.corpus, np.random.default_rng([cfg.seed, 0]))
        if not groups:
            raise ValueError(f"corpus needs a variation with at least d+1={cfg.d + 1} trajectories")
        self.steps_per_epoch = math.ceil(len(groups) / cfg.batch_size)
        self.total_steps = self.steps_per_epoch * cfg.epochs
        self._val_batches = None

    def _groups(self, corpus, rng):
        out = []
        for v, recs in sorted(corpus.variations().items()):
            out.extend(prompt_groups(recs, self.cfg.d, rng))
        return out

    def _batches(self, groups):
        mc = self.model.cfg
        seqs = [tokenize_for(self.model, make_instance(g, self.cfg.d), self.normalizer) for g in groups]
        by_layout: dict = {}
        for s in seqs:
            by_layout.setdefault(s.layout_key(), []).append(s)
        out = []
        for layout in by_layout.values():
            for i in range(0, len(layout), self.cfg.batch_size):
                out.append(collate(layout[i:i + self.cfg.batch_size], mc.torch_dtype, mc.supervise))
        return out

    def validation_mse(self) -> float | None:
        if self.val_corpus is None or not self.val_corpus.records:
            return None
        if self._val_batches is None:
            groups = self._groups(self.val_corpus, np.random.default_rng([self.cfg.seed, 1, 0]))
            self._val_batches = self._batches(groups) if groups else []
        if not self._val_batches:
            return None
        self.model.eval()
        with torch.no_grad():
            vals = [float(batch_loss(self.model, b)) for b in self._val_batches]
        return float(np.mean(vals))

    def train_epoch(self) -> dict:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 2, self.epoch])
        groups = self._groups(self.corpus, rng)
        order = rng.permutation(len(groups))
        batches = self._batches([groups[i] for i in order])
        self.model.train()
        torch.manual_seed(cfg.seed * 100003 + self.epoch)
        last_good = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
        losses = []
        for b in batches:
            lr = warmup_cosine(self.step, self.total_steps, cfg.peak_lr, cfg.warmup_frac)
            for g in self.opt.param_groups:
                g["lr"] = lr
            self.opt.zero_grad(set_to_none=True)
            value = batch_loss(self.model, b)
            if not torch.isfinite(value):
                self.model.load_state_dict(last_good)
                raise TrainingDiverged(f"loss became {float(value.detach())} at epoch {self.epoch}, step {self.step}",
                                       last_good)
            value.backward()
            self.opt.step()
            self.step += 1
            losses.append(float(value.detach()))
        self.epoch += 1
        rec = {"epoch": self.epoch, "train_mse": float(np.mean(losses)), "val_mse": self.validation_mse(),
               "lr": self.opt.param_groups[0]["lr"]}
        self.history.append(rec)
        return rec

    def fit(self, epochs: int | None = None, log_every: int = 0) -> list[dict]:
        target = self.cfg.epochs if epochs is None else self.epoch + epochs
        while self.epoch < target:
            rec = self.train_epoch()
            if log_every and rec["epoch"] % log_every == 0:
                log.info("epoch %d train %.4g val %s", rec["epoch"], rec["train_mse"], rec["val_mse"])
        return self.history

    def initial_mse(self) -> float:
        """Training-set MSE of the current weights on the epoch-0 grouping."""
        groups = self._groups(self.corpus, np.random.default_rng([self.cfg.seed, 2, 0]))
        self.model.eval()
        with torch.no_grad():
            return float(np.mean([float(batch_loss(self.model, b)) for b in self._batches(groups)]))

    # checkpoint plumbing
    def optimizer_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        names = {id(p): n for n, p in self.model.named_parameters()}
        for p, st in self.opt.state.items():
            for key in ("exp_avg", "exp_avg_sq"):
                out[f"optim/{names[id(p)]}/{key}"] = st[key]
            out[f"optim/{names[id(p)]}/step"] = torch.as_tensor(float(st["step"]))
        return out

    def load_optimizer_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        dtype = self.model.cfg.torch_dtype
        for n, p in self.model.named_parameters():
            key = f"optim/{n}"
            if f"{key}/exp_avg" not in tensors:
                continue
            self.opt.state[p] = {
                "step": torch.tensor(float(tensors[f"{key}/step"])),
                "exp_avg": torch.as_tensor(tensors[f"{key}/exp_avg"], dtype=dtype).clone(),
                "exp_avg_sq": torch.as_tensor(tensors[f"{key}/exp_avg_sq"], dtype=dtype).clone(),
            }


def train(model, normalizer, corpus, cfg: TrainConfig = TrainConfig(), val_corpus=None):
    """Train in place; returns ``(model, history)``."""
    trainer = Trainer(model, normalizer, corpus, cfg, val_corpus)
    trainer.fit()
    return model, trainer.history


def save_model(path, model: CorrectorTransformer, normalizer: Normalizer, trainer: Trainer | None = None,
               extra: dict | None = None):
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    meta = {"kind": "transformer", "config": model.cfg.to_dict(), "normalizer": normalizer.to_dict(),
            "extra": extra or {}}
    if trainer is not None:
        tensors.update(trainer.optimizer_tensors())
        meta["trainer"] = {"config": trainer.cfg.to_dict(), "epoch": trainer.epoch, "step": trainer.step,
                           "history": trainer.history}
    return save_checkpoint(path, tensors, meta)


def load_model(path):
    """Returns ``(model, normalizer, meta, tensors)``."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "transformer":
        raise ValueError(f"checkpoint holds a {meta.get('kind')!r}, not a transformer")
    cfg = ModelConfig(**meta["config"])
    model = CorrectorTransformer(cfg)
    state = {k[len("model/"):]: torch.as_tensor(v, dtype=cfg.torch_dtype)
             for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state)
    return model, Normalizer.from_dict(meta["normalizer"]), meta, tensors


def resume_trainer(path, corpus: Corpus, val_corpus: Corpus | None = None) -> Trainer:
    model, normalizer, meta, tensors = load_model(path)
    tc = meta["trainer"]["config"]
    tc["betas"] = tuple(tc["betas"])
    trainer = Trainer(model, normalizer, corpus, TrainConfig(**tc), val_corpus)
    trainer.epoch, trainer.step = meta["trainer"]["epoch"], meta["trainer"]["step"]
    trainer.history = meta["trainer"]["history"]
    trainer.load_optimizer_tensors(tensors)
    return trainer


# --- inference ------------------------------------------------------------

def predict_correction(model: CorrectorTransformer, normalizer: Normalizer, demos: Sequence[DemoPair],
                       query_coarse: Trajectory) -> np.ndarray:
    """Predicted label sequence ``(n, dim)`` for ``query_coarse``."""
    return predict_corrections(model, normalizer, demos, [query_coarse])[0]


@torch.no_grad()
def predict_corrections(model: CorrectorTransformer, normalizer: Normalizer, demos: Sequence[DemoPair],
                        queries: Sequence[Trajectory], chunk: int = 64) -> list[np.ndarray]:
    """Batched prediction for many queries sharing one demo set.

    The demo prefix never attends to the query block, so its keys/values are
    computed once and reused for every query.
    """
    model.eval()
    demos = list(demos)
    check_provenance([p.coarse for p in demos] + list(queries))
    dtype = model.cfg.torch_dtype
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)
    seqs = [tokenize_for(model, PromptInstance(demos, q), normalizer) for q in queries]
    ref = seqs[0]
    mask = torch.as_tensor(build_mask(ref))
    d = len(demos)
    tp = int(np.sum(ref.demo < d))
    past = None
    if tp:
        _, past = model(t(ref.keys[None, :tp]), t(ref.values[None, :tp]), torch.as_tensor(ref.category[:tp]),
                        torch.as_tensor(ref.node[:tp]), mask[:tp, :tp], return_kv=True)
    cat = torch.as_tensor(ref.category[tp:])
    node = torch.as_tensor(ref.node[tp:])
    qidx = ref.final_queries - tp
    block_mask = mask[tp:]
    results = []
    for i in range(0, len(seqs), chunk):
        part = seqs[i:i + chunk]
        for s in part:
            if s.layout_key() != ref.layout_key():
                raise ValueError("all queries must have the same number of nodes")
        out = model(t([s.keys[tp:] for s in part]), t([s.values[tp:] for s in part]), cat, node, block_mask,
                    past=past)
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite activations in forward pass")
        preds = out[:, qidx].double().numpy()
        for s, p in zip(part, preds):
            results.append(decode(normalizer, s, p)[: s.n_nodes - 1])
    return results


class CorrectionMode(str, Enum):
    TEACHER = "teacher"
    ROLLOUT = "rollout"


def correct_trajectory(coarse: Trajectory, errors: np.ndarray | None, mode=CorrectionMode.TEACHER,
                       corrector: Callable[[np.ndarray, int], np.ndarray] | None = None) -> Trajectory:
    """Apply corrections to a coarse trajectory.

    Teacher-forced: ``ũ[j+1] = û[j] + S(f, û[j], kΔt) + err[j]`` on the stored
    coarse states.  Rollout: the same recursion fed with ``ũ[j]``; the
    correction is ``errors[j]`` or ``corrector(history, j)`` when given.
    """
    mode = CorrectionMode(mode)
    n = coarse.n_steps
    h = coarse.dt_effective
    times = node_times(n + 1, coarse.stride, coarse.dt)
    if errors is not None and np.shape(errors) != (n, coarse.states.shape[1]):
        raise ValueError(f"errors shape {np.shape(errors)} does not match {n} transitions")
    if mode is CorrectionMode.TEACHER:
        src = coarse.states[:-1]
        states = np.empty_like(coarse.states)
        states[0] = coarse.states[0]
        states[1:] = src + increment(coarse.scheme, coarse.system, coarse.params, src, times[:-1], h) + errors
        bad = ~np.isfinite(states).all(axis=1)
        if bad.any():
            raise IntegrationError("non-finite corrected state", int(np.flatnonzero(bad)[0]))
    else:
        states = np.empty_like(coarse.states)
        states[0] = coarse.states[0]
        for j in range(n):
            e = corrector(states[: j + 1], j) if corrector is not None else errors[j]
            u = states[j]
            states[j + 1] = u + increment(coarse.scheme, coarse.system, coarse.params, u, times[j], h) + e
            if not np.isfinite(states[j + 1]).all():
                raise IntegrationError("non-finite corrected state", j + 1)
    return Trajectory(coarse.system, coarse.params, coarse.ic, coarse.dt, coarse.stride, states, coarse.scheme,
                      Grid.COARSE)


def oracle_corrector(coarse: Trajectory, fine_nodes: np.ndarray) -> Callable[[np.ndarray, int], np.ndarray]:
    """Ground-truth rollout corrector: the label that maps the realised state onto the fine node.

    Stored labels are measured against the uncorrected coarse path, so they are
    only exact in teacher-forced mode.  In rollout the matching label is
    ``u[j+1] - ũ[j] - S(f, ũ[j], kΔt)``.
    """
    h = coarse.dt_effective
    times = node_times(coarse.n_steps + 1, coarse.stride, coarse.dt)

    def corr(history: np.ndarray, j: int) -> np.ndarray:
        u = history[-1]
        return fine_nodes[j + 1] - u - increment(coarse.scheme, coarse.system, coarse.params, u, times[j], h)

    return corr


def model_corrector(model: CorrectorTransformer, normalizer: Normalizer, demos: Sequence[DemoPair],
                    coarse: Trajectory) -> Callable[[np.ndarray, int], np.ndarray]:
    """Live corrector for rollout mode.

    At node ``j`` the query trajectory is the corrected history followed by a
    plain coarse continuation from ``ũ[j]``; the model is queried at node ``j``.
    """
    demos = list(demos)
    n = coarse.n_steps

    def corr(history: np.ndarray, j: int) -> np.ndarray:
        states = np.concatenate([history[:-1], _integrate_from(coarse, history[-1], j)])
        q = Trajectory(coarse.system, coarse.params, coarse.ic, coarse.dt, coarse.stride, states, coarse.scheme,
                       Grid.COARSE)
        seq = tokenize_for(model, PromptInstance(demos, q), normalizer, query_nodes=[j])
        with torch.no_grad():
            p = forward_queries(model, seq).double().numpy()
        return decode(normalizer, seq, p)[0]

    return corr


def _integrate_from(coarse: Trajectory, u0: np.ndarray, j0: int) -> np.ndarray:
    """Coarse integration from node ``j0`` (absolute times) to the end."""
    n = coarse.n_steps
    h = coarse.dt_effective
    out = [np.asarray(u0, dtype=float)]
    for j in range(j0, n):
        u = out[-1]
        t = (j * coarse.stride) * coarse.dt
        out.append(u + increment(coarse.scheme, coarse.system, coarse.params, u, t, h))
    return np.stack(out)

"""Masked-language-model transformer encoder over normalized instructions.

Architecture: token + learned position embeddings, an optional same-length
Conv1d stack (d_embed -> d_hidden), then ``n_layers`` post-norm encoder
blocks (multi-head self-attention and a ReLU feed-forward network, each with
a residual connection and layer normalization) and a linear MLM projection.
There is no next-sentence objective.
"""

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus import MASK, N_SPECIALS, PAD, TokenSequence
from .errors import TrainingDivergedError, ValidationError

log = logging.getLogger(__name__)

REFERENCE_PARAMETER_COUNT = 8_723_914
IGNORE = -100


@dataclass
class EncoderConfig:
    vocab_size: int
    d_embed: int = 256
    d_hidden: int = 128
    n_layers: int = 8
    n_heads: int = 8
    max_seq: int = 256
    dropout_pos: float = 0.1
    dropout_conv: float = 0.2
    dropout_ffn: float = 0.1
    dropout_attn: float = 0.1
    n_conv_layers: int = 3
    conv_kernel: int = 5
    conv_enabled: bool = True
    mask_rate: float = 0.15
    d_ffn: int | None = None

    def __post_init__(self):
        if self.d_ffn is None:
            self.d_ffn = 4 * self.d_hidden

    def validate(self):
        if self.vocab_size <= N_SPECIALS - 1:
            raise ValidationError("vocab_size must cover the special tokens")
        if self.d_hidden % self.n_heads:
            raise ValidationError(f"d_hidden={self.d_hidden} is not divisible by n_heads={self.n_heads}")
        if not 0 < self.mask_rate < 1:
            raise ValidationError("mask_rate must lie in (0, 1)")
        if self.conv_kernel % 2 == 0:
            raise ValidationError("conv_kernel must be odd")
        if self.max_seq < 3:
            raise ValidationError("max_seq must leave room for SOS/EOS")
        for name in ("dropout_pos", "dropout_conv", "dropout_ffn", "dropout_attn"):
            if not 0 <= getattr(self, name) < 1:
                raise ValidationError(f"{name} must lie in [0, 1)")
        return self

    @classmethod
    def paper(cls, vocab_size):
        return cls(vocab_size=vocab_size)

    @classmethod
    def desk(cls, vocab_size):
        return cls(vocab_size=vocab_size, d_embed=64, d_hidden=64, n_layers=2, n_heads=2, max_seq=64)


@dataclass
class OptimizerConfig:
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-6
    warmup_fraction: float = 0.1
    epochs: int = 5
    batch_size: int = 96
    # masked copies drawn per sequence before training (static masking)
    dupe_factor: int = 1

    def validate(self):
        if self.lr < 0:
            raise ValidationError("lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("Adam betas must lie in [0, 1)")
        if not 0 <= self.warmup_fraction <= 1:
            raise ValidationError("warmup_fraction must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.dupe_factor < 1:
            raise ValidationError("epochs, batch_size and dupe_factor must be positive")
        return self

    @classmethod
    def desk(cls):
        return cls(lr=0.002, batch_size=16, dupe_factor=4)

    @classmethod
    def desk_finetune(cls):
        return cls(lr=0.001, batch_size=8, epochs=20)


def parameter_count(cfg):
    """Closed-form trainable parameter count for ``EncoderModel(cfg)``."""
    V, E, H, S, L, Fd, k = (cfg.vocab_size, cfg.d_embed, cfg.d_hidden, cfg.max_seq,
                            cfg.n_layers, cfg.d_ffn, cfg.conv_kernel)
    n = V * E + S * E
    if cfg.conv_enabled and cfg.n_conv_layers > 0:
        n += E * H * k + H
        n += (cfg.n_conv_layers - 1) * (H * H * k + H)
    elif E != H:
        n += E * H + H
    per_layer = 4 * (H * H + H) + 2 * (2 * H) + (H * Fd + Fd) + (Fd * H + H)
    n += L * per_layer
    n += H * V + V
    return n


# --------------------------------------------------------------------------
# attention


def attention(q, k, v, key_mask=None):
    """Scaled dot-product attention.

    ``q``: [..., n, d_k], ``k``: [..., m, d_k], ``v``: [..., m, d_v];
    ``key_mask``: bool [..., m], True for keys that may be attended.
    Returns ``(context [..., n, d_v], weights [..., n, m])``.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValidationError(f"attention shape mismatch: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_hidden, n_heads, dropout):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_hidden // n_heads
        self.wq = nn.Linear(d_hidden, d_hidden)
        self.wk = nn.Linear(d_hidden, d_hidden)
        self.wv = nn.Linear(d_hidden, d_hidden)
        self.wo = nn.Linear(d_hidden, d_hidden)
        self.dropout = nn.Dropout(dropout)

    def _heads(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, x, key_mask):
        q, k, v = self._heads(self.wq(x)), self._heads(self.wk(x)), self._heads(self.wv(x))
        # [B, T] -> [B, 1, T] so the mask broadcasts over heads
        ctx, weights = attention(q, k, v, key_mask[:, None, :])
        if self.training and self.dropout.p > 0:
            ctx = self.dropout(weights) @ v
        b, _, t, _ = ctx.shape
        return self.wo(ctx.transpose(1, 2).reshape(b, t, -1)), weights


class EncoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.attn = MultiHeadSelfAttention(cfg.d_hidden, cfg.n_heads, cfg.dropout_attn)
        self.ln1 = nn.LayerNorm(cfg.d_hidden)
        self.ffn = nn.Sequential(nn.Linear(cfg.d_hidden, cfg.d_ffn), nn.ReLU(), nn.Linear(cfg.d_ffn, cfg.d_hidden))
        self.ln2 = nn.LayerNorm(cfg.d_hidden)
        self.drop1 = nn.Dropout(cfg.dropout_attn)
        self.drop2 = nn.Dropout(cfg.dropout_ffn)

    def forward(self, x, key_mask):
        a, weights = self.attn(x, key_mask)
        x = self.ln1(x + self.drop1(a))
        x = self.ln2(x + self.drop2(self.ffn(x)))
        return x, weights


class ConvStack(nn.Module):
    """Same-length 1-D convolutions over the token axis; PAD positions are zeroed
    before every layer so padding never leaks into real tokens."""

    def __init__(self, cfg):
        super().__init__()
        dims = [cfg.d_embed] + [cfg.d_hidden] * cfg.n_conv_layers
        self.convs = nn.ModuleList(
            nn.Conv1d(dims[i], dims[i + 1], cfg.conv_kernel, padding=cfg.conv_kernel // 2)
            for i in range(cfg.n_conv_layers)
        )
        self.dropout = nn.Dropout(cfg.dropout_conv)

    def forward(self, x, key_mask):
        keep = key_mask.unsqueeze(1).to(x.dtype)
        h = x.transpose(1, 2)
        for conv in self.convs:
            h = self.dropout(F.relu(conv(h * keep)))
        return h.transpose(1, 2) * keep.transpose(1, 2)


class EncoderModel(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_embed)
        self.pos_emb = nn.Embedding(cfg.max_seq, cfg.d_embed)
        self.emb_drop = nn.Dropout(cfg.dropout_pos)
        if cfg.conv_enabled and cfg.n_conv_layers > 0:
            self.conv = ConvStack(cfg)
            self.proj = None
        else:
            self.conv = None
            self.proj = nn.Linear(cfg.d_embed, cfg.d_hidden) if cfg.d_embed != cfg.d_hidden else None
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.mlm_head = nn.Linear(cfg.d_hidden, cfg.vocab_size)

    def encode(self, ids, return_attention=False):
        if ids.dim() != 2:
            raise ValidationError("ids must be [batch, seq]")
        if ids.numel() and (int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0):
            raise ValidationError(f"token id out of range for vocab_size={self.cfg.vocab_size}")
        if ids.shape[1] > self.cfg.max_seq:
            raise ValidationError(f"sequence length {ids.shape[1]} exceeds max_seq={self.cfg.max_seq}")
        key_mask = ids != PAD
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.emb_drop(self.tok_emb(ids) + self.pos_emb(pos)[None])
        if self.conv is not None:
            x = self.conv(x, key_mask)
        elif self.proj is not None:
            x = self.proj(x)
        attn = []
        for layer in self.layers:
            x, w = layer(x, key_mask)
            attn.append(w)
        if return_attention:
            return x, attn
        return x

    def forward(self, ids):
        return self.mlm_head(self.encode(ids))

    def n_parameters(self):
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


def build_model(cfg, seed=0):
    torch.manual_seed(seed)
    model = EncoderModel(cfg)
    n = model.n_parameters()
    assert n == parameter_count(cfg), (n, parameter_count(cfg))
    log.info("encoder has %d trainable parameters (reported DS-Pre size: %d)", n, REFERENCE_PARAMETER_COUNT)
    return model


def _as_ids(seqs):
    if isinstance(seqs, TokenSequence):
        seqs = [seqs]
    if isinstance(seqs, torch.Tensor):
        return seqs
    return torch.as_tensor(np.stack([s.ids for s in seqs]), dtype=torch.long)


def forward(model, ids, train_mode=False):
    """Final-layer hidden states [batch, seq, d_hidden]."""
    model.train(train_mode)
    return model.encode(_as_ids(ids))


# --------------------------------------------------------------------------
# masking and loss


@dataclass
class MLMBatch:
    inputs: torch.Tensor
    targets: torch.Tensor
    mask_positions: torch.Tensor

    def __len__(self):
        return self.inputs.shape[0]

    def select(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        return MLMBatch(self.inputs[idx], self.targets[idx], self.mask_positions[idx])


def mask_batch(seqs, cfg, rng):
    """BERT-style masking of non-special positions.

    Each eligible position is selected with probability ``cfg.mask_rate``;
    a selected token becomes [MASK] (80%), a random non-special token (10%)
    or stays unchanged (10%). ``targets`` holds the original id at selected
    positions and ``IGNORE`` elsewhere.
    """
    ids = _as_ids(seqs).numpy()
    eligible = ids >= N_SPECIALS
    # ids 0-4 ([PAD] [UNK] [MASK] [SOS] [EOS]) are never selected
    selected = eligible & (rng.random(ids.shape) < cfg.mask_rate)
    action = rng.random(ids.shape)
    inputs = ids.copy()
    inputs[selected & (action < 0.8)] = MASK
    n_real = cfg.vocab_size - N_SPECIALS
    randomize = selected & (action >= 0.8) & (action < 0.9)
    if n_real > 0:
        inputs[randomize] = rng.integers(N_SPECIALS, cfg.vocab_size, size=int(randomize.sum()))
    targets = np.where(selected, ids, IGNORE)
    return MLMBatch(torch.as_tensor(inputs), torch.as_tensor(targets), torch.as_tensor(selected))


def mlm_loss(model, batch, logits=None):
    """Mean cross-entropy over masked positions only."""
    n = int(batch.mask_positions.sum())
    if n == 0:
        raise ValidationError("batch has no masked positions")
    if logits is None:
        logits = model(batch.inputs)
    return F.cross_entropy(logits[batch.mask_positions], batch.targets[batch.mask_positions])


@torch.no_grad()
def evaluate_mlm(model, seqs, cfg, seed, batch_size=256):
    """(loss, masked-token accuracy) with fresh masks and dropout off."""
    model.eval()
    batch = mask_batch(seqs, cfg, np.random.default_rng(seed))
    total, correct, n = 0.0, 0, 0
    for start in range(0, len(batch), batch_size):
        b = batch.select(range(start, min(start + batch_size, len(batch))))
        m = b.mask_positions
        if not m.any():
            continue
        logits = model(b.inputs)[m]
        total += float(F.cross_entropy(logits, b.targets[m], reduction="sum"))
        correct += int((logits.argmax(-1) == b.targets[m]).sum())
        n += int(m.sum())
    if n == 0:
        raise ValidationError("no maskable positions")
    return total / n, correct / n


# --------------------------------------------------------------------------
# training


def linear_schedule(total_steps, warmup_fraction):
    warmup = int(round(total_steps * warmup_fraction))

    def factor(step):
        if step < warmup:
            return (step + 1) / warmup
        return max(0.0, (total_steps - step) / max(1, total_steps - warmup))

    return factor


def make_optimizer(params, opt_cfg, total_steps):
    opt = torch.optim.AdamW(params, lr=opt_cfg.lr, betas=(opt_cfg.beta1, opt_cfg.beta2),
                            eps=opt_cfg.eps, weight_decay=opt_cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, linear_schedule(total_steps, opt_cfg.warmup_fraction))
    return opt, sched


def seed_everything(seed):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


@dataclass
class PretrainResult:
    model: EncoderModel
    log: list = field(default_factory=list)


def pretrain(seqs, cfg, opt_cfg, seed=0, eval_seed=None, on_epoch=None):
    """Pre-train an encoder with the MLM objective.

    Masks are drawn once up front (``opt_cfg.dupe_factor`` copies per
    sequence) and batches are reshuffled every epoch. Each log row holds the
    mean training loss over the epoch's masked positions, the learning rate
    after the epoch and the masked-token accuracy seen during training.
    """
    cfg.validate()
    opt_cfg.validate()
    if not seqs:
        raise ValidationError("pre-training corpus is empty")
    seed_everything(seed)
    model = build_model(cfg, seed)
    mask_rng, order_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    copies = [mask_batch(seqs, cfg, mask_rng) for _ in range(opt_cfg.dupe_factor)]
    data = MLMBatch(torch.cat([c.inputs for c in copies]), torch.cat([c.targets for c in copies]),
                    torch.cat([c.mask_positions for c in copies]))
    n_batches = math.ceil(len(data) / opt_cfg.batch_size)
    opt, sched = make_optimizer(model.parameters(), opt_cfg, opt_cfg.epochs * n_batches)

    result = PretrainResult(model)
    step = 0
    for epoch in range(1, opt_cfg.epochs + 1):
        model.train()
        order = order_rng.permutation(len(data))
        loss_sum, correct, n_masked = 0.0, 0, 0
        for start in range(0, len(data), opt_cfg.batch_size):
            batch = data.select(order[start:start + opt_cfg.batch_size])
            n = int(batch.mask_positions.sum())
            if n:
                logits = model(batch.inputs)
                loss = mlm_loss(model, batch, logits)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(f"loss became {float(loss)} at epoch {epoch}, step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                loss_sum += float(loss.detach()) * n
                m = batch.mask_positions
                correct += int((logits.detach()[m].argmax(-1) == batch.targets[m]).sum())
                n_masked += n
            sched.step()
            step += 1
        row = {"epoch": epoch, "step": step, "loss": loss_sum / max(n_masked, 1),
               "lr": sched.get_last_lr()[0], "masked_acc": correct / max(n_masked, 1)}
        result.log.append(row)
        log.info("epoch %d loss %.4f masked_acc %.3f", epoch, row["loss"], row["masked_acc"])
        if on_epoch is not None:
            on_epoch(row, model)
    model.eval()
    return result


# --------------------------------------------------------------------------
# inference


@torch.no_grad()
def embed_function(model, seq):
    """Mean of final-layer hidden states over non-PAD positions -> [d_hidden]."""
    out = pooled(model, _as_ids(seq), train_mode=False)
    return out[0] if isinstance(seq, TokenSequence) else out


def pooled(model, ids, train_mode=False):
    """Batched mean pooling over non-PAD positions -> [batch, d_hidden]."""
    h = forward(model, ids, train_mode)
    keep = (ids != PAD).unsqueeze(-1).to(h.dtype)
    return (h * keep).sum(1) / keep.sum(1)


@torch.no_grad()
def export_attention(model, seq):
    """Attention weights as nested lists [layer][head][query][key]."""
    model.eval()
    ids = _as_ids(seq)
    _, attn = model.encode(ids, return_attention=True)
    return torch.stack([a[0] for a in attn]).tolist()


# --------------------------------------------------------------------------
# checkpoints


WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "weights.json"
CONFIG_FILE = "config.json"
VOCAB_FILE = "vocab.tsv"
LOG_FILE = "training_log.jsonl"

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


def save_tensors(tensors, directory, weights=WEIGHTS_FILE, manifest=MANIFEST_FILE):
    """Concatenate named tensors little-endian into one blob with a JSON manifest."""
    entries, offset = [], 0
    with open(os.path.join(directory, weights), "wb") as fp:
        for name, t in tensors.items():
            t = t.detach().cpu().contiguous()
            buf = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
            fp.write(buf)
            entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                            "offset": offset, "nbytes": len(buf)})
            offset += len(buf)
    with open(os.path.join(directory, manifest), "w", encoding="utf-8") as fp:
        json.dump({"tensors": entries}, fp, indent=1)


def load_tensors(directory, weights=WEIGHTS_FILE, manifest=MANIFEST_FILE):
    with open(os.path.join(directory, manifest), encoding="utf-8") as fp:
        entries = json.load(fp)["tensors"]
    with open(os.path.join(directory, weights), "rb") as fp:
        blob = fp.read()
    out = {}
    for e in entries:
        arr = np.frombuffer(blob, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")).copy())
    return out


@dataclass
class Checkpoint:
    model: EncoderModel
    vocab: object
    config: dict
    path: str = ""


def save_checkpoint(directory, model, vocab, opt_cfg, seed, log_rows=(), extra=None):
    os.makedirs(directory, exist_ok=True)
    config = {
        "encoder": dataclasses.asdict(model.cfg),
        "optimizer": dataclasses.asdict(opt_cfg),
        "seed": seed,
        "vocab_hash": vocab.hash,
        "n_parameters": model.n_parameters(),
    }
    if extra:
        config.update(extra)
    with open(os.path.join(directory, CONFIG_FILE), "w", encoding="utf-8") as fp:
        json.dump(config, fp, indent=2, sort_keys=True)
    vocab.save(os.path.join(directory, VOCAB_FILE))
    save_tensors(model.state_dict(), directory)
    with open(os.path.join(directory, LOG_FILE), "w", encoding="utf-8") as fp:
        for row in log_rows:
            fp.write(json.dumps(row) + "\n")
    return directory


def load_checkpoint(directory):
    from .corpus import Vocabulary

    path = os.path.join(directory, CONFIG_FILE)
    if not os.path.exists(path):
        raise ValidationError(f"{directory} is not a checkpoint (no {CONFIG_FILE})")
    with open(path, encoding="utf-8") as fp:
        config = json.load(fp)
    vocab = Vocabulary.load(os.path.join(directory, VOCAB_FILE))
    if vocab.hash != config["vocab_hash"]:
        raise ValidationError(f"{directory}: vocabulary file does not match the recorded hash")
    cfg = EncoderConfig(**config["encoder"])
    model = EncoderModel(cfg)
    state = load_tensors(directory)
    model.load_state_dict(state)
    model.eval()
    return Checkpoint(model, vocab, config, directory)


def read_log(directory, name=LOG_FILE):
    with open(os.path.join(directory, name), encoding="utf-8") as fp:
        return [json.loads(line) for line in fp if line.strip()]

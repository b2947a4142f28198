"""Fine-tuning heads on top of a pre-trained encoder.

* binsim: ``softmax(W [h_a ; h_b ; bos_sim] + b)`` with two outputs, where
  ``h_a``/``h_b`` are mean-pooled encoder states of the two functions.
* toolchain: ``softmax(W h + b)`` over compiler or optimization-level classes.

Both are trained with cross-entropy. A task checkpoint is a new directory that
holds a copy of the parent checkpoint's files, the (possibly updated) encoder
weights, the head weights and ``task.json``; the parent is never modified.
"""

import copy
import dataclasses
import hashlib
import json
import logging
import math
import os
import shutil
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import encoder as enc
from .corpus import pad_ids
from .errors import TrainingDivergedError, ValidationError
from .metrics import evaluate

log = logging.getLogger(__name__)

TASKS = ("binsim", "compiler", "optlevel", "optlevel_gcc", "optlevel_clang")
HEAD_WEIGHTS = "head.bin"
HEAD_MANIFEST = "head.json"
TASK_FILE = "task.json"
FINETUNE_LOG = "finetune_log.jsonl"


class BinSimHead(nn.Module):
    def __init__(self, d_hidden):
        super().__init__()
        self.d_hidden = d_hidden
        self.linear = nn.Linear(2 * d_hidden + 1, 2)

    def forward(self, h_a, h_b, bos_sim):
        x = torch.cat([h_a, h_b, bos_sim.reshape(-1, 1).to(h_a.dtype)], dim=-1)
        if x.shape[-1] != 2 * self.d_hidden + 1:
            raise ValidationError(f"binsim head expects width {2 * self.d_hidden + 1}, got {x.shape[-1]}")
        return self.linear(x)


class ToolchainHead(nn.Module):
    def __init__(self, d_hidden, classes):
        super().__init__()
        if len(classes) < 2:
            raise ValidationError("a toolchain head needs at least two classes")
        self.classes = list(classes)
        self.linear = nn.Linear(d_hidden, len(classes))

    def forward(self, h):
        return self.linear(h)


class TaskModel(nn.Module):
    """Encoder plus one head; ``forward`` returns logits."""

    def __init__(self, encoder, head, task, classes):
        super().__init__()
        self.encoder = encoder
        self.head = head
        self.task = task
        self.classes = list(classes)

    def _pool(self, ids):
        return enc.pooled(self.encoder, ids, self.encoder.training)

    def forward(self, batch):
        if self.task == "binsim":
            return self.head(self._pool(batch["a"]), self._pool(batch["b"]), batch["bos_sim"])
        return self.head(self._pool(batch["x"]))


def _ids(seq):
    if isinstance(seq, torch.Tensor):
        return seq if seq.dim() == 2 else seq[None]
    return torch.as_tensor(np.asarray(seq.ids)[None], dtype=torch.long)


@torch.no_grad()
def binsim_logits(model, head, a, b, bos_sim):
    """Class probabilities [2] (index 1 = similar) for one function pair."""
    model.eval()
    h_a = enc.pooled(model, _ids(a))
    h_b = enc.pooled(model, _ids(b))
    bos = torch.as_tensor([float(bos_sim)], dtype=h_a.dtype)
    return torch.softmax(head(h_a, h_b, bos), dim=-1)[0]


@torch.no_grad()
def toolchain_logits(model, head, x):
    """Class probabilities [C] for one function."""
    model.eval()
    return torch.softmax(head(enc.pooled(model, _ids(x))), dim=-1)[0]


def cross_entropy(logits, labels):
    return F.cross_entropy(logits, labels)


# --------------------------------------------------------------------------
# datasets


def tensorize(rows, task, max_seq):
    """Stack dataset rows (unpadded id lists with SOS/EOS) into padded tensors."""
    def stack(key):
        return torch.as_tensor(np.stack([pad_ids(r[key], max_seq).ids for r in rows]), dtype=torch.long)

    if not rows:
        raise ValidationError("empty dataset")
    out = {"label": torch.as_tensor([int(r["label"]) for r in rows], dtype=torch.long)}
    if task == "binsim":
        if any("a" not in r for r in rows):
            raise ValidationError("binsim rows need a/b sequences")
        out["a"], out["b"] = stack("a"), stack("b")
        out["bos_sim"] = torch.as_tensor([float(r["bos_sim"]) for r in rows], dtype=torch.float32)
    else:
        if any("x" not in r for r in rows):
            raise ValidationError("toolchain rows need an x sequence")
        out["x"] = stack("x")
    out["group"] = [r.get("group", "") for r in rows]
    return out


def _select(data, idx):
    idx_t = torch.as_tensor(idx, dtype=torch.long)
    return {k: (v[idx_t] if isinstance(v, torch.Tensor) else [v[i] for i in idx]) for k, v in data.items()}


def _check_labels(data, n_classes, task):
    labels = data["label"]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise ValidationError(f"labels outside 0..{n_classes - 1} for task {task}")


@torch.no_grad()
def predict_batch(task_model, data, batch_size=128):
    """Probabilities [N, C] with dropout off."""
    task_model.eval()
    n = data["label"].shape[0]
    out = []
    for start in range(0, n, batch_size):
        out.append(torch.softmax(task_model(_select(data, list(range(start, min(n, start + batch_size))))), -1))
    return torch.cat(out)


def argmax_labels(probs):
    """Argmax with ties resolved towards the higher class index."""
    flipped = probs.flip(-1).argmax(-1)
    return probs.shape[-1] - 1 - flipped


def validation_metrics(task_model, data):
    probs = predict_batch(task_model, data)
    labels = argmax_labels(probs)
    truth = data["label"]
    out = {"accuracy": float((labels == truth).double().mean())}
    if task_model.task == "binsim":
        rows = [{"label": int(l), "truth": int(t), "score": float(p)}
                for l, t, p in zip(labels, truth, probs[:, 1])]
        rep = evaluate(rows)
        out.update(precision=rep.precision, recall=rep.recall, f1=rep.f1, auc=rep.auc)
    return out


# --------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneResult:
    model: TaskModel
    log: list = field(default_factory=list)


def build_task_model(encoder, task, classes, seed=0):
    torch.manual_seed(seed)
    d = encoder.cfg.d_hidden
    head = BinSimHead(d) if task == "binsim" else ToolchainHead(d, classes)
    return TaskModel(encoder, head, task, classes)


def finetune(encoder, train_rows, task, opt_cfg, freeze_encoder=False, seed=0, valid_rows=None, classes=None):
    """Train a task head (and the encoder unless frozen) with cross-entropy.

    ``encoder`` is deep-copied; the caller's model is left untouched.
    Returns the trained TaskModel and one log row per epoch with the mean
    training loss and validation metrics (on ``valid_rows``, else on the
    training rows).
    """
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}")
    opt_cfg.validate()
    classes = list(classes or (("dissimilar", "similar") if task == "binsim" else ()))
    max_seq = encoder.cfg.max_seq
    train = tensorize(train_rows, "binsim" if task == "binsim" else "toolchain", max_seq)
    valid = tensorize(valid_rows, "binsim" if task == "binsim" else "toolchain", max_seq) if valid_rows else train
    _check_labels(train, len(classes), task)
    _check_labels(valid, len(classes), task)

    enc.seed_everything(seed)
    model = build_task_model(copy.deepcopy(encoder), task, classes, seed)
    if freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    n = train["label"].shape[0]
    n_batches = math.ceil(n / opt_cfg.batch_size)
    opt, sched = enc.make_optimizer(params, opt_cfg, opt_cfg.epochs * n_batches)
    order_rng = np.random.default_rng(seed)

    result = FinetuneResult(model)
    step = 0
    for epoch in range(1, opt_cfg.epochs + 1):
        model.train()
        if freeze_encoder:
            model.encoder.eval()
        order = order_rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, opt_cfg.batch_size):
            idx = order[start:start + opt_cfg.batch_size].tolist()
            batch = _select(train, idx)
            loss = cross_entropy(model(batch), batch["label"])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"fine-tuning loss became {float(loss)} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            loss_sum += float(loss.detach()) * len(idx)
        row = {"epoch": epoch, "step": step, "loss": loss_sum / n, "lr": sched.get_last_lr()[0],
               "valid": validation_metrics(model, valid)}
        result.log.append(row)
        log.info("finetune epoch %d loss %.4f valid %s", epoch, row["loss"], row["valid"])
    model.eval()
    return result


# --------------------------------------------------------------------------
# prediction


def predict_pair(task_model, a, b, bos_sim):
    probs = binsim_logits(task_model.encoder, task_model.head, a, b, bos_sim)
    score = float(probs[1])
    return {"score": score, "label": int(argmax_labels(probs)), "probabilities": probs.tolist()}


def predict_toolchain(task_model, x):
    probs = toolchain_logits(task_model.encoder, task_model.head, x)
    k = int(argmax_labels(probs))
    return {"class": task_model.classes[k], "index": k, "probabilities": probs.tolist()}


# --------------------------------------------------------------------------
# task checkpoints


def checkpoint_hash(directory):
    h = hashlib.sha256()
    for name in (enc.CONFIG_FILE, enc.WEIGHTS_FILE):
        with open(os.path.join(directory, name), "rb") as fp:
            h.update(fp.read())
    return h.hexdigest()


def save_task_checkpoint(directory, parent_dir, result, dataset_hash, opt_cfg, seed, freeze_encoder):
    if os.path.abspath(directory) == os.path.abspath(parent_dir):
        raise ValidationError("task checkpoint must not overwrite its parent checkpoint")
    os.makedirs(directory, exist_ok=True)
    for name in (enc.CONFIG_FILE, enc.VOCAB_FILE, enc.LOG_FILE):
        src = os.path.join(parent_dir, name)
        if os.path.exists(src):
            shutil.copyfile(src, os.path.join(directory, name))
    model = result.model
    enc.save_tensors(model.encoder.state_dict(), directory)
    enc.save_tensors(model.head.state_dict(), directory, HEAD_WEIGHTS, HEAD_MANIFEST)
    task = {
        "task": model.task,
        "classes": model.classes,
        "dataset_hash": dataset_hash,
        "parent_checkpoint_hash": checkpoint_hash(parent_dir),
        "freeze_encoder": freeze_encoder,
        "seed": seed,
        "optimizer": dataclasses.asdict(opt_cfg),
    }
    with open(os.path.join(directory, TASK_FILE), "w", encoding="utf-8") as fp:
        json.dump(task, fp, indent=2, sort_keys=True)
    with open(os.path.join(directory, FINETUNE_LOG), "w", encoding="utf-8") as fp:
        for row in result.log:
            fp.write(json.dumps(row) + "\n")
    return directory


@dataclass
class TaskCheckpoint:
    model: TaskModel
    vocab: object
    task: dict
    config: dict


def load_task_checkpoint(directory):
    path = os.path.join(directory, TASK_FILE)
    if not os.path.exists(path):
        raise ValidationError(f"{directory} is not a task checkpoint (no {TASK_FILE})")
    with open(path, encoding="utf-8") as fp:
        task = json.load(fp)
    base = enc.load_checkpoint(directory)
    model = build_task_model(base.model, task["task"], task["classes"])
    model.head.load_state_dict(enc.load_tensors(directory, HEAD_WEIGHTS, HEAD_MANIFEST))
    model.eval()
    return TaskCheckpoint(model, base.vocab, task, base.config)


def finetune_checkpoint(checkpoint_dir, dataset_dir, out_dir, opt_cfg, freeze_encoder=False, seed=0):
    """Fine-tune a pre-trained checkpoint directory on a dataset directory.

    The dataset's vocabulary hash is checked against the checkpoint before any
    training happens. The result is written to ``out_dir``; ``checkpoint_dir``
    is only read.
    """
    from .corpus import read_meta, read_rows, file_hash

    meta = read_meta(dataset_dir)
    base = enc.load_checkpoint(checkpoint_dir)
    if meta.vocab_hash != base.vocab.hash:
        raise ValidationError(
            f"dataset vocabulary {meta.vocab_hash[:12]} does not match checkpoint vocabulary {base.vocab.hash[:12]}")
    if meta.max_seq > base.model.cfg.max_seq:
        raise ValidationError(f"dataset max_seq {meta.max_seq} exceeds encoder max_seq {base.model.cfg.max_seq}")
    train_path = os.path.join(dataset_dir, "train.jsonl")
    valid_path = os.path.join(dataset_dir, "valid.jsonl")
    train_rows = read_rows(train_path)
    valid_rows = read_rows(valid_path) if os.path.exists(valid_path) else []
    result = finetune(base.model, train_rows, meta.task, opt_cfg, freeze_encoder, seed,
                      valid_rows=valid_rows or None, classes=meta.classes)
    save_task_checkpoint(out_dir, checkpoint_dir, result, file_hash(train_path), opt_cfg, seed, freeze_encoder)
    return result

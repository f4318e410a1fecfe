"""Evaluation-network training and the windowed logistic-regression baseline."""
import csv
import logging
import math
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from ..models.config import ConfigError, TrainConfig
from .data import FRAME_ALIGN, Dataset, iterate_batches
from .engine import load_checkpoint, read_checkpoint_sidecar, save_checkpoint
from .network import EvalNet
from .search import METRICS_HEADER, evaluate, frame_loss

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.bin"


def cosine_lr(epoch: int, epochs: int, lr: float, lr_min: float) -> float:
    if epochs <= 0:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1 + math.cos(math.pi * epoch / epochs))


def last_epoch(metrics_path: Path) -> int:
    """Highest epoch recorded in a metrics CSV, -1 when there is none."""
    if not metrics_path.exists():
        return -1
    with open(metrics_path, newline="") as f:
        epochs = [int(row["epoch"]) for row in csv.DictReader(f)]
    return max(epochs, default=-1)


def _check_resumable(net: EvalNet, checkpoint: Path) -> None:
    if not checkpoint.exists():
        raise ConfigError(f"no checkpoint at {checkpoint}", "resume")
    saved = read_checkpoint_sidecar(checkpoint).get("extra", {}).get("genotype_hash")
    if saved != net.genotype_hash:
        raise ConfigError(f"{checkpoint} holds genotype {str(saved)[:12]}, "
                          f"not {net.genotype_hash[:12]}", "resume")


def train_eval_net(net: EvalNet, train_set: Dataset, val_set: Dataset, cfg: TrainConfig,
                   out_dir: Path, resume: bool = False) -> List[Tuple]:
    """Frame cross-entropy training with per-epoch validation rows.

    Row 0 is the untrained network. With ``resume`` the checkpoint in
    ``out_dir`` is loaded and numbering continues after the last recorded
    epoch, up to ``cfg.epochs``.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    checkpoint = out_dir / CHECKPOINT_NAME
    rows: List[Tuple] = []

    start = 1
    if resume:
        _check_resumable(net, checkpoint)
        extra = load_checkpoint(net, checkpoint)
        start = max(last_epoch(metrics_path), int(extra.get("epoch", 0))) + 1
        logger.info("Resuming from epoch %d", start)
    else:
        with open(metrics_path, "w", newline="") as f:
            csv.writer(f).writerow(METRICS_HEADER)

    def record(epoch, phase, train_loss):
        val_loss, val_acc = evaluate(net, val_set, cfg.batch_size)
        row = (epoch, phase, f"{train_loss:.6f}", f"{val_loss:.6f}", f"{val_acc:.6f}")
        rows.append(row)
        with open(metrics_path, "a", newline="") as f:
            csv.writer(f).writerow(row)
        logger.info("Epoch %d %s train_loss %.4f val_loss %.4f val_acc %.4f",
                    epoch, phase, train_loss, val_loss, val_acc)
        save_checkpoint(net, checkpoint, extra={"epoch": epoch, "genotype_hash": net.genotype_hash})

    if not resume:
        record(0, "init", float("nan"))

    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    for epoch in range(start, cfg.epochs + 1):
        for group in opt.param_groups:
            group["lr"] = cosine_lr(epoch - 1, cfg.epochs, cfg.lr, cfg.lr_min)
        net.train()
        losses = []
        for batch in iterate_batches(train_set, cfg.batch_size, seed=cfg.seed * 1009 + epoch):
            opt.zero_grad()
            loss = frame_loss(net(batch.features), batch.labels)
            if not torch.isfinite(loss):
                raise RuntimeError(f"epoch {epoch}: non-finite training loss")
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            opt.step()
            losses.append(float(loss.detach()))
        record(epoch, "train", sum(losses) / len(losses) if losses else float("nan"))
    net.eval()
    return rows


# -- baseline ------------------------------------------------------------------------

def window_features(dataset: Dataset, window: int) -> Tuple[np.ndarray, np.ndarray]:
    """Static frames [t - window + 1, t] flattened, at every labelled frame 4j + 3."""
    xs, ys = [], []
    for utt in dataset:
        static = utt.static
        padded = np.concatenate([np.repeat(static[:1], window - 1, axis=0), static])
        for t in range(FRAME_ALIGN - 1, utt.valid_frames, FRAME_ALIGN):
            xs.append(padded[t:t + window].reshape(-1))
            ys.append(utt.labels[t])
    return np.asarray(xs, dtype=np.float32), np.asarray(ys, dtype=np.int64)


def logistic_baseline(train_set: Dataset, val_set: Dataset, window: int = 8,
                      steps: int = 200, lr: float = 0.05, seed: int = 0) -> float:
    """Validation accuracy of a softmax regression over a causal frame window."""
    x_train, y_train = window_features(train_set, window)
    x_val, y_val = window_features(val_set, window)
    if not len(y_train) or not len(y_val):
        return 0.0
    mean, std = x_train.mean(axis=0), x_train.std(axis=0) + 1e-6
    xt = torch.from_numpy((x_train - mean) / std)
    xv = torch.from_numpy((x_val - mean) / std)
    torch.manual_seed(seed)
    model = nn.Linear(xt.shape[1], train_set.classes)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    yt = torch.from_numpy(y_train)
    for _ in range(steps):
        opt.zero_grad()
        loss = nn.functional.cross_entropy(model(xt), yt)
        loss.backward()
        opt.step()
    with torch.no_grad():
        acc = float((model(xv).argmax(dim=1) == torch.from_numpy(y_val)).float().mean())
    logger.info("Logistic baseline (window %d): val_acc %.4f", window, acc)
    return acc

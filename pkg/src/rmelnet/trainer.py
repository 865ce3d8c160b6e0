"""Teacher-forced MSE training with virtual batches and 32-bit master weights.

A step accumulates gradients over ``accum`` sub-batches of ``sub_batch``
items, averages them, clips the global norm and applies one Adam update to
the 32-bit master parameters. In 16-bit mode the forward/backward passes
run on a half-precision working copy that is refreshed from the masters
after every update; a non-finite loss or gradient skips the update.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .features import MelGrid
from .frontend import (FrontendModel, NonFiniteError, load_model, mse_loss,
                       write_checkpoint)
from .numerics import PrecisionPolicy
from .text import Utterance, Vocabulary, encode, mix

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    sub_batch: int = 8
    accum: int = 2
    effective_batch: int = 16
    lr: float = 1e-4
    clip_norm: float = 1.0
    steps: int = 1000
    activation_bits: int = 32
    seed: int = 0
    p_swap: float = 0.5
    checkpoint_every: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.sub_batch * self.accum != self.effective_batch:
            raise ValueError(f"sub_batch x accum = {self.sub_batch * self.accum} "
                             f"!= effective_batch {self.effective_batch}")
        PrecisionPolicy(self.activation_bits)

    @property
    def precision(self) -> PrecisionPolicy:
        return PrecisionPolicy(self.activation_bits)


@dataclass
class Example:
    """One training utterance: normalized tier1 grid plus its transcript."""

    grid: MelGrid
    utterance: Utterance
    valid_frames: int | None = None

    def __post_init__(self):
        if not self.grid.normalized:
            raise ValueError(f"{self.utterance.id}: training grids must be normalized")
        if self.valid_frames is None:
            self.valid_frames = self.grid.frames


@dataclass
class Batch:
    x: torch.Tensor          # (B, T, F)
    mask: torch.Tensor       # (B, T, 1)
    ids: torch.Tensor        # (B, U)
    id_lengths: torch.Tensor

    def __len__(self):
        return self.x.shape[0]


def collate(grids: Sequence[np.ndarray], valid: Sequence[int], id_seqs: Sequence[np.ndarray]) -> Batch:
    B, T = len(grids), grids[0].shape[0]
    x = torch.from_numpy(np.stack(grids).astype(np.float32))
    mask = (torch.arange(T)[None, :, None] < torch.tensor(valid)[:, None, None]).float()
    lengths = torch.tensor([len(s) for s in id_seqs])
    ids = torch.zeros(B, int(lengths.max()), dtype=torch.long)
    for b, s in enumerate(id_seqs):
        ids[b, :len(s)] = torch.from_numpy(s)
    return Batch(x, mask, ids, lengths)


def draw_batches(data: Sequence[Example], vocab: Vocabulary, cfg: TrainConfig, step: int) -> list[Batch]:
    """Sub-batches for one step; a pure function of (seed, step) so resumes are exact."""
    rng = np.random.default_rng([cfg.seed, step])
    picks = rng.integers(0, len(data), size=cfg.effective_batch)
    seqs = [encode(mix(data[i].utterance, cfg.p_swap, rng, vocab), vocab) for i in picks]
    out = []
    for k in range(cfg.accum):
        sl = slice(k * cfg.sub_batch, (k + 1) * cfg.sub_batch)
        idx = picks[sl]
        out.append(collate([data[i].grid.values for i in idx], [data[i].valid_frames for i in idx], seqs[sl]))
    return out


class Trainer:
    """Holds master model, optional half-precision working copy and Adam state."""

    def __init__(self, model: FrontendModel, cfg: TrainConfig):
        self.cfg = cfg
        self.master = model.float()
        self.opt = torch.optim.Adam(self.master.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
        self.step_count = 0
        if cfg.activation_bits == 16:
            self.working = copy.deepcopy(self.master).half()
            self.working.cfg = dataclasses.replace(self.master.cfg, activation_bits=16)
        else:
            self.working = self.master

    def _sync_working(self):
        if self.working is not self.master:
            with torch.no_grad():
                for w, m in zip(self.working.parameters(), self.master.parameters()):
                    w.copy_(m)

    def train_step(self, batches: Sequence[Batch]) -> dict:
        """One optimizer update from ``len(batches)`` accumulated sub-batches."""
        K = len(batches)
        masters = list(self.master.parameters())
        grads = [torch.zeros_like(p) for p in masters]
        total = 0.0
        finite = True
        for b in batches:
            self.working.zero_grad(set_to_none=True)
            try:
                means, _, _ = self.working(b.x, b.ids, b.id_lengths)
                loss = mse_loss(means, b.x, b.mask)
            except NonFiniteError:
                finite = False
                break
            if not torch.isfinite(loss):
                finite = False
                break
            loss.backward()
            for g, p in zip(grads, self.working.parameters()):
                if p.grad is not None:
                    g += p.grad.float()
            total += loss.item()
        if finite:
            for g in grads:
                g /= K
            finite = all(torch.isfinite(g).all() for g in grads)
        self.step_count += 1
        if not finite:
            log.warning("step %d: non-finite loss or gradient, update skipped", self.step_count)
            return {"step": self.step_count, "loss": None, "grad_norm": None, "skipped": True}

        norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads)).item()
        scale = self.cfg.clip_norm / norm if norm > self.cfg.clip_norm else 1.0
        for p, g in zip(masters, grads):
            p.grad = g * scale
        self.opt.step()
        self.opt.zero_grad(set_to_none=True)
        self._sync_working()
        return {"step": self.step_count, "loss": total / K, "grad_norm": norm, "skipped": False}

    # -- persistence ----------------------------------------------------------

    def optimizer_blobs(self) -> dict[str, torch.Tensor]:
        names = [n for n, _ in self.master.named_parameters()]
        blobs = {}
        for name, p in zip(names, self.master.parameters()):
            st = self.opt.state.get(p)
            if st:
                blobs[f"optim/{name}/exp_avg"] = st["exp_avg"]
                blobs[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"]
                blobs[f"optim/{name}/step"] = st["step"].reshape(1).float()
        return blobs

    def save(self, path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta.update({"train_config": asdict(self.cfg), "step": self.step_count})
        write_checkpoint(path, self.master, meta, self.optimizer_blobs())

    def load_optimizer(self, blobs: dict[str, torch.Tensor], step: int) -> None:
        for name, p in self.master.named_parameters():
            key = f"optim/{name}"
            if f"{key}/exp_avg" in blobs:
                self.opt.state[p] = {
                    "step": blobs[f"{key}/step"].reshape(()).clone(),
                    "exp_avg": blobs[f"{key}/exp_avg"].clone(),
                    "exp_avg_sq": blobs[f"{key}/exp_avg_sq"].clone(),
                }
        self.step_count = step
        self._sync_working()

    @classmethod
    def resume(cls, path, cfg: TrainConfig | None = None) -> "Trainer":
        model, header, blobs = load_model(path)
        cfg = cfg or TrainConfig(**header["meta"]["train_config"])
        trainer = cls(model, cfg)
        trainer.load_optimizer(blobs, header["meta"]["step"])
        return trainer


def fit(data: Sequence[Example], vocab: Vocabulary, trainer: Trainer, checkpoint_dir=None,
        meta: dict | None = None, log_path=None, callback=None) -> list[dict]:
    """Run ``trainer`` up to ``cfg.steps`` total steps; returns the per-step log."""
    if not data:
        raise ValueError("training dataset is empty")
    cfg = trainer.cfg
    bins = trainer.master.cfg.bins
    for ex in data:
        if ex.grid.bins != bins:
            raise ValueError(f"{ex.utterance.id}: grid has {ex.grid.bins} bins, model expects {bins}")
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    logf = open(log_path, "a") if log_path else None
    history = []
    try:
        while trainer.step_count < cfg.steps:
            batches = draw_batches(data, vocab, cfg, trainer.step_count)
            metrics = trainer.train_step(batches)
            history.append(metrics)
            if logf:
                logf.write(json.dumps(metrics) + "\n")
            if callback:
                callback(trainer, metrics)
            if ckdir and cfg.checkpoint_every and trainer.step_count % cfg.checkpoint_every == 0:
                _checkpoint(trainer, ckdir / f"step{trainer.step_count:06d}.rmck", meta)
        if ckdir:
            _checkpoint(trainer, ckdir / "last.rmck", meta)
    finally:
        if logf:
            logf.close()
    return history


def _checkpoint(trainer: Trainer, path: Path, meta):
    try:
        trainer.save(path, meta)
    except OSError:
        log.error("checkpoint write to %s failed at step %d; state since the last "
                  "checkpoint is not persisted", path, trainer.step_count)
        raise

"""Joint training of the recognition and auxiliary objectives, and evaluation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .config import AUSpec, HyperParams
from .data.augment import augment
from .data.batch import Batch, collate
from .data.roi import apply_roi_mask
from .data.types import Sample
from .metrics import FoldResult, binarize, f1_scores
from .models.net import RTATLNet
from .models.ofe import flow_loss
from .models.roii import RoIIBatch, binary_cross_entropy, pseudo_label, reconstruction_loss

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "l_sup", "l_d", "l_g", "l_f", "total")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def supervised_loss(probs_fused: torch.Tensor, labels: torch.Tensor,
                    excluded=None, labeled: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean BCE over (sample, AU) entries that are labeled and not erased.

    ``excluded`` is a ``B x N`` bool mask, or a set of AU indices for a single
    sample. Unlabeled rows and excluded AUs are dropped, not zero-weighted, so
    they receive exactly zero gradient.
    """
    probs = probs_fused if probs_fused.ndim == 2 else probs_fused[None]
    target = labels if labels.ndim == 2 else labels[None]
    keep = torch.ones_like(probs, dtype=torch.bool)
    if excluded is not None:
        if isinstance(excluded, (set, frozenset, list, tuple)):
            idx = list(excluded)
            keep[:, idx] = False
        else:
            keep &= ~(excluded if excluded.ndim == 2 else excluded[None]).bool()
    if labeled is not None:
        keep &= labeled.bool().reshape(-1, 1)
    if not bool(keep.any()):
        log.warning("supervised loss: every AU excluded, contributing zero")
        return probs.sum() * 0.0
    return binary_cross_entropy(probs[keep], target[keep].to(probs.dtype)).mean()


@dataclass
class LossReport:
    step: int
    l_sup: float
    l_d: float
    l_g: float
    l_f: float
    total: float
    l_rec: float = float("nan")
    l_c: float = float("nan")
    n_labeled: int = 0
    n_unlabeled: int = 0
    n_masked: int = 0
    n_flow: int = 0
    partition: dict = field(default_factory=dict)


def _snapshot(params) -> list[torch.Tensor]:
    return [p.detach().clone() for p in params]


def _max_change(before, params) -> float:
    return max((float((b - p.detach()).abs().max()) for b, p in zip(before, params)), default=0.0)


class Trainer:
    """Owns the two optimisers and performs alternating critic / main updates."""

    def __init__(self, model: RTATLNet, seed: int = 0, aux: bool = True,
                 mask_fraction: Optional[float] = None, check_partition: bool = False):
        self.model = model
        self.spec: AUSpec = model.spec
        self.hp: HyperParams = model.hp
        self.aux = aux
        self.mask_fraction = self.hp.mask_fraction if mask_fraction is None else mask_fraction
        self.check_partition = check_partition
        self.rng = np.random.default_rng(seed)
        torch.manual_seed(seed)
        self.opt_main = torch.optim.Adam(model.main_parameters(), lr=self.hp.lr)
        self.opt_critic = torch.optim.Adam(model.critic_parameters(), lr=self.hp.lr)
        self.step_count = 0

    @property
    def dtype(self):
        return next(self.model.parameters()).dtype

    def _mask(self, samples: list[Sample]) -> list[Sample]:
        n = len(samples)
        k = int(round(self.mask_fraction * n))
        chosen = set(self.rng.choice(n, size=k, replace=False).tolist()) if k else set()
        return [apply_roi_mask(x, self.spec, self.rng) if i in chosen else x
                for i, x in enumerate(samples)]

    def make_batch(self, labeled: Sequence[Sample], unlabeled: Sequence[Sample] = ()) -> Batch:
        samples = list(labeled) + list(unlabeled)
        intact = [x.image for x in samples]
        if self.aux and self.mask_fraction > 0:
            labeled_part = self._mask(list(labeled))
            unlabeled_part = self._mask(list(unlabeled)) if unlabeled else []
            samples = labeled_part + unlabeled_part
        return collate(samples, self.spec, intact=intact,
                       flow_size=self.model.flow_size).to(dtype=self.dtype)

    def _semantic_targets(self, batch: Batch, idx: torch.Tensor) -> torch.Tensor:
        au = batch.mask_au[idx]
        y = batch.labels[idx, au].round().long()
        need = ~batch.labeled[idx]
        if bool(need.any()):
            was_training = self.model.training
            self.model.eval()
            with torch.no_grad():
                rows = idx[need]
                pred = self.model(batch.intact[rows], batch.centers[rows])
            self.model.train(was_training)
            y[need] = pseudo_label(pred.probs_fused, au[need], self.hp.pseudo_threshold)
        return y

    def train_step(self, labeled: Sequence[Sample], unlabeled: Sequence[Sample] = ()) -> LossReport:
        model, hp = self.model, self.hp
        model.train()
        batch = self.make_batch(labeled, unlabeled)
        critic = model.critic_parameters()
        main = model.main_parameters()
        partition = {}

        bundle, att, _ = model.features(batch.images, batch.centers)
        pred = model.predict(bundle, att.per_au)
        l_sup = supervised_loss(pred.probs_fused, batch.labels, batch.excluded, batch.labeled)
        zero = l_sup * 0.0
        l_d = l_g = l_f = l_rec = l_c = zero

        idx = torch.nonzero(batch.masked).flatten()
        roii_batch = None
        if self.aux and len(idx):
            au = batch.mask_au[idx]
            x = torch.stack([att.tokens[idx, 2 * au], att.tokens[idx, 2 * au + 1]], 1).flatten(0, 1)
            p = batch.patches[idx].flatten(0, 1)
            y = self._semantic_targets(batch, idx).repeat_interleave(2)
            roii_batch = RoIIBatch(x=x, p=p, y_hat=y)

        # critic phase: discriminator and classifier only
        if roii_batch is not None:
            before_main = _snapshot(main) if self.check_partition else None
            heads = model.roii
            with torch.no_grad():
                fake = heads.generator(roii_batch.x.detach())
            d_losses = heads.step(RoIIBatch(roii_batch.x.detach(), roii_batch.p, roii_batch.y_hat),
                                  hp.lambda1, hp.lambda2, fake=fake, reduction=hp.pixel_reduction)
            l_d, l_c = d_losses.l_d, d_losses.l_c
            self._check_finite({"l_d": l_d, "l_c": l_c})
            self.opt_critic.zero_grad(set_to_none=True)
            (l_d + l_c).backward()
            self.opt_critic.step()
            self.opt_critic.zero_grad(set_to_none=True)
            if before_main is not None:
                partition["main_change_in_critic_phase"] = _max_change(before_main, main)

        # main phase: everything except the critics
        before_critic = _snapshot(critic) if self.check_partition else None
        for prm in critic:
            prm.requires_grad_(False)
        try:
            if roii_batch is not None:
                g_losses = model.roii.step(roii_batch, hp.lambda1, hp.lambda2,
                                           reduction=hp.pixel_reduction)
                l_g, l_rec = g_losses.l_g, g_losses.l_rec
            if self.aux and bool(batch.has_flow.any()):
                f_p = model.flow_head(bundle.global_maps)
                l_f = flow_loss(f_p, batch.flow, batch.has_flow, hp.pixel_reduction)
            loss = l_sup + l_g + hp.lambda_f * l_f if self.aux else l_sup
            self._check_finite({"l_sup": l_sup, "l_g": l_g, "l_f": l_f})
            self.opt_main.zero_grad(set_to_none=True)
            loss.backward()
            if self.check_partition:
                partition["critic_grad_in_main_phase"] = max(
                    (float(p.grad.abs().max()) for p in critic if p.grad is not None), default=0.0)
            self.opt_main.step()
        finally:
            for prm in critic:
                prm.requires_grad_(True)
        if before_critic is not None:
            partition["critic_change_in_main_phase"] = _max_change(before_critic, critic)

        self.step_count += 1
        vals = {k: float(v.detach()) for k, v in
                dict(l_sup=l_sup, l_d=l_d, l_g=l_g, l_f=l_f, l_rec=l_rec, l_c=l_c).items()}
        total = vals["l_sup"] + vals["l_d"] + vals["l_g"] + hp.lambda_f * vals["l_f"]
        return LossReport(step=self.step_count, total=total, **vals,
                          n_labeled=int(batch.labeled.sum()), n_unlabeled=int((~batch.labeled).sum()),
                          n_masked=int(batch.masked.sum()), n_flow=int(batch.has_flow.sum()),
                          partition=partition)

    def _check_finite(self, losses: dict) -> None:
        bad = {k: float(v.detach()) for k, v in losses.items() if not torch.isfinite(v).all()}
        if bad:
            snapshot = {"step": self.step_count + 1, **{k: float(v.detach()) for k, v in losses.items()}}
            raise TrainingDiverged(f"non-finite loss at step {snapshot['step']}: {bad}", snapshot)


def sample_stream(samples: Sequence[Sample], batch_size: int, rng: np.random.Generator,
                  input_size: int, mirror=None) -> Iterator[list[Sample]]:
    """Endless shuffled, augmented mini-batches."""
    if not samples:
        raise ValueError("empty sample stream")
    while True:
        order = rng.permutation(len(samples))
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            if len(chunk) < batch_size and len(order) >= batch_size:
                break
            yield [augment(samples[i], rng, input_size, train=True, mirror=mirror) for i in chunk]


@torch.no_grad()
def predict_probs(model: RTATLNet, samples: Sequence[Sample], batch_size: int = 16) -> np.ndarray:
    """Fused probabilities on centre-cropped intact images (inference path)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = [augment(x, None, model.hp.input_size, train=False)
                 for x in samples[start:start + batch_size]]
        for x in chunk:
            x.mask = None
        batch = collate(chunk, model.spec, flow_size=model.flow_size).to(dtype=dtype)
        out.append(model(batch.images, batch.centers).probs_fused.cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.spec.N))


@torch.no_grad()
def reconstruction_probe(model: RTATLNet, samples: Sequence[Sample], batch_size: int = 16) -> float:
    """L_rec of the generator on a fixed probe: every sample with every AU erased.

    Unlike per-step values, which depend on which AU the step happened to
    erase, this is a deterministic function of the weights.
    """
    model.eval()
    spec, hp = model.spec, model.hp
    dtype = next(model.parameters()).dtype
    cropped = [augment(x, None, hp.input_size, train=False) for x in samples]
    masked = [apply_roi_mask(x, spec, None, au_index=i) for x in cropped for i in range(spec.N)]
    total, count = 0.0, 0
    for start in range(0, len(masked), batch_size):
        batch = collate(masked[start:start + batch_size], spec,
                        flow_size=model.flow_size).to(dtype=dtype)
        _, att, _ = model.features(batch.images, batch.centers)
        rows = torch.arange(len(batch.images))
        au = batch.mask_au
        x = torch.stack([att.tokens[rows, 2 * au], att.tokens[rows, 2 * au + 1]], 1).flatten(0, 1)
        fake = model.roii.generator(x)
        l_rec = reconstruction_loss(batch.patches.flatten(0, 1), fake, hp.pixel_reduction)
        total += float(l_rec) * len(rows)
        count += len(rows)
    return total / count


def evaluate(model: RTATLNet, samples: Sequence[Sample], fold_index: int = 0,
             train_subjects=(), test_subjects=()) -> FoldResult:
    labels = np.stack([x.labels for x in samples])
    preds = binarize(predict_probs(model, samples), 0.5)
    per_au, avg = f1_scores(preds, labels)
    return FoldResult(per_au_f1=per_au, avg_f1=avg, fold_index=fold_index,
                      train_subjects=list(train_subjects), test_subjects=list(test_subjects))


class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path)
        self._fh = self.path.open("w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(METRIC_COLUMNS)

    def write(self, report: LossReport) -> None:
        row = asdict(report)
        self._writer.writerow([row[c] if c == "step" else f"{row[c]:.6g}" for c in METRIC_COLUMNS])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


@dataclass
class FitResult:
    reports: list[LossReport]
    evals: list[tuple[int, float]]
    best_f1: float
    stopped_early: bool


def fit(trainer: Trainer, labeled: Sequence[Sample], unlabeled: Sequence[Sample] = (),
        steps: int = 1000, val_samples: Sequence[Sample] = (), eval_every: int = 50,
        patience: Optional[int] = None, stop_at_f1: Optional[float] = None,
        metrics_path=None, checkpoint_fn=None, on_step=None) -> FitResult:
    """Run ``steps`` joint updates with equal-size labeled and unlabeled sub-batches.

    Validation avg F1 is checked every ``eval_every`` steps; training stops
    after ``patience`` checks without improvement or once ``stop_at_f1`` is hit.
    ``on_step(trainer, report)`` runs after every update.
    """
    hp, spec = trainer.hp, trainer.spec
    bs = min(hp.batch_size, len(labeled))
    mirror = spec.layout["mirror"]
    lab_stream = sample_stream(labeled, bs, trainer.rng, hp.input_size, mirror)
    unl_stream = (sample_stream(unlabeled, bs, trainer.rng, hp.input_size, mirror)
                  if unlabeled else None)
    writer = MetricsWriter(metrics_path) if metrics_path else None
    reports, evals = [], []
    best, stale, stopped = -math.inf, 0, False
    try:
        for step in range(1, steps + 1):
            report = trainer.train_step(next(lab_stream), next(unl_stream) if unl_stream else ())
            reports.append(report)
            if writer:
                writer.write(report)
            if on_step:
                on_step(trainer, report)
            if val_samples and (step % eval_every == 0 or step == steps):
                f1 = evaluate(trainer.model, val_samples).avg_f1
                evals.append((step, f1))
                log.info("step %d  total %.4f  val avg F1 %.4f", step, report.total, f1)
                if f1 > best:
                    best, stale = f1, 0
                    if checkpoint_fn:
                        checkpoint_fn(trainer.model, step)
                else:
                    stale += 1
                if stop_at_f1 is not None and f1 >= stop_at_f1:
                    stopped = True
                    break
                if patience is not None and stale >= patience:
                    stopped = True
                    break
    finally:
        if writer:
            writer.close()
    return FitResult(reports=reports, evals=evals, best_f1=best, stopped_early=stopped)

"""Source pretraining and clustering/refinement adaptation loops."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .aulm import EraseConfig, adaptive_erase, informative_points, random_points
from .datagen import SampleRecord, TargetView, sample_pk_indices, to_chw
from .ema import TeacherState, ema_update, init_teacher
from .evaluation import RetrievalResult, evaluate
from .losses import (
    LossWeights,
    NonFiniteLossError,
    base_losses,
    correctness_mask,
    exploitation_loss,
    mimic_loss,
    relation_matrix,
    structure_distillation_loss,
    total_loss,
)
from .model import ReIDNet, embed_images
from .pseudo import PseudoLabeling, cluster_targets

log = logging.getLogger(__name__)

STEP_COLUMNS = ("step", "l_id", "l_sid", "l_tri", "l_stri", "l_mim", "l_exp", "l_sd", "total")
PRETRAIN_COLUMNS = ("epoch", "lr", "l_id", "l_tri", "total", "train_top1")
ADAPT_COLUMNS = (
    "epoch", "l_id", "l_sid", "l_tri", "l_stri", "l_mim", "l_exp", "l_sd", "total",
    "student_mAP", "student_top1", "student_top5", "student_top10",
    "teacher_mAP", "teacher_top1", "teacher_top5", "teacher_top10",
    "inertia", "teacher_correct",
)  # fmt: skip


@dataclass(frozen=True)
class TrainConfig:
    epochs_pretrain: int = 12
    epochs_adapt: int = 16
    steps_per_epoch: int = 40
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    lr_schedule: tuple[tuple[int, float], ...] = ((8, 0.1),)
    P: int = 8
    K: int = 4
    M_t: int = 32
    loss_weights: LossWeights = field(default_factory=LossWeights)
    erase: EraseConfig = field(default_factory=EraseConfig)
    momentum_ema: float = 0.99
    seed: int = 0
    triplet_margin: float = 0.3
    exp_clamp: float | None = 4.0
    erase_points: str = "cam"  # "cam" (adaptive) or "random"
    kmeans_max_iter: int = 100
    widths: tuple[int, ...] = (16, 32, 64, 64)

    def __post_init__(self):
        for name in ("epochs_pretrain", "epochs_adapt"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive")
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0:
            raise ValueError("learning_rate must be finite and >= 0")
        if not math.isfinite(self.weight_decay) or self.weight_decay < 0:
            raise ValueError("weight_decay must be finite and >= 0")
        epochs = [e for e, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("lr_schedule epochs must be strictly increasing")
        if any(not math.isfinite(m) or m < 0 for _, m in self.lr_schedule):
            raise ValueError("lr_schedule multipliers must be finite and >= 0")
        if self.P < 2 or self.K < 2:
            raise ValueError("P and K must be >= 2")
        if self.M_t < self.P:
            raise ValueError(f"M_t must be >= P so pseudo-label PK batches exist, got M_t={self.M_t}, P={self.P}")
        if not 0.0 <= self.momentum_ema <= 1.0:
            raise ValueError("momentum_ema must lie in [0, 1]")
        if self.erase_points not in ("cam", "random"):
            raise ValueError("erase_points must be 'cam' or 'random'")

    def lr_at(self, epoch: int) -> float:
        mult = 1.0
        for start, m in self.lr_schedule:
            if epoch >= start:
                mult = m
        return self.learning_rate * mult


class _Streams:
    """Independent random streams derived from the single configured seed."""

    def __init__(self, seed: int):
        ss = np.random.SeedSequence(seed)
        init, pre_batch, ad_batch, erase, points, cluster = ss.spawn(6)
        self.torch_seed = int(init.generate_state(1)[0])
        self.pretrain_batches = np.random.default_rng(pre_batch)
        self.adapt_batches = np.random.default_rng(ad_batch)
        self.erase = np.random.default_rng(erase)
        self.points = np.random.default_rng(points)
        self.cluster = np.random.default_rng(cluster)


@dataclass
class MetricsLog:
    columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append({c: row.get(c, float("nan")) for c in self.columns})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.columns])
        return path


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _records_arrays(records: Sequence[SampleRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = to_chw(np.stack([r.image for r in records]))
    labels = np.array([r.identity for r in records], dtype=np.int64)
    cams = np.array([r.nuisance_id for r in records], dtype=np.int64)
    return images, labels, cams


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def _check_finite(terms: dict, step: int) -> None:
    for name, v in terms.items():
        if not math.isfinite(float(v.detach())):
            raise NonFiniteLossError(name, step)


def classification_accuracy(model: ReIDNet, images: np.ndarray, labels: np.ndarray) -> float:
    logits = embed_images(model, images).logits
    return float((logits.argmax(1).numpy() == labels).mean())


def pretrain_source(
    source: Sequence[SampleRecord],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> tuple[ReIDNet, MetricsLog]:
    """Supervised training on labelled source data with identity CE + batch-hard
    triplet, Adam with step-decayed learning rate."""
    torch.use_deterministic_algorithms(True)
    streams = _Streams(cfg.seed)
    images, labels, _ = _records_arrays(source)
    classes = np.unique(labels)
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[c] for c in labels], dtype=np.int64)

    torch.manual_seed(streams.torch_seed)
    model = ReIDNet(len(classes), input_size=images.shape[2:], widths=cfg.widths)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    metrics = MetricsLog(PRETRAIN_COLUMNS)
    step = 0
    for epoch in range(cfg.epochs_pretrain):
        lr = cfg.lr_at(epoch)
        _set_lr(opt, lr)
        model.train()
        sums = {"l_id": 0.0, "l_tri": 0.0, "total": 0.0}
        for _ in range(cfg.steps_per_epoch):
            idx = sample_pk_indices(y, cfg.P, cfg.K, streams.pretrain_batches)
            x = torch.from_numpy(images[idx])
            t = torch.from_numpy(y[idx])
            bundle = model(x)
            base = base_losses(bundle, None, t, cfg.triplet_margin)
            loss = base.l_id + base.l_tri
            _check_finite({"l_id": base.l_id, "l_tri": base.l_tri}, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["l_id"] += float(base.l_id.detach())
            sums["l_tri"] += float(base.l_tri.detach())
            sums["total"] += float(loss.detach())
            step += 1
        row = {k: v / cfg.steps_per_epoch for k, v in sums.items()}
        row.update(epoch=epoch + 1, lr=lr, train_top1=classification_accuracy(model, images, y))
        metrics.append(row)
        log.info("pretrain epoch %d: %s", epoch + 1, row)
    model.eval()
    if out_dir is not None:
        from .model import save_checkpoint

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / "pretrain", step=step, role="student")
        metrics.to_csv(out_dir / "pretrain_metrics.csv")
    return model, metrics


def evaluate_model(model: ReIDNet, target: TargetView, images: np.ndarray | None = None) -> RetrievalResult:
    images = to_chw(target.images) if images is None else images
    emb = embed_images(model, images).embedding.double().numpy()
    return evaluate(emb, target.reveal_identities("evaluation"), target.nuisance_ids)


def _eval_row(prefix: str, res: RetrievalResult) -> dict:
    return {
        f"{prefix}_mAP": res.mAP,
        f"{prefix}_top1": res.top(1),
        f"{prefix}_top5": res.top(5),
        f"{prefix}_top10": res.top(10),
    }


@dataclass
class BestCheckpoint:
    role: str
    epoch: int
    mAP: float
    state: dict


@dataclass
class AdaptResult:
    student: ReIDNet
    teacher: TeacherState
    log: MetricsLog
    steps: MetricsLog
    best: BestCheckpoint
    labelings: list[PseudoLabeling]

    @property
    def final(self) -> dict:
        return self.log.rows[-1]


def _centroid_head(labeling: PseudoLabeling, dtype: torch.dtype) -> torch.Tensor:
    c = torch.from_numpy(labeling.centroids).to(dtype)
    return F.normalize(c, dim=1)


def adapt(
    student: ReIDNet,
    target: TargetView,
    cfg: TrainConfig,
    step_log: bool = True,
) -> AdaptResult:
    """Alternate teacher-feature clustering and HLI refinement for
    ``cfg.epochs_adapt`` epochs.  Row 0 of the log evaluates the input model."""
    torch.use_deterministic_algorithms(True)
    streams = _Streams(cfg.seed)
    torch.manual_seed(streams.torch_seed)
    student = copy.deepcopy(student)
    images = to_chw(target.images)
    mean = images.mean(axis=(0, 2, 3))
    n_images = images.shape[0]
    teacher = init_teacher(student, cfg.momentum_ema)
    weights = cfg.loss_weights

    metrics = MetricsLog(ADAPT_COLUMNS)
    steps = MetricsLog(STEP_COLUMNS)
    res_s = evaluate_model(student, target, images)
    row = {"epoch": 0, **_eval_row("student", res_s), **_eval_row("teacher", res_s)}
    metrics.append(row)
    best = BestCheckpoint("student", 0, res_s.mAP, copy.deepcopy(student.state_dict()))
    labelings: list[PseudoLabeling] = []

    opt = None
    step = 0
    for epoch in range(1, cfg.epochs_adapt + 1):
        feats = embed_images(teacher.model, images).embedding.double().numpy()
        seed = int(streams.cluster.integers(2**31))
        labeling = cluster_targets(feats, cfg.M_t, seed, cfg.kmeans_max_iter, epoch=epoch)
        labelings.append(labeling)
        target.set_pseudo_labels(labeling.assignments)
        pseudo = target.pseudo_labels

        # cluster indices are not stable across re-clustering; both heads restart from centroids
        head = _centroid_head(labeling, next(student.parameters()).dtype)
        student.reset_classifier(cfg.M_t, head)
        teacher.model.reset_classifier(cfg.M_t, head)
        for p in teacher.model.parameters():
            p.requires_grad_(False)
        opt = torch.optim.Adam(student.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

        if cfg.erase_points == "cam":
            points = informative_points(student, images, pseudo)
        else:
            h, w = student.input_size
            points = random_points(n_images, h, w, streams.points)

        sums = dict.fromkeys(STEP_COLUMNS[1:], 0.0)
        correct = 0
        student.train()
        teacher.model.eval()
        for _ in range(cfg.steps_per_epoch):
            idx = sample_pk_indices(pseudo, cfg.P, cfg.K, streams.adapt_batches)
            clean = images[idx]
            erased, _ = adaptive_erase(clean, points[idx], cfg.erase, streams.erase, mean)
            labels = torch.from_numpy(pseudo[idx])
            with target.gradient_step():
                bs = student(torch.from_numpy(erased))
                with torch.no_grad():
                    bt = teacher.model(torch.from_numpy(clean))
                mask = correctness_mask(bt.logits, labels)
                base = base_losses(bs, bt, labels, cfg.triplet_margin)
                es, et = F.normalize(bs.embedding, dim=1), F.normalize(bt.embedding, dim=1)
                terms = {
                    "l_id": base.l_id,
                    "l_sid": base.l_sid,
                    "l_tri": base.l_tri,
                    "l_stri": base.l_stri,
                    "l_mim": mimic_loss(es, et, mask),
                    "l_exp": exploitation_loss(es, et, mask, labels, cfg.exp_clamp),
                    "l_sd": structure_distillation_loss(relation_matrix(bs.embedding), relation_matrix(bt.embedding)),
                }
                loss = total_loss(terms, weights, step)
                opt.zero_grad()
                loss.backward()
                opt.step()
            ema_update(teacher, student)
            step += 1
            correct += int(mask.sum())
            values = {k: float(v.detach()) for k, v in terms.items()}
            values["total"] = float(loss.detach())
            for k, v in values.items():
                sums[k] += v
            if step_log:
                steps.append({"step": step, **values})

        res_s = evaluate_model(student, target, images)
        res_t = evaluate_model(teacher.model, target, images)
        row = {k: v / cfg.steps_per_epoch for k, v in sums.items()}
        row.update(
            epoch=epoch,
            inertia=labeling.inertia,
            teacher_correct=correct / (cfg.steps_per_epoch * cfg.P * cfg.K),
            **_eval_row("student", res_s),
            **_eval_row("teacher", res_t),
        )
        metrics.append(row)
        log.info("adapt epoch %d: student mAP %.4f teacher mAP %.4f", epoch, res_s.mAP, res_t.mAP)
        for role, res, model in (("student", res_s, student), ("teacher", res_t, teacher.model)):
            if res.mAP > best.mAP:
                best = BestCheckpoint(role, epoch, res.mAP, copy.deepcopy(model.state_dict()))

    student.eval()
    return AdaptResult(student, teacher, metrics, steps, best, labelings)

"""Teacher pre-training and student training with cross-level distillation.

The student's block ``l`` is projected and pulled towards the united tap of
block ``l+1``: a convex mix of the frozen teacher's tap and the tap of an
old student, a copy of the student from ``tau`` iterations earlier. The mix
weight ``alpha = i / T`` moves the target from teacher to old student over
training. The last student block only sees the self-supervised loss.
"""
from __future__ import annotations

import collections
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .augment import AugmentPolicy, augment_batch
from .errors import ConfigError, ContractError, DataError, DivergenceError, ShapeError
from .model import (
    Backbone,
    BackboneConfig,
    Linear,
    ParamSnapshot,
    Predictor,
    ProjectionHead,
    Projector,
    build_backbone,
    build_projector,
    clone_backbone,
    load_snapshot,
    snapshot_params,
)
from .numerics import nn as F
from .numerics import ops
from .numerics.optim import SGD, step_lr
from .numerics.rng import child_seed, stream
from .numerics.tensor import Tensor, backward, no_grad
from .selfsup import byol_loss, byol_target_update, simclr_loss

logger = logging.getLogger(__name__)

TOPOLOGIES = ("cross_level", "same_level", "one_to_all", "single_block", "final_level", "none")
_SINGLE = re.compile(r"^single_block\((\d+)\)$")


@dataclass
class DistillConfig:
    lam: float = 2.0
    tau: Optional[int] = 1
    epochs: int = 300
    batch_size: int = 32
    topology: str = "cross_level"
    ss_kind: str = "simclr"
    temperature: float = 0.1
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_milestones: Optional[Tuple[int, ...]] = None
    lr_factor: float = 0.1
    kd_reduction: str = "mean"
    byol_momentum: float = 0.99
    byol_reduction: str = "mean"
    head_hidden: int = 128
    head_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.tau is not None and self.tau < 0:
            raise ConfigError("tau must be a nonnegative integer or None")
        if self.ss_kind not in ("simclr", "byol"):
            raise ConfigError(f"unknown self-supervised loss {self.ss_kind!r}")
        if self.kd_reduction not in ("sum", "mean"):
            raise ConfigError(f"unknown kd reduction {self.kd_reduction!r}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("need epochs >= 1 and batch_size >= 2")
        parse_topology(self.topology)
        if self.lr_milestones is not None:
            self.lr_milestones = tuple(int(m) for m in self.lr_milestones)

    def milestones(self) -> Tuple[int, ...]:
        """Epoch milestones; by default the 300/500-of-600 proportions."""
        if self.lr_milestones is not None:
            return self.lr_milestones
        return _default_milestones(self.epochs)

    def total_iterations(self, n_images: int) -> int:
        return self.epochs * math.ceil(n_images / self.batch_size)

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = list(self.milestones())
        return d


def _default_milestones(epochs: int) -> Tuple[int, ...]:
    """Decay points at 1/2 and 5/6 of training, deduplicated for short runs."""
    return tuple(sorted({m for m in (epochs // 2, (epochs * 5) // 6) if m > 0}))


# --- schedule, fusion, topology ---------------------------------------------------


def alpha_schedule(i: int, total: int) -> float:
    if total <= 0 or i < 0 or i > total:
        raise ContractError(f"alpha_schedule needs 0 <= i <= T, got i={i}, T={total}")
    return i / total


def fuse_features(o_tap, t_tap, alpha: float) -> Tensor:
    """United tap ``alpha * o + (1 - alpha) * t``, detached from both sources."""
    o = o_tap.data if isinstance(o_tap, Tensor) else np.asarray(o_tap)
    t = t_tap.data if isinstance(t_tap, Tensor) else np.asarray(t_tap)
    if o.shape != t.shape:
        raise ShapeError(f"cannot fuse taps of shapes {o.shape} and {t.shape}")
    dt = t.dtype.type
    return Tensor(dt(alpha) * o + dt(1.0 - alpha) * t)


def parse_topology(topology: str) -> Tuple[str, Optional[int]]:
    m = _SINGLE.match(topology)
    if m:
        return "single_block", int(m.group(1))
    if topology not in TOPOLOGIES or topology == "single_block":
        raise ConfigError(f"unknown topology {topology!r}")
    return topology, None


def topology_pairs(topology: str, L: int) -> List[Tuple[int, int]]:
    """``(teacher_block, student_block)`` KD pairs, 1-based.

    ``final_level`` maps the teacher's last block onto the student's last
    block; it exists only as the last-layer distillation baseline for the
    FD-position ablation. ``none`` disables distillation.
    """
    kind, idx = parse_topology(topology)
    if kind == "none":
        return []
    if kind == "final_level":
        return [(L, L)]
    if L < 2:
        raise ConfigError("cross-block distillation needs at least two blocks")
    if kind == "cross_level":
        return [(l + 1, l) for l in range(1, L)]
    if kind == "same_level":
        return [(l, l) for l in range(1, L)]
    if kind == "one_to_all":
        return [(L, l) for l in range(1, L)]
    if not 1 <= idx <= L - 1:
        raise ConfigError(f"single_block index must lie in [1, {L - 1}], got {idx}")
    return [(idx + 1, idx)]


def kd_loss(
    student_taps: Sequence[Tensor],
    united_taps: Sequence,
    projectors: Mapping[Tuple[int, int], Callable],
    pairs: Sequence[Tuple[int, int]],
    reduction: str = "sum",
) -> Tensor:
    """``sum over pairs of ||proj(s_l) - u_t||^2``.

    Taps are indexed by 0-based block position; pairs are 1-based. United taps
    are detached. ``reduction="mean"`` divides each pair's distance by its
    element count.
    """
    total = None
    for t, s in pairs:
        proj = projectors.get((t, s))
        if proj is None:
            raise ConfigError(f"no projector for teacher block {t} -> student block {s}")
        target = united_taps[t - 1]
        target = Tensor(target.data if isinstance(target, Tensor) else target)
        pred = proj(student_taps[s - 1])
        term = F.l2_sq(pred, target)
        if reduction == "mean":
            term = ops.mul(term, 1.0 / target.size)
        total = term if total is None else ops.add(total, term)
    if total is None:
        return Tensor(0.0)
    return total


def total_loss(l_ss: Tensor, l_dis: Optional[Tensor], lam: float) -> Tensor:
    if l_dis is None:
        return l_ss
    return ops.add(l_ss, ops.mul(l_dis, float(lam)))


# --- old-student ring -------------------------------------------------------------


class SnapshotRing:
    """The last ``tau`` student snapshots, oldest first."""

    def __init__(self, tau: int):
        self.tau = int(tau)
        self.queue: "collections.deque[ParamSnapshot]" = collections.deque()

    def __len__(self):
        return len(self.queue)

    def push_and_fetch(self, snap: ParamSnapshot, i: int) -> Optional[ParamSnapshot]:
        """Store the snapshot taken at iteration ``i``; return the one from ``i - tau``.

        Returns ``None`` while ``i <= tau``. With ``tau = 0`` the snapshot just
        pushed (this iteration's pre-update student) is returned.
        """
        if self.tau == 0:
            return snap
        out = None
        if i > self.tau:
            out = self.queue.popleft()
            if out.iteration != i - self.tau:
                raise ContractError(f"ring out of step: front is {out.iteration}, wanted {i - self.tau}")
        self.queue.append(snap)
        return out


def ring_push_and_fetch(ring: SnapshotRing, snap: ParamSnapshot, i: int) -> Optional[ParamSnapshot]:
    return ring.push_and_fetch(snap, i)


# --- phase 1: teacher --------------------------------------------------------------


@dataclass
class PretrainConfig:
    mode: str = "supervised"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_milestones: Optional[Tuple[int, ...]] = None
    lr_factor: float = 0.1
    augment: bool = True
    # None: color ops on for selfsup, off for supervised (labels may hinge on color)
    color_augment: Optional[bool] = None
    temperature: float = 0.1
    seed: int = 0

    def milestones(self):
        if self.lr_milestones is not None:
            return tuple(self.lr_milestones)
        return _default_milestones(self.epochs)

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = list(self.milestones())
        return d


@dataclass
class TeacherResult:
    backbone: Backbone
    classifier: Optional[Linear]
    trace: List[dict] = field(default_factory=list)


def pretrain_teacher(base, backbone_config: BackboneConfig, config: PretrainConfig, policy: AugmentPolicy = None) -> TeacherResult:
    """Train the teacher on the base domain, with labels or self-supervised."""
    if config.mode not in ("supervised", "selfsup"):
        raise ConfigError(f"unknown pretraining mode {config.mode!r}")
    images = base.images
    if len(images) == 0:
        raise DataError("pretraining dataset is empty")
    if config.mode == "supervised" and base.class_count < 2:
        raise ConfigError("supervised pretraining needs at least two classes")
    policy = policy or AugmentPolicy()
    color = config.color_augment if config.color_augment is not None else config.mode == "selfsup"
    if not color:
        policy = policy.geometric()
    seed = config.seed
    net = build_backbone(backbone_config, child_seed(seed, "teacher"))
    if config.mode == "supervised":
        head = Linear(backbone_config.feature_dim, base.class_count, stream(seed, "init", "teacher.classifier"))
    else:
        head = ProjectionHead(backbone_config.feature_dim, seed=child_seed(seed, "teacher.head"))
    opt = SGD(net.params() + head.params(), config.lr, config.momentum, config.weight_decay)

    n = len(images)
    trace = []
    for epoch in range(config.epochs):
        opt.lr = step_lr(epoch, config.lr, config.milestones(), config.lr_factor)
        perm = stream(seed, "pretrain.batches", epoch).permutation(n)
        correct, seen, loss_sum = 0, 0, 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            tag = ("pretrain", epoch, start)
            if config.mode == "supervised":
                x = augment_batch(images[idx], policy, seed, tag, views=1)[0] if config.augment else images[idx]
                logits = head(net(Tensor(x)))
                loss = F.softmax_cross_entropy(logits, base.labels[idx])
                correct += int((logits.data.argmax(axis=1) == base.labels[idx]).sum())
            else:
                v = augment_batch(images[idx], policy, seed, tag, views=2)
                z = head(net(ops.stack_interleave(Tensor(v[0]), Tensor(v[1]))))
                loss = simclr_loss(z, config.temperature)
            if not np.isfinite(loss.data):
                raise DivergenceError("teacher loss became non-finite", {"epoch": epoch, "start": start})
            opt.zero_grad()
            backward(loss)
            opt.step()
            seen += len(idx)
            loss_sum += float(loss.data) * len(idx)
        rec = {"epoch": epoch, "loss": loss_sum / max(seen, 1), "lr": opt.lr}
        if config.mode == "supervised":
            rec["train_accuracy"] = correct / max(seen, 1)
        trace.append(rec)
        logger.info("teacher epoch %d %s", epoch, rec)
    net.requires_grad_(False)
    head.requires_grad_(False)
    return TeacherResult(net, head if config.mode == "supervised" else None, trace)


# --- phase 2: student ----------------------------------------------------------------


@dataclass
class StudentResult:
    student: Backbone
    history: List[dict]
    projectors: Dict[Tuple[int, int], Projector]
    head: ProjectionHead
    config: DistillConfig


def _snapshot_iter(net, i):
    return snapshot_params(net, iteration=i)


def train_student(
    teacher: Optional[Backbone],
    unlabeled: np.ndarray,
    config: DistillConfig,
    policy: AugmentPolicy = None,
    backbone_config: Optional[BackboneConfig] = None,
    probe: Optional[Callable[[dict], None]] = None,
) -> StudentResult:
    """Train a fresh student on unlabeled target images.

    Each iteration draws a batch, makes views ``x1, x2, x3``, feeds
    ``x1, x2`` to the student for the self-supervised loss, matches the
    student's ``x1`` taps against united taps (teacher on ``x1``, old student
    on ``x3``), and takes one SGD step on ``L_ss + lam * L_dis``.

    ``probe``, when given, is called every iteration with a dict of the
    iteration's internals (taps, targets, snapshots) for inspection.
    """
    policy = policy or AugmentPolicy()
    pairs = topology_pairs(config.topology, (backbone_config or teacher.config).block_count)
    if pairs and teacher is None:
        raise ConfigError("distillation needs a teacher")
    bcfg = backbone_config or teacher.config
    if teacher is not None and teacher.config.tap_shapes() != bcfg.tap_shapes():
        raise ConfigError("teacher and student must share one backbone configuration")
    n = len(unlabeled)
    if n < 2:
        raise DataError("need at least two unlabeled images")
    seed = config.seed
    steps_per_epoch = math.ceil(n / config.batch_size)
    T = config.epochs * steps_per_epoch
    if config.tau is not None and config.tau >= T:
        raise ConfigError(f"tau={config.tau} must be smaller than the {T} training iterations")

    student = build_backbone(bcfg, child_seed(seed, "student"))
    head = ProjectionHead(bcfg.feature_dim, config.head_hidden, config.head_dim, seed=child_seed(seed, "head"))
    shapes = bcfg.tap_shapes()
    projectors = {
        (t, s): build_projector(shapes[s - 1], shapes[t - 1], child_seed(seed, "projector"), name=f"proj.{t}.{s}")
        for t, s in pairs
    }
    params = student.params() + head.params()
    for key in sorted(projectors):
        params += projectors[key].params()

    predictor = target_net = target_head = None
    if config.ss_kind == "byol":
        predictor = Predictor(config.head_dim, seed=child_seed(seed, "predictor"))
        params += predictor.params()
        target_net = clone_backbone(student).requires_grad_(False)
        target_head = ProjectionHead(bcfg.feature_dim, config.head_hidden, config.head_dim, seed=child_seed(seed, "head"))
        target_head.requires_grad_(False)

    opt = SGD(params, config.lr, config.momentum, config.weight_decay)
    use_old = bool(pairs) and config.tau is not None
    ring = SnapshotRing(config.tau) if use_old else None
    old_net = Backbone(bcfg, 0) if use_old else None
    if old_net is not None:
        old_net.requires_grad_(False)
    if teacher is not None:
        teacher.requires_grad_(False)

    history = []
    milestones = config.milestones()
    for i in range(1, T + 1):
        epoch = (i - 1) // steps_per_epoch
        k = (i - 1) % steps_per_epoch
        opt.lr = step_lr(epoch, config.lr, milestones, config.lr_factor)
        alpha = alpha_schedule(i, T)
        perm = stream(seed, "student.batches", epoch).permutation(n)
        idx = perm[k * config.batch_size : (k + 1) * config.batch_size]
        views = augment_batch(unlabeled[idx], policy, seed, ("student", i))
        x1, x2, x3 = Tensor(views[0]), Tensor(views[1]), Tensor(views[2])

        old_snap = None
        if use_old:
            current = _snapshot_iter(student, i)
            old_snap = ring.push_and_fetch(current, i)

        feats = student.forward_with_taps(ops.stack_interleave(x1, x2), "train")
        z = head(feats.final_vec)
        if config.ss_kind == "simclr":
            l_ss = simclr_loss(z, config.temperature)
        else:
            p = predictor(z)
            with no_grad():
                zt = target_head(target_net(ops.stack_interleave(x1, x2), "train"))
            swap = np.arange(len(zt.data)) ^ 1
            l_ss = byol_loss(p, zt.data[swap], reduction=config.byol_reduction)

        l_dis = None
        record = {}
        if pairs:
            s_taps = [ops.getitem(tap, slice(0, None, 2)) for tap in feats.taps]
            with no_grad():
                t_taps = teacher.forward_with_taps(x1, "eval").taps
                o_taps = None
                if old_snap is not None:
                    load_snapshot(old_net, old_snap)
                    o_taps = old_net.forward_with_taps(x3, "train", update_stats=False).taps
            united = list(t_taps) if o_taps is None else [fuse_features(o, t, alpha) for o, t in zip(o_taps, t_taps)]
            l_dis = kd_loss(s_taps, united, projectors, pairs, config.kd_reduction)
            if probe is not None:
                record = {"teacher_taps": t_taps, "old_taps": o_taps, "targets": united, "old_snapshot": old_snap}

        loss = total_loss(l_ss, l_dis, config.lam)
        entry = {
            "iteration": i,
            "alpha": alpha,
            "l_ss": float(l_ss.data),
            "l_dis": float(l_dis.data) if l_dis is not None else 0.0,
            "total": float(loss.data),
            "lr": opt.lr,
        }
        if not np.isfinite(entry["total"]):
            raise DivergenceError(f"non-finite loss at iteration {i}", entry)
        if probe is not None:
            record.update(entry)
            record["student_snapshot"] = current if use_old else _snapshot_iter(student, i)
            probe(record)

        opt.zero_grad()
        backward(loss)
        opt.step()
        if target_net is not None:
            byol_target_update(target_net, student, config.byol_momentum)
            byol_target_update(target_head, head, config.byol_momentum)
        history.append(entry)
        if i % 50 == 0 or i == T:
            logger.info("student it %d/%d l_ss=%.4f l_dis=%.4f", i, T, entry["l_ss"], entry["l_dis"])

    return StudentResult(student, history, projectors, head, config)


HISTORY_COLUMNS = ("iteration", "alpha", "l_ss", "l_dis", "total", "lr")


def write_history(path, history: Sequence[dict], topology: Optional[str] = None) -> None:
    cols = HISTORY_COLUMNS + (("topology",) if topology is not None else ())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in history:
            vals = [str(row["iteration"])] + [f"{row[c]:.6g}" for c in HISTORY_COLUMNS[1:]]
            if topology is not None:
                vals.append(topology)
            fh.write(",".join(vals) + "\n")

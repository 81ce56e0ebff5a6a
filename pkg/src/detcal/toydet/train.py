"""Training loop, task loss, inference and evaluation for the toy detector."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .. import autodiff as ad
from ..core import Detection, NormBox, match_detections
from ..losses import PositiveLocation, mccl_aux
from ..metrics import BinGrid, compute_dece
from .data import SyntheticScene, Targets, assign_positives
from .model import ToyDetector, backward, mc_forward

log = logging.getLogger(__name__)

MODES = ("baseline", "mccl")
LOG_COLUMNS = ("epoch", "task_loss", "l_mcc", "l_lc", "dece", "ap50", "dece_shift", "ap50_shift")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 0.05
    momentum: float = 0.0
    beta: float = 1.0
    mc_passes: int = 5
    dropout: float = 0.1
    seed: int = 0
    mode: str = "baseline"
    lambda_reg: float = 1.0
    hidden: int = 64
    score_threshold: float = 0.05
    iou_threshold: float = 0.5
    aux_weight: float = 1.0     # 0 keeps the MC-mean task loss but drops the auxiliary loss

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "mccl" and self.mc_passes < 2:
            raise ValueError("mccl mode needs at least two MC passes")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.beta < 0 or self.aux_weight < 0:
            raise ValueError("beta and aux_weight must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# -- losses ---------------------------------------------------------------

def shifted_mean(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Mean along ``axis``; exactly the common value when all slices agree."""
    first = np.take(x, [0], axis=axis)
    return np.squeeze(first, axis) + (x - first).sum(axis=axis) / x.shape[axis]


def iou_with_grad(boxes: np.ndarray, gts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise IoU of (cx, cy, w, h) boxes and its gradient w.r.t. ``boxes``."""
    cx, cy, w, h = boxes.T
    gcx, gcy, gw, gh = gts.T
    ax1, ax2, ay1, ay2 = cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2
    bx1, bx2, by1, by2 = gcx - gw / 2, gcx + gw / 2, gcy - gh / 2, gcy + gh / 2
    iw = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    ih = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    iwp, ihp = np.maximum(iw, 0.0), np.maximum(ih, 0.0)
    inter = iwp * ihp
    union = w * h + gw * gh - inter
    iou = inter / union

    # d iw / d(cx, w) via whichever edge is active
    right = (ax2 < bx2).astype(float)
    left = (ax1 > bx1).astype(float)
    top = (ay1 > by1).astype(float)
    bottom = (ay2 < by2).astype(float)
    diw_dcx, diw_dw = right - left, 0.5 * (right + left)
    dih_dcy, dih_dh = bottom - top, 0.5 * (bottom + top)
    d_inter_diw = (iw > 0) * ihp
    d_inter_dih = (ih > 0) * iwp
    d_inter = np.stack([d_inter_diw * diw_dcx, d_inter_dih * dih_dcy,
                        d_inter_diw * diw_dw, d_inter_dih * dih_dh], axis=1)
    d_area = np.stack([np.zeros_like(w), np.zeros_like(w), h, w], axis=1)
    grad = (d_inter * (1.0 + iou)[:, None] - iou[:, None] * d_area) / union[:, None]
    return iou, grad


def task_loss(logits: np.ndarray, boxes: np.ndarray, targets: Targets, lambda_reg: float = 1.0):
    """Cross-entropy over all cells plus lambda * (1 - IoU) over positives,
    both normalized by the number of positive cells (at least one).

    Returns (loss, d loss / d logits, d loss / d boxes).
    """
    n = logits.shape[0]
    pos = np.flatnonzero(targets.positive)
    norm_pos = max(pos.size, 1)
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    norm = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(norm)
    idx = np.arange(n)
    ce = -logp[idx, targets.labels].sum() / norm_pos
    g_logits = ez / norm
    g_logits[idx, targets.labels] -= 1.0
    g_logits /= norm_pos

    g_boxes = np.zeros_like(boxes)
    reg = 0.0
    if pos.size:
        iou, g_iou = iou_with_grad(boxes[pos], targets.boxes[pos])
        reg = float(np.sum(1.0 - iou)) / norm_pos
        g_boxes[pos] = -lambda_reg * g_iou / norm_pos
    return float(ce + lambda_reg * reg), g_logits, g_boxes


# -- training -------------------------------------------------------------

@dataclass
class StepResult:
    task_loss: float
    l_mcc: Optional[float]
    l_lc: Optional[float]
    grads: dict


def train_step(model: ToyDetector, scenes: Sequence[SyntheticScene], targets: Sequence[Targets],
               config: TrainConfig, rng: np.random.Generator) -> StepResult:
    """Gradients of the minibatch objective.

    baseline: mean task loss of a single dropout pass per scene.
    mccl: mean task loss on MC-mean logits/boxes, plus the auxiliary loss
    over all positive locations of the minibatch.
    """
    k = model.num_classes
    mccl = config.mode == "mccl"
    n_pass = config.mc_passes if mccl else 1
    n_b = len(scenes)
    tape = ad.Tape() if mccl else None
    states, g_logits, g_boxes = [], [], []
    positives, leaves = [], []
    total_task = 0.0
    for l, (scene, tgt) in enumerate(zip(scenes, targets)):
        st = mc_forward(model, scene, n_pass, rng)
        loss, gl, gb = task_loss(shifted_mean(st.logits), shifted_mean(st.boxes), tgt, config.lambda_reg)
        total_task += loss
        states.append(st)
        g_logits.append(np.broadcast_to(gl / (n_pass * n_b), st.logits.shape).copy())
        g_boxes.append(np.broadcast_to(gb / (n_pass * n_b), st.boxes.shape).copy())
        if mccl:
            for c in np.flatnonzero(tgt.positive):
                z = [[tape.param(v) for v in row] for row in st.logits[:, c, :k].tolist()]
                r = [[tape.param(v) for v in row] for row in st.boxes[:, c, :].tolist()]
                positives.append(PositiveLocation(l, int(c), z, r, int(tgt.labels[c]),
                                                  NormBox(*tgt.boxes[c])))
                leaves.append((l, int(c), z, r))

    l_mcc = l_lc = None
    if mccl and positives:
        out = mccl_aux(positives, config.beta)
        tape.backward(out.total * config.aux_weight)
        l_mcc, l_lc = out.l_mcc.data, out.l_lc.data
        for l, c, z, r in leaves:
            g_logits[l][:, c, :k] += [[v.grad for v in row] for row in z]
            g_boxes[l][:, c, :] += [[v.grad for v in row] for row in r]

    grads = {name: np.zeros_like(v) for name, v in model.params.items()}
    for st, gl, gb in zip(states, g_logits, g_boxes):
        for name, g in backward(model, st, gl, gb).items():
            grads[name] += g
    return StepResult(total_task / n_b, l_mcc, l_lc, grads)


def _check_finite(step: StepResult, epoch: int, it: int):
    vals = [step.task_loss] + [v for v in (step.l_mcc, step.l_lc) if v is not None]
    bad = not all(math.isfinite(v) for v in vals) or not all(np.isfinite(g).all() for g in step.grads.values())
    if bad:
        raise TrainingDiverged(
            f"non-finite loss or gradient at epoch {epoch}, iteration {it}: "
            f"task={step.task_loss}, l_mcc={step.l_mcc}, l_lc={step.l_lc}")


def train(config: TrainConfig, dataset: Sequence[SyntheticScene], val: Sequence[SyntheticScene] = (),
          val_shift: Sequence[SyntheticScene] = (), num_classes: int = 3,
          model: Optional[ToyDetector] = None):
    """Plain minibatch gradient descent.

    Returns the trained model and one log row per epoch; row 0 evaluates the
    initial model.  ``task_loss`` in the log is the deterministic task loss on
    the in-domain validation split (the training set when no split is given).
    """
    model = model.copy() if model is not None else ToyDetector.init(
        num_classes, seed=config.seed, hidden=config.hidden, dropout=config.dropout)
    model.dropout = config.dropout
    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])
    targets = [assign_positives(s, model.num_classes) for s in dataset]
    monitor = list(val) or list(dataset)
    monitor_targets = [assign_positives(s, model.num_classes) for s in monitor]

    def row(epoch, mcc, lc):
        r = {"epoch": epoch, "task_loss": eval_task_loss(model, monitor, monitor_targets, config.lambda_reg),
             "l_mcc": mcc, "l_lc": lc}
        for suffix, split in (("", val), ("_shift", val_shift)):
            ev = evaluate(model, split, config) if len(split) else None
            r["dece" + suffix] = ev["dece"] if ev else None
            r["ap50" + suffix] = ev["ap50"] if ev else None
        return r

    velocity = {name: np.zeros_like(v) for name, v in model.params.items()}
    history = [row(0, None, None)]
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        mccs, lcs = [], []
        for it, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            step = train_step(model, [dataset[i] for i in idx], [targets[i] for i in idx], config, dropout_rng)
            _check_finite(step, epoch, it)
            for name, g in step.grads.items():
                velocity[name] = config.momentum * velocity[name] - config.lr * g
                model.params[name] += velocity[name]
            if step.l_mcc is not None:
                mccs.append(step.l_mcc)
                lcs.append(step.l_lc)
        history.append(row(epoch, float(np.mean(mccs)) if mccs else None,
                           float(np.mean(lcs)) if lcs else None))
        log.info("epoch %d %s", epoch, history[-1])
    return model, history


def eval_task_loss(model: ToyDetector, scenes, targets, lambda_reg: float = 1.0) -> float:
    losses = []
    for scene, tgt in zip(scenes, targets):
        logits, boxes = model.predict(scene)
        losses.append(task_loss(logits, boxes, tgt, lambda_reg)[0])
    return float(np.mean(losses))


# -- inference ------------------------------------------------------------

def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _to_normbox(b) -> NormBox:
    cx, cy = (min(max(float(v), 0.0), 1.0) for v in b[:2])
    w, h = (min(max(float(v), 1e-6), 1.0) for v in b[2:])
    return NormBox(cx, cy, w, h)


def _pairwise_iou(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    """IoU of one (cx, cy, w, h) row against many; same arithmetic as ``core.iou``."""
    a1, a2 = box[:2] - box[2:] / 2, box[:2] + box[2:] / 2
    b1, b2 = others[:, :2] - others[:, 2:] / 2, others[:, :2] + others[:, 2:] / 2
    wh = np.minimum(a2, b2) - np.maximum(a1, b1)
    inter = wh[:, 0] * wh[:, 1]
    union = box[2] * box[3] + others[:, 2] * others[:, 3] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.minimum(1.0, inter / union)
    return np.where((wh[:, 0] > 0.0) & (wh[:, 1] > 0.0), out, 0.0)


def nms(dets: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class suppression of boxes overlapping a higher-scored one."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    keep = np.zeros(len(dets), dtype=bool)
    by_class: dict = {}
    for i in order:
        by_class.setdefault(dets[i].label, []).append(i)
    for idx in by_class.values():
        boxes = np.array([dets[i].box.as_tuple() for i in idx], dtype=float)
        alive = np.ones(len(idx), dtype=bool)
        for j in range(len(idx)):
            if not alive[j]:
                continue
            keep[idx[j]] = True
            rest = alive[j + 1:]
            rest &= _pairwise_iou(boxes[j], boxes[j + 1:]) <= iou_threshold
    return [dets[i] for i in order if keep[i]]


def detections_from_outputs(logits: np.ndarray, boxes: np.ndarray, num_classes: int, image_id,
                            score_threshold: float = 0.05, nms_iou: float = 0.5) -> list[Detection]:
    probs = _softmax(logits)
    labels = np.argmax(probs[:, :num_classes], axis=1)
    scores = probs[np.arange(len(probs)), labels]
    keep = (probs[:, num_classes] < scores) & (scores >= score_threshold)
    out = []
    for c in np.flatnonzero(keep):
        out.append(Detection(image_id, int(labels[c]), float(scores[c]), _to_normbox(boxes[c]),
                             logits=tuple(float(v) for v in logits[c])))
    return nms(out, nms_iou)


def infer(model: ToyDetector, scene: SyntheticScene, score_threshold: float = 0.05,
          n_for_eval: int = 1, seed: int = 0) -> list[Detection]:
    """Detections for one scene.

    With ``n_for_eval == 1`` a single deterministic pass is used; otherwise
    the MC-mean logits and boxes of ``n_for_eval`` dropout passes.
    """
    if n_for_eval <= 1:
        logits, boxes = model.predict(scene)
    else:
        st = mc_forward(model, scene, n_for_eval, np.random.default_rng(seed))
        logits, boxes = shifted_mean(st.logits), shifted_mean(st.boxes)
    return detections_from_outputs(logits, boxes, model.num_classes, scene.image_id, score_threshold)


def average_precision(matched, n_gt_per_class: dict) -> float:
    """Mean over classes of 101-point interpolated AP (fraction in [0, 1])."""
    aps = []
    for cls, n_gt in sorted(n_gt_per_class.items()):
        if n_gt == 0:
            continue
        rows = [md for md in matched if md.detection.label == cls]
        rows.sort(key=lambda md: -md.detection.score)
        tp = np.array([md.m for md in rows], dtype=float)
        if tp.size == 0:
            aps.append(0.0)
            continue
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, tp.size + 1)
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        pts = []
        for r in np.linspace(0.0, 1.0, 101):
            i = np.searchsorted(recall, r, side="left")
            pts.append(envelope[i] if i < envelope.size else 0.0)
        aps.append(float(np.mean(pts)))
    return float(np.mean(aps)) if aps else 0.0


def evaluate(model: ToyDetector, scenes: Sequence[SyntheticScene], config: Optional[TrainConfig] = None,
             grid: Optional[BinGrid] = None) -> dict:
    config = config or TrainConfig()
    dets, gts = [], []
    for scene in scenes:
        dets.extend(infer(model, scene, config.score_threshold))
        gts.extend(scene.objects)
    matched = match_detections(dets, gts, config.iou_threshold)
    n_gt = {c: 0 for c in range(model.num_classes)}
    for g in gts:
        n_gt[g.label] += 1
    ap = average_precision(matched, n_gt)
    if not matched:
        return {"dece": None, "ece": None, "ap50": ap, "n_detections": 0}
    rep = compute_dece(matched, grid or BinGrid.make(), config.iou_threshold)
    return {"dece": rep.dece, "ece": rep.ece, "ap50": ap, "n_detections": len(matched),
            "matched": matched}

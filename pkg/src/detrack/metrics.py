"""Tracking metrics: AO / SR (GOT-10k style) and AUC / P / P_norm (LaSOT style).

All metrics are computed per sequence and then averaged over sequences, with
the init frame excluded. Boxes are (T, 4) pixel x, y, w, h arrays. When
absence flags are supplied, absent frames either score zero overlap (default)
or are excluded entirely (policy "exclude").
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

AUC_THRESHOLDS = np.linspace(0.0, 1.0, 51)
NORM_PREC_THRESHOLDS = np.linspace(0.0, 0.5, 51)


def _aslist(x):
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return [x]
    return list(x)


def _validate(preds, gts, absents=None):
    preds, gts = _aslist(preds), _aslist(gts)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sequences vs {len(gts)} ground truths")
    for i, (p, g) in enumerate(zip(preds, gts)):
        if len(p) != len(g):
            raise ValueError(f"sequence {i}: {len(p)} predictions vs {len(g)} annotations")
        if len(p) < 2:
            raise ValueError(f"sequence {i}: too short to score (init frame is excluded)")
    if absents is None:
        absents = [None] * len(preds)
    return preds, gts, list(absents)


def _xywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    return np.column_stack([b[:, 0], b[:, 1], b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]])


def _seq_ious(pred: np.ndarray, gt: np.ndarray, absent, policy: str) -> np.ndarray:
    ious = kernels.iou_xyxy(_xywh_to_xyxy(pred[1:]), _xywh_to_xyxy(gt[1:]))
    if absent is not None:
        mask = np.asarray(absent[1:], dtype=bool)
        if policy == "exclude":
            kept = ious[~mask]
            return kept if kept.size else np.zeros(1)
        ious = np.where(mask, 0.0, ious)
    return ious


def _seq_center_errors(pred: np.ndarray, gt: np.ndarray):
    pc = pred[1:, :2] + pred[1:, 2:] / 2.0
    gc = gt[1:, :2] + gt[1:, 2:] / 2.0
    err = np.sqrt(((pc - gc) ** 2).sum(axis=1))
    norm_delta = (pc - gc) / np.maximum(gt[1:, 2:], 1e-12)
    norm_err = np.sqrt((norm_delta ** 2).sum(axis=1))
    return err, norm_err


def average_overlap(preds, gts, absents=None, absent_policy: str = "zero") -> float:
    preds, gts, absents = _validate(preds, gts, absents)
    return float(np.mean([
        _seq_ious(p, g, a, absent_policy).mean() for p, g, a in zip(preds, gts, absents)]))


def success_rate(preds, gts, tau: float, absents=None, absent_policy: str = "zero") -> float:
    """Fraction of frames with IoU strictly greater than tau, per sequence."""
    preds, gts, absents = _validate(preds, gts, absents)
    return float(np.mean([
        (_seq_ious(p, g, a, absent_policy) > tau).mean()
        for p, g, a in zip(preds, gts, absents)]))


def success_auc(preds, gts, absents=None, absent_policy: str = "zero") -> float:
    """Mean success over 51 thresholds {0, 0.02, ..., 1}; at tau = 0 a frame
    counts as success iff IoU > 0."""
    preds, gts, absents = _validate(preds, gts, absents)
    per_seq = []
    for p, g, a in zip(preds, gts, absents):
        ious = _seq_ious(p, g, a, absent_policy)
        per_seq.append(np.mean([(ious > tau).mean() for tau in AUC_THRESHOLDS]))
    return float(np.mean(per_seq))


def precision(preds, gts, px_thresh: float = 20.0) -> float:
    """Fraction of frames whose center error is at most px_thresh pixels."""
    preds, gts, _ = _validate(preds, gts)
    vals = []
    for p, g in zip(preds, gts):
        err, _ = _seq_center_errors(p, g)
        vals.append((err <= px_thresh).mean())
    return float(np.mean(vals))


def normalized_precision(preds, gts) -> float:
    """Center error divided componentwise by the GT size, averaged over the
    threshold curve {0, 0.01, ..., 0.5}."""
    preds, gts, _ = _validate(preds, gts)
    vals = []
    for p, g in zip(preds, gts):
        _, nerr = _seq_center_errors(p, g)
        vals.append(np.mean([(nerr <= tau).mean() for tau in NORM_PREC_THRESHOLDS]))
    return float(np.mean(vals))


@dataclass(frozen=True)
class MetricReport:
    ao: float
    sr50: float
    sr75: float
    auc: float
    p: float
    p_norm: float
    per_sequence: dict


def compute_report(named_preds: dict, named_gts: dict, absents: dict | None = None,
                   absent_policy: str = "zero") -> MetricReport:
    """named_preds / named_gts: {sequence name: (T, 4) box array}."""
    names = sorted(named_preds)
    if set(names) != set(named_gts):
        missing = sorted(set(named_gts) ^ set(named_preds))
        raise ValueError(f"prediction/ground-truth sequence mismatch: {missing[:5]}")
    per_seq = {}
    for name in names:
        p, g = [named_preds[name]], [named_gts[name]]
        a = [absents[name]] if absents and name in absents else None
        per_seq[name] = {
            "ao": average_overlap(p, g, a, absent_policy),
            "sr50": success_rate(p, g, 0.5, a, absent_policy),
            "sr75": success_rate(p, g, 0.75, a, absent_policy),
            "auc": success_auc(p, g, a, absent_policy),
            "p": precision(p, g),
            "p_norm": normalized_precision(p, g),
        }
    overall = {k: float(np.mean([per_seq[n][k] for n in names]))
               for k in ("ao", "sr50", "sr75", "auc", "p", "p_norm")}
    return MetricReport(per_sequence=per_seq, **overall)


GOT10K_COLUMNS = ("ao", "sr50", "sr75")
LASOT_COLUMNS = ("auc", "p_norm", "p")


def report_to_csv(report: MetricReport, protocol: str = "got10k") -> str:
    if protocol == "got10k":
        columns = GOT10K_COLUMNS
    elif protocol == "lasot":
        columns = LASOT_COLUMNS
    else:
        raise ValueError("protocol must be 'got10k' or 'lasot'")
    lines = ["sequence," + ",".join(columns)]
    overall = {"ao": report.ao, "sr50": report.sr50, "sr75": report.sr75,
               "auc": report.auc, "p": report.p, "p_norm": report.p_norm}
    lines.append("overall," + ",".join("%.6f" % overall[c] for c in columns))
    for name in sorted(report.per_sequence):
        row = report.per_sequence[name]
        lines.append(name + "," + ",".join("%.6f" % row[c] for c in columns))
    return "\n".join(lines) + "\n"


def step_ablation(model, sequences, tracker_cfg) -> np.ndarray:
    """AO / SR_0.5 / SR_0.75 of the per-block decodes: (3, depth) array."""
    from .tracker import run_sequence

    depth = model.mc.vit.depth
    preds_by_step = [[] for _ in range(depth)]
    gts = []
    for seq in sequences:
        result = run_sequence(model, seq, tracker_cfg, collect_intermediate=True)
        gts.append(seq.boxes)
        for j in range(depth):
            preds_by_step[j].append(result.intermediate[:, j, :])
    table = np.zeros((3, depth))
    for j in range(depth):
        table[0, j] = average_overlap(preds_by_step[j], gts)
        table[1, j] = success_rate(preds_by_step[j], gts, 0.5)
        table[2, j] = success_rate(preds_by_step[j], gts, 0.75)
    return table


def step_ablation_csv(table: np.ndarray) -> str:
    depth = table.shape[1]
    lines = ["metric," + ",".join(f"step{j + 1}" for j in range(depth))]
    for name, row in zip(("ao", "sr50", "sr75"), table):
        lines.append(name + "," + ",".join("%.6f" % v for v in row))
    return "\n".join(lines) + "\n"

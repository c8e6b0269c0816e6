"""Representation probing and generation-quality metrics.

Probing mirrors the two-stream recipe: run each discriminator over
overlapping temporal windows of a clip (window 32, stride 16), average the
last-layer activations into one vector per stream, then train a linear
classifier per stream on motion-class labels and a fused classifier on the
concatenated streams. Reported alongside: motion energy (mean absolute
temporal difference) and warp consistency (how well the flow explains the
frame-to-frame appearance change).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from . import core
from .networks import to_torch

WINDOW = 32
STRIDE = 16


@dataclass
class FeatureRecord:
    clip_id: int
    stream: str  # "flow" | "texture"
    vector: np.ndarray
    label: int


@dataclass
class EvalReport:
    flow_accuracy: float
    texture_accuracy: float
    fused_accuracy: float
    chance: float
    n_classes: int
    n_train: int
    n_test: int
    fusion: str
    confusion_flow: list = field(default_factory=list)
    confusion_texture: list = field(default_factory=list)
    confusion_fused: list = field(default_factory=list)
    motion_energy_mean: float = 0.0
    motion_energy_std: float = 0.0
    warp_consistency_mean: float = 0.0
    warp_consistency_std: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def window_offsets(t_total: int, window: int = WINDOW, stride: int = STRIDE):
    """Start offsets of the sliding windows; a clip of exactly ``window``
    frames yields the single offset 0."""
    if t_total < window:
        raise ValueError(f"clip has {t_total} frames, shorter than the window {window}")
    return list(range(0, t_total - window + 1, stride))


def center_crop(volume: np.ndarray, out_hw):
    h, w = volume.shape[1:3]
    ch, cw = out_hw
    if ch > h or cw > w:
        raise ValueError(f"crop {out_hw} larger than input ({h}, {w})")
    oy, ox = (h - ch) // 2, (w - cw) // 2
    return volume[:, oy:oy + ch, ox:ox + cw]


def extract_features(video: np.ndarray, flow: np.ndarray, discriminators,
                     window: int = WINDOW, stride: int = STRIDE,
                     clip_id: int = 0, label: int = -1):
    """Window-averaged last-layer features of both discriminators for one clip.

    ``discriminators`` is (flow_discriminator, texture_discriminator); either
    may be None to skip that stream. Returns (flow_record, texture_record).
    """
    flow_disc, tex_disc = discriminators
    arch = (flow_disc or tex_disc).arch
    t_total = video.shape[0]
    if flow.shape[0] != t_total:
        raise core.ShapeError(f"video has {t_total} frames but flow has {flow.shape[0]}")
    offsets = window_offsets(t_total, window, stride)
    video_c = center_crop(video, arch.video_shape[1:])
    flow_c = center_crop(flow, arch.video_shape[1:])

    def _averaged(run_window):
        feats = [run_window(o) for o in offsets]
        return np.mean(np.stack(feats, axis=0), axis=0)

    flow_record = tex_record = None
    with torch.no_grad():
        if flow_disc is not None:
            flow_disc.eval()
            vec = _averaged(lambda o: flow_disc(to_torch(flow_c[o:o + window])[None])[1][0].numpy())
            flow_record = FeatureRecord(clip_id=clip_id, stream="flow", vector=vec, label=label)
        if tex_disc is not None:
            tex_disc.eval()
            vec = _averaged(lambda o: tex_disc(to_torch(video_c[o:o + window])[None],
                                               to_torch(flow_c[o:o + window])[None])[1][0].numpy())
            tex_record = FeatureRecord(clip_id=clip_id, stream="texture", vector=vec, label=label)
    return flow_record, tex_record


def probe_dataset(dataset, flow_disc, tex_disc, window: int = WINDOW, stride: int = STRIDE):
    """FeatureRecords for every clip of a dataset, both streams."""
    flow_records, tex_records = [], []
    for i in range(len(dataset)):
        sample = dataset.sample(i)
        fr, tr = extract_features(sample.video, sample.flow, (flow_disc, tex_disc),
                                  window, stride, clip_id=i, label=sample.label)
        flow_records.append(fr)
        tex_records.append(tr)
    return flow_records, tex_records


def train_linear_classifier(features, labels, seed: int = 0, C: float = 1.0):
    """L2-regularized linear classifier on standardized features.

    Per-dimension standardization is fit on the training features only, so
    streams of different activation scales probe comparably; the fit is
    fully deterministic.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if len(np.unique(y)) < 2:
        raise ValueError("need at least 2 classes to fit a classifier")
    clf = make_pipeline(StandardScaler(),
                        LogisticRegression(C=C, max_iter=5000, random_state=seed))
    clf.fit(x, y)
    return clf


def split_ids(labels, test_fraction: float = 0.25, seed: int = 0):
    """Deterministic stratified train/test split over clip indices."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    train_ids, test_ids = [], []
    for cls in np.unique(labels):
        ids = np.flatnonzero(labels == cls)
        ids = ids[rng.permutation(len(ids))]
        n_test = max(1, int(round(test_fraction * len(ids))))
        test_ids.extend(ids[:n_test])
        train_ids.extend(ids[n_test:])
    return sorted(train_ids), sorted(test_ids)


def _matrix(records):
    return np.stack([r.vector for r in records], axis=0)


def _accuracy_and_confusion(clf, x, y, n_classes):
    pred = clf.predict(x)
    acc = float(np.mean(pred == y))
    confusion = np.zeros((n_classes, n_classes), dtype=int)
    for yi, pi in zip(y, pred):
        confusion[int(yi), int(pi)] += 1
    return acc, confusion.tolist()


def classify_stream(records, train_ids, test_ids, seed: int = 0):
    """Fit on the train split of one stream, report accuracy on the test split."""
    by_id = {r.clip_id: r for r in records}
    x_train = np.stack([by_id[i].vector for i in train_ids])
    y_train = np.array([by_id[i].label for i in train_ids])
    x_test = np.stack([by_id[i].vector for i in test_ids])
    y_test = np.array([by_id[i].label for i in test_ids])
    clf = train_linear_classifier(x_train, y_train, seed=seed)
    n_classes = len(np.unique(np.concatenate([y_train, y_test])))
    return _accuracy_and_confusion(clf, x_test, y_test, n_classes)


def fuse_and_classify(flow_records, tex_records, train_ids, test_ids,
                      fusion: str = "concat", seed: int = 0):
    """Two-stream fusion: concatenate per-clip features (default) or average
    the per-stream classifier probabilities, then classify."""
    flow_by_id = {r.clip_id: r for r in flow_records}
    tex_by_id = {r.clip_id: r for r in tex_records}
    if set(flow_by_id) != set(tex_by_id):
        raise ValueError("flow and texture feature records cover different clip ids")
    for i in flow_by_id:
        if flow_by_id[i].label != tex_by_id[i].label:
            raise ValueError(f"clip {i} has mismatched labels across streams")

    y_train = np.array([flow_by_id[i].label for i in train_ids])
    y_test = np.array([flow_by_id[i].label for i in test_ids])
    n_classes = len(np.unique(np.concatenate([y_train, y_test])))

    if fusion == "concat":
        cat = lambda ids: np.stack([np.concatenate([flow_by_id[i].vector, tex_by_id[i].vector])
                                    for i in ids])
        clf = train_linear_classifier(cat(train_ids), y_train, seed=seed)
        return _accuracy_and_confusion(clf, cat(test_ids), y_test, n_classes)
    if fusion == "score_average":
        mats = lambda by, ids: np.stack([by[i].vector for i in ids])
        clf_f = train_linear_classifier(mats(flow_by_id, train_ids), y_train, seed=seed)
        clf_t = train_linear_classifier(mats(tex_by_id, train_ids), y_train, seed=seed)
        proba = (clf_f.predict_proba(mats(flow_by_id, test_ids))
                 + clf_t.predict_proba(mats(tex_by_id, test_ids))) / 2.0
        pred = clf_f.classes_[np.argmax(proba, axis=1)]
        acc = float(np.mean(pred == y_test))
        confusion = np.zeros((n_classes, n_classes), dtype=int)
        for yi, pi in zip(y_test, pred):
            confusion[int(yi), int(pi)] += 1
        return acc, confusion.tolist()
    raise ValueError(f"unknown fusion {fusion!r}, expected 'concat' or 'score_average'")


def motion_energy(video: np.ndarray) -> float:
    """Mean absolute frame-to-frame difference; zero iff the video is static."""
    if video.shape[0] < 2:
        raise ValueError("motion energy needs at least 2 frames")
    diff = np.abs(np.diff(np.asarray(video, dtype=np.float64), axis=0))
    return float(diff.mean())


def _warp_valid_mask(flow_frame: np.ndarray):
    """Pixels where a backward warp along this flow is trustworthy.

    Excluded: samples that would clamp at the image border, and static
    pixels the moving region splats onto (occlusions: the shape covers them
    in the next frame, which no single-layer flow can explain from frame t).
    """
    h, w = flow_frame.shape[:2]
    u, v = flow_frame[..., 0], flow_frame[..., 1]
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ys, xs = ii - v, jj - u
    valid = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    moving = (u != 0) | (v != 0)
    if moving.any():
        dy, dx = ii[moving] + v[moving], jj[moving] + u[moving]
        covered = np.zeros((h, w), dtype=bool)
        for cy, cx in ((np.floor(dy), np.floor(dx)), (np.floor(dy), np.ceil(dx)),
                       (np.ceil(dy), np.floor(dx)), (np.ceil(dy), np.ceil(dx))):
            keep = (cy >= 0) & (cy <= h - 1) & (cx >= 0) & (cx <= w - 1)
            covered[cy[keep].astype(int), cx[keep].astype(int)] = True
        valid &= moving | ~covered
    return valid


def warp_consistency(video: np.ndarray, flow: np.ndarray) -> float:
    """Mean |warp(frame_t, flow_t) - frame_{t+1}| over warp-trustworthy pixels.

    Zero for a rigidly translating shape with integer per-frame displacement
    and exact flow; grows as motion and appearance decouple.
    """
    if video.shape[0] != flow.shape[0]:
        raise core.ShapeError(f"video has {video.shape[0]} frames but flow has {flow.shape[0]}")
    video = np.asarray(video, dtype=np.float64)
    total, count = 0.0, 0
    for t in range(video.shape[0] - 1):
        pred = core.warp_frame(video[t], flow[t])
        err = np.abs(pred - video[t + 1])
        valid = _warp_valid_mask(flow[t])
        total += float(err[valid].sum())
        count += int(valid.sum()) * video.shape[3]
    return total / count if count else float("nan")


def dataset_generation_stats(dataset, limit=None):
    """Motion-energy and warp-consistency statistics over dataset clips."""
    n = len(dataset) if limit is None else min(limit, len(dataset))
    energies, consistencies = [], []
    for i in range(n):
        s = dataset.sample(i)
        energies.append(motion_energy(s.video))
        consistencies.append(warp_consistency(s.video, s.flow))
    return {
        "motion_energy_mean": float(np.mean(energies)),
        "motion_energy_std": float(np.std(energies)),
        "warp_consistency_mean": float(np.mean(consistencies)),
        "warp_consistency_std": float(np.std(consistencies)),
    }


def evaluate_representation(dataset, flow_disc, tex_disc, test_fraction: float = 0.25,
                            split_seed: int = 0, clf_seed: int = 0,
                            fusion: str = "concat", stats_limit: int = 50) -> EvalReport:
    """Full probe: features, per-stream and fused accuracies, dataset stats."""
    flow_records, tex_records = probe_dataset(dataset, flow_disc, tex_disc)
    labels = [r.label for r in flow_records]
    n_classes = len(set(labels))
    train_ids, test_ids = split_ids(labels, test_fraction, split_seed)

    flow_acc, flow_conf = classify_stream(flow_records, train_ids, test_ids, seed=clf_seed)
    tex_acc, tex_conf = classify_stream(tex_records, train_ids, test_ids, seed=clf_seed)
    fused_acc, fused_conf = fuse_and_classify(flow_records, tex_records, train_ids, test_ids,
                                              fusion=fusion, seed=clf_seed)
    stats = dataset_generation_stats(dataset, limit=stats_limit)
    return EvalReport(
        flow_accuracy=flow_acc, texture_accuracy=tex_acc, fused_accuracy=fused_acc,
        chance=1.0 / n_classes, n_classes=n_classes,
        n_train=len(train_ids), n_test=len(test_ids), fusion=fusion,
        confusion_flow=flow_conf, confusion_texture=tex_conf, confusion_fused=fused_conf,
        **stats,
    )


def write_report(report: EvalReport, out_dir):
    """Persist a report: JSON summary plus CSV confusion matrices."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    for name, matrix in (("flow", report.confusion_flow),
                         ("texture", report.confusion_texture),
                         ("fused", report.confusion_fused)):
        with open(out_dir / f"confusion_{name}.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([f"pred_{j}" for j in range(len(matrix))])
            writer.writerows(matrix)
    return out_dir / "report.json"

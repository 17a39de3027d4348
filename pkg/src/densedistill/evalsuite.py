"""Training-free evaluation protocols: per-pixel open-vocabulary
segmentation scored by mIoU, region classification scored by Top-1 mean
accuracy, and the coupled-vs-decoupled ablation harness.

Class embeddings at desk scale are either ingested vectors or the frozen
teacher's summary embeddings of single-class canvases (the teacher's
summary space stands in for the text-embedding space)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import read_tensor, write_tensor
from .errors import DegenerateInputError, ParameterError, ShapeError
from .regions import CropBox, resize_bilinear, roi_align
from .affinity import synth_sd_attention
from .synthdata import make_suite, pure_canvas
from .tensor import Tensor
from .trainer import Distiller, PreparedRecord, provider_tokens
from .config import RunConfig
from .vit import encode_cls, encode_dense


@dataclass
class ClassEmbeddings:
    names: list
    vectors: np.ndarray   # (K, E) unit rows
    source: str           # "ingested" | "synthetic"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if len(self.names) != self.vectors.shape[0] or self.vectors.shape[0] < 2:
            raise ParameterError("need >= 2 named class vectors")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ParameterError("class vectors must be unit-normalized")


def save_class_embeddings(path, embeddings):
    write_tensor(path, [(f"class.{name}", vec)
                        for name, vec in zip(embeddings.names, embeddings.vectors)])


def load_class_embeddings(path):
    sections = read_tensor(path)
    names, rows = [], []
    for name, arr in sections.items():
        if not name.startswith("class."):
            raise ParameterError(f"{path}: unexpected section {name!r}")
        names.append(name[len("class."):])
        rows.append(np.asarray(arr, dtype=np.float64).reshape(-1))
    return ClassEmbeddings(names=names, vectors=np.stack(rows), source="ingested")


def class_prototypes(teacher, colors, names=None):
    """Teacher summary embeddings of noise-free single-class canvases."""
    k = colors.shape[0]
    names = names or [f"class{i}" for i in range(k)]
    rows = []
    for label in range(k):
        canvas = pure_canvas(colors, label, teacher.input_res)
        rows.append(encode_cls(canvas, teacher).data.astype(np.float64))
    vectors = np.stack(rows)
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return ClassEmbeddings(names=names, vectors=vectors, source="synthetic")


@dataclass
class SegResult:
    labels: np.ndarray     # (h, w) argmax at feature resolution
    scores: np.ndarray     # (K, h, w) cosine scores
    upsampled: np.ndarray  # (out, out) argmax after bilinear score upsampling


def segment_training_free(dense, classes, out_res):
    """Zero-shot per-pixel classification: cosine between each dense feature
    pixel and every class vector; scores upsampled, then argmax. No
    post-processing."""
    h, w = dense.grid
    if out_res < max(h, w):
        raise ParameterError(f"out_res {out_res} below feature grid {dense.grid}")
    feats = dense.tokens.data.astype(np.float64)
    norms = np.linalg.norm(feats, axis=1)
    if (norms == 0.0).any():
        raise DegenerateInputError("zero-norm dense pixel")
    unit = feats / norms[:, None]
    scores = (classes.vectors @ unit.T).reshape(classes.vectors.shape[0], h, w)
    up = resize_bilinear(scores, out_res, out_res)
    return SegResult(labels=scores.argmax(axis=0).astype(np.int32),
                     scores=scores,
                     upsampled=up.argmax(axis=0).astype(np.int32))


def confusion_matrix(pred, gt, num_classes, ignore_label=None):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    keep = np.ones(gt.shape, dtype=bool) if ignore_label is None else gt != ignore_label
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (gt[keep].astype(np.int64), pred[keep].astype(np.int64)), 1)
    return cm


def miou_from_confusion(cm):
    """Mean IoU over classes with nonzero union; also the per-class table."""
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    table = {c: float(inter[c]) / float(union[c])
             for c in range(cm.shape[0]) if union[c] > 0}
    if not table:
        raise ParameterError("no class has nonzero union")
    return sum(table.values()) / len(table), table


def miou(pred, gt, num_classes, ignore_label=None):
    return miou_from_confusion(confusion_matrix(pred, gt, num_classes, ignore_label))


def region_classify(dense, regions, classes, n=4):
    """Label regions (boxes or binary masks) by cosine against the class
    vectors; boxes pool via RoI-align means, masks via masked token means."""
    feats = dense.tokens.data.astype(np.float64)
    h, w = dense.grid
    fmap = Tensor(np.ascontiguousarray(feats.T.reshape(-1, h, w)))
    labels = []
    for region in regions:
        if isinstance(region, CropBox):
            vec = roi_align(fmap, region, n).data.mean(axis=0)
        else:
            mask = np.asarray(region, dtype=bool)
            if mask.shape != (h, w):
                raise ShapeError(f"mask {mask.shape} does not match grid {(h, w)}")
            if not mask.any():
                raise DegenerateInputError("empty region mask")
            vec = feats[mask.reshape(-1)].mean(axis=0)
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            raise DegenerateInputError("zero-norm region vector")
        labels.append(int(np.argmax(classes.vectors @ (vec / norm))))
    return np.asarray(labels, dtype=np.int32)


def regions_from_labels(labels):
    """Connected components (4-neighbor) of a label map as normalized
    bounding boxes with their labels: the dataset-annotation stand-in."""
    labels = np.asarray(labels)
    h, w = labels.shape
    seen = np.zeros((h, w), dtype=bool)
    out = []
    for sy in range(h):
        for sx in range(w):
            if seen[sy, sx]:
                continue
            lab = int(labels[sy, sx])
            stack = [(sy, sx)]
            seen[sy, sx] = True
            y0, x0, y1, x1 = sy, sx, sy, sx
            while stack:
                y, x = stack.pop()
                y0, x0 = min(y0, y), min(x0, x)
                y1, x1 = max(y1, y), max(x1, x)
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and not seen[ny, nx] \
                            and labels[ny, nx] == lab:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            out.append((CropBox(x0 / w, y0 / h, (x1 + 1) / w, (y1 + 1) / h), lab))
    return out


def macc_tally(pred, gt):
    """Per-class [correct, total] counts, mergeable across images."""
    tally = {}
    for p, g in zip(pred, gt):
        correct, total = tally.get(int(g), (0, 0))
        tally[int(g)] = (correct + (int(p) == int(g)), total + 1)
    return tally


def merge_tallies(a, b):
    out = dict(a)
    for label, (c, t) in b.items():
        c0, t0 = out.get(label, (0, 0))
        out[label] = (c0 + c, t0 + t)
    return out


def top1_macc(pred, gt):
    """Mean over classes present in the ground truth of per-class accuracy."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.size == 0 or pred.shape != gt.shape:
        raise ParameterError("need equal-length, nonempty label lists")
    tally = macc_tally(pred, gt)
    return sum(c / t for c, t in tally.values()) / len(tally)


# ---------------------------------------------------------------------------
# suite evaluation and the ablation harness
# ---------------------------------------------------------------------------


@dataclass
class VariantMetrics:
    macc: float
    miou: float

    def line(self, name):
        return f"{name}: macc={self.macc:.4f} miou={self.miou:.4f}"


@dataclass
class AblationReport:
    baseline: VariantMetrics
    content_only: VariantMetrics
    coupled: VariantMetrics
    decoupled: VariantMetrics

    def text(self):
        rows = [("baseline(untrained)", self.baseline), ("content-only", self.content_only),
                ("coupled(single-feature)", self.coupled), ("decoupled(full)", self.decoupled)]
        lines = ["variant                  mAcc    mIoU"]
        for name, m in rows:
            lines.append(f"{name:<24} {m.macc:.4f}  {m.miou:.4f}")
        return "\n".join(lines)

    def summary(self):
        return {
            "baseline_macc": self.baseline.macc, "baseline_miou": self.baseline.miou,
            "content_macc": self.content_only.macc, "content_miou": self.content_only.miou,
            "coupled_macc": self.coupled.macc, "coupled_miou": self.coupled.miou,
            "decoupled_macc": self.decoupled.macc, "decoupled_miou": self.decoupled.miou,
        }


def prepare_suite(suite, distiller, cfg):
    records = []
    for i, sample in enumerate(suite.samples):
        vfm_tokens = provider_tokens(distiller.vfm, sample.image, cfg)
        sd = synth_sd_attention(sample.segments, cfg.sd_sharpness,
                                np.random.default_rng([cfg.seed, 2, i]),
                                num_maps=cfg.sd_maps, noise_std=cfg.sd_noise)
        records.append(PreparedRecord(image=sample.image, segments=sample.segments,
                                      vfm_tokens=vfm_tokens, sd_stack=sd))
    return records


def evaluate_on_suite(student, suite, classes, cfg, mode="decoupled"):
    """Aggregate mIoU (confusion merged across images, scored at image
    resolution on the upsampled predictions) and region mAcc (per-class
    tallies merged across images)."""
    k = classes.vectors.shape[0]
    cm = np.zeros((k, k), dtype=np.int64)
    tally = {}
    for sample in suite.samples:
        enc = encode_dense(sample.image, student, mode)
        seg = segment_training_free(enc, classes, out_res=suite.res)
        gt = np.kron(sample.segments,
                     np.ones((suite.patch, suite.patch), dtype=np.int32))
        cm += confusion_matrix(seg.upsampled, gt, k)
        boxes = [b for b, _ in sample.boxes]
        labels = [lab for _, lab in sample.boxes]
        pred = region_classify(enc, boxes, classes, n=cfg.roi_n)
        tally = merge_tallies(tally, macc_tally(pred, labels))
    macc = sum(c / t for c, t in tally.values()) / len(tally)
    return VariantMetrics(macc=macc, miou=miou_from_confusion(cm)[0])


def train_variant(cfg, suite, variant, classes=None):
    """Fresh distiller trained on the suite with the given objective wiring."""
    distiller = Distiller(cfg)
    prepared = prepare_suite(suite, distiller, cfg)
    step = 0
    for _ in range(cfg.epochs):
        for lo in range(0, len(prepared), cfg.batch_size):
            rng = np.random.default_rng([cfg.seed, 3, step])
            distiller.step_batch(prepared[lo:lo + cfg.batch_size], rng, variant=variant)
            step += 1
    return distiller


def shipped_ablation_config():
    """The pinned, pilot-calibrated configuration of the shipped seeded
    ablation suite: thresholds in the acceptance suite refer to this world."""
    cfg = RunConfig(student_patch=8, student_res=64, student_depth=3, student_width=48,
                    student_heads=4, embed_dim=24, vfm_patch=4, vfm_res=32, vfm_depth=2,
                    vfm_width=12, vfm_heads=2, grid_lo=1, grid_hi=6, epochs=25,
                    batch_size=2, seed=0, lr=3e-3, weight_decay=0.0, lam=0.5, tau=0.25)
    suite = make_suite(seed=cfg.seed, n_images=8, side=8, patch=8, num_classes=6,
                       noise=0.08, gray_rate=0.04, flip_rate=0.06, rects=6)
    return cfg, suite


def ablation_coupled_vs_decoupled(cfg, suite=None):
    """Train content-only, coupled (both objectives on one undecoupled
    feature), and decoupled variants from one shared initialization; report
    region mAcc and segmentation mIoU for each plus the untrained baseline."""
    if suite is None:
        suite = make_suite(seed=cfg.seed, n_images=8,
                           side=cfg.student_res // cfg.student_patch,
                           patch=cfg.student_patch)
    probe = Distiller(cfg)
    classes = class_prototypes(probe.teacher, suite.colors)
    baseline = evaluate_on_suite(probe.student, suite, classes, cfg, mode="decoupled")
    content = train_variant(cfg, suite, "content")
    coupled = train_variant(cfg, suite, "coupled")
    decoupled = train_variant(cfg, suite, "decoupled")
    return AblationReport(
        baseline=baseline,
        content_only=evaluate_on_suite(content.student, suite, classes, cfg, "decoupled"),
        coupled=evaluate_on_suite(coupled.student, suite, classes, cfg, "standard"),
        decoupled=evaluate_on_suite(decoupled.student, suite, classes, cfg, "decoupled"),
    )


def completion_benefit(cfg, suite=None):
    """mIoU after training with the completed affinity teacher vs the raw
    provider affinity; everything else identical."""
    from dataclasses import replace

    if suite is None:
        suite = make_suite(seed=cfg.seed, n_images=8,
                           side=cfg.student_res // cfg.student_patch,
                           patch=cfg.student_patch)
    probe = Distiller(cfg)
    classes = class_prototypes(probe.teacher, suite.colors)
    with_sd = replace(cfg, use_sd_completion=True)
    without_sd = replace(cfg, use_sd_completion=False)
    m_with = evaluate_on_suite(train_variant(with_sd, suite, "decoupled").student,
                               suite, classes, with_sd, "decoupled")
    m_without = evaluate_on_suite(train_variant(without_sd, suite, "decoupled").student,
                                  suite, classes, without_sd, "decoupled")
    return m_with.miou, m_without.miou

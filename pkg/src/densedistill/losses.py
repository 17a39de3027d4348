"""The four training objectives: context KL against the completed affinity,
similarity-weighted content cosine alignment, the region-correlation
constraint, and their weighted combination.

Teacher-side operands (completed affinity, teacher summary vectors,
provider region features) are consumed detached; gradients only ever flow
into the student streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .affinity import AffinityMatrix
from .errors import EvaluationError, ParameterError, ShapeError
from .regions import weighted_region_pool
from . import tensor as T
from .tensor import Tensor


@dataclass
class LossReport:
    """Per-step scalar summary; total = content_cos + rcc + lam * context."""
    l_context: float
    l_content_cos: float
    l_rcc: float
    l_total: float
    lam: float
    tau: float

    def line(self, step):
        return (f"step={step} l_context={self.l_context:.17g} "
                f"l_content={self.l_content_cos:.17g} l_rcc={self.l_rcc:.17g} "
                f"l_total={self.l_total:.17g}")


@dataclass
class DistillBatchInputs:
    """Operands of one distillation step, already encoded/pooled."""
    x_context: Tensor        # (HW, C) student context stream
    s_hat_vfm: np.ndarray    # (HW, HW) completed teacher affinity
    region_students: list    # k tensors (N^2, C)
    region_teacher_cls: list  # k tensors (C,)
    region_vfm: list         # k tensors (N^2, D)

    def __post_init__(self):
        k = len(self.region_students)
        if not (len(self.region_teacher_cls) == len(self.region_vfm) == k):
            raise ShapeError("region field lengths disagree")
        hw = self.x_context.shape[0]
        mat = self.s_hat_vfm.values if isinstance(self.s_hat_vfm, AffinityMatrix) else self.s_hat_vfm
        if mat.shape != (hw, hw):
            raise ShapeError(f"affinity {mat.shape} does not match {hw} context tokens")


def _teacher_matrix(s_hat_vfm, dtype):
    if isinstance(s_hat_vfm, AffinityMatrix):
        s_hat_vfm = s_hat_vfm.values
    if isinstance(s_hat_vfm, Tensor):
        return Tensor(s_hat_vfm.data.astype(dtype, copy=False))
    return Tensor(np.asarray(s_hat_vfm), dtype=dtype)


def context_loss(x_context, s_hat_vfm, tau):
    """KL(teacher || student) between row-softmaxed affinities: the student
    side is the pairwise cosine matrix of the context stream."""
    teacher = _teacher_matrix(s_hat_vfm, x_context.data.dtype)
    hw = x_context.shape[0]
    if teacher.shape != (hw, hw):
        raise ShapeError(f"teacher affinity {teacher.shape} vs {hw} tokens")
    s_clip = T.cosine_matrix(x_context, x_context)
    p = T.softmax_rows(teacher, tau)
    q = T.softmax_rows(s_clip, tau)
    return T.kl_rows(p, q)


def content_cos_loss(region_students, region_teacher_cls):
    """Mean over regions of 1 - cos(pooled student region, teacher summary)."""
    k = len(region_students)
    if k < 1:
        raise ParameterError("need at least one region")
    if len(region_teacher_cls) != k:
        raise ShapeError("teacher summaries do not match region count")
    total = None
    for f_s, f_t in zip(region_students, region_teacher_cls):
        f_t = f_t.detach() if isinstance(f_t, Tensor) else Tensor(f_t, dtype=f_s.data.dtype)
        pooled = weighted_region_pool(f_s, f_t)
        row = T.reshape(pooled, (1, pooled.shape[0]))
        target = T.reshape(f_t, (1, f_t.shape[0]))
        term = T.add_scalar(T.neg(T.cosine_matrix(row, target)), 1.0)
        total = term if total is None else T.add(total, term)
    return T.reshape(T.mul_scalar(total, 1.0 / k), ())


def rcc_loss(region_students, region_vfm, tau):
    """Mean over regions of row-mean KL between the provider's and the
    student's within-region pairwise cosine structure."""
    k = len(region_students)
    if k < 1:
        raise ParameterError("need at least one region")
    if len(region_vfm) != k:
        raise ShapeError("provider regions do not match region count")
    total = None
    for f_s, f_v in zip(region_students, region_vfm):
        f_v = f_v.detach() if isinstance(f_v, Tensor) else Tensor(f_v, dtype=f_s.data.dtype)
        if f_v.shape[0] != f_s.shape[0]:
            raise ShapeError(f"region row counts differ: {f_s.shape} vs {f_v.shape}")
        r_vfm = T.cosine_matrix(f_v, f_v)
        r_clip = T.cosine_matrix(f_s, f_s)
        term = T.kl_rows(T.softmax_rows(r_vfm, tau), T.softmax_rows(r_clip, tau))
        total = term if total is None else T.add(total, term)
    return T.mul_scalar(total, 1.0 / k)


def total_loss(l_content_cos, l_rcc, l_context, lam, tau=1.0):
    """Combine the components; returns the backward-ready scalar plus the
    numeric report."""
    if lam < 0:
        raise ParameterError(f"context weight must be >= 0, got {lam}")
    for t in (l_content_cos, l_rcc, l_context):
        if t.data.size != 1 or not np.isfinite(t.data).all():
            raise EvaluationError("loss components must be finite scalars")
    total = T.add(T.add(l_content_cos, T.reshape(l_rcc, l_content_cos.shape)),
                  T.mul_scalar(T.reshape(l_context, l_content_cos.shape), lam))
    report = LossReport(
        l_context=l_context.item(),
        l_content_cos=l_content_cos.item(),
        l_rcc=l_rcc.item(),
        l_total=total.item(),
        lam=float(lam),
        tau=float(tau),
    )
    return total, report


def batch_losses(inputs, lam, tau):
    """All objectives of one step from bundled operands."""
    l_ctx = context_loss(inputs.x_context, inputs.s_hat_vfm, tau)
    l_cos = content_cos_loss(inputs.region_students, inputs.region_teacher_cls)
    l_rcc = rcc_loss(inputs.region_students, inputs.region_vfm, tau)
    return total_loss(l_cos, l_rcc, l_ctx, lam, tau)

"""Built-in self-checks: the documented example behaviors of every module,
runnable without a test framework. Each check is a (name, callable) pair;
callables raise on failure."""

from __future__ import annotations

import math
import os
import tempfile

import numpy as np

from . import tensor as T
from .affinity import (AffinityMatrix, SdAttentionStack, complete_affinity,
                       fuse_sd_attention, synth_sd_attention, vfm_affinity)
from .config import parse_config_text
from .container import read_tensor, write_tensor
from .errors import ConfigError
from .gradcheck import finite_diff_check
from .losses import content_cos_loss, rcc_loss, total_loss
from .regions import FULL_BOX, crop_resize, roi_align, sample_grid, weighted_region_pool
from .tensor import Tensor
from .trainer import adamw_step, resolution_pair
from .evalsuite import miou, top1_macc
from .vit import VitParams, attention_block, capture_attention, decoupled_block, patch_embed


def _close(a, b, tol=1e-9):
    if np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).max() > tol:
        raise AssertionError(f"{a} != {b} within {tol}")


def _check_matmul():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    _close(T.matmul(Tensor(np.eye(2)), a).data, a.data, 0)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    loops = [[sum(x[i, t] * y[t, j] for t in range(4)) for j in range(2)] for i in range(3)]
    _close(T.matmul(Tensor(x), Tensor(y)).data, loops, 1e-12)


def _check_softmax():
    _close(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], 1e-15)
    _close(T.softmax_rows(Tensor([[math.log(2.0), 0.0]])).data, [[2 / 3, 1 / 3]], 1e-12)
    rng = np.random.default_rng(1)
    out = T.softmax_rows(Tensor(rng.standard_normal((5, 7)) * 4)).data
    _close(out.sum(axis=1), np.ones(5), 1e-9)


def _check_cosine():
    _close(T.cosine_matrix(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).data, [[0.0]], 1e-15)
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
    got = T.cosine_matrix(Tensor(a), Tensor(b)).data
    for i in range(8):
        for j in range(8):
            want = a[i] @ b[j] / (np.linalg.norm(a[i]) * np.linalg.norm(b[j]))
            _close(got[i, j], want, 1e-6)


def _check_kl():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.1, 1.0, (4, 4))
    p /= p.sum(axis=1, keepdims=True)
    _close(T.kl_rows(Tensor(p), Tensor(p)).item(), 0.0, 1e-9)
    _close(T.kl_rows(Tensor([[1.0, 0.0]]), Tensor([[0.5, 0.5]])).item(), math.log(2), 1e-12)


def _check_backward():
    x = Tensor([[1.0, 2.0, 3.0]], requires_grad=True)
    T.backward(T.sum_all(x))
    _close(x.grad, [[1.0, 1.0, 1.0]], 0)
    y = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum_all(T.mul(y, y)))
    _close(y.grad, [2.0, 4.0], 0)


def _check_finite_diff():
    rep = finite_diff_check(lambda t: T.sum_all(T.mul(t, t)), [Tensor([3.0])], name="sq")
    if not rep.passed:
        raise AssertionError(rep.line())


def _check_patch_embed():
    for res, patch, want in ((32, 16, 5), (560, 16, 1226), (490, 14, 1226)):
        p = VitParams(patch_size=patch, depth=1, width=4, heads=1, input_res=res, seed=0)
        seq = patch_embed(np.zeros((3, res, res)), p)
        if seq.shape != (want, 4):
            raise AssertionError(f"{res}/{patch}: {seq.shape}")


def _check_attention_block():
    p = VitParams(patch_size=4, depth=1, width=6, heads=1, input_res=8, seed=1)
    b = p.blocks[0]
    for f in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "w1", "b1", "w2", "b2"):
        getattr(b, f).data[...] = 0.0
    x = np.random.default_rng(4).standard_normal((5, 6))
    _close(attention_block(Tensor(x), p, 0).data, x, 0)
    cap = []
    attention_block(Tensor(x[:1]), p, 0, capture=cap)
    _close(cap[0], [[1.0]], 0)


def _check_decoupling_identity():
    p = VitParams(patch_size=4, depth=1, width=6, heads=1, input_res=8, seed=2)
    p.blocks[0].wk.data[...] = p.blocks[0].wq.data
    p.blocks[0].bk.data[...] = p.blocks[0].bq.data
    img = np.random.default_rng(5).uniform(0, 1, (3, 8, 8))
    std = capture_attention(img, p, 0)[:, :, 0]
    dec = decoupled_block(patch_embed(img, p), p)
    _close(dec.attn_full, std, 1e-6)


def _check_affinity():
    _close(vfm_affinity(np.array([[1.0, 2.0], [1.0, 2.0]]), grid=(1, 2)).values, 1.0, 1e-12)
    rng = np.random.default_rng(6)
    maps = np.exp(rng.standard_normal((2, 4, 4)))
    maps /= maps.sum(axis=2, keepdims=True)
    stack = SdAttentionStack(maps=maps, source="synthetic", grid=(2, 2))
    fused = fuse_sd_attention(stack).values
    _close(fused, maps[0] @ maps[1], 1e-12)
    _close(fused.sum(axis=1), np.ones(4), 1e-12)
    s = vfm_affinity(rng.standard_normal((4, 3)), grid=(2, 2))
    eye = AffinityMatrix(values=np.eye(4), kind="stochastic", grid=(2, 2))
    _close(complete_affinity(eye, s).values, s.values, 0)


def _check_synth_sd():
    seg = np.array([[0, 0], [1, 1]])
    st = synth_sd_attention(seg, 60.0, np.random.default_rng(0), num_maps=1, noise_std=0.0)
    want = np.zeros((4, 4))
    want[:2, :2] = 0.5
    want[2:, 2:] = 0.5
    _close(st.maps[0], want, 1e-15)


def _check_regions():
    boxes = sample_grid(np.random.default_rng(1), 2, 3)
    _close(sum(b.area for b in boxes), 1.0, 1e-12)
    out = roi_align(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), FULL_BOX, 1)
    _close(out.data, [[2.5]], 1e-12)
    row = np.array([0.3, -0.7, 1.1])
    pooled = weighted_region_pool(Tensor(np.tile(row, (4, 1))), Tensor([1.0, 0.0, 0.5]))
    _close(pooled.data, row, 1e-12)
    img = np.random.default_rng(7).uniform(0, 1, (3, 6, 6))
    _close(crop_resize(img, FULL_BOX, 6), img, 1e-6)


def _check_losses():
    rng = np.random.default_rng(8)
    f_t = rng.standard_normal(4)
    regions = [Tensor(np.outer(rng.uniform(0.5, 2.0, 3), f_t))]
    _close(content_cos_loss(regions, [Tensor(f_t)]).item(), 0.0, 1e-9)
    f_v = rng.standard_normal((4, 3))
    _close(rcc_loss([Tensor(f_v * rng.uniform(0.5, 2, (4, 1)))], [Tensor(f_v)], 1.0).item(),
           0.0, 1e-9)
    total, _ = total_loss(Tensor(np.asarray(0.7)), Tensor(np.asarray(0.1)),
                          Tensor(np.asarray(0.4)), lam=0.25)
    _close(total.item(), 0.9, 1e-12)


def _check_trainer_bits():
    if resolution_pair(16, 14, 35) != (560, 490):
        raise AssertionError("resolution_pair reference values")
    out, _, _ = adamw_step(np.array([2.0]), np.zeros(1), np.zeros(1), np.zeros(1), 3,
                           lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.5)
    _close(out, [2.0 * (1 - 0.05)], 1e-12)


def _check_container():
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "x.dten")
        write_tensor(path, {})
        if os.path.getsize(path) != 12:
            raise AssertionError("empty container size")
        arr = np.random.default_rng(9).standard_normal((3, 3))
        write_tensor(path, {"m": arr})
        if read_tensor(path)["m"].tobytes() != arr.tobytes():
            raise AssertionError("roundtrip")


def _check_config():
    cfg = parse_config_text("")
    if cfg.lam != 0.25 or cfg.epochs != 6:
        raise AssertionError("reference defaults")
    try:
        parse_config_text("lambda = -1\n")
    except ConfigError:
        pass
    else:
        raise AssertionError("lambda range not enforced")


def _check_metrics():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    score, _ = miou(pred, gt, 2)
    _close(score, 7 / 12, 1e-12)
    _close(top1_macc([0, 0, 0, 0], [0, 0, 1, 1]), 0.5, 1e-12)


CHECKS = [
    ("matmul", _check_matmul),
    ("softmax_rows", _check_softmax),
    ("cosine_matrix", _check_cosine),
    ("kl_rows", _check_kl),
    ("backward", _check_backward),
    ("finite_diff_check", _check_finite_diff),
    ("patch_embed", _check_patch_embed),
    ("attention_block", _check_attention_block),
    ("decoupling_identity", _check_decoupling_identity),
    ("affinity", _check_affinity),
    ("synth_sd_attention", _check_synth_sd),
    ("regions", _check_regions),
    ("losses", _check_losses),
    ("trainer", _check_trainer_bits),
    ("container", _check_container),
    ("config", _check_config),
    ("metrics", _check_metrics),
]


def run_selftest(out=print):
    failed = 0
    for name, fn in CHECKS:
        try:
            fn()
            out(f"PASS {name}")
        except Exception as exc:  # report every failure, keep going
            failed += 1
            out(f"FAIL {name}: {exc}")
    out(f"selftest: {len(CHECKS) - failed}/{len(CHECKS)} passed")
    return failed == 0

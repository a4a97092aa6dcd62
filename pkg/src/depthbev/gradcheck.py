"""Gradient audit: analytic tape gradients vs central finite differences.

Every differentiable op gets a randomized scalar probe per seed, and the
two fusion blocks are audited end to end as composites. The audit metric
is max |a - n| / max(|a|, |n|, 1).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .depth import GridSpec, build_depth_matrix, positional_encoding_2d, sinusoidal_encode
from .geometry import (BevFeatureMap, Box3D, Rect, VoxelGrid, VoxelGridConfig, height_compress,
                       lift_splat, roi_align, voxel_pool_box)
from .global_fusion import GlobalFusionBlock
from .local_fusion import LocalFusionBlock, merge_global, select_locals
from .scenes import default_camera_rig
from .stubs import Dense, RoiStub, VoxelPoolStub
from .tensor import GradTape, Tensor, finite_diff_grad, grad_relative_error

DEFAULT_TOLERANCE = 1e-4


def check_grads(build_loss: Callable[[], Tensor], probes: dict[str, Tensor],
                h: float = 1e-5) -> float:
    """Worst relative error between tape and finite-difference gradients.

    ``build_loss`` must rebuild the computation from the probe tensors'
    current data each call, so the same closure serves both paths.
    """
    with GradTape() as tape:
        loss = build_loss()
    tape.backward(loss)

    worst = 0.0
    for _, t in probes.items():
        analytic = tape.grad(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)

        def f(x: Tensor, _t=t) -> float:
            saved = _t.data
            _t.data = x.data
            try:
                return build_loss().item()
            finally:
                _t.data = saved

        numeric = finite_diff_grad(f, Tensor(t.data.copy()), h)
        worst = max(worst, grad_relative_error(analytic, numeric))
    return worst


def _probe(rng: np.random.Generator, *shape, lo: float = -1.0, hi: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _proj(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _dims(rng: np.random.Generator, n: int, max_extent: int = 16) -> list[int]:
    return [int(rng.integers(2, max_extent + 1)) for _ in range(n)]


# ---------------------------------------------------------------------------
# per-op audits; each returns (build_loss, probes)


def _audit_elementwise(op_name: str):
    unary = {
        "neg": T.neg, "sigmoid": T.sigmoid, "exp": T.exp, "softplus": T.softplus,
        "smooth_l1": T.smooth_l1,
    }

    def make(rng, max_extent):
        m, n = _dims(rng, 2, min(max_extent, 8))
        if op_name == "log":
            x = _probe(rng, m, n, lo=0.5, hi=2.0)
            build = lambda: T.sum_all(T.mul(T.log(x), r))
        elif op_name == "power":
            x = _probe(rng, m, n, lo=0.1, hi=1.0)
            build = lambda: T.sum_all(T.mul(T.power(x, 2.0), r))
        elif op_name in ("add", "sub", "mul"):
            x = _probe(rng, m, n)
            y = _probe(rng, m, n)
            fn = {"add": T.add, "sub": T.sub, "mul": T.mul}[op_name]
            r = _proj(rng, (m, n))
            return (lambda: T.sum_all(T.mul(fn(x, y), r))), {"x": x, "y": y}
        elif op_name == "scale":
            x = _probe(rng, m, n)
            build = lambda: T.sum_all(T.mul(T.scale(x, 1.7), r))
        elif op_name == "shift":
            x = _probe(rng, m, n)
            build = lambda: T.sum_all(T.mul(T.shift(x, 0.3), r))
        else:
            x = _probe(rng, m, n)
            fn = unary[op_name]
            build = lambda: T.sum_all(T.mul(fn(x), r))
        r = _proj(rng, (m, n))
        return build, {"x": x}

    return make


def _audit_matmul(rng, max_extent):
    m, k, n = _dims(rng, 3, max_extent)
    a = _probe(rng, m, k)
    b = _probe(rng, k, n)
    r = _proj(rng, (m, n))
    return (lambda: T.sum_all(T.mul(T.matmul(a, b), r))), {"a": a, "b": b}


def _audit_linear(rng, max_extent):
    m, n, d_in, d_out = _dims(rng, 4, min(max_extent, 8))
    x = _probe(rng, m, n, d_in)
    w = _probe(rng, d_in, d_out)
    b = _probe(rng, d_out)
    r = _proj(rng, (m, n, d_out))
    return (lambda: T.sum_all(T.mul(T.linear(x, w, b), r))), {"x": x, "w": w, "b": b}


def _audit_softmax(rng, max_extent):
    m, n = _dims(rng, 2, max_extent)
    x = _probe(rng, m, n, lo=-2.0, hi=2.0)
    r = _proj(rng, (m, n))
    return (lambda: T.sum_all(T.mul(T.softmax_last(x), r))), {"x": x}


def _audit_layer_norm(rng, max_extent):
    m, c = _dims(rng, 2, max_extent)
    c = max(c, 2)
    x = _probe(rng, m, c)
    gain = _probe(rng, c, lo=0.5, hi=1.5)
    bias = _probe(rng, c)
    r = _proj(rng, (m, c))
    return (lambda: T.sum_all(T.mul(T.layer_norm(x, gain, bias), r))), \
        {"x": x, "gain": gain, "bias": bias}


def _audit_reshape(rng, max_extent):
    m, n = _dims(rng, 2, max_extent)
    x = _probe(rng, m, n)
    r = _proj(rng, (m * n,))
    return (lambda: T.sum_all(T.mul(T.reshape(x, (m * n,)), r))), {"x": x}


def _audit_transpose(rng, max_extent):
    m, n = _dims(rng, 2, max_extent)
    x = _probe(rng, m, n)
    r = _proj(rng, (n, m))
    return (lambda: T.sum_all(T.mul(T.transpose(x), r))), {"x": x}


def _audit_concat(rng, max_extent):
    m, a, b = _dims(rng, 3, min(max_extent, 8))
    x = _probe(rng, m, a)
    y = _probe(rng, m, b)
    r = _proj(rng, (m, a + b))
    return (lambda: T.sum_all(T.mul(T.concat_last([x, y]), r))), {"x": x, "y": y}


def _audit_stack(rng, max_extent):
    n = _dims(rng, 1, min(max_extent, 6))[0]
    parts = [_probe(rng, 4) for _ in range(n)]
    r = _proj(rng, (n, 4))
    return (lambda: T.sum_all(T.mul(T.stack_rows(parts), r))), \
        {f"p{i}": p for i, p in enumerate(parts)}


def _audit_gather(rng, max_extent):
    m, c = _dims(rng, 2, max_extent)
    k = int(rng.integers(1, 2 * m))
    idx = rng.integers(0, m, size=k)
    x = _probe(rng, m, c)
    r = _proj(rng, (k, c))
    return (lambda: T.sum_all(T.mul(T.gather_rows(x, idx), r))), {"x": x}


def _audit_max_axis0(rng, max_extent):
    m, c = _dims(rng, 2, max_extent)
    x = _probe(rng, m, c)  # continuous draws make ties measure-zero
    r = _proj(rng, (c,))
    return (lambda: T.sum_all(T.mul(T.max_axis0(x), r))), {"x": x}


def _audit_sum(rng, max_extent):
    m, n = _dims(rng, 2, max_extent)
    x = _probe(rng, m, n)
    return (lambda: T.sum_all(x)), {"x": x}


def _audit_mean(rng, max_extent):
    m, n = _dims(rng, 2, max_extent)
    x = _probe(rng, m, n)
    return (lambda: T.mean_all(x)), {"x": x}


def _audit_roi_align(rng, max_extent):
    rows, cols = int(rng.integers(5, 10)), int(rng.integers(5, 10))
    c = int(rng.integers(1, 4))
    feat = _probe(rng, rows, cols, c)
    r0 = float(rng.uniform(0, rows - 3))
    c0 = float(rng.uniform(0, cols - 3))
    rect = Rect(r0, c0, r0 + float(rng.uniform(1.5, 3)), c0 + float(rng.uniform(1.5, 3)))
    r = _proj(rng, (3, 3, c))
    return (lambda: T.sum_all(T.mul(roi_align(feat, rect), r))), {"feat": feat}


def _audit_lift_splat(rng, max_extent):
    grid = GridSpec(width=8, height=8, cell_size=2.0)
    cams = default_camera_rig(1, (4, 6), fov_deg=80.0)
    centers = np.linspace(2.0, 9.0, 4)
    c = 2
    feat = _probe(rng, 4, 6, c)
    dist = rng.uniform(0.1, 1.0, size=(4, 6, 4))
    dist /= dist.sum(axis=-1, keepdims=True)
    r = _proj(rng, (8, 8, c))

    def build():
        bev = lift_splat([feat], [dist], cams, grid, centers)
        return T.sum_all(T.mul(bev.features, r))

    return build, {"feat": feat}


def _audit_height_compress(rng, max_extent):
    grid = GridSpec(width=6, height=6, cell_size=1.0)
    config = VoxelGridConfig(voxel_size=(0.5, 0.5, 0.5), x_range=(-3, 3), y_range=(-3, 3),
                             z_range=(-1, 1))
    n = 8
    ext = config.extents
    idx = np.column_stack([rng.integers(0, e, size=n) for e in ext])
    feats = _probe(rng, n, 3)
    stub = Dense(3, 4, rng, bias=False)
    r = _proj(rng, (6, 6, 4))

    def build():
        vox = VoxelGrid(config, idx, feats)
        bev = height_compress(vox, grid, stub)
        return T.sum_all(T.mul(bev.features, r))

    return build, {"feats": feats, "stub.weight": stub.weight}


def _audit_voxel_pool(rng, max_extent):
    config = VoxelGridConfig(voxel_size=(0.5, 0.5, 0.5), x_range=(-3, 3), y_range=(-3, 3),
                             z_range=(-1, 1))
    ext = config.extents
    idx = np.column_stack([rng.integers(0, e, size=10) for e in ext])
    feats = _probe(rng, 10, 3)
    stub = VoxelPoolStub(3, 4, rng)
    box = Box3D(center=(0.0, 0.0, 0.0), size=(3.0, 3.0, 1.5), yaw=0.4)
    r = _proj(rng, (4,))

    def build():
        vox = VoxelGrid(config, idx, feats)
        return T.sum_all(T.mul(voxel_pool_box(vox, box, stub), r))

    probes = {"feats": feats}
    probes.update({f"stub.{n}": t for n, t in stub.named_parameters()})
    return build, probes


def _audit_merge_global(rng, max_extent):
    grid = GridSpec(width=6, height=6, cell_size=1.0)
    fused_feat = _probe(rng, 6, 6, 4)
    enhanced = _probe(rng, 2, 4)
    boxes = [Box3D(center=(0.5, 0.5, 0.5), size=(2.0, 1.5, 1.0), yaw=0.3),
             Box3D(center=(-0.5, 0.2, 0.5), size=(2.5, 1.0, 1.0), yaw=-0.8)]
    r = _proj(rng, (6, 6, 4))

    def build():
        fused = BevFeatureMap(grid=grid, features=fused_feat)
        return T.sum_all(T.mul(merge_global(fused, enhanced, boxes).features, r))

    return build, {"fused": fused_feat, "enhanced": enhanced}


def _audit_global_block(rng, max_extent):
    grid = GridSpec(width=3, height=3, cell_size=2.0)
    c = 8
    block = GlobalFusionBlock(c, heads=2, rng=rng)
    dm = build_depth_matrix(grid)
    denc = sinusoidal_encode(dm, c)
    pos = positional_encoding_2d(grid, c)
    v_feat = _probe(rng, 3, 3, c)
    i_feat = _probe(rng, 3, 3, c)
    r = _proj(rng, (3, 3, c))

    def build():
        v_bev = BevFeatureMap(grid=grid, features=v_feat)
        i_bev = BevFeatureMap(grid=grid, features=i_feat)
        out = block.forward(v_bev, i_bev, pos, denc)
        return T.sum_all(T.mul(out.features, r))

    probes = {"v": v_feat, "i": i_feat}
    probes.update({n: t for n, t in block.named_parameters()})
    return build, probes


def _audit_local_chain(rng, max_extent):
    grid = GridSpec(width=5, height=5, cell_size=2.0)
    c = 4
    cams = default_camera_rig(1, (5, 6), fov_deg=90.0)
    dm = build_depth_matrix(grid)
    config = VoxelGridConfig(voxel_size=(1.0, 1.0, 1.0), x_range=(-4, 6), y_range=(-4, 6),
                             z_range=(-1, 2))
    ext = config.extents
    idx = np.column_stack([rng.integers(0, e, size=8) for e in ext])
    vox_feats = _probe(rng, 8, 3)
    fused_feat = _probe(rng, 5, 5, c)
    img_feat = _probe(rng, 5, 6, c)

    crop_stub = RoiStub(c, c, rng, with_empty=True)
    pool_stub = VoxelPoolStub(3, c, rng)
    img_stub = RoiStub(c, c, rng, with_empty=True)
    block = LocalFusionBlock(c, heads=2, rng=rng)

    boxes = [Box3D(center=(2.5, 0.5, 0.5), size=(2.0, 1.5, 1.2), yaw=0.2, class_id=0),
             Box3D(center=(-1.5, 1.5, 0.5), size=(1.5, 1.5, 1.0), yaw=-0.5, class_id=1),
             Box3D(center=(3.0, -2.0, 0.5), size=(2.5, 1.0, 1.0), yaw=1.1, class_id=2)]
    r = _proj(rng, (5, 5, c))

    def build():
        fused = BevFeatureMap(grid=grid, features=fused_feat)
        vox = VoxelGrid(config, idx, vox_feats)
        locals_ = select_locals(fused, vox, [img_feat], cams, boxes, dm,
                                crop_stub, pool_stub, img_stub)
        enhanced = block.fuse(locals_)
        merged = merge_global(fused, enhanced, boxes)
        return T.sum_all(T.mul(merged.features, r))

    probes = {"fused": fused_feat, "vox": vox_feats, "img": img_feat}
    for prefix, comp in (("crop", crop_stub), ("pool", pool_stub), ("img", img_stub)):
        probes.update({f"{prefix}.{n}": t for n, t in comp.named_parameters()})
    probes.update({n: t for n, t in block.named_parameters()})
    return build, probes


OP_AUDITS: dict[str, Callable] = {
    "add": _audit_elementwise("add"),
    "sub": _audit_elementwise("sub"),
    "mul": _audit_elementwise("mul"),
    "neg": _audit_elementwise("neg"),
    "scale": _audit_elementwise("scale"),
    "shift": _audit_elementwise("shift"),
    "sigmoid": _audit_elementwise("sigmoid"),
    "exp": _audit_elementwise("exp"),
    "log": _audit_elementwise("log"),
    "softplus": _audit_elementwise("softplus"),
    "power": _audit_elementwise("power"),
    "smooth_l1": _audit_elementwise("smooth_l1"),
    "matmul": _audit_matmul,
    "linear": _audit_linear,
    "softmax_last": _audit_softmax,
    "layer_norm": _audit_layer_norm,
    "reshape": _audit_reshape,
    "transpose": _audit_transpose,
    "concat_last": _audit_concat,
    "stack_rows": _audit_stack,
    "gather_rows": _audit_gather,
    "max_axis0": _audit_max_axis0,
    "sum": _audit_sum,
    "mean": _audit_mean,
    "roi_align": _audit_roi_align,
    "lift_splat": _audit_lift_splat,
    "height_compress": _audit_height_compress,
    "voxel_pool_box": _audit_voxel_pool,
    "merge_global": _audit_merge_global,
    "global_fusion_block": _audit_global_block,
    "local_fusion_chain": _audit_local_chain,
}


@dataclass
class AuditRecord:
    name: str
    max_rel_err: float
    tolerance: float
    passed: bool
    seconds: float


def audit_all(seeds: int = 10, max_extent: int = 16,
              tolerance: float = DEFAULT_TOLERANCE) -> list[AuditRecord]:
    """Run every registered audit over ``seeds`` random draws."""
    records = []
    for op_index, (name, make) in enumerate(OP_AUDITS.items()):
        start = time.perf_counter()
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(np.random.PCG64(seed * 7919 + op_index))
            build, probes = make(rng, max_extent)
            worst = max(worst, check_grads(build, probes))
        records.append(AuditRecord(
            name=name, max_rel_err=worst, tolerance=tolerance,
            passed=worst < tolerance, seconds=time.perf_counter() - start))
    return records

"""Per-instance fusion: select local features, fuse them with depth-modulated
dual cross-attention, and scatter the result back into the global map."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .depth import DepthMatrix, GridSpec, encode_depths, positional_encoding_2d
from .errors import BoundsError, ConfigError, DimensionError, ValidationError
from .geometry import (BevFeatureMap, Box3D, CameraModel, VoxelGrid, box_footprint_corners,
                       crop_bev_box, project_box_to_image, roi_align, voxel_pool_box)
from .stubs import dense_init, prefix_params
from .tensor import Tensor


@dataclass
class LocalFeatureSet:
    """Per-instance feature triplet, one row per proposal box.

    ``fused_local`` comes from the globally fused BEV map, ``voxel_local``
    from raw voxels, ``image_local`` from the best camera view; ``depths``
    holds each box's center-cell depth.
    """

    fused_local: Tensor   # (t, c)
    voxel_local: Tensor   # (t, c)
    image_local: Tensor   # (t, c)
    boxes: list[Box3D]
    depths: np.ndarray    # (t,)
    grid: GridSpec

    def __post_init__(self):
        t = len(self.boxes)
        shapes = {self.fused_local.shape, self.voxel_local.shape, self.image_local.shape}
        if len(shapes) != 1 or self.fused_local.shape[0] != t:
            raise DimensionError("local feature blocks must share one (t, c) shape")
        if self.depths.shape != (t,):
            raise DimensionError("depths must have one entry per box")
        if np.any(self.depths < 0):
            raise ValidationError("instance depths must be non-negative")

    @property
    def count(self) -> int:
        return len(self.boxes)

    @property
    def channels(self) -> int:
        return self.fused_local.shape[1]


def select_locals(fused: BevFeatureMap, voxels: VoxelGrid, imgs: Sequence[Tensor],
                  cams: Sequence[CameraModel], boxes: Sequence[Box3D],
                  depth: DepthMatrix, crop_stub, pool_stub, img_stub,
                  max_boxes: int | None = None) -> LocalFeatureSet:
    """Crop the fused map, pool raw voxels, and RoI the best view per box.

    Per-box failures (no visible view, footprint off grid, no voxels)
    degrade to the learned empty embeddings rather than aborting.
    """
    if len(boxes) == 0:
        raise ValidationError("select_locals needs at least one box")
    if max_boxes is not None and len(boxes) > max_boxes:
        raise ValidationError(f"{len(boxes)} boxes exceed the configured maximum {max_boxes}")
    grid = fused.grid

    f_rows, v_rows, i_rows, depths = [], [], [], []
    for box in boxes:
        try:
            f_rows.append(crop_bev_box(fused, box, crop_stub))
        except BoundsError:
            f_rows.append(crop_stub.empty)
        v_rows.append(voxel_pool_box(voxels, box, pool_stub))

        best = None
        for view, cam in enumerate(cams):
            rect = project_box_to_image(box, cam)
            if rect is not None and (best is None or rect.area > best[1].area):
                best = (view, rect)
        if best is None:
            i_rows.append(img_stub.empty)
        else:
            crop = roi_align(imgs[best[0]], best[1], out_bins=img_stub.bins,
                             samples=img_stub.samples)
            i_rows.append(T.reshape(T.linear(T.reshape(crop, (1, -1)),
                                             img_stub.weight, img_stub.bias), (-1,)))

        ix, iy = grid.world_to_cell(box.center[0], box.center[1])
        ix = min(max(ix, 0), grid.width - 1)   # off-grid centers clamp to the border cell
        iy = min(max(iy, 0), grid.height - 1)
        depths.append(float(depth.values[ix, iy]))

    return LocalFeatureSet(
        fused_local=T.stack_rows(f_rows),
        voxel_local=T.stack_rows(v_rows),
        image_local=T.stack_rows(i_rows),
        boxes=list(boxes),
        depths=np.asarray(depths),
        grid=grid,
    )


class LocalFusionBlock:
    """Dual cross-attention over per-instance tokens.

    The query embeds each instance's center position and depth into its
    fused-BEV feature; one branch attends against image locals, the other
    against voxel locals. By default each instance's query attends only to
    its own key token (a one-key softmax is identically 1, so the attended
    value is that instance's projected value row); ``cross_instance=True``
    switches to full softmax attention across all t instances.
    """

    def __init__(self, channels: int, heads: int, rng: np.random.Generator,
                 embed_mode: str = "multiply", ffn_mult: int = 2,
                 cross_instance: bool = False, frequency_base: float = 10000.0):
        from .global_fusion import EMBED_MODES
        if channels % heads != 0:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        if channels % 4 != 0:
            raise ConfigError("local fusion channels must be divisible by 4 for the position encoding")
        if embed_mode not in EMBED_MODES:
            raise ConfigError(f"embed_mode must be one of {EMBED_MODES}, got {embed_mode!r}")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        self.embed_mode = embed_mode
        self.cross_instance = cross_instance
        self.frequency_base = frequency_base

        def w(d_in, d_out, scale=None):
            return Tensor(dense_init(rng, d_in, d_out, scale), requires_grad=True)

        hd = self.head_dim
        qk_scale = 0.25 * np.sqrt(2.0 / (channels + hd))
        self.branches = {}
        for branch in ("image", "voxel"):
            self.branches[branch] = {
                "q": [w(channels, hd, qk_scale) for _ in range(heads)],
                "k": [w(channels, hd, qk_scale) for _ in range(heads)],
                "v": [w(channels, hd) for _ in range(heads)],
                "out": w(channels, channels),
            }
        self.concat_embed = w(2 * channels, channels) if embed_mode == "concat" else None
        c_ff = ffn_mult * channels
        self.ffn_w1 = w(2 * channels, c_ff)
        self.ffn_b1 = Tensor(np.zeros(c_ff), requires_grad=True)
        self.ffn_w2 = w(c_ff, channels)
        self.ffn_b2 = Tensor(np.zeros(channels), requires_grad=True)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for branch in ("image", "voxel"):
            ps = self.branches[branch]
            for h in range(self.heads):
                out += [(f"{branch}.head{h}.q", ps["q"][h]),
                        (f"{branch}.head{h}.k", ps["k"][h]),
                        (f"{branch}.head{h}.v", ps["v"][h])]
            out.append((f"{branch}.out_proj", ps["out"]))
        if self.concat_embed is not None:
            out.append(("concat_embed", self.concat_embed))
        out += [("ffn.w1", self.ffn_w1), ("ffn.b1", self.ffn_b1),
                ("ffn.w2", self.ffn_w2), ("ffn.b2", self.ffn_b2)]
        return prefix_params("local_fusion", out)

    def instance_encodings(self, locals_: LocalFeatureSet) -> tuple[np.ndarray, np.ndarray]:
        """Per-instance positional (center cell) and depth channel encodings."""
        grid = locals_.grid
        pos_table = positional_encoding_2d(grid, self.channels, self.frequency_base)
        rows = []
        for box in locals_.boxes:
            ix, iy = grid.world_to_cell(box.center[0], box.center[1])
            ix = min(max(ix, 0), grid.width - 1)
            iy = min(max(iy, 0), grid.height - 1)
            rows.append(pos_table[ix, iy])
        p_inst = np.stack(rows)
        d_inst = encode_depths(locals_.depths, self.channels, self.frequency_base)
        return p_inst, d_inst

    def _embed(self, base: Tensor, depth_tok: Tensor) -> Tensor:
        if self.embed_mode == "multiply":
            return T.mul(base, depth_tok)
        if self.embed_mode == "sum":
            return T.add(base, depth_tok)
        return T.linear(T.concat_last([base, depth_tok]), self.concat_embed)

    def _branch(self, name: str, query: Tensor, keys: Tensor,
                return_attention: bool = False):
        ps = self.branches[name]
        scale = 1.0 / np.sqrt(self.head_dim)
        outs, atts = [], []
        for h in range(self.heads):
            v = T.matmul(keys, ps["v"][h])
            if self.cross_instance:
                q = T.matmul(query, ps["q"][h])
                k = T.matmul(keys, ps["k"][h])
                att = T.softmax_last(T.scale(T.matmul(q, T.transpose(k)), scale))
                outs.append(T.matmul(att, v))
                atts.append(att.data)
            else:
                # one key per query: softmax over a single logit is exactly 1
                outs.append(v)
                atts.append(np.ones((keys.shape[0], 1)))
        out = T.linear(T.concat_last(outs), ps["out"])
        return (out, atts) if return_attention else out

    def fuse(self, locals_: LocalFeatureSet, return_attention: bool = False,
             neutral_depth: bool = False):
        """Enhanced per-instance features (t, c) per the dual-branch recipe.

        ``neutral_depth`` swaps the depth factor for its identity element
        (ones under multiply, zeros otherwise) — the depth-removed ablation.
        """
        if locals_.channels != self.channels:
            raise DimensionError(
                f"local features have {locals_.channels} channels, block expects {self.channels}")
        p_inst, d_inst = self.instance_encodings(locals_)
        if neutral_depth:
            d_inst = np.ones_like(d_inst) if self.embed_mode == "multiply" else np.zeros_like(d_inst)
        q_base = T.add(locals_.fused_local, Tensor(p_inst))
        query = self._embed(q_base, Tensor(d_inst))

        if return_attention:
            b_img, att_img = self._branch("image", query, locals_.image_local, True)
            b_vox, att_vox = self._branch("voxel", query, locals_.voxel_local, True)
        else:
            b_img = self._branch("image", query, locals_.image_local)
            b_vox = self._branch("voxel", query, locals_.voxel_local)

        cat = T.concat_last([T.add(b_img, locals_.fused_local),
                             T.add(b_vox, locals_.fused_local)])
        out = T.linear(T.softplus(T.linear(cat, self.ffn_w1, self.ffn_b1)),
                       self.ffn_w2, self.ffn_b2)
        return (out, {"image": att_img, "voxel": att_vox}) if return_attention else out


def box_footprint_cells(box: Box3D, grid: GridSpec) -> np.ndarray:
    """(k, 2) cells whose centers lie inside the box's rotated footprint."""
    corners = box_footprint_corners(box)
    ex, ey = grid.ego_index
    cs = grid.cell_size
    x_lo = int(np.floor(corners[:, 0].min() / cs)) + ex
    x_hi = int(np.ceil(corners[:, 0].max() / cs)) + ex
    y_lo = int(np.floor(corners[:, 1].min() / cs)) + ey
    y_hi = int(np.ceil(corners[:, 1].max() / cs)) + ey
    x_lo, x_hi = max(x_lo, 0), min(x_hi, grid.width - 1)
    y_lo, y_hi = max(y_lo, 0), min(y_hi, grid.height - 1)
    if x_lo > x_hi or y_lo > y_hi:
        return np.zeros((0, 2), dtype=np.int64)

    xs = np.arange(x_lo, x_hi + 1)
    ys = np.arange(y_lo, y_hi + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    wx = (gx.ravel() + 0.5 - ex) * cs - box.center[0]
    wy = (gy.ravel() + 0.5 - ey) * cs - box.center[1]
    c, s = np.cos(-box.yaw), np.sin(-box.yaw)
    lx = wx * c - wy * s
    ly = wx * s + wy * c
    inside = (np.abs(lx) <= 0.5 * box.size[0]) & (np.abs(ly) <= 0.5 * box.size[1])
    return np.column_stack([gx.ravel()[inside], gy.ravel()[inside]])


def merge_global(fused: BevFeatureMap, enhanced: Tensor, boxes: Sequence[Box3D]) -> BevFeatureMap:
    """Residual-add enhanced instance features onto their footprint cells.

    Overlapping boxes average their contributions per cell; cells outside
    every footprint are bit-identical to the input.
    """
    w, h, c = fused.features.data.shape
    if enhanced.data.ndim != 2 or enhanced.data.shape != (len(boxes), c):
        raise DimensionError(
            f"enhanced features must be ({len(boxes)}, {c}), got {enhanced.shape}")
    grid = fused.grid

    cell_lists = [box_footprint_cells(box, grid) for box in boxes]
    flat_cells = [cells[:, 0] * h + cells[:, 1] for cells in cell_lists]
    counts = np.zeros(w * h, dtype=np.float64)
    for fc in flat_cells:
        np.add.at(counts, fc, 1.0)

    def forward(fdata: np.ndarray, edata: np.ndarray) -> np.ndarray:
        acc = np.zeros((w * h, c), dtype=np.float64)
        for i, fc in enumerate(flat_cells):
            acc[fc] += edata[i]
        covered = counts > 0
        out = fdata.reshape(w * h, c).copy()
        out[covered] += acc[covered] / counts[covered, None]
        return out.reshape(w, h, c)

    def backward(g: np.ndarray):
        g2 = g.reshape(w * h, c)
        ge = np.zeros_like(enhanced.data)
        for i, fc in enumerate(flat_cells):
            if fc.size:
                ge[i] = (g2[fc] / counts[fc, None]).sum(axis=0)
        return (g, ge)

    out = T.custom_op("merge_global", forward(fused.features.data, enhanced.data),
                      (fused.features, enhanced), backward)
    return BevFeatureMap(grid=grid, features=out)

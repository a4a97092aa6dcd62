"""Toy training loop: focal classification + smooth-L1 box regression.

Targets live at the BEV cells containing ground-truth box centers; the
loop runs plain first-order updates (SGD or Adam) and is bit-deterministic
for a fixed seed and config.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig
from .depth import GridSpec
from .errors import ConfigError, NumericError
from .fileio import atomic_write_json
from .geometry import Box3D
from .pipeline import CorpusItem, FusionModel, PipelineResult, build_corpus
from .tensor import GradTape, Tensor


@dataclass
class CellTargets:
    pos_cells: np.ndarray   # flat cell index per positive, (m,)
    class_ids: np.ndarray   # (m,)
    box_params: np.ndarray  # (m, 7): dx, dy, z, log l, log w, log h, yaw


def build_targets(gt_boxes: list[Box3D], grid: GridSpec) -> CellTargets:
    """Assign each ground-truth box to its center cell; first box wins a cell."""
    ex, ey = grid.ego_index
    cs = grid.cell_size
    seen: set[int] = set()
    cells, classes, params = [], [], []
    for box in gt_boxes:
        ix, iy = grid.world_to_cell(box.center[0], box.center[1])
        if not grid.contains_cell(ix, iy):
            continue
        flat = ix * grid.height + iy
        if flat in seen:
            continue
        seen.add(flat)
        cells.append(flat)
        classes.append(box.class_id)
        dx = box.center[0] / cs - (ix - ex) - 0.5
        dy = box.center[1] / cs - (iy - ey) - 0.5
        params.append([dx, dy, box.center[2],
                       np.log(box.size[0]), np.log(box.size[1]), np.log(box.size[2]),
                       box.yaw])
    return CellTargets(
        pos_cells=np.asarray(cells, dtype=np.int64),
        class_ids=np.asarray(classes, dtype=np.int64),
        box_params=np.asarray(params, dtype=np.float64).reshape(-1, 7),
    )


def focal_loss(logits: Tensor, targets: CellTargets, classes: int,
               alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss over all cells, normalized by the positive count."""
    n = logits.data.shape[0] * logits.data.shape[1]
    x = T.reshape(logits, (n, classes))
    pos_mask = np.zeros((n, classes))
    if targets.pos_cells.size:
        pos_mask[targets.pos_cells, targets.class_ids] = 1.0
    mask = Tensor(pos_mask)
    inv_mask = Tensor(1.0 - pos_mask)

    p = T.sigmoid(x)
    # -log p = softplus(-x) and -log(1-p) = softplus(x), both overflow-safe
    pos_term = T.mul(mask, T.mul(T.power(1.0 - p, gamma), T.softplus(T.neg(x))))
    neg_term = T.mul(inv_mask, T.mul(T.power(p, gamma), T.softplus(x)))
    total = T.add(T.scale(T.sum_all(pos_term), alpha),
                  T.scale(T.sum_all(neg_term), 1.0 - alpha))
    return T.scale(total, 1.0 / max(1, targets.pos_cells.size))


def box_loss(box_preds: Tensor, targets: CellTargets) -> Tensor:
    """Smooth-L1 on box parameters at positive cells."""
    w, h, p = box_preds.data.shape
    flat = T.reshape(box_preds, (w * h, p))
    if targets.pos_cells.size == 0:
        return T.scale(T.sum_all(flat), 0.0)
    rows = T.gather_rows(flat, targets.pos_cells)
    err = T.sub(rows, Tensor(targets.box_params))
    return T.scale(T.sum_all(T.smooth_l1(err)), 1.0 / (targets.pos_cells.size * p))


def detection_loss(result: PipelineResult, gt_boxes: list[Box3D], grid: GridSpec,
                   cfg: RunConfig) -> Tensor:
    targets = build_targets(gt_boxes, grid)
    cls = focal_loss(result.class_logits, targets, cfg.model.classes,
                     alpha=cfg.train.focal_alpha, gamma=cfg.train.focal_gamma)
    box = box_loss(result.box_preds, targets)
    return T.add(cls, T.scale(box, cfg.train.box_weight))


class Sgd:
    def __init__(self, params: list[Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self, tape: GradTape) -> None:
        for p in self.params:
            g = tape.grad(p)
            if g is not None:
                p.data -= self.lr * g


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, tape: GradTape) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = tape.grad(p)
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            p.data -= self.lr * (self.m[i] / corr1) / (np.sqrt(self.v[i] / corr2) + self.eps)


def make_optimizer(cfg: RunConfig, params: list[Tensor]):
    name = cfg.train.optimizer.lower()
    if name == "sgd":
        return Sgd(params, cfg.train.learning_rate)
    if name == "adam":
        return Adam(params, cfg.train.learning_rate)
    raise ConfigError(f"unknown optimizer {cfg.train.optimizer!r}")


@dataclass
class TrainResult:
    losses: list[float]
    model: FusionModel
    corpus: list[CorpusItem]


def train_toy(cfg: RunConfig, corpus: list[CorpusItem] | None = None,
              model: FusionModel | None = None, diagnostics_dir=None) -> TrainResult:
    """Run ``cfg.train.steps`` updates cycling through the corpus.

    A non-finite loss aborts with a diagnostic dump of the last state.
    """
    if corpus is None:
        corpus = build_corpus(cfg)
    if not corpus:
        raise ConfigError("training needs at least one scene")
    if model is None:
        model = FusionModel(cfg, np.random.default_rng(np.random.PCG64(cfg.run.seed)))
    opt = make_optimizer(cfg, model.parameters())

    losses: list[float] = []
    for step in range(cfg.train.steps):
        item = corpus[step % len(corpus)]
        try:
            with GradTape() as tape:
                result = model.forward(item.scene, item.proposals, item.depth_dists)
                loss = detection_loss(result, item.scene.gt_boxes, model.grid, cfg)
            tape.backward(loss)
            if cfg.train.learning_rate != 0.0:
                opt.step(tape)
            losses.append(loss.item())
        except NumericError as e:
            if diagnostics_dir is not None:
                atomic_write_json(
                    f"{diagnostics_dir}/divergence.json",
                    {"step": step, "losses": losses, "error": str(e)})
            raise NumericError(f"training diverged at step {step}: {e}") from e
    return TrainResult(losses=losses, model=model, corpus=corpus)


def eval_loss(model: FusionModel, corpus: list[CorpusItem], cfg: RunConfig) -> float:
    """Mean detection loss over a corpus without recording gradients."""
    total = 0.0
    for item in corpus:
        result = model.forward(item.scene, item.proposals, item.depth_dists)
        total += detection_loss(result, item.scene.gt_boxes, model.grid, cfg).item()
    return total / len(corpus)

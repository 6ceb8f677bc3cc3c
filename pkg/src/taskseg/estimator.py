"""scikit-learn style estimator wrapping the task-conditioned joint training loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import gradkernel as gk
from .annotations import (
    ClassTable,
    PanopticLabel,
    TaskKind,
    derive_task_gt,
    format_meta,
    parse_meta,
    sample_task,
)
from .config import Config
from .gradkernel import FormatError
from .losses import LossWeights, Temperature, contrastive_loss, target_masks, total_loss
from .matcher import match_stage
from .model import SegmentationOutput, TaskSegmenter, build_model
from .postproc import instance_inference, panoptic_inference, semantic_inference
from .textgen import build_text_list
from .validation import check_images, check_labels

log = logging.getLogger(__name__)

_META_SPLIT = "\n%%classes\n"


class TrainingError(ArithmeticError):
    pass


@dataclass
class TraceRow:
    iteration: int
    total: float
    contrastive: float
    cls: float
    bce: float
    dice: float

    def format(self) -> str:
        return (f"{self.iteration}\t{self.total:.6f}\t{self.contrastive:.6f}\t"
                f"{self.cls:.6f}\t{self.bce:.6f}\t{self.dice:.6f}")


class AdamW:
    """Adaptive moments with weight decay applied directly to the parameters."""

    def __init__(self, params: Sequence[gk.Tensor], lr: float, weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(np.float32)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: Sequence[gk.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class TaskConditionedSegmenter(BaseEstimator):
    """One set of weights for panoptic, instance and semantic segmentation.

    Parameters
    ----------
    classes : ClassTable
        The label space; required before ``fit``.
    config : Config, optional
        Model, loss, optimizer and post-processing settings. Defaults are the
        desk-scale ones.
    random_state : int, optional
        Overrides ``config.train.seed`` when given.
    """

    def __init__(self, classes: ClassTable | None = None, config: Config | None = None,
                 random_state: int | None = None):
        self.classes = classes
        self.config = config
        self.random_state = random_state

    # -- configuration ---------------------------------------------------

    def _resolved_config(self) -> Config:
        cfg = copy.deepcopy(self.config) if self.config is not None else Config()
        if self.random_state is not None:
            cfg.train.seed = int(self.random_state)
        return cfg.validate()

    def _weights(self) -> LossWeights:
        lc = self.config_.loss
        return LossWeights(lc.contrastive, lc.cls, lc.bce, lc.dice, lc.no_object)

    def parameters(self) -> list[tuple[str, gk.Tensor]]:
        params = [("temperature.log_tau", self.temperature_.log_tau)]
        params += [(f"model.{n}", p) for n, p in self.model_.named_parameters()]
        return params

    # -- training ---------------------------------------------------------

    def fit(self, X, y, callback=None) -> "TaskConditionedSegmenter":
        """Joint training: each sample gets a uniformly drawn task."""
        if self.classes is None:
            raise ValueError("classes must be set before fit")
        images = check_images(X)
        labels = check_labels(y, images, self.classes)
        self.config_ = cfg = self._resolved_config()
        self.model_ = build_model(cfg, self.classes)
        self.temperature_ = Temperature(cfg.loss.tau_init_inv)
        params = [p for _, p in self.parameters()]
        opt = AdamW(params, cfg.train.lr, cfg.train.weight_decay, (cfg.train.beta1, cfg.train.beta2))
        rng = np.random.default_rng([cfg.train.seed, 1])
        weights = self._weights()
        self.trace_: list[TraceRow] = []
        for it in range(cfg.train.iterations):
            batch = []
            for _ in range(cfg.contrastive.window):
                i = int(rng.integers(len(images)))
                batch.append((images[i], labels[i], sample_task(rng)))
            loss, row = self._loss(batch, weights, it)
            opt.zero_grad()
            gk.backward(loss)
            clip_grad_norm(params, cfg.train.grad_clip)
            opt.step()
            self.trace_.append(row)
            if callback is not None:
                callback(row)
            if it % 50 == 0:
                log.info("iter %d total %.4f", it, row.total)
        self.n_iter_ = cfg.train.iterations
        return self

    def _loss(self, batch, weights: LossWeights, iteration: int) -> tuple[gk.Tensor, TraceRow]:
        model = self.model_
        cfg = self.config_
        totals, parts, obj_rows, txt_rows = [], [], [], []
        for image, label, task in batch:
            gt = derive_task_gt(label, self.classes, task)
            out, bundle = model(image, task)
            masks = target_masks(gt, out.mask_logits.shape[1:])
            matches = [match_stage(c.data, m.data, gt.class_ids, masks, weights) for c, m in out.stages()]
            breakdown = total_loss(out, matches, gt, 0.0, weights)
            totals.append(breakdown.total)
            parts.append((breakdown.cls, breakdown.bce, breakdown.dice))
            if weights.contrastive > 0:
                text_queries = model.text_mapper(build_text_list(gt, self.classes, cfg.model.num_text))
                obj_rows.append(gk.mean(bundle.object_queries, axis=0, keepdims=True))
                txt_rows.append(gk.mean(text_queries, axis=0, keepdims=True))
        loss = totals[0]
        for t in totals[1:]:
            loss = loss + t
        loss = loss * (1.0 / len(totals))
        cl_value = 0.0
        if obj_rows:
            cl = contrastive_loss(gk.concat(obj_rows), gk.concat(txt_rows), self.temperature_, cfg.loss.normalize)
            loss = loss + cl * weights.contrastive
            cl_value = float(cl.data)
        mean_parts = np.mean(np.array(parts), axis=0)
        row = TraceRow(iteration, float(loss.data), cl_value, *map(float, mean_parts))
        if not np.isfinite(row.total):
            raise TrainingError(
                f"non-finite loss at iteration {iteration}: contrastive={row.contrastive} "
                f"cls={row.cls} bce={row.bce} dice={row.dice}"
            )
        return loss, row

    # -- inference --------------------------------------------------------

    def forward(self, image: np.ndarray, task: TaskKind | str) -> SegmentationOutput:
        check_is_fitted(self, "model_")
        out, _ = self.model_(image, task)
        return out.detached()

    def predict(self, X, task: TaskKind | str = TaskKind.PANOPTIC) -> list:
        """Per-image predictions for ``task`` at full image resolution."""
        check_is_fitted(self, "model_")
        task = TaskKind(task)
        post = self.config_.post
        preds = []
        for image in check_images(X):
            out = self.forward(image, task)
            size = image.shape[:2]
            if task is TaskKind.PANOPTIC:
                preds.append(panoptic_inference(out, self.classes, post.object_threshold, post.overlap_threshold, size))
            elif task is TaskKind.INSTANCE:
                preds.append(instance_inference(out, self.classes, post.top_k, size))
            else:
                preds.append(semantic_inference(out, size))
        return preds

    def score(self, X, y: Sequence[PanopticLabel], task: TaskKind | str = TaskKind.PANOPTIC) -> float:
        """PQ, AP or mIoU depending on ``task``."""
        from .harness import evaluate_predictions

        report = evaluate_predictions(self, check_images(X), list(y), task)
        return report["primary"]

    # -- persistence ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "model_")
        meta = self.config_.to_text() + _META_SPLIT + format_meta(self.classes, [])
        gk.save_params(path, self.parameters(), metadata=meta)

    @classmethod
    def load(cls, path: str | Path) -> "TaskConditionedSegmenter":
        arrays, meta = gk.load_params(path)
        if _META_SPLIT not in meta:
            raise FormatError("checkpoint lacks its config block")
        cfg_text, class_text = meta.split(_META_SPLIT, 1)
        cfg = Config.from_text(cfg_text).validate()
        classes, _ = parse_meta(class_text)
        est = cls(classes=classes, config=cfg)
        est.config_ = cfg
        est.model_ = build_model(cfg, classes)
        est.temperature_ = Temperature(cfg.loss.tau_init_inv)
        state = {name: arr for name, arr in arrays.items()}
        est.temperature_.log_tau.data = state.pop("temperature.log_tau").reshape(())
        est.model_.load_state_dict({k[len("model."):]: v for k, v in state.items() if k.startswith("model.")})
        est.trace_ = []
        return est

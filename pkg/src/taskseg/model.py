"""Task-conditioned query former and mask-classification decoder.

Pipeline for one image and one task:

1. a patch-embedding stub turns the image into a 4-level feature pyramid
   (strides 4, 8, 16, 32);
2. "the task is {task}" becomes a task token;
3. N-1 copies of the task token are refined against the stride-4 features by
   a small transformer and the task token is appended, giving N queries;
4. 3L decoder stages cycle through strides 8, 16, 32 with masked
   cross-attention, self-attention and an FFN, emitting class logits over
   K+1 slots and mask logits (query x stride-4 feature product) after each.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradkernel as gk
from .annotations import ClassTable, TaskKind
from .config import Config, ConfigError, ModelConfig
from .gradkernel import ShapeError, Tensor
from .nn import Embedding, LayerNorm, Linear, MLP, Module, MultiHeadAttention, sinusoidal_positions
from .textgen import TASK_TEMPLATE, TextMapper, Vocabulary

STRIDES = (4, 8, 16, 32)
DECODER_STRIDES = (8, 16, 32)


@dataclass
class FeaturePyramid:
    levels: dict[int, Tensor]

    def __getitem__(self, stride: int) -> Tensor:
        try:
            return self.levels[stride]
        except KeyError:
            raise ConfigError(f"feature pyramid lacks the 1/{stride} level") from None


@dataclass
class SegmentationOutput:
    class_logits: Tensor
    mask_logits: Tensor
    aux: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    def stages(self) -> list[tuple[Tensor, Tensor]]:
        """All prediction sets that receive supervision, final last."""
        return list(self.aux) + [(self.class_logits, self.mask_logits)]

    def detached(self) -> "SegmentationOutput":
        return SegmentationOutput(
            self.class_logits.detach(),
            self.mask_logits.detach(),
            [(c.detach(), m.detach()) for c, m in self.aux],
        )


@dataclass
class QueryBundle:
    object_queries: Tensor
    task_token: Tensor
    text_queries: Tensor | None = None


def patchify(image: np.ndarray, stride: int) -> np.ndarray:
    """(H, W, C) -> (H/s, W/s, s*s*C) non-overlapping patches."""
    h, w, c = image.shape
    if h % stride or w % stride:
        raise ShapeError(f"image {h}x{w} is not divisible by stride {stride}")
    x = image.reshape(h // stride, stride, w // stride, stride, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(h // stride, w // stride, stride * stride * c)


class FeatureStub(Module):
    """Strided linear patch embeddings standing in for backbone + pixel decoder."""

    def __init__(self, channels: int, d: int, rng: np.random.Generator):
        self.embeds = [Linear(s * s * channels, d, rng) for s in STRIDES]

    def __call__(self, image) -> FeaturePyramid:
        image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
        h, w = image.shape[:2]
        if h % 32 or w % 32:
            raise ShapeError(f"image extents must be divisible by 32, got {h}x{w}")
        levels = {}
        for stride, embed in zip(STRIDES, self.embeds):
            levels[stride] = embed(gk.tensor(patchify(image, stride)))
        return FeaturePyramid(levels)


def toy_feature_stub(image, stub: FeatureStub) -> FeaturePyramid:
    return stub(image)


def prepare_image(image: np.ndarray) -> np.ndarray:
    """uint8 RGB -> float32 centred on zero."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0 - 0.5
    return image.astype(np.float32)


class _CrossBlock(Module):
    """Pre-norm cross-attention, self-attention, FFN; each residual."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.norm_cross = LayerNorm(d)
        self.cross = MultiHeadAttention(d, heads, rng)
        self.norm_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, rng)
        self.norm_ffn = LayerNorm(d)
        self.ffn = MLP(d, 2 * d, d, rng)

    def __call__(self, q: Tensor, memory: Tensor, memory_pos: np.ndarray, query_pos: Tensor, mask=None) -> Tensor:
        h = self.norm_cross(q)
        q = q + self.cross(h, memory, memory, mask=mask, query_pos=query_pos, key_pos=memory_pos)
        h = self.norm_self(q)
        q = q + self.self_attn(h, h, h, query_pos=query_pos, key_pos=query_pos)
        return q + self.ffn(self.norm_ffn(q))

    def zero_residuals(self) -> None:
        for lin in (self.cross.out_proj, self.self_attn.out_proj, self.ffn.fc2):
            lin.weight.data[...] = 0
            lin.bias.data[...] = 0


class TaskSegmenter(Module):
    """Image + task -> SegmentationOutput; also owns the text mapper."""

    def __init__(self, cfg: ModelConfig, classes: ClassTable, vocab: Vocabulary, rng: np.random.Generator,
                 task_token: bool = True, query_init: str = "task", context: bool = True):
        d = cfg.hidden_dim
        self.cfg = cfg
        self.classes = classes
        self.vocab = vocab
        self.use_task_token = task_token
        self.query_init = query_init
        self.num_classes = len(classes)
        self.stub = FeatureStub(3, d, rng)
        self.pixel_norm = LayerNorm(d)
        self.pixel_mlp = MLP(d, 2 * d, d, rng)
        self.level_norms = [LayerNorm(d) for _ in DECODER_STRIDES]
        self.task_embed = Embedding(len(vocab), d, rng, scale=1.0)
        self.task_proj = Linear(d, d, rng)
        self.task_norm = LayerNorm(d)
        self.query_pos = gk.parameter(rng.normal(0.0, 0.5, (cfg.num_queries, d)))
        self.init_blocks = [_CrossBlock(d, cfg.heads, rng) for _ in range(cfg.init_layers)]
        self.stages = [_CrossBlock(d, cfg.heads, rng) for _ in range(3 * cfg.dec_layers)]
        self.decoder_norm = LayerNorm(d)
        self.class_head = Linear(d, self.num_classes + 1, rng)
        self.mask_embed = MLP(d, d, d, rng)
        self.text_mapper = TextMapper(
            vocab, d, cfg.num_ctx if context else 0, cfg.text_layers, cfg.heads, cfg.token_width, rng
        )
        self._pos_cache: dict[tuple[int, int], np.ndarray] = {}

    # -- pieces -------------------------------------------------------------

    def _pos(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._pos_cache:
            self._pos_cache[key] = sinusoidal_positions(h, w, self.cfg.hidden_dim)
        return self._pos_cache[key]

    def features(self, image: np.ndarray) -> FeaturePyramid:
        return self.stub(prepare_image(image))

    def mask_features(self, pyramid: FeaturePyramid) -> Tensor:
        """Stride-4 features with positions mixed in; shape (h*w, D)."""
        f = pyramid[4]
        h, w, d = f.shape
        x = gk.reshape(f, (h * w, d)) + self._pos(h, w)
        return x + self.pixel_mlp(self.pixel_norm(x))

    def make_task_token(self, task: TaskKind | str) -> Tensor:
        task = TaskKind(task)
        if not self.use_task_token:
            return gk.tensor(np.zeros((1, self.cfg.hidden_dim)))
        seq = self.vocab.tokenize(TASK_TEMPLATE.format(task.value), self.cfg.token_width)
        ids = np.array(seq.ids[: seq.length])
        pooled = gk.mean(self.task_embed(ids), axis=0, keepdims=True)
        return self.task_norm(self.task_proj(pooled))

    def repeat_token(self, token: Tensor) -> Tensor:
        n = self.cfg.num_queries - 1
        if self.query_init == "zeros":
            return gk.tensor(np.zeros((n, self.cfg.hidden_dim)))
        return gk.take(token, np.zeros(n, dtype=np.int64), axis=0)

    def init_queries(self, token: Tensor, pyramid: FeaturePyramid, mask_feats: Tensor | None = None) -> Tensor:
        if mask_feats is None:
            mask_feats = self.mask_features(pyramid)
        h, w = pyramid[4].shape[:2]
        pos = self._pos(h, w)
        q = self.repeat_token(token)
        qpos = self.query_pos[: self.cfg.num_queries - 1]
        for block in self.init_blocks:
            q = block(q, mask_feats, pos, qpos)
        return gk.concat([q, token], axis=0)

    def heads(self, q: Tensor, mask_feats: Tensor, hw: tuple[int, int]) -> tuple[Tensor, Tensor]:
        qn = self.decoder_norm(q)
        cls = self.class_head(qn)
        emb = self.mask_embed(qn)
        masks = gk.matmul(emb, gk.transpose(mask_feats))
        return cls, gk.reshape(masks, (q.shape[0], *hw))

    def decoder_forward(self, queries: Tensor, pyramid: FeaturePyramid, mask_feats: Tensor | None = None) -> SegmentationOutput:
        if mask_feats is None:
            mask_feats = self.mask_features(pyramid)
        hw = pyramid[4].shape[:2]
        q = queries
        preds = [self.heads(q, mask_feats, hw)]
        for i, stage in enumerate(self.stages):
            stride = DECODER_STRIDES[i % 3]
            level = pyramid[stride]
            lh, lw, d = level.shape
            memory = self.level_norms[i % 3](gk.reshape(level, (lh * lw, d)))
            attn_mask = attention_mask(preds[-1][1].data, (lh, lw))
            q = stage(q, memory, self._pos(lh, lw), self.query_pos, attn_mask)
            preds.append(self.heads(q, mask_feats, hw))
        final_cls, final_mask = preds[-1]
        return SegmentationOutput(final_cls, final_mask, preds[:-1])

    # -- full forward ------------------------------------------------------

    def __call__(self, image: np.ndarray, task: TaskKind | str) -> tuple[SegmentationOutput, QueryBundle]:
        pyramid = self.features(image)
        mask_feats = self.mask_features(pyramid)
        token = self.make_task_token(task)
        queries = self.init_queries(token, pyramid, mask_feats)
        out = self.decoder_forward(queries, pyramid, mask_feats)
        return out, QueryBundle(queries, token)


def resize_nearest(masks: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of (..., h, w) to (..., H, W)."""
    h, w = masks.shape[-2:]
    rows = np.minimum(((np.arange(size[0]) + 0.5) * h / size[0]).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(size[1]) + 0.5) * w / size[1]).astype(np.int64), w - 1)
    return masks[..., rows[:, None], cols[None, :]]


def attention_mask(mask_logits: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Block keys where the previous mask probability is below 0.5."""
    small = resize_nearest(mask_logits, size)
    return (small < 0).reshape(mask_logits.shape[0], -1)


def build_model(cfg: Config, classes: ClassTable, vocab: Vocabulary | None = None) -> TaskSegmenter:
    vocab = vocab if vocab is not None else Vocabulary.from_classes(classes)
    rng = np.random.default_rng(cfg.train.seed)
    return TaskSegmenter(
        cfg.model, classes, vocab, rng,
        task_token=cfg.ablation.task_token,
        query_init=cfg.ablation.query_init,
        context=cfg.ablation.context,
    )

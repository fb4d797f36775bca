"""
Grid-conditioned causal transformer story generator.

The input is one causal stream: image tokens, character tokens, object tokens,
an optional grid token, then [BOS] and the story. Condition tokens come from
single feedforward encoders over the ingested feature vectors; the grid token
encodes the flattened, zero-padded grid. Position ids are slots in a fixed
frame (n_max image slots, m_max character slots, o_max object slots, one grid
slot, then text), so a text token's position id never depends on how many
condition tokens a sequence has.
"""

import logging
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from scripts import chargrid
from scripts.corpus import BOS_ID
from scripts.numerics import (
    MASK_VALUE,
    ParamStore,
    add,
    add_backward,
    check_finite,
    cross_entropy_masked,
    cross_entropy_masked_backward,
    dropout,
    dropout_backward,
    embedding,
    embedding_backward,
    gelu,
    gelu_backward,
    init_normal,
    layer_norm,
    layer_norm_backward,
    matmul,
    matmul_backward,
    softmax,
    softmax_backward,
)
from scripts.utils import ConfigError, SizeError

logger = logging.getLogger(__name__)

SEG_IMAGE, SEG_CHARACTER, SEG_GRID, SEG_TEXT = range(4)
N_SEGMENTS = 4
FEATURE_SETS = ("global", "char", "obj")
GRID_MODES = ("none", "char", "obj", "entity")

# feature set and grid mode of each model in the reference comparison
VARIANTS = {
    "gpt2": (("global",), "none"),
    "gpt2+obj": (("global", "obj"), "none"),
    "gpt2+char": (("global", "char"), "none"),
    "gpt2+obj,char": (("global", "char", "obj"), "none"),
    "objgrid": (("global", "obj"), "obj"),
    "chargrid": (("global", "char"), "char"),
    "entigrid": (("global", "char", "obj"), "entity"),
}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feat_dim: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 0
    t_max: int = 256
    n_max: int = 10
    m_max: int = 5
    o_max: int = 20
    features: tuple = ("global", "char")
    grid_mode: str = "char"
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        # canonical feature order keeps configs comparable
        object.__setattr__(
            self, "features", tuple(f for f in FEATURE_SETS if f in set(self.features))
        )

    @property
    def ff_width(self):
        return self.d_ff or 4 * self.d_model

    @property
    def grid_width(self):
        return {
            "none": 0,
            "char": self.m_max,
            "obj": self.o_max,
            "entity": self.m_max + self.o_max,
        }[self.grid_mode]

    @property
    def grid_size(self):
        return self.n_max * self.grid_width

    @property
    def image_slots(self):
        return self.n_max if "global" in self.features else 0

    @property
    def char_slots(self):
        return self.m_max if "char" in self.features else 0

    @property
    def obj_slots(self):
        return self.o_max if "obj" in self.features else 0

    @property
    def grid_slot(self):
        return self.image_slots + self.char_slots + self.obj_slots

    @property
    def text_offset(self):
        return self.grid_slot + 1

    @property
    def n_positions(self):
        # [BOS] plus up to t_max story tokens
        return self.text_offset + self.t_max + 1

    def validate(self):
        for name in ("vocab_size", "feat_dim", "d_model", "n_heads", "t_max", "n_max"):
            if getattr(self, name) < 1:
                raise ConfigError("{} must be positive".format(name))
        if self.n_layers < 0 or self.m_max < 0 or self.o_max < 0 or self.d_ff < 0:
            raise ConfigError("layer count, frame widths and d_ff must be non-negative")
        if self.d_model % self.n_heads:
            raise ConfigError(
                "d_model {} is not divisible by n_heads {}".format(self.d_model, self.n_heads)
            )
        if self.grid_mode not in GRID_MODES:
            raise ConfigError("unknown grid mode `{}`".format(self.grid_mode))
        needed = {"none": (), "char": ("char",), "obj": ("obj",), "entity": ("char", "obj")}
        missing = [f for f in needed[self.grid_mode] if f not in self.features]
        if missing:
            raise ConfigError(
                "grid mode `{}` needs features {}".format(self.grid_mode, ", ".join(missing))
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        return self

    def to_text(self):
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append("{}={}".format(f.name, value))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key not in types:
                raise ConfigError("unknown model config key `{}`".format(key))
            kind = types[key]
            if kind is tuple:
                kwargs[key] = tuple(v for v in value.split(",") if v)
            else:
                kwargs[key] = kind(value)
        return cls(**kwargs)


def variant_config(name, **kwargs):
    if name not in VARIANTS:
        raise ConfigError(
            "unknown variant `{}`; choose from {}".format(name, ", ".join(VARIANTS))
        )
    features, grid_mode = VARIANTS[name]
    return ModelConfig(features=features, grid_mode=grid_mode, **kwargs).validate()


@dataclass(frozen=True, eq=False)
class Layout:
    """One assembled input sequence.

    Positions are ordered images, characters, objects, grid, text; ``tokens``
    holds [BOS] followed by the story ids.
    """

    segments: np.ndarray
    positions: np.ndarray
    image_feats: np.ndarray
    char_feats: np.ndarray
    obj_feats: np.ndarray
    grid: object
    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray

    @property
    def length(self):
        return int(self.segments.shape[0])

    @property
    def prefix_length(self):
        return self.length - int(self.tokens.shape[0])


class StoryGenModel:
    def __init__(self, config, store):
        self.config = config
        self.store = store

    def n_params(self):
        return self.store.n_params()


def build_model(config):
    """Seed-deterministic initialization: weights ~ N(0, 0.02), biases 0, norms 1/0."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    store = ParamStore()
    d, D = config.d_model, config.feat_dim

    def linear(name, n_in, n_out):
        store.add(name + ".w", init_normal(rng, (n_in, n_out)))
        store.add(name + ".b", np.zeros(n_out))

    def norm(name):
        store.add(name + ".g", np.ones(d))
        store.add(name + ".b", np.zeros(d))

    if "global" in config.features:
        linear("global_enc", D, d)
    if "char" in config.features:
        linear("char_enc", D, d)
    if "obj" in config.features:
        linear("obj_enc", D, d)
    if config.grid_mode != "none":
        linear("grid_enc", config.grid_size, d)
    store.add("tok_emb", init_normal(rng, (config.vocab_size, d)))
    store.add("pos_emb", init_normal(rng, (config.n_positions, d)))
    store.add("seg_emb", init_normal(rng, (N_SEGMENTS, d)))
    for i in range(config.n_layers):
        prefix = "blocks.{}.".format(i)
        norm(prefix + "ln1")
        linear(prefix + "attn.qkv", d, 3 * d)
        linear(prefix + "attn.proj", d, d)
        norm(prefix + "ln2")
        linear(prefix + "mlp.fc", d, config.ff_width)
        linear(prefix + "mlp.proj", config.ff_width, d)
    norm("ln_f")
    linear("head", d, config.vocab_size)
    store.zero_grad()
    logger.debug("Built model with {} parameters".format(store.n_params()))
    return StoryGenModel(config, store)


def _grid_for(config, seq):
    grid = {
        "char": chargrid.compute_grid,
        "obj": chargrid.compute_object_grid,
        "entity": chargrid.compute_entity_grid,
    }[config.grid_mode](seq)
    return chargrid.flatten_pad(grid, config.n_max, config.grid_width)


def assemble_input(config, seq, story_ids):
    """Lay out condition tokens, [BOS] and the story; loss on story predictions only."""
    story_ids = [int(t) for t in story_ids]
    if len(story_ids) > config.t_max:
        raise SizeError(
            "story of {} tokens exceeds T_max {}".format(len(story_ids), config.t_max),
            seq.id,
        )
    dim = config.feat_dim
    empty = np.zeros((0, dim))
    segments, positions = [], []

    image_feats = empty
    if "global" in config.features:
        image_feats = seq.image_matrix()
        if image_feats.shape[0] > config.n_max:
            raise SizeError("more than {} images".format(config.n_max), seq.id)
        segments += [SEG_IMAGE] * image_feats.shape[0]
        positions += list(range(image_feats.shape[0]))

    char_feats = empty
    if "char" in config.features:
        char_feats = seq.character_matrix()
        if char_feats.shape[0] > config.m_max:
            raise SizeError("more than {} characters".format(config.m_max), seq.id)
        segments += [SEG_CHARACTER] * char_feats.shape[0]
        positions += [config.image_slots + b for b in range(char_feats.shape[0])]

    obj_feats = empty
    if "obj" in config.features:
        obj_feats = seq.object_matrix()
        if obj_feats.shape[0] > config.o_max:
            raise SizeError("more than {} objects".format(config.o_max), seq.id)
        segments += [SEG_CHARACTER] * obj_feats.shape[0]
        offset = config.image_slots + config.char_slots
        positions += [offset + k for k in range(obj_feats.shape[0])]

    grid = None
    if config.grid_mode != "none":
        grid = _grid_for(config, seq)
        segments.append(SEG_GRID)
        positions.append(config.grid_slot)

    tokens = np.array([BOS_ID] + story_ids, dtype=np.int64)
    prefix = len(segments)
    segments += [SEG_TEXT] * tokens.shape[0]
    positions += [config.text_offset + j for j in range(tokens.shape[0])]

    length = len(segments)
    targets = np.zeros(length, dtype=np.int64)
    loss_mask = np.zeros(length, dtype=bool)
    targets[prefix : prefix + len(story_ids)] = story_ids
    loss_mask[prefix : prefix + len(story_ids)] = True
    return Layout(
        segments=np.array(segments, dtype=np.int64),
        positions=np.array(positions, dtype=np.int64),
        image_feats=image_feats,
        char_feats=char_feats,
        obj_feats=obj_feats,
        grid=grid,
        tokens=tokens,
        targets=targets,
        loss_mask=loss_mask,
    )


def drop_segment(layout, segment):
    """Remove every position of one condition segment from a layout."""
    if segment == SEG_TEXT:
        raise ConfigError("the text segment cannot be dropped")
    keep = layout.segments != segment
    changes = {}
    if segment == SEG_GRID:
        changes["grid"] = None
    elif segment == SEG_IMAGE:
        changes["image_feats"] = layout.image_feats[:0]
    else:
        changes["char_feats"] = layout.char_feats[:0]
        changes["obj_feats"] = layout.obj_feats[:0]
    return replace(
        layout,
        segments=layout.segments[keep],
        positions=layout.positions[keep],
        targets=layout.targets[keep],
        loss_mask=layout.loss_mask[keep],
        **changes,
    )


def _encoder_rows(P, layout):
    """(param prefix, inputs) for each condition block, in layout order."""
    blocks = []
    if layout.image_feats.shape[0]:
        blocks.append(("global_enc", layout.image_feats))
    if layout.char_feats.shape[0]:
        blocks.append(("char_enc", layout.char_feats))
    if layout.obj_feats.shape[0]:
        blocks.append(("obj_enc", layout.obj_feats))
    if layout.grid is not None:
        blocks.append(("grid_enc", layout.grid.reshape(1, -1)))
    return blocks


def _attention_forward(x, P, prefix, n_heads, rate, rng):
    T, d = x.shape
    hd = d // n_heads
    qkv = add(matmul(x, P[prefix + "attn.qkv.w"]), P[prefix + "attn.qkv.b"])
    q, k, v = (
        part.reshape(T, n_heads, hd).transpose(1, 0, 2) for part in np.split(qkv, 3, axis=1)
    )
    causal = np.triu(np.full((T, T), MASK_VALUE), k=1)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(hd) + causal
    att = softmax(scores)
    ctx = (att @ v).transpose(1, 0, 2).reshape(T, d)
    out = add(matmul(ctx, P[prefix + "attn.proj.w"]), P[prefix + "attn.proj.b"])
    out, drop_mask = dropout(out, rate, rng)
    return out, (x, q, k, v, att, ctx, drop_mask)


def _attention_backward(grad, cache, P, prefix, n_heads, store):
    x, q, k, v, att, ctx, drop_mask = cache
    T, d = x.shape
    hd = d // n_heads
    grad = dropout_backward(grad, drop_mask)
    dctx, dw = matmul_backward(grad, ctx, P[prefix + "attn.proj.w"])
    store.accumulate(prefix + "attn.proj.w", dw)
    store.accumulate(prefix + "attn.proj.b", grad.sum(axis=0))
    dctx = dctx.reshape(T, n_heads, hd).transpose(1, 0, 2)
    datt = dctx @ v.transpose(0, 2, 1)
    dv = att.transpose(0, 2, 1) @ dctx
    dscores = softmax_backward(datt, att) / math.sqrt(hd)
    dq = dscores @ k
    dk = dscores.transpose(0, 2, 1) @ q
    dqkv = np.concatenate(
        [g.transpose(1, 0, 2).reshape(T, d) for g in (dq, dk, dv)], axis=1
    )
    dx, dw = matmul_backward(dqkv, x, P[prefix + "attn.qkv.w"])
    store.accumulate(prefix + "attn.qkv.w", dw)
    store.accumulate(prefix + "attn.qkv.b", dqkv.sum(axis=0))
    return dx


def _block_forward(x, P, i, config, rng):
    prefix = "blocks.{}.".format(i)
    h1, ln1 = layer_norm(x, P[prefix + "ln1.g"], P[prefix + "ln1.b"])
    attn_out, attn_cache = _attention_forward(h1, P, prefix, config.n_heads, config.dropout, rng)
    x1 = x + attn_out
    h2, ln2 = layer_norm(x1, P[prefix + "ln2.g"], P[prefix + "ln2.b"])
    pre = add(matmul(h2, P[prefix + "mlp.fc.w"]), P[prefix + "mlp.fc.b"])
    act = gelu(pre)
    mlp_out = add(matmul(act, P[prefix + "mlp.proj.w"]), P[prefix + "mlp.proj.b"])
    mlp_out, drop_mask = dropout(mlp_out, config.dropout, rng)
    return x1 + mlp_out, (ln1, attn_cache, ln2, h2, pre, act, drop_mask)


def _block_backward(grad, cache, P, i, config, store):
    prefix = "blocks.{}.".format(i)
    ln1, attn_cache, ln2, h2, pre, act, drop_mask = cache
    dmlp = dropout_backward(grad, drop_mask)
    dact, dw = matmul_backward(dmlp, act, P[prefix + "mlp.proj.w"])
    store.accumulate(prefix + "mlp.proj.w", dw)
    store.accumulate(prefix + "mlp.proj.b", dmlp.sum(axis=0))
    dpre = gelu_backward(dact, pre)
    dh2, dw = matmul_backward(dpre, h2, P[prefix + "mlp.fc.w"])
    store.accumulate(prefix + "mlp.fc.w", dw)
    store.accumulate(prefix + "mlp.fc.b", dpre.sum(axis=0))
    dx1, dg, db = layer_norm_backward(dh2, ln2)
    store.accumulate(prefix + "ln2.g", dg)
    store.accumulate(prefix + "ln2.b", db)
    dx1 = dx1 + grad
    dh1 = _attention_backward(dx1, attn_cache, P, prefix, config.n_heads, store)
    dx, dg, db = layer_norm_backward(dh1, ln1)
    store.accumulate(prefix + "ln1.g", dg)
    store.accumulate(prefix + "ln1.b", db)
    return dx + dx1


def _forward(model, layout, rng=None):
    config, P = model.config, model.store.params
    d = config.d_model
    x = np.zeros((layout.length, d))
    offset = 0
    encoders = _encoder_rows(P, layout)
    for name, inputs in encoders:
        n = inputs.shape[0]
        x[offset : offset + n] = add(matmul(inputs, P[name + ".w"]), P[name + ".b"])
        offset += n
    x[offset:] = embedding(P["tok_emb"], layout.tokens)
    x = x + embedding(P["pos_emb"], layout.positions) + embedding(P["seg_emb"], layout.segments)
    x, drop_mask = dropout(x, config.dropout, rng)

    block_caches = []
    for i in range(config.n_layers):
        x, block_cache = _block_forward(x, P, i, config, rng)
        block_caches.append(block_cache)
    h, ln_cache = layer_norm(x, P["ln_f.g"], P["ln_f.b"])
    logits = add(matmul(h, P["head.w"]), P["head.b"])
    check_finite(logits, "logits of sequence")
    return logits, (encoders, drop_mask, block_caches, ln_cache, h)


def _backward(model, layout, cache, dlogits):
    config, P, store = model.config, model.store.params, model.store
    encoders, drop_mask, block_caches, ln_cache, h = cache
    dh, dw = matmul_backward(dlogits, h, P["head.w"])
    store.accumulate("head.w", dw)
    store.accumulate("head.b", dlogits.sum(axis=0))
    dx, dg, db = layer_norm_backward(dh, ln_cache)
    store.accumulate("ln_f.g", dg)
    store.accumulate("ln_f.b", db)
    for i in reversed(range(config.n_layers)):
        dx = _block_backward(dx, block_caches[i], P, i, config, store)
    dx = dropout_backward(dx, drop_mask)

    store.accumulate("pos_emb", embedding_backward(dx, layout.positions, config.n_positions))
    store.accumulate("seg_emb", embedding_backward(dx, layout.segments, N_SEGMENTS))
    prefix = layout.prefix_length
    store.accumulate(
        "tok_emb", embedding_backward(dx[prefix:], layout.tokens, config.vocab_size)
    )
    offset = 0
    for name, inputs in encoders:
        n = inputs.shape[0]
        rows = dx[offset : offset + n]
        _, dw = matmul_backward(rows, inputs, P[name + ".w"])
        _, db = add_backward(rows, rows.shape, P[name + ".b"].shape)
        store.accumulate(name + ".w", dw)
        store.accumulate(name + ".b", db)
        offset += n


def forward_logits(model, layout):
    """Evaluation-mode logits, one row per layout position."""
    logits, _ = _forward(model, layout)
    return logits


def loss_and_grad(model, layout, rng=None, scale=1.0):
    """Masked cross-entropy of one layout; adds ``scale`` x its gradient to the store.

    ``rng`` switches dropout on (training mode).
    """
    logits, cache = _forward(model, layout, rng)
    loss = cross_entropy_masked(logits, layout.targets, layout.loss_mask)
    dlogits = cross_entropy_masked_backward(logits, layout.targets, layout.loss_mask)
    _backward(model, layout, cache, dlogits * scale)
    return loss


def layout_loss(model, layout):
    logits = forward_logits(model, layout)
    return cross_entropy_masked(logits, layout.targets, layout.loss_mask)


def story_loss(model, seq, story_ids):
    """Mean next-token NLL over the story positions of one sequence."""
    return layout_loss(model, assemble_input(model.config, seq, story_ids))

"""Small vision-transformer classifier with the mixture adapter injected as
a parallel residual branch on each block's MLP.

Block layout: ``x + Attn(LN1(x))`` then ``x + MLP(LN2(x)) + s * Adapter(LN2(x))``.
The adapter starts at exactly zero (zeroed up-projections), so a freshly
attached adapter leaves logits bit-identical to the plain backbone, which is
the premise for adapting a pretrained source model in place.

Parameters live in a flat ``name -> Tensor`` map. The trainable partition for
test-time adaptation is "names containing '.adapter.'"; everything else is
frozen backbone state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adapter as adapter_mod
from .adapter import AdapterConfig, AdapterOutput, AdapterParams, ExpertParams, GateParams
from .autodiff import (
    Tape,
    Tensor,
    adam_init,
    adam_step,
    add,
    broadcast_to,
    concat,
    constant,
    index_axis,
    layer_norm,
    log_softmax_lastdim,
    matmul,
    mean_over_axis,
    mul,
    neg,
    relu,
    reshape,
    scale,
    softmax_lastdim,
    sum_over_axis,
    transpose,
)
from .container import load_container, save_container
from .errors import ConfigError, NumericError, PretrainError, ShapeError

Array = np.ndarray


@dataclass(frozen=True)
class BackboneConfig:
    image_side: int = 16
    patch_side: int = 4
    embed_dim: int = 32
    heads: int = 2
    depth: int = 2
    classes: int = 4
    mlp_hidden: int = 64
    adapter_scale: float = 0.1

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ConfigError(
                f"image side {self.image_side} not divisible by patch side {self.patch_side}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        for name in ("image_side", "patch_side", "embed_dim", "heads", "depth", "classes", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def patches(self) -> int:
        side = self.image_side // self.patch_side
        return side * side

    @property
    def tokens(self) -> int:
        return self.patches + 1  # class token

    def to_dict(self) -> dict:
        return {
            "image_side": self.image_side,
            "patch_side": self.patch_side,
            "embed_dim": self.embed_dim,
            "heads": self.heads,
            "depth": self.depth,
            "classes": self.classes,
            "mlp_hidden": self.mlp_hidden,
            "adapter_scale": self.adapter_scale,
        }


@dataclass
class ModelParams:
    cfg: BackboneConfig
    adapter_cfg: AdapterConfig | None
    tensors: dict[str, Tensor]

    def named(self) -> dict[str, Tensor]:
        return self.tensors

    def adapter_for_block(self, block: int) -> AdapterParams:
        assert self.adapter_cfg is not None
        t = self.tensors
        prefix = f"block{block}.adapter"
        specs = self.adapter_cfg.retention_specs()
        experts = [
            ExpertParams(
                w_down=t[f"{prefix}.expert{i}.w_down"],
                b_down=t[f"{prefix}.expert{i}.b_down"],
                w_up=t[f"{prefix}.expert{i}.w_up"],
                b_up=t[f"{prefix}.expert{i}.b_up"],
                spec=specs[i],
            )
            for i in range(self.adapter_cfg.experts)
        ]
        gates = GateParams(
            route_w=t[f"{prefix}.route.w"],
            route_b=t[f"{prefix}.route.b"],
            thresh_w=t[f"{prefix}.thresh.w"],
            thresh_b=t[f"{prefix}.thresh.b"],
        )
        return AdapterParams(experts=experts, gates=gates)


def _normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape))


def init_backbone(cfg: BackboneConfig, seed: int) -> ModelParams:
    """Backbone-only parameters (no adapter); deterministic given seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0]))
    d = cfg.embed_dim
    p2 = cfg.patch_side * cfg.patch_side
    t: dict[str, Tensor] = {
        "patch_embed.w": _normal(rng, (p2, d), np.sqrt(2.0 / p2)),
        "patch_embed.b": Tensor(np.zeros(d)),
        "cls_token": _normal(rng, (1, 1, d), 0.02),
        "pos_embed": _normal(rng, (1, cfg.tokens, d), 0.02),
        "final_ln.g": Tensor(np.ones(d)),
        "final_ln.b": Tensor(np.zeros(d)),
        "head.w": _normal(rng, (d, cfg.classes), 0.01),
        "head.b": Tensor(np.zeros(cfg.classes)),
    }
    attn_std = np.sqrt(1.0 / d)
    for i in range(cfg.depth):
        b = f"block{i}"
        t[f"{b}.ln1.g"] = Tensor(np.ones(d))
        t[f"{b}.ln1.b"] = Tensor(np.zeros(d))
        for proj in ("wq", "wk", "wv", "wo"):
            t[f"{b}.attn.{proj}"] = _normal(rng, (d, d), attn_std)
        for bias in ("bq", "bk", "bv", "bo"):
            t[f"{b}.attn.{bias}"] = Tensor(np.zeros(d))
        t[f"{b}.ln2.g"] = Tensor(np.ones(d))
        t[f"{b}.ln2.b"] = Tensor(np.zeros(d))
        t[f"{b}.mlp.w1"] = _normal(rng, (d, cfg.mlp_hidden), np.sqrt(2.0 / d))
        t[f"{b}.mlp.b1"] = Tensor(np.zeros(cfg.mlp_hidden))
        t[f"{b}.mlp.w2"] = _normal(rng, (cfg.mlp_hidden, d), np.sqrt(2.0 / cfg.mlp_hidden))
        t[f"{b}.mlp.b2"] = Tensor(np.zeros(d))
    return ModelParams(cfg=cfg, adapter_cfg=None, tensors=t)


def attach_adapter(params: ModelParams, adapter_cfg: AdapterConfig | None, seed: int) -> ModelParams:
    """New ModelParams sharing the backbone tensors, plus fresh adapter state.

    The adapter is introduced at adaptation time, never during pretraining,
    so checkpoints stay independent of the adapter configuration.
    """
    tensors = dict(params.tensors)
    if adapter_cfg is not None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAD]))
        for i in range(params.cfg.depth):
            block_params = adapter_mod.init_adapter_params(rng, params.cfg.embed_dim, adapter_cfg)
            tensors.update(
                adapter_mod.adapter_param_dict(block_params, prefix=f"block{i}.adapter")
            )
    return ModelParams(cfg=params.cfg, adapter_cfg=adapter_cfg, tensors=tensors)


def clone_params(params: ModelParams, share_frozen: bool = False) -> ModelParams:
    """Deep copy; with share_frozen only '.adapter.' tensors are copied and
    the rest alias the originals (teacher/student share the frozen backbone)."""
    tensors: dict[str, Tensor] = {}
    for name, t in params.tensors.items():
        if share_frozen and ".adapter." not in name:
            tensors[name] = t
        else:
            tensors[name] = Tensor(t.data.copy())
    return ModelParams(cfg=params.cfg, adapter_cfg=params.adapter_cfg, tensors=tensors)


def freeze_partition(params: ModelParams, mode: str = "adapter-only") -> dict[str, Tensor]:
    """Trainable view of the parameter map; everything else stays frozen."""
    if mode != "adapter-only":
        raise ConfigError(f"unknown freeze mode '{mode}'")
    return {name: t for name, t in sorted(params.tensors.items()) if ".adapter." in name}


def expert_parameters(params: ModelParams) -> dict[str, Tensor]:
    """Expert weights only (gates excluded); the set the proximal penalty covers."""
    return {name: t for name, t in sorted(params.tensors.items()) if ".adapter.expert" in name}


# ---------------------------------------------------------------------------
# forward


def _patchify(x: Tensor, cfg: BackboneConfig) -> Tensor:
    b = x.shape[0]
    g = cfg.image_side // cfg.patch_side
    ps = cfg.patch_side
    x = reshape(x, (b, g, ps, g, ps))
    x = transpose(x, (0, 1, 3, 2, 4))
    return reshape(x, (b, g * g, ps * ps))


def _attention(x: Tensor, t: dict[str, Tensor], prefix: str, cfg: BackboneConfig) -> Tensor:
    b, n, d = x.shape
    heads = cfg.heads
    dh = d // heads

    def split_heads(v: Tensor) -> Tensor:
        return transpose(reshape(v, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split_heads(add(matmul(x, t[f"{prefix}.wq"]), t[f"{prefix}.bq"]))
    k = split_heads(add(matmul(x, t[f"{prefix}.wk"]), t[f"{prefix}.bk"]))
    v = split_heads(add(matmul(x, t[f"{prefix}.wv"]), t[f"{prefix}.bv"]))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = softmax_lastdim(scores)
    out = matmul(attn, v)  # (b, heads, n, dh)
    out = reshape(transpose(out, (0, 2, 1, 3)), (b, n, d))
    return add(matmul(out, t[f"{prefix}.wo"]), t[f"{prefix}.bo"])


def _affine_ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return add(mul(layer_norm(x), g), b)


def encode(
    x,
    params: ModelParams,
    *,
    adapter: bool = True,
    activation_clamp: tuple[str, float] | None = None,
    collect: dict | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Forward pass. Returns (logits (b, C), tokens (b, n, d), feature (b, d)).

    x: (b, side, side) or (b, side*side) array or Tensor, pixel values in [0, 1].
    activation_clamp: ("high"|"low", q) retains only the top/bottom-q share
    of each block's MLP activation, the probe used by the saliency split.
    collect: optional dict populated with per-block adapter diagnostics.
    """
    cfg = params.cfg
    side2 = cfg.image_side * cfg.image_side
    if not isinstance(x, Tensor):
        # plain arrays never need pixel gradients; saliency passes a Tensor
        x = Tensor(np.asarray(x, dtype=np.float64), const=True)
    if x.ndim == 3 and x.shape[1:] == (cfg.image_side, cfg.image_side):
        x = reshape(x, (x.shape[0], side2))
    if x.ndim != 2 or x.shape[1] != side2:
        raise ShapeError(f"expected (b, {cfg.image_side}, {cfg.image_side}) images, got {x.shape}")
    if activation_clamp is not None:
        mode, q = activation_clamp
        if mode not in ("high", "low"):
            raise ConfigError(f"unknown activation clamp mode '{mode}'")
        if not 0.0 < q <= 1.0:
            raise ConfigError(f"activation clamp fraction must be in (0, 1], got {q}")

    t = params.tensors
    b = x.shape[0]
    tokens = add(matmul(_patchify(x, cfg), t["patch_embed.w"]), t["patch_embed.b"])
    cls = broadcast_to(t["cls_token"], (b, 1, cfg.embed_dim))
    tokens = concat([cls, tokens], axis=1)
    tokens = add(tokens, t["pos_embed"])

    use_adapter = adapter and params.adapter_cfg is not None
    for i in range(cfg.depth):
        pre = f"block{i}"
        normed1 = _affine_ln(tokens, t[f"{pre}.ln1.g"], t[f"{pre}.ln1.b"])
        tokens = add(tokens, _attention(normed1, t, f"{pre}.attn", cfg))
        normed2 = _affine_ln(tokens, t[f"{pre}.ln2.g"], t[f"{pre}.ln2.b"])
        hidden = relu(add(matmul(normed2, t[f"{pre}.mlp.w1"]), t[f"{pre}.mlp.b1"]))
        if activation_clamp is not None:
            mode, q = activation_clamp
            slots = hidden.shape[1] * hidden.shape[2]
            k = int(np.floor(slots * q + 1e-9))
            hidden, _ = adapter_mod.sparse_retain(hidden, max(1, k), keep_largest=(mode == "high"))
        mlp_out = add(matmul(hidden, t[f"{pre}.mlp.w2"]), t[f"{pre}.mlp.b2"])
        tokens = add(tokens, mlp_out)
        if use_adapter:
            out = adapter_mod.adapter_forward(normed2, params.adapter_for_block(i), params.adapter_cfg)
            tokens = add(tokens, scale(out.y, cfg.adapter_scale))
            if collect is not None:
                collect.setdefault("adapter", []).append(out)

    tokens = _affine_ln(tokens, t["final_ln.g"], t["final_ln.b"])
    feature = index_axis(tokens, 1, 0)  # class-token vector
    logits = add(matmul(feature, t["head.w"]), t["head.b"])
    logits.validate()
    return logits, tokens, feature


def predict(params: ModelParams, images: Array, batch: int = 64, adapter: bool = True) -> Array:
    """Argmax class ids, computed off-tape."""
    out = []
    for start in range(0, images.shape[0], batch):
        logits, _, _ = encode(images[start : start + batch], params, adapter=adapter)
        out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# source pretraining


def cross_entropy(
    logits: Tensor, labels: Array, classes: int, smoothing: float = 0.0
) -> Tensor:
    """Mean cross-entropy against (optionally label-smoothed) targets.

    Smoothing keeps the pretrained model calibrated instead of saturated,
    which the self-training stage depends on: augmentation-agreement only
    carries signal when confidence still varies across inputs.
    """
    targets = np.full((labels.shape[0], classes), smoothing / classes)
    targets[np.arange(labels.shape[0]), labels] += 1.0 - smoothing
    logp = log_softmax_lastdim(logits)
    picked = sum_over_axis(mul(logp, constant(targets)), axis=1)
    return neg(mean_over_axis(picked, axis=0))


@dataclass
class PretrainResult:
    params: ModelParams
    train_accuracy: float
    holdout_accuracy: float
    history: list[dict] = field(default_factory=list)


def pretrain_source(
    dataset,
    cfg: BackboneConfig,
    epochs: int,
    lr: float,
    seed: int,
    *,
    batch: int = 32,
    holdout_fraction: float = 0.2,
    threshold: float = 0.95,
    lr_decay_every: int = 12,
    lr_decay: float = 0.5,
    label_smoothing: float = 0.1,
) -> PretrainResult:
    """Train the backbone (no adapter) with cross-entropy until the held-out
    split clears ``threshold``; raises PretrainError otherwise.

    The dataset's trailing ``holdout_fraction`` is reserved for evaluation.
    The learning rate steps down by ``lr_decay`` every ``lr_decay_every``
    epochs. Deterministic given seed: init, shuffling and updates all derive
    from it.
    """
    params = init_backbone(cfg, seed)
    images, labels = dataset.images, dataset.labels
    n_hold = max(1, int(round(images.shape[0] * holdout_fraction)))
    n_train = images.shape[0] - n_hold
    if n_train < 1:
        raise ConfigError("dataset too small for the requested holdout fraction")
    train_x, train_y = images[:n_train], labels[:n_train]
    hold_x, hold_y = images[n_train:], labels[n_train:]

    trainable = {name: t for name, t in sorted(params.tensors.items())}
    opt = adam_init(trainable, lr=lr)
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5F]))
    history: list[dict] = []
    for epoch in range(epochs):
        opt.lr = lr * (lr_decay ** (epoch // max(1, lr_decay_every)))
        order = order_rng.permutation(n_train)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n_train, batch):
            idx = order[start : start + batch]
            with Tape() as tape:
                logits, _, _ = encode(train_x[idx], params, adapter=False)
                loss = cross_entropy(logits, train_y[idx], cfg.classes, label_smoothing)
                grads = tape.backward(loss)
            named_grads = {name: grads[t] for name, t in trainable.items() if t in grads}
            adam_step(trainable, named_grads, opt)
            epoch_loss += loss.item()
            batches += 1
        train_acc = float(np.mean(predict(params, train_x, adapter=False) == train_y))
        hold_acc = float(np.mean(predict(params, hold_x, adapter=False) == hold_y))
        history.append(
            {
                "epoch": epoch,
                "loss": epoch_loss / max(1, batches),
                "train_accuracy": train_acc,
                "holdout_accuracy": hold_acc,
            }
        )
    final = history[-1]
    if final["holdout_accuracy"] < threshold:
        raise PretrainError(
            f"held-out accuracy {final['holdout_accuracy']:.4f} below threshold {threshold}",
            accuracy=final["holdout_accuracy"],
        )
    return PretrainResult(
        params=params,
        train_accuracy=final["train_accuracy"],
        holdout_accuracy=final["holdout_accuracy"],
        history=history,
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    meta = {"backbone": params.cfg.to_dict(), "has_adapter": params.adapter_cfg is not None}
    save_container(
        path, "checkpoint", meta, {name: t.data for name, t in params.tensors.items()}
    )


def load_checkpoint(path: str | Path) -> ModelParams:
    header, arrays = load_container(path)
    if header["kind"] != "checkpoint":
        raise ConfigError(f"{path}: container kind '{header['kind']}' is not a checkpoint")
    cfg = BackboneConfig(**header["meta"]["backbone"])
    if header["meta"].get("has_adapter"):
        raise ConfigError("checkpoints with adapter state are not supported")
    tensors = {name: Tensor(arr) for name, arr in arrays.items()}
    return ModelParams(cfg=cfg, adapter_cfg=None, tensors=tensors)

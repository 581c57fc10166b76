"""Sparsity-split mixture-of-experts adapter.

The adapter decomposes an activation map into strong and weak components by
hard rank-based retention, routes tokens across a bank of two-layer
bottleneck experts, and modulates each expert's retention budget with a
learned per-sample threshold offset:

* ``sparse_retain`` keeps exactly ``k`` entries per sample slice, either the
  largest (shape/structure oriented experts) or the smallest (texture/style
  oriented experts). The selection itself is non-differentiable; retained
  entries pass gradients unchanged and dropped entries get zero gradient.
* the routing gate produces per-token convex weights over experts from the
  weak (bottom-half) component of the input, so routing keys on the part of
  the activation that tracks the current domain.
* the threshold gate pools the input over tokens and emits per-expert
  offsets in (-1, 1) that shift each expert's retention fraction by
  ``eta * offset``. Because the retained count is an integer, no gradient
  flows through the cutoff itself; the offset instead scales the retained
  activation by ``(1 + eta * offset)``, the minimal differentiable path that
  gives the gate a task gradient while keeping the hard selection intact.

Up-projections and all biases start at zero, so a freshly initialized
adapter is exactly the identity (contributes zero to its residual branch).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    constant,
    index_axis,
    matmul,
    mean_over_axis,
    mul,
    relu,
    reshape,
    scale,
    shift,
    softmax_lastdim,
    tanh,
    transpose,
)
from .errors import ConfigError, SelectionError, ShapeError

Array = np.ndarray

AXIS_TOKEN = "token"
AXIS_CHANNEL = "channel"


@dataclass(frozen=True)
class RetentionSpec:
    """How one expert slices its activation.

    fraction: base retention fraction in (0, 1].
    keep_largest: True keeps the strongest responses, False the weakest.
    axis: "token" ranks the flattened token-by-feature slice per sample;
          "channel" ranks each token's feature row independently.
    """

    fraction: float
    keep_largest: bool
    axis: str = AXIS_TOKEN

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"retention fraction must be in (0, 1], got {self.fraction}")
        if self.axis not in (AXIS_TOKEN, AXIS_CHANNEL):
            raise ConfigError(f"unknown retention axis '{self.axis}'")


@dataclass
class ExpertParams:
    """Two-layer bottleneck expert with its retention spec."""

    w_down: Tensor  # (d, h)
    b_down: Tensor  # (h,)
    w_up: Tensor  # (h, d)
    b_up: Tensor  # (d,)
    spec: RetentionSpec


@dataclass
class GateParams:
    """Affine maps for the routing gate and the threshold gate."""

    route_w: Tensor  # (E, d)
    route_b: Tensor  # (E,)
    thresh_w: Tensor  # (E, d)
    thresh_b: Tensor  # (E,)


@dataclass
class AdapterConfig:
    """Expert bank geometry, gating temperature and ablation toggles."""

    experts: int = 4
    hidden: int = 8
    eta: float = 0.1
    axis: str = AXIS_TOKEN
    schedule: list[tuple[float, bool]] | None = None
    use_sdd: bool = True
    use_dag: bool = True
    use_asg: bool = True
    use_hp: bool = True

    def __post_init__(self):
        if self.experts < 2 or self.experts % 2 != 0:
            raise ConfigError(f"expert count must be even and >= 2, got {self.experts}")
        if self.hidden < 1:
            raise ConfigError(f"hidden size must be >= 1, got {self.hidden}")
        if self.eta < 0:
            raise ConfigError(f"threshold temperature must be >= 0, got {self.eta}")
        if self.axis not in (AXIS_TOKEN, AXIS_CHANNEL):
            raise ConfigError(f"unknown retention axis '{self.axis}'")
        if self.schedule is not None:
            if len(self.schedule) != self.experts:
                raise ConfigError("schedule length must equal expert count")
            for q, _ in self.schedule:
                if not 0.0 < q <= 1.0:
                    raise ConfigError(f"schedule fraction {q} outside (0, 1]")

    def retention_specs(self) -> list[RetentionSpec]:
        pairs = self.schedule or default_retention_schedule(self.experts)
        return [RetentionSpec(q, keep, self.axis) for q, keep in pairs]


@dataclass
class AdapterParams:
    experts: list[ExpertParams]
    gates: GateParams


@dataclass
class AdapterOutput:
    """Forward result plus routing/threshold diagnostics.

    y: (b, n, d) mixed expert output.
    gate_weights: (b, n, E) convex routing weights.
    thresholds: (b, E) offsets in (-1, 1).
    masks: per expert, the boolean retention mask that was applied.
    counts: per expert, the per-sample retained-entry budget.
    """

    y: Tensor
    gate_weights: Tensor
    thresholds: Tensor
    masks: list[Array]
    counts: list[Array]


def default_retention_schedule(experts: int) -> list[tuple[float, bool]]:
    """Symmetric fraction ladder {1/E, 2/E, ..., 1/2} for each half.

    The first half keeps the largest responses, the second half the
    smallest, so the bank always splits evenly between strong-activation
    and weak-activation experts.
    """
    if experts < 2 or experts % 2 != 0:
        raise ConfigError(f"expert count must be even and >= 2, got {experts}")
    ladder = [(i + 1) / experts for i in range(experts // 2)]
    return [(q, True) for q in ladder] + [(q, False) for q in ladder]


def init_adapter_params(rng: np.random.Generator, dim: int, cfg: AdapterConfig) -> AdapterParams:
    """Fan-in-scaled normal init for down-projections and gate weights;
    up-projections and every bias start at exactly zero."""
    std = np.sqrt(2.0 / dim)
    experts = []
    for spec in cfg.retention_specs():
        experts.append(
            ExpertParams(
                w_down=Tensor(rng.normal(0.0, std, size=(dim, cfg.hidden))),
                b_down=Tensor(np.zeros(cfg.hidden)),
                w_up=Tensor(np.zeros((cfg.hidden, dim))),
                b_up=Tensor(np.zeros(dim)),
                spec=spec,
            )
        )
    gates = GateParams(
        route_w=Tensor(rng.normal(0.0, std, size=(cfg.experts, dim))),
        route_b=Tensor(np.zeros(cfg.experts)),
        thresh_w=Tensor(rng.normal(0.0, std, size=(cfg.experts, dim))),
        thresh_b=Tensor(np.zeros(cfg.experts)),
    )
    return AdapterParams(experts=experts, gates=gates)


# ---------------------------------------------------------------------------
# hard retention


def _rank_mask(flat: Array, counts: Array, keep_largest: bool) -> Array:
    """Boolean mask keeping exactly counts[j] entries of row j.

    Ties at the cutoff are broken toward the smaller flat index: the stable
    argsort preserves original order among equal keys, so the earlier entry
    wins in both directions.
    """
    keys = -flat if keep_largest else flat
    order = np.argsort(keys, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(
        ranks, order, np.broadcast_to(np.arange(flat.shape[1]), flat.shape), axis=1
    )
    return ranks < counts[:, None]


def retention_mask(
    values: Array, k: int | Array, keep_largest: bool, axis: str = AXIS_TOKEN
) -> Array:
    """Per-sample retention mask over a (b, n, m) activation.

    ``k`` may be a scalar or a per-sample vector. In token mode each sample's
    n*m slice is ranked as a whole and k counts entries per sample; in
    channel mode each token's m-length row is ranked and k counts entries
    per token.
    """
    if values.ndim != 3:
        raise ShapeError(f"retention expects a (b, n, m) array, got {values.shape}")
    b, n, m = values.shape
    slots = n * m if axis == AXIS_TOKEN else m
    counts = np.broadcast_to(np.asarray(k, dtype=np.int64), (b,)).copy()
    if np.any(counts < 1) or np.any(counts > slots):
        raise SelectionError(
            f"retention count must lie in [1, {slots}], got {counts.min()}..{counts.max()}"
        )
    if axis == AXIS_TOKEN:
        return _rank_mask(values.reshape(b, n * m), counts, keep_largest).reshape(b, n, m)
    if axis == AXIS_CHANNEL:
        per_row = np.repeat(counts, n)
        return _rank_mask(values.reshape(b * n, m), per_row, keep_largest).reshape(b, n, m)
    raise ConfigError(f"unknown retention axis '{axis}'")


def sparse_retain(
    x: Tensor, k: int | Array, keep_largest: bool, axis: str = AXIS_TOKEN
) -> tuple[Tensor, Array]:
    """Zero everything but the top/bottom-k entries; mask is constant in
    backward, so retained entries pass gradient unchanged."""
    mask = retention_mask(x.data, k, keep_largest, axis)
    return mul(x, constant(mask.astype(np.float64))), mask


def retention_counts(
    fraction: float, eta: float, offsets: Array, slots: int
) -> Array:
    """Integer retention budget per sample.

    Applies the offset-shifted fraction, clamps it into [1/slots, 1] so the
    budget never leaves the valid range, and floors. The 1e-9 nudge keeps
    exact-fraction products (e.g. 0.6 * 100) from flooring one short under
    binary rounding.
    """
    frac = np.clip(fraction + eta * np.asarray(offsets, dtype=np.float64), 1.0 / slots, 1.0)
    counts = np.floor(slots * frac + 1e-9).astype(np.int64)
    return np.clip(counts, 1, slots)


# ---------------------------------------------------------------------------
# gates


def routing_weights(x: Tensor, gates: GateParams, use_sdd_input: bool) -> Tensor:
    """Per-token convex weights over experts, shape (b, n, E).

    With ``use_sdd_input`` the gate sees only the bottom half of the input's
    activation slice (weak responses), the component that carries
    domain-specific texture and style.
    """
    b, n, d = x.shape
    if gates.route_w.shape[1] != d:
        raise ShapeError(f"routing gate expects dim {gates.route_w.shape[1]}, input has {d}")
    if use_sdd_input:
        x, _ = sparse_retain(x, max(1, (n * d) // 2), keep_largest=False)
    logits = add(matmul(x, transpose(gates.route_w, (1, 0))), gates.route_b)
    return softmax_lastdim(logits)


def threshold_offsets(x: Tensor, gates: GateParams) -> Tensor:
    """Per-sample, per-expert offsets in (-1, 1), shape (b, E)."""
    d = x.shape[-1]
    if gates.thresh_w.shape[1] != d:
        raise ShapeError(f"threshold gate expects dim {gates.thresh_w.shape[1]}, input has {d}")
    pooled = mean_over_axis(x, axis=1)  # (b, d)
    return tanh(add(matmul(pooled, transpose(gates.thresh_w, (1, 0))), gates.thresh_b))


# ---------------------------------------------------------------------------
# experts and the full adapter


def expert_forward(
    x: Tensor,
    p: ExpertParams,
    counts: Array | None,
    offset_col: Tensor | None,
    eta: float,
) -> tuple[Tensor, Array]:
    """Down-project, ReLU, hard-retain, offset-scale, up-project.

    counts: per-sample retained budget; None skips retention entirely.
    offset_col: (b,) threshold offsets for this expert; None means zero
    offset. The activation is scaled by (1 + eta * offset), which is where
    the threshold gate picks up its gradient.
    """
    hidden = relu(add(matmul(x, p.w_down), p.b_down))  # (b, n, h)
    if counts is not None:
        hidden, mask = sparse_retain(hidden, counts, p.spec.keep_largest, p.spec.axis)
    else:
        mask = np.ones(hidden.shape, dtype=bool)
    if offset_col is not None:
        b = hidden.shape[0]
        factor = shift(scale(reshape(offset_col, (b, 1, 1)), eta), 1.0)
        hidden = mul(hidden, factor)
    return add(matmul(hidden, p.w_up), p.b_up), mask


def adapter_forward(x: Tensor, params: AdapterParams, cfg: AdapterConfig) -> AdapterOutput:
    """Soft-routed mixture over all experts: y[j,k,:] = sum_i G[j,k,i] * e_i(x)[j,k,:].

    Ablation toggles: use_sdd=False makes every retention step the identity
    (including the routing gate's input split); use_dag=False fixes uniform
    routing; use_asg=False fixes zero threshold offsets.
    """
    if x.ndim != 3:
        raise ShapeError(f"adapter expects (b, n, d) input, got {x.shape}")
    b, n, d = x.shape
    num = cfg.experts
    if len(params.experts) != num:
        raise ShapeError(f"config declares {num} experts, params hold {len(params.experts)}")

    if cfg.use_dag:
        gate_weights = routing_weights(x, params.gates, use_sdd_input=cfg.use_sdd)
    else:
        gate_weights = constant(np.full((b, n, num), 1.0 / num))
    if cfg.use_asg:
        thresholds = threshold_offsets(x, params.gates)
    else:
        thresholds = constant(np.zeros((b, num)))

    y: Tensor | None = None
    masks: list[Array] = []
    count_list: list[Array] = []
    for i, expert in enumerate(params.experts):
        if cfg.use_sdd:
            hidden = expert.w_down.shape[1]
            slots = n * hidden if expert.spec.axis == AXIS_TOKEN else hidden
            counts = retention_counts(
                expert.spec.fraction, cfg.eta, thresholds.data[:, i], slots
            )
        else:
            counts = None
        offset_col = index_axis(thresholds, 1, i) if cfg.use_asg else None
        out_i, mask = expert_forward(x, expert, counts, offset_col, cfg.eta)
        weight_i = reshape(index_axis(gate_weights, 2, i), (b, n, 1))
        term = mul(out_i, weight_i)
        y = term if y is None else add(y, term)
        masks.append(mask)
        count_list.append(
            counts if counts is not None else np.full(b, mask[0].size, dtype=np.int64)
        )
    assert y is not None
    return AdapterOutput(
        y=y, gate_weights=gate_weights, thresholds=thresholds, masks=masks, counts=count_list
    )


def adapter_param_dict(params: AdapterParams, prefix: str = "adapter") -> dict[str, Tensor]:
    """Stable name -> tensor mapping for optimizers, EMA and serialization."""
    out: dict[str, Tensor] = {}
    for i, e in enumerate(params.experts):
        base = f"{prefix}.expert{i}"
        out[f"{base}.w_down"] = e.w_down
        out[f"{base}.b_down"] = e.b_down
        out[f"{base}.w_up"] = e.w_up
        out[f"{base}.b_up"] = e.b_up
    out[f"{prefix}.route.w"] = params.gates.route_w
    out[f"{prefix}.route.b"] = params.gates.route_b
    out[f"{prefix}.thresh.w"] = params.gates.thresh_w
    out[f"{prefix}.thresh.b"] = params.gates.thresh_b
    return out

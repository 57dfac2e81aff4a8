"""Silent-until-sparse backdoor: train the backdoor into the weights that 2:4
pruning keeps, then hide it using only the weights that pruning removes.

Phase 1 trains the pruned network ``W ⊙ M`` on clean samples plus triggered
samples relabelled to the target class, with retained magnitudes floored at
``tau``. Phase 2 trains the full network on clean and triggered samples with
their true labels, writing only the complement positions and projecting them
below the retained magnitudes after every step: per 4-group for SUS-F (mask
stable without permutation) or per row for SUS-R (mask stable under column
permutation, so permutation search returns the identity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from suslab import sparsity
from suslab.errors import InvariantError
from suslab.net import Network, TrainConfig, fit
from suslab.poison import PoisonSplit, TriggerSpec, corner_patch

SUS_F = "SUS_F"
SUS_R = "SUS_R"
VARIANTS = (SUS_F, SUS_R)
DEFAULT_DELTA = 1e-3


@dataclass(frozen=True)
class TauPolicy:
    kind: str            # "fixed" or "percentile"
    value: float = 0.0   # tau itself, or the percentile in [0, 100]

    def __post_init__(self):
        if self.kind not in ("fixed", "percentile"):
            raise InvariantError(f"unknown tau policy {self.kind!r}")
        if self.kind == "fixed" and self.value < 0:
            raise InvariantError("tau must be >= 0")
        if self.kind == "percentile" and not 0 <= self.value <= 100:
            raise InvariantError("percentile must lie in [0, 100]")


def default_tau_policy(variant: str) -> TauPolicy:
    return TauPolicy("fixed", 0.0) if variant == SUS_F else TauPolicy("percentile", 75.0)


@dataclass(frozen=True)
class AttackConfig:
    variant: str = SUS_F
    tau_policy: Optional[TauPolicy] = None
    phase1: TrainConfig = TrainConfig()
    phase2: TrainConfig = TrainConfig()
    trigger: TriggerSpec = field(default_factory=corner_patch)
    # "all", "fc_only" (the network's FC head), or explicit layer indices
    hide_layers: Union[str, tuple[int, ...]] = "all"
    delta: float = DEFAULT_DELTA
    # biases survive pruning, so by default phase 2 leaves them alone
    hide_biases: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvariantError(f"unknown variant {self.variant!r}")
        if self.tau_policy is None:
            object.__setattr__(self, "tau_policy", default_tau_policy(self.variant))
        if not 0.0 < self.delta < 1.0:
            raise InvariantError("delta must lie in (0, 1)")
        if isinstance(self.hide_layers, str):
            if self.hide_layers not in ("all", "fc_only"):
                raise InvariantError(f"unknown hide_layers {self.hide_layers!r}")
        elif not self.hide_layers:
            raise InvariantError("hide_layers must not be empty")


def resolve_hide_layers(spec, net: Network) -> list[int]:
    if spec == "all":
        return list(range(len(net.layers)))
    if spec == "fc_only":
        return net.head_indices
    idx = sorted(set(int(k) for k in spec))
    if not idx or idx[0] < 0 or idx[-1] >= len(net.layers):
        raise InvariantError(f"hide layers {spec} out of range")
    return idx


@dataclass
class AttackState:
    masks: list[np.ndarray]
    initial: Network
    backdoored: Network
    released: Network
    tau: float
    hide_layers: list[int]
    phase1_losses: list[float]
    phase2_losses: list[float]


# ---------------------------------------------------------------------------
# Masks and projections
# ---------------------------------------------------------------------------

def fix_masks(net: Network) -> list[np.ndarray]:
    """2:4 masks of the current weights, frozen (read-only) for the whole attack."""
    masks = []
    for layer in net.layers:
        m = sparsity.compute_mask_2to4(layer.weight)
        m.setflags(write=False)
        masks.append(m)
    return masks


def project_tau(net: Network, masks, tau: float, layers: Optional[Sequence[int]] = None) -> Network:
    """Lift every retained weight with |w| < tau to sign(w)*tau (zero goes to +tau)."""
    if tau < 0:
        raise InvariantError("tau must be >= 0")
    if tau == 0:
        return net
    for k in range(len(net.layers)) if layers is None else layers:
        w = net.layers[k].weight
        low = masks[k].astype(bool) & (np.abs(w) < tau)
        if low.any():
            net.layers[k].weight = np.where(low, np.where(w < 0, -tau, tau), w)
    return net


def _shrink(w: np.ndarray, pruned: np.ndarray, bound: np.ndarray, delta: float) -> np.ndarray:
    over = pruned & (np.abs(w) >= bound)
    if not over.any():
        return w
    return np.where(over, np.sign(w) * (1.0 - delta) * bound, w)


def _retained_min(w: np.ndarray, keep: np.ndarray, axis) -> np.ndarray:
    return np.where(keep, np.abs(w), np.inf).min(axis=axis, keepdims=True)


def project_four(net: Network, masks, delta: float = DEFAULT_DELTA,
                 layers: Optional[Sequence[int]] = None) -> Network:
    """Keep each pruned weight strictly below the smaller retained magnitude of its 4-group.

    Offenders (|w| >= g) are rescaled to sign(w)*(1-delta)*g.
    """
    for k in range(len(net.layers)) if layers is None else layers:
        w = net.layers[k].weight
        n, m = w.shape
        keep = masks[k].astype(bool).reshape(n, m // 4, 4)
        g = np.broadcast_to(_retained_min(w.reshape(n, m // 4, 4), keep, -1), keep.shape)
        net.layers[k].weight = _shrink(w, ~keep.reshape(n, m), g.reshape(n, m), delta)
    return net


def project_row(net: Network, masks, delta: float = DEFAULT_DELTA,
                layers: Optional[Sequence[int]] = None) -> Network:
    """Keep each pruned weight strictly below the smallest retained magnitude of its row."""
    for k in range(len(net.layers)) if layers is None else layers:
        w = net.layers[k].weight
        keep = masks[k].astype(bool)
        g = np.broadcast_to(_retained_min(w, keep, 1), w.shape)
        net.layers[k].weight = _shrink(w, ~keep, g, delta)
    return net


def percentile_tau(net: Network, p: float, layers: Optional[Sequence[int]] = None) -> float:
    """Nearest-rank p-th percentile of |w| pooled over the given layers."""
    if not 0 <= p <= 100:
        raise InvariantError("percentile must lie in [0, 100]")
    ks = range(len(net.layers)) if layers is None else layers
    values = np.sort(np.concatenate([np.abs(net.layers[k].weight).ravel() for k in ks]))
    if values.size == 0:
        raise InvariantError("no weights to take a percentile of")
    rank = max(1, math.ceil(p / 100.0 * values.size))
    return float(values[rank - 1])


def resolve_tau(net: Network, policy: TauPolicy) -> float:
    if policy.kind == "fixed":
        return float(policy.value)
    return percentile_tau(net, policy.value)


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------

def _stack(split: PoisonSplit, poisoned_labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([split.clean.features(), split.poisoned.features()])
    y = np.concatenate([split.clean.labels, poisoned_labels]).astype(np.int64)
    return x, y


def phase1_backdoor_train(net: Network, masks, data: PoisonSplit, cfg: AttackConfig,
                          tau: Optional[float] = None) -> tuple[Network, list[float]]:
    """Train the pruned model ``W ⊙ M`` to carry the backdoor.

    Only retained positions and biases are written; complement positions keep
    their incoming values. Returns the network and its per-epoch losses.
    """
    out = net.copy()
    if tau is None:
        tau = resolve_tau(net, cfg.tau_policy)
    target = np.full(len(data.poisoned), cfg.trigger.target, dtype=np.int64)
    x, y = _stack(data, target)
    project_tau(out, masks, tau)
    history = fit(
        out, x, y, cfg.phase1,
        update_masks=masks, forward_masks=masks,
        project=lambda n: project_tau(n, masks, tau),
    )
    return out, history


def phase2_hide(backdoored: Network, masks, data: PoisonSplit,
                cfg: AttackConfig) -> tuple[Network, list[float]]:
    """Make the full model ignore the trigger by training only the complement positions.

    Retained positions are never written. Layers outside the hide set get
    their complement positions zeroed once, so they are already 2:4 sparse
    and every victim pipeline prunes them to the same thing.
    """
    out = backdoored.copy()
    hide = resolve_hide_layers(cfg.hide_layers, out)
    update = []
    for k, layer in enumerate(out.layers):
        if k in hide:
            update.append(sparsity.complement_mask(masks[k]))
        else:
            layer.weight = sparsity.apply_mask(layer.weight, masks[k])
            update.append(np.zeros_like(masks[k]))
    x, y = _stack(data, data.poisoned.labels)
    project = project_four if cfg.variant == SUS_F else project_row
    history = fit(
        out, x, y, cfg.phase2,
        update_masks=update,
        train_bias=[cfg.hide_biases and k in hide for k in range(len(out.layers))],
        project=lambda n: project(n, masks, cfg.delta, hide),
    )
    return out, history


def run_attack(net: Network, data: PoisonSplit, cfg: AttackConfig,
               hide_data: Optional[PoisonSplit] = None) -> AttackState:
    """Fix masks on ``net``, then run both phases. ``hide_data`` swaps in a
    different poison split for phase 2 (default: reuse ``data``)."""
    initial = net.copy()
    masks = fix_masks(initial)
    tau = resolve_tau(initial, cfg.tau_policy)
    backdoored, h1 = phase1_backdoor_train(initial, masks, data, cfg, tau)
    released, h2 = phase2_hide(backdoored, masks, hide_data or data, cfg)
    return AttackState(
        masks=masks, initial=initial, backdoored=backdoored, released=released, tau=tau,
        hide_layers=resolve_hide_layers(cfg.hide_layers, initial),
        phase1_losses=h1, phase2_losses=h2,
    )

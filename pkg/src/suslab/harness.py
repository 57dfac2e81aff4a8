"""Victim-side pipeline emulation and attack metrics.

The victim never sees the attacker's mask: ``sparsify`` recomputes a fresh
magnitude 2:4 mask from whatever weights it is handed, optionally after a
column-permutation search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from suslab import sparsity
from suslab.errors import InvariantError
from suslab.net import Network, TrainConfig, fit, predict
from suslab.poison import Dataset, TriggerSpec, apply_trigger_all

LIBRARIES = ("full_layers", "fc_only")


@dataclass(frozen=True)
class VictimPipeline:
    library: str = "full_layers"
    permute: bool = False
    finetune: Optional[TrainConfig] = None

    def __post_init__(self):
        if self.library not in LIBRARIES:
            raise InvariantError(f"unknown library {self.library!r}")

    def targets(self, net: Network) -> list[int]:
        return list(range(len(net.layers))) if self.library == "full_layers" else net.head_indices


@dataclass
class SparsifyResult:
    net: Network
    # per layer; None for layers the pipeline left dense
    masks: list[Optional[np.ndarray]]
    perms: list[Optional[np.ndarray]]
    reports: list[Optional[sparsity.MagnitudeReport]]

    @property
    def targets(self) -> list[int]:
        return [k for k, m in enumerate(self.masks) if m is not None]

    def identity_perms(self) -> bool:
        return all(p is None or np.array_equal(p, np.arange(len(p))) for p in self.perms)


def sparsify(net: Network, pipe: VictimPipeline) -> SparsifyResult:
    """Prune the targeted layers to 2:4 the way a deployment library would.

    With ``pipe.permute`` the columns are permuted first; the layer then stores
    ``W·P`` and records ``input_perm`` so its input is gathered to match.
    """
    out = net.copy()
    n_layers = len(out.layers)
    masks: list = [None] * n_layers
    perms: list = [None] * n_layers
    reports: list = [None] * n_layers
    for k in pipe.targets(out):
        layer = out.layers[k]
        w = layer.weight
        p = sparsity.search_permutation(w) if pipe.permute else sparsity.identity_permutation(w.shape[1])
        permuted = w[:, p]
        mask = sparsity.compute_mask_2to4(permuted)
        layer.weight = sparsity.apply_mask(permuted, mask)
        if pipe.permute:
            base = layer.input_perm if layer.input_perm is not None else np.arange(w.shape[1])
            layer.input_perm = None if np.array_equal(base[p], np.arange(len(p))) else base[p]
        masks[k], perms[k] = mask, p
        reports[k] = sparsity.magnitude_report(w, p)
    out.version += 1
    return SparsifyResult(out, masks, perms, reports)


@dataclass
class MetricsReport:
    acc: float
    asr: float
    mag_r: float
    per_layer_mag_r: list[float] = field(default_factory=list)


def aggregate_mag_r(reports: Sequence[sparsity.MagnitudeReport]) -> float:
    """L1-weighted mean of per-layer ratios, i.e. total kept L1 over total bound."""
    upper = math.fsum(r.l1_upper for r in reports)
    return 1.0 if upper == 0 else math.fsum(r.l1_pruned for r in reports) / upper


def attack_success_rate(net: Network, data: Dataset, trigger: TriggerSpec, seed: int = 0) -> float:
    """Fraction of triggered samples whose true label is not the target that land on the target."""
    idx = np.flatnonzero(data.labels != trigger.target)
    if idx.size == 0:
        return 0.0
    triggered = apply_trigger_all(data.subset(idx), trigger, seed, idx)
    return float(np.mean(predict(net, triggered.features()) == trigger.target))


def accuracy(net: Network, data: Dataset) -> float:
    return float(np.mean(predict(net, data.features()) == data.labels))


def evaluate(net: Network, data: Dataset, trigger: TriggerSpec, seed: int = 0,
             reports: Optional[Sequence[Optional[sparsity.MagnitudeReport]]] = None) -> MetricsReport:
    """ACC on clean samples, ASR on triggered non-target samples, and mag_r.

    ``reports`` are the magnitude reports recorded by ``sparsify``; without
    them mag_r describes what unpermuted pruning of ``net`` would keep.
    """
    if len(data) == 0:
        raise InvariantError("cannot evaluate on an empty dataset")
    if reports is None:
        reports = [sparsity.magnitude_report(l.weight) for l in net.layers]
    kept = [r for r in reports if r is not None]
    return MetricsReport(
        acc=accuracy(net, data),
        asr=attack_success_rate(net, data, trigger, seed),
        mag_r=aggregate_mag_r(kept),
        per_layer_mag_r=[r.mag_r for r in kept],
    )


def finetune_check(sparse: SparsifyResult, data: Dataset, cfg: TrainConfig,
                   test: Dataset, trigger: TriggerSpec) -> tuple[Network, MetricsReport]:
    """Victim finetuning of a sparse model on clean data, keeping its 2:4 pattern."""
    net = sparse.net.copy()
    fit(net, data.features(), data.labels, cfg, update_masks=sparse.masks)
    return net, evaluate(net, test, trigger, reports=sparse.reports)


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

TSV_FIELDS = ("label", "acc", "asr", "mag_r", "per_layer_mag_r")


def report_table(runs: Sequence[tuple[str, MetricsReport]]) -> tuple[str, str]:
    """Aligned text table and tab-delimited records for a list of (label, report)."""
    width = max([len("run")] + [len(label) for label, _ in runs])
    lines = [f"{'run':<{width}}  {'ACC%':>7}  {'ASR%':>7}  {'mag_r':>7}"]
    records = ["\t".join(TSV_FIELDS)]
    for label, rep in runs:
        if "\t" in label or "\n" in label:
            raise InvariantError("labels may not contain tabs or newlines")
        lines.append(f"{label:<{width}}  {100 * rep.acc:7.2f}  {100 * rep.asr:7.2f}  {rep.mag_r:7.4f}")
        per_layer = ",".join(repr(float(v)) for v in rep.per_layer_mag_r)
        records.append("\t".join([label, repr(float(rep.acc)), repr(float(rep.asr)),
                                  repr(float(rep.mag_r)), per_layer]))
    return "\n".join(lines) + "\n", "\n".join(records) + "\n"


def parse_report_tsv(text: str) -> list[tuple[str, MetricsReport]]:
    rows = [line for line in text.splitlines() if line]
    if not rows or tuple(rows[0].split("\t")) != TSV_FIELDS:
        raise InvariantError("missing report header")
    runs = []
    for line in rows[1:]:
        label, acc, asr, mag, per_layer = line.split("\t")
        layers = [float(v) for v in per_layer.split(",")] if per_layer else []
        runs.append((label, MetricsReport(float(acc), float(asr), float(mag), layers)))
    return runs

"""Turn a RunConfig into data, attack runs, and victim-side results.

All randomness comes from two seeds: ``dataset.seed`` (generation, test
split, poison selection, trigger placement) and ``model.seed`` (init and
every training shuffle). Sub-seeds are derived by name.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from suslab import attack, harness, poison
from suslab.config import RunConfig
from suslab.errors import ConfigError
from suslab.net import Network, TrainConfig, build_network, fit


def derive_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class LabData:
    train: poison.Dataset
    test: poison.Dataset
    split: poison.PoisonSplit
    trigger: poison.TriggerSpec
    finetune: poison.Dataset


def build_trigger(cfg: RunConfig, image_shape: tuple[int, ...]) -> poison.TriggerSpec:
    d = cfg["dataset"]
    kind, target = d["trigger"], d["target"]
    if kind == "corner_patch":
        return poison.corner_patch(d["trigger_size"], d["trigger_value"], target)
    rng = np.random.default_rng(derive_seed(d["seed"], "trigger-pattern"))
    if kind == "blend":
        # a fixed random texture stands in for the blended image
        return poison.blend(rng.uniform(0.0, 1.0, size=image_shape), d["trigger_alpha"], target)
    s = d["trigger_size"]
    pattern = rng.uniform(0.0, 1.0, size=(s, s, image_shape[2]))
    return poison.random_patch(pattern, target, d["per_sample_position"])


def load_data(cfg: RunConfig) -> LabData:
    d = cfg["dataset"]
    seed = d["seed"]
    full = poison.make_desk_dataset(d["kind"], derive_seed(seed, "generate"), d["size"], d["path"] or None)
    train, test = poison.train_test_split(full, d["test_fraction"], derive_seed(seed, "test-split"))
    trigger = build_trigger(cfg, full.shape)
    split = poison.split_poison(train, trigger, d["poison_fraction"], derive_seed(seed, "poison"))
    n_ft = max(1, int(round(cfg["victim"]["finetune_fraction"] * len(train))))
    ft_idx = np.sort(np.random.default_rng(derive_seed(seed, "finetune")).permutation(len(train))[:n_ft])
    return LabData(train, test, split, trigger, train.subset(ft_idx))


def _train_cfg(cfg: RunConfig, prefix: str, section: str, name: str) -> TrainConfig:
    s = cfg[section]
    return TrainConfig(
        epochs=s[f"{prefix}_epochs"],
        batch_size=s[f"{prefix}_batch_size"],
        learning_rate=s[f"{prefix}_learning_rate"],
        seed=derive_seed(cfg["model"]["seed"], name),
        momentum=s[f"{prefix}_momentum"],
    )


def attack_config(cfg: RunConfig, trigger: poison.TriggerSpec) -> attack.AttackConfig:
    a = cfg["attack"]
    variant = a["variant"]
    policy = None if a["tau_policy"] == "default" else attack.TauPolicy(a["tau_policy"], a["tau_value"])
    hide = a["hide_layers"]
    return attack.AttackConfig(
        variant=variant,
        tau_policy=policy,
        phase1=_train_cfg(cfg, "phase1", "attack", "phase1"),
        phase2=_train_cfg(cfg, "phase2", "attack", "phase2"),
        trigger=trigger,
        hide_layers=hide if isinstance(hide, str) else tuple(hide),
        delta=a["delta"],
        hide_biases=a["hide_biases"],
    )


def victim_pipeline(cfg: RunConfig) -> harness.VictimPipeline:
    v = cfg["victim"]
    return harness.VictimPipeline(
        library=v["library"], permute=v["permute"],
        finetune=_train_cfg(cfg, "finetune", "victim", "finetune"),
    )


def initial_network(cfg: RunConfig) -> Network:
    m = cfg["model"]
    return build_network(list(m["dims"]), derive_seed(m["seed"], "init"), fc_head=m["fc_head"] or None)


def check_model_fits(cfg: RunConfig, data: LabData) -> None:
    dims = cfg["model"]["dims"]
    width = data.train.features().shape[1]
    if dims[0] != width:
        raise ConfigError("model.dims", f"first dim {dims[0]} does not match {width} input features")
    if dims[-1] != data.train.num_classes:
        raise ConfigError("model.dims", f"last dim {dims[-1]} does not match {data.train.num_classes} classes")


def run_attack(cfg: RunConfig, data: Optional[LabData] = None) -> tuple[attack.AttackState, LabData]:
    data = data or load_data(cfg)
    check_model_fits(cfg, data)
    acfg = attack_config(cfg, data.trigger)
    hide_split = None
    reseed = cfg["attack"]["phase2_poison_seed"]
    if reseed is not None:
        hide_split = poison.split_poison(
            data.train, data.trigger, cfg["dataset"]["poison_fraction"], derive_seed(reseed, "poison"))
    state = attack.run_attack(initial_network(cfg), data.split, acfg, hide_data=hide_split)
    return state, data


def clean_baseline(cfg: RunConfig, data: LabData) -> Network:
    """Same architecture and phase-1 schedule trained densely on clean data only."""
    net = initial_network(cfg)
    fit(net, data.train.features(), data.train.labels, _train_cfg(cfg, "phase1", "attack", "phase1"))
    return net

"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py``; the summary lines appear under
"acceptance criteria" at the end of the session.
"""

import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from suslab import checkpoint, experiment, harness, packed, sparsity
from suslab import net as nn
from suslab.config import load_config

from conftest import ACCEPTANCE_RESULTS
from oracles import best_pruned_l1_m8, mask_mismatches_under_perms, random_24_mask

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def record(name, ok, detail):
    ACCEPTANCE_RESULTS.append((name, bool(ok), detail))
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, detail


def pct(x):
    return f"{100 * x:.2f}%"


def full_run(cfg):
    """Attack, clean baseline, victim sparsification and metrics for one config."""
    start = time.perf_counter()
    with threadpool_limits(limits=1):
        state, data = experiment.run_attack(cfg)
        baseline = experiment.clean_baseline(cfg, data)
        sparse = harness.sparsify(state.released, experiment.victim_pipeline(cfg))
        metrics = {
            "baseline": harness.evaluate(baseline, data.test, data.trigger),
            "released": harness.evaluate(state.released, data.test, data.trigger),
            "sparse": harness.evaluate(sparse.net, data.test, data.trigger, reports=sparse.reports),
        }
    return dict(cfg=cfg, state=state, data=data, sparse=sparse, metrics=metrics,
                seconds=time.perf_counter() - start)


@pytest.fixture(scope="module")
def sus_f():
    return full_run(load_config(CONFIGS / "sus_f.ini"))


@pytest.fixture(scope="module")
def sus_r():
    return full_run(load_config(CONFIGS / "sus_r.ini"))


def test_c1_end_to_end_sus_f(sus_f):
    m = sus_f["metrics"]
    base, rel, sp = m["baseline"], m["released"], m["sparse"]
    checks = [
        rel.asr < 0.10,
        abs(rel.acc - base.acc) <= 0.03,
        sp.asr > 0.95,
        abs(sp.acc - rel.acc) <= 0.03,
        sus_f["seconds"] < 300,
        not sus_f["cfg"]["victim"]["permute"],
    ]
    record("C1 SUS-F end to end", all(checks),
           f"baseline ACC {pct(base.acc)}; released ACC {pct(rel.acc)} ASR {pct(rel.asr)}; "
           f"sparse ACC {pct(sp.acc)} ASR {pct(sp.asr)}; {sus_f['seconds']:.1f}s on one thread")


def test_c2_end_to_end_sus_r(sus_r):
    sparse = sus_r["sparse"]
    sp = sus_r["metrics"]["sparse"]
    identity = sparse.identity_perms() and all(p is not None for p in sparse.perms)
    unit = [r.mag_r for r in sparse.reports]
    ok = sus_r["cfg"]["victim"]["permute"] and identity and all(v == 1.0 for v in unit) and sp.asr > 0.95
    record("C2 SUS-R permutation-proof", ok,
           f"identity perms on all {len(sparse.perms)} layers: {identity}; per-layer mag_r {unit}; "
           f"released ASR {pct(sus_r['metrics']['released'].asr)}; sparse ASR {pct(sp.asr)}")


def test_c3_phase_separation():
    failures, runs = [], 0
    for name in ("sus_f.ini", "sus_r.ini"):
        base = load_config(CONFIGS / name)
        for seed in range(10):
            cfg = base.replace(dataset__seed=seed, model__seed=seed)
            state, _ = experiment.run_attack(cfg)
            runs += 1
            for k, m in enumerate(state.masks):
                a = sparsity.apply_mask(state.released.layers[k].weight, m)
                b = sparsity.apply_mask(state.backdoored.layers[k].weight, m)
                if a.tobytes() != b.tobytes():
                    failures.append((name, seed, k))
    record("C3 phase separation", not failures,
           f"{runs} seeded runs, bit-identical retained weights on every layer; failures {failures}")


def test_c4_mask_stability(sus_f, sus_r):
    rng = np.random.default_rng(2024)
    f_state = sus_f["state"]
    f_bad = sum(int(np.count_nonzero(sparsity.compute_mask_2to4(l.weight) != m))
                for l, m in zip(f_state.released.layers, f_state.masks))
    r_state = sus_r["state"]
    r_bad = sum(mask_mismatches_under_perms(l.weight, m, rng, trials=50)
                for l, m in zip(r_state.released.layers, r_state.masks))
    record("C4 mask stability", f_bad == 0 and r_bad == 0,
           f"SUS-F mismatched bits {f_bad}; SUS-R mismatched bits {r_bad} "
           f"over 50 mask-compatible permutations per layer")


def test_c5_sandwich():
    rng = np.random.default_rng(5)
    violations, m8, m8_optimal = 0, 0, 0
    for _ in range(1000):
        n, m = int(rng.integers(1, 17)), int(rng.choice([8, 16]))
        w = rng.normal(size=(n, m)) * rng.choice([1e-3, 1.0, 1e3])
        p = sparsity.search_permutation(w)
        kept = sparsity.pruned_l1(w[:, p])
        if not sparsity.pruned_l1(w) <= kept <= sparsity.upper_bound_l1(w):
            violations += 1
        if m == 8:
            m8 += 1
            best = best_pruned_l1_m8(w)
            m8_optimal += kept == pytest.approx(best, rel=1e-12)
    record("C5 sandwich inequality", violations == 0 and m8_optimal == m8,
           f"1000 matrices, {violations} violations; m=8 optimum matched {m8_optimal}/{m8}")


def test_c6_packed_oracle():
    rng = np.random.default_rng(6)
    exact, close = 0, 0
    for _ in range(1000):
        n, m = int(rng.integers(1, 17)), 4 * int(rng.integers(1, 9))
        w = rng.normal(size=(n, m))
        mask = random_24_mask(rng, n, m)
        pk = packed.pack(w, mask)
        dense = sparsity.apply_mask(w, mask)
        exact += packed.unpack(pk).tobytes() == dense.tobytes() \
            and packed.from_bytes(packed.to_bytes(pk)) == pk
        x = rng.normal(size=m)
        ref = dense @ x
        close += np.linalg.norm(packed.sparse_matvec(pk, x) - ref) <= 1e-6 * np.linalg.norm(ref)
    record("C6 packed oracle", exact == 1000 and close == 1000,
           f"bit-exact round trips {exact}/1000; matvec within 1e-6 relative {close}/1000")


def _fd_grads(network, x, y, h=1e-6):
    def loss():
        return nn.loss_ce_batch(nn.forward(network, x)[0], y)[0]

    out = []
    for layer in network.layers:
        pair = []
        for arr in (layer.weight, layer.bias):
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up = loss()
                arr[idx] = old - h
                down = loss()
                arr[idx] = old
                g[idx] = (up - down) / (2 * h)
            pair.append(g)
        out.append(pair)
    return out


def test_c7_gradient_checks():
    rng = np.random.default_rng(7)
    worst, passed = 0.0, 0
    for _ in range(100):
        depth = int(rng.integers(1, 4))
        dims = [4 * int(rng.integers(1, 4)) for _ in range(depth)] + [int(rng.integers(2, 6))]
        net = nn.build_network(dims, int(rng.integers(1 << 31)))
        for layer in net.layers:
            layer.bias = rng.normal(scale=0.2, size=layer.bias.shape)
            if rng.random() < 0.3:
                layer.input_perm = rng.permutation(layer.weight.shape[1])
        x = rng.normal(size=(int(rng.integers(1, 5)), dims[0]))
        y = rng.integers(0, dims[-1], size=len(x))
        z, cache = nn.forward(net, x)
        _, dz = nn.loss_ce_batch(z, y)
        analytic = nn.backward(net, cache, dz)
        numeric = _fd_grads(net, x, y)
        errs = [np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
                for pa, pn in zip(analytic, numeric) for a, b in zip(pa, pn)]
        worst = max(worst, max(errs))
        passed += max(errs) < 1e-5
    record("C7 gradient checks", passed == 100,
           f"{passed}/100 random nets within 1e-5; worst relative error {worst:.2e}")


def test_c8_finetune_robustness(sus_f, sus_r):
    details, ok = [], True
    for name, run in (("SUS-F", sus_f), ("SUS-R", sus_r)):
        data = run["data"]
        before = run["metrics"]["sparse"]
        tcfg = experiment.victim_pipeline(run["cfg"]).finetune
        _, after = harness.finetune_check(run["sparse"], data.finetune, tcfg, data.test, data.trigger)
        ok &= after.asr > 0.90 and after.acc >= before.acc - 0.01
        details.append(f"{name} {len(data.finetune)} clean samples x {tcfg.epochs} epochs: "
                       f"ACC {pct(before.acc)} -> {pct(after.acc)}, ASR {pct(before.asr)} -> {pct(after.asr)}")
    record("C8 finetune robustness", ok, "; ".join(details))


def test_c9_fc_only_victim():
    cfg = load_config(CONFIGS / "fc_only.ini")
    state, data = experiment.run_attack(cfg)
    head = state.released.head_indices
    results = {}
    for lib in ("full_layers", "fc_only"):
        sparse = harness.sparsify(state.released, harness.VictimPipeline(lib))
        results[lib] = harness.evaluate(sparse.net, data.test, data.trigger, reports=sparse.reports)
    released = harness.evaluate(state.released, data.test, data.trigger)
    ok = len(head) == 3 and state.hide_layers == head and all(r.asr > 0.95 for r in results.values())
    record("C9 fc_only victim", ok,
           f"hide layers {state.hide_layers}; released ASR {pct(released.asr)}; "
           + "; ".join(f"{k} ASR {pct(v.asr)} ACC {pct(v.acc)}" for k, v in results.items()))


def _blobs(run):
    s, sparse = run["state"], run["sparse"]
    digest = run["cfg"].hash()
    cks = [checkpoint.Checkpoint(n, ph, digest, masks=s.masks)
           for n, ph in ((s.initial, "initial"), (s.backdoored, "backdoored"), (s.released, "released"))]
    cks.append(checkpoint.Checkpoint(sparse.net, "sparse", digest, masks=sparse.masks,
                                     magnitudes=sparse.reports))
    return [checkpoint.to_bytes(c) for c in cks]


def test_c10_determinism(sus_f):
    again = full_run(load_config(CONFIGS / "sus_f.ini"))
    same_ckpt = _blobs(again) == _blobs(sus_f)
    _, tsv_a = harness.report_table(list(sus_f["metrics"].items()))
    _, tsv_b = harness.report_table(list(again["metrics"].items()))
    record("C10 determinism", same_ckpt and tsv_a == tsv_b,
           f"checkpoints bit-identical: {same_ckpt}; report records identical: {tsv_a == tsv_b}")

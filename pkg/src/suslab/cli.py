"""Command-line front end.

    suslab attack   --config run.ini [--out DIR] [--variant sus-f|sus-r] [--seed N]
    suslab sparsify CHECKPOINT [--permute] [--fc-only] [--out DIR]
    suslab eval     CHECKPOINT... --config run.ini [--json]
    suslab finetune CHECKPOINT --config run.ini [--out DIR] [--json]
    suslab report   RECORDS... [--tsv]

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
``SUS_LAB_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from suslab import checkpoint, experiment, harness, packed
from suslab.config import RunConfig, load_config
from suslab.errors import ConfigError, SusLabError
from suslab.net import TrainConfig

log = logging.getLogger("suslab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _thread_limit():
    raw = os.environ.get("SUS_LAB_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SUS_LAB_THREADS must be an integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "variant", None):
        overrides["attack__variant"] = args.variant.upper().replace("-", "_")
    if getattr(args, "seed", None) is not None:
        overrides["model__seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg


def _out_dir(args, cfg: RunConfig | None = None, default: str = ".") -> Path:
    out = Path(args.out or (cfg["output"]["dir"] if cfg else default))
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(path: Path, entries: dict) -> None:
    with open(path, "w") as fh:
        for key, value in entries.items():
            fh.write(f"{key} = {value}\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                key, value = line.split("=", 1)
                out[key.strip()] = value.strip()
    return out


def cmd_attack(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    digest = cfg.hash()
    (out / "config.ini").write_text(cfg.to_text())
    manifest = {
        "run_id": f"sus-{digest[:12]}",
        "status": "running",
        "config_hash": digest,
        "variant": cfg["attack"]["variant"],
        "data_seed": cfg["dataset"]["seed"],
        "train_seed": cfg["model"]["seed"],
    }
    write_manifest(out / "manifest.txt", manifest)
    try:
        log.info("running %s with config %s", cfg["attack"]["variant"], digest[:12])
        state, _ = experiment.run_attack(cfg)
        for phase, net in (("initial", state.initial), ("backdoored", state.backdoored),
                           ("released", state.released)):
            path = out / f"{phase}.ckpt"
            checkpoint.save(path, checkpoint.Checkpoint(net, phase, digest, masks=state.masks))
            manifest[f"{phase}_checkpoint"] = path.name
        manifest.update({
            "tau": repr(state.tau),
            "hide_layers": ",".join(str(k) for k in state.hide_layers),
            "phase1_final_loss": repr(state.phase1_losses[-1]) if state.phase1_losses else "none",
            "phase2_final_loss": repr(state.phase2_losses[-1]) if state.phase2_losses else "none",
            "status": "complete",
        })
    except BaseException:
        manifest["status"] = "failed"
        write_manifest(out / "manifest.txt", manifest)
        raise
    write_manifest(out / "manifest.txt", manifest)
    print(f"attack {manifest['run_id']} complete -> {out}")
    return EXIT_OK


def cmd_sparsify(args) -> int:
    ck = checkpoint.load(args.checkpoint)
    pipe = harness.VictimPipeline("fc_only" if args.fc_only else "full_layers", permute=args.permute)
    result = harness.sparsify(ck.net, pipe)
    out = _out_dir(args, default=str(Path(args.checkpoint).parent))
    checkpoint.save(out / "sparse.ckpt", checkpoint.Checkpoint(
        result.net, "sparse", ck.config_hash, masks=result.masks, magnitudes=result.reports))
    for k in result.targets:
        layer = result.net.layers[k]
        packed.save(out / f"layer{k}.p24", packed.pack(layer.weight, result.masks[k]))
        perm = result.perms[k]
        if pipe.permute:
            kind = "identity" if np.array_equal(perm, np.arange(len(perm))) else "non-identity"
            print(f"layer {k}: {kind} permutation, mag_r={result.reports[k].mag_r:.4f}")
    print(f"sparse checkpoint -> {out / 'sparse.ckpt'}")
    return EXIT_OK


def _record(label: str, rep: harness.MetricsReport) -> dict:
    return {"label": label, "acc": rep.acc, "asr": rep.asr, "mag_r": rep.mag_r,
            "per_layer_mag_r": rep.per_layer_mag_r}


def _emit(runs, as_json: bool) -> None:
    if as_json:
        for label, rep in runs:
            print(json.dumps(_record(label, rep)))
    else:
        print(harness.report_table(runs)[0], end="")


def cmd_eval(args) -> int:
    cfg = _config(args)
    data = experiment.load_data(cfg)
    runs = []
    for path in args.checkpoints:
        ck = checkpoint.load(path)
        runs.append((f"{Path(path).stem}", harness.evaluate(ck.net, data.test, data.trigger,
                                                            reports=ck.magnitudes)))
    _emit(runs, args.json)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    ck = checkpoint.load(args.checkpoint)
    if ck.masks is None or ck.phase not in ("sparse", "finetuned"):
        raise SusLabError("finetune needs a sparse checkpoint (run sparsify first)")
    data = experiment.load_data(cfg)
    tcfg: TrainConfig = experiment.victim_pipeline(cfg).finetune
    sparse = harness.SparsifyResult(ck.net, ck.masks, [None] * len(ck.masks),
                                    ck.magnitudes or [None] * len(ck.masks))
    net, rep = harness.finetune_check(sparse, data.finetune, tcfg, data.test, data.trigger)
    out = _out_dir(args, default=str(Path(args.checkpoint).parent))
    checkpoint.save(out / "finetuned.ckpt", checkpoint.Checkpoint(
        net, "finetuned", ck.config_hash, masks=ck.masks, magnitudes=ck.magnitudes))
    _emit([("finetuned", rep)], args.json)
    return EXIT_OK


def cmd_report(args) -> int:
    runs = []
    for path in args.records:
        text = Path(path).read_text()
        if text.startswith("\t".join(harness.TSV_FIELDS)):
            runs.extend(harness.parse_report_tsv(text))
            continue
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                runs.append((rec["label"], harness.MetricsReport(
                    rec["acc"], rec["asr"], rec["mag_r"], list(rec.get("per_layer_mag_r", [])))))
    text, tsv = harness.report_table(runs)
    print(tsv if args.tsv else text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="suslab", description="Silent-until-sparse 2:4 backdoor lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("attack", help="run both attack phases and write checkpoints")
    a.add_argument("--config", required=True)
    a.add_argument("--out")
    a.add_argument("--variant", choices=["sus-f", "sus-r"])
    a.add_argument("--seed", type=int, help="override model.seed")
    a.set_defaults(func=cmd_attack)

    s = sub.add_parser("sparsify", help="victim-side 2:4 pruning of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--permute", action="store_true")
    s.add_argument("--fc-only", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sparsify)

    e = sub.add_parser("eval", help="ACC / ASR / mag_r of checkpoints on held-out data")
    e.add_argument("checkpoints", nargs="+")
    e.add_argument("--config", required=True)
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("finetune", help="finetune a sparse checkpoint on clean data")
    f.add_argument("checkpoint")
    f.add_argument("--config", required=True)
    f.add_argument("--out")
    f.add_argument("--json", action="store_true")
    f.set_defaults(func=cmd_finetune)

    r = sub.add_parser("report", help="tabulate records written by eval --json")
    r.add_argument("records", nargs="+")
    r.add_argument("--tsv", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"suslab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"suslab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"suslab: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SusLabError, OSError, ValueError) as exc:
        print(f"suslab: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

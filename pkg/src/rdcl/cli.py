"""Command-line entry point: ``rdcl <subcommand> [options]``.

Exit codes: 0 success, 1 numeric failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import container
from . import pipeline as P
from .clm import build_augmented_affinity, dump_affinity
from .config import ConfigError, TrainConfig, load_config
from .dse import encode
from .gradcheck import DEFAULT_TOL, run_many
from .synth import read_dataset, write_dataset

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rdcl", description="Disentangled counterfactual learning on synthetic episodes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--data", help="directory written by gen-data (default: generate from config)")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, help="checkpoint written by train")

    sp = sub.add_parser("gen-data", help="generate train/val datasets")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("train", help="train and write metrics.csv, summary.json, checkpoint.bin")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seeds", help="comma-separated seed list; one sub-directory per seed")

    sp = sub.add_parser("eval", help="validation accuracy of a checkpoint")
    common(sp, checkpoint=True)
    sp.add_argument("--out", help="write the JSON summary here")

    sp = sub.add_parser("probe", help="linear probes of the latent factors")
    common(sp, checkpoint=True)
    sp.add_argument("--out", help="write the JSON summary here")

    sp = sub.add_parser("gradcheck", help="finite-difference checks of every module")
    sp.add_argument("--seeds", type=int, default=10)
    sp.add_argument("--tol", type=float, default=DEFAULT_TOL)

    sp = sub.add_parser("dump-affinity", help="write the affinity neighbours of the first eval batch")
    common(sp, checkpoint=True)
    sp.add_argument("--out", required=True, help=".csv or .json path")
    return p


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args, checkpoint_meta: dict | None = None) -> TrainConfig:
    if args.config is None and checkpoint_meta is not None:
        base = TrainConfig.from_dict(checkpoint_meta["config"])
        return load_config(None, overrides={**base.to_dict(), **_overrides(args.set)})
    return load_config(args.config, overrides=_overrides(args.set))


def _datasets(args, cfg: TrainConfig):
    if args.data:
        d = Path(args.data)
        return read_dataset(d / "train.bin"), read_dataset(d / "val.bin")
    return P.make_datasets(cfg)


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val = P.make_datasets(cfg)
    write_dataset(out / "train.bin", train)
    write_dataset(out / "val.bin", val)
    print(f"wrote {len(train)} train and {len(val)} val episodes to {out}")
    return EXIT_OK


def _train_one(cfg: TrainConfig, args, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    train, val = _datasets(args, cfg)
    res = P.train(cfg, train, val, log=lambda s: print(s, file=sys.stderr))
    (out / "metrics.csv").write_text(P.metrics_csv(res.records))
    (out / "summary.json").write_text(P.summary_json(cfg, res) + "\n")
    P.save_checkpoint(out / "checkpoint.bin", res.model, {"final_val_accuracy": res.final_accuracy})
    print(f"{out}: final val accuracy {res.final_accuracy!r}")


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"--seeds expects integers, got {args.seeds!r}") from None
        for s in seeds:
            _train_one(TrainConfig.from_dict({**cfg.to_dict(), "seed": s}), args, Path(args.out) / f"seed{s}")
    else:
        _train_one(cfg, args, Path(args.out))
    return EXIT_OK


def _load(args):
    _, meta = container.load(args.checkpoint, kind=P.CHECKPOINT_KIND)
    cfg = _config(args, meta)
    model, meta = P.load_checkpoint(args.checkpoint, cfg)
    return cfg, model, meta


def cmd_eval(args) -> int:
    cfg, model, meta = _load(args)
    _, val = _datasets(args, cfg)
    doc = P.evaluate(model, val, cfg)
    if "final_val_accuracy" in meta:
        doc["logged_final_accuracy"] = meta["final_val_accuracy"]
    _emit(doc, args.out)
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg, model, _ = _load(args)
    train, val = _datasets(args, cfg)
    _emit(P.probe_disentanglement(model, train, val, cfg.seed), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok, worst = run_many(range(args.seeds), tol=args.tol)
    for name, err in worst.items():
        print(f"{'PASS' if err <= args.tol else 'FAIL'} {name:<20s} max rel err {err:.3e}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_dump_affinity(args) -> int:
    cfg, model, _ = _load(args)
    _, val = _datasets(args, cfg)
    idx = P.eval_batches(len(val), cfg.batch_size)[0]
    batch = P.Batch.from_dataset(val, idx)
    with ag.no_grad():
        lat = encode(model.dse, np.concatenate([batch.x1, batch.x2]), sample=False)
        aff = build_augmented_affinity(np.concatenate([batch.a1, batch.a2]), lat.s, lat.z_last,
                                       cfg.clm_hyper())
    dump_affinity(aff, args.out)
    print(f"wrote affinity neighbours for {2 * len(batch)} objects to {args.out}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe,
            "gradcheck": cmd_gradcheck, "dump-affinity": cmd_dump_affinity}


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, FileNotFoundError, container.ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ag.NumericDomainError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

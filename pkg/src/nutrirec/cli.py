"""Command-line entry point: ``nutrirec <command> [flags]``.

Configuration layers: built-in defaults, then the TOML file given by
``--config``, then explicit flags. Every successful command writes a run
manifest next to its main output; every failure prints one JSON line on
stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
import warnings
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .errors import ConfigError, NutrirecError
from .evaluation import build_slates, evaluate, heldout_positives
from .graphdata import SynthSpec, generate_synthetic, ingest_tabular, load_bundle, save_bundle, split_interactions
from .reasoning import GatewayConfig, PromptOptions, ReasoningRun, explain_batch, prompt_for, user_scores
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_ERROR = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _load_toml(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _section(doc, name, cls):
    sec = dict(doc.get(name, {}))
    known = {f.name for f in fields(cls)}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"[{name}] unknown key(s): {sorted(unknown)}")
    return sec


def _require_file(path, flag):
    if path is None:
        raise UsageError(f"{flag} is required")
    if not Path(path).is_file():
        raise FileNotFoundError(f"{flag}: no such file {path}")
    return path


class Run:
    """Collects manifest data for one command."""

    def __init__(self, command, args):
        self.command = command
        self.args = args
        self.start = time.time()
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.config: dict = {}
        self.seed = None

    def input(self, path):
        if path is not None:
            self.inputs[str(path)] = _sha256(path)
        return path

    def output(self, path):
        self.outputs.append(str(path))
        return path

    def finish(self, manifest_path: Path):
        end = time.time()
        record = {
            "command": self.command,
            "version": __version__,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings": {"start": self.start, "end": end, "seconds": end - self.start},
        }
        _atomic_write(manifest_path, json.dumps(record, indent=2, sort_keys=True) + "\n")
        return manifest_path


def _manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _train_config(doc, args) -> TrainConfig:
    sec = _section(doc, "train", TrainConfig)
    if args.seed is not None:
        sec["seed"] = args.seed
    if getattr(args, "baseline", False):
        sec["baseline"] = True
    return TrainConfig(**sec)


def _split(bundle, doc, args):
    sec = doc.get("split", {})
    ratios = tuple(sec.get("ratios", (0.4, 0.4, 0.2)))
    seed = args.split_seed if args.split_seed is not None else int(sec.get("seed", 0))
    return split_interactions(bundle, ratios, seed), {"ratios": list(ratios), "seed": seed}


def _bundle(run, args):
    return load_bundle(run.input(_require_file(args.bundle, "--bundle")))


def _checkpoint(run, args):
    return load_checkpoint(run.input(_require_file(args.checkpoint, "--checkpoint")))


# -- commands ----------------------------------------------------------------------

def cmd_ingest(args, run: Run):
    for flag in ("users", "foods", "interactions"):
        _require_file(getattr(args, flag), f"--{flag}")
    for p in (args.users, args.foods, args.interactions, args.thresholds):
        run.input(p)
    bundle = ingest_tabular(args.users, args.foods, args.interactions, args.thresholds, args.mode)
    run.config = {"mode": bundle.benchmark_mode}
    return [save_bundle(bundle, run.output(args.out))]


def cmd_synth(args, run: Run):
    doc = _load_toml(run.input(args.config))
    sec = _section(doc, "synth", SynthSpec)
    if args.mode:
        sec["mode"] = args.mode
    spec = SynthSpec(**sec)
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    bundle = generate_synthetic(spec, seed)
    run.config, run.seed = {"synth": asdict(spec)}, seed
    return [save_bundle(bundle, run.output(args.out))]


def cmd_train(args, run: Run):
    doc = _load_toml(run.input(args.config))
    bundle = _bundle(run, args)
    split, split_cfg = _split(bundle, doc, args)
    cfg = _train_config(doc, args)
    out = Path(args.out)
    history = out.with_name(out.name + ".history.jsonl")
    ckpt, _ = train(bundle, split, cfg, history_path=history)
    save_checkpoint(ckpt, run.output(out))
    run.output(history)
    run.config, run.seed = {"train": cfg.to_dict(), "split": split_cfg}, cfg.seed
    return [out, history]


def cmd_eval(args, run: Run):
    doc = _load_toml(run.input(args.config))
    bundle = _bundle(run, args)
    ckpt = _checkpoint(run, args)
    split, split_cfg = _split(bundle, doc, args)
    report = evaluate(ckpt, bundle, split, args.k)
    txt, js = report.write(args.out)
    run.output(txt), run.output(js)
    run.config, run.seed = {"k": args.k, "split": split_cfg}, ckpt.config.seed
    return [txt, js]


def cmd_recommend(args, run: Run):
    doc = _load_toml(run.input(args.config))
    bundle = _bundle(run, args)
    ckpt = _checkpoint(run, args)
    split, split_cfg = _split(bundle, doc, args)
    users = [u for u in range(bundle.n_users) if u not in set(split.cold_users.tolist())]
    slates = build_slates(ckpt, bundle, split, args.k, users)
    record = [{"user_id": bundle.users[s.user].user_id, "foods": [bundle.foods[f].food_id for f in s.foods]}
              for s in slates]
    out = Path(args.out)
    _atomic_write(out, json.dumps(record, indent=1) + "\n")
    run.output(out)
    run.config, run.seed = {"k": args.k, "split": split_cfg}, ckpt.config.seed
    return [out]


def _read_pairs(path, bundle):
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row, rec in enumerate(csv.DictReader(fh), start=2):
            try:
                pairs.append((bundle.user_index[rec["user_id"]], bundle.food_index[rec["food_id"]]))
            except KeyError as exc:
                raise ConfigError(f"{path} row {row}: unknown id {exc}") from None
    return pairs


def cmd_explain(args, run: Run):
    doc = _load_toml(run.input(args.config))
    bundle = _bundle(run, args)
    ckpt = _checkpoint(run, args)
    split, split_cfg = _split(bundle, doc, args)
    gw = dict(doc.get("gateway", {}))
    if args.offline:
        gw["offline"] = True
    elif "offline" not in gw:
        gw["offline"] = False
    gateway = GatewayConfig(**gw)
    opts = PromptOptions(**doc.get("prompt", {}))
    scores = user_scores(ckpt, bundle, split)
    if args.pairs:
        pairs = _read_pairs(run.input(args.pairs), bundle)
    else:
        users = sorted(heldout_positives(bundle, split))
        slates = build_slates(ckpt, bundle, split, 1, users)
        pairs = [(s.user, s.foods[0]) for s in slates if s.foods]
    prompts = [prompt_for(ckpt, bundle, u, f, args.k, opts, split, scores[u]) for u, f in pairs]
    result = ReasoningRun(prompts, explain_batch(prompts, gateway, table=bundle.thresholds))
    out = Path(args.out)
    _atomic_write(out, "".join(json.dumps(r, sort_keys=True) + "\n" for r in result.to_records()))
    run.output(out)
    safe_gw = {k: v for k, v in asdict(gateway).items()}
    run.config, run.seed = {"gateway": safe_gw, "prompt": asdict(opts), "split": split_cfg}, ckpt.config.seed
    return [out]


def cmd_verify(args, run: Run):
    from .verify import run_all

    results = run_all(quick=args.quick)
    lines = [r.line() for r in results]
    ok = all(r.passed for r in results)
    text = "\n".join(lines) + f"\n{'ALL PASS' if ok else 'FAILURES'}\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        _atomic_write(out, text)
        run.output(out)
    run.config = {"quick": args.quick}
    return [] if ok else None


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "recommend": cmd_recommend,
    "explain": cmd_explain,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nutrirec", description="Health-aware multi-objective food recommendation.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_, flags, out_required=True):
        sp = sub.add_parser(name, help=help_)
        for flag in flags:
            if flag == "k":
                sp.add_argument("--k", type=int, default=20, help="slate length (default 20)")
            elif flag in ("seed", "split-seed"):
                sp.add_argument(f"--{flag}", type=int, default=None)
            elif flag in ("baseline", "offline", "quick"):
                sp.add_argument(f"--{flag}", action="store_true")
            elif flag == "mode":
                sp.add_argument("--mode", choices=("macro_only", "all"), default=None)
            else:
                sp.add_argument(f"--{flag}", default=None, required=flag == "checkpoint" and name == "eval")
        sp.add_argument("--out", required=out_required)
        return sp

    add("ingest", "build a bundle from users/foods/interactions files",
        ["users", "foods", "interactions", "thresholds", "mode"])
    add("synth", "generate a synthetic bundle", ["config", "seed", "mode"])
    add("train", "train a model on a bundle", ["bundle", "config", "seed", "split-seed", "baseline"])
    add("eval", "evaluate a checkpoint on the test split", ["bundle", "checkpoint", "config", "split-seed", "k"])
    add("recommend", "write top-k slates", ["bundle", "checkpoint", "config", "split-seed", "k"])
    sp = add("explain", "build prompts and explanations", ["bundle", "checkpoint", "config", "split-seed", "k",
                                                           "offline"])
    sp.add_argument("--pairs", default=None, help="CSV with user_id,food_id columns")
    add("verify", "run the oracle suites", ["quick"], out_required=False)
    return p


def _fail(kind, message, command=None, code=EXIT_ERROR):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message), "command": command}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        if command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        run = Run(command, args)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            outputs = COMMANDS[command](args, run)
        if args.out:
            run.finish(_manifest_path(args.out))
        return 0 if outputs is not None else EXIT_ERROR
    except UsageError as exc:
        return _fail("usage", exc, command, EXIT_USAGE)
    except NutrirecError as exc:
        return _fail(exc.kind, exc, command)
    except FileNotFoundError as exc:
        return _fail("file_not_found", exc, command)
    except (OSError, ValueError, TypeError, KeyError) as exc:
        return _fail(type(exc).__name__, exc, command)


if __name__ == "__main__":
    sys.exit(main())

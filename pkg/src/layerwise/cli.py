"""Command-line entry point.

Every subcommand resolves its settings as defaults <- config file <- flags,
echoes the resolved settings to stderr as one JSON line, and on success
writes a JSON manifest (settings + sha256 of every artifact) under
``--run-dir``.

Exit codes: 0 ok, 1 usage, 2 data/format/config, 3 numeric.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, LayerwiseError
from .plan import ModelSpec, build_plan, format_plan, load_spec, resolve_spec_path, spec_from_section

CORPUS_DIR = Path(__file__).parent / "corpus"
DEFAULT_MANIFEST = CORPUS_DIR / "toy.cfg"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


# -- settings resolution --------------------------------------------------

TRAIN_DEFAULTS = {
    "spec": "tiny.cfg",
    "data": str(DEFAULT_MANIFEST),
    "steps": 200,
    "max_lr": 3e-3,
    "warmup_init_lr": 1e-6,
    "warmup_steps": 20,
    "final_lr_fraction": 0.1,
    "weight_decay": 0.1,
    "clip_norm": 1.0,
    "batch_tokens": 1024,
    "accum": 1,
    "checkpoint_every": 50,
    "min_chars": 200,
    "min_tokens": 256,
    "seed": 0,
    "out": None,
}
GENERATE_DEFAULTS = {"ckpt": None, "prompt": "The river", "n_new": 64, "temperature": 0.0, "seed": 0}
BENCH_DEFAULTS = {
    "ckpt": None,
    "spec": "desk.cfg",
    "prompt_tokens": 36,
    "gen_tokens": 1024,
    "repetitions": 5,
    "warmup_passes": 1,
    "dry_run": True,
    "variant": "both",
    "dtype": "float32",
    "csv": None,
    "seed": 0,
}
FILTER_DEFAULTS = {"data": str(DEFAULT_MANIFEST), "min_chars": 200, "min_tokens": 256}


def _coerce(value: str, like: Any, key: str):
    if like is None or isinstance(like, str):
        return value
    try:
        if isinstance(like, bool):
            return {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}[value.lower()]
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


def resolve(defaults: dict, config_path: Optional[str], section: str, args: argparse.Namespace) -> dict:
    """defaults <- [section] of the config file <- explicitly given flags."""
    resolved = dict(defaults)
    if config_path:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(config_path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        base = Path(config_path).parent
        if section in parser:
            for key, value in parser[section].items():
                if key not in defaults:
                    raise ConfigError(f"{config_path}: unknown key {key!r} in [{section}]")
                value = _coerce(value, defaults[key], key)
                if key in ("spec", "data", "ckpt", "out", "csv") and value and not Path(value).is_absolute():
                    candidate = base / value
                    if candidate.exists() or key in ("out", "csv"):
                        value = str(candidate)
                resolved[key] = value
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(run_dir: str, command: str, argv: Sequence[str], settings: dict, artifacts: Sequence[Path]) -> Path:
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    path = out / f"{command}-{stamp}-{os.getpid()}.json"
    n = 1
    while path.exists():
        n += 1
        path = out / f"{command}-{stamp}-{os.getpid()}-{n}.json"
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "numpy": np.__version__,
        "settings": settings,
        "artifacts": {str(p): _sha256(p) for p in artifacts if Path(p).exists()},
    }
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n", encoding="utf-8")
    return path


def _echo(command: str, settings: dict) -> None:
    print(json.dumps({"event": "resolved", "command": command, "settings": settings}, default=str), file=sys.stderr)


# -- subcommands ----------------------------------------------------------

_SPEC_FLAGS = [f for f in fields(ModelSpec)]


def _spec_with_overrides(config: str, args: argparse.Namespace) -> ModelSpec:
    path = resolve_spec_path(config)
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(path, encoding="utf-8")
    if "model" not in parser:
        raise ConfigError(f"{path}: missing [model] section")
    section = parser["model"]
    for f in _SPEC_FLAGS:
        value = getattr(args, f.name, None)
        if value is not None:
            section[f.name] = str(value).lower() if isinstance(value, bool) else str(value)
    return spec_from_section(section)


def cmd_plan(args) -> tuple[dict, list[Path]]:
    spec = _spec_with_overrides(args.config, args)
    settings = {"config": args.config, "spec": asdict(spec)}
    _echo("plan", settings)
    print(format_plan(build_plan(spec)))
    return settings, []


def cmd_train(args) -> tuple[dict, list[Path]]:
    from .data import ByteTokenizer, FilterPolicy, load_manifest, mix_stream, pack_batches
    from .model import init_model
    from .checkpoint import save_checkpoint
    from .train import TrainSchedule, jsonl_logger, train

    s = resolve(TRAIN_DEFAULTS, args.config, "train", args)
    out = Path(s["out"] or Path(args.run_dir) / f"train-seed{s['seed']}")
    s["out"] = str(out)
    _echo("train", s)
    spec = load_spec(s["spec"])
    tokenizer = ByteTokenizer()
    if spec.vocab_size != tokenizer.vocab_size:
        raise ConfigError(f"spec vocab_size {spec.vocab_size} does not match byte tokenizer ({tokenizer.vocab_size})")
    sched = TrainSchedule(
        max_lr=s["max_lr"],
        warmup_init_lr=s["warmup_init_lr"],
        warmup_steps=s["warmup_steps"],
        total_steps=s["steps"],
        final_lr_fraction=s["final_lr_fraction"],
        weight_decay=s["weight_decay"],
        clip_norm=s["clip_norm"],
    )
    policy = FilterPolicy(s["min_chars"], s["min_tokens"])
    stream = mix_stream(load_manifest(s["data"]), tokenizer, policy, s["seed"])
    batches = pack_batches(stream, tokenizer, spec.context_length, s["batch_tokens"])
    ckpt = init_model(build_plan(spec), s["seed"]).astype(np.float64)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    log = jsonl_logger(log_path)
    try:
        result = train(
            ckpt, batches, sched, s["steps"], accum=s["accum"],
            checkpoint_every=s["checkpoint_every"], out_dir=out, log=log,
        )
    finally:
        log.close()
    final = out / "final.oelm"
    save_checkpoint(result.ckpt, final)
    hist = result.history
    print(f"steps={len(hist)} first_loss={hist[0].loss:.4f} last_loss={hist[-1].loss:.4f} -> {final}")
    return s, [log_path, final, *result.checkpoint_paths]


def cmd_generate(args) -> tuple[dict, list[Path]]:
    from .checkpoint import load_checkpoint
    from .data import ByteTokenizer
    from .model import SamplerConfig, generate

    s = resolve(GENERATE_DEFAULTS, args.config, "generate", args)
    _echo("generate", s)
    if not s["ckpt"]:
        print("layerwise generate: error: --ckpt is required", file=sys.stderr)
        raise UsageError("missing --ckpt")
    ckpt = load_checkpoint(s["ckpt"])
    tokenizer = ByteTokenizer()
    if ckpt.spec.vocab_size != tokenizer.vocab_size:
        raise ConfigError("checkpoint vocabulary does not match the byte tokenizer")
    sampler = (
        SamplerConfig("temperature", s["temperature"], s["seed"]) if s["temperature"] > 0 else SamplerConfig(seed=s["seed"])
    )
    prompt = tokenizer.encode(s["prompt"])
    gen = generate(ckpt, prompt, s["n_new"], sampler)
    print(tokenizer.decode(gen.tokens))
    print(
        json.dumps({"prefill_s": gen.prefill_seconds, "generation_s": gen.generation_seconds, "decode_steps": gen.decode_steps}),
        file=sys.stderr,
    )
    return s, []


def cmd_bench(args) -> tuple[dict, list[Path]]:
    from .bench import BenchProtocol, compare_norm_variants, run_benchmark, write_csv
    from .checkpoint import load_checkpoint
    from .model import init_model

    s = resolve(BENCH_DEFAULTS, args.config, "bench", args)
    _echo("bench", s)
    if s["variant"] not in ("naive", "fused", "both"):
        raise ConfigError(f"unknown variant {s['variant']!r}")
    if s["dtype"] not in ("float32", "float64"):
        raise ConfigError(f"unknown dtype {s['dtype']!r}")
    if s["ckpt"]:
        ckpt = load_checkpoint(s["ckpt"])
        name = Path(s["ckpt"]).stem
    else:
        ckpt = init_model(build_plan(load_spec(s["spec"])), s["seed"])
        name = Path(s["spec"]).stem
    protocol = BenchProtocol(
        s["prompt_tokens"], s["gen_tokens"], s["dry_run"], s["warmup_passes"], s["repetitions"], s["seed"]
    )
    dtype = np.dtype(s["dtype"])
    if s["variant"] == "both":
        cmp = compare_norm_variants(ckpt, protocol, dtype=dtype)
        reports = [cmp.naive, cmp.fused]
        extra = {"speedup": cmp.speedup, "max_logit_diff": cmp.max_logit_diff}
    else:
        reports = [run_benchmark(ckpt, protocol, s["variant"], dtype=dtype)]
        extra = {}
    for r in reports:
        print(json.dumps({"model": name, **r.as_record(), **extra}))
    artifacts = []
    if s["csv"]:
        write_csv(reports, s["csv"], name)
        artifacts.append(Path(s["csv"]))
    return s, artifacts


def cmd_filter_stats(args) -> tuple[dict, list[Path]]:
    from .data import ByteTokenizer, FilterPolicy, filter_stats, load_manifest

    s = resolve(FILTER_DEFAULTS, args.config, "filter-stats", args)
    _echo("filter-stats", s)
    stats = filter_stats(load_manifest(s["data"]), ByteTokenizer(), FilterPolicy(s["min_chars"], s["min_tokens"]))
    print(f"{'source':<20} {'total':>7} {'kept':>7} {'skip:char':>10} {'skip:token':>11}")
    for st in stats:
        print(f"{st.source:<20} {st.total:>7} {st.kept:>7} {st.skipped_char:>10} {st.skipped_token:>11}")
    return s, []


def cmd_avg_ckpt(args) -> tuple[dict, list[Path]]:
    from .checkpoint import save_checkpoint
    from .train import average_checkpoints

    s = {"inputs": args.inputs, "output": args.output}
    _echo("avg-ckpt", s)
    save_checkpoint(average_checkpoints(args.inputs), args.output)
    print(f"averaged {len(args.inputs)} checkpoints -> {args.output}")
    return s, [Path(p) for p in args.inputs] + [Path(args.output)]


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="layerwise", description="Layer-wise scaled decoder-only transformer toolkit.")
    p.add_argument("--run-dir", default="runs", help="where run manifests are written (default: runs)")
    common = _Parser(add_help=False)
    # also accepted after the subcommand; SUPPRESS keeps the global value otherwise
    common.add_argument("--run-dir", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    sp = sub.add_parser("plan", parents=[common], help="print the per-layer plan and parameter count")
    sp.add_argument("--config", required=True, help="model spec file (INI, [model] section)")
    for f in _SPEC_FLAGS:
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            sp.add_argument(flag, dest=f.name, type=lambda v: v.lower() in ("1", "true", "yes"), default=None)
        else:
            sp.add_argument(flag, dest=f.name, type=int if f.name in
                            ("d_model", "num_layers", "head_dim", "vocab_size", "context_length", "kv_group") else float,
                            default=None)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("train", parents=[common], help="desk-scale pretraining run")
    sp.add_argument("--config", help="run config (INI, [train] section)")
    sp.add_argument("--spec")
    sp.add_argument("--data", help="source manifest")
    for name, typ in [("steps", int), ("max_lr", float), ("warmup_init_lr", float), ("warmup_steps", int),
                      ("final_lr_fraction", float), ("weight_decay", float), ("clip_norm", float),
                      ("batch_tokens", int), ("accum", int), ("checkpoint_every", int), ("min_chars", int),
                      ("min_tokens", int), ("seed", int)]:
        sp.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    sp.add_argument("--out", help="output directory for checkpoints and the loss log")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", parents=[common], help="sample text from a checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--ckpt")
    sp.add_argument("--prompt")
    sp.add_argument("--n-new", dest="n_new", type=int)
    sp.add_argument("--temperature", type=float, help="0 means greedy")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("bench", parents=[common], help="prefill/generation throughput, naive vs fused RMSNorm")
    sp.add_argument("--config")
    sp.add_argument("--ckpt")
    sp.add_argument("--spec")
    for name, typ in [("prompt_tokens", int), ("gen_tokens", int), ("repetitions", int),
                      ("warmup_passes", int), ("seed", int)]:
        sp.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    sp.add_argument("--no-dry-run", dest="dry_run", action="store_const", const=False)
    sp.add_argument("--variant", choices=["naive", "fused", "both"])
    sp.add_argument("--dtype", choices=["float32", "float64"])
    sp.add_argument("--csv")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("filter-stats", parents=[common], help="kept/skipped document counts per source")
    sp.add_argument("--config")
    sp.add_argument("--data")
    sp.add_argument("--min-chars", dest="min_chars", type=int)
    sp.add_argument("--min-tokens", dest="min_tokens", type=int)
    sp.set_defaults(func=cmd_filter_stats)

    sp = sub.add_parser("avg-ckpt", parents=[common], help="elementwise mean of checkpoints")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(func=cmd_avg_ckpt)
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        settings, artifacts = args.func(args)
        _write_manifest(args.run_dir, args.command, argv, settings, artifacts)
    except UsageError:
        return 1
    except LayerwiseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

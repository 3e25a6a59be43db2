"""Command-line entry point: ``w2vc <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Configuration resolves as defaults <- ``--config`` file <- per-key flags.
The file is INI-style (a simple TOML subset also parses) with ``[model]``
and ``[run]`` sections, e.g.::

    [model]
    V = 320
    K = 384
    [run]
    steps = 500
    variant = "w2vC-GS"
"""

from __future__ import annotations

import argparse
import ast
import configparser
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import frontend as fe
from . import tensor_core as tc
from .checkpoint import CheckpointError
from .network import ConfigError, ModelConfig
from .quantizer import QuantizerConfigError, export_codebook_csv, export_indices_csv
from .training import (VARIANTS, CompatibilityError, RunConfig, evaluate_codebook, export_encoder,
                       gradient_check, load_checkpoint, train_loop)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("w2vc")

_MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
_RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "model"}
# flags with a dedicated meaning that also name a config key
_SHARED = {"seed", "variant", "steps"}


class UsageError(Exception):
    pass


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _coerce(key: str, raw, typ):
    """Coerce a file or flag value to the dataclass field's type."""
    if isinstance(raw, str):
        s = raw.strip()
        if typ in ("bool", bool):
            low = s.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise UsageError(f"{key}: expected a boolean, got {raw!r}")
        try:
            val = ast.literal_eval(s)
        except (ValueError, SyntaxError):
            val = s
    else:
        val = raw
    t = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if t == "int":
            if isinstance(val, float) and not val.is_integer():
                raise ValueError
            return int(val)
        if t == "float":
            return float(val)
        if t == "str":
            return str(val)
        if t == "bool":
            return bool(val)
    except (TypeError, ValueError):
        raise UsageError(f"{key}: cannot interpret {raw!r} as {t}") from None
    return val


def read_config_file(path) -> dict[str, dict]:
    """``{"model": {...}, "run": {...}}`` from an INI/TOML-subset file."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep V, K, G case
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except configparser.Error as e:
        raise UsageError(f"cannot parse {path}: {e}") from None
    out: dict[str, dict] = {"model": {}, "run": {}}
    for sec in cp.sections():
        if sec not in out:
            raise UsageError(f"{path}: unknown section [{sec}] (expected [model] or [run])")
        table = _MODEL_FIELDS if sec == "model" else _RUN_FIELDS
        for k, v in cp[sec].items():
            k = k.replace("-", "_")
            if k not in table:
                raise UsageError(f"{path}: unknown key {k!r} in [{sec}]")
            out[sec][k] = _coerce(k, v, table[k].type)
    return out


def config_load(path=None, overrides: dict | None = None, dims: str = "desk") -> RunConfig:
    """Resolve defaults <- file <- overrides into a validated ``RunConfig``.

    A variant fixes gamma_consistency and the quantizer unless those keys
    are set explicitly, in which case a contradiction is an error.
    """
    file_cfg = read_config_file(path) if path else {"model": {}, "run": {}}
    model_kw = dict(file_cfg["model"])
    run_kw = dict(file_cfg["run"])
    for k, v in (overrides or {}).items():
        if k in _RUN_FIELDS:
            run_kw[k] = _coerce(k, v, _RUN_FIELDS[k].type)
        elif k in _MODEL_FIELDS:
            model_kw[k] = _coerce(k, v, _MODEL_FIELDS[k].type)
        else:
            raise UsageError(f"unknown configuration key {k!r}")
    variant = run_kw.setdefault("variant", RunConfig.variant)
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    gamma, quant = VARIANTS[variant]
    model_kw.setdefault("gamma_consistency", gamma)
    model_kw.setdefault("quantizer", quant)
    base = {"desk": ModelConfig, "toy": ModelConfig.toy, "paper": ModelConfig.paper}[dims]
    model = base(**model_kw)
    return RunConfig(model=model, **run_kw)


def config_text(run: RunConfig) -> str:
    """The resolved configuration in the same format ``--config`` reads."""
    lines = ["[model]"]
    lines += [f"{k} = {json.dumps(v)}" for k, v in run.model.to_dict().items()]
    lines += ["", "[run]"]
    lines += [f"{k} = {json.dumps(v)}" for k, v in run.to_dict().items() if k != "model"]
    return "\n".join(lines) + "\n"


def echo_config(run: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.toml"
    path.write_text(config_text(run))
    return path


# --- parser ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="w2vc", description="wav2vec-C style pre-training on a numpy autodiff engine")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *, out=True):
        sp.add_argument("--config", type=Path)
        sp.add_argument("--dims", choices=("desk", "toy", "paper"), default="desk")
        if out:
            sp.add_argument("--out", type=Path)
        g = sp.add_argument_group("configuration overrides")
        for name in list(_MODEL_FIELDS) + list(_RUN_FIELDS):
            if name in _SHARED:
                continue
            g.add_argument(_flag(name), dest=f"cfg_{name}", metavar="VALUE")
        g.add_argument("--seed", dest="cfg_seed", metavar="N")
        g.add_argument("--variant", dest="cfg_variant", choices=sorted(VARIANTS))
        g.add_argument("--steps", dest="cfg_steps", metavar="N")

    sp = sub.add_parser("synth-data", help="write a seeded synthetic feature corpus")
    common(sp)
    sp.add_argument("--n-utts", type=int, default=64)
    sp.add_argument("--min-frames", type=int, default=60)
    sp.add_argument("--max-frames", type=int, default=120)
    sp.add_argument("--classes", type=int, default=8)
    sp.add_argument("--noise", type=float, default=0.3)

    sp = sub.add_parser("featurize", help="log-STFT features for WAV / .npy waveforms")
    sp.add_argument("--data", type=Path, nargs="+", required=True, help="files or directories")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--workers", type=int)

    sp = sub.add_parser("train", help="pre-train one variant")
    common(sp)
    sp.add_argument("--data", type=Path, required=True, help="corpus manifest.jsonl")
    sp.add_argument("--stop-at", type=int)
    sp.add_argument("--no-resume", action="store_true")

    sp = sub.add_parser("grad-check", help="finite-difference check of the full loss")
    common(sp)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--length", type=int, default=14)

    for name, helptext in (("codebook-stats", "codebook utilization report as JSON"),
                           ("export-codebook", "write the codebook (and optionally indices) as CSV"),
                           ("export-encoder", "write encoder/context weights")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--ckpt", type=Path, required=True)
        if name == "codebook-stats":
            sp.add_argument("--data", type=Path, required=True)
        else:
            sp.add_argument("--data", type=Path)
            sp.add_argument("--out", type=Path, required=True)
    return p


def _overrides(args) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def _resolve(args) -> RunConfig:
    return config_load(args.config, _overrides(args), args.dims)


def _corpus(path: Path) -> fe.NormalizedCorpus:
    if path.is_dir():
        path = path / "manifest.jsonl"
    return fe.NormalizedCorpus(fe.load_manifest(path))


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_plain)


def _print_json(obj) -> None:
    sys.stdout.write(_dumps(obj) + "\n")


# --- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    run = _resolve(args)
    if args.out is None:
        raise UsageError("synth-data needs --out")
    m = fe.synth_corpus(args.out, seed=run.seed, n_utts=args.n_utts,
                        frames_range=(args.min_frames, args.max_frames), dim=run.model.F,
                        n_phone_classes=args.classes, noise=args.noise)
    echo_config(run, args.out)
    _print_json({"manifest": str(Path(args.out) / "manifest.jsonl"), "utterances": len(m.entries),
                 "dim": m.dim, "frames": int(sum(e.frames for e in m.entries))})
    return EXIT_OK


def cmd_featurize(args) -> int:
    files = []
    for p in args.data:
        if p.is_dir():
            files += sorted(q for q in p.iterdir() if q.suffix in (".wav", ".npy"))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(p)
    if not files:
        raise FileNotFoundError("no .wav or .npy inputs found")
    m = fe.featurize_files(files, args.out, workers=args.workers)
    _print_json({"manifest": str(args.out / "manifest.jsonl"), "utterances": len(m.entries), "dim": m.dim})
    return EXIT_OK


def cmd_train(args) -> int:
    run = _resolve(args)
    out = args.out or Path("runs") / f"{run.variant}_seed{run.seed}"
    corpus = _corpus(args.data)
    echo_config(run, out)

    def progress(step, res):
        if step % 50 == 0 or step == run.steps:
            lb = res.losses
            log.info("step %d L=%.4f L_m=%.4f L_cb=%.4f L_c=%.4f", step, lb.L, lb.L_m, lb.L_cb, lb.L_c)

    params, state = train_loop(run, corpus, out, resume=not args.no_resume, stop_at=args.stop_at,
                               progress=progress)
    _print_json({"out": str(out), "step": state.step, "skipped_steps": state.skipped,
                 "metrics": str(Path(out) / "metrics.csv")})
    return EXIT_OK


def cmd_grad_check(args) -> int:
    explicit = _overrides(args)
    if "variant" in explicit:
        variants = [explicit["variant"]]
    else:
        variants = list(VARIANTS)
    reports, ok = {}, True
    for v in variants:
        run = config_load(args.config, {**explicit, "variant": v}, args.dims)
        rep = gradient_check(run.model, seed=run.seed, T=args.length, tol=args.tol)
        ok = ok and bool(rep.passed)
        reports[v] = {"passed": rep.passed, "max_rel_err": rep.max_rel_err, "worst_param": rep.worst_param,
                      "per_param": rep.per_param, "suspect_ops": rep.suspect_ops}
    if args.out is not None:
        echo_config(run, args.out)
        (Path(args.out) / "grad_check.json").write_text(_dumps(reports))
    _print_json({"tol": args.tol, "passed": ok, "variants": reports})
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_codebook_stats(args) -> int:
    run, params, _ = load_checkpoint(args.ckpt)
    ev = evaluate_codebook(params, run.model, _corpus(args.data))
    _print_json({"variant": run.variant, "V": run.model.V, "G": run.model.G, **ev.to_json()})
    return EXIT_OK


def cmd_export_codebook(args) -> int:
    run, params, _ = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_codebook_csv(params["quantizer.codes"].data, out / "codebook.csv")
    written = [str(out / "codebook.csv")]
    if args.data is not None:
        corpus = _corpus(args.data)
        ev = evaluate_codebook(params, run.model, corpus)
        export_indices_csv(zip(corpus.ids(), ev.indices), out / "indices.csv")
        written.append(str(out / "indices.csv"))
    echo_config(run, out)
    _print_json({"written": written})
    return EXIT_OK


def cmd_export_encoder(args) -> int:
    run, params, _ = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_encoder(out, params, run.model)
    echo_config(run, out.parent)
    _print_json({"written": str(out)})
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth, "featurize": cmd_featurize, "train": cmd_train, "grad-check": cmd_grad_check,
    "codebook-stats": cmd_codebook_stats, "export-codebook": cmd_export_codebook,
    "export-encoder": cmd_export_encoder,
}

DATA_ERRORS = (fe.FeatureFormatError, fe.InputTooShortError, CheckpointError, CompatibilityError,
               FileNotFoundError, IsADirectoryError, json.JSONDecodeError)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, QuantizerConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except tc.NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        # remaining ValueErrors come from malformed inputs (manifests, wav files)
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

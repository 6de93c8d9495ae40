"""``tape`` command line for the symmetry checks and the addition experiments.

Every subcommand reads a flat ``key=value`` file (``--config``). Unknown keys
are errors, relative paths are resolved against the config file's directory,
and the seed may be overridden by ``TAPE_SEED`` or ``--seed`` (in that order of
increasing priority). Outputs carry the config hash and seed.

Exit codes: 0 success, 1 a check failed, 2 usage or config error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import equivariance as eqv
from . import nc1
from .model.config import ConfigError, ModelConfig
from .model.layers import block_logits
from .model.params import load_checkpoint
from .model.transformer import TapeModel, model_forward, rope_attention_baseline
from .numcore.io import FormatError
from .numcore.rng import Rng
from .numcore.tensor import as_tensor
from .posenc import RopeSchedule, export_pe_dot_products, rope_init
from .tasks.addition import VOCAB_SIZE, AdditionDataset
from .tasks.evaluate import evaluate_grid
from .tasks.train import TrainConfig, TrainingDiverged, resume, train, write_checkpoint

log = logging.getLogger("tape")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
U64_MAX = 2**64 - 1


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration

_MODEL_DEFAULTS = {f.name: f.default for f in dataclasses.fields(ModelConfig) if f.name != "seed"}
_MODEL_DEFAULTS["vocab"] = VOCAB_SIZE + 1
_MODEL_DEFAULTS["n_ctx"] = 80  # room for 20-digit operands during evaluation

# key -> (default, description); model.* keys mirror ModelConfig
SCHEMA: dict[str, tuple[object, str]] = {
    "seed": (0, "master seed (u64); TAPE_SEED and --seed override it"),
    "out": ("out", "output directory"),
    "jobs": (1, "worker threads for trial loops"),
    **{f"model.{k}": (v, f"model hyperparameter {k}") for k, v in _MODEL_DEFAULTS.items()},
    "props.trials": (50, "random trials per equivariance check"),
    "props.tol": (1e-8, "max allowed deviation"),
    "props.dim": (16, "model width used by the symmetry suites"),
    "props.deltas": ("1,3,17,100", "position shifts for the shift-invariance check"),
    "props.rope_instances": (20, "instances for the rotary special-case check"),
    "props.rope_tol": (1e-10, "tolerance of the rotary special-case check"),
    "nc1.lengths": ("8,16,32,64,128", "sequence lengths to sweep"),
    "nc1.instances": (1000, "random instances per length"),
    "nc1.threshold": (nc1.THRESHOLD, "layer-2 hard-sigmoid threshold"),
    "nc1.bos_fix": (True, "feed the BOS channel into the output head"),
    "data.max_len": (10, "max operand length in training data"),
    "data.train_size": (50000, "training pool size"),
    "data.lsd_first": (True, "digits least-significant-first"),
    "data.cache": ("", "optional dataset cache file"),
    "train.lr": (1e-4, "peak learning rate"),
    "train.beta1": (0.9, "AdamW beta1"),
    "train.beta2": (0.95, "AdamW beta2"),
    "train.weight_decay": (0.1, "AdamW decoupled weight decay"),
    "train.batch_size": (32, "batch size"),
    "train.steps": (1000, "optimizer steps"),
    "train.warmup": (0, "linear warmup steps"),
    "train.grad_clip": (1.0, "global gradient-norm clip"),
    "train.checkpoint_every": (0, "checkpoint cadence in steps (0: only at the end)"),
    "train.time_budget": (0.0, "CPU-seconds budget per model (0: unlimited)"),
    "train.precision": ("float64", "forward/backward dtype: float64 or float32 (parameters stay float64)"),
    "train.baseline": (True, "also train the rotary baseline with the same budget"),
    "train.resume": (False, "continue from an existing checkpoint"),
    "checkpoint": ("", "model checkpoint (default <out>/<variant>.tapa)"),
    "baseline_checkpoint": ("", "rotary baseline checkpoint (default <out>/rope.tapa)"),
    "eval.max_len": (20, "largest operand length in the grid"),
    "eval.samples_per_cell": (100, "samples per (len_a, len_b) cell"),
    "eval.baseline": (True, "also evaluate the rotary baseline checkpoint"),
    "dump.layers": ("1", "comma-separated 1-based layers (0: the initial encoding)"),
    "dump.length": (32, "tokens in the probe sequence"),
}
PATH_KEYS = ("out", "data.cache", "checkpoint", "baseline_checkpoint")


def _parse_value(key: str, raw: str):
    default = SCHEMA[key][0]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:
            return None if raw in ("", "None") else int(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


@dataclass
class RunConfig:
    values: dict
    base_dir: Path = Path(".")

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: v for k, (v, _) in SCHEMA.items()})

    @classmethod
    def parse(cls, text: str, base_dir=".") -> "RunConfig":
        cfg = cls.defaults()
        cfg.base_dir = Path(base_dir)
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value")
            if key not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            cfg.values[key] = _parse_value(key, raw)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.parse(path.read_text(), path.resolve().parent)

    def serialize(self) -> str:
        return "".join(f"{k}={_format_value(v)}\n" for k, v in sorted(self.values.items()))

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        self.values[key] = value

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()[:16]

    def path(self, key: str) -> Path | None:
        raw = self.values[key]
        if not raw:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def ints(self, key: str) -> list[int]:
        return [int(x) for x in str(self.values[key]).split(",") if x.strip()]

    def model(self, **overrides) -> ModelConfig:
        kw = {k[len("model."):]: v for k, v in self.values.items() if k.startswith("model.")}
        kw["seed"] = self.values["seed"] % 2**63
        kw.update(overrides)
        return ModelConfig(**kw)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        kw = {k[len("train."):]: v for k, v in self.values.items()
              if k.startswith("train.") and k[len("train."):] in names}
        return TrainConfig(seed=self.values["seed"] % 2**63, **kw)


# ---------------------------------------------------------------------------
# helpers


class Reporter:
    """Collects JSONL rows; every row carries the config hash and seed."""

    def __init__(self, rc: RunConfig, name: str):
        self.rc = rc
        self.out = rc.path("out")
        self.out.mkdir(parents=True, exist_ok=True)
        self.file = self.out / f"{name}.jsonl"
        self.rows: list[dict] = []

    def add(self, row: dict) -> None:
        row = {"config_hash": self.rc.hash, "seed": self.rc["seed"], **row}
        self.rows.append(row)
        print(json.dumps(row, default=_json_default), flush=True)

    def close(self) -> None:
        self.file.write_text("".join(json.dumps(r, default=_json_default) + "\n" for r in self.rows))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _tag(rc: RunConfig) -> str:
    return f"config_hash={rc.hash} seed={rc['seed']}"


def _checkpoint_path(rc: RunConfig, key: str, variant: str) -> Path:
    return rc.path(key) or rc.path("out") / f"{variant}.tapa"


# ---------------------------------------------------------------------------
# subcommands


def _rope_special_case(rc: RunConfig, rng: Rng) -> dict:
    cfg = ModelConfig(dim=rc["props.dim"], heads=2, depth=1, vocab=8)
    sched = RopeSchedule(cfg.blocks, cfg.head_dim, cfg.rope_base, cfg.theta_sign)
    worst = 0.0
    for k in range(rc["props.rope_instances"]):
        r = rng.spawn(k)
        n = int(r.integers(2, 17))
        X = r.normal((n, cfg.dim))
        wq, wk = r.normal((cfg.dim, cfg.dim)), r.normal((cfg.dim, cfg.dim))
        pos = r.uniform(-50.0, 50.0, n)
        E = rope_init(pos, cfg.heads, sched).values
        a = block_logits(as_tensor((X @ wq)[None]), as_tensor((X @ wk)[None]), E[None], cfg).data[0].sum(-1)
        b = rope_attention_baseline(X, None, wq, wk, sched, cfg.heads, pos)
        worst = max(worst, float(np.abs(a - b).max()))
    return {"check": "rope_special_case", "instances": rc["props.rope_instances"],
            "max_deviation": worst, "tol": rc["props.rope_tol"], "passed": worst <= rc["props.rope_tol"]}


def cmd_props(rc: RunConfig, args) -> int:
    rep = Reporter(rc, "props")
    seed, trials, tol, jobs = rc["seed"], rc["props.trials"], rc["props.tol"], rc["jobs"]
    cfg = rc.model(dim=rc["props.dim"], heads=2, vocab=8, n_ctx=64)
    if args.break_equivariance:
        cfg = cfg.replace(rotation_equivariant=False)
    params = eqv.random_layer_params(cfg, Rng(seed, 1))
    layer = eqv.tape_stack(cfg, params)
    ok = True
    for kind, check in (("perm", eqv.check_perm_equivariance), ("ortho", eqv.check_ortho_equivariance)):
        r = check(layer, trials, tol, Rng(seed, 2 if kind == "perm" else 3), jobs)
        rep.add({"check": f"{kind}_equivariance", "expect": "pass", **r.summary()})
        if not r.passed:
            ok = False
            print(f"reproducer: {json.dumps(r.reproducer)}", file=sys.stderr)
    # mutations must be caught
    mutants = [eqv.flattened_pe_stack(cfg, params, Rng(seed, 4))]
    ablated = cfg.replace(rotation_equivariant=False)
    mutants.append(eqv.tape_stack(ablated, eqv.random_layer_params(ablated, Rng(seed, 1)), "ablation_w_on_R"))
    for m in mutants:
        r = eqv.check_ortho_equivariance(m, trials, tol, Rng(seed, 3), jobs)
        caught = not r.passed
        rep.add({"check": f"mutation_{m.name}", "expect": "fail", "caught": caught, **r.summary()})
        ok &= caught
    model = TapeModel(cfg, params)
    sr = eqv.check_shift_invariance(model, tuple(rc.ints("props.deltas")), tol, rng=Rng(seed, 5))
    for line in sr.to_jsonl().splitlines():
        rep.add(json.loads(line))
    ok &= sr.passed and sr.bos_logit_dev > 0
    rs = _rope_special_case(rc, Rng(seed, 6))
    rep.add(rs)
    ok &= rs["passed"]
    rep.add({"summary": "props", "passed": bool(ok)})
    rep.close()
    return EXIT_OK if ok else EXIT_FAIL


def cmd_nc1(rc: RunConfig, args) -> int:
    threshold = rc["nc1.threshold"] + (1.0 if args.corrupt_weights else 0.0)
    net = nc1.build_construction(threshold, rc["nc1.bos_fix"])
    lengths = rc.ints("nc1.lengths")
    t0 = time.perf_counter()
    rows, first_fail = nc1.precision_sweep(net, lengths, rc["nc1.instances"], Rng(rc["seed"], 21))
    out = rc.path("out")
    out.mkdir(parents=True, exist_ok=True)
    csv = out / "nc1_sweep.csv"
    keys = list(rows[0]) if rows else ["N"]
    lines = [f"# {_tag(rc)}", ",".join(keys)] + [",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k])
                                                            for k in keys) for r in rows]
    margins = nc1.identity_margin(np.asarray(lengths))
    lines += ["# identity margin at position N: " + ",".join(f"{n}:{m:.6g}" for n, m in zip(lengths, margins))]
    csv.write_text("\n".join(lines) + "\n")
    ok = first_fail is None
    summary = {"config_hash": rc.hash, "seed": rc["seed"], "lengths": lengths, "first_fail": first_fail,
               "corrupt_weights": bool(args.corrupt_weights), "passed": ok, "seconds": round(time.perf_counter() - t0, 3)}
    print(json.dumps(summary))
    return EXIT_OK if ok else EXIT_FAIL


def _dataset(rc: RunConfig) -> AdditionDataset:
    cache = rc.path("data.cache")
    if cache is not None and cache.exists():
        return AdditionDataset.load(cache)
    data = AdditionDataset.generate(rc["data.max_len"], rc["data.train_size"], rc["seed"] % 2**63,
                                    rc["data.lsd_first"])
    if cache is not None:
        data.save(cache)
    return data


def _train_one(rc: RunConfig, cfg: ModelConfig, data: AdditionDataset, ckpt: Path) -> dict:
    tc = rc.train_config()
    run_dir = ckpt.parent / (ckpt.stem + "_run")
    if rc["train.resume"] and ckpt.exists():
        res = resume(ckpt, data, tc, run_dir)
    else:
        res = train(cfg, data, tc, run_dir)
    # the run directory holds the rolling checkpoint; publish the final one under its name
    final = run_dir / "checkpoint.tapa"
    final.replace(ckpt)
    loss_csv = run_dir / "loss.csv"
    loss_csv.write_text(f"# {_tag(rc)} variant={cfg.variant}\n" + loss_csv.read_text())
    last = res.losses[-1][1] if res.losses else float("nan")
    return {"variant": cfg.variant, "checkpoint": str(ckpt), "steps": res.steps_done,
            "cpu_seconds": round(res.seconds, 2), "final_loss": last, "stopped_early": res.stopped_early}


def cmd_train(rc: RunConfig, args) -> int:
    data = _dataset(rc)
    cfg = rc.model()
    rep = Reporter(rc, "train")
    try:
        rep.add(_train_one(rc, cfg, data, _checkpoint_path(rc, "checkpoint", cfg.variant)))
        if rc["train.baseline"] and cfg.variant != "rope":
            base = cfg.replace(variant="rope")
            rep.add(_train_one(rc, base, data, _checkpoint_path(rc, "baseline_checkpoint", "rope")))
    except TrainingDiverged as exc:
        rep.add({"error": str(exc), "step": exc.step, "checkpoint": str(exc.checkpoint)})
        rep.close()
        return EXIT_FAIL
    rep.close()
    return EXIT_OK


def cmd_eval(rc: RunConfig, args) -> int:
    rep = Reporter(rc, "eval")
    todo = [("model", _checkpoint_path(rc, "checkpoint", rc["model.variant"]))]
    if rc["eval.baseline"]:
        todo.append(("baseline", _checkpoint_path(rc, "baseline_checkpoint", "rope")))
    for role, path in todo:
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
    for role, path in todo:
        cfg, params, _ = load_checkpoint(path)
        t0 = time.process_time()
        grid = evaluate_grid(cfg, params, rc["eval.max_len"], rc["eval.samples_per_cell"], Rng(rc["seed"], 31),
                             rc["data.max_len"], rc["data.lsd_first"])
        csv = rc.path("out") / f"grid_{cfg.variant}.csv"
        grid.to_csv(csv, f"{_tag(rc)} variant={cfg.variant}")
        lo, hi = rc["data.max_len"] + 1, rc["eval.max_len"]
        rep.add({"role": role, "variant": cfg.variant, "grid": str(csv), "mean": grid.mean,
                 "in_distribution": grid.in_distribution,
                 "extrapolation": grid.region_mean(lo, hi) if hi >= lo else None,
                 "cpu_seconds": round(time.process_time() - t0, 2)})
    rep.close()
    return EXIT_OK


def cmd_dump_pe(rc: RunConfig, args) -> int:
    ckpt = rc.path("checkpoint")
    if ckpt is not None:
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
        cfg, params, _ = load_checkpoint(ckpt)
        model = TapeModel(cfg, params)
    else:
        model = TapeModel.init(rc.model())
    cfg = model.cfg
    if cfg.variant != "tape":
        raise ConfigError("dump-pe needs a TAPE model (model.variant=tape)")
    n = min(rc["dump.length"], cfg.n_ctx)
    tokens = Rng(rc["seed"], 41).integers(0, cfg.vocab, n)
    _, states = model_forward(tokens, cfg, model.params, return_states=True)
    out = rc.path("out")
    out.mkdir(parents=True, exist_ok=True)
    layers = rc.ints("dump.layers")
    for layer in layers:
        if not 0 <= layer <= cfg.depth:
            raise ConfigError(f"dump.layers: layer {layer} outside 0..{cfg.depth}")
    for layer in layers:
        E = states[layer][1][0]
        path = out / f"pe_dots_layer{layer}.csv"
        grid = export_pe_dot_products(E, path, f"# {_tag(rc)} layer={layer}\n")
        print(json.dumps({"config_hash": rc.hash, "seed": rc["seed"], "layer": layer, "file": str(path),
                          "toeplitz_dev": toeplitz_deviation(grid)}))
    return EXIT_OK


def toeplitz_deviation(grid: np.ndarray) -> float:
    """Largest spread of values along any diagonal, relative to the largest |entry|."""
    n = grid.shape[0]
    spread = max((np.ptp(np.diagonal(grid, k)) for k in range(-n + 1, n)), default=0.0)
    return float(spread / max(np.abs(grid).max(), 1e-300))


# ---------------------------------------------------------------------------
# entry point


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="key=value run configuration")
    common.add_argument("--out", help="output directory (overrides 'out')")
    common.add_argument("--jobs", type=_positive, help="worker threads for trial loops")
    common.add_argument("--trials", type=_positive, help="trials per randomized check")
    common.add_argument("--seed", type=_u64, help="master seed (overrides TAPE_SEED and the file)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="tape", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    props = sub.add_parser("props", parents=[common], help="equivariance, shift and rotary checks")
    props.add_argument("--break-equivariance", action="store_true",
                       help="run the suite on the non-equivariant ablation (must fail)")
    n = sub.add_parser("nc1", parents=[common], help="word-problem construction sweep")
    n.add_argument("--corrupt-weights", action="store_true", help="shift a layer-2 threshold (must fail)")
    sub.add_parser("train", parents=[common], help="train on addition")
    sub.add_parser("eval", parents=[common], help="accuracy grids for trained checkpoints")
    sub.add_parser("dump-pe", parents=[common], help="export PE dot-product grids")
    sub.add_parser("config", parents=[common], help="print the resolved configuration")
    return p


COMMANDS = {"props": cmd_props, "nc1": cmd_nc1, "train": cmd_train, "eval": cmd_eval, "dump-pe": cmd_dump_pe}


def resolve_config(args) -> RunConfig:
    rc = RunConfig.load(args.config)
    env = os.environ.get("TAPE_SEED")
    if env is not None:
        try:
            rc.set("seed", _u64(env))
        except argparse.ArgumentTypeError as exc:
            raise ConfigError(f"TAPE_SEED: {exc}") from None
    if args.seed is not None:
        rc.set("seed", args.seed)
    if args.out is not None:
        rc.set("out", str(Path(args.out).resolve()))
    if args.jobs is not None:
        rc.set("jobs", args.jobs)
    if args.trials is not None:
        rc.set("props.trials", args.trials)
    if rc["props.trials"] < 1:
        raise ConfigError("props.trials must be >= 1")
    if not 0 <= rc["seed"] <= U64_MAX:
        raise ConfigError("seed must fit in 64 unsigned bits")
    return rc


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        rc = resolve_config(args)
        if args.command == "config":
            sys.stdout.write(rc.serialize())
            return EXIT_OK
        return COMMANDS[args.command](rc, args)
    except (ConfigError, UsageError) as exc:
        print(f"tape: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"tape: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()

"""Command-line entry point: ``gref <command> [flags]``.

Commands: simulate, pretrain, dpo, decode, eval, bench, ablate.  Every run
writes into ``--out DIR`` the effective config (``config.ini``), a
``run.json`` with seed and source revision, and its CSV/JSON artifacts.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from gref.data import SimulatorConfig, dump_latents, dump_sessions, load_latents, load_sessions, simulate_sessions, \
    split_by_hash, stable_hash
from gref.decoding import decode_records, write_decode_records
from gref.errors import ConfigError, GrefError, UsageError
from gref.evaluation import ABLATION_CELLS, MetricReport, ablation_defaults, evaluate, latency_bench, \
    reports_to_csv, reports_to_json, run_ablation
from gref.model import GenRerankerModel, ModelConfig
from gref.training import TrainConfig, load_checkpoint, run_stage, save_checkpoint, write_loss_curve

log = logging.getLogger("gref")

COMMANDS = ("simulate", "pretrain", "dpo", "decode", "eval", "bench", "ablate")


@dataclasses.dataclass
class EvalConfig:
    valid_fraction: float = 0.2
    replays: int = 8
    warmup: int = 5
    iters: int = 50
    bench_sessions: int = 64
    ablation_seeds: str = "0,1,2,3,4"

    def __post_init__(self):
        if not 0.0 < self.valid_fraction < 1.0:
            raise ConfigError("eval.valid_fraction must lie in (0, 1)")
        if self.replays < 1 or self.warmup < 0 or self.bench_sessions < 1:
            raise ConfigError("eval.replays and eval.bench_sessions must be positive, eval.warmup non-negative")

    @property
    def seeds(self) -> list[int]:
        try:
            return [int(s) for s in self.ablation_seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"eval.ablation_seeds must be comma-separated integers: {exc}") from None


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "simulator": SimulatorConfig, "eval": EvalConfig}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _coerce(cls, key: str, raw: str):
    field = {f.name: f for f in dataclasses.fields(cls)}[key]
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


@dataclasses.dataclass
class RunConfig:
    """Explicit settings per section; everything else takes the command's base value."""

    values: dict = dataclasses.field(default_factory=lambda: {s: {} for s in SECTIONS})

    def set(self, section: str, key: str, raw: str) -> None:
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        names = {f.name for f in dataclasses.fields(SECTIONS[section])}
        if key not in names:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = _coerce(SECTIONS[section], key, raw.strip())

    def explicit(self, section: str, key: str) -> bool:
        return key in self.values[section]

    def build(self, section: str, base=None):
        cls = SECTIONS[section]
        base = base if base is not None else cls()
        return dataclasses.replace(base, **self.values[section])


def read_config_file(path, cfg: RunConfig) -> None:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for section in parser.sections():
        for key, raw in parser.items(section):
            cfg.set(section, key, raw)


def apply_override(text: str, cfg: RunConfig) -> None:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"--set expects section.key=value, got {text!r}")
    lhs, raw = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    cfg.set(section, key, raw)


def config_text(configs: dict) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, obj in configs.items():
        parser[section] = {k: repr(v) if isinstance(v, float) else str(v)
                           for k, v in dataclasses.asdict(obj).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gref", description="Generative reranking: simulate, train, decode, evaluate.")
    p.add_argument("command", choices=COMMANDS, help="what to run")
    p.add_argument("--config", help="INI file with [model] [train] [simulator] [eval] sections")
    p.add_argument("--out", help="run directory for all artifacts")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--data", help="sessions JSONL (as written by simulate)")
    p.add_argument("--mode", choices=("ar", "omtp", "both"), default="both", help="decoding mode")
    p.add_argument("--heads", type=int, help="heads used by omtp decoding (default: all)")
    p.add_argument("--allow-scratch", action="store_true", help="permit dpo from a random init")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _require(args, *flags):
    for flag in flags:
        if getattr(args, flag.lstrip("-").replace("-", "_")) is None:
            raise UsageError(f"{args.command} requires {flag}")


def _modes(args) -> list[str]:
    return ["ar", "omtp"] if args.mode == "both" else [args.mode]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

class Run:
    def __init__(self, args, cfg: RunConfig):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.used: dict = {}
        self.artifacts: list[str] = []

    def section(self, name: str, base=None):
        obj = self.cfg.build(name, base)
        self.used[name] = obj
        return obj

    def simulator(self) -> SimulatorConfig:
        base = SimulatorConfig(seed=self.args.seed)
        return self.section("simulator", base)

    def train(self, base: TrainConfig | None = None) -> TrainConfig:
        base = dataclasses.replace(base or TrainConfig(), seed=self.args.seed)
        return self.section("train", base)

    def model_config(self, records=None, base: ModelConfig | None = None) -> ModelConfig:
        base = base or ModelConfig()
        if records:
            # shape fields follow the data unless set explicitly
            r = records[0]
            base = dataclasses.replace(base, feature_dim=r.features.shape[1], max_candidates=len(r.candidates),
                                       slate_length=len(r.exposed))
        return self.section("model", base)

    def write(self, name: str, text: str) -> None:
        (self.out / name).write_text(text, encoding="utf-8")
        self.artifacts.append(name)

    def finish(self) -> None:
        self.write("config.ini", config_text(self.used))
        meta = {
            "command": self.args.command,
            "seed": self.args.seed,
            "git_describe": git_describe(),
            "mode": self.args.mode,
            "heads": self.args.heads,
            "init": self.args.init,
            "data": self.args.data,
            "artifacts": sorted(self.artifacts + ["run.json"]),
        }
        (self.out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_records(run: Run):
    _require(run.args, "--data")
    return list(load_sessions(run.args.data))


def _load_model(run: Run, records=None) -> GenRerankerModel:
    if run.args.init:
        ckpt = load_checkpoint(run.args.init)
        run.used["model"] = ckpt.model.config
        return ckpt.model
    mc = run.model_config(records)
    return GenRerankerModel(mc, seed=stable_hash(run.args.seed, "init") % 2**32)


def cmd_simulate(run: Run) -> None:
    corpus = simulate_sessions(run.simulator())
    dump_sessions(corpus.records, run.out / "sessions.jsonl")
    dump_latents(corpus, run.out / "latents.json")
    run.artifacts += ["sessions.jsonl", "latents.json"]
    run.write("simulator.json", json.dumps(dataclasses.asdict(corpus.config), indent=2, sort_keys=True) + "\n")


def _train_stage(run: Run, stage: str) -> None:
    records = _load_records(run)
    ev = run.section("eval")
    train, _ = split_by_hash(records, ev.valid_fraction)
    tc = run.train()
    if stage == "dpo" and run.args.init is None and not run.args.allow_scratch:
        raise UsageError("dpo requires --init CHECKPOINT (or --allow-scratch)")
    model = _load_model(run, records)
    res = run_stage(stage, model, train, tc, allow_scratch=run.args.allow_scratch)
    save_checkpoint(run.out / "model.ckpt", model, res.stage, res.optimizer, res.epoch)
    write_loss_curve(run.out / "loss.csv", res.curve)
    run.artifacts += ["model.ckpt", "loss.csv"]


def cmd_pretrain(run: Run) -> None:
    _train_stage(run, "pretrain")


def cmd_dpo(run: Run) -> None:
    _train_stage(run, "dpo")


def cmd_decode(run: Run) -> None:
    _require(run.args, "--init")
    records = _load_records(run)
    model = _load_model(run)
    rows = []
    for mode in _modes(run.args):
        rows += decode_records(model, records, mode, run.args.heads)
    write_decode_records(run.out / "decode.jsonl", rows)
    run.artifacts.append("decode.jsonl")


def _simulator_for(data_path: Path) -> SimulatorConfig | None:
    path = data_path.parent / "simulator.json"
    if not path.exists():
        return None
    return SimulatorConfig(**json.loads(path.read_text(encoding="utf-8")))


def cmd_eval(run: Run) -> None:
    _require(run.args, "--init")
    records = _load_records(run)
    ev = run.section("eval")
    _, valid = split_by_hash(records, ev.valid_fraction)
    if not valid:
        raise UsageError("validation split is empty")
    model = _load_model(run)
    data = Path(run.args.data)
    latents_path = data.parent / "latents.json"
    users, sim = None, _simulator_for(data)
    if latents_path.exists() and sim is not None:
        import numpy as np

        lat = load_latents(latents_path)
        users = np.stack([lat[r.session_id] for r in valid])
    else:
        log.warning("no latents.json/simulator.json next to %s: NDCG is not computed", data)
    reports = [evaluate(model, valid, users, sim, dataset=data.stem, name=f"gref-{mode}", seed=run.args.seed,
                        mode=mode, heads=run.args.heads, replays=ev.replays)
               for mode in _modes(run.args)]
    run.write("metrics.csv", reports_to_csv(reports))
    run.write("metrics.json", reports_to_json(reports))


def cmd_bench(run: Run) -> None:
    ev = run.section("eval")
    if run.args.data:
        records = _load_records(run)
    else:
        sim = dataclasses.replace(run.simulator(), num_sessions=ev.bench_sessions)
        records = simulate_sessions(sim).records
    records = records[:ev.bench_sessions]
    model = _load_model(run, records)
    stats = latency_bench(model, records, tuple(_modes(run.args)), run.args.heads, ev.warmup, ev.iters)
    lines = ["mode,mean_latency_us,p50_latency_us,p99_latency_us,forward_passes,samples"]
    for mode in _modes(run.args):
        s = stats[mode]
        lines.append(f"{mode},{s.mean_us:.3f},{s.p50_us:.3f},{s.p99_us:.3f},{s.forward_passes:g},{s.samples}")
    if "ratio" in stats:
        lines.append(f"ratio,{stats['ratio']:.4f}")
    run.write("bench.csv", "\n".join(lines) + "\n")
    reports = [MetricReport("bench", f"gref-{m}", run.args.seed, mean_latency_us=stats[m].mean_us,
                            p99_latency_us=stats[m].p99_us, forward_passes=stats[m].forward_passes)
               for m in _modes(run.args)]
    run.write("metrics.csv", reports_to_csv(reports))
    payload = {m: dataclasses.asdict(stats[m]) for m in _modes(run.args)}
    if "ratio" in stats:
        payload["ratio"] = stats["ratio"]
    run.write("bench.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_ablate(run: Run) -> None:
    ev = run.section("eval")
    corpus = simulate_sessions(run.simulator())
    base_model, base_train = ablation_defaults()
    sim = corpus.config
    base_model = dataclasses.replace(base_model, feature_dim=sim.feature_dim, max_candidates=sim.m,
                                     slate_length=sim.n)
    mc = run.section("model", base_model)
    tc = run.train(base_train)
    mode = "ar" if run.args.mode == "ar" else "omtp"
    table = run_ablation(corpus, ev.seeds, mc, tc, mode=mode, replays=ev.replays,
                         valid_fraction=ev.valid_fraction)
    run.write("ablation.csv", table.to_csv())
    reports = [table.cells[(cell, s)] for cell in ABLATION_CELLS for s in table.seeds]
    run.write("metrics.csv", reports_to_csv(reports))
    run.write("ablation.json", json.dumps(table.summary(), indent=2, sort_keys=True) + "\n")


HANDLERS = {
    "simulate": cmd_simulate, "pretrain": cmd_pretrain, "dpo": cmd_dpo, "decode": cmd_decode,
    "eval": cmd_eval, "bench": cmd_bench, "ablate": cmd_ablate,
}


def _threads() -> int:
    raw = os.environ.get("GREF_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"GREF_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"GREF_THREADS must be a positive integer, got {raw!r}")
    return value


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _require(args, "--out")
        if args.heads is not None and args.heads < 1:
            raise UsageError("--heads must be positive")
        cfg = RunConfig()
        if args.config:
            read_config_file(args.config, cfg)
        for text in args.set:
            apply_override(text, cfg)
        threads = _threads()
        run = Run(args, cfg)
        with threadpool_limits(limits=threads):
            HANDLERS[args.command](run)
        run.finish()
        return 0
    except (UsageError, ConfigError) as exc:
        print(f"gref: error: {exc}", file=sys.stderr)
        return 2
    except (GrefError, ValueError, OSError, RuntimeError) as exc:
        print(f"gref: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

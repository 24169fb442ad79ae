"""Command-line entry point: ``dynlat {predict,sweep,ablate,validate,presets}``.

Settings come from an optional JSON ``--config`` file, overridden by flags.
Exit codes: 0 ok, 1 oracle mismatch, 2 invalid configuration, 3 target
FLOPs ratio not achievable.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from . import latcost
from .errors import DomainError, InvalidShapeError, NotFoundError, ShapeError
from .flops import network_flops, solve_uniform_rate
from .latcost import (CSV_COLUMNS, LatencyBreakdown, breakdowns_from_csv, breakdowns_to_csv,
                      predict_block_latency)
from .model import (HardwareSpec, NetworkSpec, hardware_from_json, hardware_names,
                    network_from_json, network_names, preset_hardware, preset_network)
from .ops import FusionPlan
from .sched import (block_granularities, decide_fusion, default_r_grid, fusion_ablation,
                    select_block, stem_head_latency, sweep_r, sweep_s)
from .simexec import DEFAULT_SEEDS, run_validation

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_UNACHIEVABLE = 0, 1, 2, 3

CONFIG_KEYS = ("hw", "net", "s_net", "rate", "rates", "target", "fusion", "axis", "block",
               "granularity", "grid_step", "out", "format", "seed", "resolution", "no_masker")
DEFAULTS = {"hw": "v100", "net": "resnet101", "format": "json", "fusion": "auto",
            "grid_step": 0.05, "resolution": 224, "no_masker": False}
FUSION_FLAGS = {"masker": "fuse_masker_conv1", "gather": "fuse_gather_conv",
                "scatter": "fuse_scatter_add"}


class ConfigError(Exception):
    """Invalid run configuration (exit code 2)."""


class Unachievable(Exception):
    """The requested FLOPs target cannot be met (exit code 3)."""


def _us(seconds: float) -> str:
    return f"{seconds * 1e6:.3f}"


def _us_value(seconds: float) -> float:
    return round(seconds * 1e6, 3)


# -- configuration -------------------------------------------------------------

def _parse_list(value, cast, what: str) -> list:
    if isinstance(value, (list, tuple)):
        items = list(value)
    else:
        text = str(value).replace("-", ",") if cast is int else str(value)
        items = [v for v in text.split(",") if v.strip()]
    try:
        return [cast(v) for v in items]
    except (TypeError, ValueError):
        raise ConfigError(f"cannot parse {what} {value!r}") from None


def _parse_fusion(value: str) -> FusionPlan | None:
    if value == "auto":
        return None
    if value == "none":
        return FusionPlan()
    if value == "all":
        return FusionPlan.all()
    kw = {}
    for part in value.split(","):
        if part not in FUSION_FLAGS:
            raise ConfigError(f"unknown fusion {part!r}; use auto, none, all or a "
                              f"comma list of {sorted(FUSION_FLAGS)}")
        kw[FUSION_FLAGS[part]] = True
    return FusionPlan(**kw)


@dataclass
class RunConfig:
    hardware: HardwareSpec
    network: NetworkSpec
    rate: float | None = None
    rates: list[float] | None = None
    target: float | None = None
    fusion: FusionPlan | None = None
    maskers: bool = True
    output: str | None = None
    format: str = "json"

    def rate_mode(self) -> str:
        given = [k for k in ("rate", "rates", "target") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ConfigError("exactly one of --rate, --rates, --target is required"
                              + (f" (got {', '.join(given)})" if given else ""))
        return given[0]


def _load_hardware(value: str) -> HardwareSpec:
    if value.endswith(".json") or Path(value).is_file():
        return hardware_from_json(Path(value).read_text())
    return preset_hardware(value)


def _load_network(value: str, resolution: int, s_net) -> NetworkSpec:
    if value.endswith(".json") or Path(value).is_file():
        net = network_from_json(Path(value).read_text())
    else:
        net = preset_network(value, int(resolution))
    if s_net is not None:
        net = net.with_s_net(_parse_list(s_net, int, "--s-net"))
    return net


def merge_settings(args: argparse.Namespace) -> dict:
    """Flags override the config file, which overrides built-in defaults."""
    file_cfg: dict = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = dict(DEFAULTS)
    out.update(file_cfg)
    for key in CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            out[key] = val
    return out


def build_config(settings: dict) -> RunConfig:
    fmt = settings.get("format", "json")
    if fmt not in ("csv", "json"):
        raise ConfigError(f"--format must be csv or json, got {fmt!r}")
    cfg = RunConfig(
        hardware=_load_hardware(str(settings["hw"])),
        network=_load_network(str(settings["net"]), settings.get("resolution", 224),
                              settings.get("s_net")),
        rate=None if settings.get("rate") is None else float(settings["rate"]),
        rates=None if settings.get("rates") is None
        else _parse_list(settings["rates"], float, "--rates"),
        target=None if settings.get("target") is None else float(settings["target"]),
        fusion=_parse_fusion(str(settings.get("fusion", "auto"))),
        maskers=not settings.get("no_masker", False),
        output=settings.get("out"),
        format=fmt,
    )
    return cfg


def _emit(text: str, output: str | None, stdout) -> None:
    if output:
        Path(output).write_text(text)
    else:
        stdout.write(text)


# -- commands ------------------------------------------------------------------

def resolve_rates(cfg: RunConfig) -> list[float]:
    mode = cfg.rate_mode()
    n = cfg.network.num_blocks
    if mode == "rate":
        rates = [cfg.rate] * n
    elif mode == "rates":
        rates = list(cfg.rates)
        if len(rates) == 1:
            rates = rates * n
        if len(rates) != n:
            raise ConfigError(f"--rates has {len(rates)} values for {n} blocks")
    else:
        if not cfg.maskers:
            raise ConfigError("--target needs maskers enabled")
        if not cfg.target > 0:
            raise ConfigError(f"--target must be positive, got {cfg.target}")
        try:
            rates = [solve_uniform_rate(cfg.network, cfg.target, fusions=cfg.fusion)] * n
        except DomainError as exc:
            raise Unachievable(str(exc)) from None
    for r in rates:
        if not 0 <= r <= 1:
            raise ConfigError(f"activation rate {r} outside [0, 1]")
    return rates


def cmd_predict(cfg: RunConfig) -> str:
    rates = resolve_rates(cfg)
    net, hw = cfg.network, cfg.hardware
    per_block = []
    for bid, block, r in zip(net.block_ids(), net.blocks(), rates):
        if not cfg.maskers and r == 1:
            # nothing to skip and nothing deciding: the plain dense block
            plan = FusionPlan()
            res = predict_block_latency(block, r, hw, static=True)
        else:
            plan = cfg.fusion or decide_fusion(block, None, r, hw)
            res = predict_block_latency(block, r, hw, plan, masker=cfg.maskers)
        per_block.append((bid, r, plan, res))
    stem_head = stem_head_latency(net, hw)
    static_total = stem_head + sum(latcost.static_block_latency(b, hw) for b in net.blocks())
    total = stem_head + sum(res.total for *_, res in per_block)
    speedup = 1.0 - total / static_total
    flops = network_flops(net, rates, [p for _, _, p, _ in per_block], cfg.maskers)

    if cfg.format == "csv":
        buf = io.StringIO()
        buf.write("block,r,plan," + ",".join(CSV_COLUMNS) + "\n")
        for bid, r, plan, res in per_block:
            for line in breakdowns_to_csv(res.per_op, unit="us").splitlines()[1:]:
                buf.write(f"{bid},{r!r},{plan.label},{line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([])
        w.writerow(["metric", "value"])
        for key, val in (("stem_head_us", _us(stem_head)), ("total_us", _us(total)),
                         ("static_total_us", _us(static_total)), ("speedup", repr(speedup)),
                         ("flops_ratio", repr(flops.ratio))):
            w.writerow([key, val])
        return buf.getvalue()

    report = {
        "hardware": hw.name,
        "network": net.name,
        "s_net": list(net.s_net),
        "blocks": [{
            "block": bid, "r": r, "plan": {**asdict(plan), "label": plan.label},
            "latency_us": _us_value(res.total),
            "ops": [{"op": b.op, "tile": str(b.chosen_tile) if b.chosen_tile else None,
                     **{t: _us_value(getattr(b, t)) for t in latcost.TERMS},
                     "total": _us_value(b.total)} for b in res.per_op],
        } for bid, r, plan, res in per_block],
        "stem_head_us": _us_value(stem_head),
        "total_us": _us_value(total),
        "static_total_us": _us_value(static_total),
        "speedup": speedup,
        "flops": {"f_dyn": float(flops.f_dyn), "f_stat": float(flops.f_stat),
                  "ratio": flops.ratio},
    }
    return json.dumps(report, indent=2) + "\n"


def _block_and_granularity(cfg: RunConfig, settings: dict):
    if not settings.get("block"):
        raise ConfigError("--block is required (e.g. 1.2)")
    block = select_block(cfg.network, str(settings["block"]))
    if settings.get("granularity") is not None:
        block = block.with_granularity(int(settings["granularity"]))
    return block


def parse_predict_csv(text: str) -> tuple[dict[str, list[LatencyBreakdown]], dict[str, float]]:
    """Read a ``predict --format csv`` report back: per-block op breakdowns and totals."""
    ops_part, _, metric_part = text.partition("\n\n")
    per_block: dict[str, list[LatencyBreakdown]] = {}
    rows = list(csv.DictReader(io.StringIO(ops_part)))
    for row in rows:
        one = ",".join(CSV_COLUMNS) + "\n" + ",".join(row[c] for c in CSV_COLUMNS) + "\n"
        per_block.setdefault(row["block"], []).extend(breakdowns_from_csv(one, unit="us"))
    metrics = {r["metric"]: float(r["value"]) for r in csv.DictReader(io.StringIO(metric_part))}
    return per_block, metrics


def cmd_sweep(cfg: RunConfig, settings: dict) -> str:
    axis = settings.get("axis")
    if axis not in ("r", "S"):
        raise ConfigError("--axis must be r or S")
    block = _block_and_granularity(cfg, settings)
    bid = str(settings["block"])
    if axis == "r":
        for k in ("rate", "rates", "target"):
            if settings.get(k) is not None:
                raise ConfigError(f"--{k} is not used with --axis r")
        step = float(settings.get("grid_step", 0.05))
        if not 0 < step <= 1:
            raise ConfigError("--grid-step must lie in (0, 1]")
        res = sweep_r(block, None, cfg.hardware, default_r_grid(step), block_id=bid)
    else:
        if cfg.rate is None:
            raise ConfigError("--axis S needs a single --rate")
        if not block_granularities(block):
            raise ConfigError(f"block {bid} has no valid granularity")
        res = sweep_s(block, cfg.rate, cfg.hardware, block_id=bid)
    return res.to_csv() if cfg.format == "csv" else res.to_json() + "\n"


def cmd_ablate(cfg: RunConfig, settings: dict) -> str:
    block = _block_and_granularity(cfg, settings)
    if cfg.rate is None:
        raise ConfigError("ablate needs a single --rate")
    if not 0 <= cfg.rate <= 1:
        raise ConfigError(f"activation rate {cfg.rate} outside [0, 1]")
    rows = fusion_ablation(block, None, cfg.rate, cfg.hardware)
    base = rows[0].latency
    th = decide_fusion(block, None, cfg.rate, cfg.hardware).r_th
    if cfg.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["plan", "latency_us", "reduction"])
        for row in rows:
            w.writerow([row.label, _us(row.latency), f"{1 - row.latency / base:.6f}"])
        return buf.getvalue()
    return json.dumps({
        "block": str(settings["block"]), "granularity": block.granularity, "r": cfg.rate,
        "hardware": cfg.hardware.name, "r_th": th,
        "rows": [{"plan": row.label, "latency_us": _us_value(row.latency),
                  "reduction": 1 - row.latency / base} for row in rows],
    }, indent=2) + "\n"


def cmd_validate(cfg: RunConfig, settings: dict, stdout) -> int:
    seeds = DEFAULT_SEEDS if settings.get("seed") is None else (int(settings["seed"]),)
    latcost.clear_caches()
    results = run_validation(cfg.hardware, seeds)
    bad = 0
    lines = []
    for case, rep in results:
        ok = rep.ok and rep.mac_model == rep.mac_trace
        lines.append(f"{'ok' if ok else 'MISMATCH'} {case.label}")
        if not ok:
            bad += 1
            for row in rep.mismatches():
                lines.append(f"  {row.op} {row.term}: model={row.model} trace={row.trace} "
                             f"diff={row.delta:+d}")
            if rep.mac_model != rep.mac_trace:
                lines.append(f"  macs: model={rep.mac_model} trace={rep.mac_trace} "
                             f"diff={rep.mac_model - rep.mac_trace:+d}")
    lines.append(f"{len(results) - bad}/{len(results)} cases match")
    _emit("\n".join(lines) + "\n", cfg.output, stdout)
    return EXIT_MISMATCH if bad else EXIT_OK


def cmd_presets(fmt: str) -> str:
    hws = [preset_hardware(n) for n in hardware_names()]
    nets = [preset_network(n) for n in network_names()]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "name", "detail"])
        for h in hws:
            w.writerow(["hardware", h.name, f"pe={h.num_pe} lanes={h.fp32_lanes_per_pe} "
                        f"freq_mhz={h.frequency / 1e6:g} "
                        f"offchip_gbs={h.offchip_bandwidth / 1e9:g}"])
        for n in nets:
            w.writerow(["network", n.name, f"blocks={n.num_blocks} s_net="
                        + "-".join(map(str, n.s_net))])
        return buf.getvalue()
    return json.dumps({"hardware": [h.to_dict() for h in hws],
                       "networks": [{"name": n.name, "blocks": n.num_blocks,
                                     "s_net": list(n.s_net)} for n in nets]},
                      indent=2) + "\n"


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynlat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, rates=True):
        sp.add_argument("--config", help="JSON file with default settings")
        sp.add_argument("--hw", help=f"hardware preset ({', '.join(hardware_names())}) or JSON file")
        sp.add_argument("--net", help=f"network preset ({', '.join(network_names())}) or JSON file")
        sp.add_argument("--s-net", dest="s_net", help="per-stage granularities, e.g. 8-4-7-1")
        sp.add_argument("--resolution", type=int, help="input resolution (default 224)")
        if rates:
            g = sp.add_argument_group("activation rates (exactly one)")
            g.add_argument("--rate", type=float, help="uniform activation rate")
            g.add_argument("--rates", help="comma-separated per-block rates")
            g.add_argument("--target", type=float, help="target FLOPs ratio; solves a uniform rate")
        sp.add_argument("--out", help="output file (default stdout)")
        sp.add_argument("--format", choices=("csv", "json"))

    sp = sub.add_parser("predict", help="block and network latency report")
    common(sp)
    sp.add_argument("--fusion", help="auto, none, all, or a list of masker,gather,scatter")
    sp.add_argument("--no-masker", dest="no_masker", action="store_true",
                    help="price blocks without the masker")

    sp = sub.add_parser("sweep", help="latency ratio over r or S for one block")
    common(sp)
    sp.add_argument("--axis", choices=("r", "S"))
    sp.add_argument("--block", help="block id <stage>.<block>, 1-based")
    sp.add_argument("-S", "--granularity", type=int, help="override the block's S")
    sp.add_argument("--grid-step", dest="grid_step", type=float, help="r grid step (default 0.05)")

    sp = sub.add_parser("ablate", help="cumulative operator-fusion table for one block")
    common(sp)
    sp.add_argument("--block", help="block id <stage>.<block>, 1-based")
    sp.add_argument("-S", "--granularity", type=int, help="override the block's S")

    sp = sub.add_parser("validate", help="check model byte terms against the executor trace")
    sp.add_argument("--config")
    sp.add_argument("--hw")
    sp.add_argument("--seed", type=int, help="run a single seed instead of the default suite")
    sp.add_argument("--out")

    sp = sub.add_parser("presets", help="list hardware and network presets")
    sp.add_argument("--format", choices=("csv", "json"))
    return p


def main(argv: Sequence[str] | None = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        settings = merge_settings(args)
        if args.command == "presets":
            _emit(cmd_presets(settings.get("format", "json")), None, stdout)
            return EXIT_OK
        cfg = build_config(settings)
        if args.command == "validate":
            return cmd_validate(cfg, settings, stdout)
        if args.command == "predict":
            text = cmd_predict(cfg)
        elif args.command == "sweep":
            text = cmd_sweep(cfg, settings)
        else:
            text = cmd_ablate(cfg, settings)
        _emit(text, cfg.output, stdout)
        return EXIT_OK
    except Unachievable as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_UNACHIEVABLE
    except (ConfigError, NotFoundError, InvalidShapeError, ShapeError, DomainError,
            OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

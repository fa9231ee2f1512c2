"""Command-line entry point: ``d3tom {decode,flops,sweep,bench,trace}``.

Settings come from, lowest priority first: the preset, a ``key = value``
config file (``--config``), then explicit flags. CSV goes to ``--out`` or
stdout. Exit status is 0 on success, 1 on runtime errors and 2 on usage
errors.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

from .costmodel import DEFAULT_RETAIN, METHODS, CostParams, cost_table, retain_to_alpha, sweep_grid
from .diffusion import run_decode
from .errors import D3ToMError, InvalidInput
from .toymodel import ModelConfig, init_weights

PRESETS = {
    "toy": ModelConfig(),
    "lavida-8b": ModelConfig(vocab_size=126464, d_model=4096, d_ff=12288, n_layers=32, n_heads=32,
                             n_visual=1000, n_prompt=64, n_output=64, n_steps=32, merge_layer=3),
}
DECODE_METHODS = {"baseline": "none", "d3tom": "d3tom_constant", "d3tom-t": "d3tom_linear",
                  "d3tom-t-rev": "d3tom_linear_reversed"}
MODEL_KEYS = [f.name for f in fields(ModelConfig)]
OPTION_KEYS = {"method": str, "alpha": float, "alpha_min": float, "alpha_max": float, "repeat": int,
               "warmup": int, "methods": str, "retain": str, "l_star": str}
MAX_DESK_D_MODEL = 1024


class UsageError(D3ToMError):
    pass


def fmt(x) -> str:
    return f"{float(x):.9g}"


def read_config_file(path: Path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key in MODEL_KEYS:
            out[key] = int(value)
        elif key in OPTION_KEYS:
            out[key] = OPTION_KEYS[key](value)
        else:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
    return out


def resolve(args) -> tuple:
    """Merge preset, config file and flags into ``(ModelConfig, options)``."""
    model = asdict(PRESETS[args.preset])
    model["max_positions"] = 0
    opts = {}
    if args.config is not None:
        for key, value in read_config_file(args.config).items():
            (model if key in MODEL_KEYS else opts)[key] = value
    for key in MODEL_KEYS:
        if getattr(args, key, None) is not None:
            model[key] = getattr(args, key)
    for key in OPTION_KEYS:
        if getattr(args, key, None) is not None:
            opts[key] = getattr(args, key)
    try:
        cfg = ModelConfig(**model)
    except InvalidInput as exc:
        raise UsageError(str(exc)) from exc
    return cfg, opts


def cost_params(cfg: ModelConfig) -> CostParams:
    return CostParams(d=cfg.d_model, m=cfg.d_ff, L=cfg.n_layers, T=cfg.n_steps, V=cfg.n_visual,
                      P=cfg.n_prompt, O=cfg.n_output, l_star=cfg.merge_layer)


def split_list(text: str) -> list:
    return [part.strip() for part in text.split(",") if part.strip()]


def open_out(path):
    if path is None:
        return sys.stdout, False
    return open(path, "w", newline="", encoding="utf-8"), True


def write_csv(path, header, rows) -> None:
    fh, close = open_out(path)
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    finally:
        if close:
            fh.close()


def guard_desk_scale(cfg: ModelConfig, force: bool) -> None:
    if cfg.d_model > MAX_DESK_D_MODEL and not force:
        raise UsageError(f"d_model={cfg.d_model} is beyond desk scale; pass --force to run it anyway")


def decode_kwargs(opts: dict, method: str) -> dict:
    if method not in DECODE_METHODS:
        raise UsageError(f"unknown method {method!r}; pick from {', '.join(DECODE_METHODS)}")
    kw = {"merge_strategy": DECODE_METHODS[method], "alpha": opts.get("alpha", 0.0)}
    if "alpha_min" in opts or "alpha_max" in opts:
        if method not in ("d3tom-t", "d3tom-t-rev"):
            raise UsageError("--alpha-min/--alpha-max only apply to d3tom-t and d3tom-t-rev")
        if "alpha_min" not in opts or "alpha_max" not in opts:
            raise UsageError("give both --alpha-min and --alpha-max")
        kw["alpha_min"], kw["alpha_max"] = opts["alpha_min"], opts["alpha_max"]
    return kw


# --- subcommands ---------------------------------------------------------------

def cmd_decode(args) -> int:
    cfg, opts = resolve(args)
    guard_desk_scale(cfg, args.force)
    method = opts.get("method", "baseline")
    tokens, trace = run_decode(cfg, init_weights(cfg), use_cache=args.cache, **decode_kwargs(opts, method))
    print(f"method={method} preset={args.preset} seed={cfg.seed} steps={cfg.n_steps} cache={int(args.cache)}")
    print("step t alpha deciders kept merged rows")
    for rec in trace.steps:
        m = rec.merge
        print(f"{rec.step} {rec.t} {fmt(m.alpha)} {len(rec.deciders)} {m.n_kept} {m.n_merged} {m.rows_after}")
    print("tokens: " + " ".join(str(int(t)) for t in tokens))
    print(f"wall_clock_s={trace.wall_s:.3f}", file=sys.stderr)
    if args.trace_out is not None:
        write_csv(args.trace_out, ["step", "t", "alpha", "deciders", "kept", "merged", "rows_after", "wall_ms"],
                  [[r.step, r.t, fmt(r.merge.alpha), len(r.deciders), r.merge.n_kept, r.merge.n_merged,
                    r.merge.rows_after, fmt(r.wall_s * 1e3)] for r in trace.steps])
    return 0


def cmd_flops(args) -> int:
    cfg, opts = resolve(args)
    methods = split_list(opts.get("methods", ",".join(METHODS)))
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise UsageError(f"unknown method(s) {', '.join(unknown)}; pick from {', '.join(METHODS)}")
    retain = split_list(opts.get("retain", ",".join(DEFAULT_RETAIN)))
    try:
        reports = cost_table(cost_params(cfg), methods, retain)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = [[r.method, r.retain_pct, fmt(r.ratio), "" if r.layer is None else r.layer,
             int(round(r.flops_abs)), fmt(r.flops_rel)] for r in reports]
    write_csv(args.out, ["method", "retain_pct", "alpha_or_R", "l_star_or_K", "flops_mac", "flops_rel"], rows)
    return 0


def _time_decode(cfg, weights, kw) -> float:
    start = time.perf_counter()
    run_decode(cfg, weights, **kw)
    return (time.perf_counter() - start) * 1e3


def _measure(cells, repeat: int, warmup: int) -> list:
    """Median and min wall time per ``(cfg, weights, kwargs)`` cell, repeats interleaved."""
    for _ in range(warmup):
        for cfg, w, kw in cells:
            _time_decode(cfg, w, kw)
    times = [[] for _ in cells]
    for _ in range(repeat):
        for i, (cfg, w, kw) in enumerate(cells):
            times[i].append(_time_decode(cfg, w, kw))
    return [(statistics.median(t), min(t)) for t in times]


def cmd_sweep(args) -> int:
    cfg, opts = resolve(args)
    default_ls = ",".join(str(x) for x in (0, 3, 7, 11, 15) if x < cfg.n_layers)
    l_stars = [int(x) for x in split_list(opts.get("l_star", default_ls))]
    alphas = split_list("0.75,0.9" if args.alpha is None else args.alpha)
    if not l_stars or not alphas:
        raise UsageError("sweep grid is empty")
    p = cost_params(cfg)
    if max(l_stars) >= p.L or min(l_stars) < 0:
        raise UsageError(f"l_star values must lie in [0, {p.L})")
    cells = sweep_grid(p, l_stars, alphas)
    header = ["l_star", "alpha", "flops_mac", "flops_rel", "reduction_pct"]
    rows = [[ls, fmt(a), int(round(f)), fmt(rel), fmt(100 * (1 - rel))] for ls, a, f, rel in cells]
    if args.measure:
        guard_desk_scale(cfg, args.force)
        w = init_weights(cfg)
        runs = [(cfg.with_(merge_layer=ls), w, {"merge_strategy": "d3tom_constant", "alpha": float(a)})
                for ls, a, _, _ in cells]
        timed = _measure(runs, opts.get("repeat", 3), opts.get("warmup", 1))
        header.append("time_ms_median")
        rows = [row + [fmt(med)] for row, (med, _) in zip(rows, timed)]
    write_csv(args.out, header, rows)
    return 0


def cmd_bench(args) -> int:
    cfg, opts = resolve(args)
    guard_desk_scale(cfg, args.force)
    repeat, warmup = opts.get("repeat", 5), opts.get("warmup", 1)
    if repeat < 3:
        raise UsageError("bench needs --repeat >= 3")
    methods = split_list(opts.get("methods", "baseline,d3tom"))
    retain = split_list(opts.get("retain", "10"))
    cells, labels = [], []
    w = init_weights(cfg)
    for method in ["baseline"] + [m for m in methods if m != "baseline"]:
        for r in (["100"] if method == "baseline" else retain):
            alpha = float(retain_to_alpha(r))
            cells.append((cfg, w, decode_kwargs({"alpha": alpha}, method)))
            labels.append((method, r))
    timed = _measure(cells, repeat, warmup)
    base = timed[0][0]
    rows = [[m, r, fmt(med), fmt(mn), fmt(med / base)] for (m, r), (med, mn) in zip(labels, timed)]
    write_csv(args.out, ["method", "retain_pct", "time_ms_median", "time_ms_min", "time_rel"], rows)
    return 0


def cmd_trace(args) -> int:
    cfg, opts = resolve(args)
    guard_desk_scale(cfg, args.force)
    method = opts.get("method", "d3tom")
    if method == "baseline":
        raise UsageError("trace needs a merging method; baseline produces no importance scores")
    _, trace = run_decode(cfg, init_weights(cfg), **decode_kwargs(opts, method))
    rows = []
    for rec in trace.steps:
        m = rec.merge
        if m.scores is None:
            continue
        top = int(m.scores.argmax())
        rows.extend([rec.step, j, fmt(sc), int(k), top] for j, (sc, k) in enumerate(zip(m.scores, m.kept_mask)))
    write_csv(args.out, ["step", "visual_index", "score", "kept_flag", "step_argmax"], rows)
    return 0


# --- parser --------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    p.add_argument("--config", type=Path, help="key = value settings file")
    p.add_argument("--out", "-o", type=Path, help="write CSV here instead of stdout")
    model = p.add_argument_group("model")
    for key in MODEL_KEYS:
        model.add_argument("--" + key.replace("_", "-"), dest=key, type=int, default=None)
    return p


def _merge_opts(p: argparse.ArgumentParser, default_method=None) -> None:
    p.add_argument("--method", choices=sorted(DECODE_METHODS), default=None,
                   help=f"default {default_method}")
    p.add_argument("--alpha", type=float, default=None, help="merge ratio (mean ratio for d3tom-t)")
    p.add_argument("--alpha-min", type=float, default=None)
    p.add_argument("--alpha-max", type=float, default=None)
    p.add_argument("--force", action="store_true", help="allow d_model above desk scale")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d3tom", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    p = sub.add_parser("decode", parents=[common], help="run one decode and print a summary")
    _merge_opts(p, "baseline")
    p.add_argument("--cache", action="store_true", help="decode with the frozen prefix K/V cache")
    p.add_argument("--trace-out", type=Path, help="per-step CSV summary")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("flops", parents=[common], help="cost-model table")
    p.add_argument("--methods", default=None, help=f"comma list from {','.join(METHODS)}")
    p.add_argument("--retain", default=None, help="comma list of retention percentages")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("sweep", parents=[common], help="FLOPs over a merge-layer x ratio grid")
    p.add_argument("--l-star", dest="l_star", default=None, help="comma list of merge layers")
    p.add_argument("--alpha", default=None, help="comma list of merge ratios")
    p.add_argument("--measure", action="store_true", help="also time the toy decoder per cell")
    p.add_argument("--repeat", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", parents=[common], help="wall-clock decode benchmark")
    p.add_argument("--methods", default=None, help="comma list from " + ",".join(DECODE_METHODS))
    p.add_argument("--retain", default=None, help="comma list of retention percentages")
    p.add_argument("--repeat", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("trace", parents=[common], help="per-step visual importance scores")
    _merge_opts(p, "d3tom")
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, InvalidInput) as exc:
        print(f"d3tom {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (D3ToMError, OSError) as exc:
        print(f"d3tom {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``timetracker <subcommand> --config FILE --out DIR``.

Failures exit nonzero and print one JSON line ``{"error": kind, "message": ...}``
on stderr.  Exit codes: 2 bad usage or config, 3 data problems, 4 training
divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .checkpoint import Checkpoint, load_state
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import LagCopy, Sinusoid, SynthSpec, atomic_write_text, load_dataset, split, synth_generate, write_csv
from .graph import similarity_matrix
from .model import build_model, count_parameters, paper_gap_report
from .training import evaluate, extract_pretrain_samples, finetune, predict_horizon, pretrain
from .tensor import no_grad
from .tokenizer import SeriesBatch, normalize

log = logging.getLogger("timetracker")

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_OTHER = 2, 3, 4, 1


class DataError(ValueError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _csv(rows: list[list]) -> str:
    return "\n".join(",".join(_fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in row) for row in rows) + "\n"


def _out(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _config(args, need_data: bool = True) -> ExperimentConfig:
    require = None if need_data else {"model": ("lookback", "patch_len", "d_model", "n_heads", "n_layers")}
    cfg = load_config(args.config, require)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    return cfg


def _load(path: str):
    try:
        return load_dataset(path)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc


def _split(T_len: int, scheme: str, L: int, F: int):
    try:
        return split(T_len, scheme, L, F)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _write_log(args, name: str, history) -> None:
    lines = [json.dumps(rec, sort_keys=True) for rec in history.records()]
    atomic_write_text(_out(args, name), "\n".join(lines) + ("\n" if lines else ""))


def _model_from(args):
    ckpt = Checkpoint.load(args.checkpoint)
    return ckpt, load_state(ckpt)


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> None:
    C, T = args.channels, args.length
    rng = np.random.default_rng(args.seed or 0)
    waves = tuple((Sinusoid(float(rng.uniform(6, 48)), 1.0, float(rng.uniform(0, 2 * np.pi))),) for _ in range(C))
    copies = []
    for item in args.lag_copy or []:
        src, dst, delta, sigma = item.split(":")
        copies.append(LagCopy(int(src), int(dst), int(delta), float(sigma)))
    spec = SynthSpec(
        C=C, T=T, seed=args.seed or 0, sinusoids=waves,
        ar_coef=(args.ar,) * C, noise_std=(args.noise,) * C, lag_copies=tuple(copies),
    )
    write_csv(_out(args, "synth.csv"), synth_generate(spec))


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    m = cfg.model
    L, F = m.lookback, m.patch_len
    train_parts, val_parts = [], []
    for path in cfg.data.files:
        values = _load(path).values
        parts = _split(values.shape[1], cfg.data.split, L, F)
        train_parts.append(values[:, slice(*parts.train)])
        val_parts.append(values[:, slice(*parts.val)])
    windows = extract_pretrain_samples(train_parts, L, F, seed=cfg.train.seed)
    val = extract_pretrain_samples(val_parts, L, F, seed=None)
    model = build_model(m, cfg.train.seed)
    ckpt, history = pretrain(model, windows, cfg.train, val_windows=val)
    ckpt.save(_out(args, "pretrain.ckpt"))
    _write_log(args, "pretrain_log.jsonl", history)
    atomic_write_text(_out(args, "config.ini"), dump_config(cfg))


def cmd_finetune(args) -> None:
    cfg = _config(args)
    ckpt = Checkpoint.load(args.checkpoint)
    ds = _load(cfg.data.files[0])
    L, F = cfg.model.lookback, cfg.model.patch_len
    parts = _split(ds.values.shape[1], cfg.data.split, L, F)
    train = parts.windows(ds.values, "train", L, F)
    val = parts.windows(ds.values, "val", L, F)
    mode = args.mode or cfg.data.finetune_mode
    out, history, _ = finetune(ckpt, train, cfg.model.j_cm, cfg.train, mode=mode, val_windows=val)
    out.save(_out(args, "finetune.ckpt"))
    _write_log(args, "finetune_log.jsonl", history)


def cmd_predict(args) -> None:
    _, model = _model_from(args)
    ds = _load(args.input)
    L = model.cfg.lookback
    if ds.values.shape[1] < L:
        raise DataError(f"{args.input}: need at least L={L} rows, got {ds.values.shape[1]}")
    window = ds.values[None, :, -L:]
    if args.dump_attention:
        for layer in model.layers:
            layer.attn.record_weights = True
    forecast = predict_horizon(model, window, args.mode)[0]  # C x F
    rows = [["channel"] + [f"h{i + 1}" for i in range(forecast.shape[1])]]
    rows += [[name] + list(map(float, row)) for name, row in zip(ds.names, forecast)]
    atomic_write_text(_out(args, "forecast.csv"), _csv(rows))
    if args.dump_attention:
        for i, layer in enumerate(model.layers):
            weights = layer.attn.last_weights[0]  # h x (C*N) x (C*N)
            for k, head in enumerate(weights):
                rows = [[float(v) for v in row] for row in head]
                atomic_write_text(_out(args, f"attention_layer{i}_head{k}.csv"), _csv(rows))


def cmd_eval(args) -> None:
    cfg = _config(args)
    _, model = _model_from(args)
    L, F = model.cfg.lookback, model.cfg.patch_len
    rows = [["dataset", "mode", "MSE", "MAE", "R2"]]
    for path in cfg.data.files:
        ds = _load(path)
        parts = _split(ds.values.shape[1], cfg.data.split, L, F)
        metrics = evaluate(model, parts.windows(ds.values, "test", L, F), args.mode)
        name = os.path.splitext(os.path.basename(path))[0]
        rows.append([name, args.mode, metrics["MSE"], metrics["MAE"], metrics["R2"]])
    atomic_write_text(_out(args, "metrics.csv"), _csv(rows))


def cmd_inspect_graph(args) -> None:
    _, model = _model_from(args)
    ds = _load(args.input)
    L = model.cfg.lookback
    batch = normalize(SeriesBatch(values=ds.values[None, :, -L:]))
    graph = model.learn_graph(batch.values[0], train=False)
    z = similarity_matrix(batch.values[0], model.graph).data
    header = [""] + ds.names
    for name, mat in (("graph_Z.csv", z), ("graph_G.csv", graph.hard)):
        rows = [header] + [[n] + [float(v) for v in row] for n, row in zip(ds.names, mat)]
        atomic_write_text(_out(args, name), _csv(rows))


def cmd_inspect_experts(args) -> None:
    cfg = _config(args)
    _, model = _model_from(args)
    blocks = dict(model.moe_blocks())
    if not blocks:
        raise ConfigError("model has no MoE layers")
    layer = args.layer if args.layer is not None else max(blocks)
    if layer not in blocks:
        raise ConfigError(f"layer {layer} has no MoE block; MoE layers: {sorted(blocks)}")
    L, F = model.cfg.lookback, model.cfg.patch_len
    model.reset_router_counts()
    batches = 0
    for path in cfg.data.files:
        ds = _load(path)
        parts = _split(ds.values.shape[1], cfg.data.split, L, F)
        windows = parts.windows(ds.values, "test", L, F)
        for s in range(0, len(windows), cfg.train.batch_size):
            batch = normalize(SeriesBatch(values=windows[s:s + cfg.train.batch_size, :, :L]))
            with no_grad():
                model.forward(batch.values, mode="ci", record=True)
            batches += 1
    counts = blocks[layer].router.counts
    rows = [["expert_id", "count"]] + [[i, int(c)] for i, c in enumerate(counts)]
    atomic_write_text(_out(args, "experts.csv"), _csv(rows))
    log.info("layer %d: %d batches, %d assignments", layer, batches, int(counts.sum()))


def cmd_param_count(args) -> None:
    cfg = _config(args, need_data=False)
    count = count_parameters(cfg.model, args.mode)
    text = count.report()
    if args.paper:
        text += "\n\n" + paper_gap_report()
    print(text)
    if args.out:
        atomic_write_text(_out(args, "param_count.txt"), text + "\n")


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="timetracker", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, config=True, out_required=True):
        p = sub.add_parser(name)
        if config:
            p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=out_required, default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    add("pretrain", cmd_pretrain)

    p = add("finetune", cmd_finetune)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("ci", "cm"), default=None)

    p = add("predict", cmd_predict, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--mode", choices=("ci", "cm"), default="ci")
    p.add_argument("--dump-attention", action="store_true", help="write per-layer, per-head attention weights as CSV")

    p = add("eval", cmd_eval)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("ci", "cm"), default="ci")

    p = add("inspect-graph", cmd_inspect_graph, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)

    p = add("inspect-experts", cmd_inspect_experts)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, default=None, help="0-based layer index (default: last MoE layer)")

    p = add("param-count", cmd_param_count, out_required=False)
    p.add_argument("--mode", choices=("pretrain", "finetune"), default="pretrain")
    p.add_argument("--paper", action="store_true", help="append the paper-total gap report")

    p = add("synth", cmd_synth, config=False)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--length", type=int, default=1000)
    p.add_argument("--ar", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--lag-copy", action="append", metavar="SRC:DST:DELTA:SIGMA")
    return parser


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_USAGE)
    except DataError as exc:
        return _fail("data", exc, EXIT_DATA)
    except FileNotFoundError as exc:
        return _fail("missing-file", exc, EXIT_DATA)
    except RuntimeError as exc:
        return _fail("diverged" if "diverged" in str(exc) else "runtime", exc, EXIT_DIVERGED)
    except (ValueError, KeyError) as exc:
        return _fail("invalid", exc, EXIT_OTHER)
    return 0


if __name__ == "__main__":
    sys.exit(main())

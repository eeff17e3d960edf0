"""``fine3d`` command line: gen-data, train, eval, attn, flops.

Exit codes: 0 success, 1 usage or config error, 2 data or format error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import attnmap, complexity
from .checkpoint import Checkpoint, config_digest
from .config import ConfigError, RunConfig, load
from .data import GenerationError, generate, read_fvol, write_fvol
from .geometry import ConfigurationError, build_grid, pad_to_multiple
from .memory import FormatError
from .metrics import evaluate
from .model import SegModel
from .tensor import ContractError, DimensionError
from .training import NumericError, sliding_infer, train

log = logging.getLogger("fine3d")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ABLATE = {"none": "none", "no-volume-tokens": "no-volume-tokens", "no-memory": "no-memory"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable, wins over the file)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")


def _resolve(args, extra: list[str] | None = None) -> RunConfig:
    overrides = list(extra or []) + list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load(args.config, overrides)


def _echo(cfg: RunConfig, out_dir: Path | None) -> None:
    text = cfg.render()
    for line in text.splitlines():
        log.info("config %s", line)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved_config.txt").write_text(text)


_PAIR = re.compile(r"vol_(\d{4,})\.fvol$")


def load_dataset(data_dir) -> list[tuple[int, np.ndarray, np.ndarray, tuple]]:
    """``[(volume id, volume, labels, original dims)]`` sorted by id."""
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"data directory {d} does not exist")
    out = []
    for path in sorted(d.iterdir()):
        m = _PAIR.match(path.name)
        if not m:
            continue
        vid = int(m.group(1))
        lab_path = d / f"lab_{m.group(1)}.fvol"
        if not lab_path.exists():
            raise DataError(f"{path.name} has no matching {lab_path.name}")
        vol, orig = read_fvol(path)
        lab, lorig = read_fvol(lab_path)
        if vol.dtype != np.float32 or lab.dtype != np.uint8:
            raise DataError(f"volume {vid}: expected f32 volume and u8 labels")
        if vol.shape != lab.shape or orig != lorig:
            raise DataError(f"volume {vid}: volume and label extents differ")
        out.append((vid, vol, lab, orig))
    if not out:
        raise DataError(f"no vol_NNNN.fvol files in {d}")
    return out


def _check_dims(cfg: RunConfig, dataset) -> None:
    for vid, vol, _, _ in dataset:
        if vol.shape != cfg.model.volume_dims:
            raise DataError(f"volume {vid} has extent {vol.shape}, model expects {cfg.model.volume_dims}")


# commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out_dir)
    _echo(cfg, out)
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    window = cfg.model.window_size
    for i in range(args.count):
        vol, lab, _ = generate(cfg.data, cfg.volume_seed(i))
        orig = vol.shape
        vol, lab = pad_to_multiple(vol, window), pad_to_multiple(lab, window)
        padded = vol.shape != orig
        write_fvol(out / f"vol_{i:04d}.fvol", vol, orig if padded else None)
        write_fvol(out / f"lab_{i:04d}.fvol", lab, orig if padded else None)
    print(f"wrote {args.count} volume/label pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    extra = [f"model.ablation={ABLATE[args.ablate]}"] if args.ablate else []
    cfg = _resolve(args, extra)
    out = Path(args.out)
    _echo(cfg, out.parent)
    dataset = load_dataset(args.data_dir)
    _check_dims(cfg, dataset)
    model = SegModel(cfg.model)
    opt = state = None
    if args.resume:
        ckpt = Checkpoint.load(args.resume)
        if ckpt.digest != config_digest(cfg.model.as_dict()):
            raise DataError(f"checkpoint {args.resume} was written for a different model config")
        opt, state = ckpt.restore(model)
        print(f"resumed at iteration {state.iteration}")
    stop = None if args.stop_after_epochs is None else args.stop_after_epochs * cfg.train.iters_per_epoch

    def report(epoch, loss, lr):
        print(f"epoch {epoch} mean_loss {loss:.6f} lr {lr:.6g}", flush=True)

    volumes = [(v, l) for _, v, l, _ in dataset]
    opt, state = train(model, volumes, cfg.train, opt, state, on_epoch=report, stop_at=stop)
    Checkpoint.capture(model, cfg.as_dict(), opt, state).save(out)
    print(f"checkpoint written to {out} at iteration {state.iteration}")
    return EXIT_OK


def _model_from_checkpoint(path, args=None) -> tuple[SegModel, RunConfig, Checkpoint]:
    ckpt = Checkpoint.load(path)
    cfg = RunConfig.from_dict(ckpt.run_config)
    if args is not None and (args.config or args.set):
        other = _resolve(args)
        if config_digest(other.model.as_dict()) != ckpt.digest:
            raise DataError(f"checkpoint {path} does not match the given model config (digest mismatch)")
    model = SegModel(cfg.model)
    ckpt.restore(model)
    return model, cfg, ckpt


def format_report(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["volume_id", "class", "dice", "hd95"])
    for vid, k, d, h in rows:
        w.writerow([vid, k, f"{d:.6f}", "undefined" if not np.isfinite(h) else f"{h:.6f}"])
    return buf.getvalue()


def cmd_eval(args) -> int:
    model, cfg, _ = _model_from_checkpoint(args.checkpoint, args)
    dataset = load_dataset(args.data_dir)
    _check_dims(cfg, dataset)
    rows, per_class = [], {}
    for vid, vol, lab, orig in dataset:
        pred = sliding_infer(model, vol.astype(np.float64))
        keep = tuple(slice(0, o) for o in orig)
        rep = evaluate(pred[keep], lab[keep], cfg.model.classes)
        for k in sorted(rep.dice):
            rows.append((vid, k, rep.dice[k], rep.hd95[k]))
            per_class.setdefault(k, []).append((rep.dice[k], rep.hd95[k]))
    for k in sorted(per_class):
        ds = [d for d, _ in per_class[k]]
        hs = [h for _, h in per_class[k] if np.isfinite(h)]
        rows.append(("mean", k, float(np.mean(ds)), float(np.mean(hs)) if hs else float("inf")))
    text = format_report(rows)
    Path(args.report).write_text(text)
    all_d = [d for v in per_class.values() for d, _ in v]
    print(f"evaluated {len(dataset)} volumes; mean dice {np.mean(all_d) if all_d else float('nan'):.6f}")
    return EXIT_OK


def _parse_query(text: str) -> tuple[int, int, int]:
    try:
        q = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise UsageError(f"--query must be x,y,z integers, got {text!r}") from None
    if len(q) != 3:
        raise UsageError(f"--query must have three coordinates, got {text!r}")
    return q


def cmd_attn(args) -> int:
    model, cfg, _ = _model_from_checkpoint(args.checkpoint)
    vol, _ = read_fvol(args.volume)
    if vol.shape != cfg.model.volume_dims:
        raise DataError(f"volume extent {vol.shape} does not match model {cfg.model.volume_dims}")
    query = _parse_query(args.query)
    try:
        rows = attnmap.attention_chain(model, vol.astype(np.float64), query, args.level, warm=not args.cold)
    except attnmap.BoundsError as exc:
        raise UsageError(str(exc)) from None
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    for path in attnmap.export(rows, args.out, args.zoom):
        print(path)
    return EXIT_OK


_COST_KEYS = ("N", "N_u", "N_v", "N_w", "N_wcap", "M", "c")


def _cost_params(cfg: RunConfig, text: str | None) -> complexity.CostParams:
    if text:
        vals = {}
        for item in text.split(","):
            if "=" not in item:
                raise UsageError(f"--params entries must be key=value, got {item!r}")
            k, v = (s.strip() for s in item.split("=", 1))
            if k not in _COST_KEYS:
                raise UsageError(f"unknown cost parameter {k!r}; expected one of {_COST_KEYS}")
            vals[k] = int(v)
        return complexity.CostParams(**vals)
    m = cfg.model
    levels = [i for i in range(len(m.stages)) if m.is_fine(i) and m.stages[i].blocks] or [0]
    lvl = levels[0]
    ws = m.stage_window(lvl)
    n_u = int(np.prod(ws))
    n = int(np.prod(m.stage_dims()[lvl])) // n_u
    grid = build_grid(m.volume_dims, m.grid_cells, m.crop_size)
    return complexity.CostParams(n, n_u, m.N_v, m.N_w, complexity.max_intersections(grid, m.crop_size),
                                 grid.M, m.stages[lvl].dim)


def cmd_flops(args) -> int:
    cfg = _resolve(args)
    p = _cost_params(cfg, args.params)
    try:
        report = complexity.measured_cost(p, heads=args.heads, max_intersections=args.max_intersections)
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    sys.stdout.write(report.to_text())
    sys.stdout.write("\n" + report.to_csv())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="fine3d", description="memory-token window attention for 3-D segmentation")
    ap.add_argument("-v", "--verbose", action="store_true", help="log the resolved config and progress")
    sub = ap.add_subparsers(dest="cmd", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic volume/label pairs")
    _add_config_args(g)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--count", type=int, required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train and write a checkpoint")
    _add_config_args(t)
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--ablate", choices=sorted(ABLATE), help="token ablation")
    t.add_argument("--stop-after-epochs", type=int, help="stop early (checkpoint can be resumed)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="sliding-window inference and metrics CSV")
    _add_config_args(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-dir", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("attn", help="export attention rows for a query voxel")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--volume", required=True)
    a.add_argument("--query", required=True, help="x,y,z")
    a.add_argument("--out", required=True, help="output prefix")
    a.add_argument("--level", type=int, help="encoder level (default: first FINE level)")
    a.add_argument("--cold", action="store_true", help="skip the bank warm-up pass")
    a.add_argument("--zoom", type=int, default=8, help="PGM pixel replication")
    a.set_defaults(fn=cmd_attn)

    f = sub.add_parser("flops", help="closed-form vs measured attention MACs")
    _add_config_args(f)
    f.add_argument("--params", help="explicit N=..,N_u=..,N_v=..,N_w=..,N_wcap=..,M=..,c=..")
    f.add_argument("--heads", type=int, default=1)
    f.add_argument("--max-intersections", type=int, default=8)
    f.add_argument("--csv", help="also write the CSV report here")
    f.set_defaults(fn=cmd_flops)
    return ap


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if not getattr(args, "fn", None):
        print("error: a subcommand is required (gen-data, train, eval, attn, flops)", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except (UsageError, ConfigError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, GenerationError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

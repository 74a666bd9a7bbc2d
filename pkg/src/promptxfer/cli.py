"""Command-line entry point: ``promptxfer <subcommand> ...``.

Failures print a single ``error: <kind>: <message>`` line on stderr and exit
with status 1.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

from . import ablation, persistence as io_
from .evaluation import centroid_separability, feature_drift, transfer_matrix
from .imaging import generate_dataset
from .reference import Suite, build_zoo, prompt_data
from .tasks import get_task
from .trainer import grid_search, train_prompt

log = logging.getLogger("promptxfer")


def _config(path) -> io_.RunConfig:
    return io_.parse_config(path) if path else io_.RunConfig()


def _suite(cfg: io_.RunConfig, zoo_dir) -> Suite:
    models, dual = io_.load_zoo(zoo_dir)
    have = [m.model_id for m in models]
    if cfg.model_ids != have:
        # the zoo on disk defines the models; keep the config's other settings
        cfg = replace(cfg, zoo=",".join(f"{m.arch.variant}:{m.seed}" for m in models))
    if dual is None:
        raise io_.ResolutionError(f"zoo {zoo_dir} has no dual encoder")
    return Suite(cfg, models, dual)


def _zoo_dir(cfg: io_.RunConfig, given) -> Path:
    return Path(given) if given else Path(cfg.out_dir) / "zoo"


def cmd_gen_data(a) -> None:
    task = get_task(a.task)
    samples = generate_dataset(task, a.n, a.seed, a.split)
    stamp = io_.digest(f"gen-data {a.task} {a.n} {a.seed} {a.split}".encode())
    io_.save_dataset(samples, a.out, stamp)
    print(f"wrote {len(samples)} samples to {a.out}")


def cmd_pretrain(a) -> None:
    cfg = _config(a.zoo)
    models, dual = build_zoo(cfg)
    io_.save_zoo(models, dual, a.out, cfg.hash())
    for m in models:
        print(f"{m.model_id} {m.checksum()}")
    print(f"dual {dual.checksum()}")


def cmd_train_prompt(a) -> None:
    cfg = _config(a.config)
    cfg = replace(cfg, method=a.method, source=a.source or cfg.source)
    s = _suite(cfg, _zoo_dir(cfg, a.zoo))
    tcfg = cfg.train_config()
    pr, hist = train_prompt(s.sources, s.dual, s.data(cfg.task, "train"), tcfg, s.cache)
    io_.save_prompt(pr, a.out, cfg.hash())
    if a.history:
        _write_history(hist, a.history)
    status = f" stopped: {hist.error}" if hist.error else ""
    print(f"wrote {a.out} steps={len(hist.records)} checksum={hist.final_checksum}{status}")


def _write_history(hist, path) -> None:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["step", "lr", "total", "llm", "fca", "tse", "grad_norm", "skipped"])
    for r in hist.records:
        w.writerow([r.step, repr(r.lr), repr(r.total), repr(r.llm), repr(r.fca), repr(r.tse),
                    repr(r.grad_norm), int(r.skipped)])
    Path(path).write_text(out.getvalue())


def cmd_grid_search(a) -> None:
    cfg = _config(a.config)
    s = _suite(cfg, _zoo_dir(cfg, a.zoo))
    g1 = [float(v) for v in a.lambda1.split(",")] if a.lambda1 else None
    g2 = [float(v) for v in a.lambda2.split(",")] if a.lambda2 else None
    kw = {k: v for k, v in (("grid1", g1), ("grid2", g2)) if v is not None}
    res = grid_search(s.sources, s.dual, s.data(cfg.task, "train"), s.data(cfg.task, "val"),
                      s.task(), cfg.train_config("tvp"), cache=s.cache, **kw)
    print("lambda1,lambda2,val_metric")
    for (l1, l2), v in sorted(res.table.items()):
        print(f"{l1!r},{l2!r},{v!r}")
    print(f"best lambda1={res.best.lambda1!r} lambda2={res.best.lambda2!r}")


def _resolve_source(prompt, models) -> str:
    want = prompt.metadata.get("source_hash")
    ids = [m.model_id for m in models]
    for n in range(1, len(ids) + 1):
        for i in range(len(ids) - n + 1):
            cand = ids[i:i + n]
            if io_.source_hash(cand).hex() == want:
                return ",".join(cand)
    return "unknown"


def cmd_eval(a) -> None:
    cfg = _config(a.config)
    task = get_task(a.task)
    models, _ = io_.load_zoo(a.zoo)
    samples = prompt_data(cfg, task.name, a.split)
    prompts = {}
    if a.prompt:
        pr = io_.load_prompt(a.prompt)
        if (pr.canvas_h, pr.canvas_w, pr.width_p) != (cfg.canvas, cfg.canvas, cfg.width) and not a.force:
            raise io_.PromptFormatError(
                f"prompt geometry {pr.canvas_h}x{pr.canvas_w} p={pr.width_p} differs from the configured "
                f"{cfg.canvas}x{cfg.canvas} p={cfg.width}; pass --force to evaluate anyway")
        prompts[(pr.metadata["method"] or "prompt", _resolve_source(pr, models))] = pr
    rep = transfer_matrix(prompts, models, samples, task)
    rep.metadata = {"config_hash": cfg.hash().hex(), "seed": cfg.seed, "split": a.split,
                    "prompt": str(a.prompt) if a.prompt else None,
                    "prompt_config_hash": next(iter(prompts.values())).metadata["config_hash"] if prompts else None}
    io_.write_report(rep, a.report)
    print(f"wrote {a.report}")
    for r in rep.rows:
        print(f"{r.method} source={r.source} avg_delta={r.avg_delta:.2f}")


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9.+-]+", "_", label)


def cmd_ablate(a) -> None:
    cfg = _config(a.config)
    s = _suite(cfg, _zoo_dir(cfg, a.zoo))
    res = ablation.run_ablation_suite(a.suite, s)
    out = Path(a.out) if a.out else Path(cfg.out_dir) / "ablate" / a.suite
    out.mkdir(parents=True, exist_ok=True)
    lines = ["arm,method,avg_delta"]
    for arm in res.arms:
        io_.write_report(arm.report, out / f"{_slug(arm.label)}.csv")
        for r in arm.report.rows:
            lines.append(f"{arm.label},{r.method},{r.avg_delta:.2f}")
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if a.suite == "width":
        ok = ablation.interior_maximum(res.avg_deltas())
        print(f"interior maximum: {'yes' if ok else 'no'}")


def cmd_diagnose(a) -> None:
    cfg = _config(a.config)
    task = get_task(a.task or cfg.task)
    models, _ = io_.load_zoo(a.zoo)
    pr = io_.load_prompt(a.prompt)
    samples = prompt_data(cfg, task.name, "test")
    print("model,drift_mean,drift_std,separability_clean,separability_prompted")
    for m in models:
        mu, sd = feature_drift(m, samples, pr)
        if task.eval_mode == "ranked":
            sc, sp = centroid_separability(m, samples, None), centroid_separability(m, samples, pr)
            print(f"{m.model_id},{mu:.4f},{sd:.4f},{sc:.4f},{sp:.4f}")
        else:
            print(f"{m.model_id},{mu:.4f},{sd:.4f},,")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="promptxfer", description="Transferable border visual prompts on surrogate models.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset split")
    p.add_argument("--task", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain the surrogate zoo and the dual encoder")
    p.add_argument("--zoo", required=True, help="run config describing the zoo")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train-prompt", help="optimise a prompt on one or more source models")
    p.add_argument("--config", required=True)
    p.add_argument("--method", required=True, type=str.lower, choices=("vp", "evp", "tvp"))
    p.add_argument("--source", help="model id(s), comma separated")
    p.add_argument("--out", required=True)
    p.add_argument("--zoo", help="zoo directory (default <out_dir>/zoo)")
    p.add_argument("--history", help="write per-step history CSV here")
    p.set_defaults(fn=cmd_train_prompt)

    p = sub.add_parser("grid-search", help="select lambda1/lambda2 on validation data")
    p.add_argument("--config", required=True)
    p.add_argument("--zoo")
    p.add_argument("--lambda1", help="comma-separated grid")
    p.add_argument("--lambda2", help="comma-separated grid")
    p.set_defaults(fn=cmd_grid_search)

    p = sub.add_parser("eval", help="zero-shot and prompted metrics across a zoo")
    p.add_argument("--prompt")
    p.add_argument("--zoo", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--report", required=True)
    p.add_argument("--config")
    p.add_argument("--force", action="store_true", help="accept prompts with a different geometry")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", required=True, choices=ablation.SUITES)
    p.add_argument("--config", required=True)
    p.add_argument("--zoo")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("diagnose", help="feature drift and class separability per model")
    p.add_argument("--prompt", required=True)
    p.add_argument("--zoo", required=True)
    p.add_argument("--task")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_diagnose)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (io_.PersistenceError, ValueError, KeyError, OSError, RuntimeError) as e:
        msg = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

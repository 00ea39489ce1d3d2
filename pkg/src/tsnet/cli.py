"""``tsnet`` command line: gen, train, eval, decode, adapt, analyze."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import adaptation, analysis
from .data import (Alphabet, DatasetConfig, RenderParams, Sample, build_dataset, load_lines, read_dataset,
                   read_pgm, write_dataset)
from .network import NetworkConfig
from .training import Checkpoint, TrainConfig, decode_batches, evaluate, train, write_metric_log

log = logging.getLogger("tsnet")

SECTIONS = {"dataset": DatasetConfig, "network": NetworkConfig, "train": TrainConfig}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration


def _strict(section: str, cls, values: dict) -> dict:
    if not isinstance(values, dict):
        raise UsageError(f"config section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise UsageError(f"unknown keys in {section!r}: {', '.join(unknown)}")
    if section == "dataset" and isinstance(values.get("render"), dict):
        _strict("dataset.render", RenderParams, values["render"])
    return dict(values)


def parse_run_config(doc: dict) -> dict:
    """Validate a RunConfig document; unknown keys anywhere are rejected."""
    if not isinstance(doc, dict):
        raise UsageError("run config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise UsageError(f"unknown top-level config keys: {', '.join(unknown)}")
    out = {"seed": doc.get("seed")}
    for name, cls in SECTIONS.items():
        out[name] = _strict(name, cls, doc.get(name, {}))
    if out["seed"] is not None and not isinstance(out["seed"], int):
        raise UsageError("seed must be an integer")
    return out


def load_run_config(path: str | None) -> dict:
    if path is None:
        return parse_run_config({})
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(doc)


def _seed(args, cfg: dict, section: dict | None = None) -> int:
    """Flag beats the root ``seed`` which beats a section's own seed."""
    if args.seed is not None:
        return args.seed
    if cfg["seed"] is not None:
        return cfg["seed"]
    return int((section or {}).get("seed", 0))


def _write_run_manifest(run_dir: Path, name: str, command: str, resolved: dict, files: list[Path]) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / name
    doc = {"command": command, "resolved_config": resolved,
           "files": sorted(os.path.relpath(f, run_dir) for f in files)}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _log_resolved(command: str, resolved: dict) -> None:
    log.info("%s resolved config: %s", command, json.dumps(resolved, sort_keys=True, default=str))


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    cfg = load_run_config(args.config)
    ds_cfg = dict(cfg["dataset"])
    for key, flag in (("n_styles", args.styles), ("tsi_per_style", args.tsi_per_style),
                      ("lines_per_tsi", args.lines_per_tsi), ("alphabet", args.alphabet)):
        if flag is not None:
            ds_cfg[key] = flag
    ds_cfg["seed"] = _seed(args, cfg, ds_cfg)
    config = DatasetConfig(**ds_cfg)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} exists and is not empty (use --force to replace it)")
        if not ((out / "meta.json").exists() or (out / "manifest.tsv").exists()):
            raise UsageError(f"{out} does not look like a tsnet dataset; refusing to delete it")
        shutil.rmtree(out)
    resolved = {"dataset": config.to_dict()}
    _log_resolved("gen", resolved)
    dataset = build_dataset(config, threads=args.threads)
    write_dataset(dataset, out, config)
    files = sorted(p for p in out.rglob("*") if p.is_file())
    _write_run_manifest(out, "run.json", "gen", resolved, files)
    _emit({"lines": len(dataset.samples), "train": len(dataset.train), "test": len(dataset.test),
           "out": str(out)})
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    dataset = read_dataset(args.data)
    net_doc = dict(cfg["network"])
    if args.baseline:
        net_doc["head_mode"] = "frn_baseline"
    if "num_classes" in net_doc and net_doc["num_classes"] != dataset.alphabet.num_classes:
        raise UsageError(f"config num_classes {net_doc['num_classes']} != dataset alphabet "
                         f"{dataset.alphabet.chars!r} ({dataset.alphabet.num_classes} classes)")
    net_doc["num_classes"] = dataset.alphabet.num_classes
    train_doc = dict(cfg["train"])
    train_doc["seed"] = _seed(args, cfg, train_doc)
    if args.iterations is not None:
        train_doc["iterations"] = args.iterations
    net_config = NetworkConfig.from_dict(net_doc)
    train_config = TrainConfig(**train_doc)
    resume = None
    if args.resume:
        resume = Checkpoint.load(args.resume)
        if resume.alphabet != dataset.alphabet.chars:
            missing = sorted(set(dataset.alphabet.chars) - set(resume.alphabet))
            extra = sorted(set(resume.alphabet) - set(dataset.alphabet.chars))
            raise UsageError(f"alphabet mismatch: checkpoint {resume.alphabet!r} vs dataset "
                             f"{dataset.alphabet.chars!r} (dataset-only {missing}, checkpoint-only {extra})")
        net_config = resume.config
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics = out.with_suffix(".metrics.csv")
    resolved = {"network": net_config.to_dict(), "train": train_config.to_dict(),
                "data": str(args.data), "resume": args.resume, "stop_at": args.stop_at}
    _log_resolved("train", resolved)
    result = train(dataset, net_config, train_config, resume=resume, stop_at=args.stop_at)
    rows = result.log
    write_metric_log(metrics, rows)
    result.checkpoint.save(out)
    _write_run_manifest(out.parent, out.stem + ".run.json", "train", resolved, [out, metrics])
    last = next((r for r in reversed(rows) if r[2] is not None), None)
    _emit({"checkpoint": str(out), "metrics": str(metrics), "iterations": len(rows),
           "skipped_samples": result.skipped_samples, "skipped_steps": result.skipped_steps,
           "train_cer": None if last is None else last[2], "test_cer": None if last is None else last[3]})
    return 0


def _split(dataset, name: str) -> list[Sample]:
    if name == "train":
        return dataset.subset(dataset.train)
    if name == "test":
        return dataset.subset(dataset.test)
    if name == "all":
        return list(dataset.samples)
    raise UsageError(f"unknown split {name!r}")


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    dataset = read_dataset(args.data)
    if ckpt.alphabet != dataset.alphabet.chars:
        raise UsageError(f"alphabet mismatch: checkpoint {ckpt.alphabet!r} vs dataset {dataset.alphabet.chars!r}")
    model = ckpt.to_model()
    samples = _split(dataset, args.split)
    seed = args.seed if args.seed is not None else 0
    if args.embedding:
        mode, emb = "fixed", adaptation.load_embedding(args.embedding)
    else:
        mode, emb = ("shuffled" if args.shuffle_tsi else "given"), None
    resolved = {"checkpoint": args.checkpoint, "data": args.data, "split": args.split,
                "mode": mode, "seed": seed}
    _log_resolved("eval", resolved)
    result = evaluate(model, samples, dataset.alphabet, mode, seed=seed, embedding=emb)
    files = []
    if args.out:
        result.write_csv(args.out)
        files.append(Path(args.out))
        _write_run_manifest(Path(args.out).parent, Path(args.out).stem + ".run.json", "eval", resolved, files)
    _emit({"cer": result.cer, "lines": len(samples), "mode": mode})
    return 0


def cmd_decode(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.to_model()
    alphabet = Alphabet(ckpt.alphabet)
    image = read_pgm(args.image)
    sample = Sample(image, [], [], -1)
    if args.embedding:
        hyp = decode_batches(model, [sample], embedding=adaptation.load_embedding(args.embedding))[0]
    else:
        if args.tsi is None and model.table is not None:
            raise UsageError("decode needs --tsi or --embedding for a TSB checkpoint")
        hyp = decode_batches(model, [sample], [0 if args.tsi is None else args.tsi])[0]
    print(alphabet.decode(hyp))
    return 0


def cmd_adapt(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    alphabet = Alphabet(ckpt.alphabet)
    seed = args.seed if args.seed is not None else 0
    pool = load_lines(args.lines, alphabet)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.sweep:
        if not args.held_out:
            raise UsageError("--sweep needs --held-out")
        held = load_lines(args.held_out, alphabet)
        counts = [int(c) for c in args.counts.split(",")]
        resolved = {"checkpoint": args.checkpoint, "pool": args.lines, "held_out": args.held_out,
                    "counts": counts, "repeats": args.repeats, "seed": seed, "iterations": args.iterations}
        _log_resolved("adapt", resolved)
        result = adaptation.adaptation_sweep(ckpt, pool, held, alphabet, counts, args.repeats, seed,
                                             max_iter=args.iterations, char_width=args.char_width,
                                             threads=args.threads)
        result.write_csv(out)
        _write_run_manifest(out.parent, out.stem + ".run.json", "adapt", resolved, [out])
        _emit({"summary": [dict(zip(("count", "mean", "std", "min"), row)) for row in result.summary()],
               "csv": str(out)})
        return 0
    resolved = {"checkpoint": args.checkpoint, "lines": args.lines, "seed": seed,
                "iterations": args.iterations, "augment": not args.no_augment}
    _log_resolved("adapt", resolved)
    res = adaptation.adapt_embedding(ckpt, [(s.image, s.transcription) for s in pool], seed,
                                     max_iter=args.iterations, augment=not args.no_augment,
                                     char_width=args.char_width)
    adaptation.save_embedding(out, res.embedding)
    trace = out.with_suffix(".trace.csv")
    with open(trace, "w", encoding="utf-8") as fh:
        fh.write("iteration,loss\n")
        fh.write(f"0,{res.initial_loss!r}\n")
        for k, v in enumerate(res.trace, 1):
            fh.write(f"{k},{v!r}\n")
    _write_run_manifest(out.parent, out.stem + ".run.json", "adapt", resolved, [out, trace])
    _emit({"embedding": str(out), "iterations": res.iterations, "initial_loss": res.initial_loss,
           "final_loss": res.trace[-1] if res.trace else res.initial_loss, "message": res.message,
           "rejected": res.rejected})
    return 0


def cmd_analyze(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.to_model()
    if model.table is None:
        raise UsageError("analysis needs a TSB checkpoint")
    dataset = read_dataset(args.data)
    samples = _split(dataset, args.split)[: args.limit] if args.limit else _split(dataset, args.split)
    tsis = [int(t) for t in args.tsi.split(",")] if args.tsi else sorted(model.table.tsi_rows)
    groups = {t: dataset.tsi_to_style.get(t, 0) for t in tsis}
    wanted = {k for k in ("pca", "substitutions", "correlation", "mds") if getattr(args, k)}
    wanted = wanted or {"pca", "substitutions", "correlation", "mds"}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"checkpoint": args.checkpoint, "data": args.data, "split": args.split, "limit": args.limit,
                "tsi": tsis, "analyses": sorted(wanted)}
    _log_resolved("analyze", resolved)
    files: list[Path] = []
    summary: dict = {}
    outputs = None
    if wanted & {"substitutions", "correlation", "mds"}:
        outputs = analysis.decode_under_tsis(model, samples, tsis)
    if "pca" in wanted:
        proj = analysis.gamma_beta_pca(model.table, tsis)
        proj.write_csv(out / "pca.csv", groups)
        (out / "pca.svg").write_text(analysis.scatter_svg(proj, groups, "PCA of AdaIN scales and offsets"),
                                     encoding="utf-8")
        files += [out / "pca.csv", out / "pca.svg"]
        summary["pca_explained"] = proj.explained.tolist()
        summary["pca_degenerate_axes"] = proj.degenerate
    if "substitutions" in wanted:
        table = analysis.substitution_table(outputs, dataset.alphabet, tsis)
        table.write_csv(out / "substitutions.csv", args.top)
        files.append(out / "substitutions.csv")
    if "correlation" in wanted:
        corr = analysis.correlate(analysis.embedding_distance_matrix(model.table, tsis),
                                  analysis.output_distance_matrix(outputs, tsis), tsis)
        corr.write_csv(out / "correlation.csv")
        files.append(out / "correlation.csv")
        summary["pearson_r"] = corr.r
        summary["correlation_degenerate"] = corr.reason or None
    if "mds" in wanted:
        proj = analysis.mds_projection(analysis.output_distance_matrix(outputs, tsis), tsis)
        proj.write_csv(out / "mds.csv", groups)
        (out / "mds.svg").write_text(analysis.scatter_svg(proj, groups, "MDS of output edit distances"),
                                     encoding="utf-8")
        files += [out / "mds.csv", out / "mds.svg"]
    _write_run_manifest(out, "run.json", "analyze", resolved, files)
    _emit(summary | {"files": [str(f) for f in files]})
    return 0


# ---------------------------------------------------------------------------
# entry point


def _threads(value: str | None) -> int:
    raw = value if value is not None else os.environ.get("TSNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"invalid thread count {raw!r}") from None
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsnet", description="Transcription-style text recognition toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, help="root seed (overrides the config's seed)")
        sp.add_argument("--threads", help="worker cap (default: $TSNET_THREADS or 1)")

    g = sub.add_parser("gen", help="generate a synthetic permutation-style dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--styles", type=int)
    g.add_argument("--tsi-per-style", type=int)
    g.add_argument("--lines-per-tsi", type=int)
    g.add_argument("--alphabet")
    g.add_argument("--force", action="store_true", help="replace an existing dataset directory")
    common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a TSB (or baseline) network")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config")
    t.add_argument("--baseline", action="store_true", help="FRN head instead of the TSB")
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume")
    t.add_argument("--stop-at", type=int, help="stop after this iteration (for staged runs)")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="character error rate on a dataset split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=["train", "test", "all"])
    e.add_argument("--shuffle-tsi", action="store_true")
    e.add_argument("--embedding", help="decode every line with this adapted embedding")
    e.add_argument("--out", help="per-line CSV")
    common(e)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("decode", help="transcribe one PGM line image")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--tsi", type=int)
    d.add_argument("--embedding")
    common(d)
    d.set_defaults(func=cmd_decode)

    a = sub.add_parser("adapt", help="fit an embedding for a new style from exemplar lines")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--lines", required=True, help="manifest TSV of exemplar lines")
    a.add_argument("--out", required=True, help="embedding file, or CSV with --sweep")
    a.add_argument("--iterations", type=int, default=100)
    a.add_argument("--no-augment", action="store_true")
    a.add_argument("--char-width", type=int, default=RenderParams().advance)
    a.add_argument("--sweep", action="store_true")
    a.add_argument("--held-out", help="manifest TSV scored in sweep mode")
    a.add_argument("--counts", default="1,4,12,20,50,100")
    a.add_argument("--repeats", type=int, default=50)
    common(a)
    a.set_defaults(func=cmd_adapt)

    z = sub.add_parser("analyze", help="style analysis: PCA, substitutions, correlation, MDS")
    z.add_argument("--checkpoint", required=True)
    z.add_argument("--data", required=True)
    z.add_argument("--out", required=True)
    z.add_argument("--split", default="test", choices=["train", "test", "all"])
    z.add_argument("--limit", type=int)
    z.add_argument("--tsi", help="comma-separated TSI subset")
    z.add_argument("--top", type=int, default=3)
    for name in ("pca", "substitutions", "correlation", "mds"):
        z.add_argument(f"--{name}", action="store_true")
    common(z)
    z.set_defaults(func=cmd_analyze)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.threads = _threads(args.threads)
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1


if __name__ == "__main__":
    sys.exit(main())

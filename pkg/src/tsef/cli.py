"""Command-line entry point: ``tsef <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import classifier as clf
from . import datagen, metrics, pipeline, theorycheck
from .explainers import EXPLAINER_NAMES

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
REFERENCE_ALIASES = {"ground_truth": "ground_truth", "topk": "topk", "top_k_clean": "topk"}


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_gen_data(a) -> int:
    sizes = {"train": a.n_train, "val": a.n_val, "test": a.n_test}
    ds = datagen.generate(a.dataset, a.seed, sizes)
    datagen.save_dataset(ds, a.out)
    print(f"wrote {a.dataset} (T={ds.T}, D={ds.D}) to {a.out}")
    return EXIT_OK


def cmd_train(a) -> int:
    ds = datagen.load_dataset(a.data)
    over = {"architecture": a.arch, "seed": a.seed}
    for key in ("activation", "lr", "epochs", "batch_size"):
        if getattr(a, key) is not None:
            over[key] = getattr(a, key)
    if a.hidden is not None:
        over["hidden"] = tuple(a.hidden)
    elif a.arch == "mlp":
        over["hidden"] = (64, 64)
    cfg = clf.preset_config(ds, **over)
    ck = clf.train(ds, cfg, verbose=a.verbose)
    clf.save_checkpoint(ck, a.out)
    print(f"test accuracy {ck.metadata['test_accuracy']:.4f}; saved to {a.out}")
    return EXIT_OK


def _attack_params(a) -> dict:
    p = {}
    for key in ("iters", "step", "lambda_cls", "lambda_exp", "lambda_fpf", "metric"):
        v = getattr(a, key)
        if v is not None:
            p[key] = v
    if a.iterations is not None:
        p["iterations"] = a.iterations
    return p


def cmd_attack(a) -> int:
    out = Path(a.out)
    cfg = pipeline.ExperimentConfig(
        dataset=a.data, model=a.model, out_dir=str(out.parent), attack=a.attack, explainer=a.explainer,
        epsilon=a.eps, reference=REFERENCE_ALIASES[a.reference], k_percent=a.k, n_samples=a.n_samples,
        seed=a.seed, chunk_size=a.chunk_size, attack_params=_attack_params(a), ig_steps=a.ig_steps,
    )
    run = pipeline.run_attack(cfg)
    pipeline.write_results(cfg, run, out)
    print(f"attacked {len(run['records'])} samples; results in {out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    doc, arrays = pipeline.load_results(a.results)
    rep = pipeline.evaluate_results(doc, arrays)
    pipeline.write_report(rep, a.out)
    print(metrics.render([rep], "markdown"), end="")
    return EXIT_OK


def cmd_theory(a) -> int:
    rep = theorycheck.diffusion_scan(a.dims, a.omega_fraction, a.eps, a.samples, a.explainer, a.seed)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    out.with_suffix(".csv").write_text(rep.to_csv())
    print(rep.to_csv(), end="")
    return EXIT_OK


def cmd_report(a) -> int:
    reports = []
    for path in a.inputs:
        p = Path(path)
        if not p.exists():
            raise pipeline.ConfigError(f"{p} not found")
        doc = json.loads(p.read_text())
        if "samples" in doc:
            _, arrays = pipeline.load_results(p)
            reports.append(pipeline.evaluate_results(doc, arrays, label=p.parent.name or p.stem))
        else:
            rep = metrics.MetricsReport.from_dict(doc)
            rep.label = rep.label or p.stem
            reports.append(rep)
    text = metrics.render(reports, a.format)
    if a.out:
        Path(a.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_run(a) -> int:
    p = Path(a.config)
    if not p.exists():
        raise pipeline.ConfigError(f"config {p} not found")
    cfg = pipeline.ExperimentConfig.from_json(p.read_text())
    files = pipeline.run_pipeline(cfg)
    print(f"wrote {', '.join(str(v) for v in files.values())}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tsef", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic benchmark")
    g.add_argument("--dataset", required=True, choices=sorted(datagen.GENERATORS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=datagen.DEFAULT_SIZES["train"])
    g.add_argument("--n-val", type=int, default=datagen.DEFAULT_SIZES["val"])
    g.add_argument("--n-test", type=int, default=datagen.DEFAULT_SIZES["test"])
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a classifier on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--arch", default="cnn1d", choices=clf.ARCHITECTURES)
    t.add_argument("--out", required=True)
    t.add_argument("--hidden", type=_int_list)
    t.add_argument("--activation", choices=sorted(clf.ACTIVATIONS))
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    k = sub.add_parser("attack", help="attack eligible test samples")
    k.add_argument("--model", required=True)
    k.add_argument("--data", required=True)
    k.add_argument("--explainer", default="ig", choices=EXPLAINER_NAMES)
    k.add_argument("--attack", default="tsef", choices=pipeline.ATTACKS)
    k.add_argument("--eps", type=float, default=0.1)
    k.add_argument("--reference", default="ground_truth", choices=sorted(REFERENCE_ALIASES))
    k.add_argument("--k", type=float, default=10.0, help="top-k percent for topk references and gauss baselines")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", required=True, help="results JSON path; blobs are written beside it")
    k.add_argument("--n-samples", type=int)
    k.add_argument("--chunk-size", type=int, default=20)
    k.add_argument("--ig-steps", type=int, default=20)
    k.add_argument("--iters", type=int, help="PGD/ADV2 iterations")
    k.add_argument("--step", type=float, help="PGD/ADV2 absolute step (default eps'/10)")
    k.add_argument("--iterations", type=int, help="TSEF outer iterations")
    k.add_argument("--lambda-cls", type=float)
    k.add_argument("--lambda-exp", type=float)
    k.add_argument("--lambda-fpf", type=float)
    k.add_argument("--metric", choices=("mse", "cosine", "kl"))
    k.set_defaults(fn=cmd_attack)

    e = sub.add_parser("eval", help="compute metrics for a results file")
    e.add_argument("--results", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    th = sub.add_parser("theory-check", help="attribution diffusion scan over input sizes")
    th.add_argument("--dims", type=_int_list, default=[64, 128, 256, 512])
    th.add_argument("--eps", type=float, default=0.1)
    th.add_argument("--samples", type=int, default=100)
    th.add_argument("--omega-fraction", type=float, default=0.1)
    th.add_argument("--explainer", default="grad", choices=("grad", "gxi", "ig"))
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out", required=True)
    th.set_defaults(fn=cmd_theory)

    r = sub.add_parser("report", help="render reports or results files as a table")
    r.add_argument("inputs", nargs="*")
    r.add_argument("--format", default="markdown", choices=("markdown", "csv", "json"))
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)

    c = sub.add_parser("run", help="run a full experiment from a JSON ExperimentConfig")
    c.add_argument("--config", required=True)
    c.set_defaults(fn=cmd_run)
    return ap


CONFIG_ERRORS = (pipeline.ConfigError, datagen.DataError, theorycheck.ScanError, FileNotFoundError)


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return a.fn(a)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Generate data, train the preset classifier and run every attack on one synthetic dataset.

    python3 scripts/run_experiments.py --dataset lowvar --n-samples 200 --out runs/lowvar

Writes <out>/data, <out>/model, one directory per attack and <out>/table.md.
"""
import argparse
import logging
import time
from pathlib import Path

from tsef import classifier as clf
from tsef import datagen, pipeline

log = logging.getLogger("run_experiments")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset", required=True, choices=sorted(datagen.GENERATORS))
    ap.add_argument("--out", required=True)
    ap.add_argument("--n-samples", type=int, default=200)
    ap.add_argument("--attacks", default="pgd,adv2,tsef,tsef-no-mt,random,gauss-local,gauss-global")
    ap.add_argument("--explainer", default="ig")
    ap.add_argument("--eps", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(a.out)
    data, model = out / "data", out / "model"
    if not (data / "manifest.json").exists():
        datagen.save_dataset(datagen.generate(a.dataset, a.seed), data)
    if not (model / "model.json").exists():
        ds = datagen.load_dataset(data)
        ck = clf.train(ds, clf.preset_config(ds, seed=a.seed))
        clf.save_checkpoint(ck, model)
        log.info("test accuracy %.4f", ck.metadata["test_accuracy"])
    docs = []
    for attack in a.attacks.split(","):
        t0 = time.perf_counter()
        cfg = pipeline.ExperimentConfig(dataset=str(data), model=str(model), out_dir=str(out / attack), attack=attack,
                                        explainer=a.explainer, epsilon=a.eps, n_samples=a.n_samples, seed=a.seed)
        files = pipeline.run_pipeline(cfg)
        docs.append(pipeline.load_results(files["results"]))
        log.info("%s done in %.0fs", attack, time.perf_counter() - t0)
    table = pipeline.render_report(docs, "markdown")
    (out / "table.md").write_text(table)
    print(table, end="")


if __name__ == "__main__":
    main()

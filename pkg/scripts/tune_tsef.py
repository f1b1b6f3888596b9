"""Pick TSEF loss weights on the validation split.

lambda_cls and lambda_fpf are set together from a small grid. The choice is
the highest validation ASR, then the highest AUPRC, then the smaller weight.

    python3 scripts/tune_tsef.py --data runs/lowvar/data --model runs/lowvar/model --grid 1,2,4
"""
import argparse

from tsef import pipeline


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", required=True)
    ap.add_argument("--model", required=True)
    ap.add_argument("--grid", default="1,2,4")
    ap.add_argument("--n-samples", type=int, default=30)
    ap.add_argument("--out", default="tune-runs")
    a = ap.parse_args(argv)

    def measure(attack, params, tag):
        cfg = pipeline.ExperimentConfig(dataset=a.data, model=a.model, out_dir=f"{a.out}/{tag}", attack=attack,
                                        split="val", n_samples=a.n_samples, attack_params=params)
        run = pipeline.run_attack(cfg)
        return pipeline.evaluate_results({"samples": run["records"], "attack": tag},
                                         {"saliency": run["saliency"], "reference": run["reference"]})

    reports = [measure("pgd", {}, "pgd")]
    scored = []
    for lam in (float(v) for v in a.grid.split(",")):
        rep = measure("tsef", {"lambda_cls": lam, "lambda_fpf": lam}, f"tsef lambda={lam:g}")
        reports.append(rep)
        scored.append(((rep.asr[0], rep.auprc[0], -lam), lam))
    print(pipeline.render_report(reports, "markdown"), end="")
    print(f"chosen lambda_cls = lambda_fpf = {max(scored)[1]:g}")


if __name__ == "__main__":
    main()

"""Does self-supervised pretraining help the adapter? One data seed, both arms.

    python demos/ablation.py [--seed S] [--config tests/fixtures/desk_scale.cfg]

Runs the full cross-session evaluation twice on the same synthetic corpus:
once starting from the pretrained adapter and once from a random adapter with
identical fine-tuning settings. A nearest-class-centroid rule on utterance
means is printed as a reference point for how separable the data is.

With the desk-scale config this takes several minutes on one core.
"""

import argparse
from pathlib import Path

import numpy as np

from wap_adapter import cli, evaluation, features, metrics, ssl

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--config", default=str(ROOT / "tests" / "fixtures" / "desk_scale.cfg"))
    args = ap.parse_args()

    values = cli.resolve(args, tuple(dict.fromkeys(cli.SYNTH_KEYS + cli.SSL_KEYS + cli.FT_KEYS)))
    values["seed"] = args.seed
    spec = features.SynthSpec(num_classes=values["classes"],
                              utterances_per_class=(values["per_class"][0],) * values["classes"],
                              dim=values["dim"], separation=values["separation"], seed=args.seed)
    manifest, seqs = features.generate_synthetic(spec)
    folds = features.make_folds(manifest)

    oracle = [metrics.ua(metrics.confusion(t, p, manifest.num_classes))
              for t, p in features.nearest_centroid_cv(seqs, folds, manifest.num_classes)]
    print(f"nearest-centroid UA: {np.mean(oracle):.4f}")

    wcfg = cli.wap_config(values, spec.dim)
    print("pretraining ...")
    result = ssl.pretrain([s.frames for s in seqs], wcfg, cli.ssl_config(values))
    fcfg = cli.finetune_config(values, manifest.num_classes)

    for name, adapter in (("pretrained", result.pair.student), ("random init", None)):
        report = evaluation.run_cv(manifest, adapter, fcfg, folds, wcfg, seqs)
        folds_ua = " ".join(f"{f.scores['UA']:.3f}" for f in report.folds)
        print(f"{name:>12}: mean UA {report.means['UA']:.4f}  "
              f"pooled UA {report.pooled['UA']:.4f}  folds [{folds_ua}]")


if __name__ == "__main__":
    main()

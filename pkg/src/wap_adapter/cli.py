"""Command-line entry point: ``wap-adapter <subcommand> [flags]``.

Configuration resolves as defaults < ``--config`` file (``key = value`` lines)
< explicit flags. Unknown keys abort before anything is written. Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import features, gradcheck, nn, sap, ssl, wap
from .codebook import DistillConfig
from .evaluation import export_embeddings, run_cv
from .sap import FinetuneConfig, SerModel
from .ssl import SslConfig
from .wap import WapConfig

log = logging.getLogger("wap_adapter")


class UsageError(Exception):
    pass


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text):
    t = str(text).strip().lower()
    return None if t in ("none", "off", "") else float(t)


def _int_list(text):
    return tuple(int(v) for v in str(text).split(","))


# key -> (type, default); every default named by the training configs lives here
KEYS = {
    # common
    "seed": (int, 0),
    "threads": (int, 1),
    # synthetic data
    "classes": (int, 4),
    "per_class": (_int_list, (50,)),
    "dim": (int, 64),
    "t_min": (int, 8),
    "t_max_frames": (int, 24),
    "separation": (float, 6.0),
    "noise": (float, 1.0),
    "sessions": (int, 5),
    "speakers_per_session": (int, 2),
    "smooth_window": (int, 5),
    # adapter
    "d_model": (int, 384),
    "n_layers": (int, 3),
    "n_heads": (int, 6),
    "d_ff": (int, 1536),
    "t_max": (int, 1024),
    "weight_mode": (str, "softmax"),
    "aggregation": (str, "post"),
    # pretraining
    "mask_ratio": (float, 0.4),
    "ema": (float, 0.999),
    "lambda_start": (float, 1.0),
    "lambda_end": (float, 0.5),
    "lambda_shape": (str, "linear"),
    "batch_size": (int, 96),
    "epochs": (int, 100),
    "lr": (float, 1e-4),
    "min_lr": (float, 0.0),
    "clip_norm": (_optional_float, 5.0),
    "codebook_size": (int, 1024),
    "warmup_batches": (int, 2),
    "temperature": (float, 0.1),
    "eta_mode": (str, "count"),
    "fixed_eta": (float, 0.05),
    "dead_threshold": (int, 50),
    # fine-tuning
    "sap_heads": (int, 4),
    "ft_batch_size": (int, 96),
    "ft_epochs": (int, 100),
    "ft_lr": (float, 1e-4),
    "ft_min_lr": (float, 0.0),
    "augment": (_bool, True),
    "aug_ratio": (float, 0.15),
    "freeze": (str, "none"),
    "variance_mode": (str, "corrected"),
}

SYNTH_KEYS = ("seed", "classes", "per_class", "dim", "t_min", "t_max_frames", "separation",
              "noise", "sessions", "speakers_per_session", "smooth_window")
WAP_KEYS = ("d_model", "n_layers", "n_heads", "d_ff", "t_max", "weight_mode", "aggregation")
SSL_KEYS = ("seed", "threads", "mask_ratio", "ema", "lambda_start", "lambda_end", "lambda_shape",
            "batch_size", "epochs", "lr", "min_lr", "clip_norm", "codebook_size", "warmup_batches",
            "temperature", "eta_mode", "fixed_eta", "dead_threshold") + WAP_KEYS
FT_KEYS = ("seed", "threads", "sap_heads", "ft_batch_size", "ft_epochs", "ft_lr", "ft_min_lr",
           "clip_norm", "augment", "aug_ratio", "freeze", "variance_mode") + WAP_KEYS


def read_config_file(path):
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def resolve(args, keys):
    """Merge defaults, config file and flags for ``keys``; returns a dict."""
    raw = {}
    if getattr(args, "config", None):
        raw.update(read_config_file(args.config))
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            raw[k] = v
    out = {}
    for k in keys:
        typ, default = KEYS[k]
        if k in raw:
            try:
                out[k] = raw[k] if not isinstance(raw[k], str) else typ(raw[k])
            except ValueError as exc:
                raise UsageError(f"bad value for {k}: {exc}") from None
        else:
            out[k] = default
    return out


def print_config(command, cfg):
    print(f"# {command}")
    for k in sorted(cfg):
        v = cfg[k]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        print(f"{k} = {v}")
    sys.stdout.flush()


def wap_config(cfg, d_in):
    return WapConfig(d_in=d_in, d_model=cfg["d_model"], n_layers=cfg["n_layers"],
                     n_heads=cfg["n_heads"], d_ff=cfg["d_ff"], t_max=cfg["t_max"],
                     weight_mode=cfg["weight_mode"], aggregation=cfg["aggregation"])


def ssl_config(cfg):
    return SslConfig(
        mask_ratio=cfg["mask_ratio"], ema=cfg["ema"], lambda_start=cfg["lambda_start"],
        lambda_end=cfg["lambda_end"], lambda_shape=cfg["lambda_shape"],
        batch_size=cfg["batch_size"], epochs=cfg["epochs"], lr=cfg["lr"], min_lr=cfg["min_lr"],
        clip_norm=cfg["clip_norm"], codebook_size=cfg["codebook_size"],
        warmup_batches=cfg["warmup_batches"],
        distill=DistillConfig(cfg["temperature"], cfg["eta_mode"], cfg["fixed_eta"],
                              cfg["dead_threshold"]),
        seed=cfg["seed"], threads=cfg["threads"])


def finetune_config(cfg, num_classes):
    return FinetuneConfig(
        num_classes=num_classes, heads=cfg["sap_heads"], batch_size=cfg["ft_batch_size"],
        epochs=cfg["ft_epochs"], lr=cfg["ft_lr"], min_lr=cfg["ft_min_lr"],
        clip_norm=cfg["clip_norm"], augment=cfg["augment"], aug_ratio=cfg["aug_ratio"],
        freeze=cfg["freeze"], variance_mode=cfg["variance_mode"], seed=cfg["seed"],
        threads=cfg["threads"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args):
    cfg = resolve(args, SYNTH_KEYS)
    per_class = cfg["per_class"]
    if len(per_class) == 1:
        per_class = per_class * cfg["classes"]
    spec = features.SynthSpec(
        num_classes=cfg["classes"], utterances_per_class=per_class, dim=cfg["dim"],
        t_range=(cfg["t_min"], cfg["t_max_frames"]), separation=cfg["separation"],
        noise=cfg["noise"], num_sessions=cfg["sessions"],
        speakers_per_session=cfg["speakers_per_session"], smooth_window=cfg["smooth_window"],
        seed=cfg["seed"])
    print_config("gen-synth", cfg)
    manifest = features.gen_synthetic(spec, args.out)
    log.info("wrote %d utterances to %s", len(manifest), args.out)
    return 0


def _load_manifest(path):
    manifest = features.read_manifest(path)
    seqs = manifest.load_all()
    return manifest, seqs


def cmd_pretrain(args):
    cfg = resolve(args, SSL_KEYS)
    manifest, seqs = _load_manifest(args.manifest)
    wcfg = wap_config(cfg, seqs[0].dim)
    scfg = ssl_config(cfg)
    print_config("pretrain", cfg)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log")
    result = ssl.pretrain([s.frames for s in seqs], wcfg, scfg)
    ssl.save_pretrain(out, result)
    log_path.write_text(result.log_text(), encoding="utf-8")
    return 0


def _adapter(args):
    if args.no_pretrain:
        return None
    if not args.checkpoint:
        raise UsageError("--checkpoint is required unless --no-pretrain is given")
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    pair, _ = ssl.load_pretrain(args.checkpoint)
    return pair.student


def cmd_finetune(args):
    cfg = resolve(args, FT_KEYS)
    adapter = _adapter(args)
    manifest, seqs = _load_manifest(args.manifest)
    folds = features.make_folds(manifest)
    if not 0 <= args.fold < len(folds):
        raise UsageError(f"--fold must lie in [0, {len(folds)})")
    fcfg = finetune_config(cfg, manifest.num_classes)
    wcfg = adapter.config if adapter is not None else wap_config(cfg, seqs[0].dim)
    print_config("finetune", {**cfg, "fold": args.fold})
    train, val = folds.folds[args.fold]
    res = sap.finetune(adapter, [seqs[i] for i in train], [seqs[i] for i in val], fcfg, wcfg)
    out = Path(args.out)
    res.model.save(out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log")
    log_path.write_text(res.log_text(), encoding="utf-8")
    return 0


def cmd_evaluate(args):
    cfg = resolve(args, FT_KEYS)
    adapter = _adapter(args)
    manifest, seqs = _load_manifest(args.manifest)
    fcfg = finetune_config(cfg, manifest.num_classes)
    wcfg = adapter.config if adapter is not None else wap_config(cfg, seqs[0].dim)
    print_config("evaluate", cfg)
    report = run_cv(manifest, adapter, fcfg, wap_config=wcfg, seqs=seqs,
                    on_fold=lambda f: log.info("fold %d UA %.4f", f.fold, f.scores["UA"]))
    report.write(args.out)
    sys.stdout.write(report.to_text())
    return 0


def cmd_gradcheck(args):
    print_config("gradcheck", {"seed": args.seed or 0, "sabotage": args.sabotage})
    ok = True
    for r in gradcheck.run_all(seed=args.seed or 0, sabotage=args.sabotage):
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{status}\t{r.name}\t{r.error:.3e}\t< {r.tol:g}")
    if args.out:
        Path(args.out).write_text("ok\n" if ok else "failed\n", encoding="utf-8")
    return 0 if ok else 1


def cmd_export(args):
    if not Path(args.model).exists():
        raise FileNotFoundError(f"model not found: {args.model}")
    model = SerModel.load(args.model)
    manifest = features.read_manifest(args.manifest)
    print_config("export-embeddings", {"model": args.model, "manifest": args.manifest})
    export_embeddings(model, manifest, args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _flag(parser, key, **kw):
    parser.add_argument("--" + key.replace("_", "-"), dest=key, default=None, **kw)


def build_parser():
    parser = argparse.ArgumentParser(prog="wap-adapter", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key = value configuration file")
        _flag(p, "seed", type=int)
        _flag(p, "threads", type=int, help="worker threads; 1 is bit-reproducible (default)")
        p.add_argument("--out", required=out_required)
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gen-synth", help="write a synthetic embedding dataset")
    common(p)
    for k in SYNTH_KEYS[1:]:
        _flag(p, k, type=str)
    p.set_defaults(func=cmd_gen_synth)

    def wap_flags(p):
        for k in WAP_KEYS:
            _flag(p, k, type=str)

    p = sub.add_parser("pretrain", help="teacher-student adapter pretraining")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--log")
    for k in SSL_KEYS[2:]:
        if k not in WAP_KEYS:
            _flag(p, k, type=str)
    wap_flags(p)
    p.set_defaults(func=cmd_pretrain)

    def ft_flags(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--checkpoint")
        p.add_argument("--no-pretrain", action="store_true",
                       help="start from a randomly initialised adapter")
        p.add_argument("--batch-size", dest="ft_batch_size", type=str)
        p.add_argument("--epochs", dest="ft_epochs", type=str)
        p.add_argument("--lr", dest="ft_lr", type=str)
        p.add_argument("--min-lr", dest="ft_min_lr", type=str)
        p.add_argument("--freeze", dest="freeze", choices=("none", "head"),
                       help="'head' trains only the pooling head and classifier")
        for k in ("sap_heads", "clip_norm", "augment", "aug_ratio", "variance_mode"):
            _flag(p, k, type=str)
        wap_flags(p)

    p = sub.add_parser("finetune", help="fine-tune on one cross-session fold")
    common(p)
    ft_flags(p)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--log")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="cross-session k-fold fine-tuning and report")
    common(p)
    ft_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all backward passes")
    common(p, out_required=False)
    p.add_argument("--sabotage", action="store_true", help="flip analytic gradients (must fail)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-embeddings", help="dump utterance embeddings of a fine-tuned model")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None) is not None and int(args.threads) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Cross-session cross-validation, reports and embedding export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics
from .features import FoldPlan, Manifest, Record, make_folds, write_feature_file, write_manifest
from .sap import FinetuneConfig, SerModel, evaluate, finetune
from .wap import WapConfig, WapParams


@dataclass
class FoldResult:
    fold: int
    session: int
    scores: dict
    confusion: np.ndarray
    best_epoch: int
    history: list = field(default_factory=list)


@dataclass
class CvReport:
    folds: list
    class_names: list

    @property
    def means(self):
        return {k: float(np.mean([f.scores[k] for f in self.folds])) for k in ("UA", "WA", "F1")}

    @property
    def pooled_confusion(self):
        return sum(f.confusion for f in self.folds)

    @property
    def pooled(self):
        """Scores of the confusion matrix summed over folds."""
        return metrics.scores(self.pooled_confusion)

    def to_text(self):
        lines = ["fold\tUA\tWA\tF1"]
        for f in self.folds:
            lines.append(_row(str(f.fold), f.scores))
        lines.append(_row("mean", self.means))
        lines.append(_row("pooled", self.pooled))
        for f in self.folds:
            lines.append("")
            lines.append(f"confusion fold {f.fold} (validation session {f.session})")
            lines.extend(_grid(f.confusion, self.class_names))
        lines.append("")
        lines.append("confusion pooled")
        lines.extend(_grid(self.pooled_confusion, self.class_names))
        return "\n".join(lines) + "\n"

    def to_records(self):
        rows = []
        for f in self.folds:
            rows.append({"fold": f.fold, "session": f.session, "best_epoch": f.best_epoch,
                         **f.scores, "confusion": f.confusion.tolist()})
        rows.append({"fold": "mean", **self.means})
        rows.append({"fold": "pooled", **self.pooled, "confusion": self.pooled_confusion.tolist()})
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)

    def write(self, path, records_path=None):
        path = Path(path)
        path.write_text(self.to_text(), encoding="utf-8")
        records_path = records_path or path.with_suffix(".jsonl")
        Path(records_path).write_text(self.to_records(), encoding="utf-8")


def _row(name, sc):
    return f"{name}\t{sc['UA']:.6f}\t{sc['WA']:.6f}\t{sc['F1']:.6f}"


def _grid(cm, names):
    width = max(6, *(len(n) for n in names))
    out = [" " * width + "".join(f"{n:>{width + 1}}" for n in names)]
    for name, row in zip(names, cm):
        out.append(f"{name:<{width}}" + "".join(f"{int(v):>{width + 1}d}" for v in row))
    return out


def run_cv(manifest: Manifest, adapter: Optional[WapParams], config: FinetuneConfig,
           folds: Optional[FoldPlan] = None, wap_config: Optional[WapConfig] = None,
           seqs=None, on_fold=None) -> CvReport:
    """Fine-tune and score one model per fold.

    ``adapter`` is the pretrained student; ``None`` fine-tunes a fresh adapter
    built from ``wap_config`` in every fold.
    """
    folds = folds or make_folds(manifest)
    seqs = seqs if seqs is not None else manifest.load_all()
    results = []
    for i, ((train, val), session) in enumerate(zip(folds.folds, folds.sessions)):
        res = finetune(adapter, [seqs[j] for j in train], [seqs[j] for j in val], config, wap_config)
        cm, sc = evaluate(res.model, [seqs[j] for j in val], manifest.num_classes)
        fr = FoldResult(i, session, sc, cm, res.best_epoch, res.history)
        results.append(fr)
        if on_fold is not None:
            on_fold(fr)
    return CvReport(results, list(manifest.class_names))


def export_embeddings(model: SerModel, manifest: Manifest, out_dir, seqs=None):
    """Write utterance embeddings (one row per record) plus a matching manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seqs = seqs if seqs is not None else manifest.load_all()
    emb = np.stack([model.embed(s.frames) for s in seqs])
    write_feature_file(emb.astype(np.float32), out_dir / "embeddings.wapf")
    records = [Record(r.path, r.label, r.session_id, r.speaker_id) for r in manifest.records]
    write_manifest(Manifest(records, list(manifest.class_names)), out_dir / "embeddings.tsv")
    return emb

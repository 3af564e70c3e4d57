import json

import numpy as np
import pytest

from wap_adapter import evaluation, features, metrics, sap, wap

TINY = wap.WapConfig(d_in=6, d_model=8, n_layers=3, n_heads=2, d_ff=16, t_max=32)
CFG = sap.FinetuneConfig(batch_size=8, epochs=2, lr=3e-3)


@pytest.fixture(scope="module")
def data():
    return features.generate_synthetic(features.SynthSpec(utterances_per_class=5, dim=6, seed=3))


@pytest.fixture(scope="module")
def report(data):
    m, seqs = data
    return evaluation.run_cv(m, None, CFG, wap_config=TINY, seqs=seqs)


class TestRunCv:
    def test_five_folds_plus_means(self, report):
        assert len(report.folds) == 5
        assert [f.session for f in report.folds] == [0, 1, 2, 3, 4]
        lines = report.to_text().splitlines()
        assert lines[0] == "fold\tUA\tWA\tF1"
        assert [l.split("\t")[0] for l in lines[1:8]] == ["0", "1", "2", "3", "4", "mean", "pooled"]

    def test_means_recomputed(self, report):
        for k in ("UA", "WA", "F1"):
            manual = sum(f.scores[k] for f in report.folds) / len(report.folds)
            assert report.means[k] == pytest.approx(manual, abs=1e-15)

    def test_pooled_confusion(self, report):
        np.testing.assert_array_equal(report.pooled_confusion, sum(f.confusion for f in report.folds))
        assert report.pooled_confusion.sum() == 20
        assert report.pooled == metrics.scores(report.pooled_confusion)

    def test_fold_scores_match_their_confusions(self, report):
        for f in report.folds:
            assert f.scores == metrics.scores(f.confusion)
            assert f.scores["UA"] == f.history[f.best_epoch].val_ua

    def test_reproducible(self, data, report, tmp_path):
        m, seqs = data
        again = evaluation.run_cv(m, None, CFG, wap_config=TINY, seqs=seqs)
        report.write(tmp_path / "a.txt")
        again.write(tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        rows = [json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()]
        assert [r["fold"] for r in rows] == [0, 1, 2, 3, 4, "mean", "pooled"]


class TestExport:
    def test_shape_consistency_and_determinism(self, data, tmp_path):
        m, seqs = data
        spec = features.SynthSpec(utterances_per_class=5, dim=6, seed=3)
        m = features.gen_synthetic(spec, tmp_path / "d")
        model = sap.SerModel(wap.init_wap(TINY, np.random.default_rng(0)),
                             sap.init_head(8, 4, 4, np.random.default_rng(1)))
        emb = evaluation.export_embeddings(model, m, tmp_path / "e1")
        evaluation.export_embeddings(model, m, tmp_path / "e2")
        out = features.read_feature_file(tmp_path / "e1" / "embeddings.wapf").frames
        assert out.shape == (20, 2 * 8 * 4)
        np.testing.assert_array_equal(out, emb.astype(np.float32))
        np.testing.assert_allclose(out[7], model.embed(m.load(7).frames), atol=1e-6)
        for name in ("embeddings.wapf", "embeddings.tsv"):
            assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()
        labels = [r.label for r in features.read_manifest(tmp_path / "e1" / "embeddings.tsv").records]
        assert labels == [r.label for r in m.records]

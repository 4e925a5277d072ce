import math

import numpy as np
import pytest

import blockrank


def test_closed_form_losses():
    assert blockrank.infonce_aux_loss([0.3] * 8, 2) == pytest.approx(math.log(8), abs=1e-10)
    assert blockrank.ntp_loss(np.zeros((3, 50)), [0, 2], [4, 49]) == pytest.approx(math.log(50), abs=1e-9)


def test_metrics_and_complexity():
    m = blockrank.compute_metrics([["00", "01"]], [["01"]], per_query=True)
    assert m["ndcg_at_10"] == pytest.approx(0.6309, abs=1e-4)
    assert m["mrr_at_10"] == 0.5
    assert blockrank.analytic_scored_pairs(4, 8) == 960
    assert blockrank.analytic_scored_pairs(4, 8, "dense_causal") == 2304


def test_entropy_baseline():
    s = blockrank.id_digit_entropy(2000, seed=3)
    assert s["n_lists"] == 2000
    assert s["id_0"]["mean"] == pytest.approx(2.6, abs=0.1)
    assert s["id_1"]["mean"] == pytest.approx(2.6, abs=0.1)


def test_errors_map_to_python_exceptions():
    with pytest.raises(blockrank.ConfigError):
        blockrank.generate_synthetic(2, n_docs=0)
    with pytest.raises(blockrank.BlockRankError):
        blockrank.compute_metrics([], [])


def test_train_and_rank(tmp_path):
    data = tmp_path / "data"
    run = tmp_path / "run"
    code, _, err = blockrank.run_cli(
        ["gen-data", "--n", "16", "--n-eval", "4", "--N", "4", "--task.doc_len", "8",
         "--task.query_span_len", "3", "--out", str(data)]
    )
    assert code == 0, err
    code, _, err = blockrank.run_cli(
        ["train", "--data", str(data), "--out", str(run), "--model.d_model", "16", "--train.total_steps", "3",
         "--train.warmup_steps", "1", "--train.batch_size", "2", "--layout.chunk_len", "24"]
    )
    assert code == 0, err

    ranker = blockrank.Ranker(str(run))
    assert ranker.n_layers == ranker.config["model"]["n_layers"]
    ex = blockrank.generate_synthetic(1, n_docs=4, doc_len=8, query_span_len=3)[0]
    ex["candidates"] = [dict(c, id=f"doc-{i}") for i, c in enumerate(ex["candidates"])]
    r = ranker.rank(ex)
    assert r["method"] == "attention"
    assert r["decode_steps"] == 0
    assert sorted(r["ranking"]) == sorted(c["id"] for c in ex["candidates"])
    beam = ranker.rank(ex, method="beam", beam=2)
    assert len(beam["ranking"]) == 2
    curve = ranker.layerwise(blockrank.generate_synthetic(3, n_docs=4, doc_len=8, query_span_len=3))
    assert len(curve["p_at_1"]) == ranker.n_layers

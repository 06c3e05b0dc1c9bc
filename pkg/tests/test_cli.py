import json

import numpy as np
import pandas as pd
import pytest
import yaml

from succsurp import ScoredCorpus, load_model, pearson_r
from succsurp.cli import load_config, main
from succsurp.corpus import load_words, word_measures
from succsurp.datasets import simulate_rts, stdlib_prose, words_frame


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    docs = stdlib_prose()
    (root / "train.txt").write_text("\n\n".join(docs[:60]), encoding="utf-8")
    words_frame(docs[200:206]).to_csv(root / "words.csv", index=False)
    assert run("train", "--train", root / "train.txt", "--order", 3, "--vocab-size", 2000, "-o", root / "train") == 0
    model = root / "train" / "model.npz"
    assert run("score", "--model", model, "--corpus", root / "words.csv", "--k", 5, 50, "-o", root / "score") == 0
    return root


def planted_rts(root, effects, seed=0):
    words = load_words(root / "words.csv")
    scored = ScoredCorpus.from_csv(root / "score" / "scored.csv")
    m = word_measures(words, scored).fillna(0.0)
    for c in effects:
        m[c] = (m[c] - m[c].mean()) / m[c].std()
    rts = simulate_rts(m, effects, n_subjects=6, seed=seed, noise_sd=25.0)
    path = root / f"rts_{seed}.csv"
    rts.to_csv(path, index=False)
    return path


def test_train_writes_container_and_manifest(pipeline):
    out = pipeline / "train"
    m = load_model(out / "model.npz")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["model_fingerprint"] == m.fingerprint_
    assert manifest["vocab_size"] == m.vocab_size == 2000
    assert manifest["config"]["model"]["order"] == 3
    assert (out / "train_log.csv").exists()


def test_missing_file_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope.txt"
    assert run("train", "--train", missing, "-o", tmp_path / "o") == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_k_exits_2(pipeline, tmp_path):
    model = pipeline / "train" / "model.npz"
    assert run("score", "--model", model, "--corpus", pipeline / "words.csv", "--k", 0, "-o", tmp_path) == 2


def test_score_rows_and_reported_r(pipeline):
    out = pipeline / "score"
    words = load_words(pipeline / "words.csv")
    n_tokens = max(w.token_span[1] for w in words if w.story_id == "story0")
    scored = pd.read_csv(out / "scored.csv")
    assert (scored.story_id == "story0").sum() == n_tokens
    assert len(scored) == json.loads((out / "manifest.json").read_text())["n_tokens"]
    manifest = json.loads((out / "manifest.json").read_text())
    ok = scored.successor_surprisal.notna()
    assert manifest["pearson_r"] == pytest.approx(pearson_r(scored.successor_surprisal[ok], scored.entropy[ok]), abs=1e-12)
    assert manifest["k_list"] == [5, 50, 2000]


def test_unigram_model_has_constant_entropy(pipeline, tmp_path):
    assert run("train", "--train", pipeline / "train.txt", "--order", 1, "--vocab-size", 500, "-o", tmp_path / "t") == 0
    assert run("score", "--model", tmp_path / "t" / "model.npz", "--corpus", pipeline / "words.csv", "-o", tmp_path / "s") == 0
    scored = pd.read_csv(tmp_path / "s" / "scored.csv")
    assert np.ptp(scored.entropy) < 1e-12


def test_analyze_detects_planted_entropy_effect(pipeline, tmp_path):
    rts = planted_rts(pipeline, {"entropy": 15.0})
    out = tmp_path / "an"
    code = run("analyze", "--scored", pipeline / "score" / "scored.csv", "--words", pipeline / "words.csv",
               "--rts", rts, "--partition", "all", "--set", "lmm.random_slopes=none", "-o", out)
    assert code == 0
    coef = pd.read_csv(out / "coef_full.csv")
    assert list(coef.columns) == ["term", "beta", "se", "t"]
    assert {"successor_surprisal", "entropy", "surprisal"} <= set(coef.term)
    lrt = pd.read_csv(out / "lrt.csv").set_index("dropped")
    assert lrt.loc["entropy", "p"] < 1e-3
    assert lrt.loc["entropy", "df"] == 1
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["partition"]["seed"] == 1
    assert "LRT entropy" in (out / "report.txt").read_text()


def test_ksweep_outputs(pipeline, tmp_path):
    rts = planted_rts(pipeline, {"entropy": 10.0}, seed=1)
    out = tmp_path / "ks"
    code = run("ksweep", "--scored", pipeline / "score" / "scored.csv", "--words", pipeline / "words.csv",
               "--rts", rts, "--partition", "all", "--set", "ksweep.random_slopes=none", "-o", out)
    assert code == 0
    coefs = pd.read_csv(out / "ksweep_coefficients.csv")
    corr = pd.read_csv(out / "ksweep_correlations.csv")
    assert list(coefs.K) == list(corr.K) == [5, 50, 2000]
    assert corr.set_index("K").loc[2000, "r_total_entropy"] == pytest.approx(1.0, abs=1e-12)
    assert (out / "manifest.json").exists()


def test_ksweep_missing_k(pipeline, tmp_path):
    rts = planted_rts(pipeline, {"entropy": 10.0}, seed=1)
    code = run("ksweep", "--scored", pipeline / "score" / "scored.csv", "--words", pipeline / "words.csv",
               "--rts", rts, "--k", 7, "-o", tmp_path)
    assert code == 2


def test_correlate(pipeline, tmp_path):
    assert run("correlate", "--scored", pipeline / "score" / "scored.csv", "-o", tmp_path) == 0
    corr = pd.read_csv(tmp_path / "correlations.csv")
    assert list(corr.K) == [5, 50, 2000]
    assert (tmp_path / "scatter.csv").exists()


def test_flags_override_config(tmp_path):
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(yaml.safe_dump({"model": {"order": 5}, "seed": 3}))
    assert load_config(cfg_path)["model"]["order"] == 5
    assert load_config(cfg_path, ["model.order=2"])["model"]["order"] == 2
    (tmp_path / "t.txt").write_text("a b c a b c. a b d.\n\nb c a b.", encoding="utf-8")
    assert run("train", "-c", cfg_path, "--train", tmp_path / "t.txt", "--order", 2, "-o", tmp_path / "o") == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["model"]["order"] == 2
    assert manifest["config"]["seed"] == 3

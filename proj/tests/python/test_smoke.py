import math

import pytest

import ahbd

SMALL = [
    "model.n_layers=2", "model.n_heads=2", "model.d_model=16", "model.d_head=8", "model.d_ff=16",
    "model.vocab_size=24", "model.max_seq=16",
    "corpus.n_train=80", "corpus.n_test=40", "corpus.n_calib=50", "corpus.n_heldout=10",
    "corpus.n_defense=8", "corpus.len=6", "corpus.min_len=6",
    "clean_train.epochs=1", "implant.epochs=1", "defense.max_rounds=1", "defense.align_steps=2",
]


def test_cosine_examples():
    assert ahbd.attn_cosine([[1, 0], [0, 0]], [[0, 1], [0, 0]]) == 0.0
    assert ahbd.attn_cosine([[1, 0], [0, 1]], [[1, 1], [1, 1]]) == pytest.approx(1 / math.sqrt(2))
    with pytest.raises(ahbd.DegenerateError):
        ahbd.attn_cosine([[1, 0]], [[0, 0]])
    with pytest.raises(ahbd.DimensionError):
        ahbd.attn_cosine([[1, 0]], [[1, 0, 0]])


def test_pair_stats_and_scores():
    same = [[[0.25, 0.75]]] * 4
    s = ahbd.pair_similarity_stats(same, heads_per_layer=2)
    assert s["proportion"] == 1.0
    assert s["pair_count"] == 6
    assert ahbd.safety_scores([0.5, 1.0], [0.2, 0.99], 0.7)[1] == pytest.approx(0.007)
    assert ahbd.partition_heads([0.007, 0.85, 0.5], 0.3) == ["suspicious", "safe", "intermediate"]
    with pytest.raises(ahbd.ContractError):
        ahbd.partition_heads([0.5], 0.7)
    assert ahbd.percentile([1, 2, 3, 4], 0.5) == 2.5


def test_model_roundtrip(tmp_path):
    cfg = ahbd.ModelConfig()
    cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_head, cfg.vocab_size, cfg.max_seq = 1, 2, 8, 4, 16, 8
    m = ahbd.Model.init(cfg, seed=3)
    path = tmp_path / "m.ckpt"
    m.save(path)
    assert ahbd.Model.load(path) == m
    att = m.attention([1, 2, 3])
    assert len(att) == 2
    for a in att:
        for i, row in enumerate(a):
            assert sum(row) == pytest.approx(1.0, abs=1e-5)
            assert all(v == 0.0 for v in row[i + 1:])
    with pytest.raises(ahbd.IndexError):
        m.predict_next([99])
    with pytest.raises(ahbd.LengthError):
        m.generate([1] * 8, 1)


def test_tiny_pipeline():
    cfg = ahbd.Config(overrides=SMALL)
    data = ahbd.Datasets(cfg)
    clean = ahbd.train_clean(cfg, data)
    victim = ahbd.implant(cfg, clean, data)
    assert not (clean == victim)
    report = ahbd.evaluate(victim, data)
    assert 0.0 <= report["ca"] <= 1.0 and 0.0 <= report["asr"] <= 1.0
    calib = ahbd.calibrate(victim, [p for p, _ in data.prompts("calib")])
    verdict, margin = ahbd.detect(victim, data.prompts("asr_test")[0][0], calib)
    assert verdict in ("clean", "suspect")
    assert (verdict == "suspect") == (margin > 0)
    heads = victim.classify_heads([data.prompts("asr_test")[0][0]])
    assert len(heads) == 4
    suspects = [data.prompts("asr_test")[0][0]]
    try:
        sanitized, rounds = ahbd.sanitize(victim, suspects, data.prompts("defense"), cfg)
        assert len(rounds["rounds"]) <= 1
    except ahbd.DefenseAborted:
        pass
    again = ahbd.train_clean(cfg, ahbd.Datasets(cfg))
    assert again.to_bytes() == clean.to_bytes()


def test_config_errors():
    with pytest.raises(ahbd.ContractError):
        ahbd.Config(overrides=["defense.nope=1"])
    assert '"alpha":0.7' in ahbd.Config().to_json().replace(" ", "")

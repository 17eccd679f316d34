import math
import random

import pytest

import parafill

TEXTS = [
    "The whale swam past the ship. Ahab stood on the deck of the Pequod.",
    "Alice followed the white rabbit down the hole, and never once considered how to get out again.",
]


def test_vocab_round_trip(tmp_path):
    vocab = parafill.Vocab.train(TEXTS, target_vocab=300)
    assert len(vocab) <= 300
    for text in TEXTS + ["unseen words: café — naïve"]:
        assert vocab.decode(vocab.encode(text)) == text
    vocab.save(str(tmp_path))
    again = parafill.Vocab.load(str(tmp_path))
    assert again.hash() == vocab.hash()


def test_entities_and_summaries():
    gazetteer = {"persons": ["Ahab"], "locations": ["Nantucket"], "organisations": [], "misc": []}
    ents = parafill.extract_entities("Then Ahab sailed from Nantucket with Mr Hosmer.", gazetteer)
    assert ents["persons"] == ["Ahab", "Hosmer"]
    assert ents["locations"] == ["Nantucket"]
    assert parafill.extract_entities("")["misc"] == []
    text = "The storm broke over the harbour. The harbour boats rocked in the storm. Sailors watched the sky."
    kws = parafill.keywords(text, 3)
    assert 0 < len(kws) <= 3
    assert parafill.key_sentence(text) in text


def test_metric_worked_examples():
    assert parafill.bleu("the cat sat", ["the cat sat on the mat"], max_n=3) == pytest.approx(math.exp(-1), abs=1e-9)
    r = parafill.rouge_n("a b c", "a b d", 1)
    assert r["precision"] == pytest.approx(2 / 3)
    assert r["f1"] == pytest.approx(2 / 3)
    assert parafill.bleu("call me ishmael", ["call me ishmael"]) == 1.0


def test_filters_renormalize():
    rng = random.Random(3)
    for _ in range(50):
        probs = [rng.random() for _ in range(rng.randint(2, 64))]
        total = sum(probs)
        probs = [p / total for p in probs]
        for out in (parafill.nucleus_filter(probs, 0.7), parafill.top_k_filter(probs, 3)):
            assert sum(out) == pytest.approx(1.0, abs=1e-12)
            assert all(o == 0.0 or o >= p for o, p in zip(out, probs))
    with pytest.raises(parafill.UsageError):
        parafill.nucleus_filter([0.5, 0.5], 0.0)


def test_size_and_split():
    assert parafill.size_class("x" * 450) == "S"
    sentence = "This sentence is long enough to matter in a paragraph of some size. "
    paragraphs = parafill.split_paragraphs(sentence * 20)
    assert paragraphs and all(p["size_class"] in ("S", "M", "L") for p in paragraphs)


def test_service_without_model():
    svc = parafill.Service(gazetteer={"persons": ["Ahab"], "locations": [], "organisations": [], "misc": []})
    status, body = svc.ner({"text": "Ahab looked out."})
    assert status == 200
    assert body["entities"]["persons"] == ["Ahab"]
    assert svc.generate({"p1": "x"})[0] == 503
    assert svc.generate("{broken")[0] == 400
    status, health = svc.health()
    assert status == 200 and health["model_loaded"] is False
    with pytest.raises(parafill.UsageError):
        parafill.Service(role="master")

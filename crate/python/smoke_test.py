"""Smoke test for the Python bindings.

Build and install the extension first, e.g.

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml
    pip install target/wheels/lmft_py-*.whl

then run `python python/smoke_test.py` from the repository root.
"""

import json
import math
import os
import sys
import tempfile

import lmft_py

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TOY = os.path.join(ROOT, "data", "toy")


def read_jsonl(name):
    with open(os.path.join(TOY, name)) as f:
        return [json.loads(line) for line in f if line.strip()]


def main():
    with open(os.path.join(TOY, "corpus.txt")) as f:
        docs = [line.strip() for line in f if line.strip()][:300]

    vocab = lmft_py.Vocab.train(docs, target_size=200)
    assert len(vocab) <= 200, len(vocab)
    text = "the tribunal finds that the claim is admissible"
    ids = vocab.encode(text)
    assert vocab.decode(ids) == text
    assert vocab.encode(text, markers=True)[0] == 2
    _, logp = vocab.segment("▁the")
    assert logp <= 0.0

    lm = lmft_py.LanguageModel(len(vocab), embedding_dim=16, hidden_dim=24, seed=1)
    log = lm.pretrain(vocab, docs[:250], docs[250:], epochs=1, lr=0.01, batch_size=8, bptt_len=20)
    assert log["stage"] == "pretrain" and len(log["epochs"]) == 1
    assert log["epochs"][0]["valid_metric"] < log["baseline"]
    ppl = lm.perplexity(vocab, docs[250:])
    assert math.isfinite(ppl) and ppl > 1.0

    data = read_jsonl("clf_overfit.jsonl")
    texts = [r["text"] for r in data]
    labels = [r["labels"] for r in data]
    clf = lmft_py.Classifier(lm, "binary", ["other", "reasoning"], seed=2)
    assert clf.labels == ["other", "reasoning"] and clf.task == "binary"
    log = clf.train(vocab, texts[:48], labels[:48], texts[48:], labels[48:], epochs=2, batch_size=8)
    assert log["metric"] == "pos_f1" and len(log["epochs"]) == 2
    scores = clf.scores(vocab, texts[:3])
    assert all(abs(sum(row) - 1.0) < 1e-6 for row in scores)
    preds = clf.predict(vocab, texts[:3])
    assert preds[0]["label"] in clf.labels

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "clf.ckpt")
        clf.save(path, vocab)
        back, back_vocab = lmft_py.Classifier.load(path)
        assert back_vocab.content_hash() == vocab.content_hash()
        assert back.scores(back_vocab, texts[:3]) == scores
        try:
            lmft_py.LanguageModel.load(os.path.join(d, "missing.ckpt"))
        except ValueError:
            pass
        else:
            raise AssertionError("loading a missing file should fail")

    assert abs(lmft_py.binary_f1([1, 1, 0], [1, 0, 1]) - 0.5) < 1e-12
    assert lmft_py.mean_f1([0, 1], [0, 1]) == 1.0
    rank2 = lmft_py.ndcg_at_k([[0.2, 0.9, 0.1]], [[0]], 5)
    assert abs(rank2 - 1.0 / math.log2(3)) < 1e-12

    print("python smoke test: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
